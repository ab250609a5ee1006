#include "fsd/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "fsd/error.hpp"

namespace fsd {

namespace {

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCode::io, "cannot open WAV file: " + path);

  char tag[5] = {0};
  in.read(tag, 4);
  check(in.good() && std::strncmp(tag, "RIFF", 4) == 0, ErrorCode::format,
        path + ": not a RIFF file");
  read_u32(in);  // riff size
  in.read(tag, 4);
  check(in.good() && std::strncmp(tag, "WAVE", 4) == 0, ErrorCode::format,
        path + ": not a WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  Waveform w;

  while (in.read(tag, 4)) {
    const std::uint32_t chunk_size = read_u32(in);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      check(have_fmt, ErrorCode::format, path + ": data chunk before fmt chunk");
      check(format == 1 && bits == 16, ErrorCode::format,
            path + ": only 16-bit PCM supported");
      check(channels == 1, ErrorCode::format, path + ": only mono supported");
      const std::uint32_t n = chunk_size / 2;
      std::vector<std::int16_t> raw(n);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n) * 2);
      check(in.good(), ErrorCode::format, path + ": truncated data chunk");
      w.samples.resize(n);
      for (std::uint32_t i = 0; i < n; ++i) w.samples[i] = raw[i] / 32768.0;
      w.sample_rate = static_cast<int>(rate);
      check(!w.samples.empty(), ErrorCode::format, path + ": empty audio");
      return w;
    } else {
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  raise(ErrorCode::format, path + ": no data chunk found");
}

void write_wav(const std::string& path, const Waveform& w) {
  check_arg(!w.samples.empty(), "write_wav: empty waveform");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorCode::io, "cannot create WAV file: " + path);

  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  write_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (double s : w.samples) {
    const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    const auto v = static_cast<std::int16_t>(std::lrint(clamped * 32768.0));
    write_u16(out, static_cast<std::uint16_t>(v));
  }
  check(out.good(), ErrorCode::io, "failed writing WAV file: " + path);
}

}  // namespace fsd
