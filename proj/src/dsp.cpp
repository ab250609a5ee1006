#include "fsd/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include "fsd/error.hpp"

namespace fsd {

namespace {

// One cached FFTW plan per window size.  Plan creation is not thread-safe;
// execution through fftw_execute on the plan's own buffers is serialized by
// the same mutex since the frontend is cheap relative to training.
class RealDft {
 public:
  explicit RealDft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n) / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealDft() {
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealDft(const RealDft&) = delete;
  RealDft& operator=(const RealDft&) = delete;

  // Writes |X_k|^2 for k in [0, n/2] into power.
  void power_spectrum(const double* frame, double* power) {
    std::memcpy(in_, frame, sizeof(double) * static_cast<std::size_t>(n_));
    fftw_execute(plan_);
    const int bins = n_ / 2 + 1;
    for (int k = 0; k < bins; ++k) {
      power[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
    }
  }

 private:
  int n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

std::mutex g_dft_mutex;

std::vector<double> hann_window(int n) {
  // Periodic Hann, w[i] = 0.5 - 0.5*cos(2*pi*i/n).
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / n);
  }
  return w;
}

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.write(reinterpret_cast<char*>(b), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

Spectrogram stft(const Waveform& w, int win, int hop) {
  check_arg(win >= 2 && hop >= 1, "stft: invalid window/hop");
  const auto len = static_cast<std::int64_t>(w.samples.size());
  check(len >= win, ErrorCode::invalid_argument,
        "stft: input too short (" + std::to_string(len) + " samples, window " +
            std::to_string(win) + ")");

  const int frames = static_cast<int>((len - win) / hop) + 1;
  const int bins = win / 2 + 1;
  const std::vector<double> window = hann_window(win);

  Spectrogram spec;
  spec.freq_bins = bins;
  spec.frames = frames;
  spec.win = win;
  spec.hop = hop;
  spec.bins.assign(static_cast<std::size_t>(bins) * frames, 0.0);

  std::lock_guard<std::mutex> lock(g_dft_mutex);
  RealDft dft(win);
  std::vector<double> frame(win), power(bins);
  for (int t = 0; t < frames; ++t) {
    const double* src = w.samples.data() + static_cast<std::int64_t>(t) * hop;
    for (int i = 0; i < win; ++i) frame[i] = src[i] * window[i];
    dft.power_spectrum(frame.data(), power.data());
    for (int k = 0; k < bins; ++k) spec.at(k, t) = power[k];
  }
  return spec;
}

Spectrogram log_power(const Spectrogram& spec, double floor_eps) {
  check_arg(floor_eps > 0.0, "log_power: floor must be positive");
  Spectrogram out = spec;
  for (double& v : out.bins) {
    check_arg(v >= 0.0, "log_power: negative power entry");
    v = std::log(std::max(v, floor_eps));
  }
  return out;
}

Spectrogram f0_subband(const Spectrogram& spec) {
  check(spec.freq_bins >= kSubbandBins, ErrorCode::invalid_argument,
        "f0_subband: need >= " + std::to_string(kSubbandBins) + " bins, got " +
            std::to_string(spec.freq_bins));
  Spectrogram out;
  out.freq_bins = kSubbandBins;
  out.frames = spec.frames;
  out.win = spec.win;
  out.hop = spec.hop;
  out.bins.assign(spec.bins.begin(),
                  spec.bins.begin() + static_cast<std::size_t>(kSubbandBins) * spec.frames);
  return out;
}

FeatureBlock fix_frames(const Spectrogram& spec, int target) {
  check_arg(spec.frames >= 1, "fix_frames: empty spectrogram");
  check_arg(target >= 1, "fix_frames: target must be >= 1");
  check_arg(spec.freq_bins == kSubbandBins,
            "fix_frames: expected the 45-bin subband, got " +
                std::to_string(spec.freq_bins) + " bins");
  FeatureBlock block;
  block.values.resize(static_cast<std::size_t>(kSubbandBins) * target);
  for (int f = 0; f < kSubbandBins; ++f) {
    for (int t = 0; t < target; ++t) {
      block.values[static_cast<std::size_t>(f) * target + t] =
          static_cast<float>(spec.at(f, t % spec.frames));
    }
  }
  return block;
}

FeatureBlock standardize(const FeatureBlock& block) {
  double mean = 0.0;
  for (float v : block.values) mean += v;
  mean /= static_cast<double>(block.values.size());
  double var = 0.0;
  for (float v : block.values) {
    const double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(block.values.size());
  const double inv_std = 1.0 / std::sqrt(var + 1e-12);
  FeatureBlock out;
  out.values.resize(block.values.size());
  for (std::size_t i = 0; i < block.values.size(); ++i) {
    out.values[i] = static_cast<float>((block.values[i] - mean) * inv_std);
  }
  return out;
}

FeatureBlock extract_features(const Waveform& w, const FrontendOptions& opt) {
  const Spectrogram spec = stft(w, opt.win, opt.hop);
  const Spectrogram lps = log_power(spec, opt.floor_eps);
  const Spectrogram sub = f0_subband(lps);
  FeatureBlock block = fix_frames(sub, kTargetFrames);
  if (opt.standardize) block = standardize(block);
  return block;
}

void write_feature_cache(const std::string& path, const FeatureBlock& block,
                         const FrontendOptions& opt) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorCode::io, "cannot create feature cache: " + path);
  out.write("F0SB", 4);
  write_le<std::uint16_t>(out, 1);  // version
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(opt.win));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(opt.hop));
  write_le<std::uint16_t>(out, kSubbandBins);
  write_le<std::uint16_t>(out, kTargetFrames);
  write_le<double>(out, opt.floor_eps);
  write_le<std::uint8_t>(out, kWindowHann);
  out.write(reinterpret_cast<const char*>(block.values.data()),
            static_cast<std::streamsize>(block.values.size() * sizeof(float)));
  check(out.good(), ErrorCode::io, "failed writing feature cache: " + path);
}

FeatureBlock read_feature_cache(const std::string& path, FrontendOptions* opt_out) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCode::io, "cannot open feature cache: " + path);
  char magic[4];
  in.read(magic, 4);
  check(in.good() && std::memcmp(magic, "F0SB", 4) == 0, ErrorCode::format,
        path + ": bad feature cache magic");
  const auto version = read_le<std::uint16_t>(in);
  check(version == 1, ErrorCode::format, path + ": unsupported cache version");
  FrontendOptions opt;
  opt.win = static_cast<int>(read_le<std::uint32_t>(in));
  opt.hop = static_cast<int>(read_le<std::uint32_t>(in));
  const auto rows = read_le<std::uint16_t>(in);
  const auto cols = read_le<std::uint16_t>(in);
  opt.floor_eps = read_le<double>(in);
  const auto window_id = read_le<std::uint8_t>(in);
  check(rows == kSubbandBins && cols == kTargetFrames, ErrorCode::format,
        path + ": unexpected cache dimensions");
  check(window_id == kWindowHann, ErrorCode::format, path + ": unknown window id");
  FeatureBlock block;
  block.values.resize(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(block.values.data()),
          static_cast<std::streamsize>(block.values.size() * sizeof(float)));
  check(in.good(), ErrorCode::format, path + ": truncated feature cache");
  if (opt_out) *opt_out = opt;
  return block;
}

bool is_valid_feature_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) return false;
  char magic[4];
  in.read(magic, 4);
  if (!in.good() || std::memcmp(magic, "F0SB", 4) != 0) return false;
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  const std::streamoff expected =
      4 + 2 + 4 + 4 + 2 + 2 + 8 + 1 +
      static_cast<std::streamoff>(kSubbandBins) * kTargetFrames * 4;
  return size == expected;
}

}  // namespace fsd
