#pragma once

#include <string>
#include <vector>

namespace fsd {

// 16-bit PCM mono audio, samples normalized to [-1, 1).
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
};

Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace fsd
