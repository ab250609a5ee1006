#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsd/wav.hpp"

namespace fsd {

inline constexpr int kStftWindow = 1728;
inline constexpr int kStftHop = 130;
inline constexpr int kSubbandBins = 45;
inline constexpr int kTargetFrames = 600;
inline constexpr double kLogFloorEps = 1e-12;
inline constexpr std::uint8_t kWindowHann = 0;

// freq_bins x frames real matrix, row-major by frequency bin.
struct Spectrogram {
  std::vector<double> bins;
  int freq_bins = 0;
  int frames = 0;
  int win = 0;
  int hop = 0;

  double at(int f, int t) const { return bins[static_cast<std::size_t>(f) * frames + t]; }
  double& at(int f, int t) { return bins[static_cast<std::size_t>(f) * frames + t]; }
};

// Final fixed-size feature, 45 x 600, stored as f32 so the on-disk cache and
// the in-memory pipeline output are bit-identical.
struct FeatureBlock {
  std::vector<float> values;  // kSubbandBins * kTargetFrames row-major

  float at(int f, int t) const {
    return values[static_cast<std::size_t>(f) * kTargetFrames + t];
  }
};

struct FrontendOptions {
  int win = kStftWindow;
  int hop = kStftHop;
  double floor_eps = kLogFloorEps;
  bool standardize = false;  // per-utterance mean/var normalization
};

// Power spectrogram of the Hann-windowed short-time DFT.  No centering:
// frame k covers samples [k*hop, k*hop + win).
Spectrogram stft(const Waveform& w, int win = kStftWindow, int hop = kStftHop);

// Elementwise ln(max(power, floor_eps)).
Spectrogram log_power(const Spectrogram& spec, double floor_eps = kLogFloorEps);

// Keep rows 0..44 (the 0-400 Hz region at 16 kHz with win 1728).
Spectrogram f0_subband(const Spectrogram& spec);

// Truncate to `target` frames, or tile the matrix along time and truncate.
FeatureBlock fix_frames(const Spectrogram& spec, int target = kTargetFrames);

FeatureBlock standardize(const FeatureBlock& block);

// Whole pipeline: stft -> log_power -> f0_subband -> fix_frames
// (-> standardize when requested).
FeatureBlock extract_features(const Waveform& w, const FrontendOptions& opt = {});

// Feature cache file, little-endian:
//   magic "F0SB", version u16, win u32, hop u32, rows u16, cols u16,
//   eps f64, window-id u8, then rows*cols f32 row-major.
void write_feature_cache(const std::string& path, const FeatureBlock& block,
                         const FrontendOptions& opt = {});
FeatureBlock read_feature_cache(const std::string& path,
                                FrontendOptions* opt_out = nullptr);
bool is_valid_feature_cache(const std::string& path);

}  // namespace fsd
