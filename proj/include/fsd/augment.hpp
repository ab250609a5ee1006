#pragma once

#include <cstdint>
#include <vector>

#include "fsd/dsp.hpp"
#include "fsd/rng.hpp"
#include "fsd/wav.hpp"

namespace fsd {

struct SpecmixConfig {
  double p_hyper = 0.5;  // gate threshold: a uniform draw p triggers when p > p_hyper
  int max_span = 10;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct SpecmixReport {
  bool applied = false;
  int band_start = 0;
  int band_span = 0;
  std::vector<int> donor_permutation;  // empty when not applied
};

enum class RunMode { train, eval };

// Per-batch Specmix: one gate draw per batch; when it fires, one contiguous
// frequency band of every sample is replaced by the same band of a donor
// sample chosen by a fixed-point-free permutation.  Labels are never touched.
SpecmixReport random_specmix(std::vector<FeatureBlock>& batch,
                             const SpecmixConfig& cfg, RunMode mode, Rng& rng);

enum class NoiseMode { none, isd, ssi, both };

struct NoiseConfig {
  NoiseMode mode = NoiseMode::none;
  double snr_db_lo = 10.0;
  double snr_db_hi = 40.0;
  double isd_event_rate = 10.0;  // expected impulses per second
  double isd_gain = 0.3;         // impulse amplitude scale relative to |signal|
  int fir_order = 5;             // shaping filter order for SSI noise
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Stationary signal-independent additive noise: white noise shaped by a
// random low-order FIR, scaled so the realized SNR equals a uniform draw
// from [snr_db_lo, snr_db_hi].
Waveform ssi_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng);

// Impulsive signal-dependent additive noise: Poisson-distributed single-sample
// impulses with amplitude proportional to the local signal magnitude.
Waveform isd_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng);

// Applies the configured waveform noise (ISD first, then SSI for mode both).
Waveform apply_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng);

}  // namespace fsd
