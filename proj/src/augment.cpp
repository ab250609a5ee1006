#include "fsd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsd/error.hpp"

namespace fsd {

void SpecmixConfig::validate() const {
  check_arg(p_hyper >= 0.0 && p_hyper <= 1.0, "specmix: p_hyper must be in [0,1]");
  check_arg(max_span >= 1 && max_span <= kSubbandBins,
            "specmix: max_span must be in [1," + std::to_string(kSubbandBins) + "]");
}

void NoiseConfig::validate() const {
  check_arg(snr_db_lo <= snr_db_hi, "noise: snr range must satisfy lo <= hi");
  check_arg(isd_event_rate > 0.0, "noise: isd_event_rate must be positive");
  check_arg(isd_gain > 0.0, "noise: isd_gain must be positive");
  check_arg(fir_order >= 1, "noise: fir_order must be >= 1");
}

namespace {

// Uniformly random fixed-point-free permutation by rejection; falls back to
// a cyclic shift by a random nonzero offset.
std::vector<int> derangement(int n, Rng& rng) {
  std::vector<int> perm(n);
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      const int j = rng.uniform_int(0, i);
      std::swap(perm[i], perm[j]);
    }
    bool fixed_point = false;
    for (int i = 0; i < n; ++i) {
      if (perm[i] == i) {
        fixed_point = true;
        break;
      }
    }
    if (!fixed_point) return perm;
  }
  const int offset = rng.uniform_int(1, n - 1);
  for (int i = 0; i < n; ++i) perm[i] = (i + offset) % n;
  return perm;
}

}  // namespace

SpecmixReport random_specmix(std::vector<FeatureBlock>& batch,
                             const SpecmixConfig& cfg, RunMode mode, Rng& rng) {
  cfg.validate();
  check_arg(!batch.empty(), "specmix: empty batch");
  for (const auto& b : batch) {
    check_arg(b.values.size() ==
                  static_cast<std::size_t>(kSubbandBins) * kTargetFrames,
              "specmix: blocks must be 45x600");
  }

  SpecmixReport report;
  if (mode == RunMode::eval) return report;

  const double p = rng.uniform();
  if (p <= cfg.p_hyper) return report;

  const int batch_size = static_cast<int>(batch.size());
  if (batch_size < 2) return report;  // no donor exists

  const int span = rng.uniform_int(1, cfg.max_span);
  const int start = rng.uniform_int(0, kSubbandBins - span);
  const std::vector<int> perm = derangement(batch_size, rng);

  // Donors come from a pre-mix snapshot so the exchange is simultaneous.
  std::vector<std::vector<float>> source;
  source.reserve(batch.size());
  for (const auto& b : batch) source.push_back(b.values);

  for (int b = 0; b < batch_size; ++b) {
    const auto& donor = source[static_cast<std::size_t>(perm[b])];
    for (int f = start; f < start + span; ++f) {
      const std::size_t row = static_cast<std::size_t>(f) * kTargetFrames;
      std::copy(donor.begin() + row, donor.begin() + row + kTargetFrames,
                batch[static_cast<std::size_t>(b)].values.begin() + row);
    }
  }

  report.applied = true;
  report.band_start = start;
  report.band_span = span;
  report.donor_permutation = perm;
  return report;
}

namespace {

double power_of(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

}  // namespace

Waveform ssi_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng) {
  cfg.validate();
  check_arg(!w.samples.empty(), "ssi_noise: empty waveform");

  const double target_snr_db = rng.uniform(cfg.snr_db_lo, cfg.snr_db_hi);

  // White noise through a random FIR gives stationary colored noise.
  std::vector<double> fir(static_cast<std::size_t>(cfg.fir_order) + 1);
  for (double& c : fir) c = rng.normal();
  std::vector<double> noise(w.samples.size(), 0.0);
  std::vector<double> white(w.samples.size());
  for (double& v : white) v = rng.normal();
  for (std::size_t i = 0; i < noise.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < fir.size() && k <= i; ++k) acc += fir[k] * white[i - k];
    noise[i] = acc;
  }

  const double noise_power = power_of(noise);
  check(noise_power > 0.0, ErrorCode::runtime, "ssi_noise: degenerate noise draw");
  const double signal_power = power_of(w.samples);
  // Zero-energy input: scale against an absolute reference power of 1.
  const double ref_power = signal_power > 0.0 ? signal_power : 1.0;
  const double wanted_noise_power = ref_power / std::pow(10.0, target_snr_db / 10.0);
  const double gain = std::sqrt(wanted_noise_power / noise_power);

  Waveform out = w;
  for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] += gain * noise[i];
  return out;
}

Waveform isd_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng) {
  cfg.validate();
  check_arg(!w.samples.empty(), "isd_noise: empty waveform");

  const double duration_s =
      static_cast<double>(w.samples.size()) / static_cast<double>(w.sample_rate);
  const int n_events = rng.poisson(cfg.isd_event_rate * duration_s);

  Waveform out = w;
  const int n = static_cast<int>(w.samples.size());
  for (int e = 0; e < n_events; ++e) {
    const int pos = rng.uniform_int(0, n - 1);
    const double u = rng.uniform(-1.0, 1.0);
    // Amplitude rides on the local signal magnitude: silence stays silent.
    out.samples[static_cast<std::size_t>(pos)] +=
        cfg.isd_gain * std::abs(w.samples[static_cast<std::size_t>(pos)]) * u;
  }
  return out;
}

Waveform apply_noise(const Waveform& w, const NoiseConfig& cfg, Rng& rng) {
  switch (cfg.mode) {
    case NoiseMode::none:
      return w;
    case NoiseMode::isd:
      return isd_noise(w, cfg, rng);
    case NoiseMode::ssi:
      return ssi_noise(w, cfg, rng);
    case NoiseMode::both: {
      const Waveform mid = isd_noise(w, cfg, rng);
      return ssi_noise(mid, cfg, rng);
    }
  }
  raise(ErrorCode::invalid_argument, "apply_noise: bad mode");
}

}  // namespace fsd
