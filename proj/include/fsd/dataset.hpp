#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsd/wav.hpp"

namespace fsd {

struct ManifestRow {
  std::string utt_id;
  std::string audio_path;
  int label = 0;  // 0 bonafide, 1 spoof
};

// TSV with header "utt_id\taudio_path\tlabel"; labels are bonafide|spoof.
std::vector<ManifestRow> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
void write_key_file(const std::string& path, const std::vector<ManifestRow>& rows);

struct SyntheticSpec {
  int n_train_per_class = 50;
  int n_dev_per_class = 20;
  int n_eval_per_class = 30;
  int duration_samples = 27000;
  int sample_rate = 16000;
  std::uint64_t seed = 7;

  void validate() const;
};

std::string synthetic_spec_to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

// Harmonic-stack bonafide recipe; spoof perturbs the F0 contour and adds
// band-limited artifacts below ~400 Hz so the two classes differ inside the
// 45-bin subband.
Waveform synth_bonafide(const SyntheticSpec& spec, std::uint64_t utt_index);
Waveform synth_spoof(const SyntheticSpec& spec, std::uint64_t utt_index);

struct SynthOutput {
  std::string train_manifest;
  std::string dev_manifest;
  std::string eval_manifest;
  std::string train_key;
  std::string dev_key;
  std::string eval_key;
  int n_files = 0;
};

// Writes WAVs plus per-split manifests and key files under out_dir.
SynthOutput synth_corpus(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace fsd
