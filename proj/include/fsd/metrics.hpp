#pragma once

#include <string>
#include <vector>

namespace fsd {

inline constexpr int kLabelBonafide = 0;
inline constexpr int kLabelSpoof = 1;
inline constexpr int kLabelUnknown = -1;

struct TrialScore {
  std::string trial_id;
  double score = 0.0;  // higher = more bonafide
  int label = kLabelUnknown;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// EER by sweeping all distinct scores and linearly interpolating the
// FAR/FRR crossing.  Accept means score >= threshold.
EerResult compute_eer(const std::vector<TrialScore>& scores);

// Tandem detection cost constants.  The three ASV rates are inputs, not
// computed; c_miss/c_fa are shared between the ASV and CM terms.
struct TdcfCosts {
  double p_spoof = 0.05;
  double p_target = 0.9405;
  double p_nontarget = 0.0495;
  double c_miss = 1.0;
  double c_fa = 10.0;
  double p_miss_asv = 0.05;
  double p_fa_asv = 0.01;
  double p_miss_spoof_asv = 0.5;

  void validate() const;
  // t-DCF(s) = C1 * Pmiss_cm(s) + C2 * Pfa_cm(s), normalized by min(C1,C2).
  double c1() const;
  double c2() const;
};

std::string tdcf_costs_to_json(const TdcfCosts& costs);
TdcfCosts tdcf_costs_from_json(const std::string& text);

// Minimum over CM thresholds of the normalized tandem cost.
double compute_min_tdcf(const std::vector<TrialScore>& scores, const TdcfCosts& costs);

// ---- score / key files ----

// Score file: one "trial_id<TAB>score" line per trial.
std::vector<TrialScore> read_score_file(const std::string& path);
void write_score_file(const std::string& path, const std::vector<TrialScore>& scores);

// Key file: one "trial_id<TAB>bonafide|spoof" line per trial.
void read_key_file(const std::string& path, std::vector<TrialScore>& scores);

// ---- ablation report ----

struct AblationRun {
  double p_hyper = 0.0;
  double eer = 0.0;      // fraction in [0,1]
  double min_tdcf = 0.0;
};

// Grid of p_hyper rows with EER(%) and min-tDCF columns, sorted ascending,
// with the "1(no Specmix)" label on the p_hyper = 1 row.
std::string ablation_table(std::vector<AblationRun> runs,
                           const std::string& system_name = "MPIF-Res2Net");
std::string ablation_csv(std::vector<AblationRun> runs);
std::vector<AblationRun> parse_ablation_csv(const std::string& text);

}  // namespace fsd
