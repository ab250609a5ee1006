#include "fsd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

#include "fsd/error.hpp"

namespace fsd {

using nlohmann::json;

namespace {

struct SweepPoint {
  double threshold;  // accept iff score >= threshold
  double far;        // fraction of spoof accepted
  double frr;        // fraction of bonafide rejected
};

// FAR/FRR at every distinct score plus the accept-all endpoint, in order of
// increasing threshold (FAR non-increasing, FRR non-decreasing).
std::vector<SweepPoint> roc_sweep(const std::vector<TrialScore>& scores,
                                  std::size_t* n_bona_out = nullptr,
                                  std::size_t* n_spoof_out = nullptr) {
  std::vector<double> bona, spoof;
  for (const auto& s : scores) {
    check_arg(std::isfinite(s.score), "metrics: non-finite score for " + s.trial_id);
    if (s.label == kLabelBonafide) {
      bona.push_back(s.score);
    } else if (s.label == kLabelSpoof) {
      spoof.push_back(s.score);
    } else {
      raise(ErrorCode::invalid_argument, "metrics: unlabeled trial " + s.trial_id);
    }
  }
  check_arg(!bona.empty() && !spoof.empty(),
            "metrics: need at least one bonafide and one spoof trial");
  std::sort(bona.begin(), bona.end());
  std::sort(spoof.begin(), spoof.end());

  std::vector<double> thresholds;
  thresholds.reserve(bona.size() + spoof.size());
  thresholds.insert(thresholds.end(), bona.begin(), bona.end());
  thresholds.insert(thresholds.end(), spoof.begin(), spoof.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double nb = static_cast<double>(bona.size());
  const double ns = static_cast<double>(spoof.size());
  std::vector<SweepPoint> points;
  points.reserve(thresholds.size() + 1);
  // accept-all pseudo-threshold below every score
  points.push_back({thresholds.front() - 1.0, 1.0, 0.0});
  for (double t : thresholds) {
    const auto n_spoof_accepted =
        spoof.end() - std::lower_bound(spoof.begin(), spoof.end(), t);
    const auto n_bona_rejected =
        std::lower_bound(bona.begin(), bona.end(), t) - bona.begin();
    points.push_back({t, static_cast<double>(n_spoof_accepted) / ns,
                      static_cast<double>(n_bona_rejected) / nb});
  }
  if (n_bona_out) *n_bona_out = bona.size();
  if (n_spoof_out) *n_spoof_out = spoof.size();
  return points;
}

}  // namespace

EerResult compute_eer(const std::vector<TrialScore>& scores) {
  const std::vector<SweepPoint> points = roc_sweep(scores);

  // FAR - FRR starts at 1 and ends <= 0; interpolate the sign change.
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double d_prev = points[i - 1].far - points[i - 1].frr;
    const double d_cur = points[i].far - points[i].frr;
    if (d_cur <= 0.0) {
      if (d_prev == d_cur) {
        return {points[i].frr, points[i].threshold};
      }
      const double alpha = d_prev / (d_prev - d_cur);
      const double eer =
          points[i - 1].frr + alpha * (points[i].frr - points[i - 1].frr);
      const double thr = points[i - 1].threshold +
                         alpha * (points[i].threshold - points[i - 1].threshold);
      return {eer, thr};
    }
  }
  // FAR stays above FRR through the last point: rejecting everything gives
  // FAR=0, FRR=1; interpolate against that endpoint.
  const SweepPoint& last = points.back();
  const double d_prev = last.far - last.frr;
  const double alpha = d_prev / (d_prev + 1.0);
  return {last.frr + alpha * (1.0 - last.frr), last.threshold};
}

void TdcfCosts::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  check_arg(prob(p_spoof) && prob(p_target) && prob(p_nontarget) && prob(p_miss_asv) &&
                prob(p_fa_asv) && prob(p_miss_spoof_asv),
            "tdcf: probabilities must be in [0,1]");
  check_arg(c_miss > 0.0 && c_fa > 0.0, "tdcf: costs must be positive");
  check_arg(std::abs(p_spoof + p_target + p_nontarget - 1.0) < 1e-6,
            "tdcf: priors must sum to 1");
  check(c1() > 0.0 && c2() > 0.0, ErrorCode::invalid_argument,
        "tdcf: degenerate costs (non-positive C1 or C2 normalizer)");
}

double TdcfCosts::c1() const {
  return p_target * (c_miss - c_miss * p_miss_asv) - p_nontarget * c_fa * p_fa_asv;
}

double TdcfCosts::c2() const { return c_fa * p_spoof * (1.0 - p_miss_spoof_asv); }

std::string tdcf_costs_to_json(const TdcfCosts& c) {
  json j;
  j["p_spoof"] = c.p_spoof;
  j["p_target"] = c.p_target;
  j["p_nontarget"] = c.p_nontarget;
  j["c_miss"] = c.c_miss;
  j["c_fa"] = c.c_fa;
  j["p_miss_asv"] = c.p_miss_asv;
  j["p_fa_asv"] = c.p_fa_asv;
  j["p_miss_spoof_asv"] = c.p_miss_spoof_asv;
  return j.dump();
}

TdcfCosts tdcf_costs_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::format, std::string("tdcf costs: bad JSON: ") + e.what());
  }
  TdcfCosts c;
  try {
    if (j.contains("p_spoof")) c.p_spoof = j["p_spoof"].get<double>();
    if (j.contains("p_target")) c.p_target = j["p_target"].get<double>();
    if (j.contains("p_nontarget")) c.p_nontarget = j["p_nontarget"].get<double>();
    if (j.contains("c_miss")) c.c_miss = j["c_miss"].get<double>();
    if (j.contains("c_fa")) c.c_fa = j["c_fa"].get<double>();
    if (j.contains("p_miss_asv")) c.p_miss_asv = j["p_miss_asv"].get<double>();
    if (j.contains("p_fa_asv")) c.p_fa_asv = j["p_fa_asv"].get<double>();
    if (j.contains("p_miss_spoof_asv"))
      c.p_miss_spoof_asv = j["p_miss_spoof_asv"].get<double>();
  } catch (const json::exception& e) {
    raise(ErrorCode::format, std::string("tdcf costs: bad field: ") + e.what());
  }
  c.validate();
  return c;
}

double compute_min_tdcf(const std::vector<TrialScore>& scores, const TdcfCosts& costs) {
  costs.validate();
  const std::vector<SweepPoint> points = roc_sweep(scores);
  const double c1 = costs.c1();
  const double c2 = costs.c2();
  const double norm = std::min(c1, c2);

  // points cover accept-all plus every distinct score; add reject-all.
  double best = (c1 * 1.0 + c2 * 0.0) / norm;
  for (const auto& p : points) {
    const double cost = (c1 * p.frr + c2 * p.far) / norm;
    best = std::min(best, cost);
  }
  return best;
}

// ---- score / key files ----

std::vector<TrialScore> read_score_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), ErrorCode::io, "cannot open score file: " + path);
  std::vector<TrialScore> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    check(tab != std::string::npos, ErrorCode::format,
          path + ":" + std::to_string(line_no) + ": expected trial_id<TAB>score");
    TrialScore t;
    t.trial_id = line.substr(0, tab);
    try {
      t.score = std::stod(line.substr(tab + 1));
    } catch (const std::exception&) {
      raise(ErrorCode::format,
            path + ":" + std::to_string(line_no) + ": bad score value");
    }
    out.push_back(std::move(t));
  }
  check(!out.empty(), ErrorCode::format, path + ": empty score file");
  return out;
}

void write_score_file(const std::string& path, const std::vector<TrialScore>& scores) {
  std::ofstream out(path);
  check(out.good(), ErrorCode::io, "cannot create score file: " + path);
  for (const auto& s : scores) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", s.score);
    out << s.trial_id << '\t' << buf << '\n';
  }
  check(out.good(), ErrorCode::io, "failed writing score file: " + path);
}

void read_key_file(const std::string& path, std::vector<TrialScore>& scores) {
  std::ifstream in(path);
  check(in.good(), ErrorCode::io, "cannot open key file: " + path);
  std::unordered_map<std::string, int> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    check(tab != std::string::npos, ErrorCode::format,
          path + ":" + std::to_string(line_no) + ": expected trial_id<TAB>label");
    const std::string id = line.substr(0, tab);
    const std::string label = line.substr(tab + 1);
    int value;
    if (label == "bonafide") {
      value = kLabelBonafide;
    } else if (label == "spoof") {
      value = kLabelSpoof;
    } else {
      raise(ErrorCode::format, path + ":" + std::to_string(line_no) +
                                   ": label must be bonafide or spoof, got " + label);
    }
    check(labels.emplace(id, value).second, ErrorCode::format,
          path + ": duplicate trial_id " + id);
  }
  for (auto& s : scores) {
    const auto it = labels.find(s.trial_id);
    check(it != labels.end(), ErrorCode::format,
          path + ": no label for trial " + s.trial_id);
    s.label = it->second;
  }
}

// ---- ablation report ----

namespace {

std::string p_hyper_label(double p) {
  std::ostringstream os;
  if (p == 1.0) {
    os << "1(no Specmix)";
  } else {
    os << p;
  }
  return os.str();
}

}  // namespace

std::string ablation_table(std::vector<AblationRun> runs, const std::string& system_name) {
  check_arg(!runs.empty(), "ablation_table: no runs");
  std::sort(runs.begin(), runs.end(),
            [](const AblationRun& a, const AblationRun& b) { return a.p_hyper < b.p_hyper; });

  std::ostringstream os;
  os << "+----------------+-----------------------------+\n";
  os << "|                |  " << system_name;
  for (std::size_t i = system_name.size(); i < 27; ++i) os << ' ';
  os << "|\n";
  os << "| (p_hyper)      |   EER(%)     |   min-tDCF   |\n";
  os << "+----------------+--------------+--------------+\n";
  for (const auto& r : runs) {
    char row[128];
    std::snprintf(row, sizeof(row), "| %-14s |   %8.2f   |   %8.4f   |\n",
                  p_hyper_label(r.p_hyper).c_str(), r.eer * 100.0, r.min_tdcf);
    os << row;
  }
  os << "+----------------+--------------+--------------+\n";
  return os.str();
}

std::string ablation_csv(std::vector<AblationRun> runs) {
  check_arg(!runs.empty(), "ablation_csv: no runs");
  std::sort(runs.begin(), runs.end(),
            [](const AblationRun& a, const AblationRun& b) { return a.p_hyper < b.p_hyper; });
  std::ostringstream os;
  os << "p_hyper,eer,min_tdcf\n";
  for (const auto& r : runs) {
    char row[128];
    std::snprintf(row, sizeof(row), "%.17g,%.17g,%.17g\n", r.p_hyper, r.eer, r.min_tdcf);
    os << row;
  }
  return os.str();
}

std::vector<AblationRun> parse_ablation_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  check(static_cast<bool>(std::getline(in, line)), ErrorCode::format,
        "ablation csv: empty input");
  check(line == "p_hyper,eer,min_tdcf", ErrorCode::format,
        "ablation csv: unexpected header: " + line);
  std::vector<AblationRun> runs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    AblationRun r;
    std::istringstream row(line);
    std::string cell;
    try {
      check(static_cast<bool>(std::getline(row, cell, ',')), ErrorCode::format,
            "ablation csv: short row");
      r.p_hyper = std::stod(cell);
      check(static_cast<bool>(std::getline(row, cell, ',')), ErrorCode::format,
            "ablation csv: short row");
      r.eer = std::stod(cell);
      check(static_cast<bool>(std::getline(row, cell, ',')), ErrorCode::format,
            "ablation csv: short row");
      r.min_tdcf = std::stod(cell);
    } catch (const std::invalid_argument&) {
      raise(ErrorCode::format, "ablation csv: bad number in row: " + line);
    }
    runs.push_back(r);
  }
  check(!runs.empty(), ErrorCode::format, "ablation csv: no rows");
  return runs;
}

}  // namespace fsd
