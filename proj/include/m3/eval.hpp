#pragma once

#include "m3/common.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

// The metric panel, ensemble aggregation, and statistical machinery: rank
// AUROC with tie credit, exact small-sample Wilcoxon rank-sum, bootstrap
// differential analysis, calibration, and the grader-file comparison. All
// functions here are pure; inputs are plain probability/label vectors.

namespace m3 {

struct Confusion {
  Dim tp = 0, fp = 0, fn = 0, tn = 0;
  Dim n() const { return tp + fp + fn + tn; }
};

// Probability >= threshold counts as a positive call (documented boundary).
Confusion confusion(const std::vector<double>& probs, const std::vector<int>& labels,
                    double threshold = 0.5);

struct MetricsReport {
  double f1 = 0, precision = 0, sensitivity = 0, specificity = 0;
  double auroc = 0, kappa = 0, accuracy = 0, brier = 0;
  double threshold = 0.5;
  Dim n_pos = 0, n_neg = 0;
  std::string scenario, feature;
  bool auroc_defined = true;  // false when only one class is present
};

MetricsReport panel(const std::vector<double>& probs, const std::vector<int>& labels,
                    double threshold = 0.5, const std::string& scenario = "",
                    const std::string& feature = "");

// Rank-statistic AUROC with 0.5 credit for ties; requires both classes.
double rank_auroc(const std::vector<double>& probs, const std::vector<int>& labels);

struct RocPoint {
  double fpr = 0, tpr = 0, threshold = 0;
};
// One point per distinct score, descending threshold, anchored at (0,0).
std::vector<RocPoint> roc_curve(const std::vector<double>& probs,
                                const std::vector<int>& labels);
double trapezoid_auc(const std::vector<RocPoint>& curve);

struct Quartiles {
  double median = 0, q1 = 0, q3 = 0, iqr = 0;
};
// Linear-interpolation quartiles on sorted values.
Quartiles quartiles(std::vector<double> values);

// Median/IQR per metric over an ensemble of runs (>= 2). The auroc summary
// covers only runs where AUROC is defined and is absent if there are none.
std::map<std::string, Quartiles> aggregate(const std::vector<MetricsReport>& runs);

struct RankSumResult {
  double u = 0;  // Mann-Whitney U of the first group
  double p = 1;  // two-sided
  bool exact = false;
};
// Exact enumeration (midranks) for combined n <= 20; normal approximation
// with tie correction and 0.5 continuity correction above.
RankSumResult wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b);

// Per-record correctness of every run in an ensemble, aligned on record_ids.
struct CorrectnessRuns {
  std::vector<std::string> record_ids;
  std::vector<int> labels;                   // 0/1 per record
  std::vector<std::vector<char>> correct;    // [run][record] in {0,1}
};

enum class DiffStratum { all = 0, positives = 1, negatives = 2 };
enum class DiffCategory { both = 0, neither = 1, a_only = 2, b_only = 3 };
const char* stratum_name(DiffStratum s);
const char* category_name(DiffCategory c);

struct DifferentialCell {
  double mean = 0, sd = 0;  // population sd over iterations
};
struct DifferentialSummary {
  int iterations = 0;
  std::array<Dim, 3> n_records{};                          // per stratum
  std::array<std::array<DifferentialCell, 4>, 3> cells{};  // [stratum][category]
};
// Each iteration draws one run from each ensemble uniformly and splits the
// records into both/neither/a-only/b-only fractions per stratum. When
// `trace` is given it receives the raw per-iteration fractions
// ([iteration][stratum][category]); strata with no records stay zero.
using DifferentialTrace = std::vector<std::array<std::array<double, 4>, 3>>;
DifferentialSummary bootstrap_differential(const CorrectnessRuns& a, const CorrectnessRuns& b,
                                           int iterations, std::uint64_t seed,
                                           DifferentialTrace* trace = nullptr);

struct CalibrationBin {
  double lo = 0, hi = 0;
  Dim count = 0;
  double mean_pred = 0, observed = 0;
};
struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double brier = 0;
};
// Equal-width bins over [0,1]; the last bin includes 1.0; empty bins are
// reported with count 0.
CalibrationReport calibration(const std::vector<double>& probs, const std::vector<int>& labels,
                              int n_bins = 10);

struct GraderPanel {
  std::string grader_id, seniority;
  MetricsReport report;  // auroc_defined = false (binary calls)
  double fpr = 0, tpr = 0;
};
struct GraderGroup {
  std::string name;  // fellow | attending_other | attending_retina | overall
  std::vector<std::string> grader_ids;
  std::map<std::string, Quartiles> summary;  // median/IQR per metric
};
struct GraderComparison {
  std::vector<GraderPanel> graders;
  std::vector<GraderGroup> groups;
  RankSumResult model_vs_graders;  // model-ensemble F1s vs grader F1s
};
// CSV columns: record_id,grader_id,seniority,call with seniority in
// {fellow, attending_other, attending_retina} and call in {0,1}. Every
// grader must cover every record; gaps are an error listing the ids.
GraderComparison compare_with_graders(const std::vector<MetricsReport>& model_runs,
                                      const std::string& grader_csv_path,
                                      const std::vector<std::string>& record_ids,
                                      const std::vector<int>& labels);

// Serialization used by the command-line tool (stable formatting).
std::string metrics_json(const MetricsReport& report);
void write_predictions_csv(const std::string& path, const std::vector<std::string>& record_ids,
                           const std::string& scenario, const std::vector<double>& probs,
                           const std::vector<int>& labels);
void write_roc_csv(const std::string& path, const std::vector<RocPoint>& curve);
void write_calibration_csv(const std::string& path, const CalibrationReport& report);
void write_differential_csv(const std::string& path, const DifferentialSummary& summary);

}  // namespace m3
