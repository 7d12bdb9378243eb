#include "m3/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace m3 {

namespace {

void check_prediction_vectors(const char* op, const std::vector<double>& probs,
                              const std::vector<int>& labels) {
  require(probs.size() == labels.size(),
          std::string(op) + ": " + std::to_string(probs.size()) + " probs vs " +
              std::to_string(labels.size()) + " labels");
  require(!probs.empty(), std::string(op) + ": empty input");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(std::isfinite(probs[i]) && probs[i] >= 0.0 && probs[i] <= 1.0,
            std::string(op) + ": probability at index " + std::to_string(i) +
                " is not in [0,1]");
    require(labels[i] == 0 || labels[i] == 1,
            std::string(op) + ": label at index " + std::to_string(i) + " is not 0/1");
  }
}

// Midranks (1-based, average rank within tie groups), doubled so they stay
// exact integers.
std::vector<long long> doubled_midranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<long long> dr(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // ranks i+1 .. j+1 share the average; doubled average = (i+1) + (j+1)
    const long long doubled = (long long)(i + 1) + (long long)(j + 1);
    for (std::size_t k = i; k <= j; ++k) dr[order[k]] = doubled;
    i = j + 1;
  }
  return dr;
}

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

Confusion confusion(const std::vector<double>& probs, const std::vector<int>& labels,
                    double threshold) {
  check_prediction_vectors("confusion", probs, labels);
  Confusion c;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    if (labels[i] == 1)
      (pred ? c.tp : c.fn)++;
    else
      (pred ? c.fp : c.tn)++;
  }
  return c;
}

double rank_auroc(const std::vector<double>& probs, const std::vector<int>& labels) {
  check_prediction_vectors("auroc", probs, labels);
  const Dim n_pos = Dim(std::count(labels.begin(), labels.end(), 1));
  const Dim n_neg = Dim(labels.size()) - n_pos;
  require(n_pos > 0 && n_neg > 0, "auroc: needs both classes present");
  std::vector<long long> dr = doubled_midranks(probs);
  long long doubled_rank_sum = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (labels[i] == 1) doubled_rank_sum += dr[i];
  const double w = double(doubled_rank_sum) / 2.0;
  return (w - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

MetricsReport panel(const std::vector<double>& probs, const std::vector<int>& labels,
                    double threshold, const std::string& scenario,
                    const std::string& feature) {
  Confusion c = confusion(probs, labels, threshold);
  MetricsReport r;
  r.threshold = threshold;
  r.scenario = scenario;
  r.feature = feature;
  r.n_pos = c.tp + c.fn;
  r.n_neg = c.fp + c.tn;
  const double n = double(c.n());
  auto ratio = [](double num, double den) { return den > 0 ? num / den : 0.0; };
  r.precision = ratio(double(c.tp), double(c.tp + c.fp));
  r.sensitivity = ratio(double(c.tp), double(c.tp + c.fn));
  r.specificity = ratio(double(c.tn), double(c.tn + c.fp));
  r.f1 = ratio(2.0 * r.precision * r.sensitivity, r.precision + r.sensitivity);
  r.accuracy = (double(c.tp) + double(c.tn)) / n;
  const double pe = (double(c.tp + c.fp) * double(c.tp + c.fn) +
                     double(c.fn + c.tn) * double(c.fp + c.tn)) /
                    (n * n);
  r.kappa = pe < 1.0 ? (r.accuracy - pe) / (1.0 - pe) : 0.0;
  double sq = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double d = probs[i] - double(labels[i]);
    sq += d * d;
  }
  r.brier = sq / n;
  if (r.n_pos > 0 && r.n_neg > 0) {
    r.auroc = rank_auroc(probs, labels);
    r.auroc_defined = true;
  } else {
    r.auroc = 0.0;
    r.auroc_defined = false;
  }
  return r;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& probs,
                                const std::vector<int>& labels) {
  check_prediction_vectors("roc_curve", probs, labels);
  const double n_pos = double(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = double(labels.size()) - n_pos;
  require(n_pos > 0 && n_neg > 0, "roc_curve: needs both classes present");

  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return probs[i] > probs[j]; });

  std::vector<RocPoint> curve;
  curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  Dim tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double score = probs[order[i]];
    while (i < order.size() && probs[order[i]] == score) {
      (labels[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    curve.push_back({double(fp) / n_neg, double(tp) / n_pos, score});
  }
  return curve;
}

double trapezoid_auc(const std::vector<RocPoint>& curve) {
  require(curve.size() >= 2, "trapezoid_auc: curve needs at least two points");
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  return area;
}

Quartiles quartiles(std::vector<double> values) {
  require(!values.empty(), "quartiles: empty input");
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * double(values.size() - 1);
    const std::size_t lo = std::size_t(std::floor(pos));
    const std::size_t hi = std::size_t(std::ceil(pos));
    const double frac = pos - double(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
  };
  Quartiles out;
  out.median = quantile(0.5);
  out.q1 = quantile(0.25);
  out.q3 = quantile(0.75);
  out.iqr = out.q3 - out.q1;
  return out;
}

std::map<std::string, Quartiles> aggregate(const std::vector<MetricsReport>& runs) {
  require(runs.size() >= 2, "aggregate: needs at least 2 runs, got " +
                                std::to_string(runs.size()));
  using Getter = double (*)(const MetricsReport&);
  const std::pair<const char*, Getter> metrics[] = {
      {"f1", [](const MetricsReport& r) { return r.f1; }},
      {"precision", [](const MetricsReport& r) { return r.precision; }},
      {"sensitivity", [](const MetricsReport& r) { return r.sensitivity; }},
      {"specificity", [](const MetricsReport& r) { return r.specificity; }},
      {"kappa", [](const MetricsReport& r) { return r.kappa; }},
      {"accuracy", [](const MetricsReport& r) { return r.accuracy; }},
      {"brier", [](const MetricsReport& r) { return r.brier; }},
  };
  std::map<std::string, Quartiles> out;
  for (auto& [name, get] : metrics) {
    std::vector<double> vals;
    for (const MetricsReport& r : runs) vals.push_back(get(r));
    out[name] = quartiles(vals);
  }
  std::vector<double> aurocs;
  for (const MetricsReport& r : runs)
    if (r.auroc_defined) aurocs.push_back(r.auroc);
  if (!aurocs.empty()) out["auroc"] = quartiles(aurocs);
  return out;
}

RankSumResult wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() >= 2 && b.size() >= 2,
          "wilcoxon_rank_sum: each group needs at least 2 values");
  const std::size_t n_a = a.size(), n_b = b.size(), n = n_a + n_b;
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<long long> dr = doubled_midranks(pooled);

  long long w2_obs = 0;  // doubled rank-sum of group a
  for (std::size_t i = 0; i < n_a; ++i) w2_obs += dr[i];
  const double w_obs = double(w2_obs) / 2.0;

  RankSumResult res;
  res.u = w_obs - double(n_a) * double(n_a + 1) / 2.0;

  if (n <= 20) {
    res.exact = true;
    // Enumerate every size-n_a subset of the pooled ranks.
    std::vector<std::size_t> idx(n_a);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    long long total = 0, count_le = 0, count_ge = 0;
    while (true) {
      long long s = 0;
      for (std::size_t i : idx) s += dr[i];
      ++total;
      if (s <= w2_obs) ++count_le;
      if (s >= w2_obs) ++count_ge;
      // advance combination
      std::size_t k = n_a;
      while (k > 0 && idx[k - 1] == n - n_a + (k - 1)) --k;
      if (k == 0) break;
      ++idx[k - 1];
      for (std::size_t j = k; j < n_a; ++j) idx[j] = idx[j - 1] + 1;
    }
    res.p = std::min(1.0, 2.0 * double(std::min(count_le, count_ge)) / double(total));
    return res;
  }

  // Normal approximation with tie correction and continuity correction.
  const double mu = double(n_a) * double(n + 1) / 2.0;
  std::vector<long long> sorted = dr;
  std::sort(sorted.begin(), sorted.end());
  double tie_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = double(j - i + 1);
    tie_sum += t * t * t - t;
    i = j + 1;
  }
  const double var = double(n_a) * double(n_b) / 12.0 *
                     (double(n + 1) - tie_sum / (double(n) * double(n - 1)));
  if (var <= 0) {
    res.p = 1.0;
    return res;
  }
  const double diff = w_obs - mu;
  const double cc = diff > 0 ? 0.5 : (diff < 0 ? -0.5 : 0.0);
  res.p = std::min(1.0, normal_two_sided_p((diff - cc) / std::sqrt(var)));
  return res;
}

const char* stratum_name(DiffStratum s) {
  switch (s) {
    case DiffStratum::all: return "all";
    case DiffStratum::positives: return "positives";
    case DiffStratum::negatives: return "negatives";
  }
  fail("stratum_name: invalid stratum");
}

const char* category_name(DiffCategory c) {
  switch (c) {
    case DiffCategory::both: return "both";
    case DiffCategory::neither: return "neither";
    case DiffCategory::a_only: return "a_only";
    case DiffCategory::b_only: return "b_only";
  }
  fail("category_name: invalid category");
}

DifferentialSummary bootstrap_differential(const CorrectnessRuns& a, const CorrectnessRuns& b,
                                           int iterations, std::uint64_t seed,
                                           DifferentialTrace* trace) {
  require(iterations >= 1, "bootstrap_differential: iterations must be >= 1");
  require(!a.correct.empty() && !b.correct.empty(),
          "bootstrap_differential: both ensembles need at least one run");
  require(a.record_ids == b.record_ids,
          "bootstrap_differential: ensembles cover different record ids");
  require(a.labels == b.labels, "bootstrap_differential: label vectors disagree");
  const std::size_t n_rec = a.record_ids.size();
  require(n_rec > 0, "bootstrap_differential: no records");
  for (const auto& run : a.correct)
    require(run.size() == n_rec, "bootstrap_differential: run row length mismatch");
  for (const auto& run : b.correct)
    require(run.size() == n_rec, "bootstrap_differential: run row length mismatch");

  DifferentialSummary out;
  out.iterations = iterations;
  for (std::size_t r = 0; r < n_rec; ++r) {
    out.n_records[0]++;
    out.n_records[a.labels[r] == 1 ? 1 : 2]++;
  }

  // fractions[stratum][category][iteration]
  std::array<std::array<std::vector<double>, 4>, 3> fractions;
  for (auto& s : fractions)
    for (auto& c : s) c.reserve(std::size_t(iterations));

  auto rng = seeded_rng(seed, 0xD1FFu);
  std::uniform_int_distribution<std::size_t> pick_a(0, a.correct.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_b(0, b.correct.size() - 1);

  for (int it = 0; it < iterations; ++it) {
    const auto& run_a = a.correct[pick_a(rng)];
    const auto& run_b = b.correct[pick_b(rng)];
    std::array<std::array<Dim, 4>, 3> counts{};
    for (std::size_t r = 0; r < n_rec; ++r) {
      const int cat = run_a[r] ? (run_b[r] ? 0 : 2) : (run_b[r] ? 3 : 1);
      counts[0][std::size_t(cat)]++;
      counts[a.labels[r] == 1 ? 1 : 2][std::size_t(cat)]++;
    }
    for (std::size_t s = 0; s < 3; ++s) {
      if (out.n_records[s] == 0) continue;
      for (std::size_t c = 0; c < 4; ++c)
        fractions[s][c].push_back(double(counts[s][c]) / double(out.n_records[s]));
    }
    if (trace) {
      std::array<std::array<double, 4>, 3> snap{};
      for (std::size_t s = 0; s < 3; ++s) {
        if (out.n_records[s] == 0) continue;
        for (std::size_t c = 0; c < 4; ++c)
          snap[s][c] = double(counts[s][c]) / double(out.n_records[s]);
      }
      trace->push_back(snap);
    }
  }

  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < 4; ++c) {
      const auto& v = fractions[s][c];
      if (v.empty()) continue;
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      double var = 0;
      for (double x : v) var += (x - mean) * (x - mean);
      out.cells[s][c] = {mean, std::sqrt(var / double(v.size()))};
    }
  return out;
}

CalibrationReport calibration(const std::vector<double>& probs, const std::vector<int>& labels,
                              int n_bins) {
  check_prediction_vectors("calibration", probs, labels);
  require(n_bins >= 1, "calibration: n_bins must be >= 1");
  CalibrationReport rep;
  rep.bins.resize(std::size_t(n_bins));
  std::vector<double> pred_sum(std::size_t(n_bins), 0.0), label_sum(std::size_t(n_bins), 0.0);
  for (int i = 0; i < n_bins; ++i) {
    rep.bins[std::size_t(i)].lo = double(i) / n_bins;
    rep.bins[std::size_t(i)].hi = double(i + 1) / n_bins;
  }
  double sq = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int bin = std::min(n_bins - 1, int(probs[i] * n_bins));
    rep.bins[std::size_t(bin)].count++;
    pred_sum[std::size_t(bin)] += probs[i];
    label_sum[std::size_t(bin)] += labels[i];
    const double d = probs[i] - labels[i];
    sq += d * d;
  }
  for (int i = 0; i < n_bins; ++i) {
    auto& b = rep.bins[std::size_t(i)];
    if (b.count > 0) {
      b.mean_pred = pred_sum[std::size_t(i)] / double(b.count);
      b.observed = label_sum[std::size_t(i)] / double(b.count);
    }
  }
  rep.brier = sq / double(probs.size());
  return rep;
}

GraderComparison compare_with_graders(const std::vector<MetricsReport>& model_runs,
                                      const std::string& grader_csv_path,
                                      const std::vector<std::string>& record_ids,
                                      const std::vector<int>& labels) {
  require(record_ids.size() == labels.size(),
          "compare_with_graders: record_ids and labels length mismatch");
  require(!record_ids.empty(), "compare_with_graders: no records");
  std::ifstream file(grader_csv_path);
  require(file.good(), "compare_with_graders: cannot open '" + grader_csv_path + "'");

  std::string line;
  require(bool(std::getline(file, line)), "compare_with_graders: empty grader file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "record_id,grader_id,seniority,call",
          "compare_with_graders: bad header '" + line +
              "' (expected record_id,grader_id,seniority,call)");

  const std::set<std::string> seniorities = {"fellow", "attending_other", "attending_retina"};
  struct GraderData {
    std::string seniority;
    std::map<std::string, int> calls;  // record_id -> 0/1
  };
  std::map<std::string, GraderData> graders;  // keyed by grader_id, sorted
  std::size_t row = 1;
  while (std::getline(file, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    require(cols.size() == 4, "compare_with_graders: row " + std::to_string(row) +
                                  " has " + std::to_string(cols.size()) +
                                  " columns, expected 4");
    require(seniorities.count(cols[2]) == 1,
            "compare_with_graders: row " + std::to_string(row) + ": unknown seniority '" +
                cols[2] + "'");
    require(cols[3] == "0" || cols[3] == "1",
            "compare_with_graders: row " + std::to_string(row) + ": call must be 0 or 1, got '" +
                cols[3] + "'");
    GraderData& g = graders[cols[1]];
    if (g.calls.empty())
      g.seniority = cols[2];
    else
      require(g.seniority == cols[2], "compare_with_graders: row " + std::to_string(row) +
                                          ": grader '" + cols[1] +
                                          "' listed with two seniorities");
    require(g.calls.emplace(cols[0], cols[3] == "1" ? 1 : 0).second,
            "compare_with_graders: row " + std::to_string(row) + ": duplicate call for grader '" +
                cols[1] + "' on record '" + cols[0] + "'");
  }
  require(!graders.empty(), "compare_with_graders: grader file lists no graders");

  // Coverage check: every grader must call every record.
  for (const auto& [gid, g] : graders) {
    std::vector<std::string> missing;
    for (const std::string& rid : record_ids)
      if (g.calls.find(rid) == g.calls.end()) missing.push_back(rid);
    if (!missing.empty()) {
      std::string msg = "compare_with_graders: grader '" + gid + "' covers " +
                        std::to_string(record_ids.size() - missing.size()) + "/" +
                        std::to_string(record_ids.size()) + " records; missing:";
      for (const std::string& rid : missing) msg += " " + rid;
      fail(msg);
    }
  }

  GraderComparison cmp;
  std::vector<double> grader_f1s;
  std::map<std::string, std::vector<std::string>> by_seniority;
  for (const auto& [gid, g] : graders) {
    std::vector<double> calls;
    for (const std::string& rid : record_ids) calls.push_back(double(g.calls.at(rid)));
    GraderPanel gp;
    gp.grader_id = gid;
    gp.seniority = g.seniority;
    gp.report = panel(calls, labels, 0.5, "grader", "");
    gp.report.auroc_defined = false;  // binary calls: a single ROC point, no curve
    gp.report.auroc = 0.0;
    gp.tpr = gp.report.sensitivity;
    gp.fpr = 1.0 - gp.report.specificity;
    grader_f1s.push_back(gp.report.f1);
    by_seniority[g.seniority].push_back(gid);
    cmp.graders.push_back(std::move(gp));
  }

  auto group_of = [&](const std::string& name, const std::vector<std::string>& ids) {
    GraderGroup grp;
    grp.name = name;
    grp.grader_ids = ids;
    std::vector<MetricsReport> reports;
    for (const GraderPanel& gp : cmp.graders)
      if (std::find(ids.begin(), ids.end(), gp.grader_id) != ids.end())
        reports.push_back(gp.report);
    using Getter = double (*)(const MetricsReport&);
    const std::pair<const char*, Getter> metrics[] = {
        {"f1", [](const MetricsReport& r) { return r.f1; }},
        {"precision", [](const MetricsReport& r) { return r.precision; }},
        {"sensitivity", [](const MetricsReport& r) { return r.sensitivity; }},
        {"specificity", [](const MetricsReport& r) { return r.specificity; }},
        {"kappa", [](const MetricsReport& r) { return r.kappa; }},
        {"accuracy", [](const MetricsReport& r) { return r.accuracy; }},
    };
    for (auto& [mname, get] : metrics) {
      std::vector<double> vals;
      for (const MetricsReport& r : reports) vals.push_back(get(r));
      grp.summary[mname] = quartiles(vals);
    }
    return grp;
  };
  for (const char* sen : {"fellow", "attending_other", "attending_retina"})
    if (by_seniority.count(sen)) cmp.groups.push_back(group_of(sen, by_seniority[sen]));
  std::vector<std::string> all_ids;
  for (const auto& [gid, g] : graders) all_ids.push_back(gid);
  cmp.groups.push_back(group_of("overall", all_ids));

  if (model_runs.size() >= 2 && grader_f1s.size() >= 2) {
    std::vector<double> model_f1s;
    for (const MetricsReport& r : model_runs) model_f1s.push_back(r.f1);
    cmp.model_vs_graders = wilcoxon_rank_sum(model_f1s, grader_f1s);
  }
  return cmp;
}

std::string metrics_json(const MetricsReport& r) {
  nlohmann::json j;
  j["f1"] = r.f1;
  j["precision"] = r.precision;
  j["sensitivity"] = r.sensitivity;
  j["specificity"] = r.specificity;
  if (r.auroc_defined)
    j["auroc"] = r.auroc;
  else
    j["auroc"] = nullptr;
  j["kappa"] = r.kappa;
  j["accuracy"] = r.accuracy;
  j["brier"] = r.brier;
  j["threshold"] = r.threshold;
  j["n_pos"] = r.n_pos;
  j["n_neg"] = r.n_neg;
  j["scenario"] = r.scenario;
  j["feature"] = r.feature;
  return j.dump(2);
}

void write_predictions_csv(const std::string& path, const std::vector<std::string>& record_ids,
                           const std::string& scenario, const std::vector<double>& probs,
                           const std::vector<int>& labels) {
  require(record_ids.size() == probs.size() && probs.size() == labels.size(),
          "write_predictions_csv: vector length mismatch");
  std::ofstream f(path);
  require(f.good(), "write_predictions_csv: cannot write '" + path + "'");
  f << "record_id,scenario,probability,label\n";
  for (std::size_t i = 0; i < probs.size(); ++i)
    f << record_ids[i] << "," << scenario << "," << fmt(probs[i]) << "," << labels[i] << "\n";
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& curve) {
  std::ofstream f(path);
  require(f.good(), "write_roc_csv: cannot write '" + path + "'");
  f << "fpr,tpr,threshold\n";
  for (const RocPoint& p : curve)
    f << fmt(p.fpr) << "," << fmt(p.tpr) << "," << fmt(p.threshold) << "\n";
}

void write_calibration_csv(const std::string& path, const CalibrationReport& rep) {
  std::ofstream f(path);
  require(f.good(), "write_calibration_csv: cannot write '" + path + "'");
  f << "bin_lo,bin_hi,count,mean_pred,observed\n";
  for (const CalibrationBin& b : rep.bins)
    f << fmt(b.lo) << "," << fmt(b.hi) << "," << b.count << "," << fmt(b.mean_pred) << ","
      << fmt(b.observed) << "\n";
  f << "# brier," << fmt(rep.brier) << "\n";
}

void write_differential_csv(const std::string& path, const DifferentialSummary& s) {
  std::ofstream f(path);
  require(f.good(), "write_differential_csv: cannot write '" + path + "'");
  f << "stratum,category,mean,sd,iterations\n";
  for (std::size_t st = 0; st < 3; ++st)
    for (std::size_t c = 0; c < 4; ++c)
      f << stratum_name(DiffStratum(st)) << "," << category_name(DiffCategory(c)) << ","
        << fmt(s.cells[st][c].mean) << "," << fmt(s.cells[st][c].sd) << "," << s.iterations
        << "\n";
}

}  // namespace m3
