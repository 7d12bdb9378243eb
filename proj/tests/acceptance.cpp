// Acceptance suite: one PASS/FAIL line per criterion, exit code = number of
// failed criteria. Each criterion is self-contained and states its tolerance
// inline; the directional-replication criterion also reports its runtime.

#include "m3/model.hpp"
#include "m3/png_io.hpp"
#include "m3/saliency.hpp"
#include "m3/synth.hpp"
#include "m3/trainer.hpp"

#include "support/gradcheck.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace m3;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

fs::path work_root() {
  static const fs::path root = [] {
    const fs::path p =
        fs::temp_directory_path() / ("m3_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "<unreadable: " + path.string() + ">";
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Failure accumulator: empty string = criterion passed.
struct Issues {
  std::string text;
  int count = 0;
  void add(const std::string& msg) {
    if (count < 4) text += (count ? "; " : "") + msg;  // keep the line readable
    ++count;
  }
  void expect(bool ok, const std::string& msg) {
    if (!ok) add(msg);
  }
  std::string render() const {
    if (count <= 4) return text;
    return text + "; and " + std::to_string(count - 4) + " more";
  }
};

bool bitwise_equal(const Array<float>& a, const Array<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), std::size_t(a.size()) * sizeof(float)) == 0;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

std::string criterion_gradients() {
  Issues issues;
  const auto t0 = Clock::now();
  const auto tensor_cases = test::tensor_gradient_checks(20, 20250816);
  const auto attention_cases = test::attention_gradient_checks(20, 424242);
  const double secs = seconds_since(t0);

  double worst = 0;
  std::string worst_name = "-";
  auto scan = [&](const std::vector<test::GradCheckCase>& cases, const char* family) {
    issues.expect(!cases.empty(), std::string(family) + ": no ops checked");
    for (const auto& c : cases) {
      if (c.max_rel_err > worst) {
        worst = c.max_rel_err;
        worst_name = c.name;
      }
      issues.expect(c.max_rel_err < 1e-4,
                    std::string(family) + "/" + c.name + " rel err " +
                        fmt("%.3g", c.max_rel_err) + " >= 1e-4");
    }
  };
  scan(tensor_cases, "tensor_core");
  scan(attention_cases, "attention");
  issues.expect(secs < 60.0, "runtime " + fmt("%.1f", secs) + "s >= 60s");
  if (issues.count == 0)
    return "PASSDETAIL " + std::to_string(tensor_cases.size() + attention_cases.size()) +
           " ops x 20 instances, worst rel err " + fmt("%.2g", worst) + " (" + worst_name +
           "), " + fmt("%.1f", secs) + "s";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 2. Metric oracles
// ---------------------------------------------------------------------------

// Two-sided exact rank-sum p by direct enumeration of every size-n_a subset
// of the pooled midranks (written independently of the library).
double brute_force_ranksum_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = pooled.size(), n_a = a.size();

  // Midranks via sorting (average rank over each tie group). Midranks are
  // multiples of 1/2, so double sums compare exactly.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double mid = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }

  double w_obs = 0;
  for (std::size_t i = 0; i < n_a; ++i) w_obs += rank[i];

  long long total = 0, le = 0, ge = 0;
  std::vector<std::size_t> pick;
  std::function<void(std::size_t, double)> rec = [&](std::size_t next, double sum) {
    if (pick.size() == n_a) {
      ++total;
      if (sum <= w_obs) ++le;
      if (sum >= w_obs) ++ge;
      return;
    }
    if (n - next < n_a - pick.size()) return;
    for (std::size_t i = next; i < n; ++i) {
      pick.push_back(i);
      rec(i + 1, sum + rank[i]);
      pick.pop_back();
    }
  };
  rec(0, 0.0);
  return std::min(1.0, 2.0 * double(std::min(le, ge)) / double(total));
}

std::string criterion_metric_oracles() {
  Issues issues;
  const auto t0 = Clock::now();

  // (a) 50 enumerated confusion matrices, hand-formula oracles, exact match.
  std::vector<std::array<int, 4>> mats;  // tp, fp, fn, tn
  for (int tp : {0, 1, 3, 7, 12})
    for (int fp : {0, 2, 5})
      for (int fn : {0, 1, 4})
        for (int tn : {0, 3, 9}) {
          if (tp + fn == 0 || fp + tn == 0) continue;  // need both classes
          mats.push_back({tp, fp, fn, tn});
          if (mats.size() == 50) goto enumerated;
        }
enumerated:
  issues.expect(mats.size() == 50,
                "only " + std::to_string(mats.size()) + " matrices enumerated");
  for (const auto& [tp, fp, fn, tn] : mats) {
    std::vector<double> probs;
    std::vector<int> labels;
    auto push = [&](int reps, double p, int y) {
      for (int i = 0; i < reps; ++i) {
        probs.push_back(p);
        labels.push_back(y);
      }
    };
    push(tp, 0.9, 1);
    push(fn, 0.1, 1);
    push(fp, 0.9, 0);
    push(tn, 0.1, 0);
    const MetricsReport r = panel(probs, labels, 0.5, "cfp", "rpd");

    const double n = tp + fp + fn + tn;
    const double prec = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double sens = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    const double f1 = prec + sens > 0 ? 2.0 * prec * sens / (prec + sens) : 0.0;
    const double acc = (double(tp) + double(tn)) / n;
    const double pe =
        (double(tp + fp) * double(tp + fn) + double(fn + tn) * double(fp + tn)) / (n * n);
    const double kappa = pe < 1.0 ? (acc - pe) / (1.0 - pe) : 0.0;

    const std::string tag = "(" + std::to_string(tp) + "," + std::to_string(fp) + "," +
                            std::to_string(fn) + "," + std::to_string(tn) + ")";
    issues.expect(r.f1 == f1, "f1 mismatch at " + tag);
    issues.expect(r.accuracy == acc, "accuracy mismatch at " + tag);
    issues.expect(r.kappa == kappa, "kappa mismatch at " + tag);
  }

  // (b) AUROC: trapezoid integral of the ROC curve vs the rank formula,
  // |difference| < 1e-9 on 100 random score vectors (ties included).
  std::mt19937_64 rng = seeded_rng(7, 0xA0C);
  double worst_auroc_gap = 0;
  for (int rep = 0; rep < 100; ++rep) {
    std::uniform_int_distribution<int> len(5, 60), grid(0, 10);
    const int m = len(rng);
    std::vector<double> probs;
    std::vector<int> labels;
    for (int i = 0; i < m; ++i) {
      probs.push_back(double(grid(rng)) / 10.0);  // coarse grid forces ties
      labels.push_back(i < 2 ? i % 2 : int(rng() & 1));  // both classes present
    }
    const auto curve = roc_curve(probs, labels);
    double trap = 0;
    for (std::size_t i = 1; i < curve.size(); ++i)
      trap += 0.5 * (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr);
    const MetricsReport r = panel(probs, labels, 0.5, "cfp", "rpd");
    const double gap = std::abs(trap - r.auroc);
    worst_auroc_gap = std::max(worst_auroc_gap, gap);
    issues.expect(r.auroc_defined, "auroc undefined on rep " + std::to_string(rep));
    issues.expect(gap < 1e-9,
                  "trapezoid vs rank gap " + fmt("%.3g", gap) + " on rep " +
                      std::to_string(rep));
  }

  // (c) Exact Wilcoxon equals brute-force enumeration for all n_a, n_b <= 6
  // (the implementation requires >= 2 per group), several random tie-heavy
  // draws per size pair.
  for (std::size_t n_a = 2; n_a <= 6; ++n_a)
    for (std::size_t n_b = 2; n_b <= 6; ++n_b)
      for (int rep = 0; rep < 4; ++rep) {
        std::uniform_int_distribution<int> grid(0, 5);
        std::vector<double> a(n_a), b(n_b);
        for (double& v : a) v = grid(rng);
        for (double& v : b) v = grid(rng);
        const RankSumResult r = wilcoxon_rank_sum(a, b);
        const double p_oracle = brute_force_ranksum_p(a, b);
        issues.expect(r.exact, "n=" + std::to_string(n_a + n_b) + " not exact");
        issues.expect(r.p == p_oracle,
                      "p mismatch at n_a=" + std::to_string(n_a) + " n_b=" +
                          std::to_string(n_b) + " rep " + std::to_string(rep) + ": " +
                          fmt("%.12g", r.p) + " vs " + fmt("%.12g", p_oracle));
      }

  const double secs = seconds_since(t0);
  issues.expect(secs < 60.0, "runtime " + fmt("%.1f", secs) + "s >= 60s");
  if (issues.count == 0)
    return "PASSDETAIL 50 matrices exact, worst AUROC gap " + fmt("%.2g", worst_auroc_gap) +
           ", 100 rank-sum cases exact, " + fmt("%.1f", secs) + "s";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 3. Directional replication
// ---------------------------------------------------------------------------

std::string criterion_directional() {
  Issues issues;
  const auto t0 = Clock::now();

  // 2,000 pairs at 64 px: generator, split, and training defaults.
  const fs::path dir = work_root() / "directional";
  SynthConfig synth;  // defaults: 1000 participants x 2 visits, 64 px
  const std::vector<ExamRecord> records = generate_synthetic(synth, (dir / "data").string());
  const SplitAssignment assignment = split_participants(records, 0.7, 0.1, 0.2, 1);
  const BackboneConfig backbone;  // default 64 px backbone
  const TrainConfig cfg;          // paper defaults
  const DataSplit data = load_split(records, assignment, cfg.feature, backbone.input_size);

  const int n_seeds = 5;
  std::map<std::string, double> m3_median, nm_median;

  const EnsembleResult m3_ens =
      run_ensemble(ModelKind::m3, Scenario::fused, n_seeds, backbone, data, cfg);
  issues.expect(!m3_ens.partial, "m3 ensemble had failed runs");
  for (const char* s : {"cfp", "faf", "fused"}) {
    const auto it = m3_ens.summary.find(s);
    if (it == m3_ens.summary.end() || !it->second.count("auroc")) {
      issues.add(std::string("m3 ") + s + ": no auroc summary");
      continue;
    }
    m3_median[s] = it->second.at("auroc").median;
  }

  for (Scenario s : {Scenario::cfp, Scenario::faf, Scenario::fused}) {
    const EnsembleResult ens =
        run_ensemble(ModelKind::non_m3, s, n_seeds, backbone, data, cfg);
    issues.expect(!ens.partial, std::string("non-m3 ") + scenario_name(s) + " had failed runs");
    const auto it = ens.summary.find(scenario_name(s));
    if (it == ens.summary.end() || !it->second.count("auroc")) {
      issues.add(std::string("non-m3 ") + scenario_name(s) + ": no auroc summary");
      continue;
    }
    nm_median[scenario_name(s)] = it->second.at("auroc").median;
  }

  const double secs = seconds_since(t0);
  if (issues.count == 0) {
    for (const char* s : {"cfp", "faf", "fused"})
      issues.expect(m3_median[s] > nm_median[s],
                    std::string("median AUROC m3 ") + s + " " + fmt("%.4f", m3_median[s]) +
                        " <= non-m3 " + fmt("%.4f", nm_median[s]));
    issues.expect(m3_median["cfp"] - nm_median["cfp"] >= 0.02,
                  "cfp margin " + fmt("%.4f", m3_median["cfp"] - nm_median["cfp"]) + " < 0.02");
    issues.expect(m3_median["faf"] > m3_median["cfp"],
                  "m3 AUROC(faf) " + fmt("%.4f", m3_median["faf"]) + " <= AUROC(cfp) " +
                      fmt("%.4f", m3_median["cfp"]));
    issues.expect(nm_median["faf"] > nm_median["cfp"],
                  "non-m3 AUROC(faf) " + fmt("%.4f", nm_median["faf"]) + " <= AUROC(cfp) " +
                      fmt("%.4f", nm_median["cfp"]));
    issues.expect(secs <= 1800.0, "runtime " + fmt("%.0f", secs) + "s > 30 min");
  }
  if (issues.count == 0)
    return "PASSDETAIL median AUROC m3/non-m3: cfp " + fmt("%.3f", m3_median["cfp"]) + "/" +
           fmt("%.3f", nm_median["cfp"]) + ", faf " + fmt("%.3f", m3_median["faf"]) + "/" +
           fmt("%.3f", nm_median["faf"]) + ", fused " + fmt("%.3f", m3_median["fused"]) + "/" +
           fmt("%.3f", nm_median["fused"]) + ", " + fmt("%.0f", secs) + "s";
  return issues.render() + " (" + fmt("%.0f", secs) + "s)";
}

// ---------------------------------------------------------------------------
// 4. Ablation structure
// ---------------------------------------------------------------------------

// Flattened per-epoch loss trajectory of one training procedure.
std::vector<double> trajectory(const std::vector<PhaseResult>& phases) {
  std::vector<double> out;
  for (const PhaseResult& ph : phases)
    for (const EpochLog& e : ph.epochs) {
      for (int t = 0; t < 3; ++t)
        if (e.active[std::size_t(t)]) {
          out.push_back(e.train_loss[std::size_t(t)]);
          out.push_back(e.val_loss[std::size_t(t)]);
        }
      out.push_back(e.monitored_val);
    }
  return out;
}

// The fused-task losses only, for cross-procedure comparisons where the
// phase structure itself differs.
std::vector<double> fused_trajectory(const std::vector<PhaseResult>& phases) {
  std::vector<double> out;
  for (const PhaseResult& ph : phases)
    for (const EpochLog& e : ph.epochs)
      if (e.active[2]) {
        out.push_back(e.train_loss[2]);
        out.push_back(e.val_loss[2]);
      }
  return out;
}

std::string criterion_ablation() {
  Issues issues;

  const fs::path dir = work_root() / "ablation";
  SynthConfig synth;
  synth.n_participants = 12;
  synth.visits_per_participant = 1;
  synth.image_size = 24;
  synth.seed = 4;
  const auto records = generate_synthetic(synth, (dir / "data").string());
  const SplitAssignment assignment = split_participants(records, 0.7, 0.1, 0.2, 1);

  BackboneConfig backbone;
  backbone.input_size = 16;
  backbone.blocks = {{8, true}, {8, true}};
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs_stage1 = 3;
  cfg.max_epochs_finetune = 1;
  cfg.max_epochs_non_m3 = 3;
  cfg.seed = 11;
  const DataSplit data = load_split(records, assignment, cfg.feature, backbone.input_size);

  const RunArtifacts baseline =
      train_full(ModelKind::non_m3, Scenario::fused, backbone, data, cfg);

  TrainConfig both = cfg;
  both.no_attention = true;
  both.no_multitask = true;
  const RunArtifacts ablated =
      train_full(ModelKind::m3, Scenario::fused, backbone, data, both);

  // Full ablation == baseline, bitwise across the whole procedure.
  const std::vector<double> tb = trajectory(baseline.phases);
  const std::vector<double> ta = trajectory(ablated.phases);
  issues.expect(ta == tb, "fully ablated m3 trajectory differs from non-m3 baseline");
  issues.expect(baseline.phases.size() == ablated.phases.size(),
                "phase structure differs under full ablation");

  // Shared parameters land bit-for-bit identical as well.
  for (const auto& prefix :
       {std::string("cfp_backbone"), std::string("faf_backbone"), std::string("head_fused")}) {
    const auto pa = params_with_prefix(ablated.model, {prefix});
    const auto pb = params_with_prefix(baseline.model, {prefix});
    if (pa.size() != pb.size()) {
      issues.add(prefix + ": parameter count differs");
      continue;
    }
    for (std::size_t i = 0; i < pa.size(); ++i)
      issues.expect(bitwise_equal(pa[i].value(), pb[i].value()),
                    prefix + ": weights differ under full ablation");
  }

  // Either mechanism alone must change the trajectory.
  TrainConfig attn_only = cfg;
  attn_only.no_multitask = true;  // attention on, multitask off
  const RunArtifacts with_attention =
      train_full(ModelKind::m3, Scenario::fused, backbone, data, attn_only);
  issues.expect(fused_trajectory(with_attention.phases) != fused_trajectory(baseline.phases),
                "attention alone left the trajectory identical");

  TrainConfig multi_only = cfg;
  multi_only.no_attention = true;  // multitask on, attention off
  const RunArtifacts with_multitask =
      train_full(ModelKind::m3, Scenario::fused, backbone, data, multi_only);
  issues.expect(fused_trajectory(with_multitask.phases) != fused_trajectory(baseline.phases),
                "multitask alone left the trajectory identical");

  if (issues.count == 0)
    return "PASSDETAIL full ablation bitwise-equal over " + std::to_string(tb.size()) +
           " logged values; each mechanism alone diverges";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 5. Differential analysis
// ---------------------------------------------------------------------------

std::string criterion_differential() {
  Issues issues;

  std::mt19937_64 rng = seeded_rng(13, 0xD1F);
  const std::size_t n_rec = 37;
  CorrectnessRuns a, b;
  for (std::size_t i = 0; i < n_rec; ++i) {
    a.record_ids.push_back("R" + std::to_string(i));
    a.labels.push_back(int(rng() % 2));
  }
  b.record_ids = a.record_ids;
  b.labels = a.labels;
  for (int run = 0; run < 3; ++run) {
    std::vector<char> row(n_rec);
    for (auto& v : row) v = char(rng() % 2);
    a.correct.push_back(row);
  }
  for (int run = 0; run < 2; ++run) {
    std::vector<char> row(n_rec);
    for (auto& v : row) v = char(rng() % 2);
    b.correct.push_back(row);
  }

  for (int iterations : {50, 200}) {
    DifferentialTrace trace;
    const DifferentialSummary sum = bootstrap_differential(a, b, iterations, 9, &trace);
    issues.expect(int(trace.size()) == iterations,
                  "trace has " + std::to_string(trace.size()) + " iterations, expected " +
                      std::to_string(iterations));
    for (std::size_t it = 0; it < trace.size(); ++it)
      for (std::size_t s = 0; s < 3; ++s) {
        if (sum.n_records[s] == 0) continue;
        const double total = trace[it][s][0] + trace[it][s][1] + trace[it][s][2] +
                             trace[it][s][3];
        issues.expect(std::abs(total - 1.0) <= 1e-9,
                      "iteration " + std::to_string(it) + " stratum " +
                          std::string(stratum_name(DiffStratum(s))) + " sums to " +
                          fmt("%.12f", total));
      }
    // The summary means inherit the invariant.
    for (std::size_t s = 0; s < 3; ++s) {
      if (sum.n_records[s] == 0) continue;
      double mean_total = 0;
      for (std::size_t c = 0; c < 4; ++c) mean_total += sum.cells[s][c].mean;
      issues.expect(std::abs(mean_total - 1.0) <= 1e-9,
                    "mean fractions sum to " + fmt("%.12f", mean_total) + " at " +
                        std::to_string(iterations) + " iterations");
    }
  }

  // Degenerate single-run ensembles: every draw picks the same run, so every
  // cell's spread is exactly zero.
  CorrectnessRuns a1 = a, b1 = b;
  a1.correct.resize(1);
  b1.correct.resize(1);
  const DifferentialSummary degen = bootstrap_differential(a1, b1, 200, 5);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < 4; ++c)
      issues.expect(degen.cells[s][c].sd == 0.0,
                    "single-run sd " + fmt("%.3g", degen.cells[s][c].sd) + " != 0");

  if (issues.count == 0)
    return "PASSDETAIL every iteration sums to 1 +/- 1e-9 at 50 and 200; single-run sd = 0";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 6. Split integrity
// ---------------------------------------------------------------------------

std::string criterion_splits() {
  Issues issues;

  // 173 participants with 1-3 visits each; only ids matter for splitting.
  std::vector<ExamRecord> records;
  std::mt19937_64 rng = seeded_rng(3, 0x5117);
  const int n_participants = 173;
  for (int p = 0; p < n_participants; ++p) {
    const int visits = 1 + int(rng() % 3);
    for (int v = 0; v < visits; ++v) {
      ExamRecord r;
      r.participant_id = "P" + std::to_string(p);
      r.eye = "right";
      r.visit = "V" + std::to_string(v);
      r.labels = {1, 0, 1};
      records.push_back(r);
    }
  }

  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    const SplitAssignment split = split_participants(records, 0.7, 0.1, 0.2, seed);
    if (int(split.by_participant.size()) != n_participants) {
      issues.add("seed " + std::to_string(seed) + ": " +
                 std::to_string(split.by_participant.size()) + " participants assigned");
      continue;
    }
    // Disjointness is structural (a map holds one split per participant);
    // verify via record-level lookups agreeing with the participant map.
    std::array<int, 3> counts{};
    for (const auto& [pid, s] : split.by_participant) counts[std::size_t(s)]++;
    const auto off = [&](Split s, double frac) {
      return std::abs(double(counts[std::size_t(s)]) - frac * n_participants);
    };
    issues.expect(off(Split::train, 0.7) <= 1.0,
                  "seed " + std::to_string(seed) + ": train size " +
                      std::to_string(counts[0]) + " off by > 1");
    issues.expect(off(Split::val, 0.1) <= 1.0, "seed " + std::to_string(seed) +
                                                   ": val size " + std::to_string(counts[1]) +
                                                   " off by > 1");
    issues.expect(off(Split::test, 0.2) <= 1.0, "seed " + std::to_string(seed) +
                                                    ": test size " +
                                                    std::to_string(counts[2]) + " off by > 1");
    // Every record of a participant must land in the participant's split,
    // and a participant must never appear in two splits.
    std::map<std::string, Split> seen;
    for (const ExamRecord& r : records) {
      const Split s = split.of(r);
      const auto it = seen.find(r.participant_id);
      if (it == seen.end())
        seen.emplace(r.participant_id, s);
      else
        issues.expect(it->second == s,
                      "seed " + std::to_string(seed) + ": participant " + r.participant_id +
                          " straddles splits");
    }
    ++checked;
  }
  issues.expect(checked == 1000, "only " + std::to_string(checked) + " seeds checked");

  if (issues.count == 0)
    return "PASSDETAIL 1000 seeds, 173 participants: disjoint, sizes within +/- 1 of 70/10/20";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 7. Stage-II freeze contract
// ---------------------------------------------------------------------------

std::string criterion_freeze() {
  Issues issues;

  const fs::path dir = work_root() / "freeze";
  SynthConfig synth;
  synth.n_participants = 12;
  synth.visits_per_participant = 1;
  synth.image_size = 24;
  synth.seed = 6;
  const auto records = generate_synthetic(synth, (dir / "data").string());
  const SplitAssignment assignment = split_participants(records, 0.7, 0.1, 0.2, 1);

  BackboneConfig backbone;
  backbone.input_size = 16;
  backbone.blocks = {{8, true}, {8, true}};
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs_stage1 = 2;
  cfg.max_epochs_finetune = 2;
  cfg.seed = 21;
  const DataSplit data = load_split(records, assignment, cfg.feature, backbone.input_size);

  // Run A: the full two-stage procedure, including cascade step (c).
  const RunArtifacts full = train_full(ModelKind::m3, Scenario::fused, backbone, data, cfg);
  issues.expect(!full.aborted, "full run aborted: " + full.abort_reason);

  // Run B: identical training aborted at the first step-(c) epoch, leaving
  // the frozen parameter sets exactly as steps (a)/(b) wrote them.
  struct Probe : std::exception {};
  RunArtifacts at_b;
  bool fired = false;
  try {
    at_b = train_full(ModelKind::m3, Scenario::fused, backbone, data, cfg,
                      [&](const std::string& phase, int) {
                        if (phase == "cascade_fused") {
                          fired = true;
                          throw Probe();
                        }
                      });
  } catch (const Probe&) {
    issues.add("probe escaped the trainer");
  }
  issues.expect(fired, "cascade_fused phase never ran");
  issues.expect(at_b.aborted, "probe run did not record an abort");

  const std::vector<std::string> frozen = {"cfp_backbone", "faf_backbone", "sa_cfp", "sa_faf"};
  const auto pa = params_with_prefix(full.model, frozen);
  const auto pb = params_with_prefix(at_b.model, frozen);
  issues.expect(pa.size() == pb.size(), "frozen parameter sets differ in size");
  issues.expect(!pa.empty(), "no frozen parameters found");
  Dim n_values = 0;
  for (std::size_t i = 0; i < std::min(pa.size(), pb.size()); ++i) {
    issues.expect(bitwise_equal(pa[i].value(), pb[i].value()),
                  "frozen parameter " + std::to_string(i) + " changed during step (c)");
    n_values += pa[i].size();
  }
  // Step (c) did do work: the fusion path moved.
  const auto fa = params_with_prefix(full.model, {"head_fused"});
  const auto fb = params_with_prefix(at_b.model, {"head_fused"});
  bool fused_moved = false;
  for (std::size_t i = 0; i < std::min(fa.size(), fb.size()); ++i)
    if (!bitwise_equal(fa[i].value(), fb[i].value())) fused_moved = true;
  issues.expect(fused_moved, "step (c) left the fusion head untouched entirely");

  if (issues.count == 0)
    return "PASSDETAIL " + std::to_string(pa.size()) + " frozen tensors (" +
           std::to_string(n_values) + " values) bitwise unchanged through step (c)";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 8. Saliency contract
// ---------------------------------------------------------------------------

std::string criterion_saliency() {
  Issues issues;

  // (a) Zero-gradient probe: a model whose logit layers are all zero
  // back-projects to an all-zero (not NaN) map.
  BackboneConfig backbone;
  backbone.input_size = 16;
  backbone.blocks = {{6, true}, {6, true}};
  ModelSpec spec;  // m3, fused
  M3Model zero_model = build_model(spec, backbone, 31);
  for (auto& [name, p] : named_params(zero_model))
    if (name.size() >= 3 && name.compare(name.size() - 3, 3, ".w2") == 0)
      for (Dim i = 0; i < p.size(); ++i) p.value()[i] = 0.0f;

  std::mt19937_64 rng = seeded_rng(8, 0x5A1);
  Image img;
  img.h = img.w = 16;
  img.pix = Array<float>(16 * 16);
  std::uniform_real_distribution<float> pix(0.0f, 1.0f);
  for (Dim i = 0; i < img.pix.size(); ++i) img.pix[i] = pix(rng);

  const auto zero_maps = saliency_map(zero_model, &img, &img, Scenario::fused, "probe");
  issues.expect(zero_maps.size() == 2, "fused scenario should give two maps");
  for (const SaliencyMap& m : zero_maps)
    for (Dim i = 0; i < m.values.pix.size(); ++i) {
      const float v = m.values.pix[i];
      if (v != 0.0f || !std::isfinite(v)) {
        issues.add(m.modality + " zero-probe map not identically zero");
        break;
      }
    }

  // (b) Analytic 1x1-conv probe: logit = mean(conv1x1(map)); the gradient is
  // w_c/(h*w) at every pixel, so the saliency sign pattern must equal
  // sign(sum_c act_c * w_c) exactly.
  {
    const Dim h = 4, w = 4, c = 2;
    Array<float> acts(h * w * c);
    std::uniform_real_distribution<float> act_dist(-1.0f, 1.0f);
    for (Dim i = 0; i < acts.size(); ++i) acts[i] = act_dist(rng);
    Tensor<float> map = Tensor<float>::leaf({1, h, w, c}, acts, true);

    const float w0 = 0.75f, w1 = -0.5f;
    Array<float> kv(2);
    kv << w0, w1;
    Tensor<float> kernel = Tensor<float>::leaf({1, 1, c, 1}, std::move(kv), false);
    Tensor<float> bias = Tensor<float>::leaf({1}, Array<float>::Zero(1), false);
    Tensor<float> out = conv2d(map, kernel, bias);     // {1,4,4,1}
    Tensor<float> logit = mean(reshape(out, {h * w}), 0);
    backward(logit);

    const SaliencyMap probe = backproject_map(map, h, w);
    bool su = true;
    for (Dim y = 0; y < h && su; ++y)
      for (Dim x = 0; x < w && su; ++x) {
        const float a0 = acts[(y * w + x) * c + 0], a1 = acts[(y * w + x) * c + 1];
        const double expected = double(a0) * w0 + double(a1) * w1;
        const float got = probe.values.at(y, x);
        if ((expected > 0) != (got > 0) || (expected < 0) != (got < 0)) {
          issues.add("sign mismatch at (" + std::to_string(y) + "," + std::to_string(x) +
                     "): expected sign of " + fmt("%.4f", expected) + ", saliency " +
                     fmt("%.4f", double(got)));
          su = false;
        }
      }
  }

  // (c) Bounds and normalization on a live model: every map lies in [-1, 1]
  // and a non-constant map peaks at |value| exactly 1.
  M3Model live = build_model(spec, backbone, 77);
  Image img2 = img;
  for (Dim i = 0; i < img2.pix.size(); ++i) img2.pix[i] = pix(rng);
  int n_maps = 0;
  for (Scenario s : {Scenario::cfp, Scenario::faf, Scenario::fused}) {
    const auto maps = saliency_map(live, &img, &img2, s, "live");
    for (const SaliencyMap& m : maps) {
      ++n_maps;
      float lo = 0, hi = 0, peak = 0;
      for (Dim i = 0; i < m.values.pix.size(); ++i) {
        const float v = m.values.pix[i];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        peak = std::max(peak, std::abs(v));
      }
      issues.expect(lo >= -1.0f && hi <= 1.0f,
                    m.modality + " map escapes [-1,1]: [" + fmt("%.4f", double(lo)) + ", " +
                        fmt("%.4f", double(hi)) + "]");
      const bool constant = lo == hi;
      if (!constant)
        issues.expect(peak == 1.0f, m.modality + " non-constant map peaks at " +
                                        fmt("%.6f", double(peak)) + " != 1");
    }
  }

  if (issues.count == 0)
    return "PASSDETAIL zero-probe maps all zero; 16 sign cells exact; " +
           std::to_string(n_maps) + " live maps within [-1,1], peak |v| = 1";
  return issues.render();
}

// ---------------------------------------------------------------------------
// 9. End-to-end reproducibility
// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      "M3_THREADS=1 " + std::string(M3_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// epochs.csv minus its wall-clock column (the one legitimately varying field).
std::string drop_wall_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string out, line;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

std::string criterion_end_to_end() {
  Issues issues;
  const fs::path dir = work_root() / "pipeline";
  fs::create_directories(dir);
  int step = 0;
  auto log = [&] { return dir / ("step_" + std::to_string(step++) + ".log"); };

  // Stage 1: the pipeline, each command from explicit flags.
  const fs::path synth_out = dir / "synth", train_out = dir / "train", eval_out = dir / "eval",
                 sal_out = dir / "sal";
  if (run_cli("synth --participants 10 --visits 1 --image-size 20 --seed 3 --output-dir " +
                  synth_out.string(),
              log()) != 0)
    return "synth failed";
  const std::string manifest = (synth_out / "data" / "manifest.csv").string();
  if (run_cli("train --manifest " + manifest +
                  " --runs 2 --seed 5 --input-size 16 --batch-size 4 --max-epochs-stage1 2"
                  " --max-epochs-finetune 1 --output-dir " + train_out.string(),
              log()) != 0)
    return "train failed";
  if (run_cli("eval --checkpoints " + (train_out / "ensemble").string() + " --manifest " +
                  manifest + " --split-set all --differential " +
                  (train_out / "ensemble").string() + " --iterations 20 --output-dir " +
                  eval_out.string(),
              log()) != 0)
    return "eval failed";
  const auto first_record = load_manifest(manifest).front().record_id();
  if (run_cli("saliency --checkpoint " + (train_out / "ensemble" / "run_00" / "checkpoint.ck").string() +
                  " --manifest " + manifest + " --scenario fused --ids " + first_record +
                  " --output-dir " + sal_out.string(),
              log()) != 0)
    return "saliency failed";

  // Stage 2: rerun every command from its own config echo.
  const fs::path synth2 = dir / "synth2", train2 = dir / "train2", eval2 = dir / "eval2",
                 sal2 = dir / "sal2";
  if (run_cli("synth --config " + (synth_out / "config_echo.json").string() + " --output-dir " +
                  synth2.string(),
              log()) != 0)
    return "synth rerun failed";
  if (run_cli("train --config " + (train_out / "config_echo.json").string() + " --output-dir " +
                  train2.string(),
              log()) != 0)
    return "train rerun failed";
  if (run_cli("eval --config " + (eval_out / "config_echo.json").string() + " --output-dir " +
                  eval2.string(),
              log()) != 0)
    return "eval rerun failed";
  if (run_cli("saliency --config " + (sal_out / "config_echo.json").string() + " --output-dir " +
                  sal2.string(),
              log()) != 0)
    return "saliency rerun failed";

  // Identical artifacts, byte for byte (epochs.csv modulo wall seconds).
  int compared = 0;
  auto same = [&](const fs::path& a, const fs::path& b) {
    ++compared;
    issues.expect(read_file(a) == read_file(b),
                  a.filename().string() + " differs between pipeline and echo rerun");
  };
  same(synth_out / "data" / "manifest.csv", synth2 / "data" / "manifest.csv");
  same(synth_out / "data" / "truth.csv", synth2 / "data" / "truth.csv");
  const auto records = load_manifest(manifest);
  same(synth_out / "data" / "images" / (records[0].record_id() + "_cfp.png"),
       synth2 / "data" / "images" / (records[0].record_id() + "_cfp.png"));

  same(train_out / "ensemble.json", train2 / "ensemble.json");
  same(train_out / "ensemble.csv", train2 / "ensemble.csv");
  same(train_out / "ensemble_summary.csv", train2 / "ensemble_summary.csv");
  for (const char* run : {"run_00", "run_01"}) {
    same(train_out / "ensemble" / run / "checkpoint.ck",
         train2 / "ensemble" / run / "checkpoint.ck");
    same(train_out / "ensemble" / run / "config.json",
         train2 / "ensemble" / run / "config.json");
    ++compared;
    issues.expect(
        drop_wall_column(read_file(train_out / "ensemble" / run / "epochs.csv")) ==
            drop_wall_column(read_file(train2 / "ensemble" / run / "epochs.csv")),
        std::string(run) + "/epochs.csv differs beyond wall_seconds");
  }

  same(eval_out / "eval" / "metrics.json", eval2 / "eval" / "metrics.json");
  same(eval_out / "eval" / "metrics.csv", eval2 / "eval" / "metrics.csv");
  same(eval_out / "eval" / "aggregate.csv", eval2 / "eval" / "aggregate.csv");
  for (const char* run : {"run_00", "run_01"})
    for (const char* s : {"cfp", "faf", "fused"}) {
      same(eval_out / "eval" / run / ("predictions_" + std::string(s) + ".csv"),
           eval2 / "eval" / run / ("predictions_" + std::string(s) + ".csv"));
      same(eval_out / "eval" / run / ("roc_" + std::string(s) + ".csv"),
           eval2 / "eval" / run / ("roc_" + std::string(s) + ".csv"));
      same(eval_out / "eval" / run / ("calibration_" + std::string(s) + ".csv"),
           eval2 / "eval" / run / ("calibration_" + std::string(s) + ".csv"));
    }
  for (const char* s : {"cfp", "faf", "fused"})
    same(eval_out / "eval" / ("differential_" + std::string(s) + ".csv"),
         eval2 / "eval" / ("differential_" + std::string(s) + ".csv"));

  for (const char* mod : {"cfp", "faf"})
    same(sal_out / "saliency" / (first_record + "_fused_" + mod + ".png"),
         sal2 / "saliency" / (first_record + "_fused_" + mod + ".png"));
  same(sal_out / "saliency" / "saliency.csv", sal2 / "saliency" / "saliency.csv");
  same(sal_out / "saliency" / "colorbar.png", sal2 / "saliency" / "colorbar.png");

  if (issues.count == 0)
    return "PASSDETAIL synth -> train(2 runs) -> eval -> saliency; " +
           std::to_string(compared) + " artifacts identical on echo rerun";
  return issues.render();
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient correctness", criterion_gradients},
      {"metric oracles", criterion_metric_oracles},
      {"directional replication", criterion_directional},
      {"ablation structure", criterion_ablation},
      {"differential analysis", criterion_differential},
      {"split integrity", criterion_splits},
      {"stage-II freeze contract", criterion_freeze},
      {"saliency contract", criterion_saliency},
      {"end-to-end reproducibility", criterion_end_to_end},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    std::string result;
    try {
      result = criteria[i].run();
    } catch (const std::exception& e) {
      result = std::string("exception: ") + e.what();
    }
    const bool pass = result.rfind("PASSDETAIL", 0) == 0;
    const std::string detail = pass ? result.substr(sizeof("PASSDETAIL")) : result;
    std::printf("[%zu/%zu] %s  %s — %s\n", i + 1, criteria.size(), pass ? "PASS" : "FAIL",
                criteria[i].name, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
  if (failures)
    std::printf("%d of %zu acceptance criteria FAILED\n", failures, criteria.size());
  else
    std::printf("all %zu acceptance criteria passed\n", criteria.size());
  return failures;
}
