// m3: single command-line entry point for the replication study.
//
// Subcommands: synth | train | eval | saliency. Every command reads an
// optional JSON experiment config (--config) whose keys mirror the module
// config fields; command-line flags override file values. Each command
// echoes its fully-resolved config to <output_dir>/config_echo.json, and
// rerunning from that echo reproduces the outputs (CSV/JSON bitwise, PNG
// per-pixel; the wall_seconds column of epochs.csv is the one exception).
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include "m3/png_io.hpp"
#include "m3/saliency.hpp"
#include "m3/synth.hpp"
#include "m3/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace m3;

namespace {

// Problems with the request itself (bad config keys or values, missing
// inputs) exit 2; failures while executing a well-formed request exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runs the request-validation part of a command: any failure there is a
// usage/config error.
template <class F>
decltype(auto) usage_phase(F&& f) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

struct SplitOptions {
  double train_frac = 0.7, val_frac = 0.1, test_frac = 0.2;
  std::uint64_t seed = 1;
};

struct EvalOptions {
  double threshold = 0.5;
  int iterations = 200;     // bootstrap differential iterations
  int calibration_bins = 10;
  std::uint64_t bootstrap_seed = 1;
  std::string scenario;     // restrict evaluation; empty = every supported
};

struct ExperimentConfig {
  SynthConfig synth;
  TrainConfig train;
  BackboneConfig backbone;
  SplitOptions split;
  EvalOptions eval;
  std::string output_dir = "m3_out";
  std::string manifest;          // dataset manifest (train/eval/saliency)
  std::string checkpoints;       // ensemble dir or single checkpoint (eval)
  std::string checkpoint;        // single checkpoint (saliency)
  std::string compare;           // second ensemble dir (eval --compare)
  std::string differential;      // second ensemble dir (eval --differential)
  std::string graders;           // grader-call CSV (eval)
  std::string split_set = "test";  // train | val | test | all
  std::vector<std::string> ids;  // record ids (saliency)
  std::string feature = "rpd";
  std::string kind = "m3";
  std::string scenario = "fused";
  int runs = 5;
};

using FieldSetter = std::function<void(const json&)>;

void apply_fields(const json& j, const std::string& section,
                  const std::map<std::string, FieldSetter>& fields) {
  if (!j.is_object())
    throw UsageError("config: '" + section + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    if (it == fields.end())
      throw UsageError("config: unknown key '" + key + "' in " + section);
    try {
      it->second(value);
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      throw UsageError("config: bad value for '" + section + "." + key + "': " + e.what());
    }
  }
}

template <class T>
FieldSetter store(T& field) {
  return [&field](const json& v) { v.get_to(field); };
}

std::map<std::string, FieldSetter> synth_fields(SynthConfig& s) {
  return {{"n_participants", store(s.n_participants)},
          {"visits_per_participant", store(s.visits_per_participant)},
          {"image_size", store(s.image_size)},
          {"prevalence", store(s.prevalence)},
          {"ga_prevalence", store(s.ga_prevalence)},
          {"pigment_prevalence", store(s.pigment_prevalence)},
          {"lesion_count_max", store(s.lesion_count_max)},
          {"faf_contrast", store(s.faf_contrast)},
          {"cfp_contrast", store(s.cfp_contrast)},
          {"noise_sigma", store(s.noise_sigma)},
          {"seed", store(s.seed)}};
}

std::map<std::string, FieldSetter> train_fields(TrainConfig& t) {
  return {{"learning_rate", store(t.learning_rate)},
          {"finetune_learning_rate", store(t.finetune_learning_rate)},
          {"batch_size", store(t.batch_size)},
          {"early_stop_patience", store(t.early_stop_patience)},
          {"max_epochs_stage1", store(t.max_epochs_stage1)},
          {"max_epochs_finetune", store(t.max_epochs_finetune)},
          {"max_epochs_non_m3", store(t.max_epochs_non_m3)},
          {"multitask_weights",
           [&t](const json& v) {
             if (!v.is_array() || v.size() != 3)
               throw UsageError("config: multitask_weights must be an array of 3 numbers");
             for (int i = 0; i < 3; ++i) v[std::size_t(i)].get_to(t.multitask_weights[i]);
           }},
          {"seed", store(t.seed)},
          {"no_attention", store(t.no_attention)},
          {"no_multitask", store(t.no_multitask)},
          {"augment", store(t.augment)}};
}

std::map<std::string, FieldSetter> backbone_fields(BackboneConfig& b) {
  return {{"input_size", store(b.input_size)},
          {"blocks", [&b](const json& v) {
             if (!v.is_array() || v.empty())
               throw UsageError("config: backbone.blocks must be a non-empty array");
             b.blocks.clear();
             for (const json& item : v) {
               BlockSpec spec;
               apply_fields(item, "backbone.blocks[]",
                            {{"channels", store(spec.channels)}, {"pool", store(spec.pool)}});
               b.blocks.push_back(spec);
             }
           }}};
}

std::map<std::string, FieldSetter> split_fields(SplitOptions& s) {
  return {{"train_frac", store(s.train_frac)},
          {"val_frac", store(s.val_frac)},
          {"test_frac", store(s.test_frac)},
          {"seed", store(s.seed)}};
}

std::map<std::string, FieldSetter> eval_fields(EvalOptions& e) {
  return {{"threshold", store(e.threshold)},
          {"iterations", store(e.iterations)},
          {"calibration_bins", store(e.calibration_bins)},
          {"bootstrap_seed", store(e.bootstrap_seed)},
          {"scenario", store(e.scenario)}};
}

void apply_config_json(const json& j, ExperimentConfig& cfg) {
  apply_fields(
      j, "top level",
      {{"synth", [&](const json& v) { apply_fields(v, "synth", synth_fields(cfg.synth)); }},
       {"train", [&](const json& v) { apply_fields(v, "train", train_fields(cfg.train)); }},
       {"backbone",
        [&](const json& v) { apply_fields(v, "backbone", backbone_fields(cfg.backbone)); }},
       {"split", [&](const json& v) { apply_fields(v, "split", split_fields(cfg.split)); }},
       {"eval", [&](const json& v) { apply_fields(v, "eval", eval_fields(cfg.eval)); }},
       {"output_dir", store(cfg.output_dir)},
       {"manifest", store(cfg.manifest)},
       {"checkpoints", store(cfg.checkpoints)},
       {"checkpoint", store(cfg.checkpoint)},
       {"compare", store(cfg.compare)},
       {"differential", store(cfg.differential)},
       {"graders", store(cfg.graders)},
       {"split_set", store(cfg.split_set)},
       {"ids", store(cfg.ids)},
       {"feature", store(cfg.feature)},
       {"kind", store(cfg.kind)},
       {"scenario", store(cfg.scenario)},
       {"runs", store(cfg.runs)}});
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw UsageError("config: " + path + ": " + e.what());
  }
  ExperimentConfig cfg;
  apply_config_json(j, cfg);
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json blocks = json::array();
  for (const BlockSpec& b : cfg.backbone.blocks)
    blocks.push_back({{"channels", b.channels}, {"pool", b.pool}});
  return json{
      {"synth",
       {{"n_participants", cfg.synth.n_participants},
        {"visits_per_participant", cfg.synth.visits_per_participant},
        {"image_size", cfg.synth.image_size},
        {"prevalence", cfg.synth.prevalence},
        {"ga_prevalence", cfg.synth.ga_prevalence},
        {"pigment_prevalence", cfg.synth.pigment_prevalence},
        {"lesion_count_max", cfg.synth.lesion_count_max},
        {"faf_contrast", cfg.synth.faf_contrast},
        {"cfp_contrast", cfg.synth.cfp_contrast},
        {"noise_sigma", cfg.synth.noise_sigma},
        {"seed", cfg.synth.seed}}},
      {"train",
       {{"learning_rate", cfg.train.learning_rate},
        {"finetune_learning_rate", cfg.train.finetune_learning_rate},
        {"batch_size", cfg.train.batch_size},
        {"early_stop_patience", cfg.train.early_stop_patience},
        {"max_epochs_stage1", cfg.train.max_epochs_stage1},
        {"max_epochs_finetune", cfg.train.max_epochs_finetune},
        {"max_epochs_non_m3", cfg.train.max_epochs_non_m3},
        {"multitask_weights", cfg.train.multitask_weights},
        {"seed", cfg.train.seed},
        {"no_attention", cfg.train.no_attention},
        {"no_multitask", cfg.train.no_multitask},
        {"augment", cfg.train.augment}}},
      {"backbone", {{"input_size", cfg.backbone.input_size}, {"blocks", blocks}}},
      {"split",
       {{"train_frac", cfg.split.train_frac},
        {"val_frac", cfg.split.val_frac},
        {"test_frac", cfg.split.test_frac},
        {"seed", cfg.split.seed}}},
      {"eval",
       {{"threshold", cfg.eval.threshold},
        {"iterations", cfg.eval.iterations},
        {"calibration_bins", cfg.eval.calibration_bins},
        {"bootstrap_seed", cfg.eval.bootstrap_seed},
        {"scenario", cfg.eval.scenario}}},
      {"output_dir", cfg.output_dir},
      {"manifest", cfg.manifest},
      {"checkpoints", cfg.checkpoints},
      {"checkpoint", cfg.checkpoint},
      {"compare", cfg.compare},
      {"differential", cfg.differential},
      {"graders", cfg.graders},
      {"split_set", cfg.split_set},
      {"ids", cfg.ids},
      {"feature", cfg.feature},
      {"kind", cfg.kind},
      {"scenario", cfg.scenario},
      {"runs", cfg.runs}};
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), "cannot write '" + path.string() + "'");
  out << text;
}

void write_config_echo(const ExperimentConfig& cfg, const fs::path& dir) {
  write_text(dir / "config_echo.json", config_to_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// JSON/CSV builders
// ---------------------------------------------------------------------------

json report_json(const MetricsReport& r) { return json::parse(metrics_json(r)); }

json quartiles_json(const Quartiles& q) {
  return {{"median", q.median}, {"q1", q.q1}, {"q3", q.q3}, {"iqr", q.iqr}};
}

json ranksum_json(const RankSumResult& r) {
  return {{"u", r.u}, {"p", r.p}, {"exact", r.exact}};
}

json aggregate_json(const std::map<std::string, std::map<std::string, Quartiles>>& summary) {
  json out = json::object();
  for (const auto& [scenario, metrics] : summary) {
    json entry = json::object();
    for (const auto& [metric, q] : metrics) entry[metric] = quartiles_json(q);
    out[scenario] = entry;
  }
  return out;
}

json differential_json(const DifferentialSummary& d) {
  json strata = json::object();
  for (int s = 0; s < 3; ++s) {
    json cells = json::object();
    for (int c = 0; c < 4; ++c)
      cells[category_name(DiffCategory(c))] = {
          {"mean", d.cells[std::size_t(s)][std::size_t(c)].mean},
          {"sd", d.cells[std::size_t(s)][std::size_t(c)].sd}};
    cells["n_records"] = d.n_records[std::size_t(s)];
    strata[stratum_name(DiffStratum(s))] = cells;
  }
  return {{"iterations", d.iterations}, {"strata", strata}};
}

json grader_json(const GraderComparison& g) {
  json graders = json::array();
  for (const GraderPanel& p : g.graders)
    graders.push_back({{"grader_id", p.grader_id},
                       {"seniority", p.seniority},
                       {"f1", p.report.f1},
                       {"sensitivity", p.report.sensitivity},
                       {"specificity", p.report.specificity},
                       {"fpr", p.fpr},
                       {"tpr", p.tpr}});
  json groups = json::object();
  for (const GraderGroup& grp : g.groups) {
    json metrics = json::object();
    for (const auto& [metric, q] : grp.summary) metrics[metric] = quartiles_json(q);
    groups[grp.name] = {{"graders", grp.grader_ids}, {"summary", metrics}};
  }
  return {{"graders", graders},
          {"groups", groups},
          {"model_vs_graders", ranksum_json(g.model_vs_graders)}};
}

constexpr const char* kMetricsCsvHeader =
    "run,scenario,feature,threshold,n_pos,n_neg,f1,precision,sensitivity,specificity,"
    "auroc,kappa,accuracy,brier";

std::string metrics_csv_row(const std::string& run, const MetricsReport& r) {
  std::string row = run + "," + r.scenario + "," + r.feature + "," + fmt(r.threshold) + "," +
                    std::to_string(r.n_pos) + "," + std::to_string(r.n_neg) + "," + fmt(r.f1) +
                    "," + fmt(r.precision) + "," + fmt(r.sensitivity) + "," +
                    fmt(r.specificity) + "," + (r.auroc_defined ? fmt(r.auroc) : std::string()) +
                    "," + fmt(r.kappa) + "," + fmt(r.accuracy) + "," + fmt(r.brier);
  return row;
}

std::string aggregate_csv(const std::map<std::string, std::map<std::string, Quartiles>>& summary) {
  std::string out = "scenario,metric,median,q1,q3,iqr\n";
  for (const auto& [scenario, metrics] : summary)
    for (const auto& [metric, q] : metrics)
      out += scenario + "," + metric + "," + fmt(q.median) + "," + fmt(q.q1) + "," + fmt(q.q3) +
             "," + fmt(q.iqr) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------------

Feature parse_feature_checked(const std::string& name) {
  return usage_phase([&] { return parse_feature(name); });
}

std::vector<ExamRecord> load_manifest_checked(const std::string& manifest, const char* cmd) {
  if (manifest.empty())
    throw UsageError(std::string(cmd) + ": no manifest given (--manifest or config)");
  if (!fs::exists(manifest))
    throw UsageError(std::string(cmd) + ": manifest '" + manifest + "' does not exist");
  return usage_phase([&] { return load_manifest(manifest); });
}

std::vector<TrainSample> select_split_set(DataSplit& data, const std::string& split_set) {
  if (split_set == "train") return std::move(data.train);
  if (split_set == "val") return std::move(data.val);
  if (split_set == "test") return std::move(data.test);
  std::vector<TrainSample> all = std::move(data.train);
  std::move(data.val.begin(), data.val.end(), std::back_inserter(all));
  std::move(data.test.begin(), data.test.end(), std::back_inserter(all));
  return all;
}

// Checkpoint files of an ensemble directory (run_*/checkpoint.ck, sorted),
// or the path itself when it already names a checkpoint file.
std::vector<fs::path> collect_checkpoints(const std::string& path, const char* what) {
  if (path.empty())
    throw UsageError(std::string("eval: no ") + what + " given (--" + what + " or config)");
  if (!fs::exists(path))
    throw UsageError(std::string("eval: ") + what + " path '" + path + "' does not exist");
  if (fs::is_regular_file(path)) return {fs::path(path)};
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_directory()) continue;
    const fs::path ck = entry.path() / "checkpoint.ck";
    if (entry.path().filename().string().rfind("run_", 0) == 0 && fs::exists(ck))
      out.push_back(ck);
  }
  std::sort(out.begin(), out.end());
  if (out.empty())
    throw UsageError(std::string("eval: no run_*/checkpoint.ck found under '") + path + "'");
  return out;
}

struct LoadedEnsemble {
  std::vector<M3Model> models;
  std::vector<std::string> run_names;  // run_00, ...
};

LoadedEnsemble load_ensemble(const std::vector<fs::path>& checkpoints) {
  LoadedEnsemble ens;
  for (const fs::path& ck : checkpoints) {
    ens.models.push_back(load_model(ck.string()));
    const fs::path parent = ck.parent_path().filename();
    ens.run_names.push_back(parent.empty() ? ck.filename().string() : parent.string());
    const M3Model& m = ens.models.back();
    const M3Model& first = ens.models.front();
    require(m.config.input_size == first.config.input_size,
            "eval: checkpoint '" + ck.string() + "' expects input size " +
                std::to_string(m.config.input_size) + " but '" +
                checkpoints.front().string() + "' expects " +
                std::to_string(first.config.input_size));
  }
  return ens;
}

std::vector<Scenario> supported_scenarios(const M3Model& model) {
  if (model.spec.kind == ModelKind::m3 && model.spec.multitask_enabled())
    return {Scenario::cfp, Scenario::faf, Scenario::fused};
  return {model.spec.scenario};
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(ExperimentConfig cfg) {
  usage_phase([&] { cfg.synth.validate(); });
  const fs::path out(cfg.output_dir);
  const fs::path data_dir = out / "data";
  const std::vector<ExamRecord> records = generate_synthetic(cfg.synth, data_dir.string());

  std::set<std::string> participants;
  Dim pos[3] = {0, 0, 0};
  for (const ExamRecord& r : records) {
    participants.insert(r.participant_id);
    pos[0] += r.labels.rpd == 1;
    pos[1] += r.labels.ga == 1;
    pos[2] += r.labels.pigment == 1;
  }
  const double n = double(records.size());

  cfg.manifest = (data_dir / "manifest.csv").string();
  write_config_echo(cfg, out);

  std::printf("synth: %zu records across %zu participants -> %s\n", records.size(),
              participants.size(), data_dir.string().c_str());
  std::printf("  prevalence: rpd %.3f, ga %.3f, pigmentary %.3f\n", double(pos[0]) / n,
              double(pos[1]) / n, double(pos[2]) / n);
  std::printf("  manifest: %s\n", cfg.manifest.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(ExperimentConfig cfg) {
  const Feature feature = parse_feature_checked(cfg.feature);
  const ModelKind kind = usage_phase([&] { return parse_kind(cfg.kind); });
  const Scenario scenario = usage_phase([&] { return parse_scenario(cfg.scenario); });
  cfg.train.feature = feature;
  usage_phase([&] {
    cfg.train.validate();
    cfg.backbone.validate();
    if (cfg.runs < 1) throw UsageError("train: runs must be >= 1");
  });
  const std::vector<ExamRecord> records = load_manifest_checked(cfg.manifest, "train");
  const SplitAssignment assignment = usage_phase([&] {
    return split_participants(records, cfg.split.train_frac, cfg.split.val_frac,
                              cfg.split.test_frac, cfg.split.seed);
  });

  DataSplit data = load_split(records, assignment, feature, cfg.backbone.input_size);
  const fs::path out(cfg.output_dir);
  const fs::path ens_dir = out / "ensemble";
  EnsembleResult ens = run_ensemble(kind, scenario, cfg.runs, cfg.backbone, data, cfg.train,
                                    ens_dir.string());

  json js;
  js["kind"] = kind_name(kind);
  js["scenario"] = scenario_name(scenario);
  js["feature"] = feature_name(feature);
  js["seeds"] = ens.seeds;
  js["partial"] = ens.partial;
  js["n_train"] = data.train.size();
  js["n_val"] = data.val.size();
  js["n_test"] = data.test.size();
  json runs = json::array();
  for (std::size_t i = 0; i < ens.runs.size(); ++i) {
    const RunOutput& run = ens.runs[i];
    json r;
    char name[16];
    std::snprintf(name, sizeof(name), "run_%02zu", i);
    r["run"] = name;
    r["seed"] = run.seed;
    r["ok"] = run.ok;
    if (!run.error.empty()) r["error"] = run.error;
    json phases = json::array();
    for (const PhaseResult& ph : run.phases)
      phases.push_back({{"phase", ph.phase},
                        {"epochs", ph.epochs.size()},
                        {"best_epoch", ph.best_epoch},
                        {"aborted", ph.aborted}});
    r["phases"] = phases;
    json reports = json::object();
    for (const auto& [s, report] : run.reports) reports[s] = report_json(report);
    r["reports"] = reports;
    runs.push_back(r);
  }
  js["runs"] = runs;
  js["aggregate"] = aggregate_json(ens.summary);
  write_text(out / "ensemble.json", js.dump(2) + "\n");

  std::string csv = std::string(kMetricsCsvHeader) + "\n";
  for (std::size_t i = 0; i < ens.runs.size(); ++i)
    for (const auto& [s, report] : ens.runs[i].reports)
      csv += metrics_csv_row(runs[i]["run"].get<std::string>(), report) + "\n";
  write_text(out / "ensemble.csv", csv);
  write_text(out / "ensemble_summary.csv", aggregate_csv(ens.summary));
  write_config_echo(cfg, out);

  int ok_runs = 0;
  for (const RunOutput& run : ens.runs) ok_runs += run.ok;
  std::printf("train: %d/%d runs ok (%s %s, feature %s) -> %s\n", ok_runs, cfg.runs,
              kind_name(kind), scenario_name(scenario), feature_name(feature),
              ens_dir.string().c_str());
  for (const auto& [s, metrics] : ens.summary) {
    const auto f1 = metrics.find("f1");
    const auto auroc = metrics.find("auroc");
    std::printf("  %s: median f1 %s, median auroc %s\n", s.c_str(),
                f1 != metrics.end() ? fmt(f1->second.median).c_str() : "n/a",
                auroc != metrics.end() ? fmt(auroc->second.median).c_str() : "n/a");
  }
  if (ens.partial) {
    for (std::size_t i = 0; i < ens.runs.size(); ++i)
      if (!ens.runs[i].ok)
        std::fprintf(stderr, "train: run %zu (seed %llu) failed: %s\n", i,
                     static_cast<unsigned long long>(ens.runs[i].seed),
                     ens.runs[i].error.c_str());
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvaluatedEnsemble {
  LoadedEnsemble loaded;
  // per scenario name -> per run -> probabilities / report
  std::map<std::string, std::vector<std::vector<double>>> probs;
  std::map<std::string, std::vector<MetricsReport>> reports;
};

CorrectnessRuns correctness_of(const EvaluatedEnsemble& ens, const std::string& scenario,
                               const std::vector<std::string>& record_ids,
                               const std::vector<int>& labels, double threshold) {
  CorrectnessRuns out;
  out.record_ids = record_ids;
  out.labels = labels;
  for (const std::vector<double>& probs : ens.probs.at(scenario)) {
    std::vector<char> row;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const int call = probs[i] >= threshold ? 1 : 0;
      row.push_back(call == labels[i] ? 1 : 0);
    }
    out.correct.push_back(std::move(row));
  }
  return out;
}

int cmd_eval(ExperimentConfig cfg) {
  const Feature feature = parse_feature_checked(cfg.feature);
  const std::vector<fs::path> ckpts =
      usage_phase([&] { return collect_checkpoints(cfg.checkpoints, "checkpoints"); });
  std::vector<fs::path> compare_ckpts, diff_ckpts;
  if (!cfg.compare.empty())
    compare_ckpts = usage_phase([&] { return collect_checkpoints(cfg.compare, "compare"); });
  if (!cfg.differential.empty())
    diff_ckpts =
        usage_phase([&] { return collect_checkpoints(cfg.differential, "differential"); });
  usage_phase([&] {
    if (!(cfg.eval.threshold >= 0.0 && cfg.eval.threshold <= 1.0))
      throw UsageError("eval: threshold must be in [0,1]");
    if (cfg.eval.iterations < 1) throw UsageError("eval: iterations must be >= 1");
    if (cfg.eval.calibration_bins < 1)
      throw UsageError("eval: calibration_bins must be >= 1");
    if (!cfg.eval.scenario.empty()) parse_scenario(cfg.eval.scenario);
    if (cfg.split_set != "train" && cfg.split_set != "val" && cfg.split_set != "test" &&
        cfg.split_set != "all")
      throw UsageError("eval: split_set must be train | val | test | all");
    if (!cfg.graders.empty() && !fs::exists(cfg.graders))
      throw UsageError("eval: graders file '" + cfg.graders + "' does not exist");
  });
  const std::vector<ExamRecord> records = load_manifest_checked(cfg.manifest, "eval");
  const SplitAssignment assignment = usage_phase([&] {
    return split_participants(records, cfg.split.train_frac, cfg.split.val_frac,
                              cfg.split.test_frac, cfg.split.seed);
  });

  EvaluatedEnsemble main_ens;
  main_ens.loaded = load_ensemble(ckpts);
  const Dim input_size = main_ens.loaded.models.front().config.input_size;

  DataSplit data = load_split(records, assignment, feature, input_size);
  const std::vector<TrainSample> samples = select_split_set(data, cfg.split_set);
  require(!samples.empty(),
          "eval: no usable records in split set '" + cfg.split_set + "'");
  std::vector<std::string> record_ids;
  std::vector<int> labels;
  for (const TrainSample& s : samples) {
    record_ids.push_back(s.record_id);
    labels.push_back(s.label);
  }

  std::vector<Scenario> scenarios = supported_scenarios(main_ens.loaded.models.front());
  if (!cfg.eval.scenario.empty()) {
    const Scenario wanted = parse_scenario(cfg.eval.scenario);
    require(std::find(scenarios.begin(), scenarios.end(), wanted) != scenarios.end(),
            "eval: these checkpoints do not support the '" + cfg.eval.scenario +
                "' scenario");
    scenarios = {wanted};
  }

  const fs::path out = fs::path(cfg.output_dir) / "eval";
  fs::create_directories(out);

  auto evaluate = [&](EvaluatedEnsemble& ens, const std::vector<Scenario>& wanted) {
    for (Scenario s : wanted) {
      auto& probs = ens.probs[scenario_name(s)];
      auto& reports = ens.reports[scenario_name(s)];
      for (const M3Model& model : ens.loaded.models) {
        probs.push_back(predict_probs(model, samples, s, cfg.train.batch_size));
        reports.push_back(panel(probs.back(), labels, cfg.eval.threshold, scenario_name(s),
                                feature_name(feature)));
      }
    }
  };
  evaluate(main_ens, scenarios);

  json js;
  js["feature"] = feature_name(feature);
  js["threshold"] = cfg.eval.threshold;
  js["split_set"] = cfg.split_set;
  js["n_records"] = samples.size();
  js["checkpoints"] = cfg.checkpoints;

  json runs = json::array();
  for (Scenario s : scenarios) {
    const std::string name = scenario_name(s);
    for (std::size_t r = 0; r < main_ens.loaded.models.size(); ++r) {
      const std::string& run_name = main_ens.loaded.run_names[r];
      const std::vector<double>& probs = main_ens.probs.at(name)[r];
      json entry = report_json(main_ens.reports.at(name)[r]);
      entry["run"] = run_name;
      runs.push_back(entry);

      const fs::path run_dir = out / run_name;
      fs::create_directories(run_dir);
      write_predictions_csv((run_dir / ("predictions_" + name + ".csv")).string(), record_ids,
                            name, probs, labels);
      write_roc_csv((run_dir / ("roc_" + name + ".csv")).string(), roc_curve(probs, labels));
      write_calibration_csv((run_dir / ("calibration_" + name + ".csv")).string(),
                            calibration(probs, labels, cfg.eval.calibration_bins));
    }
  }
  js["runs"] = runs;

  std::map<std::string, std::map<std::string, Quartiles>> summary;
  for (Scenario s : scenarios) {
    const auto& reports = main_ens.reports.at(scenario_name(s));
    if (reports.size() >= 2) summary[scenario_name(s)] = aggregate(reports);
  }
  js["aggregate"] = aggregate_json(summary);

  static constexpr std::pair<const char*, double MetricsReport::*> kMetricMembers[] = {
      {"f1", &MetricsReport::f1},           {"precision", &MetricsReport::precision},
      {"sensitivity", &MetricsReport::sensitivity}, {"specificity", &MetricsReport::specificity},
      {"kappa", &MetricsReport::kappa},     {"accuracy", &MetricsReport::accuracy},
      {"brier", &MetricsReport::brier}};

  auto common_scenarios = [&](const EvaluatedEnsemble& other) {
    std::vector<Scenario> shared;
    const std::vector<Scenario> other_supported =
        supported_scenarios(other.loaded.models.front());
    for (Scenario s : scenarios)
      if (std::find(other_supported.begin(), other_supported.end(), s) !=
          other_supported.end())
        shared.push_back(s);
    require(!shared.empty(), "eval: the two ensembles share no scenario");
    return shared;
  };

  if (!compare_ckpts.empty()) {
    EvaluatedEnsemble other;
    other.loaded = load_ensemble(compare_ckpts);
    require(other.loaded.models.front().config.input_size == input_size,
            "eval: compare ensemble expects input size " +
                std::to_string(other.loaded.models.front().config.input_size) +
                ", main ensemble expects " + std::to_string(input_size));
    const std::vector<Scenario> shared = common_scenarios(other);
    evaluate(other, shared);
    json cmp = json::object();
    for (Scenario s : shared) {
      const std::string name = scenario_name(s);
      const auto& ra = main_ens.reports.at(name);
      const auto& rb = other.reports.at(name);
      json per_metric = json::object();
      for (const auto& [metric, member] : kMetricMembers) {
        std::vector<double> va, vb;
        for (const MetricsReport& r : ra) va.push_back(r.*member);
        for (const MetricsReport& r : rb) vb.push_back(r.*member);
        if (va.size() >= 2 && vb.size() >= 2)
          per_metric[metric] = ranksum_json(wilcoxon_rank_sum(va, vb));
      }
      std::vector<double> aa, ab;
      for (const MetricsReport& r : ra)
        if (r.auroc_defined) aa.push_back(r.auroc);
      for (const MetricsReport& r : rb)
        if (r.auroc_defined) ab.push_back(r.auroc);
      if (aa.size() >= 2 && ab.size() >= 2)
        per_metric["auroc"] = ranksum_json(wilcoxon_rank_sum(aa, ab));
      cmp[name] = per_metric;
    }
    js["wilcoxon_vs_compare"] = cmp;
    js["compare"] = cfg.compare;
  }

  if (!diff_ckpts.empty()) {
    EvaluatedEnsemble other;
    other.loaded = load_ensemble(diff_ckpts);
    require(other.loaded.models.front().config.input_size == input_size,
            "eval: differential ensemble expects input size " +
                std::to_string(other.loaded.models.front().config.input_size) +
                ", main ensemble expects " + std::to_string(input_size));
    const std::vector<Scenario> shared = common_scenarios(other);
    evaluate(other, shared);
    json diff = json::object();
    for (Scenario s : shared) {
      const std::string name = scenario_name(s);
      const CorrectnessRuns a =
          correctness_of(main_ens, name, record_ids, labels, cfg.eval.threshold);
      const CorrectnessRuns b =
          correctness_of(other, name, record_ids, labels, cfg.eval.threshold);
      const DifferentialSummary summary_s =
          bootstrap_differential(a, b, cfg.eval.iterations, cfg.eval.bootstrap_seed);
      diff[name] = differential_json(summary_s);
      write_differential_csv((out / ("differential_" + name + ".csv")).string(), summary_s);
    }
    js["differential"] = diff;
    js["differential_ensemble"] = cfg.differential;
  }

  if (!cfg.graders.empty()) {
    json graders = json::object();
    for (Scenario s : scenarios) {
      const std::string name = scenario_name(s);
      graders[name] = grader_json(compare_with_graders(main_ens.reports.at(name), cfg.graders,
                                                       record_ids, labels));
    }
    js["graders"] = graders;
  }

  write_text(out / "metrics.json", js.dump(2) + "\n");
  std::string csv = std::string(kMetricsCsvHeader) + "\n";
  for (Scenario s : scenarios) {
    const std::string name = scenario_name(s);
    for (std::size_t r = 0; r < main_ens.loaded.models.size(); ++r)
      csv += metrics_csv_row(main_ens.loaded.run_names[r], main_ens.reports.at(name)[r]) + "\n";
  }
  write_text(out / "metrics.csv", csv);
  write_text(out / "aggregate.csv", aggregate_csv(summary));
  write_config_echo(cfg, fs::path(cfg.output_dir));

  std::printf("eval: %zu runs x %zu scenario(s) on %zu records (%s split) -> %s\n",
              main_ens.loaded.models.size(), scenarios.size(), samples.size(),
              cfg.split_set.c_str(), out.string().c_str());
  for (const auto& [name, metrics] : summary) {
    const auto f1 = metrics.find("f1");
    const auto auroc = metrics.find("auroc");
    std::printf("  %s: median f1 %s, median auroc %s\n", name.c_str(),
                f1 != metrics.end() ? fmt(f1->second.median).c_str() : "n/a",
                auroc != metrics.end() ? fmt(auroc->second.median).c_str() : "n/a");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

int cmd_saliency(ExperimentConfig cfg) {
  const Scenario scenario = usage_phase([&] { return parse_scenario(cfg.scenario); });
  usage_phase([&] {
    if (cfg.checkpoint.empty())
      throw UsageError("saliency: no checkpoint given (--checkpoint or config)");
    if (!fs::exists(cfg.checkpoint))
      throw UsageError("saliency: checkpoint '" + cfg.checkpoint + "' does not exist");
    if (cfg.ids.empty()) throw UsageError("saliency: provide at least one record id (--ids)");
  });
  const std::vector<ExamRecord> records = load_manifest_checked(cfg.manifest, "saliency");

  std::map<std::string, const ExamRecord*> by_id;
  for (const ExamRecord& r : records) by_id[r.record_id()] = &r;
  for (const std::string& id : cfg.ids)
    if (!by_id.count(id)) {
      std::string known;
      std::size_t listed = 0;
      for (const auto& [rid, rec] : by_id) {
        if (listed == 20) {
          known += ", ... (" + std::to_string(by_id.size() - listed) + " more)";
          break;
        }
        known += (listed ? ", " : "") + rid;
        ++listed;
      }
      throw UsageError("saliency: unknown record id '" + id + "'; known ids: " + known);
    }

  const M3Model model = load_model(cfg.checkpoint);
  const fs::path out = fs::path(cfg.output_dir) / "saliency";
  fs::create_directories(out);

  std::vector<SaliencyMap> all_maps;
  for (const std::string& id : cfg.ids) {
    const ExamRecord& rec = *by_id.at(id);
    const Image cfp = load_image_for_model(rec.cfp_path, model.config.input_size);
    const Image faf = load_image_for_model(rec.faf_path, model.config.input_size);
    std::vector<SaliencyMap> maps = saliency_map(model, &cfp, &faf, scenario, id);
    for (SaliencyMap& m : maps) {
      const Image& base = m.modality == "cfp" ? cfp : faf;
      render_heatmap(m, base, (out / heatmap_filename(m)).string());
      all_maps.push_back(std::move(m));
    }
  }
  render_colorbar((out / "colorbar.png").string());
  write_saliency_csv((out / "saliency.csv").string(), all_maps);
  write_config_echo(cfg, fs::path(cfg.output_dir));

  std::printf("saliency: wrote %zu heatmap(s) for %zu record(s) (%s scenario) -> %s\n",
              all_maps.size(), cfg.ids.size(), scenario_name(scenario), out.string().c_str());
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"m3: multi-modal multi-task attention models on paired retinal images"};
  app.require_subcommand(1);

  // One shared flag store; only one subcommand parses per invocation. Flags
  // override config-file values (tracked via option counts).
  std::string config_path, output_dir, feature, manifest, kind, scenario, checkpoints,
      checkpoint, compare, differential, graders, split_set;
  std::vector<std::string> ids;
  std::uint64_t seed = 0;
  int runs = 0, participants = 0, visits = 0, batch_size = 0, patience = 0;
  int epochs_stage1 = 0, epochs_finetune = 0, epochs_non_m3 = 0, iterations = 0;
  Dim image_size = 0, input_size = 0;
  double prevalence = 0, ga_prevalence = 0, pigment_prevalence = 0, noise_sigma = 0;
  double lr = 0, finetune_lr = 0, threshold = 0;
  bool no_attention = false, no_multitask = false, no_augment = false;

  struct Override {
    CLI::Option* opt;
    std::function<void(ExperimentConfig&)> apply;
  };
  std::vector<Override> overrides;
  auto track = [&overrides](CLI::Option* opt, std::function<void(ExperimentConfig&)> apply) {
    overrides.push_back({opt, std::move(apply)});
  };

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "JSON experiment config; flags override file values")
        ->check(CLI::ExistingFile);
    track(cmd->add_option("--output-dir", output_dir, "Output directory (default m3_out)"),
          [&](ExperimentConfig& c) { c.output_dir = output_dir; });
    track(cmd->add_option("--feature", feature, "Feature: rpd | ga | pigmentary"),
          [&](ExperimentConfig& c) { c.feature = feature; });
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic paired CFP/FAF dataset");
  add_common(synth);
  track(synth->add_option("--participants", participants, "Number of participants"),
        [&](ExperimentConfig& c) { c.synth.n_participants = participants; });
  track(synth->add_option("--visits", visits, "Visits per participant"),
        [&](ExperimentConfig& c) { c.synth.visits_per_participant = visits; });
  track(synth->add_option("--image-size", image_size, "Synthetic image size in pixels"),
        [&](ExperimentConfig& c) { c.synth.image_size = image_size; });
  track(synth->add_option("--prevalence", prevalence, "Target feature prevalence"),
        [&](ExperimentConfig& c) { c.synth.prevalence = prevalence; });
  track(synth->add_option("--ga-prevalence", ga_prevalence, "Atrophy label prevalence"),
        [&](ExperimentConfig& c) { c.synth.ga_prevalence = ga_prevalence; });
  track(synth->add_option("--pigment-prevalence", pigment_prevalence,
                          "Pigmentary-change label prevalence"),
        [&](ExperimentConfig& c) { c.synth.pigment_prevalence = pigment_prevalence; });
  track(synth->add_option("--noise-sigma", noise_sigma, "Additive noise sigma"),
        [&](ExperimentConfig& c) { c.synth.noise_sigma = noise_sigma; });
  track(synth->add_option("--seed", seed, "Generator seed"),
        [&](ExperimentConfig& c) { c.synth.seed = seed; });

  CLI::App* train = app.add_subcommand("train", "Train an ensemble of repeated runs");
  add_common(train);
  track(train->add_option("--manifest", manifest, "Dataset manifest CSV"),
        [&](ExperimentConfig& c) { c.manifest = manifest; });
  track(train->add_option("--kind", kind, "Model kind: m3 | non_m3"),
        [&](ExperimentConfig& c) { c.kind = kind; });
  track(train->add_option("--scenario", scenario, "Scenario: cfp | faf | fused"),
        [&](ExperimentConfig& c) { c.scenario = scenario; });
  track(train->add_option("--runs", runs, "Ensemble size (repeated runs)"),
        [&](ExperimentConfig& c) { c.runs = runs; });
  track(train->add_option("--seed", seed, "Base seed (run i uses seed+i)"),
        [&](ExperimentConfig& c) { c.train.seed = seed; });
  track(train->add_option("--lr", lr, "Stage-I learning rate"),
        [&](ExperimentConfig& c) { c.train.learning_rate = lr; });
  track(train->add_option("--finetune-lr", finetune_lr, "Cascade learning rate"),
        [&](ExperimentConfig& c) { c.train.finetune_learning_rate = finetune_lr; });
  track(train->add_option("--batch-size", batch_size, "Minibatch size"),
        [&](ExperimentConfig& c) { c.train.batch_size = batch_size; });
  track(train->add_option("--patience", patience, "Early-stopping patience"),
        [&](ExperimentConfig& c) { c.train.early_stop_patience = patience; });
  track(train->add_option("--max-epochs-stage1", epochs_stage1, "Stage-I epoch cap"),
        [&](ExperimentConfig& c) { c.train.max_epochs_stage1 = epochs_stage1; });
  track(train->add_option("--max-epochs-finetune", epochs_finetune, "Cascade epoch cap"),
        [&](ExperimentConfig& c) { c.train.max_epochs_finetune = epochs_finetune; });
  track(train->add_option("--max-epochs-non-m3", epochs_non_m3, "Baseline epoch cap"),
        [&](ExperimentConfig& c) { c.train.max_epochs_non_m3 = epochs_non_m3; });
  track(train->add_option("--input-size", input_size, "Model input size in pixels"),
        [&](ExperimentConfig& c) { c.backbone.input_size = input_size; });
  track(train->add_flag("--no-attention", no_attention, "Ablate attention modules"),
        [&](ExperimentConfig& c) { c.train.no_attention = no_attention; });
  track(train->add_flag("--no-multitask", no_multitask, "Ablate joint multi-task stage"),
        [&](ExperimentConfig& c) { c.train.no_multitask = no_multitask; });
  track(train->add_flag("--no-augment", no_augment, "Disable training augmentation"),
        [&](ExperimentConfig& c) { c.train.augment = !no_augment; });

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints against a manifest");
  add_common(eval_cmd);
  track(eval_cmd->add_option("--checkpoints", checkpoints,
                             "Ensemble directory (run_*/checkpoint.ck) or one checkpoint"),
        [&](ExperimentConfig& c) { c.checkpoints = checkpoints; });
  track(eval_cmd->add_option("--manifest", manifest, "Dataset manifest CSV"),
        [&](ExperimentConfig& c) { c.manifest = manifest; });
  track(eval_cmd->add_option("--scenario", scenario, "Restrict to one scenario"),
        [&](ExperimentConfig& c) { c.eval.scenario = scenario; });
  track(eval_cmd->add_option("--threshold", threshold, "Positive-call threshold"),
        [&](ExperimentConfig& c) { c.eval.threshold = threshold; });
  track(eval_cmd->add_option("--split-set", split_set, "Records: train | val | test | all"),
        [&](ExperimentConfig& c) { c.split_set = split_set; });
  track(eval_cmd->add_option("--compare", compare, "Second ensemble: rank-sum comparison"),
        [&](ExperimentConfig& c) { c.compare = compare; });
  track(eval_cmd->add_option("--differential", differential,
                             "Second ensemble: bootstrap differential analysis"),
        [&](ExperimentConfig& c) { c.differential = differential; });
  track(eval_cmd->add_option("--iterations", iterations, "Bootstrap iterations"),
        [&](ExperimentConfig& c) { c.eval.iterations = iterations; });
  track(eval_cmd->add_option("--graders", graders, "Grader-call CSV for comparison"),
        [&](ExperimentConfig& c) { c.graders = graders; });

  CLI::App* saliency = app.add_subcommand("saliency", "Export saliency heatmaps");
  add_common(saliency);
  track(saliency->add_option("--checkpoint", checkpoint, "Model checkpoint file"),
        [&](ExperimentConfig& c) { c.checkpoint = checkpoint; });
  track(saliency->add_option("--manifest", manifest, "Dataset manifest CSV"),
        [&](ExperimentConfig& c) { c.manifest = manifest; });
  track(saliency->add_option("--scenario", scenario, "Scenario: cfp | faf | fused"),
        [&](ExperimentConfig& c) { c.scenario = scenario; });
  track(saliency->add_option("--ids", ids, "Record ids to back-project"),
        [&](ExperimentConfig& c) { c.ids = ids; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2; --help exits 0
  }

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    for (const Override& o : overrides)
      if (o.opt->count() > 0) o.apply(cfg);

    if (synth->parsed()) return cmd_synth(std::move(cfg));
    if (train->parsed()) return cmd_train(std::move(cfg));
    if (eval_cmd->parsed()) return cmd_eval(std::move(cfg));
    return cmd_saliency(std::move(cfg));
  } catch (const UsageError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
