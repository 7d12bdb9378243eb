#include "m3/trainer.hpp"

#include "m3/adam.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

namespace m3 {

namespace {

std::array<double, 3> scenario_weights(Scenario s) {
  std::array<double, 3> w{};
  w[std::size_t(s)] = 1.0;
  return w;
}

std::vector<Tensor<float>> all_params(const M3Model& model) {
  std::vector<Tensor<float>> out;
  for (auto& [name, t] : named_params(model)) out.push_back(t);
  return out;
}

std::vector<Array<float>> snapshot_values(const std::vector<Tensor<float>>& params) {
  std::vector<Array<float>> out;
  out.reserve(params.size());
  for (const Tensor<float>& p : params) out.push_back(p.value());
  return out;
}

void restore_values(std::vector<Tensor<float>>& params,
                    const std::vector<Array<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i)
    const_cast<Tensor<float>&>(params[i]).value() = snap[i];
}

struct Batch {
  Tensor<float> cfp, faf;  // invalid when the modality is not needed
  Tensor<float> labels;    // {B,1}, no grad
  Dim size = 0;
};

Batch make_batch(const std::vector<TrainSample>& samples, const std::vector<std::size_t>& order,
                 std::size_t begin, std::size_t end, bool need_cfp, bool need_faf, bool augment,
                 std::mt19937_64& rng) {
  Batch batch;
  batch.size = Dim(end - begin);
  std::vector<Image> cfp_imgs, faf_imgs;
  Array<float> y(batch.size);
  for (std::size_t k = begin; k < end; ++k) {
    const TrainSample& s = samples[order[k]];
    Image c = s.cfp, f = s.faf;
    // The pair transform is always sampled, and applied to both images,
    // so the rng draw sequence does not depend on which modalities a
    // particular model consumes.
    if (augment) augment_pair(c, f, rng);
    if (need_cfp) cfp_imgs.push_back(std::move(c));
    if (need_faf) faf_imgs.push_back(std::move(f));
    y[Dim(k - begin)] = float(s.label);
  }
  auto pointers = [](const std::vector<Image>& imgs) {
    std::vector<const Image*> ps;
    for (const Image& img : imgs) ps.push_back(&img);
    return ps;
  };
  if (need_cfp) batch.cfp = image_batch(pointers(cfp_imgs));
  if (need_faf) batch.faf = image_batch(pointers(faf_imgs));
  batch.labels = Tensor<float>::leaf({batch.size, 1}, std::move(y), /*requires_grad=*/false);
  return batch;
}

// Per-task mean losses over a sample list (no augmentation, no updates).
std::array<double, 3> dataset_losses(const M3Model& model,
                                     const std::vector<TrainSample>& samples,
                                     const std::array<double, 3>& weights, Dim batch_size) {
  const bool want[3] = {weights[0] > 0, weights[1] > 0, weights[2] > 0};
  const bool need_cfp = want[0] || want[2];
  const bool need_faf = want[1] || want[2];
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::array<double, 3> sums{};
  std::mt19937_64 unused_rng;
  for (std::size_t begin = 0; begin < samples.size(); begin += std::size_t(batch_size)) {
    const std::size_t end = std::min(samples.size(), begin + std::size_t(batch_size));
    Batch b = make_batch(samples, order, begin, end, need_cfp, need_faf, false, unused_rng);
    JointForward f = forward_joint(model, b.cfp.valid() ? &b.cfp : nullptr,
                                   b.faf.valid() ? &b.faf : nullptr, want[0], want[1], want[2]);
    const Tensor<float>* logits[3] = {&f.logits_cfp, &f.logits_faf, &f.logits_fused};
    for (int t = 0; t < 3; ++t)
      if (want[t])
        sums[std::size_t(t)] +=
            double(bce_with_logits(*logits[t], b.labels).item()) * double(b.size);
  }
  for (double& s : sums) s /= double(samples.size());
  return sums;
}

// One training phase: minibatch Adam on the weighted active-task loss with
// strict-improvement early stopping on the weighted validation loss. The
// pre-phase parameters participate as the baseline observation, so a phase
// that never improves validation restores its starting point.
PhaseResult run_phase(M3Model& model, const DataSplit& data, const TrainConfig& cfg,
                      const std::string& phase_name, std::uint64_t stream_tag,
                      const std::array<double, 3>& weights, double lr, int max_epochs,
                      std::vector<Tensor<float>> trainable, const EpochHook& hook) {
  require(!data.train.empty(), "train: empty training split");
  require(!data.val.empty(), "train: empty validation split");
  require(!trainable.empty(), "train: phase '" + phase_name + "' has no trainable parameters");
  const bool want[3] = {weights[0] > 0, weights[1] > 0, weights[2] > 0};
  require(want[0] || want[1] || want[2], "train: all task weights are zero");
  require(!want[0] || model.has_cfp(), "train: cfp task weighted but model has no cfp head");
  require(!want[1] || model.has_faf(), "train: faf task weighted but model has no faf head");
  require(!want[2] || model.has_fused(),
          "train: fused task weighted but model has no fused head");
  const bool need_cfp = want[0] || want[2];
  const bool need_faf = want[1] || want[2];

  PhaseResult result;
  result.phase = phase_name;

  Adam<float>::Config adam_cfg;
  adam_cfg.lr = float(lr);
  Adam<float> opt(trainable, adam_cfg);

  EarlyStopper stopper(cfg.early_stop_patience);
  auto weighted = [&](const std::array<double, 3>& losses) {
    double total = 0;
    for (int t = 0; t < 3; ++t)
      if (want[t]) total += weights[std::size_t(t)] * losses[std::size_t(t)];
    return total;
  };

  std::vector<Array<float>> best = snapshot_values(trainable);
  try {
    stopper.observe(weighted(dataset_losses(model, data.val, weights, cfg.batch_size)));

    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      auto erng = seeded_rng(cfg.seed, (stream_tag << 32) | std::uint64_t(epoch));
      std::shuffle(order.begin(), order.end(), erng);

      std::array<double, 3> train_sums{};
      for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
        Batch b =
            make_batch(data.train, order, begin, end, need_cfp, need_faf, cfg.augment, erng);
        JointForward f =
            forward_joint(model, b.cfp.valid() ? &b.cfp : nullptr,
                          b.faf.valid() ? &b.faf : nullptr, want[0], want[1], want[2]);
        const Tensor<float>* logits[3] = {&f.logits_cfp, &f.logits_faf, &f.logits_fused};
        Tensor<float> total;
        for (int t = 0; t < 3; ++t) {
          if (!want[t]) continue;
          Tensor<float> task_loss = bce_with_logits(*logits[t], b.labels);
          train_sums[std::size_t(t)] += double(task_loss.item()) * double(b.size);
          Tensor<float> contribution = scale(task_loss, float(weights[std::size_t(t)]));
          total = total.valid() ? add(total, contribution) : contribution;
        }
        backward(total);
        opt.step();
      }
      for (double& s : train_sums) s /= double(data.train.size());

      EpochLog log;
      log.epoch = epoch;
      for (int t = 0; t < 3; ++t) log.active[std::size_t(t)] = want[t];
      log.train_loss = train_sums;
      log.val_loss = dataset_losses(model, data.val, weights, cfg.batch_size);
      log.monitored_val = weighted(log.val_loss);
      log.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.epochs.push_back(log);

      if (stopper.observe(log.monitored_val)) {
        best = snapshot_values(trainable);
        result.best_epoch = epoch;
      }
      if (hook) hook(phase_name, epoch);
      if (stopper.should_stop()) break;
    }
  } catch (const std::exception& e) {
    result.aborted = true;
    result.abort_reason = e.what();
  }
  restore_values(trainable, best);
  return result;
}

std::array<double, 3> stage1_weights(const M3Model& model, const TrainConfig& cfg) {
  if (model.spec.kind == ModelKind::non_m3 || !model.spec.multitask_enabled())
    return scenario_weights(model.spec.scenario);
  return cfg.multitask_weights;
}

int env_thread_cap() {
  if (const char* env = std::getenv("M3_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return std::numeric_limits<int>::max();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate >= 0, "train config: learning_rate must be >= 0");
  require(finetune_learning_rate >= 0, "train config: finetune_learning_rate must be >= 0");
  require(batch_size >= 1, "train config: batch_size must be >= 1");
  require(early_stop_patience >= 1, "train config: early_stop_patience must be >= 1");
  require(max_epochs_stage1 >= 1 && max_epochs_finetune >= 1 && max_epochs_non_m3 >= 1,
          "train config: epoch caps must be >= 1");
  double wsum = 0;
  for (double w : multitask_weights) {
    require(w >= 0, "train config: multitask weights must be >= 0");
    wsum += w;
  }
  require(wsum > 0, "train config: at least one multitask weight must be positive");
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  require(patience >= 1, "early stopping: patience must be >= 1");
  best_loss_ = std::numeric_limits<double>::infinity();
}

bool EarlyStopper::observe(double loss) {
  ++n_;
  if (loss < best_loss_) {
    best_loss_ = loss;
    best_index_ = n_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

DataSplit load_split(const std::vector<ExamRecord>& records, const SplitAssignment& split,
                     Feature feature, Dim input_size) {
  DataSplit out;
  for (const ExamRecord& rec : records) {
    if (rec.labels.of(feature) < 0) continue;  // NA for this feature
    TrainSample s;
    s.record_id = rec.record_id();
    s.cfp = load_image_for_model(rec.cfp_path, input_size);
    s.faf = load_image_for_model(rec.faf_path, input_size);
    s.label = rec.labels.of(feature);
    switch (split.of(rec)) {
      case Split::train: out.train.push_back(std::move(s)); break;
      case Split::val: out.val.push_back(std::move(s)); break;
      case Split::test: out.test.push_back(std::move(s)); break;
    }
  }
  return out;
}

PhaseResult train_multitask(M3Model& model, const DataSplit& data, const TrainConfig& cfg,
                            const EpochHook& hook) {
  cfg.validate();
  return run_phase(model, data, cfg, "stage1", 1, stage1_weights(model, cfg),
                   cfg.learning_rate, cfg.max_epochs_stage1, all_params(model), hook);
}

std::vector<PhaseResult> cascade_finetune(M3Model& model, const DataSplit& data,
                                          const TrainConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  require(model.spec.kind == ModelKind::m3,
          "cascade_finetune: only multi-task models have a second stage");
  std::vector<PhaseResult> phases;

  // (a) CFP path alone, (b) FAF path alone.
  phases.push_back(run_phase(model, data, cfg, "cascade_cfp", 2, scenario_weights(Scenario::cfp),
                             cfg.finetune_learning_rate, cfg.max_epochs_finetune,
                             params_with_prefix(model, {"cfp_backbone", "sa_cfp", "head_cfp"}),
                             hook));
  if (phases.back().aborted) return phases;

  phases.push_back(run_phase(model, data, cfg, "cascade_faf", 3, scenario_weights(Scenario::faf),
                             cfg.finetune_learning_rate, cfg.max_epochs_finetune,
                             params_with_prefix(model, {"faf_backbone", "sa_faf", "head_faf"}),
                             hook));
  if (phases.back().aborted) return phases;

  // (c) Freeze both backbones and both self-attention modules; tune only
  // the fusion layers. The freeze is structural: frozen parameters are
  // outside the optimizer and outside the gradient graph.
  auto frozen = params_with_prefix(model, {"cfp_backbone", "faf_backbone", "sa_cfp", "sa_faf"});
  set_trainable(frozen, false);
  phases.push_back(run_phase(model, data, cfg, "cascade_fused", 4,
                             scenario_weights(Scenario::fused), cfg.finetune_learning_rate,
                             cfg.max_epochs_finetune,
                             params_with_prefix(model, {"xattn", "head_fused"}), hook));
  set_trainable(frozen, true);
  return phases;
}

PhaseResult train_single_task(M3Model& model, const DataSplit& data, const TrainConfig& cfg,
                              const EpochHook& hook) {
  cfg.validate();
  return run_phase(model, data, cfg, "single", 1, scenario_weights(model.spec.scenario),
                   cfg.learning_rate, cfg.max_epochs_non_m3, all_params(model), hook);
}

RunArtifacts train_full(ModelKind kind, Scenario scenario, const BackboneConfig& backbone,
                        const DataSplit& data, const TrainConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  ModelSpec spec;
  spec.kind = kind;
  spec.scenario = scenario;
  spec.feature = cfg.feature;
  if (kind == ModelKind::m3) {
    spec.no_attention = cfg.no_attention;
    spec.no_multitask = cfg.no_multitask;
  }

  RunArtifacts out;
  out.model = build_model(spec, backbone, cfg.seed);

  const bool baseline_procedure =
      kind == ModelKind::non_m3 || (spec.no_attention && spec.no_multitask);
  if (baseline_procedure) {
    // A fully ablated multi-task model degenerates to the baseline
    // procedure exactly: same single stage, same caps, same rng streams.
    out.phases.push_back(train_single_task(out.model, data, cfg, hook));
  } else {
    out.phases.push_back(train_multitask(out.model, data, cfg, hook));
    // The cascade fine-tunes the per-modality paths and then the fusion
    // layers, so it only applies when stage I trained all three tasks.
    if (!out.phases.back().aborted && out.model.spec.multitask_enabled()) {
      auto cascade = cascade_finetune(out.model, data, cfg, hook);
      out.phases.insert(out.phases.end(), cascade.begin(), cascade.end());
    }
  }
  if (out.phases.back().aborted) {
    out.aborted = true;
    out.abort_reason = out.phases.back().abort_reason;
  }
  return out;
}

std::vector<double> predict_probs(const M3Model& model, const std::vector<TrainSample>& samples,
                                  Scenario scenario, Dim batch_size) {
  require(batch_size >= 1, "predict_probs: batch_size must be >= 1");
  const bool need_cfp = scenario != Scenario::faf;
  const bool need_faf = scenario != Scenario::cfp;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::mt19937_64 unused_rng;
  std::vector<double> probs;
  probs.reserve(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += std::size_t(batch_size)) {
    const std::size_t end = std::min(samples.size(), begin + std::size_t(batch_size));
    Batch b = make_batch(samples, order, begin, end, need_cfp, need_faf, false, unused_rng);
    JointForward f = forward_scenario(model, scenario, b.cfp.valid() ? &b.cfp : nullptr,
                                      b.faf.valid() ? &b.faf : nullptr);
    const Tensor<float>& logits = scenario == Scenario::cfp
                                      ? f.logits_cfp
                                      : (scenario == Scenario::faf ? f.logits_faf
                                                                   : f.logits_fused);
    Tensor<float> p = sigmoid(logits);
    for (Dim i = 0; i < b.size; ++i) probs.push_back(double(p.value()[i]));
  }
  return probs;
}

EnsembleResult run_ensemble(ModelKind kind, Scenario scenario, int n_runs,
                            const BackboneConfig& backbone, const DataSplit& data,
                            const TrainConfig& cfg, const std::string& out_dir,
                            const EpochHook& hook) {
  cfg.validate();
  require(n_runs >= 1, "run_ensemble: n_runs must be >= 1, got " + std::to_string(n_runs));
  require(!data.test.empty(), "run_ensemble: empty test split");

  EnsembleResult ens;
  ens.kind = kind;
  ens.scenario = scenario;
  for (const TrainSample& s : data.test) {
    ens.test_record_ids.push_back(s.record_id);
    ens.test_labels.push_back(s.label);
  }
  for (int i = 0; i < n_runs; ++i) ens.seeds.push_back(cfg.seed + std::uint64_t(i));
  ens.runs.resize(std::size_t(n_runs));

  const bool all_scenarios = kind == ModelKind::m3 && !cfg.no_multitask;
  std::vector<Scenario> scenarios = all_scenarios
                                        ? std::vector<Scenario>{Scenario::cfp, Scenario::faf,
                                                                Scenario::fused}
                                        : std::vector<Scenario>{scenario};

  auto run_one = [&](int i) {
    RunOutput& out = ens.runs[std::size_t(i)];
    out.seed = ens.seeds[std::size_t(i)];
    TrainConfig run_cfg = cfg;
    run_cfg.seed = out.seed;
    try {
      RunArtifacts art = train_full(kind, scenario, backbone, data, run_cfg, hook);
      out.phases = std::move(art.phases);
      if (!out_dir.empty()) {
        namespace fs = std::filesystem;
        char name[32];
        std::snprintf(name, sizeof(name), "run_%02d", i);
        const fs::path dir = fs::path(out_dir) / name;
        fs::create_directories(dir);
        out.run_dir = dir.string();
        save_model(art.model, (dir / "checkpoint.ck").string());
        write_epoch_csv((dir / "epochs.csv").string(), out.phases);
        std::ofstream cfg_file(dir / "config.json");
        cfg_file << train_config_json(run_cfg, kind, scenario, backbone) << "\n";
      }
      if (art.aborted) {
        out.error = art.abort_reason;
        return;
      }
      for (Scenario s : scenarios) {
        std::vector<double> probs =
            predict_probs(art.model, data.test, s, cfg.batch_size);
        out.test_probs[scenario_name(s)] = probs;
        out.reports[scenario_name(s)] =
            panel(probs, ens.test_labels, 0.5, scenario_name(s), feature_name(cfg.feature));
      }
      out.ok = true;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  };

  int threads = int(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  threads = std::min({threads, env_thread_cap(), n_runs});
  if (threads <= 1) {
    for (int i = 0; i < n_runs; ++i) run_one(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (int i = next.fetch_add(1); i < n_runs; i = next.fetch_add(1)) run_one(i);
      });
    for (std::thread& t : pool) t.join();
  }

  for (const RunOutput& run : ens.runs)
    if (!run.ok) ens.partial = true;
  for (Scenario s : scenarios) {
    std::vector<MetricsReport> reports;
    for (const RunOutput& run : ens.runs)
      if (run.ok) reports.push_back(run.reports.at(scenario_name(s)));
    if (reports.size() >= 2) ens.summary[scenario_name(s)] = aggregate(reports);
  }
  return ens;
}

CorrectnessRuns ensemble_correctness(const EnsembleResult& ens, Scenario scenario,
                                     double threshold) {
  CorrectnessRuns out;
  out.record_ids = ens.test_record_ids;
  out.labels = ens.test_labels;
  for (const RunOutput& run : ens.runs) {
    if (!run.ok) continue;
    const auto it = run.test_probs.find(scenario_name(scenario));
    require(it != run.test_probs.end(), std::string("ensemble_correctness: no '") +
                                            scenario_name(scenario) +
                                            "' predictions in this ensemble");
    std::vector<char> row;
    for (std::size_t r = 0; r < it->second.size(); ++r) {
      const int call = it->second[r] >= threshold ? 1 : 0;
      row.push_back(call == out.labels[r] ? 1 : 0);
    }
    out.correct.push_back(std::move(row));
  }
  require(!out.correct.empty(), "ensemble_correctness: no surviving runs");
  return out;
}

std::string train_config_json(const TrainConfig& cfg, ModelKind kind, Scenario scenario,
                              const BackboneConfig& backbone) {
  nlohmann::json j;
  j["kind"] = kind_name(kind);
  j["scenario"] = scenario_name(scenario);
  j["feature"] = feature_name(cfg.feature);
  j["learning_rate"] = cfg.learning_rate;
  j["finetune_learning_rate"] = cfg.finetune_learning_rate;
  j["batch_size"] = cfg.batch_size;
  j["early_stop_patience"] = cfg.early_stop_patience;
  j["max_epochs_stage1"] = cfg.max_epochs_stage1;
  j["max_epochs_finetune"] = cfg.max_epochs_finetune;
  j["max_epochs_non_m3"] = cfg.max_epochs_non_m3;
  j["multitask_weights"] = cfg.multitask_weights;
  j["seed"] = cfg.seed;
  j["no_attention"] = cfg.no_attention;
  j["no_multitask"] = cfg.no_multitask;
  j["augment"] = cfg.augment;
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockSpec& b : backbone.blocks)
    blocks.push_back({{"channels", b.channels}, {"pool", b.pool}});
  j["backbone"] = {{"input_size", backbone.input_size}, {"blocks", blocks}};
  return j.dump(2);
}

void write_epoch_csv(const std::string& path, const std::vector<PhaseResult>& phases) {
  std::ofstream f(path);
  require(f.good(), "write_epoch_csv: cannot write '" + path + "'");
  f << "phase,epoch,train_cfp,train_faf,train_fused,val_cfp,val_faf,val_fused,"
       "monitored_val,wall_seconds\n";
  for (const PhaseResult& phase : phases)
    for (const EpochLog& log : phase.epochs) {
      f << phase.phase << "," << log.epoch;
      for (int t = 0; t < 3; ++t)
        f << "," << (log.active[std::size_t(t)] ? format_double(log.train_loss[std::size_t(t)])
                                                : std::string());
      for (int t = 0; t < 3; ++t)
        f << "," << (log.active[std::size_t(t)] ? format_double(log.val_loss[std::size_t(t)])
                                                : std::string());
      f << "," << format_double(log.monitored_val) << "," << format_double(log.wall_seconds)
        << "\n";
    }
}

}  // namespace m3
