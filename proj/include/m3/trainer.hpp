#pragma once

#include "m3/eval.hpp"
#include "m3/model.hpp"

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

// Two-stage training: joint multi-task optimization of all three heads
// (stage I), then cascading fine-tuning (stage II) — each modality path
// alone, then the fusion layers on top of frozen per-modality features.
// Baselines run the same single-task loop with no second stage. Repeated
// runs over one fixed split form an ensemble for the statistics layer.

namespace m3 {

struct TrainConfig {
  double learning_rate = 1e-3;
  double finetune_learning_rate = 1e-4;
  Dim batch_size = 16;
  int early_stop_patience = 5;
  int max_epochs_stage1 = 30;    // joint multi-task stage
  int max_epochs_finetune = 10;  // each cascade phase
  int max_epochs_non_m3 = 10;    // single-task baselines
  std::array<double, 3> multitask_weights = {1.0, 1.0, 1.0};  // cfp, faf, fused
  std::uint64_t seed = 1;
  Feature feature = Feature::rpd;
  bool no_attention = false;
  bool no_multitask = false;
  bool augment = true;

  void validate() const;
};

// Strict-improvement early stopping: stop after `patience` consecutive
// observations without a new best; the caller restores the best snapshot.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  bool observe(double loss);  // true when loss strictly improves the best
  bool should_stop() const { return stale_ >= patience_; }
  int best_index() const { return best_index_; }  // 1-based observation index
  double best_loss() const { return best_loss_; }
  int observations() const { return n_; }

 private:
  int patience_;
  int n_ = 0, best_index_ = 0, stale_ = 0;
  double best_loss_ = 0;
};

struct TrainSample {
  std::string record_id;
  Image cfp, faf;
  int label = 0;
};

struct DataSplit {
  std::vector<TrainSample> train, val, test;
};

// Loads and resizes every usable record (drops rows with an NA label for
// the feature) into its assigned split.
DataSplit load_split(const std::vector<ExamRecord>& records, const SplitAssignment& split,
                     Feature feature, Dim input_size);

struct EpochLog {
  int epoch = 0;                  // 1-based within the phase
  std::array<bool, 3> active{};   // which task losses exist (cfp, faf, fused)
  std::array<double, 3> train_loss{}, val_loss{};
  double monitored_val = 0;  // weighted sum of active validation losses
  double wall_seconds = 0;
};

struct PhaseResult {
  std::string phase;  // stage1 | cascade_cfp | cascade_faf | cascade_fused | single
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // 0 = the pre-phase parameters were kept
  bool aborted = false;
  std::string abort_reason;
};

// Called after every completed epoch; an exception aborts training with the
// best parameters so far restored (the NaN-abort path shares this route).
using EpochHook = std::function<void(const std::string& phase, int epoch)>;

// Stage I: one Adam step per minibatch on the weighted sum of the active
// task losses, over the union of all trainable parameters.
PhaseResult train_multitask(M3Model& model, const DataSplit& data, const TrainConfig& cfg,
                            const EpochHook& hook = nullptr);

// Stage II: (a) CFP path alone, (b) FAF path alone, (c) fusion layers with
// both backbones and both self-attention modules frozen.
std::vector<PhaseResult> cascade_finetune(M3Model& model, const DataSplit& data,
                                          const TrainConfig& cfg,
                                          const EpochHook& hook = nullptr);

// Single-task baseline training (no stage II).
PhaseResult train_single_task(M3Model& model, const DataSplit& data, const TrainConfig& cfg,
                              const EpochHook& hook = nullptr);

// Builds the model for (kind, scenario) and runs the stages appropriate to
// it. A fully ablated multi-task model (no_attention + no_multitask)
// degenerates to the baseline procedure exactly: single stage, same caps.
struct RunArtifacts {
  M3Model model;
  std::vector<PhaseResult> phases;
  bool aborted = false;
  std::string abort_reason;
};
RunArtifacts train_full(ModelKind kind, Scenario scenario, const BackboneConfig& backbone,
                        const DataSplit& data, const TrainConfig& cfg,
                        const EpochHook& hook = nullptr);

// Batched inference: probabilities for one scenario over a sample list.
std::vector<double> predict_probs(const M3Model& model, const std::vector<TrainSample>& samples,
                                  Scenario scenario, Dim batch_size = 16);

struct RunOutput {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<PhaseResult> phases;
  std::map<std::string, MetricsReport> reports;            // by scenario name
  std::map<std::string, std::vector<double>> test_probs;   // by scenario name
  std::string run_dir;  // empty when no artifacts were written
};

struct EnsembleResult {
  ModelKind kind = ModelKind::m3;
  Scenario scenario = Scenario::fused;  // the task for baselines
  std::vector<std::uint64_t> seeds;     // one per attempted run
  std::vector<RunOutput> runs;          // aligned with seeds
  bool partial = false;                 // some run aborted
  std::vector<std::string> test_record_ids;
  std::vector<int> test_labels;
  // per scenario name -> per metric -> median/IQR over surviving runs
  std::map<std::string, std::map<std::string, Quartiles>> summary;
};

// n_runs independent trainings (seeds seed, seed+1, ...) on the same split.
// When out_dir is nonempty, each run writes checkpoint.ck, epochs.csv, and
// config.json into out_dir/run_<i>/. M3_THREADS caps worker threads.
EnsembleResult run_ensemble(ModelKind kind, Scenario scenario, int n_runs,
                            const BackboneConfig& backbone, const DataSplit& data,
                            const TrainConfig& cfg, const std::string& out_dir = "",
                            const EpochHook& hook = nullptr);

// Per-record correctness rows for the bootstrap differential analysis.
CorrectnessRuns ensemble_correctness(const EnsembleResult& ensemble, Scenario scenario,
                                     double threshold = 0.5);

std::string train_config_json(const TrainConfig& cfg, ModelKind kind, Scenario scenario,
                              const BackboneConfig& backbone);
void write_epoch_csv(const std::string& path, const std::vector<PhaseResult>& phases);

}  // namespace m3
