#pragma once

#include "m3/attention.hpp"
#include "m3/checkpoint.hpp"
#include "m3/dataset.hpp"

#include <optional>
#include <string>
#include <vector>

// The model zoo: one builder covers the attention-fused multi-task models
// (one per feature) and the plain single-task baselines, so that ablation
// flags degenerate the former exactly into the latter. All models share the
// same inception-style backbone and dense head hyperparameters; the fused
// variants differ only in how the two modality streams are combined
// (cross-modality attention vs plain concatenation).

namespace m3 {

enum class Scenario { cfp, faf, fused };
const char* scenario_name(Scenario s);
Scenario parse_scenario(const std::string& name);

enum class ModelKind { m3, non_m3 };
const char* kind_name(ModelKind k);
ModelKind parse_kind(const std::string& name);

struct BlockSpec {
  Dim channels = 0;  // total output channels; split ~1/4, 1/2, 1/4 over 1x1/3x3/5x5
  bool pool = true;  // 2x2 max-pool after the block
};

struct BackboneConfig {
  Dim input_size = 48;
  std::vector<BlockSpec> blocks = {{8, true}, {16, true}, {32, true}};

  void validate() const;
  Dim final_h() const;  // input_size halved once per pooling block
  Dim final_w() const { return final_h(); }
  Dim final_d() const;  // channels of the last block
};

struct ModelSpec {
  ModelKind kind = ModelKind::m3;
  Scenario scenario = Scenario::fused;  // the single task for baselines
  Feature feature = Feature::rpd;
  bool no_attention = false;
  bool no_multitask = false;

  bool attention_enabled() const { return kind == ModelKind::m3 && !no_attention; }
  bool multitask_enabled() const { return kind == ModelKind::m3 && !no_multitask; }
};

struct ConvLayer {
  Tensor<float> w;  // {kh, kw, c_in, c_out}
  Tensor<float> b;  // {c_out}
};

struct InceptionBlock {
  ConvLayer c1, c3, c5;  // parallel 1x1 / 3x3 / 5x5 paths, channel-concatenated
  bool pool = true;
};

struct Backbone {
  std::vector<InceptionBlock> blocks;
};

struct Head {
  Tensor<float> w1, b1;  // dense: input -> width 64, relu
  Tensor<float> w2, b2;  // dense: 64 -> 1 logit
};

struct M3Model {
  BackboneConfig config;
  ModelSpec spec;

  std::optional<Backbone> cfp_backbone, faf_backbone;
  // Self-attention parameter objects are shared: the modality head path and
  // the fused path read the same tensors, so an update through either path
  // is visible to the other.
  std::optional<SelfAttentionParams<float>> sa_cfp, sa_faf;
  std::optional<CrossAttentionParams<float>> xattn;
  std::optional<Head> head_cfp, head_faf, head_fused;

  bool has_cfp() const { return head_cfp.has_value(); }
  bool has_faf() const { return head_faf.has_value(); }
  bool has_fused() const { return head_fused.has_value(); }
};

struct Prediction {
  std::string record_id;
  Scenario scenario = Scenario::cfp;
  double probability = 0.0;  // sigmoid(logit), strictly inside (0,1)
  double logit = 0.0;
};

// Builds a model with the component set implied by the spec. Every
// component draws its initial weights from its own named rng stream, so a
// component shared between two model shapes initializes identically for the
// same seed regardless of which other components exist.
M3Model build_model(const ModelSpec& spec, const BackboneConfig& config, std::uint64_t seed);

// Baseline counterpart with identical backbone/head hyperparameters, no
// attention modules, and only the named scenario's path.
M3Model build_non_m3(Scenario scenario, const BackboneConfig& config, Feature feature,
                     std::uint64_t seed);

// Stable, deterministic name -> parameter registry (checkpoint order).
NamedParams named_params(const M3Model& model);
// Subset whose names start with any of the given prefixes.
std::vector<Tensor<float>> params_with_prefix(const M3Model& model,
                                              const std::vector<std::string>& prefixes);
void set_trainable(const std::vector<Tensor<float>>& params, bool trainable);

// JSON echo of BackboneConfig + ModelSpec; embedded in checkpoints so a
// model can be rebuilt from its file alone.
std::string model_manifest_json(const M3Model& model);
M3Model build_from_manifest(const std::string& manifest_json);

void save_model(const M3Model& model, const std::string& path);
M3Model load_model(const std::string& path);

// Batched forward pass. Inputs are {N, input_size, input_size, 1} tensors;
// a null pointer marks the modality as absent. Only the requested paths are
// evaluated, and paths the model lacks must not be requested.
struct JointForward {
  Tensor<float> logits_cfp, logits_faf, logits_fused;  // {N,1}; invalid when not requested
  Tensor<float> cfp_map, faf_map;  // last conv maps {N,h,w,d}; invalid when modality unused
};
JointForward forward_joint(const M3Model& model, const Tensor<float>* cfp,
                           const Tensor<float>* faf, bool want_cfp, bool want_faf,
                           bool want_fused);
JointForward forward_scenario(const M3Model& model, Scenario scenario, const Tensor<float>* cfp,
                              const Tensor<float>* faf);

// Packs images into an {N, h, w, 1} constant tensor (no gradient tracking).
Tensor<float> image_batch(const std::vector<const Image*>& images);

// Single-pair convenience wrappers; images must already match input_size
// (resizing is a dataset-stage concern, not predict's).
Prediction predict_cfp(const M3Model& model, const Image& cfp);
Prediction predict_faf(const M3Model& model, const Image& faf);
Prediction predict_fused(const M3Model& model, const Image& cfp, const Image& faf);

}  // namespace m3
