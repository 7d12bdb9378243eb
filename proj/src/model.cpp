#include "m3/model.hpp"

#include <json.hpp>

#include <algorithm>

namespace m3 {

namespace {

using nlohmann::json;

// Stable stream id per component name, so initialization draws are
// independent of which other components a model happens to contain.
std::uint64_t component_stream(const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 component_rng(std::uint64_t seed, const std::string& name) {
  return seeded_rng(seed, component_stream(name));
}

constexpr Dim kHeadWidth = 64;

Backbone init_backbone(const BackboneConfig& cfg, std::uint64_t seed, const std::string& name) {
  auto rng = component_rng(seed, name);
  Backbone bb;
  Dim c_in = 1;
  for (const BlockSpec& spec : cfg.blocks) {
    const Dim c1 = spec.channels / 4;
    const Dim c5 = spec.channels / 4;
    const Dim c3 = spec.channels - c1 - c5;
    InceptionBlock block;
    block.c1 = {he_uniform_conv<float>(1, 1, c_in, c1, rng), zeros<float>({c1})};
    block.c3 = {he_uniform_conv<float>(3, 3, c_in, c3, rng), zeros<float>({c3})};
    block.c5 = {he_uniform_conv<float>(5, 5, c_in, c5, rng), zeros<float>({c5})};
    block.pool = spec.pool;
    bb.blocks.push_back(std::move(block));
    c_in = spec.channels;
  }
  return bb;
}

Head init_head(Dim in_dim, std::uint64_t seed, const std::string& name) {
  auto rng = component_rng(seed, name);
  return {he_uniform_dense<float>(in_dim, kHeadWidth, rng), zeros<float>({kHeadWidth}),
          he_uniform_dense<float>(kHeadWidth, 1, rng), zeros<float>({1})};
}

Tensor<float> backbone_forward(const Backbone& bb, const Tensor<float>& x) {
  Tensor<float> h = x;
  for (const InceptionBlock& block : bb.blocks) {
    Tensor<float> p1 = relu(conv2d(h, block.c1.w, block.c1.b));
    Tensor<float> p3 = relu(conv2d(h, block.c3.w, block.c3.b));
    Tensor<float> p5 = relu(conv2d(h, block.c5.w, block.c5.b));
    h = concat(std::vector<Tensor<float>>{p1, p3, p5}, 3);
    if (block.pool) h = maxpool2d(h, 2);
  }
  return h;
}

Tensor<float> head_forward(const Head& head, const Tensor<float>& x) {
  return dense(relu(dense(x, head.w1, head.b1)), head.w2, head.b2);
}

// Global average pool over the spatial axes: {N,h,w,d} -> {N,d}.
Tensor<float> gap(const Tensor<float>& map) { return mean(mean(map, 1), 1); }

// Per-sample token grid of the i-th batch element: {n_tokens, d}.
TokenGrid<float> sample_tokens(const Tensor<float>& map, Dim i) {
  const Dim h = map.dim(1), w = map.dim(2), d = map.dim(3);
  Tensor<float> tokens = reshape(slice(map, 0, i, 1), {h * w, d});
  return make_token_grid(tokens, h, w);
}

void append_params(NamedParams& out, const std::string& prefix, const Backbone& bb) {
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    const std::string base = prefix + ".b" + std::to_string(i);
    const InceptionBlock& blk = bb.blocks[i];
    out.emplace_back(base + ".c1.w", blk.c1.w);
    out.emplace_back(base + ".c1.b", blk.c1.b);
    out.emplace_back(base + ".c3.w", blk.c3.w);
    out.emplace_back(base + ".c3.b", blk.c3.b);
    out.emplace_back(base + ".c5.w", blk.c5.w);
    out.emplace_back(base + ".c5.b", blk.c5.b);
  }
}

void append_params(NamedParams& out, const std::string& prefix,
                   const SelfAttentionParams<float>& sa) {
  out.emplace_back(prefix + ".wq", sa.wq);
  out.emplace_back(prefix + ".wk", sa.wk);
  out.emplace_back(prefix + ".wv", sa.wv);
}

void append_params(NamedParams& out, const std::string& prefix,
                   const CrossAttentionParams<float>& xa) {
  out.emplace_back(prefix + ".ab.wq", xa.dir_ab.wq);
  out.emplace_back(prefix + ".ab.wk", xa.dir_ab.wk);
  out.emplace_back(prefix + ".ab.wv", xa.dir_ab.wv);
  out.emplace_back(prefix + ".ba.wq", xa.dir_ba.wq);
  out.emplace_back(prefix + ".ba.wk", xa.dir_ba.wk);
  out.emplace_back(prefix + ".ba.wv", xa.dir_ba.wv);
  out.emplace_back(prefix + ".wf", xa.wf);
  out.emplace_back(prefix + ".bf", xa.bf);
}

void append_params(NamedParams& out, const std::string& prefix, const Head& head) {
  out.emplace_back(prefix + ".w1", head.w1);
  out.emplace_back(prefix + ".b1", head.b1);
  out.emplace_back(prefix + ".w2", head.w2);
  out.emplace_back(prefix + ".b2", head.b2);
}

Tensor<float> image_to_tensor(const Image& img) {
  // Center unit-range pixels to [-1, 1]; see image_batch.
  Array<float> v = (img.pix - 0.5f) * 2.0f;
  return Tensor<float>::leaf({1, img.h, img.w, 1}, std::move(v), /*requires_grad=*/false);
}

Prediction make_prediction(Scenario scenario, const Tensor<float>& logits) {
  Tensor<float> prob = sigmoid(logits);
  Prediction p;
  p.scenario = scenario;
  p.logit = double(logits.value()[0]);
  p.probability = double(prob.value()[0]);
  return p;
}

void check_image_size(const char* op, const M3Model& m, const Image& img) {
  require(img.h == m.config.input_size && img.w == m.config.input_size,
          std::string(op) + ": image is " + std::to_string(img.h) + "x" +
              std::to_string(img.w) + ", model expects " +
              std::to_string(m.config.input_size) + "x" +
              std::to_string(m.config.input_size));
}

}  // namespace

const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::cfp: return "cfp";
    case Scenario::faf: return "faf";
    case Scenario::fused: return "fused";
  }
  fail("scenario_name: invalid scenario");
}

Scenario parse_scenario(const std::string& name) {
  if (name == "cfp") return Scenario::cfp;
  if (name == "faf") return Scenario::faf;
  if (name == "fused") return Scenario::fused;
  fail("unknown scenario '" + name + "' (expected cfp, faf, or fused)");
}

const char* kind_name(ModelKind k) { return k == ModelKind::m3 ? "m3" : "non_m3"; }

ModelKind parse_kind(const std::string& name) {
  if (name == "m3") return ModelKind::m3;
  if (name == "non_m3") return ModelKind::non_m3;
  fail("unknown model kind '" + name + "' (expected m3 or non_m3)");
}

void BackboneConfig::validate() const {
  require(input_size >= 16, "backbone: input_size must be >= 16, got " +
                                std::to_string(input_size));
  require(!blocks.empty(), "backbone: needs at least one block");
  Dim size = input_size;
  for (const BlockSpec& b : blocks) {
    require(b.channels >= 4 && b.channels % 4 == 0,
            "backbone: block channels must be a positive multiple of 4, got " +
                std::to_string(b.channels));
    if (b.pool) {
      require(size % 2 == 0, "backbone: spatial size " + std::to_string(size) +
                                 " is not divisible by 2 at a pooling block");
      size /= 2;
    }
  }
  require(size >= 1, "backbone: feature map pooled away entirely");
  require(final_d() >= 4, "backbone: final depth must be >= 4");
}

Dim BackboneConfig::final_h() const {
  Dim size = input_size;
  for (const BlockSpec& b : blocks)
    if (b.pool) size /= 2;
  return size;
}

Dim BackboneConfig::final_d() const { return blocks.empty() ? 0 : blocks.back().channels; }

M3Model build_model(const ModelSpec& spec, const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  M3Model m;
  m.config = config;
  m.spec = spec;

  const Dim d = config.final_d();
  const bool m3 = spec.kind == ModelKind::m3;
  const bool attention = spec.attention_enabled();
  const bool want_cfp = m3 || spec.scenario == Scenario::cfp;
  const bool want_faf = m3 || spec.scenario == Scenario::faf;
  const bool want_fused = m3 || spec.scenario == Scenario::fused;

  if (want_cfp || want_fused) m.cfp_backbone = init_backbone(config, seed, "cfp_backbone");
  if (want_faf || want_fused) m.faf_backbone = init_backbone(config, seed, "faf_backbone");

  if (attention) {
    auto rng_cfp = component_rng(seed, "sa_cfp");
    m.sa_cfp = SelfAttentionParams<float>::init(d, rng_cfp);
    auto rng_faf = component_rng(seed, "sa_faf");
    m.sa_faf = SelfAttentionParams<float>::init(d, rng_faf);
    auto rng_x = component_rng(seed, "xattn");
    m.xattn = CrossAttentionParams<float>::init(d, d, rng_x);
  }

  if (want_cfp) m.head_cfp = init_head(d, seed, "head_cfp");
  if (want_faf) m.head_faf = init_head(d, seed, "head_faf");
  if (want_fused) {
    // With attention the fused head reads the cross-attention output (d_f =
    // d); without it, the plain concatenation of the two pooled streams.
    const Dim in = attention ? m.xattn->d_f() : 2 * d;
    m.head_fused = init_head(in, seed, attention ? "head_fused" : "head_fused_concat");
  }
  return m;
}

M3Model build_non_m3(Scenario scenario, const BackboneConfig& config, Feature feature,
                     std::uint64_t seed) {
  ModelSpec spec;
  spec.kind = ModelKind::non_m3;
  spec.scenario = scenario;
  spec.feature = feature;
  return build_model(spec, config, seed);
}

NamedParams named_params(const M3Model& m) {
  NamedParams out;
  if (m.cfp_backbone) append_params(out, "cfp_backbone", *m.cfp_backbone);
  if (m.faf_backbone) append_params(out, "faf_backbone", *m.faf_backbone);
  if (m.sa_cfp) append_params(out, "sa_cfp", *m.sa_cfp);
  if (m.sa_faf) append_params(out, "sa_faf", *m.sa_faf);
  if (m.xattn) append_params(out, "xattn", *m.xattn);
  if (m.head_cfp) append_params(out, "head_cfp", *m.head_cfp);
  if (m.head_faf) append_params(out, "head_faf", *m.head_faf);
  if (m.head_fused) append_params(out, "head_fused", *m.head_fused);
  return out;
}

std::vector<Tensor<float>> params_with_prefix(const M3Model& m,
                                              const std::vector<std::string>& prefixes) {
  std::vector<Tensor<float>> out;
  for (auto& [name, t] : named_params(m))
    for (const std::string& p : prefixes)
      if (name.rfind(p, 0) == 0) {
        out.push_back(t);
        break;
      }
  return out;
}

void set_trainable(const std::vector<Tensor<float>>& params, bool trainable) {
  for (const Tensor<float>& p : params)
    const_cast<Tensor<float>&>(p).set_requires_grad(trainable);
}

std::string model_manifest_json(const M3Model& m) {
  json j;
  j["kind"] = kind_name(m.spec.kind);
  j["scenario"] = scenario_name(m.spec.scenario);
  j["feature"] = feature_name(m.spec.feature);
  j["no_attention"] = m.spec.no_attention;
  j["no_multitask"] = m.spec.no_multitask;
  json blocks = json::array();
  for (const BlockSpec& b : m.config.blocks)
    blocks.push_back({{"channels", b.channels}, {"pool", b.pool}});
  j["backbone"] = {{"input_size", m.config.input_size}, {"blocks", blocks}};
  j["final"] = {{"h", m.config.final_h()}, {"w", m.config.final_w()},
                {"d", m.config.final_d()}};
  return j.dump(2);
}

M3Model build_from_manifest(const std::string& manifest_json) {
  json j = json::parse(manifest_json);
  ModelSpec spec;
  spec.kind = parse_kind(j.at("kind").get<std::string>());
  spec.scenario = parse_scenario(j.at("scenario").get<std::string>());
  spec.feature = parse_feature(j.at("feature").get<std::string>());
  spec.no_attention = j.at("no_attention").get<bool>();
  spec.no_multitask = j.at("no_multitask").get<bool>();
  BackboneConfig config;
  config.input_size = j.at("backbone").at("input_size").get<Dim>();
  config.blocks.clear();
  for (const json& b : j.at("backbone").at("blocks"))
    config.blocks.push_back({b.at("channels").get<Dim>(), b.at("pool").get<bool>()});
  return build_model(spec, config, /*seed=*/0);
}

void save_model(const M3Model& m, const std::string& path) {
  save_checkpoint(path, model_manifest_json(m), named_params(m));
}

M3Model load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  M3Model m = build_from_manifest(ck.config_json);
  NamedParams params = named_params(m);
  apply_checkpoint(ck, params);
  return m;
}

JointForward forward_joint(const M3Model& m, const Tensor<float>* cfp, const Tensor<float>* faf,
                           bool want_cfp, bool want_faf, bool want_fused) {
  require(!want_cfp || m.has_cfp(), "forward: model has no cfp head");
  require(!want_faf || m.has_faf(), "forward: model has no faf head");
  require(!want_fused || m.has_fused(), "forward: model has no fused head");

  const bool need_cfp_input = want_cfp || want_fused;
  const bool need_faf_input = want_faf || want_fused;
  if (want_fused)
    require(cfp != nullptr && faf != nullptr,
            "forward: the fused scenario requires both a cfp and a faf image");
  require(!need_cfp_input || cfp != nullptr, "forward: cfp image batch is missing");
  require(!need_faf_input || faf != nullptr, "forward: faf image batch is missing");

  auto check_batch = [&](const Tensor<float>& x, const char* which) {
    require(x.ndim() == 4 && x.dim(3) == 1,
            std::string("forward: ") + which + " batch must be {N,h,w,1}, got " +
                shape_str(x.shape()));
    require(x.dim(1) == m.config.input_size && x.dim(2) == m.config.input_size,
            std::string("forward: ") + which + " image is " + std::to_string(x.dim(1)) + "x" +
                std::to_string(x.dim(2)) + ", model expects " +
                std::to_string(m.config.input_size) + "x" +
                std::to_string(m.config.input_size));
  };
  if (need_cfp_input) check_batch(*cfp, "cfp");
  if (need_faf_input) check_batch(*faf, "faf");
  if (need_cfp_input && need_faf_input)
    require(cfp->dim(0) == faf->dim(0), "forward: cfp batch has " +
                                            std::to_string(cfp->dim(0)) + " images but faf has " +
                                            std::to_string(faf->dim(0)));

  JointForward out;
  if (need_cfp_input) out.cfp_map = backbone_forward(*m.cfp_backbone, *cfp);
  if (need_faf_input) out.faf_map = backbone_forward(*m.faf_backbone, *faf);

  const bool attention = m.spec.attention_enabled();
  if (!attention) {
    if (want_cfp) out.logits_cfp = head_forward(*m.head_cfp, gap(out.cfp_map));
    if (want_faf) out.logits_faf = head_forward(*m.head_faf, gap(out.faf_map));
    if (want_fused)
      out.logits_fused = head_forward(
          *m.head_fused,
          concat(std::vector<Tensor<float>>{gap(out.cfp_map), gap(out.faf_map)}, 1));
    return out;
  }

  const Dim n = need_cfp_input ? out.cfp_map.dim(0) : out.faf_map.dim(0);
  const Dim d = m.config.final_d();
  std::vector<Tensor<float>> pooled_cfp, pooled_faf, fused_rows;
  for (Dim i = 0; i < n; ++i) {
    AttentionOutput<float> a, b;
    if (need_cfp_input) a = self_attention(sample_tokens(out.cfp_map, i), *m.sa_cfp);
    if (need_faf_input) b = self_attention(sample_tokens(out.faf_map, i), *m.sa_faf);
    if (want_cfp) pooled_cfp.push_back(reshape(a.pooled, {1, d}));
    if (want_faf) pooled_faf.push_back(reshape(b.pooled, {1, d}));
    if (want_fused) {
      Tensor<float> fused = cross_modality_attention(a, b, *m.xattn).fused;
      fused_rows.push_back(reshape(fused, {1, m.xattn->d_f()}));
    }
  }
  auto stack = [n](std::vector<Tensor<float>>& rows) {
    return n == 1 ? rows[0] : concat(rows, 0);
  };
  if (want_cfp) out.logits_cfp = head_forward(*m.head_cfp, stack(pooled_cfp));
  if (want_faf) out.logits_faf = head_forward(*m.head_faf, stack(pooled_faf));
  if (want_fused) out.logits_fused = head_forward(*m.head_fused, stack(fused_rows));
  return out;
}

JointForward forward_scenario(const M3Model& m, Scenario scenario, const Tensor<float>* cfp,
                              const Tensor<float>* faf) {
  return forward_joint(m, cfp, faf, scenario == Scenario::cfp, scenario == Scenario::faf,
                       scenario == Scenario::fused);
}

Tensor<float> image_batch(const std::vector<const Image*>& images) {
  require(!images.empty(), "image_batch: empty batch");
  const Dim n = Dim(images.size());
  const Dim h = images[0]->h, w = images[0]->w;
  Array<float> v(n * h * w);
  for (Dim i = 0; i < n; ++i) {
    require(images[i]->h == h && images[i]->w == w,
            "image_batch: image " + std::to_string(i) + " is " + std::to_string(images[i]->h) +
                "x" + std::to_string(images[i]->w) + " but batch is " + std::to_string(h) + "x" +
                std::to_string(w));
    // Center unit-range pixels to [-1, 1] so the first convolution operates
    // around zero instead of on a dominant DC level.
    v.segment(i * h * w, h * w) = (images[i]->pix - 0.5f) * 2.0f;
  }
  return Tensor<float>::leaf({n, h, w, 1}, std::move(v), /*requires_grad=*/false);
}

Prediction predict_cfp(const M3Model& m, const Image& cfp) {
  check_image_size("predict_cfp", m, cfp);
  Tensor<float> x = image_to_tensor(cfp);
  JointForward f = forward_scenario(m, Scenario::cfp, &x, nullptr);
  return make_prediction(Scenario::cfp, f.logits_cfp);
}

Prediction predict_faf(const M3Model& m, const Image& faf) {
  check_image_size("predict_faf", m, faf);
  Tensor<float> x = image_to_tensor(faf);
  JointForward f = forward_scenario(m, Scenario::faf, nullptr, &x);
  return make_prediction(Scenario::faf, f.logits_faf);
}

Prediction predict_fused(const M3Model& m, const Image& cfp, const Image& faf) {
  check_image_size("predict_fused", m, cfp);
  check_image_size("predict_fused", m, faf);
  Tensor<float> xc = image_to_tensor(cfp);
  Tensor<float> xf = image_to_tensor(faf);
  JointForward f = forward_scenario(m, Scenario::fused, &xc, &xf);
  return make_prediction(Scenario::fused, f.logits_fused);
}

}  // namespace m3
