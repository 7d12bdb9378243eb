// Model builder, forward-path, and persistence tests.
//
// Oracle notes, per case:
//   [DERIVED] closed forms: zero-initialized heads emit logit 0, so every
//     scenario predicts probability exactly sigmoid(0) = 0.5; probability
//     equals sigmoid(logit) on every path.
//   [DERIVED] graph-structure consequences: perturbing the FAF image moves
//     the fused logit but never the CFP logit; self-attention parameters are
//     shared between the modality and fused paths; an optimizer step through
//     the fused path moves parameters the CFP path reads.
//   [DERIVED] ablation contract: baselines match the M3 backbone sizes and
//     carry zero attention parameters; a fully ablated M3 initializes shared
//     components bitwise equal to the baseline; attention or multitask alone
//     changes the parameter set away from the baseline shape.
//   [DERIVED] persistence and batching: the model manifest and checkpoint
//     round-trip bitwise; a batched forward equals per-sample predictions;
//     params_with_prefix selects exactly the cascading fine-tune groups.
//   [TRIVIAL] default shape pins, config validation, precondition errors.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "m3/adam.hpp"
#include "m3/model.hpp"

#include <filesystem>
#include <set>

using namespace m3;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.input_size = 16;
  cfg.blocks = {{8, true}, {8, true}};  // final 4x4x8
  return cfg;
}

Image noise_image(Dim size, std::uint64_t seed) {
  auto rng = seeded_rng(seed);
  std::uniform_real_distribution<float> d(0.f, 1.f);
  Image img(size, size);
  for (Dim i = 0; i < img.size(); ++i) img.pix[i] = d(rng);
  return img;
}

void zero_head(Head& h) {
  h.w1.value().setZero();
  h.b1.value().setZero();
  h.w2.value().setZero();
  h.b2.value().setZero();
}

Dim param_count(const NamedParams& ps, const std::string& prefix) {
  Dim n = 0;
  for (auto& [name, t] : ps)
    if (name.rfind(prefix, 0) == 0) n += t.size();
  return n;
}

}  // namespace

TEST_CASE("default backbone yields a 6x6x32 final map at 48 px") {
  BackboneConfig cfg;
  CHECK(cfg.input_size == 48);
  cfg.validate();
  CHECK(cfg.final_h() == 6);
  CHECK(cfg.final_w() == 6);
  CHECK(cfg.final_d() == 32);

  ModelSpec spec;
  M3Model m = build_model(spec, cfg, 1);
  Image img = noise_image(48, 5);
  Tensor<float> x = image_batch({&img});
  JointForward f = forward_scenario(m, Scenario::cfp, &x, nullptr);
  REQUIRE(f.cfp_map.valid());
  CHECK(f.cfp_map.shape() == Shape{1, 6, 6, 32});
  CHECK(f.logits_cfp.shape() == Shape{1, 1});
}

TEST_CASE("backbone config invariants are enforced") {
  BackboneConfig cfg;
  cfg.input_size = 8;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("input_size"), std::runtime_error);
  cfg = BackboneConfig{};
  cfg.blocks = {{6, true}};
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("multiple of 4"), std::runtime_error);
  cfg = BackboneConfig{};
  cfg.input_size = 20;  // 20 -> 10 -> 5 -> pool on odd size
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("divisible"), std::runtime_error);
  cfg = BackboneConfig{};
  cfg.blocks = {{16, true}, {0, true}};
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("zeroed heads give probability exactly 0.5 in all scenarios") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 3);
  zero_head(*m.head_cfp);
  zero_head(*m.head_faf);
  zero_head(*m.head_fused);
  Image a = noise_image(16, 1), b = noise_image(16, 2);
  CHECK(predict_cfp(m, a).probability == 0.5);
  CHECK(predict_faf(m, b).probability == 0.5);
  CHECK(predict_fused(m, a, b).probability == 0.5);
  CHECK(predict_fused(m, a, b).logit == 0.0);

  M3Model base = build_non_m3(Scenario::cfp, cfg, Feature::rpd, 3);
  zero_head(*base.head_cfp);
  CHECK(predict_cfp(base, a).probability == 0.5);
}

TEST_CASE("prediction is deterministic and probability = sigmoid(logit)") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 4);
  Image a = noise_image(16, 7), b = noise_image(16, 8);
  Prediction p1 = predict_fused(m, a, b);
  Prediction p2 = predict_fused(m, a, b);
  CHECK(p1.logit == p2.logit);
  CHECK(p1.probability == p2.probability);
  CHECK(p1.probability == doctest::Approx(1.0 / (1.0 + std::exp(-p1.logit))).epsilon(1e-6));
  CHECK(p1.probability > 0.0);
  CHECK(p1.probability < 1.0);

  // A FAF-style image through the CFP path is a valid, in-range probability.
  Prediction cross = predict_cfp(m, b);
  CHECK(cross.probability > 0.0);
  CHECK(cross.probability < 1.0);
}

TEST_CASE("size and modality preconditions produce descriptive errors") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 5);
  Image wrong = noise_image(12, 1), ok = noise_image(16, 2);
  CHECK_THROWS_WITH_AS(predict_cfp(m, wrong), doctest::Contains("12x12"), std::runtime_error);
  CHECK_THROWS_WITH_AS(predict_fused(m, ok, wrong), doctest::Contains("expects 16x16"),
                       std::runtime_error);

  Tensor<float> x = image_batch({&ok});
  CHECK_THROWS_WITH_AS(forward_scenario(m, Scenario::fused, &x, nullptr),
                       doctest::Contains("requires both"), std::runtime_error);
  CHECK_THROWS_WITH_AS(forward_scenario(m, Scenario::faf, nullptr, nullptr),
                       doctest::Contains("missing"), std::runtime_error);

  // A single-modality baseline has no other heads.
  M3Model base = build_non_m3(Scenario::faf, cfg, Feature::rpd, 5);
  CHECK_THROWS_WITH_AS(forward_scenario(base, Scenario::cfp, &x, nullptr),
                       doctest::Contains("no cfp head"), std::runtime_error);
}

TEST_CASE("perturbing the FAF image moves the fused logit but not the CFP one") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 6);
  Image a = noise_image(16, 3), b = noise_image(16, 4);
  Prediction cfp_before = predict_cfp(m, a);
  Prediction fused_before = predict_fused(m, a, b);
  Image b2 = b;
  b2.pix[40] = b2.pix[40] < 0.5f ? 1.0f : 0.0f;
  CHECK(predict_fused(m, a, b2).logit != fused_before.logit);
  CHECK(predict_cfp(m, a).logit == cfp_before.logit);
}

TEST_CASE("self-attention parameters are shared between modality and fused paths") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 7);
  Image a = noise_image(16, 9), b = noise_image(16, 10);
  const double cfp0 = predict_cfp(m, a).logit;
  const double fused0 = predict_fused(m, a, b).logit;

  m.sa_cfp->wq.value().array() += 0.25f;
  CHECK(predict_cfp(m, a).logit != cfp0);
  CHECK(predict_fused(m, a, b).logit != fused0);

  // The registry hands out the same underlying tensor, not a copy.
  for (auto& [name, t] : named_params(m))
    if (name == "sa_cfp.wq") CHECK(t.handle() == m.sa_cfp->wq.handle());
}

TEST_CASE("an optimizer step through the fused path moves the CFP path") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 8);
  Image a = noise_image(16, 11), b = noise_image(16, 12);
  const double cfp0 = predict_cfp(m, a).logit;

  Tensor<float> xa = image_batch({&a}), xb = image_batch({&b});
  JointForward f = forward_scenario(m, Scenario::fused, &xa, &xb);
  Tensor<float> y = Tensor<float>::leaf({1, 1}, Array<float>::Constant(1, 1.0f), false);
  Tensor<float> loss = bce_with_logits(f.logits_fused, y);
  backward(loss);
  Adam<float> opt({m.sa_cfp->wq, m.sa_cfp->wk, m.sa_cfp->wv});
  opt.step();

  CHECK(predict_cfp(m, a).logit != cfp0);
}

TEST_CASE("baselines match M3 backbone sizes and carry zero attention parameters") {
  auto cfg = tiny_config();
  M3Model m3 = build_model(ModelSpec{}, cfg, 9);
  M3Model cfp = build_non_m3(Scenario::cfp, cfg, Feature::rpd, 9);
  M3Model fused = build_non_m3(Scenario::fused, cfg, Feature::rpd, 9);

  auto pm = named_params(m3), pc = named_params(cfp), pf = named_params(fused);
  CHECK(param_count(pc, "cfp_backbone") == param_count(pm, "cfp_backbone"));
  CHECK(param_count(pc, "sa_") == 0);
  CHECK(param_count(pc, "xattn") == 0);
  CHECK(param_count(pc, "faf_backbone") == 0);
  CHECK(param_count(pc, "head_faf") == 0);
  CHECK(param_count(pf, "sa_") == 0);
  CHECK(param_count(pf, "xattn") == 0);
  CHECK(param_count(pf, "cfp_backbone") == param_count(pm, "cfp_backbone"));
  CHECK(param_count(pf, "faf_backbone") == param_count(pm, "faf_backbone"));
  CHECK(param_count(pf, "head_cfp") == 0);
  // Fused baseline head reads the concatenated pooled streams (2d wide).
  for (auto& [name, t] : pf)
    if (name == "head_fused.w1") CHECK(t.dim(0) == 2 * cfg.final_d());
  for (auto& [name, t] : pm)
    if (name == "head_fused.w1") CHECK(t.dim(0) == cfg.final_d());
}

TEST_CASE("ablated M3 initializes shared components bitwise equal to the baseline") {
  auto cfg = tiny_config();
  ModelSpec ablated;
  ablated.no_attention = true;
  ablated.no_multitask = true;
  ablated.scenario = Scenario::cfp;
  M3Model a = build_model(ablated, cfg, 21);
  M3Model b = build_non_m3(Scenario::cfp, cfg, Feature::rpd, 21);

  auto pa = named_params(a), pb = named_params(b);
  std::set<std::string> names_a;
  for (auto& [name, t] : pa) names_a.insert(name);
  CHECK(param_count(pa, "sa_") == 0);
  CHECK(param_count(pa, "xattn") == 0);
  for (auto& [name, tb] : pb) {
    CAPTURE(name);
    REQUIRE(names_a.count(name) == 1);
    for (auto& [na, ta] : pa)
      if (na == name) {
        REQUIRE(ta.shape() == tb.shape());
        CHECK(std::memcmp(ta.value().data(), tb.value().data(),
                          sizeof(float) * std::size_t(ta.size())) == 0);
      }
  }

  // The ablated fused head matches the baseline-fused shape too.
  M3Model af = build_model([&] {
    ModelSpec s = ablated;
    s.scenario = Scenario::fused;
    return s;
  }(), cfg, 22);
  M3Model bf = build_non_m3(Scenario::fused, cfg, Feature::rpd, 22);
  for (auto& [name, t] : named_params(af))
    if (name == "head_fused.w1")
      for (auto& [nb, tb] : named_params(bf))
        if (nb == name)
          CHECK(std::memcmp(t.value().data(), tb.value().data(),
                            sizeof(float) * std::size_t(t.size())) == 0);
}

TEST_CASE("attention or multitask alone changes the model away from baseline shape") {
  auto cfg = tiny_config();
  ModelSpec only_no_attention;
  only_no_attention.no_attention = true;
  M3Model a = build_model(only_no_attention, cfg, 2);
  CHECK(param_count(named_params(a), "sa_") == 0);
  CHECK(a.has_cfp());
  CHECK(a.has_faf());
  CHECK(a.has_fused());  // still multitask: all heads present

  ModelSpec only_no_multitask;
  only_no_multitask.no_multitask = true;
  M3Model b = build_model(only_no_multitask, cfg, 2);
  CHECK(param_count(named_params(b), "sa_") > 0);
  CHECK(param_count(named_params(b), "xattn") > 0);
}

TEST_CASE("model manifest and checkpoint round-trip bitwise") {
  auto cfg = tiny_config();
  ModelSpec spec;
  spec.feature = Feature::ga;
  M3Model m = build_model(spec, cfg, 33);
  const std::string path =
      (std::filesystem::temp_directory_path() / "m3_model_roundtrip.ck").string();
  save_model(m, path);
  M3Model r = load_model(path);

  CHECK(r.spec.kind == m.spec.kind);
  CHECK(r.spec.feature == Feature::ga);
  CHECK(r.config.input_size == cfg.input_size);
  auto pm = named_params(m), pr = named_params(r);
  REQUIRE(pm.size() == pr.size());
  for (std::size_t i = 0; i < pm.size(); ++i) {
    CHECK(pm[i].first == pr[i].first);
    CHECK(std::memcmp(pm[i].second.value().data(), pr[i].second.value().data(),
                      sizeof(float) * std::size_t(pm[i].second.size())) == 0);
  }

  Image a = noise_image(16, 13), b = noise_image(16, 14);
  CHECK(predict_fused(m, a, b).logit == predict_fused(r, a, b).logit);
  std::filesystem::remove(path);
}

TEST_CASE("batched forward equals per-sample predictions") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 44);
  Image a1 = noise_image(16, 21), a2 = noise_image(16, 22);
  Image b1 = noise_image(16, 23), b2 = noise_image(16, 24);
  Tensor<float> xa = image_batch({&a1, &a2});
  Tensor<float> xb = image_batch({&b1, &b2});
  JointForward f = forward_joint(m, &xa, &xb, true, true, true);
  REQUIRE(f.logits_fused.shape() == Shape{2, 1});

  CHECK(f.logits_cfp.value()[0] == doctest::Approx(predict_cfp(m, a1).logit).epsilon(1e-5));
  CHECK(f.logits_cfp.value()[1] == doctest::Approx(predict_cfp(m, a2).logit).epsilon(1e-5));
  CHECK(f.logits_faf.value()[0] == doctest::Approx(predict_faf(m, b1).logit).epsilon(1e-5));
  CHECK(f.logits_fused.value()[1] ==
        doctest::Approx(predict_fused(m, a2, b2).logit).epsilon(1e-5));
}

TEST_CASE("params_with_prefix selects the cascading fine-tune groups") {
  auto cfg = tiny_config();
  M3Model m = build_model(ModelSpec{}, cfg, 55);
  auto cfp_path = params_with_prefix(m, {"cfp_backbone", "sa_cfp", "head_cfp"});
  auto all = named_params(m);
  Dim expect = param_count(all, "cfp_backbone") + param_count(all, "sa_cfp") +
               param_count(all, "head_cfp");
  Dim got = 0;
  for (auto& t : cfp_path) got += t.size();
  CHECK(got == expect);

  set_trainable(cfp_path, false);
  for (auto& t : cfp_path) CHECK_FALSE(t.requires_grad());
  set_trainable(cfp_path, true);
  for (auto& t : cfp_path) CHECK(t.requires_grad());
}
