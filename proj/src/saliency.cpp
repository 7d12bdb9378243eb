#include "m3/saliency.hpp"

#include "m3/png_io.hpp"

#include <cmath>
#include <fstream>

namespace m3 {

namespace {

void check_image(const Image* img, const char* modality, Dim n) {
  require(img != nullptr, std::string("saliency: ") + modality + " image is missing");
  require(img->h == n && img->w == n,
          std::string("saliency: ") + modality + " image is " + std::to_string(img->h) + "x" +
              std::to_string(img->w) + ", model expects " + std::to_string(n) + "x" +
              std::to_string(n));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

unsigned char lerp_channel(double from, double to, double t) {
  return static_cast<unsigned char>(std::lround(from + (to - from) * t));
}

}  // namespace

SaliencyMap backproject_map(const Tensor<float>& conv_map, Dim out_h, Dim out_w) {
  require(conv_map.valid(), "backproject_map: conv map handle is empty");
  const Shape& shape = conv_map.shape();
  require(shape.size() == 4 && shape[0] == 1,
          "backproject_map: expected a {1,h,w,d} conv map, got " + shape_str(shape));
  const Dim h = shape[1], w = shape[2], d = shape[3];
  const Array<float>& act = conv_map.value();
  const Array<float> grad = conv_map.grad();

  Image raw(h, w);
  for (Dim y = 0; y < h; ++y)
    for (Dim x = 0; x < w; ++x) {
      double acc = 0;
      const Dim base = (y * w + x) * d;
      for (Dim c = 0; c < d; ++c) acc += double(grad[base + c]) * double(act[base + c]);
      raw.at(y, x) = float(acc);
    }

  SaliencyMap out;
  out.values = (h == out_h && w == out_w) ? raw : resize_bilinear(raw, out_h, out_w);

  out.raw_min = out.values.pix[0];
  out.raw_max = out.values.pix[0];
  float peak = 0.0f;
  for (Dim i = 0; i < out.values.size(); ++i) {
    const float v = out.values.pix[i];
    if (double(v) < out.raw_min) out.raw_min = v;
    if (double(v) > out.raw_max) {
      out.raw_max = v;
      out.argmax_row = i / out_w;
      out.argmax_col = i % out_w;
    }
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0.0f) out.values.pix /= peak;  // an all-zero map stays zero
  return out;
}

std::vector<SaliencyMap> saliency_map(const M3Model& model, const Image* cfp, const Image* faf,
                                      Scenario scenario, const std::string& record_id) {
  const Dim n = model.config.input_size;
  const bool need_cfp = scenario != Scenario::faf;
  const bool need_faf = scenario != Scenario::cfp;
  if (need_cfp) check_image(cfp, "cfp", n);
  if (need_faf) check_image(faf, "faf", n);

  Tensor<float> cfp_batch, faf_batch;
  if (need_cfp) cfp_batch = image_batch({cfp});
  if (need_faf) faf_batch = image_batch({faf});
  JointForward f = forward_scenario(model, scenario, need_cfp ? &cfp_batch : nullptr,
                                    need_faf ? &faf_batch : nullptr);
  const Tensor<float>& logit = scenario == Scenario::cfp
                                   ? f.logits_cfp
                                   : (scenario == Scenario::faf ? f.logits_faf : f.logits_fused);
  backward(logit);

  const std::string block_tag = ".b" + std::to_string(model.config.blocks.size() - 1);
  std::vector<SaliencyMap> maps;
  auto emit = [&](const Tensor<float>& conv_map, const char* modality, const Image& input) {
    SaliencyMap m = backproject_map(conv_map, input.h, input.w);
    m.scenario = scenario;
    m.record_id = record_id;
    m.modality = modality;
    m.source = std::string(modality) + "_backbone" + block_tag;
    maps.push_back(std::move(m));
  };
  if (need_cfp) emit(f.cfp_map, "cfp", *cfp);
  if (need_faf) emit(f.faf_map, "faf", *faf);
  return maps;
}

RGB saliency_color(float v) {
  // Figure-style diverging palette; the endpoints are the documented colors.
  constexpr double kPurple[3] = {45, 0, 75};
  constexpr double kNeutral[3] = {247, 247, 247};
  constexpr double kBrown[3] = {127, 59, 8};
  const double t = std::clamp(double(v), -1.0, 1.0);
  RGB c;
  const double* target = t < 0 ? kPurple : kBrown;
  const double a = std::abs(t);
  c.r = lerp_channel(kNeutral[0], target[0], a);
  c.g = lerp_channel(kNeutral[1], target[1], a);
  c.b = lerp_channel(kNeutral[2], target[2], a);
  return c;
}

void render_heatmap(const SaliencyMap& map, const Image& base, const std::string& out_path) {
  require(map.values.h == base.h && map.values.w == base.w,
          "render_heatmap: map is " + std::to_string(map.values.h) + "x" +
              std::to_string(map.values.w) + " but the base image is " +
              std::to_string(base.h) + "x" + std::to_string(base.w));
  std::vector<unsigned char> rgb(std::size_t(base.h) * std::size_t(base.w) * 3);
  for (Dim i = 0; i < base.size(); ++i) {
    const float v = map.values.pix[i];
    const RGB color = saliency_color(v);
    const double alpha = 0.4 + 0.6 * std::min(1.0, std::abs(double(v)));
    const double gray = 255.0 * std::clamp(base.pix[i], 0.0f, 1.0f);
    rgb[std::size_t(i) * 3 + 0] = lerp_channel(gray, color.r, alpha);
    rgb[std::size_t(i) * 3 + 1] = lerp_channel(gray, color.g, alpha);
    rgb[std::size_t(i) * 3 + 2] = lerp_channel(gray, color.b, alpha);
  }
  write_png_rgb(out_path, base.h, base.w, rgb);
}

void render_colorbar(const std::string& out_path, Dim h, Dim w) {
  require(h >= 1 && w >= 2, "render_colorbar: need at least a 1x2 image");
  std::vector<unsigned char> rgb(std::size_t(h) * std::size_t(w) * 3);
  for (Dim x = 0; x < w; ++x) {
    const float v = float(-1.0 + 2.0 * double(x) / double(w - 1));
    const RGB color = saliency_color(v);
    for (Dim y = 0; y < h; ++y) {
      const std::size_t at = (std::size_t(y) * std::size_t(w) + std::size_t(x)) * 3;
      rgb[at + 0] = color.r;
      rgb[at + 1] = color.g;
      rgb[at + 2] = color.b;
    }
  }
  write_png_rgb(out_path, h, w, rgb);
}

std::string heatmap_filename(const SaliencyMap& map) {
  return map.record_id + "_" + scenario_name(map.scenario) + "_" + map.modality + ".png";
}

void write_saliency_csv(const std::string& path, const std::vector<SaliencyMap>& maps) {
  std::ofstream f(path);
  require(f.good(), "write_saliency_csv: cannot write '" + path + "'");
  f << "record_id,scenario,modality,source,raw_min,raw_max,argmax_row,argmax_col\n";
  for (const SaliencyMap& m : maps)
    f << m.record_id << "," << scenario_name(m.scenario) << "," << m.modality << "," << m.source
      << "," << format_double(m.raw_min) << "," << format_double(m.raw_max) << ","
      << m.argmax_row << "," << m.argmax_col << "\n";
}

}  // namespace m3
