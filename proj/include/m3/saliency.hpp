#pragma once

#include "m3/model.hpp"

#include <string>
#include <vector>

// Attention-map generation by back-projection from the last convolutional
// layer: the positive-class logit's gradient with respect to the last conv
// activation map, elementwise-multiplied by that activation and summed over
// channels, bilinearly upsampled to the input resolution, then normalized by
// the maximum absolute value. Signed values are preserved: -1 renders purple,
// +1 renders brown.

namespace m3 {

struct SaliencyMap {
  Image values;          // H×W in [-1, 1], same dims as the input image
  Scenario scenario = Scenario::cfp;
  std::string record_id;
  std::string modality;  // "cfp" | "faf"
  std::string source;    // last-conv-layer tag, e.g. "cfp_backbone.b2"
  // Raw (upsampled, pre-normalization) map statistics for the sidecar CSV.
  double raw_min = 0, raw_max = 0;
  Dim argmax_row = 0, argmax_col = 0;  // location of the raw maximum
};

// Back-projects one already-backpropagated conv map handle: channel-sum of
// gradient × activation, upsampled to out_h × out_w, normalized so the
// maximum absolute value is 1 (an all-zero map stays zero). The caller runs
// backward(logit) first; this asserts nothing about which logit it was.
SaliencyMap backproject_map(const Tensor<float>& conv_map, Dim out_h, Dim out_w);

// Forwards the scenario, backpropagates its logit once, and back-projects
// every modality the scenario consumes: one map for cfp or faf, two maps
// (cfp first) for fused. Image dims must match the model's input size.
std::vector<SaliencyMap> saliency_map(const M3Model& model, const Image* cfp, const Image* faf,
                                      Scenario scenario, const std::string& record_id = "");

struct RGB {
  unsigned char r = 0, g = 0, b = 0;
  bool operator==(const RGB&) const = default;
};

// Diverging palette: purple (45,0,75) at -1, near-white (247,247,247) at 0,
// brown (127,59,8) at +1, linearly interpolated, then rounded per channel.
RGB saliency_color(float v);

// Alpha-blends the palette color over the grayscale base image with
// alpha(v) = 0.4 + 0.6*|v| and writes an RGB PNG. Saturated pixels (v = ±1)
// reproduce the palette endpoints bit-exactly.
void render_heatmap(const SaliencyMap& map, const Image& base, const std::string& out_path);

// Standalone horizontal colorbar legend (-1 on the left, +1 on the right).
void render_colorbar(const std::string& out_path, Dim h = 32, Dim w = 256);

// Output-file name for one map: {record_id}_{scenario}_{modality}.png
std::string heatmap_filename(const SaliencyMap& map);

// Sidecar CSV: record_id, scenario, modality, source, raw min/max, argmax.
void write_saliency_csv(const std::string& path, const std::vector<SaliencyMap>& maps);

}  // namespace m3
