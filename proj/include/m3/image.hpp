#pragma once

#include "m3/common.hpp"

#include <random>

namespace m3 {

// Grayscale image, row-major H×W float pixels in [0,1].
struct Image {
  Dim h = 0, w = 0;
  Array<float> pix;

  Image() = default;
  Image(Dim h_, Dim w_) : h(h_), w(w_), pix(Array<float>::Zero(h_ * w_)) {}

  float at(Dim y, Dim x) const { return pix[y * w + x]; }
  float& at(Dim y, Dim x) { return pix[y * w + x]; }
  Dim size() const { return h * w; }
};

// Bilinear resample to oh×ow (align-corners-free convention: pixel centers
// at half-integer positions).
Image resize_bilinear(const Image& src, Dim oh, Dim ow);

// Rotate counterclockwise about the image center by `degrees`, bilinear
// sampling, zero fill outside the source frame.
Image rotate_bilinear(const Image& src, double degrees);

Image flip_horizontal(const Image& src);  // mirror columns
Image flip_vertical(const Image& src);    // mirror rows

// One sampled augmentation: rotation angle ~ U[0°,180°], then horizontal and
// vertical flips each with probability 1/2 — the same transform applied to
// both images of a pair.
struct PairAugmentation {
  double degrees = 0.0;
  bool hflip = false, vflip = false;
};
PairAugmentation sample_augmentation(std::mt19937_64& rng);
Image apply_augmentation(const Image& src, const PairAugmentation& aug);
void augment_pair(Image& cfp, Image& faf, std::mt19937_64& rng);

}  // namespace m3
