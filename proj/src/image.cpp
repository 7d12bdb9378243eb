#include "m3/image.hpp"

#include <cmath>

namespace m3 {

namespace {

// Bilinear read at a fractional source position, zero outside the frame.
float sample_zero(const Image& img, double y, double x) {
  const Dim y0 = static_cast<Dim>(std::floor(y));
  const Dim x0 = static_cast<Dim>(std::floor(x));
  const double fy = y - double(y0);
  const double fx = x - double(x0);
  auto px = [&](Dim yy, Dim xx) -> double {
    if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return 0.0;
    return img.at(yy, xx);
  };
  const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
  const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

// Bilinear read with edge clamping (for resize, where the frame covers the
// full source).
float sample_clamp(const Image& img, double y, double x) {
  const double yc = std::min(std::max(y, 0.0), double(img.h - 1));
  const double xc = std::min(std::max(x, 0.0), double(img.w - 1));
  const Dim y0 = static_cast<Dim>(std::floor(yc));
  const Dim x0 = static_cast<Dim>(std::floor(xc));
  const Dim y1 = std::min(y0 + 1, img.h - 1);
  const Dim x1 = std::min(x0 + 1, img.w - 1);
  const double fy = yc - double(y0);
  const double fx = xc - double(x0);
  const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
  const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace

Image resize_bilinear(const Image& src, Dim oh, Dim ow) {
  require(src.h >= 1 && src.w >= 1, "resize: empty source image");
  require(oh >= 1 && ow >= 1, "resize: invalid target size");
  Image out(oh, ow);
  const double sy = double(src.h) / double(oh);
  const double sx = double(src.w) / double(ow);
  for (Dim y = 0; y < oh; ++y) {
    const double src_y = (double(y) + 0.5) * sy - 0.5;
    for (Dim x = 0; x < ow; ++x) {
      const double src_x = (double(x) + 0.5) * sx - 0.5;
      out.at(y, x) = sample_clamp(src, src_y, src_x);
    }
  }
  return out;
}

Image rotate_bilinear(const Image& src, double degrees) {
  const double rad = degrees * M_PI / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = double(src.h - 1) / 2.0;
  const double cx = double(src.w - 1) / 2.0;
  Image out(src.h, src.w);
  for (Dim y = 0; y < src.h; ++y) {
    for (Dim x = 0; x < src.w; ++x) {
      // Inverse-rotate the destination coordinate into the source frame.
      const double dy = double(y) - cy;
      const double dx = double(x) - cx;
      const double sy = cy + (c * dy + s * dx);
      const double sx = cx + (-s * dy + c * dx);
      out.at(y, x) = sample_zero(src, sy, sx);
    }
  }
  return out;
}

Image flip_horizontal(const Image& src) {
  Image out(src.h, src.w);
  for (Dim y = 0; y < src.h; ++y)
    for (Dim x = 0; x < src.w; ++x) out.at(y, x) = src.at(y, src.w - 1 - x);
  return out;
}

Image flip_vertical(const Image& src) {
  Image out(src.h, src.w);
  for (Dim y = 0; y < src.h; ++y)
    for (Dim x = 0; x < src.w; ++x) out.at(y, x) = src.at(src.h - 1 - y, x);
  return out;
}

PairAugmentation sample_augmentation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 180.0);
  std::bernoulli_distribution coin(0.5);
  PairAugmentation aug;
  aug.degrees = angle(rng);
  aug.hflip = coin(rng);
  aug.vflip = coin(rng);
  return aug;
}

Image apply_augmentation(const Image& src, const PairAugmentation& aug) {
  Image out = rotate_bilinear(src, aug.degrees);
  if (aug.hflip) out = flip_horizontal(out);
  if (aug.vflip) out = flip_vertical(out);
  return out;
}

void augment_pair(Image& cfp, Image& faf, std::mt19937_64& rng) {
  const PairAugmentation aug = sample_augmentation(rng);
  cfp = apply_augmentation(cfp, aug);
  faf = apply_augmentation(faf, aug);
}

}  // namespace m3
