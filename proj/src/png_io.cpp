#include "m3/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace m3 {

Image read_png_gray(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail("png: cannot read " + path + ": " + png.message);
  png.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    fail("png: decode failed for " + path + ": " + msg);
  }
  Image img(static_cast<Dim>(png.height), static_cast<Dim>(png.width));
  for (Dim i = 0; i < img.size(); ++i)
    img.pix[i] = float(buf[static_cast<std::size_t>(i)]) / 255.0f;
  return img;
}

std::vector<unsigned char> read_png_rgb(const std::string& path, Dim& h, Dim& w) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail("png: cannot read " + path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    fail("png: decode failed for " + path + ": " + msg);
  }
  h = static_cast<Dim>(png.height);
  w = static_cast<Dim>(png.width);
  return buf;
}

void write_png_gray(const std::string& path, const Image& img) {
  require(img.h >= 1 && img.w >= 1, "png: empty image for " + path);
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.size()));
  for (Dim i = 0; i < img.size(); ++i) {
    const float v = std::min(std::max(img.pix[i], 0.0f), 1.0f);
    buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.w);
  png.height = static_cast<png_uint_32>(img.h);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr))
    fail("png: write failed for " + path + ": " + png.message);
}

void write_png_rgb(const std::string& path, Dim h, Dim w,
                   const std::vector<unsigned char>& rgb) {
  require(static_cast<std::size_t>(h * w * 3) == rgb.size(),
          "png: rgb buffer size " + std::to_string(rgb.size()) + " does not match " +
              std::to_string(h) + "x" + std::to_string(w) + "x3");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, rgb.data(), 0, nullptr))
    fail("png: write failed for " + path + ": " + png.message);
}

}  // namespace m3
