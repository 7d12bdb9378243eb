#pragma once

#include "m3/image.hpp"

#include <string>
#include <vector>

namespace m3 {

// 8-bit grayscale PNG in, float [0,1] image out. RGB(A) sources are
// converted to luminance by libpng.
Image read_png_gray(const std::string& path);

// Interleaved 8-bit RGB rows (h*w*3 bytes) out of any readable PNG.
std::vector<unsigned char> read_png_rgb(const std::string& path, Dim& h, Dim& w);

// Float [0,1] image to 8-bit grayscale PNG (values clamped, round-to-nearest).
void write_png_gray(const std::string& path, const Image& img);

// Interleaved 8-bit RGB rows (h*w*3 bytes) to PNG.
void write_png_rgb(const std::string& path, Dim h, Dim w,
                   const std::vector<unsigned char>& rgb);

}  // namespace m3
