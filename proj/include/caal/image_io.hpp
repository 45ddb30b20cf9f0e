#pragma once

#include <string>

#include "caal/tensor.hpp"

namespace caal {

// 8-bit grayscale PNG; tensor is (H,W) with values in [0,1], quantized to 255
// levels on write. write-then-read is exact on already-quantized data.
void write_png_gray(const std::string& path, const Tensor& img);
Tensor read_png_gray(const std::string& path);

// 1-bit grayscale PNG; tensor is (H,W) with values in {0,1}
void write_png_mask(const std::string& path, const Tensor& mask);
Tensor read_png_mask(const std::string& path);

// clamp to [0,1] and round onto the 256-level grid write_png_gray uses, so an
// in-memory image equals its own write/read round trip bitwise
void snap_to_gray_grid(Tensor& img);

}  // namespace caal
