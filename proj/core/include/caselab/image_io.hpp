#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caselab/tensor.hpp"

namespace caselab {

// 8-bit raster, row-major, channel-interleaved; 1 (gray) or 3 (rgb) channels.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;
};

// Binary PGM (P5) or PPM (P6), maxval 255.
RawImage read_pnm(const std::string& path);
void write_pnm(const std::string& path, const RawImage& img);

// Decode to [0,1], bilinear-resize to out_resolution, replicate gray to rgb
// (or average rgb down to gray), then standardize (x - mean) / stddev.
// Result shape [out_channels, out_resolution, out_resolution].
Tensor image_to_tensor(const RawImage& img, int out_channels,
                       int out_resolution, float mean, float stddev);

// Undo the normalization and quantize back to bytes; no resize.
RawImage tensor_to_image(const Tensor& t, float mean, float stddev);

}  // namespace caselab
