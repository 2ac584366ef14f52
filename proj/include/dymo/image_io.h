#ifndef DYMO_IMAGE_IO_H_
#define DYMO_IMAGE_IO_H_

#include <cstdint>
#include <string>
#include <vector>

#include "dymo/tensor.h"

namespace dymo {

// RGB images are {3, H, W} tensors with values in [-1, 1]. On disk a sample
// v of bit depth b maps to v / (2^(b-1) - 0.5) - 1; values outside [-1, 1]
// are clamped when written.
void write_png(const std::string& path, const Tensor& image, int bit_depth = 16);
Tensor read_png(const std::string& path);

// Single-channel 8-bit image, row-major.
void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int width, int height);
std::vector<uint8_t> read_png_gray(const std::string& path, int* width, int* height);

}  // namespace dymo

#endif  // DYMO_IMAGE_IO_H_
