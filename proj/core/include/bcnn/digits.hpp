#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

// Procedural 28x28 grayscale digit renderer: each class is a fixed stroke
// glyph drawn with a random affine jitter, stroke width, ink level and pixel
// noise. Stands in for handwritten digit data where none is available; the
// output goes through the same IDX files and loader as the real thing.
std::vector<std::uint8_t> render_digit(int digit, RngStream& rng);

// Writes a (images, labels) IDX pair of `count` rendered digits with
// uniformly cycling labels, deterministically from the seed.
void write_digit_idx(const std::string& images_path, const std::string& labels_path, Index count,
                     std::uint64_t seed);

}  // namespace bcnn
