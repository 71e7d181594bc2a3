#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcnn/dataset.hpp"

namespace bcnn {

// Big-endian IDX pair (image magic 0x00000803, label magic 0x00000801).
// Pixel bytes are scaled to [0, 1]; image and label counts are cross-checked.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// Writers for the same format, used by the bundled digit generator and tests.
void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      Index count, Index rows, Index cols);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

}  // namespace bcnn
