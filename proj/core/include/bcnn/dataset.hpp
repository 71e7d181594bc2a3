#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcnn/tensor.hpp"

namespace bcnn {

// Voxels relabeled by leave_out_class carry this label in the train split;
// training loss and accuracy skip them.
inline constexpr std::int32_t kIgnoreLabel = -1;

// Classification datasets label whole samples (element_shape empty);
// voxel datasets label every grid cell (element_shape = spatial extents).
struct Dataset {
  Tensor inputs;  // [N, C, S...]
  std::vector<std::int32_t> labels;
  std::vector<std::uint8_t> mask;  // optional, per element: evaluate/train here
  std::vector<float> dist_to_surface;  // optional, per element, meters
  Shape element_shape;
  Index num_classes = 0;
  std::vector<std::string> class_names;
  std::string split = "train";

  Index sample_count() const { return inputs.defined() ? inputs.dim(0) : 0; }
  Index elements_per_sample() const {
    Index n = numel(element_shape);
    return n > 0 ? n : 1;
  }
  Index element_count() const { return sample_count() * elements_per_sample(); }
  bool per_voxel() const { return !element_shape.empty(); }

  void validate() const;
  // Gather whole samples (rows) by index, in the given order.
  Dataset subset(const std::vector<Index>& indices) const;
};

// Train split: classification datasets drop every sample of the class; voxel
// datasets relabel its voxels to kIgnoreLabel (the scene is kept). Any other
// split is returned unchanged so held-out classes appear at test time.
Dataset leave_out_class(const Dataset& ds, std::int32_t class_id);

}  // namespace bcnn
