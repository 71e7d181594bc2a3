#include "bcnn/dataset.hpp"

#include <algorithm>
#include <cstring>

namespace bcnn {

void Dataset::validate() const {
  if (!inputs.defined()) throw ConfigError("dataset: no inputs");
  if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
  Index expect = element_count();
  if (static_cast<Index>(labels.size()) != expect)
    throw ConfigError(strfmt("dataset: %zu labels for %lld elements", labels.size(),
                             static_cast<long long>(expect)));
  if (!mask.empty() && static_cast<Index>(mask.size()) != expect)
    throw ConfigError("dataset: mask length does not match element count");
  if (!dist_to_surface.empty() && static_cast<Index>(dist_to_surface.size()) != expect)
    throw ConfigError("dataset: dist_to_surface length does not match element count");
  for (std::int32_t l : labels)
    if (l != kIgnoreLabel && (l < 0 || l >= num_classes))
      throw ConfigError(strfmt("dataset: label %d out of range [0, %lld)", l,
                               static_cast<long long>(num_classes)));
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  Dataset out;
  out.element_shape = element_shape;
  out.num_classes = num_classes;
  out.class_names = class_names;
  out.split = split;

  const Index per = elements_per_sample();
  const Index row = inputs.size() / std::max<Index>(sample_count(), 1);
  Shape shape = inputs.shape();
  shape[0] = static_cast<Index>(indices.size());
  std::vector<real> vals(static_cast<size_t>(numel(shape)));
  out.labels.resize(indices.size() * static_cast<size_t>(per));
  if (!mask.empty()) out.mask.resize(out.labels.size());
  if (!dist_to_surface.empty()) out.dist_to_surface.resize(out.labels.size());

  for (size_t i = 0; i < indices.size(); ++i) {
    Index src = indices[i];
    if (src < 0 || src >= sample_count())
      throw ConfigError(strfmt("dataset subset: index %lld out of range",
                               static_cast<long long>(src)));
    std::memcpy(vals.data() + static_cast<Index>(i) * row, inputs.values().data() + src * row,
                static_cast<size_t>(row) * sizeof(real));
    std::copy_n(labels.begin() + src * per, per, out.labels.begin() + static_cast<Index>(i) * per);
    if (!mask.empty())
      std::copy_n(mask.begin() + src * per, per, out.mask.begin() + static_cast<Index>(i) * per);
    if (!dist_to_surface.empty())
      std::copy_n(dist_to_surface.begin() + src * per, per,
                  out.dist_to_surface.begin() + static_cast<Index>(i) * per);
  }
  out.inputs = Tensor::from_values(std::move(shape), std::move(vals));
  return out;
}

Dataset leave_out_class(const Dataset& ds, std::int32_t class_id) {
  ds.validate();
  if (ds.split != "train") return ds;

  if (!ds.per_voxel()) {
    std::vector<Index> keep;
    keep.reserve(ds.labels.size());
    for (Index i = 0; i < ds.sample_count(); ++i)
      if (ds.labels[static_cast<size_t>(i)] != class_id) keep.push_back(i);
    return ds.subset(keep);
  }

  Dataset out = ds;
  for (std::int32_t& l : out.labels)
    if (l == class_id) l = kIgnoreLabel;
  return out;
}

}  // namespace bcnn
