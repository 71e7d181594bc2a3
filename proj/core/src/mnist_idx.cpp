#include "bcnn/mnist_idx.hpp"

#include <fstream>

namespace bcnn {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError(strfmt("%s: truncated while reading %s", path.c_str(), what));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError(strfmt("cannot open image file '%s'", images_path.c_str()));
  std::uint32_t magic = read_u32_be(img, images_path, "magic");
  if (magic != kImageMagic)
    throw IoError(strfmt("%s: image magic 0x%08x, expected 0x%08x", images_path.c_str(), magic,
                         kImageMagic));
  std::uint32_t count = read_u32_be(img, images_path, "count");
  std::uint32_t rows = read_u32_be(img, images_path, "rows");
  std::uint32_t cols = read_u32_be(img, images_path, "cols");

  std::vector<std::uint8_t> pixels(static_cast<size_t>(count) * rows * cols);
  img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<size_t>(img.gcount()) != pixels.size())
    throw IoError(strfmt("%s: truncated, wanted %zu pixel bytes, got %lld", images_path.c_str(),
                         pixels.size(), static_cast<long long>(img.gcount())));

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError(strfmt("cannot open label file '%s'", labels_path.c_str()));
  std::uint32_t lmagic = read_u32_be(lab, labels_path, "magic");
  if (lmagic != kLabelMagic)
    throw IoError(strfmt("%s: label magic 0x%08x, expected 0x%08x", labels_path.c_str(), lmagic,
                         kLabelMagic));
  std::uint32_t lcount = read_u32_be(lab, labels_path, "count");
  if (lcount != count)
    throw IoError(strfmt("image/label count mismatch: %u images in %s vs %u labels in %s", count,
                         images_path.c_str(), lcount, labels_path.c_str()));
  std::vector<std::uint8_t> labels(lcount);
  lab.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (static_cast<size_t>(lab.gcount()) != labels.size())
    throw IoError(strfmt("%s: truncated, wanted %u label bytes, got %lld", labels_path.c_str(),
                         lcount, static_cast<long long>(lab.gcount())));

  Dataset ds;
  std::vector<real> values(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) values[i] = real(pixels[i]) / real(255);
  ds.inputs = Tensor::from_values(
      {static_cast<Index>(count), 1, static_cast<Index>(rows), static_cast<Index>(cols)},
      std::move(values));
  ds.labels.assign(labels.begin(), labels.end());
  ds.num_classes = 10;
  for (int c = 0; c < 10; ++c) ds.class_names.push_back(std::to_string(c));
  ds.validate();
  return ds;
}

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      Index count, Index rows, Index cols) {
  if (static_cast<Index>(pixels.size()) != count * rows * cols)
    throw ShapeError(strfmt("write_idx_images: %zu bytes for %lld x %lld x %lld", pixels.size(),
                            static_cast<long long>(count), static_cast<long long>(rows),
                            static_cast<long long>(cols)));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot write '%s'", path.c_str()));
  write_u32_be(out, kImageMagic);
  write_u32_be(out, static_cast<std::uint32_t>(count));
  write_u32_be(out, static_cast<std::uint32_t>(rows));
  write_u32_be(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot write '%s'", path.c_str()));
  write_u32_be(out, kLabelMagic);
  write_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

}  // namespace bcnn
