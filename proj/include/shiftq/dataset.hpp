#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftq/nn.hpp"

namespace shiftq {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Images [N, C, H, W] in [0, 1]. The first `train_count` items form the
// training split, the rest the test split.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::size_t train_count = 0;
  std::string source;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  Batch train() const;
  Batch test() const;
  Batch rows(std::size_t begin, std::size_t end) const;
  void validate() const;
};

enum class DatasetFormat { idx, csv, synthetic };
DatasetFormat dataset_format_from_string(const std::string& s);

// Two classes on 1x8x8 images. A 4x4 corner block carries a large but noisy
// class shift; every other pixel carries a small, nearly noise-free shift
// whose sign follows a fixed per-pixel pattern.
struct SyntheticSpec {
  std::uint64_t seed = 7;
  std::size_t train = 2048;
  std::size_t test = 512;
  double block_shift = 0.12;
  double block_noise = 0.08;
  double pixel_shift = 0.02;
  double pixel_noise = 0.02;
};
Dataset synthetic_dataset(const SyntheticSpec& spec);

// IDX images (magic 0x00000803, dims [N, H, W], unsigned bytes) with an IDX
// label file (magic 0x00000801). Pixels are divided by 255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes,
                 double test_fraction);

// Header line `label,p0,...,p{D-1}` fixes the column count; every row is a
// label then D pixel values in [0, 255]. Square D gives [1, s, s] images,
// anything else [1, 1, D].
Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes, double test_fraction);

struct DatasetSource {
  DatasetFormat format = DatasetFormat::synthetic;
  std::filesystem::path path;         // idx images or csv file
  std::filesystem::path labels_path;  // idx only
  std::size_t num_classes = 10;
  double test_fraction = 0.25;
  SyntheticSpec synthetic;
};
Dataset load_dataset(const DatasetSource& src);

}  // namespace shiftq
