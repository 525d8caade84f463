#include "shiftq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace shiftq {

Batch Dataset::rows(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > size()) throw std::out_of_range("dataset row range is empty or out of bounds");
  return Batch{images.slice_rows(begin, end),
               std::vector<std::size_t>(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                        labels.begin() + static_cast<std::ptrdiff_t>(end))};
}

Batch Dataset::train() const { return rows(0, train_count); }
Batch Dataset::test() const { return rows(train_count, size()); }

void Dataset::validate() const {
  if (images.rank() != 4) throw DatasetError("dataset images must be [N, C, H, W]");
  if (images.dim(0) != labels.size()) throw DatasetError("dataset image and label counts differ");
  if (train_count == 0 || train_count >= labels.size()) throw DatasetError("dataset needs non-empty train and test splits");
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DatasetError("dataset pixel outside [0, 1]");
  }
  for (std::size_t y : labels) {
    if (y >= num_classes) throw DatasetError("dataset label " + std::to_string(y) + " out of range");
  }
}

DatasetFormat dataset_format_from_string(const std::string& s) {
  if (s == "idx") return DatasetFormat::idx;
  if (s == "csv") return DatasetFormat::csv;
  if (s == "synthetic") return DatasetFormat::synthetic;
  throw std::invalid_argument("unknown dataset format: " + s);
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
  constexpr std::size_t kSide = 8, kBlock = 4;
  if (spec.train == 0 || spec.test == 0) throw std::invalid_argument("synthetic dataset needs train and test items");
  Rng rng(spec.seed);
  std::vector<double> pattern(kSide * kSide);
  for (double& p : pattern) p = rng.uniform() < 0.5 ? -1.0 : 1.0;

  const std::size_t n = spec.train + spec.test;
  Dataset d;
  d.images = Tensor({n, 1, kSide, kSide});
  d.labels.resize(n);
  d.num_classes = 2;
  d.train_count = spec.train;
  d.source = "synthetic:" + std::to_string(spec.seed);
  auto px = d.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = rng.below(2);
    const double s = y == 1 ? 1.0 : -1.0;
    d.labels[i] = y;
    const double block = spec.block_noise * rng.normal();
    for (std::size_t r = 0; r < kSide; ++r) {
      for (std::size_t c = 0; c < kSide; ++c) {
        const std::size_t k = r * kSide + c;
        double v = 0.5;
        if (r < kBlock && c < kBlock) {
          v += s * spec.block_shift + block + 0.02 * rng.normal();
        } else {
          v += s * spec.pixel_shift * pattern[k] + spec.pixel_noise * rng.normal();
        }
        px[i * kSide * kSide + k] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return d;
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::size_t train_split(std::size_t n, double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in (0, 1)");
  const auto test = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * test_fraction));
  if (n < 2 || test >= n) throw DatasetError("dataset too small to split");
  return n - test;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes,
                 double test_fraction) {
  const auto ib = read_bytes(images);
  if (ib.size() < 16) throw DatasetError(images.string() + ": truncated IDX header");
  if (be32(ib, 0) != 0x00000803) {
    throw DatasetError(images.string() + ": bad IDX image magic (expected 0x00000803)");
  }
  const std::size_t n = be32(ib, 4), h = be32(ib, 8), w = be32(ib, 12);
  if (n == 0 || h == 0 || w == 0) throw DatasetError(images.string() + ": empty IDX dimensions");
  if (ib.size() != 16 + n * h * w) throw DatasetError(images.string() + ": IDX payload does not match dims");

  const auto lb = read_bytes(labels);
  if (lb.size() < 8) throw DatasetError(labels.string() + ": truncated IDX header");
  if (be32(lb, 0) != 0x00000801) {
    throw DatasetError(labels.string() + ": bad IDX label magic (expected 0x00000801)");
  }
  if (be32(lb, 4) != n || lb.size() != 8 + n) {
    throw DatasetError(labels.string() + ": label count does not match " + std::to_string(n) + " images");
  }

  Dataset d;
  d.images = Tensor({n, 1, h, w});
  auto px = d.images.data();
  for (std::size_t i = 0; i < n * h * w; ++i) px[i] = ib[16 + i] / 255.0;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    if (d.labels[i] >= num_classes) {
      throw DatasetError(labels.string() + ": label " + std::to_string(d.labels[i]) + " at item " +
                         std::to_string(i) + " out of range for " + std::to_string(num_classes) + " classes");
    }
  }
  d.num_classes = num_classes;
  d.train_count = train_split(n, test_fraction);
  d.source = "idx:" + images.string();
  return d;
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& cell, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    throw DatasetError(where + ": not a number: '" + cell + "'");
  }
  while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
  if (used != cell.size()) throw DatasetError(where + ": not a number: '" + cell + "'");
  return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes, double test_fraction) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::size_t columns = split_commas(line).size();
  if (columns < 2) throw DatasetError(path.string() + ":1: header needs a label and at least one pixel column");
  const std::size_t dim = columns - 1;

  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto cells = split_commas(line);
    if (cells.size() != columns) {
      throw DatasetError(where + ": expected " + std::to_string(columns) + " columns, found " +
                         std::to_string(cells.size()));
    }
    const double y = parse_number(cells[0], where);
    if (y < 0.0 || y != std::floor(y) || y >= static_cast<double>(num_classes)) {
      throw DatasetError(where + ": label " + cells[0] + " out of range for " + std::to_string(num_classes) +
                         " classes");
    }
    labels.push_back(static_cast<std::size_t>(y));
    for (std::size_t c = 1; c < columns; ++c) {
      const double v = parse_number(cells[c], where);
      if (v < 0.0 || v > 255.0) throw DatasetError(where + ": pixel value " + cells[c] + " outside [0, 255]");
      pixels.push_back(v / 255.0);
    }
  }
  if (labels.empty()) throw DatasetError(path.string() + ": no data rows");

  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  const Shape image = side * side == dim ? Shape{1, side, side} : Shape{1, 1, dim};
  Dataset d;
  d.images = Tensor({labels.size(), image[0], image[1], image[2]}, std::move(pixels));
  d.labels = std::move(labels);
  d.num_classes = num_classes;
  d.train_count = train_split(d.labels.size(), test_fraction);
  d.source = "csv:" + path.string();
  return d;
}

Dataset load_dataset(const DatasetSource& src) {
  Dataset d;
  switch (src.format) {
    case DatasetFormat::synthetic: d = synthetic_dataset(src.synthetic); break;
    case DatasetFormat::idx: d = load_idx(src.path, src.labels_path, src.num_classes, src.test_fraction); break;
    case DatasetFormat::csv: d = load_csv(src.path, src.num_classes, src.test_fraction); break;
  }
  d.validate();
  return d;
}

}  // namespace shiftq
