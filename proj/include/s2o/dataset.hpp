#pragma once

// Data sources: synthetic Gaussian blobs and the IDX binary format used by
// MNIST-family datasets. Batches are (B x d) double matrices; labels are
// ints. IDX payloads are big-endian; pixel bytes are scaled to [0,1] and
// images flattened row-major.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace s2o {

struct LabeledBatch {
  Tensor x;            // B x d
  std::vector<int> y;  // B labels

  std::size_t size() const { return y.size(); }
};

struct Dataset {
  LabeledBatch train;
  LabeledBatch test;
  std::size_t num_classes = 0;
  std::string name;
  // Attack clamp range; empty for synthetic data (no clamp).
  std::optional<std::pair<double, double>> clamp;
};

inline LabeledBatch take_rows(const LabeledBatch& b, const std::vector<std::size_t>& rows) {
  const std::size_t d = b.x.cols();
  LabeledBatch out;
  out.x = Tensor::zeros({rows.size(), d});
  out.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out.x.at(i, j) = b.x.at(rows[i], j);
    out.y.push_back(b.y[rows[i]]);
  }
  return out;
}

// Gaussian blobs: class centers drawn uniformly in [0.2, 0.8]^dim, points at
// center + spread * N(0, I), clamped to [0,1] so epsilon budgets on a [0,1]
// scale stay meaningful. Deterministic 80/20 train/test split per class.
inline Dataset make_blobs(std::size_t classes, std::size_t dim, std::size_t per_class,
                          double spread, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("make_blobs: need at least 2 classes");
  if (per_class < 5) throw ConfigError("make_blobs: need at least 5 points per class");
  if (spread < 0.0) throw ConfigError("make_blobs: spread must be nonnegative");
  Rng rng(derive_seed(seed, 0xB10B5));
  std::vector<Tensor> centers;
  for (std::size_t c = 0; c < classes; ++c) {
    Tensor ctr = Tensor::zeros({dim});
    rng.fill_uniform(ctr, 0.2, 0.8);
    centers.push_back(std::move(ctr));
  }
  const std::size_t test_per_class = per_class / 5;
  const std::size_t train_per_class = per_class - test_per_class;
  Dataset ds;
  ds.num_classes = classes;
  ds.name = "blobs";
  ds.clamp = std::nullopt;  // synthetic data: attacks run unclamped
  ds.train.x = Tensor::zeros({classes * train_per_class, dim});
  ds.test.x = Tensor::zeros({classes * test_per_class, dim});
  std::size_t ti = 0, si = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t p = 0; p < per_class; ++p) {
      std::vector<double> point(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        double v = centers[c][j] + spread * rng.normal();
        point[j] = std::min(1.0, std::max(0.0, v));
      }
      const bool is_test = p < test_per_class;
      if (is_test) {
        for (std::size_t j = 0; j < dim; ++j) ds.test.x.at(si, j) = point[j];
        ds.test.y.push_back(static_cast<int>(c));
        ++si;
      } else {
        for (std::size_t j = 0; j < dim; ++j) ds.train.x.at(ti, j) = point[j];
        ds.train.y.push_back(static_cast<int>(c));
        ++ti;
      }
    }
  }
  // Interleave classes so truncated prefixes stay balanced.
  Rng shuffle_rng(derive_seed(seed, 0xB10B5, 1));
  auto shuffle_batch = [&](LabeledBatch& b) {
    const auto perm = shuffle_rng.permutation(b.size());
    std::vector<std::size_t> rows(perm.begin(), perm.end());
    b = take_rows(b, rows);
  };
  shuffle_batch(ds.train);
  shuffle_batch(ds.test);
  return ds;
}

// --- IDX ---

namespace detail {

inline std::uint32_t read_be_u32(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char buf[4];
  f.read(reinterpret_cast<char*>(buf), 4);
  if (f.gcount() != 4)
    throw IoError("idx: truncated file '" + path + "' (expected 4 bytes at offset " +
                  std::to_string(offset) + ")");
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace detail

// Images: magic 0x00000803, then count/rows/cols, then unsigned bytes.
// Returns (count x rows*cols) with values in [0,1].
inline Tensor load_idx_images(const std::string& path, std::size_t limit = 0) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("idx: cannot open '" + path + "'");
  const std::uint32_t magic = detail::read_be_u32(f, path, 0);
  if (magic != 0x00000803u) {
    std::ostringstream os;
    os << "idx: bad image magic 0x" << std::hex << magic << " in '" << path
       << "' (expected 0x803)";
    throw IoError(os.str());
  }
  const std::uint32_t count = detail::read_be_u32(f, path, 4);
  const std::uint32_t rows = detail::read_be_u32(f, path, 8);
  const std::uint32_t cols = detail::read_be_u32(f, path, 12);
  std::size_t n = count;
  if (limit > 0 && limit < n) n = limit;
  const std::size_t pixels = std::size_t(rows) * cols;
  Tensor out = Tensor::zeros({n, pixels});
  std::vector<unsigned char> row(pixels);
  for (std::size_t i = 0; i < n; ++i) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(f.gcount()) != pixels)
      throw IoError("idx: truncated image payload in '" + path + "' at image " +
                    std::to_string(i) + " (offset " + std::to_string(16 + i * pixels) + ")");
    for (std::size_t j = 0; j < pixels; ++j) out.at(i, j) = static_cast<double>(row[j]) / 255.0;
  }
  return out;
}

// Labels: magic 0x00000801, then count, then unsigned byte labels.
inline std::vector<int> load_idx_labels(const std::string& path, std::size_t limit = 0) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("idx: cannot open '" + path + "'");
  const std::uint32_t magic = detail::read_be_u32(f, path, 0);
  if (magic != 0x00000801u) {
    std::ostringstream os;
    os << "idx: bad label magic 0x" << std::hex << magic << " in '" << path
       << "' (expected 0x801)";
    throw IoError(os.str());
  }
  const std::uint32_t count = detail::read_be_u32(f, path, 4);
  std::size_t n = count;
  if (limit > 0 && limit < n) n = limit;
  std::vector<int> labels(n);
  std::vector<unsigned char> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(f.gcount()) != n)
    throw IoError("idx: truncated label payload in '" + path + "' (expected " +
                  std::to_string(n) + " labels)");
  for (std::size_t i = 0; i < n; ++i) labels[i] = buf[i];
  return labels;
}

inline Dataset load_idx_dataset(const std::string& train_images, const std::string& train_labels,
                                const std::string& test_images, const std::string& test_labels,
                                std::size_t train_limit = 0, std::size_t test_limit = 0) {
  Dataset ds;
  ds.name = "idx";
  ds.clamp = std::make_pair(0.0, 1.0);
  ds.train.x = load_idx_images(train_images, train_limit);
  ds.train.y = load_idx_labels(train_labels, train_limit);
  ds.test.x = load_idx_images(test_images, test_limit);
  ds.test.y = load_idx_labels(test_labels, test_limit);
  if (ds.train.x.rows() != ds.train.y.size())
    throw IoError("idx: train image/label counts disagree (" + std::to_string(ds.train.x.rows()) +
                  " vs " + std::to_string(ds.train.y.size()) + ")");
  if (ds.test.x.rows() != ds.test.y.size())
    throw IoError("idx: test image/label counts disagree (" + std::to_string(ds.test.x.rows()) +
                  " vs " + std::to_string(ds.test.y.size()) + ")");
  int max_label = 0;
  for (int y : ds.train.y) max_label = std::max(max_label, y);
  for (int y : ds.test.y) max_label = std::max(max_label, y);
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

}  // namespace s2o
