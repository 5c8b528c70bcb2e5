#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpkfc/matrix.hpp"
#include "dpkfc/nn.hpp"

namespace dpkfc::data {

/// IDX parse failure; offset is the byte position where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, bad_header };
  ParseError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what), kind_(kind), offset_(offset) {}
  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

struct Dataset {
  Matrix features;                    // [n x shape.size()]
  std::vector<std::int64_t> labels;   // [n]
  std::size_t num_classes = 0;
  nn::Shape shape;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  std::string normalization;  // human-readable description of the applied scaling

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

/// Rows and labels of a subset, materialised.
struct Split {
  Matrix x;
  std::vector<std::int64_t> y;
};
Split take(const Dataset& d, std::span<const std::size_t> idx);
Split train_split(const Dataset& d);
Split test_split(const Dataset& d);

/// Big-endian IDX: images magic 0x00000803 (ubyte, 3-D), labels 0x00000801.
/// Pixels are scaled to [0, 1]. The split is 80/20 in file order.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// In-memory variant used by load_idx.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

/// Number of dataset file reads performed by this process (load_idx calls).
std::size_t file_reads();

struct BlobsSpec {
  std::size_t n = 1000;
  std::size_t dim = 16;
  std::size_t classes = 4;
  double noise = 1.0;
  std::uint64_t seed = 0;
  /// Optional image geometry; shape.size() must equal dim. Defaults to flat.
  nn::Shape shape{0, 0, 0};
  double scale = 4.0;      // distance scale of the class means
  bool standardize = true;
};

/// Class means on the scaled simplex (scale * e_k, cycling through the first
/// dim coordinates), isotropic Gaussian noise, round-robin class assignment,
/// deterministic 80/20 split, features standardised with train statistics.
Dataset gen_blobs(const BlobsSpec& spec);

/// A seeded random `n`-row subset of `d`, kept in original order and re-split 80/20.
Dataset subsample(const Dataset& d, std::size_t n, std::uint64_t seed);

}  // namespace dpkfc::data
