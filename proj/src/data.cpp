#include "dpkfc/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "dpkfc/rng.hpp"

namespace dpkfc::data {

namespace {

std::atomic<std::size_t> g_file_reads{0};

std::uint32_t read_be32(std::span<const std::uint8_t> buf, std::size_t offset, const char* what) {
  if (offset + 4 > buf.size()) {
    std::ostringstream os;
    os << what << ": truncated header at byte " << offset;
    throw ParseError(ParseError::Kind::truncated, offset, os.str());
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError(ParseError::Kind::io, 0, "cannot open " + p.string());
  ++g_file_reads;
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void split_80_20(Dataset& d) {
  const std::size_t n = d.size();
  const std::size_t n_train = (n * 4) / 5;
  d.train_idx.resize(n_train);
  std::iota(d.train_idx.begin(), d.train_idx.end(), 0);
  d.test_idx.resize(n - n_train);
  std::iota(d.test_idx.begin(), d.test_idx.end(), n_train);
}

}  // namespace

void Dataset::validate() const {
  if (features.rows() != labels.size()) throw ContractError("Dataset: feature rows != label count");
  if (features.cols() != shape.size()) throw ContractError("Dataset: feature width != shape size");
  if (!all_finite(features)) throw ContractError("Dataset: non-finite feature values");
  for (auto y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ContractError("Dataset: label out of range");
}

Split take(const Dataset& d, std::span<const std::size_t> idx) {
  Split s{Matrix(idx.size(), d.features.cols()), {}};
  s.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = d.features.row(idx[i]);
    std::copy(src.begin(), src.end(), s.x.row(i).begin());
    s.y.push_back(d.labels[idx[i]]);
  }
  return s;
}

Split train_split(const Dataset& d) { return take(d, d.train_idx); }
Split test_split(const Dataset& d) { return take(d, d.test_idx); }

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  const std::uint32_t img_magic = read_be32(images, 0, "images");
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << "images: bad magic 0x" << std::hex << img_magic << " at byte 0 (expected 0x00000803)";
    throw ParseError(ParseError::Kind::bad_magic, 0, os.str());
  }
  const std::uint32_t lbl_magic = read_be32(labels, 0, "labels");
  if (lbl_magic != 0x00000801u) {
    std::ostringstream os;
    os << "labels: bad magic 0x" << std::hex << lbl_magic << " at byte 0 (expected 0x00000801)";
    throw ParseError(ParseError::Kind::bad_magic, 0, os.str());
  }
  const std::size_t n_img = read_be32(images, 4, "images");
  const std::size_t rows = read_be32(images, 8, "images");
  const std::size_t cols = read_be32(images, 12, "images");
  const std::size_t n_lbl = read_be32(labels, 4, "labels");
  if (rows == 0 || cols == 0) throw ParseError(ParseError::Kind::bad_header, 8, "images: zero image dimension");
  if (n_img != n_lbl) {
    std::ostringstream os;
    os << "count mismatch: images header says " << n_img << ", labels header says " << n_lbl << " (byte 4)";
    throw ParseError(ParseError::Kind::count_mismatch, 4, os.str());
  }
  const std::size_t img_bytes = n_img * rows * cols;
  if (images.size() < 16 + img_bytes) {
    std::ostringstream os;
    os << "images: payload truncated at byte " << images.size() << " (need " << 16 + img_bytes << ")";
    throw ParseError(ParseError::Kind::truncated, images.size(), os.str());
  }
  if (labels.size() < 8 + n_lbl) {
    std::ostringstream os;
    os << "labels: payload truncated at byte " << labels.size() << " (need " << 8 + n_lbl << ")";
    throw ParseError(ParseError::Kind::truncated, labels.size(), os.str());
  }

  Dataset d;
  d.shape = nn::Shape{1, rows, cols};
  d.features = Matrix(n_img, rows * cols);
  for (std::size_t i = 0; i < img_bytes; ++i) d.features.data()[i] = images[16 + i] / 255.0;
  d.labels.resize(n_lbl);
  std::uint8_t max_label = 0;
  for (std::size_t i = 0; i < n_lbl; ++i) {
    d.labels[i] = labels[8 + i];
    max_label = std::max(max_label, labels[8 + i]);
  }
  d.num_classes = std::max<std::size_t>(2, std::size_t{max_label} + 1);
  d.normalization = "pixels/255";
  split_80_20(d);
  return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = slurp(images);
  const auto lbl = slurp(labels);
  return parse_idx(img, lbl);
}

std::size_t file_reads() { return g_file_reads.load(); }

Dataset gen_blobs(const BlobsSpec& spec) {
  if (spec.classes < 2) throw ContractError("gen_blobs: classes must be >= 2");
  if (spec.n < spec.classes) throw ContractError("gen_blobs: n must be >= classes");
  if (spec.dim < 1) throw ContractError("gen_blobs: dim must be >= 1");
  Dataset d;
  d.shape = spec.shape.size() == 0 ? nn::Shape{spec.dim, 1, 1} : spec.shape;
  if (d.shape.size() != spec.dim) throw ContractError("gen_blobs: shape size != dim");
  d.num_classes = spec.classes;
  d.features = Matrix(spec.n, spec.dim);
  d.labels.resize(spec.n);
  Rng rng = Rng(spec.seed).split(streams::kData);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t k = i % spec.classes;
    d.labels[i] = static_cast<std::int64_t>(k);
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < spec.dim; ++j) row[j] = spec.noise * rng.normal();
    row[k % spec.dim] += spec.scale;
  }
  split_80_20(d);
  if (spec.standardize) {
    std::vector<double> mean(spec.dim, 0.0), sd(spec.dim, 0.0);
    for (auto i : d.train_idx)
      for (std::size_t j = 0; j < spec.dim; ++j) mean[j] += d.features(i, j);
    for (auto& m : mean) m /= static_cast<double>(d.train_idx.size());
    for (auto i : d.train_idx)
      for (std::size_t j = 0; j < spec.dim; ++j) sd[j] += std::pow(d.features(i, j) - mean[j], 2);
    for (auto& s : sd) {
      s = std::sqrt(s / static_cast<double>(d.train_idx.size()));
      if (!(s > 0.0)) s = 1.0;
    }
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t j = 0; j < spec.dim; ++j) d.features(i, j) = (d.features(i, j) - mean[j]) / sd[j];
    d.normalization = "per-feature standardisation (train statistics)";
  } else {
    d.normalization = "none";
  }
  return d;
}

Dataset subsample(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n >= d.size()) return d;
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng(seed).split(streams::kData);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(d.size())));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  Dataset out;
  const Split s = take(d, idx);
  out.features = s.x;
  out.labels = s.y;
  out.num_classes = d.num_classes;
  out.shape = d.shape;
  out.normalization = d.normalization;
  split_80_20(out);
  return out;
}

}  // namespace dpkfc::data
