#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "dpkfc/kfac.hpp"
#include "dpkfc/matrix.hpp"
#include "dpkfc/nn.hpp"

namespace dpkfc::io {

/// A saved model with optional preconditioner state. See docs/checkpoint_format.md.
struct Checkpoint {
  nn::Model model;
  std::optional<kfac::KfacState> kfac;
  std::string normalization;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Tensor file: text header "dpkfc-tensor 1\nshape d0 d1 ...\n" then the
/// row-major little-endian f64 payload.
std::string encode_tensor(const Matrix& m, const std::vector<std::size_t>& shape);
std::pair<Matrix, std::vector<std::size_t>> decode_tensor(const std::string& bytes);

/// Locale-independent number text with 17 significant digits ("nan", "inf", "-inf" for non-finite).
std::string csv_number(double v);

/// Writes to a sibling temporary file and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace dpkfc::io
