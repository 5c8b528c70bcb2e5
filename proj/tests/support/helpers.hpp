#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dpkfc/matrix.hpp"
#include "dpkfc/rng.hpp"

namespace testutil {

inline dpkfc::Matrix random_matrix(std::size_t r, std::size_t c, dpkfc::Rng& rng, double scale = 1.0) {
  dpkfc::Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

// X^T X / rows + ridge I.
inline dpkfc::Matrix random_spd(std::size_t n, dpkfc::Rng& rng, double ridge = 0.1) {
  const dpkfc::Matrix x = random_matrix(2 * n, n, rng);
  dpkfc::Matrix s = dpkfc::matmul_tn(x, x);
  s *= 1.0 / static_cast<double>(2 * n);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += ridge;
  return s;
}

inline double max_abs_diff(const dpkfc::Matrix& a, const dpkfc::Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1e-300, std::abs(want));
}

// Plain triple loop, independent of the kernels under test.
inline dpkfc::Matrix naive_matmul(const dpkfc::Matrix& a, const dpkfc::Matrix& b) {
  dpkfc::Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

}  // namespace testutil
