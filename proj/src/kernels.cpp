#include "dpkfc/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdint>

namespace dpkfc::kernels {

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
}

void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c) {
  std::fill(c, c + k * k, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      double* ci = c + i * k;
      for (std::size_t j = i; j < k; ++j) ci[j] += xi * xr[j];
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      c[i * k + j] *= scale;
      c[j * k + i] = c[i * k + j];
    }
  }
}

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  // Row i of C only depends on column i of A; partition over i so that
  // accumulation order matches the serial kernel exactly.
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double api = a[p * m + i];
      if (api == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
}

void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c) {
  const auto dim = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(dynamic, 4) if (n * k * k > 65536)
  for (std::int64_t ii = 0; ii < dim; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c + i * k;
    std::fill(ci + i, ci + k, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = x + r * k;
      const double xi = xr[i];
      if (xi == 0.0) continue;
      for (std::size_t j = i; j < k; ++j) ci[j] += xi * xr[j];
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      c[i * k + j] *= scale;
      c[j * k + i] = c[i * k + j];
    }
  }
}

}  // namespace parallel

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  parallel::gemm_nn(m, n, k, a, b, c);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  parallel::gemm_tn(m, n, k, a, b, c);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  parallel::gemm_nt(m, n, k, a, b, c);
}
void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c) {
  parallel::gram(n, k, x, scale, c);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace dpkfc::kernels
