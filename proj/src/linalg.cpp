#include "dpkfc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>

namespace dpkfc {

namespace {

double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

// Applies the Jacobi rotation in the (p, q) plane. Rows p and q of the
// symmetric A are updated contiguously and mirrored into columns p and q; the
// eigenvector matrix is held transposed so its update is contiguous as well.
void rotate(Matrix& a, Matrix& vt, std::size_t p, std::size_t q, double c, double s, double t) {
  const std::size_t n = a.rows();
  const double apq = a(p, q);
  const double app = a(p, p);
  const double aqq = a(q, q);
  double* rp = a.row(p).data();
  double* rq = a.row(q).data();
  double* vp = vt.row(p).data();
  double* vq = vt.row(q).data();
  double* base = a.data();
  const auto dim = static_cast<std::int64_t>(n);
  // Entries of the (p, q) block are overwritten below, so every loop runs over all k.
  const auto update = [&](std::size_t k) {
    const double apk = rp[k];
    const double aqk = rq[k];
    rp[k] = c * apk - s * aqk;
    rq[k] = s * apk + c * aqk;
    const double vpk = vp[k];
    const double vqk = vq[k];
    vp[k] = c * vpk - s * vqk;
    vq[k] = s * vpk + c * vqk;
  };
  // An `if` clause still pays for the runtime call, so small rotations branch around it.
  if (n > 384) {
#pragma omp parallel for schedule(static)
    for (std::int64_t kk = 0; kk < dim; ++kk) update(static_cast<std::size_t>(kk));
  } else {
    for (std::size_t k = 0; k < n; ++k) update(k);
  }
  for (std::size_t k = 0; k < n; ++k) {
    base[k * n + p] = rp[k];
    base[k * n + q] = rq[k];
  }
  a(p, p) = app - t * apq;
  a(q, q) = aqq + t * apq;
  a(p, q) = 0.0;
  a(q, p) = 0.0;
}

}  // namespace

Matrix SymEig::compose(const std::vector<double>& weights) const {
  const std::size_t n = eigenvectors.rows();
  Matrix scaled = eigenvectors;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < weights.size(); ++c) scaled(r, c) *= weights[c];
  Matrix out = matmul_nt(scaled, eigenvectors);
  // Enforce exact symmetry of the composed matrix.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (out(i, j) + out(j, i));
      out(i, j) = m;
      out(j, i) = m;
    }
  return out;
}

SymEig sym_eig(const Matrix& input, const JacobiOptions& opts) {
  if (!input.is_square()) throw ContractError("sym_eig: matrix is not square (" + shape_str(input) + ")");
  if (!all_finite(input)) throw ContractError("sym_eig: matrix has non-finite entries");
  if (asymmetry(input) > opts.symmetry_tolerance) {
    std::ostringstream os;
    os << "sym_eig: matrix is not symmetric (relative asymmetry " << asymmetry(input) << ")";
    throw ContractError(os.str());
  }

  const std::size_t n = input.rows();
  Matrix a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = m;
      a(j, i) = m;
    }
  Matrix vt = Matrix::identity(n);
  const double scale = frobenius_norm(a);
  const double target = opts.tolerance * scale;

  bool converged = off_diagonal_norm(a) <= target;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Negligible against both diagonal entries at working precision: drop it.
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(a(p, p)) + g == std::abs(a(p, p)) && std::abs(a(q, q)) + g == std::abs(a(q, q))) {
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          continue;
        }
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        rotate(a, vt, p, q, c, s, t);
      }
    }
    converged = off_diagonal_norm(a) <= target;
  }
  if (!converged) {
    std::ostringstream os;
    os << "sym_eig: no convergence after " << opts.max_sweeps << " sweeps; off-diagonal residual "
       << off_diagonal_norm(a) << " (target " << target << ")";
    throw NumericError(os.str());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  SymEig out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = vt(order[k], r);
  }
  return out;
}

Matrix inv_sqrt_from_eig(const SymEig& e, double gamma) {
  if (gamma < 0.0) throw ContractError("inv_sqrt_from_eig: gamma must be >= 0");
  std::vector<double> w(e.eigenvalues.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double shifted = e.eigenvalues[k] + gamma;
    if (!(shifted > 0.0)) {
      std::ostringstream os;
      os << "inv_sqrt_from_eig: singular factor, eigenvalue " << e.eigenvalues[k] << " + gamma " << gamma << " <= 0";
      throw NumericError(os.str());
    }
    w[k] = 1.0 / std::sqrt(shifted);
  }
  return e.compose(w);
}

std::vector<double> kron_spectrum(const std::vector<double>& lam_a, const std::vector<double>& lam_g) {
  if (lam_a.empty() || lam_g.empty()) throw ContractError("kron_spectrum: empty eigenvalue vector");
  std::vector<double> out;
  out.reserve(lam_a.size() * lam_g.size());
  for (double x : lam_a)
    for (double y : lam_g) out.push_back(x * y);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

double spectral_norm_sym(const Matrix& a) {
  const auto e = sym_eig(a);
  double m = 0.0;
  for (double l : e.eigenvalues) m = std::max(m, std::abs(l));
  return m;
}

}  // namespace dpkfc
