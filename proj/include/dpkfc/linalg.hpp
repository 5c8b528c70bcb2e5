#pragma once

#include <vector>

#include "dpkfc/matrix.hpp"

namespace dpkfc {

/// Symmetric eigendecomposition: A = Q diag(eigenvalues) Q^T.
/// Eigenvalues are sorted descending; eigenvector k is column k of Q.
struct SymEig {
  std::vector<double> eigenvalues;
  Matrix eigenvectors;

  /// Q diag(f(lambda)) Q^T for the given per-eigenvalue weights.
  Matrix compose(const std::vector<double>& weights) const;
  Matrix reconstruct() const { return compose(eigenvalues); }
};

struct JacobiOptions {
  double tolerance = 1e-12;  // stop when off(A) <= tolerance * ||A||_F
  int max_sweeps = 100;
  double symmetry_tolerance = 1e-10;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Throws ContractError on non-square or asymmetric input and NumericError when
/// the sweep budget runs out.
SymEig sym_eig(const Matrix& a, const JacobiOptions& opts = {});

/// U = Q (Lambda + gamma I)^{-1/2} Q^T.
Matrix inv_sqrt_from_eig(const SymEig& e, double gamma);

/// All pairwise products lamA_i * lamG_j, sorted descending.
std::vector<double> kron_spectrum(const std::vector<double>& lam_a, const std::vector<double>& lam_g);

/// Largest eigenvalue magnitude of a symmetric matrix.
double spectral_norm_sym(const Matrix& a);

}  // namespace dpkfc
