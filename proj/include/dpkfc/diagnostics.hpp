#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dpkfc/kfac.hpp"
#include "dpkfc/matrix.hpp"
#include "dpkfc/nn.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc::diag {

/// tr(A^T B) / (|A|_F |B|_F). Throws NumericError if either matrix is zero.
double cosine_sim(const Matrix& cstar, const Matrix& chat);
/// |C* - C^|_F / |C*|_F. Throws NumericError if C* is zero.
double rel_frob(const Matrix& cstar, const Matrix& chat);

/// Cosine of two vectors; throws NumericError on a zero vector.
double cosine(std::span<const double> a, std::span<const double> b);

/// Cosine between mean-centred log spectra. Both inputs must be positive and of
/// equal length; they are sorted descending first.
double log_spectrum_cosine(std::vector<double> a, std::vector<double> b);

/// Reconstructed layer spectrum kron(lambda_A, lambda_G), descending, capped at 10^4 values.
inline constexpr std::size_t kSpectrumCap = 10000;
std::vector<double> layer_spectrum(const kfac::KfacLayerState& layer);
std::vector<double> layer_spectrum(const kfac::FactorPair& factors);

struct SpectrumRow {
  std::size_t layer = 0;
  std::string source;
  std::vector<double> eigenvalues;  // descending
};

struct SpectrumReport {
  std::vector<SpectrumRow> rows;
  std::vector<double> slq_nodes;
  std::vector<double> slq_weights;
};

/// One report row per (layer, source).
SpectrumReport spectrum_report(const std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>>& sources);

using Hvp = std::function<std::vector<double>(std::span<const double>)>;

struct SlqOptions {
  std::size_t probes = 10;         // m
  std::size_t lanczos_steps = 20;  // k
  std::size_t symmetry_checks = 3;
  double symmetry_tolerance = 1e-6;
};

struct SlqResult {
  /// Per probe Ritz values and weights (squared first components of the Ritz vectors).
  std::vector<std::vector<double>> nodes;
  std::vector<std::vector<double>> weights;
  /// Probes that terminated early on an invariant subspace, and their step counts.
  std::vector<std::size_t> steps_used;
  std::size_t breakdowns = 0;

  /// Probe-averaged density: every node with weight w / m.
  std::pair<std::vector<double>, std::vector<double>> density() const;
  /// sum_j w_j * node_j averaged over probes; estimates tr(H) / d.
  double mean_eigenvalue() const;
};

/// Stochastic Lanczos quadrature with full reorthogonalisation and Rademacher
/// probes. The operator's symmetry is spot-checked on random pairs first.
SlqResult slq_density(const Hvp& hvp, std::size_t dim, const SlqOptions& options, Rng& rng);

/// Central difference of a gradient map: (grad(theta + h v) - grad(theta - h v)) / (2h).
std::vector<double> hvp_finite_diff(const std::function<std::vector<double>(std::span<const double>)>& grad,
                                    std::span<const double> theta, std::span<const double> v, double h);

/// Same, on the mean cross-entropy of a model batch.
std::vector<double> hvp_finite_diff(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                                    std::span<const double> v, double h);

/// 1e-4 * max(1, |theta|).
double default_hvp_step(std::span<const double> theta);

/// Gradient of the model's mean loss, flattened in Model::flat_params order.
std::vector<double> flat_gradient(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels);

/// SNR_l = |g_l|_2 / (sigma C sqrt(d_l) / B) for each layer's clipped-mean gradient.
/// Throws NumericError when sigma * C is zero.
std::vector<double> layer_snr(const std::vector<Matrix>& clipped_mean, double sigma, double clip, double batch);

/// max / min of the entries; +inf when the minimum is zero.
double snr_spread(std::span<const double> snr);

struct AlignmentRow {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::string factor;  // "A", "G" or "combined"
  std::string reference;
  std::string candidate;
  double cosine = 0.0;
  double rel_frob = 0.0;
  // Same metrics after scaling each factor to unit Frobenius norm.
  double cosine_normalized = 0.0;
  double rel_frob_normalized = 0.0;
};

struct AlignmentReport {
  std::vector<AlignmentRow> rows;

  /// Rows matching (layer, factor, candidate).
  std::vector<AlignmentRow> select(std::size_t layer, const std::string& factor, const std::string& candidate) const;
};

/// Metrics for the Kronecker product of two factor pairs without materialising it.
struct KronMetrics {
  double cosine = 0.0;
  double rel_frob = 0.0;
};
KronMetrics kron_metrics(const kfac::FactorPair& reference, const kfac::FactorPair& candidate);

/// Compares every candidate source against the reference per layer and factor,
/// appending rows to `report`. Layers with empty factors are skipped.
void track_alignment(AlignmentReport& report, std::size_t step, const std::string& reference_name,
                     const std::vector<kfac::FactorPair>& reference,
                     const std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>>& candidates);

}  // namespace dpkfc::diag
