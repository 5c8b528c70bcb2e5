#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dpkfc/linalg.hpp"
#include "dpkfc/matrix.hpp"
#include "dpkfc/nn.hpp"
#include "dpkfc/probes.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc::kfac {

/// Pink noise shaped to the model input. batch/channels/height/width of the
/// embedded spec are overwritten from the model and probe_batch.
struct SyntheticPink {
  PinkNoiseSpec spec;
};

/// Structural token probes, fed to the model as masked bag-of-token features.
struct SyntheticToken {
  TokenNoiseSpec spec;
};

/// Rows sampled from a named in-memory dataset (public proxy). Labels are the
/// dataset's own unless random_labels is set.
struct DatasetProbe {
  const Matrix* features = nullptr;
  std::span<const std::int64_t> labels;
  std::string name = "dataset";
  bool random_labels = false;
};

/// Rows of the private training data. Spends unaccounted privacy: diagnostics only.
struct PrivateOracle {
  const Matrix* features = nullptr;
  std::span<const std::int64_t> labels;
};

using ProbeSource = std::variant<SyntheticPink, SyntheticToken, DatasetProbe, PrivateOracle>;

std::string source_name(const ProbeSource& s);
bool is_synthetic(const ProbeSource& s);

struct KfacConfig {
  std::size_t probe_batch = 64;
  double damping = 1e-3;  // pi, added inside the covariance estimate
  double gamma = 1e-2;    // added to eigenvalues before the inverse square root
  std::size_t refresh_period = 50;
  std::size_t max_factor_dim = 4096;  // layers with a larger factor are left unpreconditioned
  ProbeSource source = SyntheticPink{};

  void validate() const;
};

struct FactorPair {
  Matrix a;  // [a_dim x a_dim]
  Matrix g;  // [fan_out x fan_out]
};

/// Damped covariance factors per trainable layer from one probe batch:
/// A = (1/n) sum a a^T + pi I, G = (1/n) sum delta delta^T + pi I, where n is the
/// probe count for Linear layers and probes * locations for Conv2d layers.
std::vector<FactorPair> estimate_factors(const nn::Model& model, const Matrix& probe_x,
                                         std::span<const std::int64_t> probe_y, double damping);

/// Same as estimate_factors but skips layers where skip[t] is set (empty matrices).
std::vector<FactorPair> estimate_factors_masked(const nn::Model& model, const Matrix& probe_x,
                                                std::span<const std::int64_t> probe_y, double damping,
                                                const std::vector<bool>& skip);

/// [B x T x d] activations (row-major, B*T rows of d) pooled into [B*T x d].
Matrix kfac_reduce_pool(std::span<const double> acts, std::size_t batch, std::size_t seq, std::size_t dim);

struct KfacLayerState {
  std::size_t layer_id = 0;  // trainable layer index
  bool identity = false;     // true when preconditioning is skipped for this layer
  Matrix u_a;
  Matrix u_g;
  std::vector<double> eig_a;  // eigenvalues of the damped A, descending
  std::vector<double> eig_g;
};

/// U_A = Q_A (L_A + gamma)^{-1/2} Q_A^T, likewise U_G.
KfacLayerState build_preconditioner(const Matrix& a, const Matrix& g, double gamma, std::size_t layer_id = 0);

/// U_G g U_A.
Matrix precondition_grad(const Matrix& g, const KfacLayerState& state);

/// Rank-one form for g = delta a^T: returns (U_G delta, U_A a).
std::pair<std::vector<double>, std::vector<double>> precondition_rank1(std::span<const double> delta,
                                                                       std::span<const double> a,
                                                                       const KfacLayerState& state);

struct KfacState {
  std::vector<KfacLayerState> layers;
  /// Number of completed training steps when the state was built. A state may
  /// serve step s (1-based) only if creation_step < s.
  std::int64_t creation_step = 0;
  std::string source;

  static KfacState identity(const nn::Model& model, std::int64_t creation_step = 0);
};

/// Probe batch for a source, shaped for the model.
struct ProbeBatch {
  Matrix x;
  std::vector<std::int64_t> y;
};
ProbeBatch make_probe_batch(const nn::Model& model, const KfacConfig& config, Rng& rng);

/// Builds a fresh preconditioner from the configured probe source.
KfacState refresh(const nn::Model& model, const KfacConfig& config, Rng& rng, std::int64_t creation_step = 0);

/// Builds a state from already estimated factors.
KfacState state_from_factors(const nn::Model& model, const std::vector<FactorPair>& factors, double gamma,
                             std::int64_t creation_step, std::string source);

}  // namespace dpkfc::kfac
