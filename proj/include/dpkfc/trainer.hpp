#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpkfc/accountant.hpp"
#include "dpkfc/data.hpp"
#include "dpkfc/dp.hpp"
#include "dpkfc/kfac.hpp"
#include "dpkfc/nn.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc::train {

enum class Method { dpsgd, dpkfc };

std::string method_name(Method m);
Method parse_method(const std::string& s);

struct StepLog;

struct TrainConfig {
  Method method = Method::dpkfc;
  kfac::KfacConfig kfac;
  dp::PrivacyParams privacy;  // sample_rate is derived from expected_batch / N by train()
  /// When set, sigma is calibrated once before training for this epsilon.
  std::optional<double> target_epsilon;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t epochs = 5;
  std::size_t expected_batch = 256;
  std::uint64_t seed = 0;
  std::size_t eval_every = 50;
  bool log_snr = true;
  /// Called after evaluation on logged steps; may append named metrics.
  std::function<void(const nn::Model&, std::size_t step, StepLog&)> on_eval;

  void validate() const;
};

/// SGD with heavy-ball momentum: v = mu v + g; theta -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(std::vector<Matrix>& params, const std::vector<Matrix>& grad);

 private:
  double lr_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

/// Output of one privatized gradient computation.
struct PrivateGradient {
  std::vector<Matrix> update;        // (sum of clipped + noise) / B, preconditioned coordinates
  std::vector<Matrix> clipped_mean;  // sum of clipped / B, noise-free
  std::size_t batch_size = 0;        // realised batch size
  std::size_t clipped = 0;           // samples whose norm exceeded C
  double loss_sum = 0.0;             // sum of per-sample losses (model path only)
};

/// Generic mechanism over materialised per-sample gradients, per_sample[i][l].
/// `shapes` supplies the layer shapes for an empty batch. Each sample is
/// transformed with precondition_grad when a state is given, clipped jointly
/// across layers, summed, noised and divided by expected_batch.
PrivateGradient privatize_samples(const std::vector<std::vector<Matrix>>& per_sample, const std::vector<Matrix>& shapes,
                                  const kfac::KfacState* state, const dp::PrivacyParams& params,
                                  double expected_batch, Rng& noise_rng);

/// Same mechanism for a model batch without materialising every per-sample
/// gradient: linear layers use the rank-one form (U_G delta)(U_A a)^T, whose
/// squared norm is |U_G delta|^2 |U_A a|^2.
PrivateGradient model_private_gradient(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                                       const kfac::KfacState* state, const dp::PrivacyParams& params,
                                       double expected_batch, Rng& noise_rng);

/// One private step at 1-based step index `step`. Throws ContractError when the
/// state was not created strictly before this step.
PrivateGradient train_step(nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                           const kfac::KfacState* state, const dp::PrivacyParams& params, double expected_batch,
                           Rng& noise_rng, SgdMomentum& opt, std::int64_t step);

/// Poisson subsample of [0, n): each index kept independently with probability q.
std::vector<std::size_t> poisson_sample(std::size_t n, double q, Rng& rng);

struct StepLog {
  std::size_t step = 0;  // 1-based
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // NaN for an empty batch
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double epsilon = 0.0;
  std::size_t batch_size = 0;
  std::vector<double> snr;  // per trainable layer, on evaluated steps
  std::vector<std::pair<std::string, double>> metrics;
};

struct RunRecord {
  std::vector<StepLog> steps;
  double sigma = 0.0;
  double sample_rate = 0.0;
  double delta = 0.0;
  std::size_t total_steps = 0;
  std::size_t refreshes = 0;
  double final_accuracy = 0.0;
  double final_epsilon = 0.0;
  int best_order = 0;
  /// False for debug runs and for the private-oracle probe arm.
  bool private_guarantee = true;
  std::string method;
  std::string probe_source;
  std::uint64_t seed = 0;
};

struct TrainResult {
  nn::Model model;
  RunRecord record;
  std::optional<kfac::KfacState> state;  // last preconditioner (dpkfc only)
};

/// Full private training loop. The model must already be initialised.
TrainResult train(nn::Model model, const data::Dataset& dataset, const TrainConfig& config);

/// Fraction of argmax-correct predictions on the split.
double evaluate(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels);

}  // namespace dpkfc::train
