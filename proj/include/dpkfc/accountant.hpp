#pragma once

#include <cstddef>
#include <vector>

namespace dpkfc::dp {

/// Integer orders 2..64.
std::vector<int> default_orders();

/// Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer order
/// alpha >= 2: log(sum_i C(a,i) q^i (1-q)^(a-i) exp((i^2 - i) / (2 sigma^2))) / (a-1),
/// evaluated in log space. q = 1 reduces to alpha / (2 sigma^2).
double rdp_step(double q, double sigma, int alpha);

/// Accumulated RDP per order.
struct AccountantState {
  std::vector<int> orders = default_orders();
  std::vector<double> rdp = std::vector<double>(orders.size(), 0.0);
  std::size_t steps = 0;

  /// Composes `count` steps of the sampled Gaussian mechanism.
  void step(double q, double sigma, std::size_t count = 1);
};

struct EpsilonResult {
  double epsilon = 0.0;
  int order = 0;
};

/// epsilon = min over orders of rdp(a) + log(1/delta) / (a - 1); ties go to the smaller order.
EpsilonResult epsilon_of(const AccountantState& state, double delta);

/// Epsilon after `steps` compositions at (q, sigma).
EpsilonResult epsilon_for(double q, double sigma, std::size_t steps, double delta,
                          const std::vector<int>& orders = default_orders());

/// Smallest sigma in [0.3, 1000] (to a 1e-3 relative bracket) whose epsilon stays
/// at or below target. The returned sigma satisfies epsilon(sigma) <= target and
/// epsilon(sigma * (1 - 1e-3)) > target. Throws std::range_error if the target is
/// unreachable inside the bracket.
double calibrate_sigma(double target_epsilon, double delta, double q, std::size_t steps,
                       const std::vector<int>& orders = default_orders());

}  // namespace dpkfc::dp
