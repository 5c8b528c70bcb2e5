#include "dpkfc/accountant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "dpkfc/matrix.hpp"

namespace dpkfc::dp {

namespace {

double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

std::vector<int> default_orders() {
  std::vector<int> o;
  for (int a = 2; a <= 64; ++a) o.push_back(a);
  return o;
}

double rdp_step(double q, double sigma, int alpha) {
  if (!(sigma > 0.0)) throw ContractError("rdp_step: sigma = 0 means unbounded privacy loss");
  if (!(q > 0.0 && q <= 1.0)) throw ContractError("rdp_step: q must lie in (0, 1]");
  if (alpha < 2) throw ContractError("rdp_step: order must be >= 2");
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  if (q == 1.0) return alpha * inv2s2;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  double log_a = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= alpha; ++i) {
    const double term = log_binomial(alpha, i) + i * log_q + (alpha - i) * log_1mq +
                        (static_cast<double>(i) * i - i) * inv2s2;
    log_a = log_add(log_a, term);
  }
  return std::max(0.0, log_a / (alpha - 1));
}

void AccountantState::step(double q, double sigma, std::size_t count) {
  if (rdp.size() != orders.size()) rdp.assign(orders.size(), 0.0);
  for (std::size_t k = 0; k < orders.size(); ++k) rdp[k] += static_cast<double>(count) * rdp_step(q, sigma, orders[k]);
  steps += count;
}

EpsilonResult epsilon_of(const AccountantState& state, double delta) {
  if (state.orders.empty() || state.rdp.size() != state.orders.size())
    throw ContractError("epsilon_of: accountant has no orders");
  if (!(delta > 0.0 && delta < 1.0)) throw ContractError("epsilon_of: delta must lie in (0, 1)");
  EpsilonResult best{std::numeric_limits<double>::infinity(), 0};
  const double log_inv_delta = std::log(1.0 / delta);
  for (std::size_t k = 0; k < state.orders.size(); ++k) {
    const double eps = state.rdp[k] + log_inv_delta / (state.orders[k] - 1);
    if (eps < best.epsilon || (eps == best.epsilon && state.orders[k] < best.order)) best = {eps, state.orders[k]};
  }
  return best;
}

EpsilonResult epsilon_for(double q, double sigma, std::size_t steps, double delta, const std::vector<int>& orders) {
  AccountantState s;
  s.orders = orders;
  s.rdp.assign(orders.size(), 0.0);
  s.step(q, sigma, steps);
  return epsilon_of(s, delta);
}

double calibrate_sigma(double target_epsilon, double delta, double q, std::size_t steps, const std::vector<int>& orders) {
  if (!(target_epsilon > 0.0)) throw ContractError("calibrate_sigma: target epsilon must be > 0");
  constexpr double kLo = 0.3;
  constexpr double kHi = 1000.0;
  const auto eps = [&](double s) { return epsilon_for(q, s, steps, delta, orders).epsilon; };
  if (eps(kHi) > target_epsilon) {
    std::ostringstream os;
    os << "calibrate_sigma: epsilon " << target_epsilon << " unreachable even at sigma = " << kHi;
    throw std::range_error(os.str());
  }
  if (eps(kLo) <= target_epsilon) {
    std::ostringstream os;
    os << "calibrate_sigma: epsilon " << target_epsilon << " already met at sigma = " << kLo
       << "; no bracket inside [0.3, 1000]";
    throw std::range_error(os.str());
  }
  double lo = kLo;  // eps(lo) > target
  double hi = kHi;  // eps(hi) <= target
  while (lo < hi * (1.0 - 1e-3)) {
    const double mid = std::sqrt(lo * hi);
    if (eps(mid) <= target_epsilon) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace dpkfc::dp
