#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "dpkfc/matrix.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc::dp {

struct PrivacyParams {
  double clip = 1.0;              // C
  double noise_multiplier = 1.0;  // sigma
  double sample_rate = 0.01;      // q
  double delta = 1e-5;
  /// Debug runs: allows sigma = 0 and C = +inf. Outputs are stamped non-private.
  bool non_private = false;

  void validate() const;
};

struct ClipResult {
  std::vector<Matrix> clipped;
  double norm = 0.0;  // pre-clip global norm nu
};

/// Joint L2 clipping across layers: nu = sqrt(sum_l ||g_l||_F^2), output
/// g / max(1, nu / C). Throws NumericError naming sample_id on non-finite input.
ClipResult global_clip(const std::vector<Matrix>& per_layer, double clip, std::size_t sample_id = 0);

/// Scale factor min(1, C / nu) with the conventions used by global_clip.
double clip_factor(double norm, double clip);

/// (sum + N(0, sigma^2 C^2 I)) / batch_size. Noise is added to the sum, then averaged.
std::vector<Matrix> privatize(const std::vector<Matrix>& sum_clipped, double batch_size, const PrivacyParams& params,
                              Rng& rng);

}  // namespace dpkfc::dp
