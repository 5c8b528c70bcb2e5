#include "dpkfc/dp.hpp"

#include <cmath>
#include <sstream>

namespace dpkfc::dp {

void PrivacyParams::validate() const {
  std::ostringstream err;
  if (!(clip > 0.0)) err << "clip must be > 0; ";
  if (std::isinf(clip) && !non_private) err << "infinite clip requires non_private mode; ";
  if (!(noise_multiplier >= 0.0) || !std::isfinite(noise_multiplier)) err << "noise_multiplier must be finite and >= 0; ";
  if (noise_multiplier == 0.0 && !non_private) err << "noise_multiplier = 0 requires non_private mode; ";
  if (!(sample_rate > 0.0 && sample_rate <= 1.0)) err << "sample_rate must lie in (0, 1]; ";
  if (!(delta > 0.0 && delta < 1.0)) err << "delta must lie in (0, 1); ";
  if (!err.str().empty()) throw ContractError("PrivacyParams: " + err.str());
}

double clip_factor(double norm, double clip) {
  if (std::isinf(clip) || norm <= clip) return 1.0;
  return clip / norm;
}

ClipResult global_clip(const std::vector<Matrix>& per_layer, double clip, std::size_t sample_id) {
  if (!(clip > 0.0)) throw ContractError("global_clip: clip must be > 0");
  double scale = 0.0;
  for (const auto& g : per_layer) {
    for (double v : g.values()) {
      if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "global_clip: non-finite gradient entry in sample " << sample_id;
        throw NumericError(os.str());
      }
      scale = std::max(scale, std::abs(v));
    }
  }
  double sq = 0.0;
  if (scale > 0.0) {
    for (const auto& g : per_layer)
      for (double v : g.values()) {
        const double t = v / scale;
        sq += t * t;
      }
  }
  ClipResult r;
  r.norm = scale * std::sqrt(sq);
  const double f = clip_factor(r.norm, clip);
  r.clipped = per_layer;
  if (f != 1.0)
    for (auto& g : r.clipped) g *= f;
  return r;
}

std::vector<Matrix> privatize(const std::vector<Matrix>& sum_clipped, double batch_size, const PrivacyParams& params,
                              Rng& rng) {
  if (!(batch_size >= 1.0)) throw ContractError("privatize: batch size must be >= 1");
  const double std_dev = params.noise_multiplier * params.clip;
  if (std_dev > 0.0 && !std::isfinite(std_dev)) throw ContractError("privatize: infinite clip with nonzero noise");
  std::vector<Matrix> out = sum_clipped;
  const double inv = 1.0 / batch_size;
  for (auto& m : out) {
    if (std_dev > 0.0)
      for (double& v : m.values()) v += std_dev * rng.normal();
    m *= inv;
  }
  return out;
}

}  // namespace dpkfc::dp
