#include "dpkfc/probes.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dpkfc/fft.hpp"

namespace dpkfc {

void PinkNoiseSpec::validate() const {
  if (batch < 1 || channels < 1 || height < 1 || width < 1)
    throw ContractError("PinkNoiseSpec: batch, channels, height and width must be >= 1");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ContractError("PinkNoiseSpec: alpha must be finite and >= 0");
  if (!(eps0 > 0.0)) throw ContractError("PinkNoiseSpec: eps0 must be > 0");
}

double pink_filter_gain(double fy, double fx, double alpha, double eps0) {
  const double r = std::max(1.0, std::sqrt(fy * fy + fx * fx));
  return 1.0 / (std::pow(r, alpha / 2.0) + eps0);
}

Matrix gen_pink_noise(const PinkNoiseSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t grid = next_power_of_two(std::max(spec.height, spec.width));
  const auto signed_freq = [grid](std::size_t i) {
    return i <= grid / 2 ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(grid);
  };
  std::vector<double> gain(grid * grid);
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c)
      gain[r * grid + c] = pink_filter_gain(signed_freq(r), signed_freq(c), spec.alpha, spec.eps0);

  const std::size_t plane = spec.height * spec.width;
  Matrix out(spec.batch, spec.channels * plane);
  ComplexGrid field(grid, grid);
  for (std::size_t m = 0; m < spec.batch; ++m) {
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      for (auto& v : field.values) v = {rng.normal(), 0.0};
      ComplexGrid spectrum = fft2(field);
      for (std::size_t i = 0; i < spectrum.values.size(); ++i) spectrum.values[i] *= gain[i];
      const ComplexGrid spatial = ifft2(spectrum);
      auto row = out.row(m);
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) row[ch * plane + y * spec.width + x] = spatial.at(y, x).real();
    }
  }

  // Whole-batch normalisation.
  const auto vals = out.values();
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= static_cast<double>(vals.size());
  const double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& v : out.values()) v = (v - mean) * inv_std;
  return out;
}

void TokenNoiseSpec::validate() const {
  if (batch < 1 || max_len < 1 || vocab < 1) throw ContractError("TokenNoiseSpec: batch, max_len, vocab must be >= 1");
  if (min_len < 1 || min_len > max_len) throw ContractError("TokenNoiseSpec: need 1 <= min_len <= max_len");
  if (uses_separator && min_len > max_len - 1)
    throw ContractError("TokenNoiseSpec: a separator needs min_len <= max_len - 1");
  const auto v = static_cast<std::int64_t>(vocab);
  for (auto id : {cls_id, sep_id, pad_id})
    if (id < 0 || id >= v) throw ContractError("TokenNoiseSpec: special token ids must lie in [0, vocab)");
  if (cls_id == sep_id || cls_id == pad_id || sep_id == pad_id)
    throw ContractError("TokenNoiseSpec: special token ids must be distinct");
  if (!std::isfinite(zipf_exponent) || zipf_exponent < 0.0) throw ContractError("TokenNoiseSpec: zipf_exponent must be >= 0");
}

TokenBatch gen_token_noise(const TokenNoiseSpec& spec, Rng& rng) {
  spec.validate();
  TokenBatch out;
  out.batch = spec.batch;
  out.max_len = spec.max_len;
  out.ids.assign(spec.batch * spec.max_len, spec.pad_id);
  out.mask.assign(spec.batch * spec.max_len, 0);
  out.lengths.resize(spec.batch);

  std::vector<double> weights;
  if (spec.zipf_exponent > 0.0) {
    weights.resize(spec.vocab);
    for (std::size_t i = 0; i < spec.vocab; ++i) weights[i] = std::pow(static_cast<double>(i + 1), -spec.zipf_exponent);
  }
  std::discrete_distribution<std::int64_t> zipf(weights.begin(), weights.end());
  const auto draw_token = [&]() -> std::int64_t {
    if (weights.empty()) return rng.uniform_int(0, static_cast<std::int64_t>(spec.vocab));
    return zipf(rng.engine());
  };

  const std::size_t hi = spec.uses_separator ? spec.max_len - 1 : spec.max_len;
  for (std::size_t i = 0; i < spec.batch; ++i) {
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_len), static_cast<std::int64_t>(hi) + 1));
    out.lengths[i] = len;
    std::int64_t* row = out.ids.data() + i * spec.max_len;
    for (std::size_t t = 0; t < len; ++t) row[t] = draw_token();
    row[0] = spec.cls_id;
    if (spec.uses_separator) row[len] = spec.sep_id;
    std::fill(out.mask.begin() + static_cast<std::ptrdiff_t>(i * spec.max_len),
              out.mask.begin() + static_cast<std::ptrdiff_t>(i * spec.max_len + len), 1);
  }
  return out;
}

Matrix token_bag_features(const TokenBatch& tokens, std::size_t vocab) {
  Matrix out(tokens.batch, vocab);
  for (std::size_t i = 0; i < tokens.batch; ++i) {
    const double w = 1.0 / static_cast<double>(std::max<std::size_t>(1, tokens.lengths[i]));
    for (std::size_t t = 0; t < tokens.max_len; ++t) {
      if (!tokens.masked(i, t)) continue;
      const auto id = tokens.id(i, t);
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw ContractError("token_bag_features: token id out of range");
      out(i, static_cast<std::size_t>(id)) += w;
    }
  }
  return out;
}

std::vector<std::int64_t> gen_labels(std::size_t batch, std::size_t num_classes, Rng& rng) {
  if (num_classes < 2) throw ContractError("gen_labels: num_classes must be >= 2");
  std::vector<std::int64_t> y(batch);
  for (auto& v : y) v = rng.uniform_int(0, static_cast<std::int64_t>(num_classes));
  return y;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("fit_loglog_slope: need >= 2 paired points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

RadialSpectrum radial_power_spectrum(const Matrix& images, std::size_t height, std::size_t width) {
  if (images.cols() != height * width) throw ContractError("radial_power_spectrum: row length != height*width");
  const std::size_t nbins = std::min(height, width) / 2;
  if (nbins < 2) throw ContractError("radial_power_spectrum: grid too small");
  std::vector<double> sum(nbins + 1, 0.0);
  std::vector<std::size_t> count(nbins + 1, 0);
  const auto freq = [](std::size_t i, std::size_t n) {
    return i <= n / 2 ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(n);
  };
  ComplexGrid g(height, width);
  for (std::size_t m = 0; m < images.rows(); ++m) {
    const auto row = images.row(m);
    for (std::size_t i = 0; i < row.size(); ++i) g.values[i] = {row[i], 0.0};
    const ComplexGrid spec = fft2(g);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const double fy = freq(r, height);
        const double fx = freq(c, width);
        const auto bin = static_cast<std::size_t>(std::lround(std::sqrt(fy * fy + fx * fx)));
        if (bin < 1 || bin > nbins) continue;
        sum[bin] += std::norm(spec.at(r, c));
        ++count[bin];
      }
    }
  }
  RadialSpectrum out;
  for (std::size_t b = 1; b <= nbins; ++b) {
    if (count[b] == 0) continue;
    out.radius.push_back(static_cast<double>(b));
    out.power.push_back(sum[b] / static_cast<double>(count[b]));
  }
  out.slope = fit_loglog_slope(out.radius, out.power);
  return out;
}

}  // namespace dpkfc
