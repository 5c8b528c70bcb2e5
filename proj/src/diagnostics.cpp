#include "dpkfc/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "dpkfc/linalg.hpp"

namespace dpkfc::diag {

namespace {

void same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Matrix unit_frobenius(const Matrix& m) {
  const double f = frobenius_norm(m);
  if (!(f > 0.0)) throw NumericError("cannot normalise a zero factor");
  return m * (1.0 / f);
}

}  // namespace

double cosine_sim(const Matrix& cstar, const Matrix& chat) {
  same_shape(cstar, chat, "cosine_sim");
  const double na = frobenius_norm(cstar);
  const double nb = frobenius_norm(chat);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine_sim: similarity undefined for a zero matrix");
  return std::clamp(frobenius_dot(cstar, chat) / (na * nb), -1.0, 1.0);
}

double rel_frob(const Matrix& cstar, const Matrix& chat) {
  same_shape(cstar, chat, "rel_frob");
  const double ref = frobenius_norm(cstar);
  if (!(ref > 0.0)) throw NumericError("rel_frob: reference matrix is zero");
  return frobenius_norm(cstar - chat) / ref;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("cosine: length mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine: undefined for a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double log_spectrum_cosine(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("log_spectrum_cosine: spectra must be non-empty and equal length");
  auto prep = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end(), std::greater<>());
    for (double& x : v) {
      if (!(x > 0.0)) throw ContractError("log_spectrum_cosine: eigenvalues must be positive");
      x = std::log(x);
    }
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x -= mean;
  };
  prep(a);
  prep(b);
  return cosine(a, b);
}

std::vector<double> layer_spectrum(const kfac::KfacLayerState& layer) {
  auto s = kron_spectrum(layer.eig_a, layer.eig_g);
  if (s.size() > kSpectrumCap) s.resize(kSpectrumCap);
  return s;
}

std::vector<double> layer_spectrum(const kfac::FactorPair& factors) {
  auto s = kron_spectrum(sym_eig(factors.a).eigenvalues, sym_eig(factors.g).eigenvalues);
  if (s.size() > kSpectrumCap) s.resize(kSpectrumCap);
  return s;
}

SpectrumReport spectrum_report(const std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>>& sources) {
  SpectrumReport r;
  for (const auto& [name, factors] : sources)
    for (std::size_t l = 0; l < factors.size(); ++l) {
      if (factors[l].a.empty()) continue;
      r.rows.push_back({l, name, layer_spectrum(factors[l])});
    }
  return r;
}

std::pair<std::vector<double>, std::vector<double>> SlqResult::density() const {
  std::pair<std::vector<double>, std::vector<double>> d;
  const double m = static_cast<double>(nodes.size());
  for (std::size_t p = 0; p < nodes.size(); ++p)
    for (std::size_t j = 0; j < nodes[p].size(); ++j) {
      d.first.push_back(nodes[p][j]);
      d.second.push_back(weights[p][j] / m);
    }
  return d;
}

double SlqResult::mean_eigenvalue() const {
  double s = 0.0;
  for (std::size_t p = 0; p < nodes.size(); ++p)
    for (std::size_t j = 0; j < nodes[p].size(); ++j) s += weights[p][j] * nodes[p][j];
  return s / static_cast<double>(nodes.size());
}

SlqResult slq_density(const Hvp& hvp, std::size_t dim, const SlqOptions& options, Rng& rng) {
  if (dim == 0) throw ContractError("slq_density: dimension must be >= 1");
  if (options.probes == 0 || options.lanczos_steps == 0) throw ContractError("slq_density: probes and steps must be >= 1");
  const std::size_t k = std::min(options.lanczos_steps, dim);

  auto apply = [&](std::span<const double> v) {
    auto r = hvp(v);
    if (r.size() != dim) throw ContractError("slq_density: hvp returned a vector of the wrong length");
    return r;
  };

  for (std::size_t c = 0; c < options.symmetry_checks; ++c) {
    const auto u = standard_normal(rng, dim);
    const auto v = standard_normal(rng, dim);
    const auto hu = apply(u);
    const auto hv = apply(v);
    const double lhs = dot(u, hv);
    const double rhs = dot(hu, v);
    const double scale = norm2(u) * norm2(hv) + norm2(hu) * norm2(v);
    if (std::abs(lhs - rhs) > options.symmetry_tolerance * std::max(scale, std::numeric_limits<double>::min())) {
      std::ostringstream os;
      os << "slq_density: operator is not symmetric (<u,Hv> = " << lhs << ", <Hu,v> = " << rhs << ")";
      throw ContractError(os.str());
    }
  }

  SlqResult res;
  for (std::size_t p = 0; p < options.probes; ++p) {
    std::vector<std::vector<double>> basis;
    std::vector<double> alpha, beta;
    std::vector<double> v(dim);
    for (double& x : v) x = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& x : v) x *= inv;
    bool broke = false;
    for (std::size_t j = 0; j < k; ++j) {
      basis.push_back(v);
      auto w = apply(v);
      const double a = dot(w, v);
      alpha.push_back(a);
      // Full reorthogonalisation, two passes.
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& q : basis) {
          const double c = dot(w, q);
          for (std::size_t i = 0; i < dim; ++i) w[i] -= c * q[i];
        }
      if (j + 1 == k) break;
      const double b = norm2(w);
      const double tnorm = std::abs(a) + (beta.empty() ? 0.0 : beta.back());
      if (b <= 1e-10 * std::max(tnorm, 1e-300)) {
        broke = j + 1 < k;
        break;
      }
      beta.push_back(b);
      for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / b;
    }
    const std::size_t m = alpha.size();
    Matrix tri(m, m);
    for (std::size_t i = 0; i < m; ++i) {
      tri(i, i) = alpha[i];
      if (i + 1 < m) tri(i, i + 1) = tri(i + 1, i) = beta[i];
    }
    const auto e = sym_eig(tri);
    std::vector<double> w(m);
    for (std::size_t j = 0; j < m; ++j) w[j] = e.eigenvectors(0, j) * e.eigenvectors(0, j);
    res.nodes.push_back(e.eigenvalues);
    res.weights.push_back(std::move(w));
    res.steps_used.push_back(m);
    if (broke) ++res.breakdowns;
  }
  return res;
}

std::vector<double> hvp_finite_diff(const std::function<std::vector<double>(std::span<const double>)>& grad,
                                    std::span<const double> theta, std::span<const double> v, double h) {
  if (theta.size() != v.size()) throw ContractError("hvp_finite_diff: direction length mismatch");
  if (!(h > 0.0)) throw ContractError("hvp_finite_diff: step must be > 0");
  std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    plus[i] += h * v[i];
    minus[i] -= h * v[i];
  }
  const auto gp = grad(plus);
  const auto gm = grad(minus);
  if (gp.size() != theta.size() || gm.size() != theta.size())
    throw ContractError("hvp_finite_diff: gradient length mismatch");
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
  return out;
}

std::vector<double> flat_gradient(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels) {
  const auto lg = nn::loss_and_gradient(model, x, labels);
  std::vector<double> out;
  out.reserve(model.num_params());
  for (const auto& g : lg.grad) out.insert(out.end(), g.values().begin(), g.values().end());
  return out;
}

std::vector<double> hvp_finite_diff(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                                    std::span<const double> v, double h) {
  nn::Model work = model;
  const auto theta = model.flat_params();
  auto grad = [&](std::span<const double> p) {
    work.set_flat_params(p);
    return flat_gradient(work, x, labels);
  };
  return hvp_finite_diff(grad, theta, v, h);
}

double default_hvp_step(std::span<const double> theta) { return 1e-4 * std::max(1.0, norm2(theta)); }

std::vector<double> layer_snr(const std::vector<Matrix>& clipped_mean, double sigma, double clip, double batch) {
  if (!(sigma > 0.0) || !(clip > 0.0) || !std::isfinite(sigma * clip))
    throw NumericError("layer_snr: SNR undefined without finite, nonzero noise (sigma * C)");
  if (!(batch > 0.0)) throw ContractError("layer_snr: batch must be > 0");
  std::vector<double> out;
  out.reserve(clipped_mean.size());
  for (const auto& g : clipped_mean) {
    const double noise = sigma * clip * std::sqrt(static_cast<double>(g.size())) / batch;
    out.push_back(frobenius_norm(g) / noise);
  }
  return out;
}

double snr_spread(std::span<const double> snr) {
  if (snr.empty()) throw ContractError("snr_spread: empty input");
  const auto [lo, hi] = std::minmax_element(snr.begin(), snr.end());
  if (*lo == 0.0) return std::numeric_limits<double>::infinity();
  return *hi / *lo;
}

std::vector<AlignmentRow> AlignmentReport::select(std::size_t layer, const std::string& factor,
                                                  const std::string& candidate) const {
  std::vector<AlignmentRow> out;
  for (const auto& r : rows)
    if (r.layer == layer && r.factor == factor && r.candidate == candidate) out.push_back(r);
  return out;
}

KronMetrics kron_metrics(const kfac::FactorPair& reference, const kfac::FactorPair& candidate) {
  same_shape(reference.a, candidate.a, "kron_metrics");
  same_shape(reference.g, candidate.g, "kron_metrics");
  // <A1 (x) G1, A2 (x) G2> = <A1, A2> <G1, G2>; |A (x) G| = |A| |G|.
  const double ra = frobenius_norm(reference.a), rg = frobenius_norm(reference.g);
  const double ca = frobenius_norm(candidate.a), cg = frobenius_norm(candidate.g);
  const double ref = ra * rg;
  const double cand = ca * cg;
  if (!(ref > 0.0) || !(cand > 0.0)) throw NumericError("kron_metrics: zero factor");
  const double inner = frobenius_dot(reference.a, candidate.a) * frobenius_dot(reference.g, candidate.g);
  KronMetrics m;
  m.cosine = std::clamp(inner / (ref * cand), -1.0, 1.0);
  const double diff2 = std::max(0.0, ref * ref - 2.0 * inner + cand * cand);
  m.rel_frob = std::sqrt(diff2) / ref;
  return m;
}

void track_alignment(AlignmentReport& report, std::size_t step, const std::string& reference_name,
                     const std::vector<kfac::FactorPair>& reference,
                     const std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>>& candidates) {
  for (const auto& [name, cand] : candidates) {
    if (cand.size() != reference.size()) throw ContractError("track_alignment: layer count mismatch for " + name);
    for (std::size_t l = 0; l < reference.size(); ++l) {
      const auto& r = reference[l];
      const auto& c = cand[l];
      if (r.a.empty() || c.a.empty()) continue;
      auto row = [&](const char* factor, const Matrix& x, const Matrix& y) {
        AlignmentRow a{step, l, factor, reference_name, name, cosine_sim(x, y), rel_frob(x, y), 0.0, 0.0};
        const Matrix nx = unit_frobenius(x), ny = unit_frobenius(y);
        a.cosine_normalized = cosine_sim(nx, ny);
        a.rel_frob_normalized = rel_frob(nx, ny);
        report.rows.push_back(std::move(a));
      };
      row("A", r.a, c.a);
      row("G", r.g, c.g);
      const auto raw = kron_metrics(r, c);
      const kfac::FactorPair rn{unit_frobenius(r.a), unit_frobenius(r.g)};
      const kfac::FactorPair cn{unit_frobenius(c.a), unit_frobenius(c.g)};
      const auto norm = kron_metrics(rn, cn);
      report.rows.push_back({step, l, "combined", reference_name, name, raw.cosine, raw.rel_frob, norm.cosine, norm.rel_frob});
    }
  }
}

}  // namespace dpkfc::diag
