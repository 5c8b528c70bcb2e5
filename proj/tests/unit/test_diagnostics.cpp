#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dpkfc/diagnostics.hpp"
#include "dpkfc/linalg.hpp"
#include "helpers.hpp"

using namespace dpkfc;
using namespace dpkfc::diag;
using testutil::random_matrix;
using testutil::random_spd;

namespace {

Matrix diag_matrix(const std::vector<double>& d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Hvp dense_op(const Matrix& h) {
  return [h](std::span<const double> v) {
    std::vector<double> out(h.rows(), 0.0);
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < h.cols(); ++j) out[i] += h(i, j) * v[j];
    return out;
  };
}

double vec_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

nn::Model tanh_mlp(Rng& rng) {
  nn::Model m(nn::Shape{4, 1, 1}, {nn::Linear{4, 6}, nn::Activation{nn::ActivationKind::tanh}, nn::Linear{6, 3}});
  m.init(rng);
  for (auto& p : m.params())
    for (double& v : p.values()) v += 0.1 * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("cosine_sim and rel_frob") {
  const Matrix a = diag_matrix({1, 0});
  const Matrix b = diag_matrix({0, 1});
  CHECK(cosine_sim(a, a) == doctest::Approx(1.0));
  CHECK(cosine_sim(a, b) == doctest::Approx(0.0));
  CHECK(cosine_sim(a, a * -2.0) == doctest::Approx(-1.0));
  CHECK(rel_frob(a, a) == 0.0);
  CHECK(rel_frob(a, b) == doctest::Approx(std::sqrt(2.0)));
  CHECK(rel_frob(a, a * 3.0) == doctest::Approx(2.0));
  const Matrix z(2, 2);
  CHECK_THROWS_AS(cosine_sim(z, a), NumericError);
  CHECK_THROWS_AS(cosine_sim(a, z), NumericError);
  CHECK_THROWS_AS(rel_frob(z, a), NumericError);
  CHECK(rel_frob(a, z) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine_sim(a, Matrix(3, 3)), ContractError);
}

TEST_CASE("log spectrum cosine") {
  CHECK(log_spectrum_cosine({1, 10, 100}, {100, 10, 1}) == doctest::Approx(1.0));
  // Scaling shifts every log by the same amount; centring removes it.
  CHECK(log_spectrum_cosine({1, 2, 4, 8}, {5, 10, 20, 40}) == doctest::Approx(1.0));
  // Squaring doubles the centred logs.
  CHECK(log_spectrum_cosine({1, 3, 9}, {1, 9, 81}) == doctest::Approx(1.0));
  // Inputs are sorted first: centred logs (1,0,-1) against (2,2,-4)/3.
  const double e = std::exp(1.0);
  CHECK(log_spectrum_cosine({e * e, e, 1}, {e * e, 1, e * e}) == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(log_spectrum_cosine({1, 2}, {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(log_spectrum_cosine({}, {}), ContractError);
  CHECK_THROWS_AS(log_spectrum_cosine({1, 0}, {1, 2}), ContractError);
}

TEST_CASE("layer spectrum is the Kronecker product of factor spectra") {
  kfac::KfacLayerState s;
  s.eig_a = {2, 1};
  s.eig_g = {4, 3};
  CHECK(layer_spectrum(s) == std::vector<double>{8, 6, 4, 3});

  kfac::FactorPair id{Matrix::identity(3), Matrix::identity(2)};
  CHECK(layer_spectrum(id) == std::vector<double>(6, 1.0));

  Rng rng(1);
  kfac::FactorPair f{random_spd(4, rng), random_spd(3, rng)};
  auto expect = sym_eig(kron(f.a, f.g)).eigenvalues;
  std::sort(expect.begin(), expect.end(), std::greater<>());
  const auto got = layer_spectrum(f);
  REQUIRE(got.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  for (std::size_t i = 1; i < 12; ++i) CHECK(got[i - 1] >= got[i]);
}

TEST_CASE("spectrum report skips empty layers") {
  Rng rng(2);
  std::vector<kfac::FactorPair> f(2);
  f[1] = {random_spd(2, rng), random_spd(2, rng)};
  const auto r = spectrum_report({{"oracle", f}, {"synthetic", f}});
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].layer == 1);
  CHECK(r.rows[0].source == "oracle");
  CHECK(r.rows[1].source == "synthetic");
  CHECK(r.rows[0].eigenvalues.size() == 4);
}

TEST_CASE("SLQ recovers a diagonal spectrum exactly at full depth") {
  const std::size_t d = 12;
  std::vector<double> ev(d);
  std::iota(ev.begin(), ev.end(), 1.0);
  SlqOptions opt;
  opt.probes = 3;
  opt.lanczos_steps = d;
  Rng rng(3);
  const auto r = slq_density(dense_op(diag_matrix(ev)), d, opt, rng);
  REQUIRE(r.nodes.size() == 3);
  CHECK(r.breakdowns == 0);
  for (std::size_t p = 0; p < 3; ++p) {
    auto nodes = r.nodes[p];
    std::sort(nodes.begin(), nodes.end());
    REQUIRE(nodes.size() == d);
    for (std::size_t j = 0; j < d; ++j) CHECK(nodes[j] == doctest::Approx(ev[j]).epsilon(1e-9));
    for (double w : r.weights[p]) CHECK(w == doctest::Approx(1.0 / d).epsilon(1e-8));
  }
  CHECK(r.mean_eigenvalue() == doctest::Approx(6.5).epsilon(1e-10));
}

TEST_CASE("SLQ trace estimate and weights on a dense SPD matrix") {
  const std::size_t d = 50;
  Rng rng(4);
  const Matrix h = random_spd(d, rng);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += h(i, i);
  SlqOptions opt;
  opt.probes = 30;
  opt.lanczos_steps = 20;
  const auto r = slq_density(dense_op(h), d, opt, rng);
  CHECK(std::abs(r.mean_eigenvalue() * d - trace) <= 0.05 * trace);
  const double lo = sym_eig(h).eigenvalues.back();
  for (std::size_t p = 0; p < r.nodes.size(); ++p) {
    double s = 0.0;
    for (double w : r.weights[p]) s += w;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-10));
    for (double x : r.nodes[p]) CHECK(x >= lo - 1e-8);
  }
  const auto [nodes, weights] = r.density();
  CHECK(nodes.size() == 30 * 20);
  CHECK(std::accumulate(weights.begin(), weights.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("SLQ rejects a non-symmetric operator") {
  Matrix h = Matrix::identity(6);
  h(0, 5) = 3.0;
  SlqOptions opt;
  Rng rng(5);
  CHECK_THROWS_AS(slq_density(dense_op(h), 6, opt, rng), ContractError);
  CHECK_THROWS_AS(slq_density(dense_op(h), 0, opt, rng), ContractError);
  auto wrong_len = [](std::span<const double>) { return std::vector<double>(2, 0.0); };
  CHECK_THROWS_AS(slq_density(wrong_len, 6, opt, rng), ContractError);
}

TEST_CASE("SLQ stops on an invariant subspace") {
  SlqOptions opt;
  opt.probes = 4;
  opt.lanczos_steps = 5;
  Rng rng(6);
  const auto r = slq_density(dense_op(Matrix::identity(10) * 2.5), 10, opt, rng);
  CHECK(r.breakdowns == 4);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(r.steps_used[p] == 1);
    CHECK(r.nodes[p][0] == doctest::Approx(2.5));
    CHECK(r.weights[p][0] == doctest::Approx(1.0));
  }
}

TEST_CASE("finite-difference HVP on a quadratic is exact") {
  Rng rng(7);
  const Matrix m = random_spd(8, rng);
  auto grad = [&](std::span<const double> th) { return dense_op(m)(th); };
  std::vector<double> theta(8), v(8);
  for (auto& x : theta) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  const auto hv = hvp_finite_diff(grad, theta, v, 1e-3);
  CHECK(vec_diff(hv, dense_op(m)(v)) <= 1e-8);
  std::vector<double> neg(v);
  for (auto& x : neg) x = -x;
  const auto hn = hvp_finite_diff(grad, theta, neg, 1e-3);
  for (std::size_t i = 0; i < 8; ++i) CHECK(hn[i] == doctest::Approx(-hv[i]));
  CHECK_THROWS_AS(hvp_finite_diff(grad, theta, std::vector<double>(3), 1e-3), ContractError);
  CHECK_THROWS_AS(hvp_finite_diff(grad, theta, v, 0.0), ContractError);
}

TEST_CASE("finite-difference HVP on a network converges at second order") {
  Rng rng(8);
  const nn::Model model = tanh_mlp(rng);
  const Matrix x = random_matrix(6, 4, rng);
  const std::vector<std::int64_t> y{0, 1, 2, 0, 1, 2};
  std::vector<double> v(model.num_params());
  for (auto& e : v) e = rng.normal();
  const auto h1 = hvp_finite_diff(model, x, y, v, 0.08);
  const auto h2 = hvp_finite_diff(model, x, y, v, 0.04);
  const auto h3 = hvp_finite_diff(model, x, y, v, 0.02);
  const double ratio = vec_diff(h1, h2) / vec_diff(h2, h3);
  INFO("ratio " << ratio);
  CHECK(ratio == doctest::Approx(4.0).epsilon(0.1));

  // v^T H w == w^T H v up to the O(h^2) truncation of each side.
  std::vector<double> w(v.size());
  for (auto& e : w) e = rng.normal();
  const double hstep = default_hvp_step(model.flat_params());
  const auto hv = hvp_finite_diff(model, x, y, v, hstep);
  const auto hw = hvp_finite_diff(model, x, y, w, hstep);
  const double a = dot(w, hv), b = dot(v, hw);
  CHECK(std::abs(a - b) <= 1e-5 * (std::abs(a) + std::abs(b)));
}

TEST_CASE("default hvp step") {
  CHECK(default_hvp_step(std::vector<double>{0.1, 0.1}) == doctest::Approx(1e-4));
  CHECK(default_hvp_step(std::vector<double>{30, 40}) == doctest::Approx(5e-3));
}

TEST_CASE("layer SNR") {
  const double sigma = 2.0, clip = 0.5, batch = 10.0;
  // A constant gradient c over d entries has norm c sqrt(d); SNR = c B / (sigma C).
  Matrix unit(3, 4);
  for (double& v : unit.values()) v = sigma * clip / batch;
  const Matrix zero(2, 2);
  const auto s = layer_snr({unit, zero}, sigma, clip, batch);
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == 0.0);
  CHECK(layer_snr({unit}, sigma, clip, 2 * batch)[0] == doctest::Approx(2.0));
  CHECK(layer_snr({unit}, 2 * sigma, clip, batch)[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(layer_snr({unit}, 0.0, clip, batch), NumericError);
  CHECK_THROWS_AS(layer_snr({unit}, sigma, 0.0, batch), NumericError);
  CHECK_THROWS_AS(layer_snr({unit}, sigma, clip, 0.0), ContractError);
  CHECK(snr_spread(std::vector<double>{1, 4, 2}) == 4.0);
  CHECK(std::isinf(snr_spread(s)));
  CHECK_THROWS_AS(snr_spread(std::vector<double>{}), ContractError);
}

TEST_CASE("kron metrics match the explicit Kronecker product") {
  Rng rng(9);
  for (int rep = 0; rep < 5; ++rep) {
    kfac::FactorPair r{random_spd(3, rng), random_spd(4, rng)};
    kfac::FactorPair c{random_spd(3, rng), random_spd(4, rng)};
    const auto m = kron_metrics(r, c);
    const Matrix kr = kron(r.a, r.g), kc = kron(c.a, c.g);
    CHECK(m.cosine == doctest::Approx(cosine_sim(kr, kc)).epsilon(1e-10));
    CHECK(m.rel_frob == doctest::Approx(rel_frob(kr, kc)).epsilon(1e-9));
  }
}

TEST_CASE("alignment tracking") {
  Rng rng(10);
  std::vector<kfac::FactorPair> ref(2);
  ref[0] = {random_spd(3, rng), random_spd(2, rng)};
  std::vector<kfac::FactorPair> same = ref, doubled = ref, other = ref;
  doubled[0].a = ref[0].a * 2.0;
  doubled[0].g = ref[0].g * 2.0;
  other[0] = {random_spd(3, rng), random_spd(2, rng)};

  AlignmentReport rep;
  track_alignment(rep, 7, "oracle", ref, {{"same", same}, {"doubled", doubled}, {"other", other}});
  CHECK(rep.rows.size() == 9);  // layer 1 is empty

  const auto s = rep.select(0, "A", "same");
  REQUIRE(s.size() == 1);
  CHECK(s[0].step == 7);
  CHECK(s[0].reference == "oracle");
  CHECK(s[0].cosine == doctest::Approx(1.0));
  CHECK(s[0].rel_frob == 0.0);

  const auto d = rep.select(0, "G", "doubled");
  REQUIRE(d.size() == 1);
  CHECK(d[0].cosine == doctest::Approx(1.0));
  CHECK(d[0].rel_frob == doctest::Approx(1.0));
  CHECK(d[0].rel_frob_normalized == doctest::Approx(0.0).epsilon(1e-7));
  const auto dc = rep.select(0, "combined", "doubled");
  REQUIRE(dc.size() == 1);
  CHECK(dc[0].rel_frob == doctest::Approx(3.0));

  const double ca = rep.select(0, "A", "other")[0].cosine;
  const double cg = rep.select(0, "G", "other")[0].cosine;
  const auto comb = rep.select(0, "combined", "other");
  REQUIRE(comb.size() == 1);
  CHECK(comb[0].cosine == doctest::Approx(ca * cg).epsilon(1e-12));
  CHECK(comb[0].cosine_normalized == doctest::Approx(ca * cg).epsilon(1e-12));

  std::vector<kfac::FactorPair> short_list(1);
  CHECK_THROWS_AS(track_alignment(rep, 8, "oracle", ref, {{"bad", short_list}}), ContractError);
}
