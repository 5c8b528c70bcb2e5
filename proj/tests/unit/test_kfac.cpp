#include "doctest.h"

#include <cmath>

#include "dpkfc/data.hpp"
#include "dpkfc/diagnostics.hpp"
#include "dpkfc/kfac.hpp"
#include "dpkfc/linalg.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dpkfc;
using namespace dpkfc::kfac;
using testutil::cholesky;
using testutil::max_abs_diff;
using testutil::random_matrix;
using testutil::random_spd;

namespace {

nn::Model small_mlp(Rng& rng, std::size_t in = 6, std::size_t classes = 3) {
  nn::Model m(nn::Shape{in, 1, 1}, {nn::Linear{in, 8}, nn::Activation{}, nn::Linear{8, classes}});
  m.init(rng);
  return m;
}

}  // namespace

TEST_CASE("estimate_factors on a single linear probe") {
  const Matrix x{{1, 2}};
  const std::vector<std::int64_t> y{0};
  nn::Model two(nn::Shape{2, 1, 1}, {nn::Linear{2, 2, false}});
  const auto f = estimate_factors(two, x, y, 0.0);
  CHECK(f[0].a == Matrix{{1, 2}, {2, 4}});
  const auto fd = estimate_factors(two, x, y, 0.1);
  CHECK(max_abs_diff(fd[0].a, Matrix{{1.1, 2}, {2, 4.1}}) < 1e-15);
  CHECK(max_abs_diff(fd[0].g - f[0].g, 0.1 * Matrix::identity(2)) < 1e-15);
}

TEST_CASE("estimate_factors matches explicit averages") {
  Rng rng(1);
  nn::Model m(nn::Shape{1, 6, 6}, {nn::Conv2d{1, 3, 3, 1, 0}, nn::Activation{}, nn::Flatten{}, nn::Linear{48, 4}});
  m.init(rng);
  const Matrix x = random_matrix(5, 36, rng);
  const std::vector<std::int64_t> y{0, 1, 2, 3, 0};
  const auto f = estimate_factors(m, x, y, 0.01);
  REQUIRE(f.size() == 2);
  CHECK(f[0].a.rows() == 10);  // 3x3 patch plus the bias column
  CHECK(f[0].g.rows() == 3);
  CHECK(f[1].a.rows() == 49);

  auto fw = nn::forward(m, x);
  const auto loss = nn::loss_ce(fw.logits, y);
  nn::backward_deltas(m, fw.tape, loss.dlogits);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto& rec = fw.tape.records[t];
    const double n = static_cast<double>(rec.activations.rows());
    Matrix a = testutil::naive_matmul(rec.activations.transposed(), rec.activations) * (1.0 / n);
    Matrix g = testutil::naive_matmul(rec.deltas.transposed(), rec.deltas) * (1.0 / n);
    a += 0.01 * Matrix::identity(a.rows());
    g += 0.01 * Matrix::identity(g.rows());
    CHECK(max_abs_diff(a, f[t].a) < 1e-12);
    CHECK(max_abs_diff(g, f[t].g) < 1e-12);
    CHECK(asymmetry(f[t].a) == 0.0);
  }
  // Conv factors average over probes times locations.
  CHECK(fw.tape.records[0].activations.rows() == 5 * 16);
}

TEST_CASE("kfac_reduce_pool layout and covariance") {
  const std::vector<double> one{1, 2, 3};
  CHECK(kfac_reduce_pool(one, 1, 1, 3) == Matrix{{1, 2, 3}});
  std::vector<double> acts(2 * 3 * 4);
  for (std::size_t i = 0; i < acts.size(); ++i) acts[i] = static_cast<double>(i);
  const Matrix p = kfac_reduce_pool(acts, 2, 3, 4);
  CHECK(p.rows() == 6);
  CHECK(p(4, 1) == acts[(1 * 3 + 1) * 4 + 1]);  // b = 1, t = 1
  CHECK_THROWS_AS(kfac_reduce_pool(acts, 2, 0, 4), ContractError);
  CHECK_THROWS_AS(kfac_reduce_pool(acts, 2, 3, 5), ContractError);

  Rng rng(2);
  const std::size_t b = 7, t = 5, d = 4;
  std::vector<double> x(b * t * d);
  for (double& v : x) v = rng.normal();
  const Matrix pooled = kfac_reduce_pool(x, b, t, d);
  const Matrix cov = matmul_tn(pooled, pooled) * (1.0 / static_cast<double>(b * t));
  Matrix avg(d, d);
  for (std::size_t pos = 0; pos < t; ++pos) {
    Matrix rows(b, d);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < d; ++k) rows(i, k) = x[(i * t + pos) * d + k];
    avg += matmul_tn(rows, rows) * (1.0 / static_cast<double>(b));
  }
  avg *= 1.0 / static_cast<double>(t);
  CHECK(max_abs_diff(cov, avg) < 1e-12);
}

TEST_CASE("build_preconditioner examples") {
  const auto id = build_preconditioner(Matrix::identity(3), Matrix::identity(2), 0.0);
  CHECK(max_abs_diff(id.u_a, Matrix::identity(3)) < 1e-15);
  CHECK(max_abs_diff(id.u_g, Matrix::identity(2)) < 1e-15);
  const auto d = build_preconditioner(Matrix{{4, 0}, {0, 1}}, Matrix::identity(1), 0.0);
  CHECK(max_abs_diff(d.u_a, Matrix{{0.5, 0}, {0, 1}}) < 1e-15);
  CHECK(d.eig_a == std::vector<double>{4, 1});
}

TEST_CASE("eigenvalue bounds after unit spectral normalisation") {
  Rng rng(3);
  const double gamma = 1e-2;
  const double lo = 1.0 / std::sqrt(1.0 + gamma), hi = 1.0 / std::sqrt(gamma);
  for (int rep = 0; rep < 20; ++rep) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const auto k = static_cast<std::size_t>(rng.uniform_int(1, 2 * n + 1));
    const Matrix x = random_matrix(k, n, rng);
    Matrix a = matmul_tn(x, x);  // possibly singular
    a *= 1.0 / spectral_norm_sym(a);
    Matrix g = random_spd(4, rng, 0.0);
    g *= 1.0 / spectral_norm_sym(g);
    const auto s = build_preconditioner(a, g, gamma);
    CHECK(asymmetry(s.u_a) == 0.0);
    for (const Matrix* u : {&s.u_a, &s.u_g})
      for (double l : sym_eig(*u).eigenvalues) {
        CHECK(l >= lo * (1 - 1e-9));
        CHECK(l <= hi * (1 + 1e-9));
      }
    // Damping floor: no inversion divides by less than gamma.
    for (double l : s.eig_a) CHECK(l + gamma >= gamma - 1e-12);
  }
}

TEST_CASE("precondition_grad: identity, rank one and Kronecker identity") {
  Rng rng(4);
  const Matrix g = random_matrix(2, 3, rng);
  KfacLayerState ident;
  ident.u_a = Matrix::identity(3);
  ident.u_g = Matrix::identity(2);
  CHECK(max_abs_diff(precondition_grad(g, ident), g) < 1e-15);

  for (std::size_t rows = 1; rows <= 4; ++rows)
    for (std::size_t cols = 1; cols <= 4; ++cols) {
      const auto s = build_preconditioner(random_spd(cols, rng), random_spd(rows, rng), 0.05);
      const Matrix gm = random_matrix(rows, cols, rng);
      const Matrix pg = precondition_grad(gm, s);
      const auto want = matvec(kron(s.u_a, s.u_g), vec_colmajor(gm));
      const auto got = vec_colmajor(pg);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-10);

      std::vector<double> delta(rows), act(cols);
      for (double& v : delta) v = rng.normal();
      for (double& v : act) v = rng.normal();
      Matrix outer(rows, cols);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) outer(r, c) = delta[r] * act[c];
      const auto [ud, ua] = precondition_rank1(delta, act, s);
      const Matrix route = precondition_grad(outer, s);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) CHECK(std::abs(route(r, c) - ud[r] * ua[c]) < 1e-12);
    }
  KfacLayerState bad = build_preconditioner(Matrix::identity(2), Matrix::identity(2), 0.1);
  CHECK_THROWS_AS(precondition_grad(Matrix(3, 2), bad), ContractError);
  const std::vector<double> v3(3);
  CHECK_THROWS_AS(precondition_rank1(v3, v3, bad), ContractError);
}

TEST_CASE("isotropy of preconditioned gradients with exact factors") {
  Rng rng(5);
  const std::size_t na = 4, ng = 3, d = na * ng;
  const Matrix a = random_spd(na, rng, 0.2), g = random_spd(ng, rng, 0.2);
  const Matrix la = cholesky(a), lg = cholesky(g);
  const auto s = build_preconditioner(a, g, 0.0);
  const std::size_t n = 100000;
  Matrix cov(d, d);
  double sq = 0.0;
  Matrix z(ng, na);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : z.values()) v = rng.normal();
    const Matrix sample = matmul(matmul(lg, z), la.transposed());  // vec ~ N(0, A (x) G)
    const auto v = vec_colmajor(precondition_grad(sample, s));
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) cov(r, c) += v[r] * v[c];
    sq += dot(v, v);
  }
  cov *= 1.0 / static_cast<double>(n);
  CHECK(frobenius_norm(cov - Matrix::identity(d)) / std::sqrt(double(d)) <= 0.05);
  CHECK(std::abs(sq / static_cast<double>(n) - double(d)) / double(d) <= 0.02);
}

TEST_CASE("refresh is deterministic and covers every layer") {
  Rng init(6);
  const nn::Model m = small_mlp(init);
  KfacConfig cfg;
  cfg.probe_batch = 64;
  Rng a(7), b(7);
  const auto sa = refresh(m, cfg, a, 3);
  const auto sb = refresh(m, cfg, b, 3);
  REQUIRE(sa.layers.size() == m.num_trainable());
  CHECK(sa.creation_step == 3);
  CHECK(sa.source == "synthetic-pink");
  for (std::size_t t = 0; t < sa.layers.size(); ++t) {
    CHECK(sa.layers[t].layer_id == t);
    CHECK(sa.layers[t].u_a == sb.layers[t].u_a);
    CHECK(sa.layers[t].u_g == sb.layers[t].u_g);
  }
}

TEST_CASE("synthetic refresh reads no files") {
  Rng init(8);
  const nn::Model m = small_mlp(init);
  const auto before = data::file_reads();
  KfacConfig cfg;
  Rng r(9);
  (void)refresh(m, cfg, r);
  KfacConfig tok;
  nn::Model bag(nn::Shape{50, 1, 1}, {nn::Linear{50, 4}});
  TokenNoiseSpec spec;
  spec.vocab = 50;
  spec.max_len = 8;
  tok.source = SyntheticToken{spec};
  (void)refresh(bag, tok, r);
  CHECK(data::file_reads() == before);
  CHECK(is_synthetic(cfg.source));
  CHECK(is_synthetic(tok.source));
}

TEST_CASE("private-oracle refresh equals estimate_factors on the same batch") {
  Rng init(10);
  const nn::Model m = small_mlp(init);
  const Matrix x = random_matrix(20, 6, init);
  std::vector<std::int64_t> y(20);
  for (std::size_t i = 0; i < 20; ++i) y[i] = static_cast<std::int64_t>(i % 3);
  KfacConfig cfg;
  cfg.probe_batch = 20;  // the whole fixed batch
  cfg.source = PrivateOracle{&x, y};
  CHECK_FALSE(is_synthetic(cfg.source));
  Rng r(11);
  const auto state = refresh(m, cfg, r);
  // Row order does not change the averages.
  const auto f = estimate_factors(m, x, y, cfg.damping);
  for (std::size_t t = 0; t < f.size(); ++t) {
    const auto direct = build_preconditioner(f[t].a, f[t].g, cfg.gamma, t);
    CHECK(max_abs_diff(direct.u_a, state.layers[t].u_a) < 1e-10);
    CHECK(max_abs_diff(direct.u_g, state.layers[t].u_g) < 1e-10);
  }
  CHECK(state.source == "private-oracle");
}

TEST_CASE("synthetic and oracle first-layer A factors are positively aligned") {
  Rng init(12);
  const nn::Model m = small_mlp(init);
  const Matrix x = random_matrix(64, 6, init);
  std::vector<std::int64_t> y(64);
  for (std::size_t i = 0; i < 64; ++i) y[i] = static_cast<std::int64_t>(i % 3);
  KfacConfig cfg;
  Rng r(13);
  const auto probes = make_probe_batch(m, cfg, r);
  const auto syn = estimate_factors(m, probes.x, probes.y, cfg.damping);
  const auto orc = estimate_factors(m, x, y, cfg.damping);
  const double c = diag::cosine_sim(orc[0].a, syn[0].a);
  CHECK(std::isfinite(c));
  CHECK(c > 0.0);
}

TEST_CASE("probe batches are shaped for the model") {
  Rng init(14);
  nn::Model cnn(nn::Shape{2, 5, 6}, {nn::Conv2d{2, 3, 3, 1, 1}, nn::Flatten{}, nn::Linear{90, 7}});
  cnn.init(init);
  KfacConfig cfg;
  cfg.probe_batch = 9;
  Rng r(15);
  const auto b = make_probe_batch(cnn, cfg, r);
  CHECK(b.x.rows() == 9);
  CHECK(b.x.cols() == 60);
  for (auto v : b.y) {
    CHECK(v >= 0);
    CHECK(v < 7);
  }
  KfacConfig tok;
  tok.source = SyntheticToken{};
  CHECK_THROWS_AS(make_probe_batch(cnn, tok, r), ContractError);
  KfacConfig empty;
  empty.source = DatasetProbe{};
  CHECK_THROWS_AS(make_probe_batch(cnn, empty, r), ContractError);
}

TEST_CASE("oversized layers stay unpreconditioned") {
  Rng init(16);
  const nn::Model m = small_mlp(init);
  KfacConfig cfg;
  cfg.max_factor_dim = 8;  // first layer A is 7x7, second layer A is 9x9
  Rng r(17);
  const auto s = refresh(m, cfg, r);
  CHECK_FALSE(s.layers[0].identity);
  CHECK(s.layers[1].identity);
  Rng rng(18);
  const Matrix g = random_matrix(3, 9, rng);
  CHECK(precondition_grad(g, s.layers[1]) == g);
}

TEST_CASE("config validation") {
  KfacConfig c;
  c.gamma = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.refresh_period = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.probe_batch = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.damping = -1;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("identity state") {
  Rng init(19);
  const nn::Model m = small_mlp(init);
  const auto s = KfacState::identity(m, 4);
  CHECK(s.creation_step == 4);
  REQUIRE(s.layers.size() == 2);
  CHECK(s.layers[1].u_a == Matrix::identity(9));
  CHECK(s.layers[1].u_g == Matrix::identity(3));
}
