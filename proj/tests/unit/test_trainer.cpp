#include "doctest.h"

#include <cmath>
#include <limits>

#include "dpkfc/trainer.hpp"
#include "helpers.hpp"

using namespace dpkfc;
using namespace dpkfc::train;
using testutil::max_abs_diff;
using testutil::random_matrix;

namespace {

data::Dataset blobs(std::size_t n = 200, std::uint64_t seed = 1) {
  data::BlobsSpec s;
  s.n = n;
  s.dim = 16;
  s.classes = 4;
  s.seed = seed;
  s.shape = nn::Shape{1, 4, 4};
  return data::gen_blobs(s);
}

nn::Model cnn_for(const data::Dataset& d, std::uint64_t seed) {
  nn::Model m(d.shape, {nn::Conv2d{1, 3, 3, 1, 1}, nn::Activation{}, nn::Flatten{}, nn::Linear{48, 6},
                        nn::Activation{}, nn::Linear{6, d.num_classes}});
  Rng rng(seed);
  m.init(rng);
  return m;
}

TrainConfig quick_config(Method method) {
  TrainConfig c;
  c.method = method;
  c.privacy.clip = 1.0;
  c.privacy.noise_multiplier = 1.0;
  c.privacy.delta = 1e-3;
  c.lr = 0.05;
  c.epochs = 2;
  c.expected_batch = 32;
  c.eval_every = 3;
  c.kfac.probe_batch = 16;
  c.kfac.refresh_period = 4;
  c.seed = 9;
  return c;
}

std::vector<std::int64_t> labels_for(std::size_t n, std::size_t k) {
  std::vector<std::int64_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int64_t>(i % k);
  return y;
}

}  // namespace

TEST_CASE("method names") {
  CHECK(parse_method("dpsgd") == Method::dpsgd);
  CHECK(method_name(parse_method("dpkfc")) == "dpkfc");
  CHECK_THROWS_AS(parse_method("adam"), ContractError);
}

TEST_CASE("SGD with momentum by hand") {
  std::vector<Matrix> p{Matrix{{1.0}}};
  SgdMomentum opt(0.1, 0.5);
  opt.step(p, {Matrix{{2.0}}});  // v = 2, p = 0.8
  CHECK(p[0](0, 0) == doctest::Approx(0.8));
  opt.step(p, {Matrix{{2.0}}});  // v = 3, p = 0.5
  CHECK(p[0](0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(opt.step(p, {}), ContractError);
}

TEST_CASE("debug step with no clipping and no noise is plain mini-batch SGD") {
  const auto d = blobs();
  nn::Model m = cnn_for(d, 2);
  const auto split = data::train_split(d);
  Matrix x(20, 16);
  std::vector<std::int64_t> y(20);
  for (std::size_t i = 0; i < 20; ++i) {
    std::copy(split.x.row(i).begin(), split.x.row(i).end(), x.row(i).begin());
    y[i] = split.y[i];
  }
  dp::PrivacyParams p;
  p.clip = std::numeric_limits<double>::infinity();
  p.noise_multiplier = 0.0;
  p.non_private = true;
  const auto grad = nn::loss_and_gradient(m, x, y).grad;
  nn::Model want = m;
  for (std::size_t t = 0; t < want.num_trainable(); ++t) want.weights(t) -= 0.1 * grad[t];
  SgdMomentum opt(0.1, 0.0);
  Rng rng(1);
  const auto g = train_step(m, x, y, nullptr, p, 20.0, rng, opt, 1);
  CHECK(g.clipped == 0);
  for (std::size_t t = 0; t < m.num_trainable(); ++t) CHECK(max_abs_diff(m.weights(t), want.weights(t)) <= 1e-12);
}

TEST_CASE("model path agrees with the generic per-sample mechanism") {
  const auto d = blobs();
  const nn::Model m = cnn_for(d, 3);
  Rng xr(4);
  const Matrix x = random_matrix(12, 16, xr);
  const auto y = labels_for(12, 4);
  kfac::KfacConfig kc;
  kc.probe_batch = 32;
  Rng pr(5);
  const auto state = kfac::refresh(m, kc, pr);

  auto fw = nn::forward(m, x);
  const auto loss = nn::loss_ce(fw.logits, y);
  const auto per = nn::backward(m, fw.tape, loss.dlogits);
  std::vector<std::vector<Matrix>> samples(12);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t t = 0; t < m.num_trainable(); ++t) samples[i].push_back(per.per_sample[t][i]);

  for (const kfac::KfacState* s : {static_cast<const kfac::KfacState*>(nullptr), &state}) {
    for (double noise : {0.0, 1.3}) {
      dp::PrivacyParams p;
      p.clip = 0.05;
      p.noise_multiplier = noise;
      p.non_private = noise == 0.0;
      Rng r1(6), r2(6);
      const auto a = model_private_gradient(m, x, y, s, p, 10.0, r1);
      const auto b = privatize_samples(samples, m.params(), s, p, 10.0, r2);
      CHECK(a.clipped == b.clipped);
      CHECK(a.clipped > 0);
      CHECK(a.batch_size == 12);
      CHECK(a.loss_sum == doctest::Approx(12 * loss.mean_loss));
      for (std::size_t t = 0; t < m.num_trainable(); ++t) {
        CHECK(max_abs_diff(a.update[t], b.update[t]) <= 1e-12);
        CHECK(max_abs_diff(a.clipped_mean[t], b.clipped_mean[t]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("every clipped sample contributes at most C") {
  const auto d = blobs();
  const nn::Model m = cnn_for(d, 7);
  Rng rng(8);
  const Matrix x = random_matrix(1, 16, rng, 50.0);
  const std::vector<std::int64_t> y{2};
  kfac::KfacConfig kc;
  Rng pr(9);
  const auto state = kfac::refresh(m, kc, pr);
  dp::PrivacyParams p;
  p.clip = 0.3;
  p.noise_multiplier = 0.0;
  p.non_private = true;
  Rng nr(10);
  const auto g = model_private_gradient(m, x, y, &state, p, 1.0, nr);
  double sq = 0.0;
  for (const auto& l : g.clipped_mean) sq += frobenius_dot(l, l);
  CHECK(std::sqrt(sq) <= 0.3 + 1e-12);
}

TEST_CASE("an empty batch is pure noise and still counts") {
  const auto d = blobs();
  const nn::Model m = cnn_for(d, 11);
  dp::PrivacyParams p;
  p.clip = 2.0;
  p.noise_multiplier = 0.7;
  Rng a(12), b(12);
  const auto g = model_private_gradient(m, Matrix(0, 16), {}, nullptr, p, 5.0, a);
  CHECK(g.batch_size == 0);
  for (std::size_t t = 0; t < m.num_trainable(); ++t)
    for (double v : g.update[t].values()) CHECK(v == doctest::Approx(0.7 * 2.0 * b.normal() / 5.0).epsilon(1e-14));

  // Tiny sampling rate: most batches are empty, yet the accountant composes every step.
  TrainConfig c = quick_config(Method::dpsgd);
  c.expected_batch = 1;
  c.epochs = 1;
  const auto ds = blobs(40);
  const auto r = train::train(cnn_for(ds, 13), ds, c).record;
  std::size_t empties = 0;
  for (const auto& s : r.steps) empties += s.batch_size == 0 ? 1 : 0;
  CHECK(empties > 0);
  for (const auto& s : r.steps)
    if (s.batch_size == 0) CHECK(std::isnan(s.train_loss));
  CHECK(r.final_epsilon == doctest::Approx(dp::epsilon_for(r.sample_rate, r.sigma, r.total_steps, r.delta).epsilon));
}

TEST_CASE("a preconditioner may only serve later steps") {
  const auto d = blobs();
  nn::Model m = cnn_for(d, 14);
  auto state = kfac::KfacState::identity(m, 5);
  dp::PrivacyParams p;
  SgdMomentum opt(0.1, 0.9);
  Rng r(15);
  const Matrix x = random_matrix(2, 16, r);
  const std::vector<std::int64_t> y{0, 1};
  CHECK_THROWS_AS(train_step(m, x, y, &state, p, 2.0, r, opt, 5), ContractError);
  CHECK_THROWS_AS(train_step(m, x, y, &state, p, 2.0, r, opt, 4), ContractError);
  CHECK_NOTHROW(train_step(m, x, y, &state, p, 2.0, r, opt, 6));
  CHECK_NOTHROW(train_step(m, x, y, nullptr, p, 2.0, r, opt, 1));
}

TEST_CASE("poisson sampling") {
  Rng rng(16);
  CHECK(poisson_sample(100, 0.0, rng).empty());
  CHECK(poisson_sample(100, 1.0, rng).size() == 100);
  double total = 0;
  for (int i = 0; i < 200; ++i) total += static_cast<double>(poisson_sample(1000, 0.05, rng).size());
  CHECK(total / 200 == doctest::Approx(50).epsilon(0.03));
  const auto idx = poisson_sample(1000, 0.3, rng);
  for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i - 1] < idx[i]);
  CHECK_THROWS_AS(poisson_sample(10, 1.5, rng), ContractError);
}

TEST_CASE("training is deterministic per seed") {
  const auto d = blobs();
  const auto c = quick_config(Method::dpkfc);
  const auto a = train::train(cnn_for(d, 17), d, c);
  const auto b = train::train(cnn_for(d, 17), d, c);
  REQUIRE(a.record.steps.size() == b.record.steps.size());
  for (std::size_t i = 0; i < a.record.steps.size(); ++i) {
    const auto& x = a.record.steps[i];
    const auto& y = b.record.steps[i];
    CHECK(x.batch_size == y.batch_size);
    CHECK((x.train_loss == y.train_loss || (std::isnan(x.train_loss) && std::isnan(y.train_loss))));
    CHECK(x.epsilon == y.epsilon);
    CHECK(x.snr == y.snr);
  }
  CHECK(a.model.flat_params() == b.model.flat_params());
  CHECK(a.record.final_accuracy == b.record.final_accuracy);
  auto other = c;
  other.seed = 10;
  CHECK(train::train(cnn_for(d, 17), d, other).model.flat_params() != a.model.flat_params());
}

TEST_CASE("identity factors reproduce the DP-SGD trajectory") {
  const auto d = blobs();
  auto kc = quick_config(Method::dpkfc);
  kc.kfac.max_factor_dim = 0;  // every layer falls back to identity
  const auto sgd = quick_config(Method::dpsgd);
  const auto a = train::train(cnn_for(d, 18), d, kc);
  const auto b = train::train(cnn_for(d, 18), d, sgd);
  CHECK(a.model.flat_params() == b.model.flat_params());
  CHECK(a.record.refreshes > 0);
  CHECK(b.record.refreshes == 0);
}

TEST_CASE("refresh schedule") {
  const auto d = blobs();
  auto c = quick_config(Method::dpkfc);
  c.kfac.refresh_period = 1000;
  const auto once = train::train(cnn_for(d, 19), d, c).record;
  CHECK(once.refreshes == 1);
  c.kfac.refresh_period = 3;
  const auto r = train::train(cnn_for(d, 19), d, c);
  CHECK(r.record.total_steps == 2 * 5);  // 160 training rows, batch 32
  CHECK(r.record.refreshes == 4);        // t = 0, 3, 6, 9
  REQUIRE(r.state.has_value());
  CHECK(r.state->creation_step == 9);
  CHECK(r.record.probe_source == "synthetic-pink");
}

TEST_CASE("run record bookkeeping") {
  const auto d = blobs();
  auto c = quick_config(Method::dpkfc);
  std::vector<std::size_t> hook_steps;
  c.on_eval = [&](const nn::Model&, std::size_t step, StepLog& log) {
    hook_steps.push_back(step);
    log.metrics.emplace_back("probe", 1.0);
  };
  const auto r = train::train(cnn_for(d, 20), d, c).record;
  CHECK(r.private_guarantee);
  CHECK(r.method == "dpkfc");
  CHECK(r.steps.size() == r.total_steps);
  CHECK(hook_steps == std::vector<std::size_t>{3, 6, 9, 10});
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    CHECK(s.step == i + 1);
    if (i > 0) CHECK(s.epsilon >= r.steps[i - 1].epsilon);
    const bool evaluated = s.step % 3 == 0 || s.step == r.total_steps;
    CHECK(std::isnan(s.test_accuracy) == !evaluated);
    CHECK(s.snr.size() == (evaluated ? 3u : 0u));
    CHECK(s.metrics.size() == (evaluated ? 1u : 0u));
  }
  CHECK(r.final_epsilon == r.steps.back().epsilon);
  CHECK(r.final_epsilon == doctest::Approx(dp::epsilon_for(r.sample_rate, r.sigma, r.total_steps, r.delta).epsilon));
  CHECK(r.best_order >= 2);
}

TEST_CASE("sigma calibration for a target epsilon") {
  const auto d = blobs();
  auto c = quick_config(Method::dpsgd);
  c.target_epsilon = 2.0;
  const auto r = train::train(cnn_for(d, 21), d, c).record;
  CHECK(r.final_epsilon <= 2.0);
  CHECK(dp::epsilon_for(r.sample_rate, r.sigma * (1 - 1e-3), r.total_steps, r.delta).epsilon > 2.0);
}

TEST_CASE("oracle and debug runs are stamped without a privacy guarantee") {
  const auto d = blobs();
  auto c = quick_config(Method::dpkfc);
  c.kfac.source = kfac::PrivateOracle{};
  const auto o = train::train(cnn_for(d, 22), d, c).record;
  CHECK_FALSE(o.private_guarantee);
  CHECK(o.probe_source == "private-oracle");

  auto dbg = quick_config(Method::dpsgd);
  dbg.privacy.noise_multiplier = 0.0;
  dbg.privacy.non_private = true;
  const auto r = train::train(cnn_for(d, 22), d, dbg).record;
  CHECK_FALSE(r.private_guarantee);
  CHECK(std::isinf(r.final_epsilon));
  for (const auto& s : r.steps) CHECK(s.snr.empty());
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.target_epsilon = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.kfac.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.method = Method::dpsgd;
  CHECK_NOTHROW(c.validate());
  const auto d = blobs();
  nn::Model wrong(nn::Shape{5, 1, 1}, {nn::Linear{5, 4}});
  CHECK_THROWS_AS(train::train(wrong, d, TrainConfig{}), ContractError);
}

TEST_CASE("evaluate") {
  // Constant logits on a balanced two-class split: ties go to class 0.
  nn::Model flat(nn::Shape{3, 1, 1}, {nn::Linear{3, 2}});
  const Matrix x(10, 3, 1.0);
  CHECK(evaluate(flat, x, labels_for(10, 2)) == 0.5);

  // A model that memorises one-hot inputs.
  nn::Model mem(nn::Shape{4, 1, 1}, {nn::Linear{4, 4}});
  for (std::size_t i = 0; i < 4; ++i) mem.weights(0)(i, i) = 1.0;
  Matrix onehot(1200, 4);
  const auto y = labels_for(1200, 4);
  for (std::size_t i = 0; i < 1200; ++i) onehot(i, static_cast<std::size_t>(y[i])) = 1.0;
  CHECK(evaluate(mem, onehot, y) == 1.0);

  // Untrained model, random 10-class labels.
  Rng rng(23);
  nn::Model m(nn::Shape{8, 1, 1}, {nn::Linear{8, 16}, nn::Activation{}, nn::Linear{16, 10}});
  m.init(rng);
  const Matrix rx = random_matrix(1000, 8, rng);
  std::vector<std::int64_t> ry(1000);
  for (auto& v : ry) v = rng.uniform_int(0, 10);
  CHECK(std::abs(evaluate(m, rx, ry) - 0.1) <= 0.03);
  CHECK_THROWS_AS(evaluate(m, Matrix(0, 8), {}), ContractError);
}
