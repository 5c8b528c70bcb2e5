#include "dpkfc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <sstream>

#include "dpkfc/diagnostics.hpp"

namespace dpkfc::train {

std::string method_name(Method m) { return m == Method::dpsgd ? "dpsgd" : "dpkfc"; }

Method parse_method(const std::string& s) {
  if (s == "dpsgd") return Method::dpsgd;
  if (s == "dpkfc") return Method::dpkfc;
  throw ContractError("unknown method '" + s + "' (expected dpsgd or dpkfc)");
}

void TrainConfig::validate() const {
  std::ostringstream err;
  if (!(lr > 0.0) || !std::isfinite(lr)) err << "lr must be finite and > 0; ";
  if (!(momentum >= 0.0 && momentum < 1.0)) err << "momentum must lie in [0, 1); ";
  if (epochs == 0) err << "epochs must be >= 1; ";
  if (expected_batch == 0) err << "expected_batch must be >= 1; ";
  if (eval_every == 0) err << "eval_every must be >= 1; ";
  if (target_epsilon && !(*target_epsilon > 0.0)) err << "target_epsilon must be > 0; ";
  if (target_epsilon && privacy.non_private) err << "target_epsilon conflicts with non_private; ";
  if (!err.str().empty()) throw ContractError("TrainConfig: " + err.str());
  if (method == Method::dpkfc) kfac.validate();
}

void SgdMomentum::step(std::vector<Matrix>& params, const std::vector<Matrix>& grad) {
  if (grad.size() != params.size()) throw ContractError("SgdMomentum: gradient/parameter count mismatch");
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const auto& p : params) velocity_.emplace_back(p.rows(), p.cols());
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto v = velocity_[l].values();
    auto g = grad[l].values();
    auto p = params[l].values();
    if (g.size() != p.size()) throw ContractError("SgdMomentum: gradient shape mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k];
      p[k] -= lr_ * v[k];
    }
  }
}

namespace {

std::vector<Matrix> zeros_like(const std::vector<Matrix>& shapes) {
  std::vector<Matrix> z;
  z.reserve(shapes.size());
  for (const auto& m : shapes) z.emplace_back(m.rows(), m.cols());
  return z;
}

void check_state(const kfac::KfacState* state, std::size_t layers) {
  if (state && state->layers.size() != layers)
    throw ContractError("preconditioner layer count does not match the gradient layer count");
}

void finish(PrivateGradient& out, std::vector<Matrix> sum, const dp::PrivacyParams& params, double expected_batch,
            Rng& noise_rng) {
  out.clipped_mean = sum;
  for (auto& m : out.clipped_mean) m *= 1.0 / expected_batch;
  out.update = dp::privatize(sum, expected_batch, params, noise_rng);
}

}  // namespace

PrivateGradient privatize_samples(const std::vector<std::vector<Matrix>>& per_sample, const std::vector<Matrix>& shapes,
                                  const kfac::KfacState* state, const dp::PrivacyParams& params,
                                  double expected_batch, Rng& noise_rng) {
  check_state(state, shapes.size());
  PrivateGradient out;
  out.batch_size = per_sample.size();
  std::vector<Matrix> sum = zeros_like(shapes);
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    if (per_sample[i].size() != shapes.size()) throw ContractError("privatize_samples: layer count mismatch");
    std::vector<Matrix> g;
    g.reserve(shapes.size());
    for (std::size_t l = 0; l < shapes.size(); ++l)
      g.push_back(state ? kfac::precondition_grad(per_sample[i][l], state->layers[l]) : per_sample[i][l]);
    const auto c = dp::global_clip(g, params.clip, i);
    if (!std::isinf(params.clip) && c.norm > params.clip) ++out.clipped;
    for (std::size_t l = 0; l < shapes.size(); ++l) sum[l] += c.clipped[l];
  }
  finish(out, std::move(sum), params, expected_batch, noise_rng);
  return out;
}

PrivateGradient model_private_gradient(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                                       const kfac::KfacState* state, const dp::PrivacyParams& params,
                                       double expected_batch, Rng& noise_rng) {
  const std::size_t nt = model.num_trainable();
  check_state(state, nt);
  const std::size_t n = x.rows();
  PrivateGradient out;
  out.batch_size = n;
  std::vector<Matrix> sum = zeros_like(model.params());
  if (n == 0) {
    finish(out, std::move(sum), params, expected_batch, noise_rng);
    return out;
  }

  auto fwd = nn::forward(model, x);
  auto loss = nn::loss_ce(fwd.logits, labels);
  out.loss_sum = loss.mean_loss * static_cast<double>(n);
  nn::backward_deltas(model, fwd.tape, loss.dlogits);

  std::vector<double> sq(n, 0.0);
  // Rank-one factors (linear layers) or dense per-sample gradients (conv layers).
  std::vector<Matrix> left(nt), right(nt);
  std::vector<std::vector<Matrix>> dense(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    const auto& info = model.trainable(t);
    const auto& rec = fwd.tape.records[t];
    if (!info.conv) {
      if (state) {
        left[t] = matmul(rec.deltas, state->layers[t].u_g);  // U_G symmetric
        right[t] = matmul(rec.activations, state->layers[t].u_a);
      } else {
        left[t] = rec.deltas;
        right[t] = rec.activations;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double lu = dot(left[t].row(i), left[t].row(i));
        const double rv = dot(right[t].row(i), right[t].row(i));
        sq[i] += lu * rv;
      }
    } else {
      dense[t].resize(n);
      const auto nn_ = static_cast<std::int64_t>(n);
      std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static)
      for (std::int64_t ii = 0; ii < nn_; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        try {
          Matrix g = nn::sample_grad(model, fwd.tape, t, i);
          dense[t][i] = state ? kfac::precondition_grad(g, state->layers[t]) : std::move(g);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
      for (std::size_t i = 0; i < n; ++i) {
        const double f = frobenius_norm(dense[t][i]);
        sq[i] += f * f;
      }
    }
  }

  std::vector<double> factor(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(sq[i])) {
      std::ostringstream os;
      os << "non-finite per-sample gradient norm in sample " << i;
      throw NumericError(os.str());
    }
    const double norm = std::sqrt(sq[i]);
    factor[i] = dp::clip_factor(norm, params.clip);
    if (!std::isinf(params.clip) && norm > params.clip) ++out.clipped;
  }

  for (std::size_t t = 0; t < nt; ++t) {
    if (!model.trainable(t).conv) {
      Matrix scaled = left[t];
      for (std::size_t i = 0; i < n; ++i)
        for (double& v : scaled.row(i)) v *= factor[i];
      sum[t] = matmul_tn(scaled, right[t]);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        auto s = sum[t].values();
        auto g = dense[t][i].values();
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += factor[i] * g[k];
      }
    }
  }
  finish(out, std::move(sum), params, expected_batch, noise_rng);
  return out;
}

PrivateGradient train_step(nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels,
                           const kfac::KfacState* state, const dp::PrivacyParams& params, double expected_batch,
                           Rng& noise_rng, SgdMomentum& opt, std::int64_t step) {
  if (state && !(state->creation_step < step)) {
    std::ostringstream os;
    os << "train_step: preconditioner created at step " << state->creation_step
       << " may not serve step " << step << " (it must predate the batch)";
    throw ContractError(os.str());
  }
  auto g = model_private_gradient(model, x, labels, state, params, expected_batch, noise_rng);
  opt.step(model.params(), g.update);
  return g;
}

std::vector<std::size_t> poisson_sample(std::size_t n, double q, Rng& rng) {
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("poisson_sample: q must lie in [0, 1]");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (rng.uniform() < q) idx.push_back(i);
  return idx;
}

double evaluate(const nn::Model& model, const Matrix& x, std::span<const std::int64_t> labels) {
  if (x.rows() == 0) throw ContractError("evaluate: empty split");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < x.rows(); start += kChunk) {
    const std::size_t m = std::min(kChunk, x.rows() - start);
    Matrix chunk(m, x.cols());
    std::copy(x.row(start).begin(), x.row(start).begin() + static_cast<std::ptrdiff_t>(m * x.cols()),
              chunk.values().begin());
    const double acc = nn::accuracy(nn::predict(model, chunk), labels.subspan(start, m));
    correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(m)));
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

TrainResult train(nn::Model model, const data::Dataset& dataset, const TrainConfig& config) {
  config.validate();
  dataset.validate();
  if (dataset.train_idx.empty()) throw ContractError("train: empty training split");
  if (model.input_dim() != dataset.shape.size()) throw ContractError("train: model input does not match dataset");

  const data::Split tr = data::train_split(dataset);
  const data::Split te = data::test_split(dataset);
  const std::size_t n = tr.y.size();
  const double batch = static_cast<double>(config.expected_batch);
  const double q = std::min(1.0, batch / static_cast<double>(n));
  const std::size_t steps_per_epoch = (n + config.expected_batch - 1) / config.expected_batch;
  const std::size_t total = config.epochs * steps_per_epoch;

  dp::PrivacyParams privacy = config.privacy;
  privacy.sample_rate = q;
  if (config.target_epsilon)
    privacy.noise_multiplier = dp::calibrate_sigma(*config.target_epsilon, privacy.delta, q, total);
  privacy.validate();

  // The oracle arm needs the private rows; bind them here so callers can pass a bare marker.
  kfac::KfacConfig kcfg = config.kfac;
  if (auto* o = std::get_if<kfac::PrivateOracle>(&kcfg.source); o && o->features == nullptr) {
    o->features = &tr.x;
    o->labels = tr.y;
  }

  RunRecord rec;
  rec.sigma = privacy.noise_multiplier;
  rec.sample_rate = q;
  rec.delta = privacy.delta;
  rec.total_steps = total;
  rec.method = method_name(config.method);
  rec.probe_source = config.method == Method::dpkfc ? kfac::source_name(kcfg.source) : "none";
  rec.seed = config.seed;
  rec.private_guarantee =
      !privacy.non_private && !(config.method == Method::dpkfc && std::holds_alternative<kfac::PrivateOracle>(kcfg.source));

  const Rng root(config.seed);
  Rng batch_rng = root.split(streams::kBatch);
  const Rng noise_root = root.split(streams::kNoise);
  const Rng probe_root = root.split(streams::kProbe);

  SgdMomentum opt(config.lr, config.momentum);
  dp::AccountantState accountant;
  kfac::KfacState state;
  bool have_state = false;

  for (std::size_t t = 0; t < total; ++t) {
    const auto step = static_cast<std::int64_t>(t + 1);
    if (config.method == Method::dpkfc && t % kcfg.refresh_period == 0) {
      Rng probe_rng = probe_root.split(t);
      state = kfac::refresh(model, kcfg, probe_rng, static_cast<std::int64_t>(t));
      have_state = true;
      ++rec.refreshes;
    }
    const auto idx = poisson_sample(n, q, batch_rng);
    Matrix bx(idx.size(), tr.x.cols());
    std::vector<std::int64_t> by(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(tr.x.row(idx[i]).begin(), tr.x.row(idx[i]).end(), bx.row(i).begin());
      by[i] = tr.y[idx[i]];
    }
    Rng noise_rng = noise_root.split(t);
    const auto g = train_step(model, bx, by, have_state ? &state : nullptr, privacy, batch, noise_rng, opt, step);
    if (!privacy.non_private) accountant.step(q, privacy.noise_multiplier);

    StepLog log;
    log.step = t + 1;
    log.batch_size = idx.size();
    if (!idx.empty()) log.train_loss = g.loss_sum / static_cast<double>(idx.size());
    log.epsilon = privacy.non_private ? std::numeric_limits<double>::infinity()
                                      : dp::epsilon_of(accountant, privacy.delta).epsilon;
    const bool evaluated = (t + 1) % config.eval_every == 0 || t + 1 == total;
    if (evaluated) {
      if (!te.y.empty()) log.test_accuracy = evaluate(model, te.x, te.y);
      if (config.log_snr && privacy.noise_multiplier > 0.0 && std::isfinite(privacy.clip))
        log.snr = diag::layer_snr(g.clipped_mean, privacy.noise_multiplier, privacy.clip, batch);
      if (config.on_eval) config.on_eval(model, t + 1, log);
    }
    rec.steps.push_back(std::move(log));
  }

  rec.final_accuracy = te.y.empty() ? std::numeric_limits<double>::quiet_NaN() : evaluate(model, te.x, te.y);
  if (privacy.non_private) {
    rec.final_epsilon = std::numeric_limits<double>::infinity();
  } else {
    const auto e = dp::epsilon_of(accountant, privacy.delta);
    rec.final_epsilon = e.epsilon;
    rec.best_order = e.order;
  }
  TrainResult out{std::move(model), std::move(rec), std::nullopt};
  if (have_state) out.state = std::move(state);
  return out;
}

}  // namespace dpkfc::train
