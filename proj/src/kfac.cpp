#include "dpkfc/kfac.hpp"

#include <algorithm>
#include <exception>
#include <numeric>

#include "dpkfc/kernels.hpp"

namespace dpkfc::kfac {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Matrix damped_gram(const Matrix& rows, double damping) {
  Matrix c(rows.cols(), rows.cols());
  const double scale = rows.rows() ? 1.0 / static_cast<double>(rows.rows()) : 0.0;
  kernels::gram(rows.rows(), rows.cols(), rows.data(), scale, c.data());
  for (std::size_t i = 0; i < c.rows(); ++i) c(i, i) += damping;
  return c;
}

std::vector<std::size_t> sample_rows(std::size_t available, std::size_t wanted, Rng& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(available, wanted);
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(available)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

ProbeBatch rows_from(const Matrix& features, std::span<const std::int64_t> labels, std::size_t wanted,
                     std::size_t num_classes, bool random_labels, Rng& rng) {
  if (features.rows() == 0) throw ContractError("probe source: empty dataset");
  if (labels.size() != features.rows()) throw ContractError("probe source: label count != rows");
  const auto idx = sample_rows(features.rows(), wanted, rng);
  ProbeBatch b{Matrix(idx.size(), features.cols()), {}};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(features.row(idx[i]).begin(), features.row(idx[i]).end(), b.x.row(i).begin());
    std::int64_t y = labels[idx[i]];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) y = std::abs(y) % static_cast<std::int64_t>(num_classes);
    b.y.push_back(y);
  }
  if (random_labels) b.y = gen_labels(idx.size(), num_classes, rng);
  return b;
}

}  // namespace

std::string source_name(const ProbeSource& s) {
  return std::visit(overloaded{
                        [](const SyntheticPink&) { return std::string("synthetic-pink"); },
                        [](const SyntheticToken&) { return std::string("synthetic-token"); },
                        [](const DatasetProbe& d) { return "dataset:" + d.name; },
                        [](const PrivateOracle&) { return std::string("private-oracle"); },
                    },
                    s);
}

bool is_synthetic(const ProbeSource& s) {
  return std::holds_alternative<SyntheticPink>(s) || std::holds_alternative<SyntheticToken>(s);
}

void KfacConfig::validate() const {
  if (probe_batch < 1) throw ContractError("KfacConfig: probe_batch must be >= 1");
  if (damping < 0.0) throw ContractError("KfacConfig: damping must be >= 0");
  if (!(gamma > 0.0)) throw ContractError("KfacConfig: gamma must be > 0");
  if (refresh_period < 1) throw ContractError("KfacConfig: refresh_period must be >= 1");
}

std::vector<FactorPair> estimate_factors_masked(const nn::Model& model, const Matrix& probe_x,
                                                std::span<const std::int64_t> probe_y, double damping,
                                                const std::vector<bool>& skip) {
  auto fw = nn::forward(model, probe_x);
  auto loss = nn::loss_ce(fw.logits, probe_y);
  nn::backward_deltas(model, fw.tape, loss.dlogits);
  std::vector<FactorPair> out(model.num_trainable());
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    if (t < skip.size() && skip[t]) continue;
    out[t].a = damped_gram(fw.tape.records[t].activations, damping);
    out[t].g = damped_gram(fw.tape.records[t].deltas, damping);
  }
  return out;
}

std::vector<FactorPair> estimate_factors(const nn::Model& model, const Matrix& probe_x,
                                         std::span<const std::int64_t> probe_y, double damping) {
  return estimate_factors_masked(model, probe_x, probe_y, damping, {});
}

Matrix kfac_reduce_pool(std::span<const double> acts, std::size_t batch, std::size_t seq, std::size_t dim) {
  if (seq < 1) throw ContractError("kfac_reduce_pool: sequence length must be >= 1");
  if (acts.size() != batch * seq * dim) throw ContractError("kfac_reduce_pool: buffer size != B*T*d");
  return Matrix(batch * seq, dim, std::vector<double>(acts.begin(), acts.end()));
}

KfacLayerState build_preconditioner(const Matrix& a, const Matrix& g, double gamma, std::size_t layer_id) {
  KfacLayerState s;
  s.layer_id = layer_id;
  const SymEig ea = sym_eig(a);
  const SymEig eg = sym_eig(g);
  s.u_a = inv_sqrt_from_eig(ea, gamma);
  s.u_g = inv_sqrt_from_eig(eg, gamma);
  s.eig_a = ea.eigenvalues;
  s.eig_g = eg.eigenvalues;
  return s;
}

Matrix precondition_grad(const Matrix& g, const KfacLayerState& state) {
  if (state.identity) return g;
  if (state.u_g.rows() != g.rows() || state.u_a.rows() != g.cols())
    throw ContractError("precondition_grad: gradient " + shape_str(g) + " vs factors U_G " + shape_str(state.u_g) +
                        ", U_A " + shape_str(state.u_a));
  return matmul(matmul(state.u_g, g), state.u_a);
}

std::pair<std::vector<double>, std::vector<double>> precondition_rank1(std::span<const double> delta,
                                                                       std::span<const double> a,
                                                                       const KfacLayerState& state) {
  if (state.identity) return {{delta.begin(), delta.end()}, {a.begin(), a.end()}};
  if (state.u_g.rows() != delta.size() || state.u_a.rows() != a.size())
    throw ContractError("precondition_rank1: vector sizes do not match factors");
  return {matvec(state.u_g, delta), matvec(state.u_a, a)};
}

KfacState KfacState::identity(const nn::Model& model, std::int64_t creation_step) {
  KfacState s;
  s.creation_step = creation_step;
  s.source = "identity";
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    const auto& info = model.trainable(t);
    KfacLayerState l;
    l.layer_id = t;
    l.u_a = Matrix::identity(info.a_dim());
    l.u_g = Matrix::identity(info.fan_out);
    l.eig_a.assign(info.a_dim(), 1.0);
    l.eig_g.assign(info.fan_out, 1.0);
    s.layers.push_back(std::move(l));
  }
  return s;
}

ProbeBatch make_probe_batch(const nn::Model& model, const KfacConfig& config, Rng& rng) {
  const std::size_t classes = model.num_classes();
  return std::visit(
      overloaded{
          [&](const SyntheticPink& p) {
            PinkNoiseSpec spec = p.spec;
            const auto& in = model.input_shape();
            spec.batch = config.probe_batch;
            spec.channels = in.channels;
            spec.height = in.height;
            spec.width = in.width;
            ProbeBatch b{gen_pink_noise(spec, rng), {}};
            b.y = gen_labels(config.probe_batch, classes, rng);
            return b;
          },
          [&](const SyntheticToken& p) {
            TokenNoiseSpec spec = p.spec;
            spec.batch = config.probe_batch;
            if (spec.vocab != model.input_dim())
              throw ContractError("synthetic-token probes need a model input of vocab size " + std::to_string(spec.vocab));
            const auto tokens = gen_token_noise(spec, rng);
            ProbeBatch b{token_bag_features(tokens, spec.vocab), {}};
            b.y = gen_labels(config.probe_batch, classes, rng);
            return b;
          },
          [&](const DatasetProbe& d) {
            if (!d.features) throw ContractError("dataset probe source has no data");
            return rows_from(*d.features, d.labels, config.probe_batch, classes, d.random_labels, rng);
          },
          [&](const PrivateOracle& o) {
            if (!o.features) throw ContractError("private-oracle probe source has no data");
            return rows_from(*o.features, o.labels, config.probe_batch, classes, false, rng);
          },
      },
      config.source);
}

KfacState state_from_factors(const nn::Model& model, const std::vector<FactorPair>& factors, double gamma,
                             std::int64_t creation_step, std::string source) {
  KfacState state;
  state.creation_step = creation_step;
  state.source = std::move(source);
  state.layers.resize(model.num_trainable());
  // Layers are independent; each task owns its slot.
  const auto n = static_cast<std::int64_t>(model.num_trainable());
  std::vector<std::exception_ptr> errors(model.num_trainable());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t tt = 0; tt < n; ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    try {
      if (factors[t].a.empty()) {
        const auto& info = model.trainable(t);
        KfacLayerState l;
        l.layer_id = t;
        l.identity = true;
        l.u_a = Matrix::identity(info.a_dim());
        l.u_g = Matrix::identity(info.fan_out);
        state.layers[t] = std::move(l);
      } else {
        state.layers[t] = build_preconditioner(factors[t].a, factors[t].g, gamma, t);
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return state;
}

KfacState refresh(const nn::Model& model, const KfacConfig& config, Rng& rng, std::int64_t creation_step) {
  config.validate();
  std::vector<bool> skip(model.num_trainable(), false);
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    const auto& info = model.trainable(t);
    skip[t] = info.a_dim() > config.max_factor_dim || info.fan_out > config.max_factor_dim;
  }
  const ProbeBatch probes = make_probe_batch(model, config, rng);
  const auto factors = estimate_factors_masked(model, probes.x, probes.y, config.damping, skip);
  return state_from_factors(model, factors, config.gamma, creation_step, source_name(config.source));
}

}  // namespace dpkfc::kfac
