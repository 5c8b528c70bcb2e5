#include "dpkfc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "dpkfc/kernels.hpp"

namespace dpkfc::nn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string shape_text(const Shape& s) {
  std::ostringstream os;
  os << s.channels << "x" << s.height << "x" << s.width;
  return os.str();
}

Matrix with_bias_column(const Matrix& x, bool bias) {
  if (!bias) return x;
  Matrix a(x.rows(), x.cols() + 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto src = x.row(r);
    auto dst = a.row(r);
    std::copy(src.begin(), src.end(), dst.begin());
    dst[x.cols()] = 1.0;
  }
  return a;
}

// Scatter-adds patch-row gradients back onto the input layout (adjoint of im2col).
Matrix col2im(const Matrix& dpatches, std::size_t batch, const Shape& in, std::size_t k, std::size_t stride,
              std::size_t pad) {
  const std::size_t ho = conv_out_size(in.height, k, stride, pad);
  const std::size_t wo = conv_out_size(in.width, k, stride, pad);
  Matrix dx(batch, in.size());
  for (std::size_t b = 0; b < batch; ++b) {
    auto out = dx.row(b);
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto prow = dpatches.row((b * ho + oy) * wo + ox);
        std::size_t col = 0;
        for (std::size_t c = 0; c < in.channels; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx, ++col) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(in.height) ||
                  ix >= static_cast<std::ptrdiff_t>(in.width))
                continue;
              out[(c * in.height + static_cast<std::size_t>(iy)) * in.width + static_cast<std::size_t>(ix)] += prow[col];
            }
          }
        }
      }
    }
  }
  return dx;
}

}  // namespace

std::string describe(const LayerSpec& spec) {
  return std::visit(overloaded{
                        [](const Linear& l) {
                          return "linear " + std::to_string(l.in) + " " + std::to_string(l.out) + " " +
                                 std::to_string(l.bias ? 1 : 0);
                        },
                        [](const Conv2d& c) {
                          return "conv " + std::to_string(c.c_in) + " " + std::to_string(c.c_out) + " " +
                                 std::to_string(c.k) + " " + std::to_string(c.stride) + " " + std::to_string(c.pad) +
                                 " " + std::to_string(c.bias ? 1 : 0);
                        },
                        [](const Activation& a) { return std::string(a.kind == ActivationKind::relu ? "relu" : "tanh"); },
                        [](const Flatten&) { return std::string("flatten"); },
                    },
                    spec);
}

LayerSpec parse_layer(const std::string& text) {
  std::istringstream in(text);
  std::string kind;
  in >> kind;
  auto fail = [&]() -> LayerSpec { throw ContractError("malformed layer description '" + text + "'"); };
  std::string rest;
  if (kind == "linear") {
    Linear l;
    int bias = 1;
    if (!(in >> l.in >> l.out >> bias) || (in >> rest)) return fail();
    l.bias = bias != 0;
    return l;
  }
  if (kind == "conv") {
    Conv2d c;
    int bias = 1;
    if (!(in >> c.c_in >> c.c_out >> c.k >> c.stride >> c.pad >> bias) || (in >> rest)) return fail();
    c.bias = bias != 0;
    return c;
  }
  if (in >> rest) return fail();
  if (kind == "relu") return Activation{ActivationKind::relu};
  if (kind == "tanh") return Activation{ActivationKind::tanh};
  if (kind == "flatten") return Flatten{};
  return fail();
}

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k == 0 || stride == 0) throw ContractError("conv: kernel and stride must be >= 1");
  if (k > in + 2 * pad)
    throw ContractError("conv: kernel " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

Model::Model(Shape input, std::vector<LayerSpec> layers) : input_(input), layers_(std::move(layers)) {
  if (input_.size() == 0) throw ContractError("Model: empty input shape");
  shapes_.push_back(input_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Shape cur = shapes_.back();
    Shape next = cur;
    std::visit(overloaded{
                   [&](const Linear& l) {
                     if (l.in == 0 || l.out == 0) throw ContractError("Model: Linear dimensions must be positive");
                     if (!cur.flat() || cur.size() != l.in)
                       throw ContractError("Model: layer " + std::to_string(i) + " Linear expects flat input of " +
                                           std::to_string(l.in) + ", got " + shape_text(cur));
                     next = Shape{l.out, 1, 1};
                     trainable_.push_back({i, false, l.bias, l.in, l.out, 1});
                   },
                   [&](const Conv2d& c) {
                     if (c.c_in == 0 || c.c_out == 0 || c.k == 0 || c.stride == 0)
                       throw ContractError("Model: Conv2d dimensions must be positive");
                     if (cur.channels != c.c_in)
                       throw ContractError("Model: layer " + std::to_string(i) + " Conv2d expects " +
                                           std::to_string(c.c_in) + " channels, got " + shape_text(cur));
                     const std::size_t ho = conv_out_size(cur.height, c.k, c.stride, c.pad);
                     const std::size_t wo = conv_out_size(cur.width, c.k, c.stride, c.pad);
                     next = Shape{c.c_out, ho, wo};
                     trainable_.push_back({i, true, c.bias, c.c_in * c.k * c.k, c.c_out, ho * wo});
                   },
                   [&](const Activation&) {},
                   [&](const Flatten&) { next = Shape{cur.size(), 1, 1}; },
               },
               layers_[i]);
    shapes_.push_back(next);
  }
  if (!shapes_.back().flat()) throw ContractError("Model: output must be flat, got " + shape_text(shapes_.back()));
  for (const auto& t : trainable_) params_.emplace_back(t.fan_out, t.a_dim());
}

void Model::init(Rng& rng) {
  for (std::size_t t = 0; t < trainable_.size(); ++t) {
    const auto& info = trainable_[t];
    bool relu_next = false;
    if (info.layer_index + 1 < layers_.size()) {
      if (const auto* act = std::get_if<Activation>(&layers_[info.layer_index + 1]))
        relu_next = act->kind == ActivationKind::relu;
    }
    const double std_dev = std::sqrt((relu_next ? 2.0 : 1.0) / static_cast<double>(info.fan_in));
    Matrix& w = params_[t];
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < info.fan_in; ++c) w(r, c) = std_dev * rng.normal();
    if (info.bias)
      for (std::size_t r = 0; r < w.rows(); ++r) w(r, info.fan_in) = 0.0;
  }
}

std::size_t Model::num_params() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<double> Model::flat_params() const {
  std::vector<double> flat;
  flat.reserve(num_params());
  for (const auto& p : params_) flat.insert(flat.end(), p.values().begin(), p.values().end());
  return flat;
}

void Model::set_flat_params(std::span<const double> flat) {
  if (flat.size() != num_params()) throw ContractError("Model::set_flat_params: size mismatch");
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + p.size()),
              p.values().begin());
    off += p.size();
  }
}

Matrix im2col(const Matrix& x, const Shape& in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.cols() != in.size())
    throw ContractError("im2col: row length " + std::to_string(x.cols()) + " != " + shape_text(in));
  const std::size_t ho = conv_out_size(in.height, k, stride, pad);
  const std::size_t wo = conv_out_size(in.width, k, stride, pad);
  const std::size_t batch = x.rows();
  Matrix patches(batch * ho * wo, in.channels * k * k);
  const auto nb = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch > 8)
  for (std::int64_t bb = 0; bb < nb; ++bb) {
    const auto b = static_cast<std::size_t>(bb);
    const auto src = x.row(b);
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        auto prow = patches.row((b * ho + oy) * wo + ox);
        std::size_t col = 0;
        for (std::size_t c = 0; c < in.channels; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx, ++col) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(in.height) ||
                  ix >= static_cast<std::ptrdiff_t>(in.width)) {
                prow[col] = 0.0;
              } else {
                prow[col] = src[(c * in.height + static_cast<std::size_t>(iy)) * in.width + static_cast<std::size_t>(ix)];
              }
            }
          }
        }
      }
    }
  }
  return patches;
}

namespace {

Matrix run_forward(const Model& model, const Matrix& x, Tape* tape) {
  if (x.cols() != model.input_dim())
    throw ContractError("forward: input width " + std::to_string(x.cols()) + " != model input " +
                        std::to_string(model.input_dim()));
  const std::size_t batch = x.rows();
  Matrix cur = x;
  std::size_t t = 0;
  if (tape) {
    tape->batch = batch;
    tape->values.clear();
    tape->records.clear();
    tape->has_backward = false;
  }
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    if (tape) tape->values.push_back(cur);
    const Shape& in = model.shape(i);
    Matrix next = std::visit(
        overloaded{
            [&](const Linear& l) {
              Matrix a = with_bias_column(cur, l.bias);
              Matrix s = matmul_nt(a, model.weights(t));
              if (tape) tape->records.push_back({std::move(a), s, {}});
              ++t;
              return s;
            },
            [&](const Conv2d& c) {
              Matrix p = with_bias_column(im2col(cur, in, c.k, c.stride, c.pad), c.bias);
              Matrix s = matmul_nt(p, model.weights(t));
              const std::size_t locs = model.trainable(t).locations;
              Matrix out(batch, c.c_out * locs);
              for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t l = 0; l < locs; ++l)
                  for (std::size_t ch = 0; ch < c.c_out; ++ch) out(b, ch * locs + l) = s(b * locs + l, ch);
              if (tape) tape->records.push_back({std::move(p), std::move(s), {}});
              ++t;
              return out;
            },
            [&](const Activation& a) {
              Matrix out = cur;
              if (a.kind == ActivationKind::relu) {
                for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
              } else {
                for (double& v : out.values()) v = std::tanh(v);
              }
              return out;
            },
            [&](const Flatten&) { return cur; },
        },
        model.layers()[i]);
    cur = std::move(next);
  }
  if (tape) tape->values.push_back(cur);
  return cur;
}

}  // namespace

ForwardResult forward(const Model& model, const Matrix& x) {
  ForwardResult r;
  r.logits = run_forward(model, x, &r.tape);
  return r;
}

Matrix predict(const Model& model, const Matrix& x) { return run_forward(model, x, nullptr); }

LossResult loss_ce(const Matrix& logits, std::span<const std::int64_t> labels) {
  if (labels.size() != logits.rows()) throw ContractError("loss_ce: label count != batch");
  LossResult r;
  r.dlogits = Matrix(logits.rows(), logits.cols());
  const auto k = static_cast<std::int64_t>(logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw ContractError("loss_ce: label out of range");
    const auto row = logits.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double log_z = m + std::log(z);
    auto d = r.dlogits.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) d[c] = std::exp(row[c] - log_z);
    const auto y = static_cast<std::size_t>(labels[i]);
    d[y] -= 1.0;
    total += log_z - row[y];
  }
  r.mean_loss = logits.rows() ? total / static_cast<double>(logits.rows()) : 0.0;
  return r;
}

void backward_deltas(const Model& model, Tape& tape, const Matrix& dlogits) {
  const std::size_t nlayers = model.layers().size();
  if (tape.values.size() != nlayers + 1 || tape.records.size() != model.num_trainable())
    throw ContractError("backward: missing or mismatched forward tape");
  if (dlogits.rows() != tape.batch || dlogits.cols() != model.num_classes())
    throw ContractError("backward: dlogits shape " + shape_str(dlogits) + " does not match tape");
  const std::size_t batch = tape.batch;
  Matrix grad = dlogits;
  std::size_t t = model.num_trainable();
  for (std::size_t ii = nlayers; ii-- > 0;) {
    const Shape& in = model.shape(ii);
    std::visit(overloaded{
                   [&](const Linear& l) {
                     --t;
                     auto& rec = tape.records[t];
                     rec.deltas = grad;
                     if (ii > 0) {
                       Matrix dx = matmul(grad, model.weights(t));
                       Matrix trimmed(batch, l.in);
                       for (std::size_t b = 0; b < batch; ++b)
                         std::copy_n(dx.row(b).begin(), l.in, trimmed.row(b).begin());
                       grad = std::move(trimmed);
                     }
                   },
                   [&](const Conv2d& c) {
                     --t;
                     auto& rec = tape.records[t];
                     const std::size_t locs = model.trainable(t).locations;
                     Matrix delta(batch * locs, c.c_out);
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t l = 0; l < locs; ++l)
                         for (std::size_t ch = 0; ch < c.c_out; ++ch) delta(b * locs + l, ch) = grad(b, ch * locs + l);
                     if (ii > 0) {
                       Matrix dp = matmul(delta, model.weights(t));
                       const std::size_t kk = c.c_in * c.k * c.k;
                       Matrix dpatch(dp.rows(), kk);
                       for (std::size_t r = 0; r < dp.rows(); ++r) std::copy_n(dp.row(r).begin(), kk, dpatch.row(r).begin());
                       grad = col2im(dpatch, batch, in, c.k, c.stride, c.pad);
                     }
                     rec.deltas = std::move(delta);
                   },
                   [&](const Activation& a) {
                     const Matrix& pre = tape.values[ii];
                     const Matrix& post = tape.values[ii + 1];
                     if (a.kind == ActivationKind::relu) {
                       for (std::size_t k = 0; k < grad.size(); ++k)
                         if (!(pre.data()[k] > 0.0)) grad.data()[k] = 0.0;
                     } else {
                       for (std::size_t k = 0; k < grad.size(); ++k) {
                         const double y = post.data()[k];
                         grad.data()[k] *= 1.0 - y * y;
                       }
                     }
                   },
                   [&](const Flatten&) {},
               },
               model.layers()[ii]);
  }
  tape.has_backward = true;
}

Matrix sample_grad(const Model& model, const Tape& tape, std::size_t t, std::size_t i) {
  if (!tape.has_backward) throw ContractError("sample_grad: tape has no backward pass");
  const auto& info = model.trainable(t);
  const auto& rec = tape.records[t];
  const std::size_t locs = info.locations;
  Matrix g(info.fan_out, info.a_dim());
  kernels::serial::gemm_tn(info.fan_out, info.a_dim(), locs, rec.deltas.data() + i * locs * info.fan_out,
                           rec.activations.data() + i * locs * info.a_dim(), g.data());
  return g;
}

PerSampleGrads backward(const Model& model, Tape& tape, const Matrix& dlogits) {
  backward_deltas(model, tape, dlogits);
  PerSampleGrads out;
  out.per_sample.resize(model.num_trainable());
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    auto& layer = out.per_sample[t];
    layer.resize(tape.batch);
    const auto nb = static_cast<std::int64_t>(tape.batch);
#pragma omp parallel for schedule(static)
    for (std::int64_t ii = 0; ii < nb; ++ii) layer[static_cast<std::size_t>(ii)] = sample_grad(model, tape, t, static_cast<std::size_t>(ii));
  }
  return out;
}

std::vector<Matrix> PerSampleGrads::mean() const {
  std::vector<Matrix> m;
  for (const auto& layer : per_sample) {
    if (layer.empty()) {
      m.emplace_back();
      continue;
    }
    Matrix acc(layer.front().rows(), layer.front().cols());
    for (const auto& g : layer) acc += g;
    acc *= 1.0 / static_cast<double>(layer.size());
    m.push_back(std::move(acc));
  }
  return m;
}

std::vector<Matrix> batch_gradient(const Model& model, const Tape& tape) {
  if (!tape.has_backward) throw ContractError("batch_gradient: tape has no backward pass");
  std::vector<Matrix> out;
  const double inv = tape.batch ? 1.0 / static_cast<double>(tape.batch) : 0.0;
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    Matrix g = matmul_tn(tape.records[t].deltas, tape.records[t].activations);
    g *= inv;
    out.push_back(std::move(g));
  }
  return out;
}

LossAndGrad loss_and_gradient(const Model& model, const Matrix& x, std::span<const std::int64_t> labels) {
  auto fw = forward(model, x);
  auto loss = loss_ce(fw.logits, labels);
  backward_deltas(model, fw.tape, loss.dlogits);
  return {loss.mean_loss, batch_gradient(model, fw.tape)};
}

double accuracy(const Matrix& logits, std::span<const std::int64_t> labels) {
  if (logits.rows() == 0) throw ContractError("accuracy: empty split");
  if (labels.size() != logits.rows()) throw ContractError("accuracy: label count != rows");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto arg = static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (arg == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace dpkfc::nn
