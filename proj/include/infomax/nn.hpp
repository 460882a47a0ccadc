#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::nn {

// Per-forward context. Layers register their parameters through param(),
// which watches each tensor on the tape at most once per pass, so a layer
// used twice in one graph accumulates both gradient contributions on a
// single node. With a null tape the pass is a plain (gradient-free) forward.
template <typename T>
struct Pass {
  Tape<T>* tape = nullptr;
  bool train = false;
  bool update_stats = true;  // batchnorm running statistics
  Rng* rng = nullptr;        // dropout masks

  Tensor<T> param(Tensor<T>& p) {
    if (!tape) return p;
    auto it = index_.find(&p);
    if (it != index_.end()) return watched_[it->second];
    Tensor<T> w = tape->watch(p);
    index_.emplace(&p, watched_.size());
    watched_.push_back(w);
    return w;
  }

  // Gradient of a registered parameter after tape->backward(); null when the
  // parameter was never used in this pass.
  const std::vector<T>* grad_of(const Tensor<T>& p) {
    auto it = index_.find(&p);
    if (it == index_.end()) return nullptr;
    return &tape->grad(watched_[it->second].node);
  }

  std::int64_t node_of(const Tensor<T>& p) const {
    auto it = index_.find(&p);
    return it == index_.end() ? -1 : watched_[it->second].node;
  }

 private:
  std::unordered_map<const Tensor<T>*, std::size_t> index_;
  std::vector<Tensor<T>> watched_;
};

// ---------------------------------------------------------------------------
// Initialization.

enum class Init { He, Glorot, Uniform };

namespace detail {
template <typename T>
void fans(const Tensor<T>& proto, const Shape& shape, std::int64_t& fan_in, std::int64_t& fan_out) {
  (void)proto;
  if (shape.empty()) throw std::invalid_argument("init_params: zero fan-in");
  std::int64_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  if (shape.size() >= 2) {
    fan_in = shape[1] * receptive;
    fan_out = shape[0] * receptive;
  } else {
    fan_in = shape[0];
    fan_out = shape[0];
  }
  if (fan_in <= 0) throw std::invalid_argument("init_params: zero fan-in");
}
}  // namespace detail

// he: normal(0, sqrt(2/fan_in)); glorot: uniform(+-sqrt(6/(fan_in+fan_out)));
// uniform(a, b). Deterministic given the rng.
template <typename T>
Tensor<T> init_params(Shape shape, Init scheme, Rng& rng, double a = 0.0, double b = 0.0) {
  std::int64_t fan_in = 0, fan_out = 0;
  if (scheme != Init::Uniform) detail::fans(Tensor<T>{}, shape, fan_in, fan_out);
  switch (scheme) {
    case Init::He:
      return Tensor<T>::normal(std::move(shape), rng, 0.0,
                               std::sqrt(2.0 / static_cast<double>(fan_in)));
    case Init::Glorot: {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      return Tensor<T>::uniform(std::move(shape), rng, -limit, limit);
    }
    case Init::Uniform:
      return Tensor<T>::uniform(std::move(shape), rng, a, b);
  }
  throw std::logic_error("init_params: unknown scheme");
}

// ---------------------------------------------------------------------------
// Layers.

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]

  static Linear make(std::int64_t in, std::int64_t out, Init scheme, Rng& rng) {
    Linear l;
    l.weight = init_params<T>({out, in}, scheme, rng);
    l.bias = Tensor<T>::zeros({out});
    return l;
  }

  static Linear make_zero(std::int64_t in, std::int64_t out) {
    Linear l;
    l.weight = Tensor<T>::zeros({out, in});
    l.bias = Tensor<T>::zeros({out});
    return l;
  }

  Tensor<T> forward(Pass<T>& ps, const Tensor<T>& x) {
    if (x.rank() != 2 || x.shape[1] != weight.shape[1])
      throw std::invalid_argument("Linear: input " + shape_str(x.shape) + " does not match weight " +
                                  shape_str(weight.shape));
    return add_bias(matmul(x, transpose2d(ps.param(weight))), ps.param(bias));
  }

  void collect(std::vector<Tensor<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
Tensor<T> linear_forward(Linear<T>& layer, Pass<T>& ps, const Tensor<T>& x) {
  return layer.forward(ps, x);
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> kernel;  // [Cout x Cin x kh x kw]
  Tensor<T> bias;    // [Cout]
  std::int64_t stride = 1;
  Pad pad = Pad::Valid;
  bool use_bias = true;  // off for layers feeding straight into batchnorm

  static Conv2dLayer make(std::int64_t cin, std::int64_t cout, std::int64_t ksize,
                          std::int64_t stride, Pad pad, Init scheme, Rng& rng,
                          bool use_bias = true) {
    Conv2dLayer l;
    l.kernel = init_params<T>({cout, cin, ksize, ksize}, scheme, rng);
    l.bias = Tensor<T>::zeros({cout});
    l.stride = stride;
    l.pad = pad;
    l.use_bias = use_bias;
    return l;
  }

  Tensor<T> forward(Pass<T>& ps, const Tensor<T>& x) {
    auto out = conv2d(x, ps.param(kernel), stride, pad);
    return use_bias ? add_channel_bias(out, ps.param(bias)) : out;
  }

  void collect(std::vector<Tensor<T>*>& out) {
    out.push_back(&kernel);
    if (use_bias) out.push_back(&bias);
  }
};

// Batch normalization over the channel axis for [B x C] or [B x C x H x W]
// inputs. Train mode normalizes with biased batch variance and, when the pass
// allows, folds the batch statistics into the running buffers (unbiased
// variance, torch-style momentum: new = (1 - m) * old + m * batch). Eval mode
// is an affine map using the running statistics only.
template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm make(std::int64_t channels) {
    BatchNorm bn;
    bn.gamma = Tensor<T>::full({channels}, T(1));
    bn.beta = Tensor<T>::zeros({channels});
    bn.running_mean = Tensor<T>::zeros({channels});
    bn.running_var = Tensor<T>::full({channels}, T(1));
    return bn;
  }

  Tensor<T> forward(Pass<T>& ps, const Tensor<T>& x) {
    if (x.rank() != 2 && x.rank() != 4)
      throw std::invalid_argument("BatchNorm: expects [B x C] or [B x C x H x W]");
    const auto channels = gamma.shape[0];
    if (x.shape[1] != channels) throw std::invalid_argument("BatchNorm: channel count mismatch");
    const auto batch = x.shape[0];
    const auto spatial = x.rank() == 4 ? x.shape[2] * x.shape[3] : 1;
    const auto per_channel = batch * spatial;
    if (ps.train && batch < 2)
      throw std::invalid_argument("BatchNorm: train mode requires batch size >= 2");

    Tensor<T> g = ps.param(gamma);
    Tensor<T> b = ps.param(beta);

    std::vector<T> mean_c(static_cast<std::size_t>(channels), T(0));
    std::vector<T> inv_std(static_cast<std::size_t>(channels), T(0));
    const auto& xv = *x.data;
    auto element = [&](std::int64_t n, std::int64_t c, std::int64_t s) -> T {
      return xv[static_cast<std::size_t>((n * channels + c) * spatial + s)];
    };

    if (ps.train) {
      for (std::int64_t c = 0; c < channels; ++c) {
        T m = T(0);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t s = 0; s < spatial; ++s) m += element(n, c, s);
        m /= static_cast<T>(per_channel);
        T var = T(0);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t s = 0; s < spatial; ++s) {
            const T d = element(n, c, s) - m;
            var += d * d;
          }
        var /= static_cast<T>(per_channel);
        mean_c[static_cast<std::size_t>(c)] = m;
        inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + static_cast<T>(eps));
        if (ps.update_stats) {
          const T unbiased =
              per_channel > 1 ? var * static_cast<T>(per_channel) / static_cast<T>(per_channel - 1)
                              : var;
          auto& rm = (*running_mean.data)[static_cast<std::size_t>(c)];
          auto& rv = (*running_var.data)[static_cast<std::size_t>(c)];
          rm = static_cast<T>((1.0 - momentum) * rm + momentum * m);
          rv = static_cast<T>((1.0 - momentum) * rv + momentum * unbiased);
        }
      }
    } else {
      for (std::int64_t c = 0; c < channels; ++c) {
        mean_c[static_cast<std::size_t>(c)] = (*running_mean.data)[static_cast<std::size_t>(c)];
        inv_std[static_cast<std::size_t>(c)] =
            T(1) / std::sqrt((*running_var.data)[static_cast<std::size_t>(c)] + static_cast<T>(eps));
      }
    }

    // Forward values plus saved normalized activations for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.size()));
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    for (std::int64_t n = 0; n < batch; ++n)
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t s = 0; s < spatial; ++s) {
          const auto i = static_cast<std::size_t>((n * channels + c) * spatial + s);
          const T h = (xv[i] - mean_c[static_cast<std::size_t>(c)]) *
                      inv_std[static_cast<std::size_t>(c)];
          (*xhat)[i] = h;
          out[i] = (*g.data)[static_cast<std::size_t>(c)] * h +
                   (*b.data)[static_cast<std::size_t>(c)];
        }
    detail_check(out);

    Tensor<T> result = Tensor<T>::from(x.shape, std::move(out));
    if (!ps.tape) return result;

    const bool train = ps.train;
    auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_std));
    auto gd = g.data;
    const auto xn = x.node, gn = g.node, bn_node = b.node;
    result.tape = ps.tape;
    result.node = ps.tape->record(
        "batchnorm", x.size(), {xn, gn, bn_node},
        [=](Tape<T>& tape, const std::vector<T>& gr) {
          // dgamma_c = sum g*xhat, dbeta_c = sum g; train-mode dx goes through
          // the batch statistics, eval-mode dx is the plain affine gradient.
          if (gn >= 0) {
            auto& dg = tape.adjoint_buffer(gn);
            for (std::int64_t n = 0; n < batch; ++n)
              for (std::int64_t c = 0; c < channels; ++c)
                for (std::int64_t s = 0; s < spatial; ++s) {
                  const auto i = static_cast<std::size_t>((n * channels + c) * spatial + s);
                  dg[static_cast<std::size_t>(c)] += gr[i] * (*xhat)[i];
                }
          }
          if (bn_node >= 0) {
            auto& db = tape.adjoint_buffer(bn_node);
            for (std::int64_t n = 0; n < batch; ++n)
              for (std::int64_t c = 0; c < channels; ++c)
                for (std::int64_t s = 0; s < spatial; ++s)
                  db[static_cast<std::size_t>(c)] +=
                      gr[static_cast<std::size_t>((n * channels + c) * spatial + s)];
          }
          if (xn < 0) return;
          auto& dx = tape.adjoint_buffer(xn);
          if (!train) {
            for (std::int64_t n = 0; n < batch; ++n)
              for (std::int64_t c = 0; c < channels; ++c)
                for (std::int64_t s = 0; s < spatial; ++s) {
                  const auto i = static_cast<std::size_t>((n * channels + c) * spatial + s);
                  dx[i] += gr[i] * (*gd)[static_cast<std::size_t>(c)] *
                           (*saved_inv)[static_cast<std::size_t>(c)];
                }
            return;
          }
          for (std::int64_t c = 0; c < channels; ++c) {
            T gsum = T(0), gxsum = T(0);
            for (std::int64_t n = 0; n < batch; ++n)
              for (std::int64_t s = 0; s < spatial; ++s) {
                const auto i = static_cast<std::size_t>((n * channels + c) * spatial + s);
                gsum += gr[i];
                gxsum += gr[i] * (*xhat)[i];
              }
            const T gmean = gsum / static_cast<T>(per_channel);
            const T gxmean = gxsum / static_cast<T>(per_channel);
            const T scale = (*gd)[static_cast<std::size_t>(c)] *
                            (*saved_inv)[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < batch; ++n)
              for (std::int64_t s = 0; s < spatial; ++s) {
                const auto i = static_cast<std::size_t>((n * channels + c) * spatial + s);
                dx[i] += scale * (gr[i] - gmean - (*xhat)[i] * gxmean);
              }
          }
        });
    return result;
  }

  void collect(std::vector<Tensor<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

 private:
  static void detail_check(const std::vector<T>& v) { infomax::detail::check_finite("batchnorm", v); }
};

// Inverted dropout: scales kept activations by 1/(1-rate) at train time; the
// eval path is the identity.
template <typename T>
Tensor<T> dropout(Pass<T>& ps, const Tensor<T>& x, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!ps.train || rate == 0.0) return x;
  if (!ps.rng) throw std::invalid_argument("dropout: pass has no rng");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.size()));
  for (auto& m : *mask) m = ps.rng->uniform() < rate ? T(0) : keep_scale;
  std::vector<T> out(static_cast<std::size_t>(x.size()));
  for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] =
      (*x.data)[static_cast<std::size_t>(i)] * (*mask)[static_cast<std::size_t>(i)];
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto xn = x.node;
    return [xn, mask](Tape<T>& tape, const std::vector<T>& g) {
      if (xn < 0) return;
      auto& dx = tape.adjoint_buffer(xn);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (*mask)[i];
    };
  };
  return infomax::detail::make_op_result<T>("dropout", x.shape, std::move(out), {&x},
                                            make_backward);
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron used for critics, discriminators and probes:
// Linear (+BatchNorm) + ReLU (+Dropout) on hidden layers, linear output.

template <typename T>
struct MlpConfig {
  std::vector<std::int64_t> widths;  // in, hidden..., out
  bool hidden_batchnorm = false;
  double dropout = 0.0;
  Init hidden_init = Init::He;
  Init out_init = Init::Glorot;
  bool zero_init_output = false;
};

template <typename T>
struct Mlp {
  MlpConfig<T> cfg;
  std::vector<Linear<T>> layers;
  std::vector<BatchNorm<T>> norms;

  static Mlp make(MlpConfig<T> cfg, Rng& rng) {
    if (cfg.widths.size() < 2) throw std::invalid_argument("Mlp: needs at least in/out widths");
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < cfg.widths.size(); ++i) {
      const bool last = i + 2 == cfg.widths.size();
      if (last && cfg.zero_init_output)
        mlp.layers.push_back(Linear<T>::make_zero(cfg.widths[i], cfg.widths[i + 1]));
      else
        mlp.layers.push_back(Linear<T>::make(cfg.widths[i], cfg.widths[i + 1],
                                             last ? cfg.out_init : cfg.hidden_init, rng));
      if (!last && cfg.hidden_batchnorm) mlp.norms.push_back(BatchNorm<T>::make(cfg.widths[i + 1]));
    }
    mlp.cfg = std::move(cfg);
    return mlp;
  }

  Tensor<T> forward(Pass<T>& ps, const Tensor<T>& x) {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(ps, h);
      if (i + 1 < layers.size()) {
        if (cfg.hidden_batchnorm) h = norms[i].forward(ps, h);
        h = relu(h);
        if (cfg.dropout > 0.0) h = dropout(ps, h, cfg.dropout);
      }
    }
    return h;
  }

  void collect(std::vector<Tensor<T>*>& out) {
    for (auto& l : layers) l.collect(out);
    for (auto& n : norms) n.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Adam with optional exponentially decaying learning rate.

struct Schedule {
  enum class Kind { Constant, ExpDecay };
  Kind kind = Kind::Constant;
  double rate = 1.0;
  std::int64_t interval = 1;

  static Schedule constant() { return {}; }
  static Schedule exp_decay(double rate, std::int64_t interval) {
    if (interval <= 0) throw std::invalid_argument("Schedule: interval must be positive");
    return {Kind::ExpDecay, rate, interval};
  }

  // Effective rate for update step t (t = 1 for the first update):
  // lr0 * rate^floor(t / interval).
  double at(double lr0, std::int64_t t) const {
    if (kind == Kind::Constant) return lr0;
    return lr0 * std::pow(rate, static_cast<double>(t / interval));
  }
};

struct AdamConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Schedule schedule;
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::vector<Tensor<T>*> params) : cfg_(cfg), params_(std::move(params)) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i]->size()), T(0));
      v_[i].assign(static_cast<std::size_t>(params_[i]->size()), T(0));
    }
  }

  // One update using gradients recorded on the pass. Parameters that did not
  // participate in the graph get zero gradient. A non-finite gradient aborts
  // before any parameter is touched.
  void step(Pass<T>& ps) {
    std::vector<const std::vector<T>*> grads(params_.size(), nullptr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      grads[i] = ps.grad_of(*params_[i]);
      if (!grads[i]) continue;
      for (const auto g : *grads[i])
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("Adam: non-finite gradient for parameter " + std::to_string(i) +
                                   " at step " + std::to_string(step_ + 1));
    }
    ++step_;
    const double lr = cfg_.schedule.at(cfg_.lr0, step_);
    last_lr_ = lr;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = *params_[i]->data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = grads[i] ? static_cast<double>((*grads[i])[j]) : 0.0;
        const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * g;
        const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  std::int64_t step_count() const { return step_; }
  double last_lr() const { return last_lr_; }
  double next_lr() const { return cfg_.schedule.at(cfg_.lr0, step_ + 1); }
  const std::vector<Tensor<T>*>& params() const { return params_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t step_ = 0;
  double last_lr_ = 0.0;
};

template <typename T>
void adam_step(Adam<T>& opt, Pass<T>& ps) {
  opt.step(ps);
}

}  // namespace infomax::nn
