#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "infomax/nn.hpp"
#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::ndm {

// Independently permute each factor (column) along the batch axis. Every
// per-column multiset of values is preserved exactly.
template <typename T>
Tensor<T> shuffle_factors(const Tensor<T>& batch, Rng& rng) {
  if (batch.rank() != 2) throw std::invalid_argument("shuffle_factors: expects B x D");
  const auto b = batch.shape[0], d = batch.shape[1];
  if (b < 2) throw std::invalid_argument("shuffle_factors: batch must be >= 2");
  auto out = Tensor<T>::zeros({b, d});
  for (std::int64_t c = 0; c < d; ++c) {
    auto perm = rng.permutation(b);
    for (std::int64_t i = 0; i < b; ++i)
      out.mut(i * d + c) = (*batch.data)[static_cast<std::size_t>(
          perm[static_cast<std::size_t>(i)] * d + c)];
  }
  return out;
}

// Neural Dependency Measure: a discriminator is trained to tell original
// representations ("real") from factor-shuffled ones ("fake"); the DV bound
// on that task estimates KL(joint || product of marginals). The score is the
// raw network output by default (no sigmoid).
struct NdmConfig {
  std::vector<std::int64_t> hidden = {512, 512};
  bool use_sigmoid_output = false;
  std::int64_t steps = 400;
  std::int64_t batch = 128;
  nn::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, nn::Schedule::constant()};
  std::uint64_t seed = 0;
};

struct NdmCurvePoint {
  std::int64_t step;
  double estimate;
};

struct NdmResult {
  double raw = 0.0;      // mean of the final 10% of steps
  double clamped = 0.0;  // max(raw, 0): a KL divergence is nonnegative
  std::int64_t steps = 0;
  std::vector<NdmCurvePoint> curve;
  bool diverged = false;
  std::int64_t diverged_step = -1;
};

// stream(rng, n) must produce a fresh [n x dim] batch of representations.
template <typename T, typename StreamFn>
NdmResult ndm_estimate(StreamFn&& stream, std::int64_t dim, const NdmConfig& cfg, Rng& rng) {
  nn::MlpConfig<T> mcfg;
  mcfg.widths.push_back(dim);
  for (auto w : cfg.hidden) mcfg.widths.push_back(w);
  mcfg.widths.push_back(1);
  mcfg.zero_init_output = true;
  Rng init_rng(cfg.seed);
  auto disc = nn::Mlp<T>::make(mcfg, init_rng);
  std::vector<Tensor<T>*> params;
  disc.collect(params);
  nn::Adam<T> adam(cfg.adam, params);

  NdmResult result;
  result.curve.reserve(static_cast<std::size_t>(cfg.steps));
  const double log_batch = std::log(static_cast<double>(cfg.batch));
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    try {
      auto real = stream(rng, cfg.batch);
      auto fake = shuffle_factors(real, rng);
      Tape<T> tape;
      nn::Pass<T> ps;
      ps.tape = &tape;
      ps.train = true;
      ps.rng = &rng;
      auto score_of = [&](const Tensor<T>& x) {
        auto out = reshape(disc.forward(ps, x), {cfg.batch});
        return cfg.use_sigmoid_output ? sigmoid(out) : out;
      };
      auto t_real = score_of(real);
      auto t_fake = score_of(fake);
      // DV: E_real[T] - log E_fake[e^T]
      auto estimate = sub(mean(t_real),
                          sub(logsumexp(t_fake), Tensor<T>::scalar(static_cast<T>(log_batch))));
      auto loss = neg(estimate);
      tape.backward(loss);
      adam.step(ps);
      result.curve.push_back({step, static_cast<double>(value(estimate))});
    } catch (const std::runtime_error&) {
      result.diverged = true;
      result.diverged_step = step;
      break;
    }
  }
  result.steps = static_cast<std::int64_t>(result.curve.size());
  if (!result.curve.empty()) {
    const auto tail = std::max<std::size_t>(1, result.curve.size() / 10);
    double acc = 0.0;
    for (std::size_t i = result.curve.size() - tail; i < result.curve.size(); ++i)
      acc += result.curve[i].estimate;
    result.raw = acc / static_cast<double>(tail);
    result.clamped = std::max(0.0, result.raw);
  }
  return result;
}

}  // namespace infomax::ndm
