#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "infomax/nn.hpp"
#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::synth {

// ---------------------------------------------------------------------------
// Jointly Gaussian pairs with known mutual information. Each dimension is an
// independent (x, y) pair with unit variances and the given correlation, so
// MI = -(dim/2) * ln(1 - corr^2).

struct GaussianPairSpec {
  std::int64_t dim = 1;
  double corr = 0.0;
};

inline double gaussian_pair_mi(const GaussianPairSpec& spec) {
  return -0.5 * static_cast<double>(spec.dim) * std::log(1.0 - spec.corr * spec.corr);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> sample_gaussian_pairs(const GaussianPairSpec& spec, Rng& rng,
                                                      std::int64_t n) {
  if (!(std::abs(spec.corr) < 1.0))
    throw std::invalid_argument("sample_gaussian_pairs: |corr| must be < 1");
  if (spec.dim < 1) throw std::invalid_argument("sample_gaussian_pairs: dim must be positive");
  const double tail = std::sqrt(1.0 - spec.corr * spec.corr);
  std::vector<T> xs(static_cast<std::size_t>(n * spec.dim));
  std::vector<T> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = rng.normal();
    const double y = spec.corr * x + tail * rng.normal();
    xs[i] = static_cast<T>(x);
    ys[i] = static_cast<T>(y);
  }
  return {Tensor<T>::from({n, spec.dim}, std::move(xs)),
          Tensor<T>::from({n, spec.dim}, std::move(ys))};
}

// ---------------------------------------------------------------------------
// Toy images with a known shared/local information split: one deterministic
// low-frequency template per class (the shared signal, recoverable from any
// quadrant), plus noise that is constant within each receptive-field patch
// (local nuisance) and independent pixel noise.

struct ToyImageSpec {
  std::int64_t size = 16;
  std::int64_t classes = 8;
  std::int64_t patch = 4;       // receptive-field block edge
  double patch_noise = 0.8;     // amplitude of per-patch uniform noise
  double pixel_noise = 0.1;     // amplitude of per-pixel uniform noise
  double template_amp = 0.35;
};

inline double toy_template(const ToyImageSpec& spec, std::int64_t cls, std::int64_t i,
                           std::int64_t j) {
  // Class c maps to frequencies (fx, fy) in {1, 2}^2 and a phase in {0, pi/2}.
  const double fx = 1.0 + static_cast<double>(cls & 1);
  const double fy = 1.0 + static_cast<double>((cls >> 1) & 1);
  const double phase = ((cls >> 2) & 1) ? 1.5707963267948966 : 0.0;
  const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(spec.size);
  const double v = (static_cast<double>(j) + 0.5) / static_cast<double>(spec.size);
  return 0.5 + spec.template_amp * std::cos(6.283185307179586 * (fx * u + fy * v) + phase);
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> sample_toy_images(const ToyImageSpec& spec, Rng& rng,
                                                         std::int64_t n) {
  if (spec.size % spec.patch != 0)
    throw std::invalid_argument("sample_toy_images: patch must divide the image size");
  if (spec.classes < 2 || spec.classes > 8)
    throw std::invalid_argument("sample_toy_images: classes must be in [2, 8]");
  const auto s = spec.size;
  const auto grid = s / spec.patch;
  std::vector<T> data(static_cast<std::size_t>(n * s * s));
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::vector<double> patch_vals(static_cast<std::size_t>(grid * grid));
  for (std::int64_t img = 0; img < n; ++img) {
    const auto cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.classes)));
    labels[static_cast<std::size_t>(img)] = cls;
    for (auto& pv : patch_vals) pv = spec.patch_noise * (rng.uniform() * 2.0 - 1.0);
    for (std::int64_t i = 0; i < s; ++i)
      for (std::int64_t j = 0; j < s; ++j) {
        const auto patch_idx =
            static_cast<std::size_t>((i / spec.patch) * grid + (j / spec.patch));
        const double v = toy_template(spec, cls, i, j) + patch_vals[patch_idx] +
                         spec.pixel_noise * (rng.uniform() * 2.0 - 1.0);
        data[static_cast<std::size_t>((img * s + i) * s + j)] = static_cast<T>(v);
      }
  }
  return {Tensor<T>::from({n, 1, s, s}, std::move(data)), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Evaluation probes on frozen features: multinomial logistic regression
// (linear) or a single 200-unit ReLU hidden layer with dropout (mlp200).
// Returns test accuracy averaged over the final 10% of epochs.

struct ProbeSpec {
  enum class Kind { Linear, Mlp200 };
  Kind kind = Kind::Linear;
  std::int64_t epochs = 40;
  std::int64_t batch = 64;
  double lr = 5e-3;
  double dropout = 0.1;  // mlp200 only
  double test_fraction = 0.25;
};

struct ProbeResult {
  double accuracy = 0.0;        // averaged over the final 10% of epochs
  double final_accuracy = 0.0;  // last epoch alone
  std::int64_t train_count = 0;
  std::int64_t test_count = 0;
};

namespace detail {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& m, const std::vector<std::int64_t>& rows) {
  const auto cols = m.shape[1];
  std::vector<std::int64_t> idx;
  idx.reserve(rows.size() * static_cast<std::size_t>(cols));
  for (auto r : rows)
    for (std::int64_t c = 0; c < cols; ++c) idx.push_back(r * cols + c);
  return take(m, std::move(idx), {static_cast<std::int64_t>(rows.size()), cols});
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto b = logits.shape[0], c = logits.shape[1];
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) idx.push_back(i * c + labels[static_cast<std::size_t>(i)]);
  auto true_logit = take(logits, std::move(idx), {b});
  return mean(sub(logsumexp(logits, 1), true_logit));
}

template <typename T>
double accuracy_of(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto b = logits.shape[0], c = logits.shape[1];
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (logits.at({i, j}) > logits.at({i, best})) best = j;
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(b);
}

}  // namespace detail

template <typename T>
ProbeResult train_probe(const Tensor<T>& features, const std::vector<int>& labels,
                        const ProbeSpec& spec, Rng& rng) {
  if (features.rank() != 2) throw std::invalid_argument("train_probe: features must be N x F");
  const auto n = features.shape[0];
  const auto f = features.shape[1];
  if (n != static_cast<std::int64_t>(labels.size()))
    throw std::invalid_argument("train_probe: label/feature count mismatch");
  int classes = 0;
  for (const auto l : labels) classes = std::max(classes, l + 1);
  if (classes < 2) throw std::invalid_argument("train_probe: needs at least two classes");

  // Deterministic split.
  auto perm = rng.permutation(n);
  const auto n_test = std::max<std::int64_t>(1, static_cast<std::int64_t>(
                                                    spec.test_fraction * static_cast<double>(n)));
  const auto n_train = n - n_test;
  if (n_train < 1) throw std::invalid_argument("train_probe: not enough samples");
  std::vector<std::int64_t> train_rows(perm.begin(), perm.begin() + n_train);
  std::vector<std::int64_t> test_rows(perm.begin() + n_train, perm.end());
  std::vector<int> train_labels, test_labels;
  for (auto r : train_rows) train_labels.push_back(labels[static_cast<std::size_t>(r)]);
  for (auto r : test_rows) test_labels.push_back(labels[static_cast<std::size_t>(r)]);
  auto train_x = detail::gather_rows(features.detached(), train_rows);
  auto test_x = detail::gather_rows(features.detached(), test_rows);

  nn::MlpConfig<T> cfg;
  if (spec.kind == ProbeSpec::Kind::Linear) {
    cfg.widths = {f, classes};
  } else {
    cfg.widths = {f, 200, classes};
    cfg.dropout = spec.dropout;
  }
  auto model = nn::Mlp<T>::make(cfg, rng);
  std::vector<Tensor<T>*> params;
  model.collect(params);
  nn::AdamConfig acfg;
  acfg.lr0 = spec.lr;
  nn::Adam<T> adam(acfg, params);

  ProbeResult result;
  result.train_count = n_train;
  result.test_count = n_test;
  std::vector<double> epoch_acc;
  for (std::int64_t epoch = 0; epoch < spec.epochs; ++epoch) {
    auto order = rng.permutation(n_train);
    for (std::int64_t start = 0; start < n_train; start += spec.batch) {
      const auto stop = std::min(n_train, start + spec.batch);
      if (stop - start < 2) continue;
      std::vector<std::int64_t> rows(order.begin() + start, order.begin() + stop);
      std::vector<int> batch_labels;
      for (auto r : rows) batch_labels.push_back(train_labels[static_cast<std::size_t>(r)]);
      Tape<T> tape;
      nn::Pass<T> ps;
      ps.tape = &tape;
      ps.train = true;
      ps.rng = &rng;
      auto batch_x = detail::gather_rows(train_x, rows);
      auto loss = detail::cross_entropy(model.forward(ps, batch_x), batch_labels);
      tape.backward(loss);
      adam.step(ps);
    }
    nn::Pass<T> eval_ps;
    epoch_acc.push_back(detail::accuracy_of(model.forward(eval_ps, test_x), test_labels));
  }

  const auto tail = std::max<std::size_t>(1, epoch_acc.size() / 10);
  double acc = 0.0;
  for (std::size_t i = epoch_acc.size() - tail; i < epoch_acc.size(); ++i) acc += epoch_acc[i];
  result.accuracy = acc / static_cast<double>(tail);
  result.final_accuracy = epoch_acc.back();
  return result;
}

}  // namespace infomax::synth
