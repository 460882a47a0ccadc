#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "infomax/estimators.hpp"
#include "infomax/nn.hpp"
#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::dim {

using mi::EstimatorKind;
using mi::NegativeSamplingConfig;
using mi::ScoreMatrix;

// ---------------------------------------------------------------------------
// Encoder: a small conv stack producing the local feature map (taken after
// the final batchnorm + ReLU), and a fully-connected head that summarizes the
// same map into the global feature. The global output is squashed to (0, 1)
// so the uniform prior on [0,1]^dim is attainable.

struct EncoderConfig {
  std::int64_t in_channels = 1;
  std::int64_t in_h = 16, in_w = 16;
  std::vector<std::int64_t> conv_channels = {32, 64};
  std::int64_t kernel = 3;
  std::int64_t stride = 2;
  Pad pad = Pad::Same;
  std::int64_t fc_hidden = 256;
  std::int64_t global_dim = 64;
  bool sigmoid_output = true;

  std::int64_t conv_out(std::int64_t in) const {
    const std::int64_t pad_total =
        pad == Pad::Same ? infomax::detail::same_pad_total(in, kernel, stride) : 0;
    return (in + pad_total - kernel) / stride + 1;
  }

  std::int64_t map_h() const {
    std::int64_t h = in_h;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) h = conv_out(h);
    return h;
  }
  std::int64_t map_w() const {
    std::int64_t w = in_w;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) w = conv_out(w);
    return w;
  }
};

template <typename T>
struct DimEncoder {
  EncoderConfig cfg;
  std::vector<nn::Conv2dLayer<T>> convs;
  std::vector<nn::BatchNorm<T>> conv_norms;
  nn::Linear<T> fc;
  nn::BatchNorm<T> fc_norm;
  nn::Linear<T> head;

  struct Encoded {
    Tensor<T> local;   // [B x d x M x M]
    Tensor<T> global;  // [B x global_dim]
  };

  static DimEncoder make(const EncoderConfig& cfg, Rng& rng) {
    if (cfg.map_h() != cfg.map_w())
      throw std::invalid_argument("DimEncoder: local map must be square");
    if (cfg.map_h() < 1) throw std::invalid_argument("DimEncoder: conv stack eats the input");
    DimEncoder enc;
    enc.cfg = cfg;
    std::int64_t ch = cfg.in_channels;
    for (const auto out_ch : cfg.conv_channels) {
      enc.convs.push_back(nn::Conv2dLayer<T>::make(ch, out_ch, cfg.kernel, cfg.stride, cfg.pad,
                                                   nn::Init::He, rng, /*use_bias=*/false));
      enc.conv_norms.push_back(nn::BatchNorm<T>::make(out_ch));
      ch = out_ch;
    }
    const auto flat = ch * enc.cfg.map_h() * enc.cfg.map_w();
    enc.fc = nn::Linear<T>::make(flat, cfg.fc_hidden, nn::Init::He, rng);
    enc.fc_norm = nn::BatchNorm<T>::make(cfg.fc_hidden);
    enc.head = nn::Linear<T>::make(cfg.fc_hidden, cfg.global_dim, nn::Init::Glorot, rng);
    return enc;
  }

  std::int64_t map_size() const { return cfg.map_h(); }
  std::int64_t local_dim() const { return cfg.conv_channels.back(); }

  Tensor<T> local_map(nn::Pass<T>& ps, const Tensor<T>& x) {
    if (x.rank() != 4 || x.shape[1] != cfg.in_channels || x.shape[2] != cfg.in_h ||
        x.shape[3] != cfg.in_w)
      throw std::invalid_argument("DimEncoder: input shape " + shape_str(x.shape) +
                                  " does not match the configured stack");
    Tensor<T> h = x;
    for (std::size_t i = 0; i < convs.size(); ++i)
      h = relu(conv_norms[i].forward(ps, convs[i].forward(ps, h)));
    return h;
  }

  Tensor<T> global_from_local(nn::Pass<T>& ps, const Tensor<T>& local) {
    const auto b = local.shape[0];
    auto flat = reshape(local, {b, local.shape[1] * local.shape[2] * local.shape[3]});
    auto hidden = relu(fc_norm.forward(ps, fc.forward(ps, flat)));
    auto out = head.forward(ps, hidden);
    return cfg.sigmoid_output ? sigmoid(out) : out;
  }

  Encoded encode(nn::Pass<T>& ps, const Tensor<T>& x) {
    Encoded e;
    e.local = local_map(ps, x);
    e.global = global_from_local(ps, e.local);
    return e;
  }

  void collect(std::vector<Tensor<T>*>& out) {
    for (auto& c : convs) c.collect(out);
    for (auto& n : conv_norms) n.collect(out);
    fc.collect(out);
    fc_norm.collect(out);
    head.collect(out);
  }
};

// Local map [B x d x M x M] flattened to one row per location, image-major:
// row b*M^2 + (i*M + j) holds the feature at grid cell (i, j) of image b.
template <typename T>
Tensor<T> local_feature_rows(const Tensor<T>& local_map) {
  const auto b = local_map.shape[0], d = local_map.shape[1];
  const auto m2 = local_map.shape[2] * local_map.shape[3];
  return reshape(permute(local_map, {0, 2, 3, 1}), {b * m2, d});
}

// ---------------------------------------------------------------------------
// Scorers. Both consume per-location feature rows plus global vectors and
// produce the full cross-score grid [B x N]:
//   concat-convolve: a shared MLP over [global, local] at every pairing
//     (a 1x1 convolution over locations is exactly a row-wise MLP);
//   encode-dot: both sides embedded to a common width, scores by dot product,
//     with layer normalization over channels at each location on the local
//     side.
// Score heads are zero-initialized by default so an untrained scorer outputs
// zero everywhere and each objective starts at its uninformative value.

enum class ScorerKind { ConcatConvolve, EncodeDot };

inline ScorerKind scorer_from_name(const std::string& s) {
  if (s == "concat-convolve") return ScorerKind::ConcatConvolve;
  if (s == "encode-dot") return ScorerKind::EncodeDot;
  throw std::invalid_argument("unknown scorer: " + s);
}

inline const char* scorer_name(ScorerKind k) {
  return k == ScorerKind::ConcatConvolve ? "concat-convolve" : "encode-dot";
}

struct ScorerConfig {
  ScorerKind kind = ScorerKind::EncodeDot;
  std::vector<std::int64_t> hidden = {512, 512};  // concat-convolve MLP
  std::int64_t embed_dim = 2048;                  // encode-dot embedding width
  bool zero_head_init = true;
  double ln_eps = 1e-5;  // encode-dot block layer norm
};

// Projection block used by encode-dot: Linear-ReLU-Linear plus a linear
// shortcut, summed; the local-side instance adds per-row layer norm.
template <typename T>
struct Embedder {
  nn::Linear<T> fc1, fc2, shortcut;
  bool block_norm = false;
  double ln_eps = 1e-5;

  static Embedder make(std::int64_t in, std::int64_t width, bool block_norm, bool zero_out,
                       double ln_eps, Rng& rng) {
    Embedder e;
    e.fc1 = nn::Linear<T>::make(in, width, nn::Init::He, rng);
    e.fc2 = zero_out ? nn::Linear<T>::make_zero(width, width)
                     : nn::Linear<T>::make(width, width, nn::Init::Glorot, rng);
    e.shortcut = zero_out ? nn::Linear<T>::make_zero(in, width)
                          : nn::Linear<T>::make(in, width, nn::Init::Glorot, rng);
    e.block_norm = block_norm;
    e.ln_eps = ln_eps;
    return e;
  }

  Tensor<T> forward(nn::Pass<T>& ps, const Tensor<T>& rows) {
    auto main_path = fc2.forward(ps, relu(fc1.forward(ps, rows)));
    auto out = add(main_path, shortcut.forward(ps, rows));
    return block_norm ? layer_norm_rows(out, static_cast<T>(ln_eps)) : out;
  }

  void collect(std::vector<Tensor<T>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
    shortcut.collect(out);
  }
};

template <typename T>
struct LocalScorer {
  ScorerConfig cfg;
  nn::Mlp<T> pair_mlp;        // concat-convolve
  Embedder<T> embed_global;   // encode-dot
  Embedder<T> embed_local;

  static LocalScorer make(std::int64_t local_dim, std::int64_t global_dim,
                          const ScorerConfig& cfg, Rng& rng) {
    LocalScorer s;
    s.cfg = cfg;
    if (cfg.kind == ScorerKind::ConcatConvolve) {
      nn::MlpConfig<T> mcfg;
      mcfg.widths.push_back(global_dim + local_dim);
      for (auto w : cfg.hidden) mcfg.widths.push_back(w);
      mcfg.widths.push_back(1);
      mcfg.zero_init_output = cfg.zero_head_init;
      s.pair_mlp = nn::Mlp<T>::make(mcfg, rng);
    } else {
      // Layer norm on the local side only; zero-init on the global side makes
      // every initial dot product zero.
      s.embed_global = Embedder<T>::make(global_dim, cfg.embed_dim, /*block_norm=*/false,
                                         cfg.zero_head_init, cfg.ln_eps, rng);
      s.embed_local = Embedder<T>::make(local_dim, cfg.embed_dim, /*block_norm=*/true,
                                        /*zero_out=*/false, cfg.ln_eps, rng);
    }
    return s;
  }

  // locals_rows: [N x d]; globals: [B x g] -> scores [B x N].
  Tensor<T> cross_scores(nn::Pass<T>& ps, const Tensor<T>& locals_rows, const Tensor<T>& globals) {
    if (cfg.kind == ScorerKind::ConcatConvolve) {
      const auto b = globals.shape[0], n = locals_rows.shape[0];
      auto rows = pair_concat(globals, locals_rows);
      return reshape(pair_mlp.forward(ps, rows), {b, n});
    }
    auto eg = embed_global.forward(ps, globals);
    auto el = embed_local.forward(ps, locals_rows);
    return matmul(eg, transpose2d(el));
  }

  void collect(std::vector<Tensor<T>*>& out) {
    if (cfg.kind == ScorerKind::ConcatConvolve) {
      pair_mlp.collect(out);
    } else {
      embed_global.collect(out);
      embed_local.collect(out);
    }
  }
};

// ---------------------------------------------------------------------------
// Objectives. Both return the loss (negated estimator) on the pass's tape.

struct ObjectiveStats {
  double estimate_raw = 0.0;
  double estimate_mi = 0.0;
  std::int64_t candidates = 0;
};

namespace detail {

// Pick `want` negatives from `pool` (0 = all), deterministically via rng.
inline void select_negatives(std::vector<std::int64_t>& out, const std::vector<std::int64_t>& pool,
                             std::int64_t want, Rng& rng) {
  if (want == 0 || want == static_cast<std::int64_t>(pool.size())) {
    out.insert(out.end(), pool.begin(), pool.end());
    return;
  }
  if (want > static_cast<std::int64_t>(pool.size()))
    throw std::invalid_argument("objective: requested " + std::to_string(want) +
                                " negatives but only " + std::to_string(pool.size()) +
                                " available");
  auto perm = rng.permutation(static_cast<std::int64_t>(pool.size()));
  for (std::int64_t t = 0; t < want; ++t)
    out.push_back(pool[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)])]);
}

}  // namespace detail

// Eq.-style global objective: pairs (flattened local map, global); negatives
// pair the global of anchor i with the flattened map of image j != i.
template <typename T>
Tensor<T> global_mi_objective(nn::Pass<T>& ps, const typename DimEncoder<T>::Encoded& enc,
                              LocalScorer<T>& scorer, EstimatorKind kind,
                              const NegativeSamplingConfig& cfg, Rng& rng,
                              ObjectiveStats* stats = nullptr) {
  const auto b = enc.local.shape[0];
  if (b < 2) throw std::invalid_argument("global_mi_objective: batch must be >= 2");
  auto flat = reshape(enc.local, {b, enc.local.shape[1] * enc.local.shape[2] * enc.local.shape[3]});
  auto all = scorer.cross_scores(ps, flat, enc.global);  // [B x B]
  std::int64_t k = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < b; ++i) {
    idx.push_back(i * b + i);
    std::vector<std::int64_t> pool;
    for (std::int64_t j = 0; j < b; ++j)
      if (j != i || !cfg.exclude_positive_from_marginals) pool.push_back(i * b + j);
    std::vector<std::int64_t> chosen;
    detail::select_negatives(chosen, pool, cfg.negatives_per_positive, rng);
    idx.insert(idx.end(), chosen.begin(), chosen.end());
    k = 1 + static_cast<std::int64_t>(chosen.size());
  }
  ScoreMatrix<T> sm{take(all, std::move(idx), {b, k})};
  auto est = mi::estimate(kind, sm);
  if (stats) {
    stats->estimate_raw = static_cast<double>(value(est));
    stats->candidates = k;
    stats->estimate_mi = mi::mi_scale(kind, stats->estimate_raw, k);
  }
  return neg(est);
}

// Eq.-style local objective: the estimator is averaged over the M^2 map
// locations; for each location the positive pairs the anchor's own feature
// there, and the negative pool is every location of every other image in the
// batch.
template <typename T>
Tensor<T> local_mi_objective(nn::Pass<T>& ps, const typename DimEncoder<T>::Encoded& enc,
                             LocalScorer<T>& scorer, EstimatorKind kind,
                             const NegativeSamplingConfig& cfg, Rng& rng,
                             ObjectiveStats* stats = nullptr) {
  const auto b = enc.local.shape[0];
  if (b < 2) throw std::invalid_argument("local_mi_objective: batch must be >= 2");
  const auto m2 = enc.local.shape[2] * enc.local.shape[3];
  auto rows = local_feature_rows(enc.local);                // [(B*M^2) x d]
  auto all = scorer.cross_scores(ps, rows, enc.global);     // [B x B*M^2]
  const auto cols = b * m2;

  Tensor<T> acc = Tensor<T>::scalar(T(0));
  std::int64_t k = 0;
  double raw_sum = 0.0;
  for (std::int64_t loc = 0; loc < m2; ++loc) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < b; ++i) {
      idx.push_back(i * cols + (i * m2 + loc));
      std::vector<std::int64_t> pool;
      pool.reserve(static_cast<std::size_t>((b - 1) * m2 + 1));
      for (std::int64_t j = 0; j < b; ++j) {
        if (j == i) continue;
        for (std::int64_t l2 = 0; l2 < m2; ++l2) pool.push_back(i * cols + (j * m2 + l2));
      }
      if (!cfg.exclude_positive_from_marginals) pool.push_back(i * cols + (i * m2 + loc));
      std::vector<std::int64_t> chosen;
      detail::select_negatives(chosen, pool, cfg.negatives_per_positive, rng);
      idx.insert(idx.end(), chosen.begin(), chosen.end());
      k = 1 + static_cast<std::int64_t>(chosen.size());
    }
    ScoreMatrix<T> sm{take(all, std::move(idx), {b, k})};
    acc = add(acc, mi::estimate(kind, sm));
  }
  auto avg = mul(acc, Tensor<T>::scalar(T(1) / static_cast<T>(m2)));
  if (stats) {
    raw_sum = static_cast<double>(value(avg));
    stats->estimate_raw = raw_sum;
    stats->candidates = k;
    stats->estimate_mi = mi::mi_scale(kind, raw_sum, k);
  }
  return neg(avg);
}

// ---------------------------------------------------------------------------
// Prior matching (adversarial). The discriminator works in logits; D(y) =
// sigmoid(logit) is always inside (0, 1), and both log D and log(1 - D) use
// the softplus form. The head is zero-initialized, so the untrained
// discriminator outputs D = 1/2 and its objective starts at -2 ln 2.

struct PriorConfig {
  std::int64_t dim = 64;
  std::vector<std::int64_t> hidden = {1000, 200};
  bool non_saturating = false;
  bool zero_head_init = true;
};

template <typename T>
struct PriorDiscriminator {
  nn::Mlp<T> mlp;

  static PriorDiscriminator make(const PriorConfig& cfg, Rng& rng) {
    nn::MlpConfig<T> mcfg;
    mcfg.widths.push_back(cfg.dim);
    for (auto w : cfg.hidden) mcfg.widths.push_back(w);
    mcfg.widths.push_back(1);
    mcfg.zero_init_output = cfg.zero_head_init;
    PriorDiscriminator d;
    d.mlp = nn::Mlp<T>::make(mcfg, rng);
    return d;
  }

  Tensor<T> logits(nn::Pass<T>& ps, const Tensor<T>& x) {
    return reshape(mlp.forward(ps, x), {x.shape[0]});
  }

  void collect(std::vector<Tensor<T>*>& out) { mlp.collect(out); }
};

template <typename T>
Tensor<T> sample_prior(const PriorConfig& cfg, Rng& rng, std::int64_t n) {
  return Tensor<T>::uniform({n, cfg.dim}, rng, 0.0, 1.0);
}

// Loss minimized by the discriminator parameters:
//   -( E_v[log D(v)] + E_e[log(1 - D(e))] ).
template <typename T>
Tensor<T> prior_d_loss(nn::Pass<T>& ps, PriorDiscriminator<T>& disc, const Tensor<T>& prior_v,
                       const Tensor<T>& encoder_global) {
  auto zv = disc.logits(ps, prior_v);
  auto ze = disc.logits(ps, encoder_global);
  auto objective = add(mean(neg(softplus(neg(zv)))), mean(neg(softplus(ze))));
  return neg(objective);
}

// Term minimized by the encoder: E_e[log(1 - D(e))] (Eq. form), or the
// non-saturating variant -E_e[log D(e)].
template <typename T>
Tensor<T> prior_e_loss(nn::Pass<T>& ps, PriorDiscriminator<T>& disc, const Tensor<T>& encoder_global,
                       bool non_saturating = false) {
  auto ze = disc.logits(ps, encoder_global);
  return non_saturating ? mean(softplus(neg(ze))) : mean(neg(softplus(ze)));
}

// Both prior losses on their own passes: the discriminator loss sees the
// encoder output as a constant, the encoder loss flows through the (frozen)
// discriminator.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> prior_match_losses(nn::Pass<T>& d_pass, nn::Pass<T>& e_pass,
                                                   PriorDiscriminator<T>& disc,
                                                   const Tensor<T>& prior_v,
                                                   const Tensor<T>& encoder_global,
                                                   bool non_saturating = false) {
  auto d = prior_d_loss(d_pass, disc, prior_v, encoder_global.detached());
  auto e = prior_e_loss(e_pass, disc, encoder_global, non_saturating);
  return {std::move(d), std::move(e)};
}

// ---------------------------------------------------------------------------
// Hyperparameters and the combined objective.

struct DimHyperparams {
  double alpha = 0.0;
  double beta = 1.0;
  double gamma = 0.1;
  EstimatorKind estimator = EstimatorKind::InfoNCE;
  ScorerKind scorer = ScorerKind::EncodeDot;

  static DimHyperparams dim_g() {
    DimHyperparams h;
    h.alpha = 1.0;
    h.beta = 0.0;
    h.gamma = 1.0;
    return h;
  }
  static DimHyperparams dim_l() {
    DimHyperparams h;
    h.alpha = 0.0;
    h.beta = 1.0;
    h.gamma = 0.1;
    return h;
  }
  // The DIM(L+G) weights from the extended comparisons; gamma has no
  // published value and must be chosen by the caller.
  static DimHyperparams dim_lg(double gamma) {
    DimHyperparams h;
    h.alpha = 0.5;
    h.beta = 0.1;
    h.gamma = gamma;
    return h;
  }

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0)
      throw std::invalid_argument("DimHyperparams: weights must be nonnegative");
    if (alpha == 0 && beta == 0 && gamma == 0)
      throw std::invalid_argument("DimHyperparams: at least one of alpha/beta/gamma must be nonzero");
  }
};

// alpha * global + beta * local + gamma * prior-encoder-term. Missing parts
// are an error when their weight is nonzero.
template <typename T>
Tensor<T> total_loss(const DimHyperparams& h, const Tensor<T>* global_part,
                     const Tensor<T>* local_part, const Tensor<T>* prior_part) {
  h.validate();
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  auto fold = [&acc](double w, const Tensor<T>* part, const char* name) {
    if (w == 0.0) return;
    if (!part) throw std::invalid_argument(std::string("total_loss: missing ") + name +
                                           " part for nonzero weight");
    acc = add(acc, mul(*part, Tensor<T>::scalar(static_cast<T>(w))));
  };
  fold(h.alpha, global_part, "global");
  fold(h.beta, local_part, "local");
  fold(h.gamma, prior_part, "prior");
  return acc;
}

// ---------------------------------------------------------------------------
// The full model and one training step.

struct DimModelConfig {
  EncoderConfig encoder;
  ScorerConfig global_scorer{ScorerKind::ConcatConvolve, {512, 512}, 2048, true};
  ScorerConfig local_scorer;
  PriorConfig prior;
};

template <typename T>
struct DimModel {
  DimModelConfig cfg;
  DimEncoder<T> encoder;
  LocalScorer<T> global_scorer;  // scores (flattened map, global) pairs
  LocalScorer<T> local_scorer;   // scores (local feature, global) pairs
  PriorDiscriminator<T> prior_disc;

  static DimModel make(const DimModelConfig& cfg, Rng& rng) {
    DimModel m;
    m.cfg = cfg;
    m.cfg.prior.dim = cfg.encoder.global_dim;  // prior lives on the encoder output
    m.encoder = DimEncoder<T>::make(cfg.encoder, rng);
    const auto d = m.encoder.local_dim();
    const auto m2 = m.encoder.map_size() * m.encoder.map_size();
    m.global_scorer =
        LocalScorer<T>::make(d * m2, cfg.encoder.global_dim, cfg.global_scorer, rng);
    m.local_scorer = LocalScorer<T>::make(d, cfg.encoder.global_dim, cfg.local_scorer, rng);
    m.prior_disc = PriorDiscriminator<T>::make(m.cfg.prior, rng);
    return m;
  }

  // psi + omega1 + omega2 (everything the joint update owns).
  std::vector<Tensor<T>*> main_params() {
    std::vector<Tensor<T>*> out;
    encoder.collect(out);
    global_scorer.collect(out);
    local_scorer.collect(out);
    return out;
  }

  std::vector<Tensor<T>*> prior_params() {
    std::vector<Tensor<T>*> out;
    prior_disc.collect(out);
    return out;
  }
};

template <typename T>
struct StepHooks {
  // Replaces the plain encode (occluded global computation plugs in here).
  std::function<typename DimEncoder<T>::Encoded(nn::Pass<T>&, DimModel<T>&, const Tensor<T>&,
                                                Rng&)>
      encode;
  // Extra named losses added to the joint objective with weight 1 (the
  // coordinate-prediction tasks plug in here).
  std::function<std::vector<std::pair<std::string, Tensor<T>>>(
      nn::Pass<T>&, DimModel<T>&, const typename DimEncoder<T>::Encoded&, Rng&)>
      extra_losses;
};

struct StepMetrics {
  double total = 0.0;
  double global_loss = 0.0;
  double local_loss = 0.0;
  double prior_d_loss = 0.0;
  double prior_e_loss = 0.0;
  double lr = 0.0;
  ObjectiveStats global_stats, local_stats;
  std::map<std::string, double> extra;
};

// One alternation: when gamma > 0, a discriminator update on phi first (the
// encoder output is detached there), then one joint update of psi/omega1/
// omega2 through the weighted objective. With gamma = 0 the discriminator is
// never touched.
template <typename T>
StepMetrics dim_train_step(DimModel<T>& model, const Tensor<T>& batch, const DimHyperparams& h,
                           const NegativeSamplingConfig& neg_cfg, nn::Adam<T>& opt_main,
                           nn::Adam<T>& opt_prior, Rng& rng, const StepHooks<T>* hooks = nullptr) {
  h.validate();
  StepMetrics metrics;

  Tape<T> tape;
  nn::Pass<T> ps;
  ps.tape = &tape;
  ps.train = true;
  ps.rng = &rng;
  auto enc = (hooks && hooks->encode) ? hooks->encode(ps, model, batch, rng)
                                      : model.encoder.encode(ps, batch);

  if (h.gamma > 0) {
    auto v = sample_prior<T>(model.cfg.prior, rng, batch.shape[0]);
    Tape<T> d_tape;
    nn::Pass<T> d_ps;
    d_ps.tape = &d_tape;
    d_ps.train = true;
    d_ps.rng = &rng;
    auto d_loss = prior_d_loss(d_ps, model.prior_disc, v, enc.global.detached());
    d_tape.backward(d_loss);
    opt_prior.step(d_ps);
    metrics.prior_d_loss = static_cast<double>(value(d_loss));
  }

  Tensor<T> g_loss, l_loss, p_loss;
  if (h.alpha > 0) {
    g_loss = global_mi_objective(ps, enc, model.global_scorer, h.estimator, neg_cfg, rng,
                                 &metrics.global_stats);
    metrics.global_loss = static_cast<double>(value(g_loss));
  }
  if (h.beta > 0) {
    l_loss = local_mi_objective(ps, enc, model.local_scorer, h.estimator, neg_cfg, rng,
                                &metrics.local_stats);
    metrics.local_loss = static_cast<double>(value(l_loss));
  }
  if (h.gamma > 0) {
    p_loss = prior_e_loss(ps, model.prior_disc, enc.global, model.cfg.prior.non_saturating);
    metrics.prior_e_loss = static_cast<double>(value(p_loss));
  }

  auto objective = total_loss(h, h.alpha > 0 ? &g_loss : nullptr, h.beta > 0 ? &l_loss : nullptr,
                              h.gamma > 0 ? &p_loss : nullptr);
  if (hooks && hooks->extra_losses) {
    for (auto& [name, loss] : hooks->extra_losses(ps, model, enc, rng)) {
      metrics.extra[name] = static_cast<double>(value(loss));
      objective = add(objective, loss);
    }
  }
  metrics.total = static_cast<double>(value(objective));
  tape.backward(objective);
  opt_main.step(ps);
  metrics.lr = opt_main.last_lr();
  return metrics;
}

// Frozen-encoder embedding of a dataset in eval mode, batched.
template <typename T>
Tensor<T> encode_dataset(DimEncoder<T>& encoder, const Tensor<T>& images,
                         std::int64_t batch = 128) {
  const auto n = images.shape[0];
  const auto dim = encoder.cfg.global_dim;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(n * dim));
  const auto per = images.shape[1] * images.shape[2] * images.shape[3];
  for (std::int64_t start = 0; start < n; start += batch) {
    const auto stop = std::min(n, start + batch);
    std::vector<T> chunk(images.data->begin() + start * per, images.data->begin() + stop * per);
    auto x = Tensor<T>::from({stop - start, images.shape[1], images.shape[2], images.shape[3]},
                             std::move(chunk));
    nn::Pass<T> ps;  // eval mode
    auto enc = encoder.encode(ps, x);
    out.insert(out.end(), enc.global.data->begin(), enc.global.data->end());
  }
  return Tensor<T>::from({n, dim}, std::move(out));
}

}  // namespace infomax::dim
