#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "infomax/nn.hpp"
#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::mi {

enum class EstimatorKind { DV, JSD, InfoNCE };

inline const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::DV: return "dv";
    case EstimatorKind::JSD: return "jsd";
    case EstimatorKind::InfoNCE: return "infonce";
  }
  return "?";
}

inline EstimatorKind estimator_from_name(const std::string& s) {
  if (s == "dv") return EstimatorKind::DV;
  if (s == "jsd") return EstimatorKind::JSD;
  if (s == "infonce") return EstimatorKind::InfoNCE;
  throw std::invalid_argument("unknown estimator: " + s);
}

// Pairwise critic scores over a batch: column 0 holds the positive-pair score
// for each anchor, columns 1..K-1 hold the marginal (negative) samples.
template <typename T>
struct ScoreMatrix {
  Tensor<T> scores;  // [B x K]

  std::int64_t anchors() const { return scores.shape[0]; }
  std::int64_t candidates() const { return scores.shape[1]; }
};

namespace detail {
template <typename T>
void check_matrix(const ScoreMatrix<T>& sm, const char* who) {
  if (sm.scores.rank() != 2) throw std::invalid_argument(std::string(who) + ": scores must be B x K");
  if (sm.scores.shape[0] < 1) throw std::invalid_argument(std::string(who) + ": no anchors");
  if (sm.scores.shape[1] < 2)
    throw std::invalid_argument(std::string(who) + ": needs a positive and at least one negative");
}
}  // namespace detail

// Donsker-Varadhan bound: mean(positives) - log mean(exp(negatives)), with the
// log-expectation computed as logsumexp - log(count).
template <typename T>
Tensor<T> dv_estimate(const ScoreMatrix<T>& sm) {
  detail::check_matrix(sm, "dv_estimate");
  const auto b = sm.anchors(), k = sm.candidates();
  std::vector<std::int64_t> pos_idx, neg_idx;
  for (std::int64_t i = 0; i < b; ++i) {
    pos_idx.push_back(i * k);
    for (std::int64_t j = 1; j < k; ++j) neg_idx.push_back(i * k + j);
  }
  const auto n_neg = static_cast<std::int64_t>(neg_idx.size());
  auto pos = take(sm.scores, std::move(pos_idx), {b});
  auto negs = take(sm.scores, std::move(neg_idx), {n_neg});
  auto log_count = Tensor<T>::scalar(static_cast<T>(std::log(static_cast<double>(n_neg))));
  return sub(mean(pos), sub(logsumexp(negs), log_count));
}

// Jensen-Shannon estimator: mean(-softplus(-positives)) - mean(softplus(negatives)).
template <typename T>
Tensor<T> jsd_estimate(const ScoreMatrix<T>& sm) {
  detail::check_matrix(sm, "jsd_estimate");
  const auto b = sm.anchors(), k = sm.candidates();
  std::vector<std::int64_t> pos_idx, neg_idx;
  for (std::int64_t i = 0; i < b; ++i) {
    pos_idx.push_back(i * k);
    for (std::int64_t j = 1; j < k; ++j) neg_idx.push_back(i * k + j);
  }
  const auto n_neg = static_cast<std::int64_t>(neg_idx.size());
  auto pos = take(sm.scores, std::move(pos_idx), {b});
  auto negs = take(sm.scores, std::move(neg_idx), {n_neg});
  return sub(mean(neg(softplus(neg(pos)))), mean(softplus(negs)));
}

// infoNCE: mean over anchors of positive score minus logsumexp over that
// anchor's full candidate row (positive included). Always <= 0, and the
// MI-scale reading is obtained by adding log K.
template <typename T>
Tensor<T> infonce_estimate(const ScoreMatrix<T>& sm) {
  detail::check_matrix(sm, "infonce_estimate");
  const auto b = sm.anchors(), k = sm.candidates();
  std::vector<std::int64_t> pos_idx;
  for (std::int64_t i = 0; i < b; ++i) pos_idx.push_back(i * k);
  auto pos = take(sm.scores, std::move(pos_idx), {b});
  auto row_lse = logsumexp(sm.scores, 1);
  return mean(sub(pos, row_lse));
}

template <typename T>
Tensor<T> estimate(EstimatorKind kind, const ScoreMatrix<T>& sm) {
  switch (kind) {
    case EstimatorKind::DV: return dv_estimate(sm);
    case EstimatorKind::JSD: return jsd_estimate(sm);
    case EstimatorKind::InfoNCE: return infonce_estimate(sm);
  }
  throw std::logic_error("estimate: unknown kind");
}

// Value each estimator takes under an uninformative (constant) critic.
inline double zero_mi_floor(EstimatorKind kind, std::int64_t candidates) {
  switch (kind) {
    case EstimatorKind::DV: return 0.0;
    case EstimatorKind::JSD: return -2.0 * std::log(2.0);
    case EstimatorKind::InfoNCE: return -std::log(static_cast<double>(candidates));
  }
  return 0.0;
}

// MI-scale reading of a raw estimator value: DV is already a KL lower bound,
// JSD is shifted so independence reads 0, infoNCE adds its log K cap.
inline double mi_scale(EstimatorKind kind, double raw, std::int64_t candidates) {
  switch (kind) {
    case EstimatorKind::DV: return raw;
    case EstimatorKind::JSD: return raw + 2.0 * std::log(2.0);
    case EstimatorKind::InfoNCE: return raw + std::log(static_cast<double>(candidates));
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Critics. The joint form runs an MLP over concatenated (anchor, candidate)
// rows; the separable form embeds both sides and scores with a dot product,
// which makes all-pairs scoring one matrix multiply.

struct CriticSpec {
  enum class Kind { Joint, Separable };
  Kind kind = Kind::Separable;
  std::vector<std::int64_t> hidden = {64, 64};
  std::int64_t embed_dim = 32;  // separable embedding width
};

template <typename T>
struct Critic {
  CriticSpec spec;
  nn::Mlp<T> joint;
  nn::Mlp<T> embed_anchor, embed_candidate;

  static Critic make(std::int64_t dim_candidate, std::int64_t dim_anchor, const CriticSpec& spec,
                     Rng& rng) {
    Critic c;
    c.spec = spec;
    if (spec.kind == CriticSpec::Kind::Joint) {
      nn::MlpConfig<T> cfg;
      cfg.widths.push_back(dim_anchor + dim_candidate);
      for (auto w : spec.hidden) cfg.widths.push_back(w);
      cfg.widths.push_back(1);
      c.joint = nn::Mlp<T>::make(cfg, rng);
    } else {
      nn::MlpConfig<T> acfg;
      acfg.widths.push_back(dim_anchor);
      for (auto w : spec.hidden) acfg.widths.push_back(w);
      acfg.widths.push_back(spec.embed_dim);
      c.embed_anchor = nn::Mlp<T>::make(acfg, rng);
      nn::MlpConfig<T> ccfg = acfg;
      ccfg.widths[0] = dim_candidate;
      c.embed_candidate = nn::Mlp<T>::make(ccfg, rng);
    }
    return c;
  }

  // All-pairs scores: entry (i, j) = T(candidate_j, anchor_i).
  Tensor<T> pair_scores(nn::Pass<T>& ps, const Tensor<T>& anchors, const Tensor<T>& candidates) {
    const auto b = anchors.shape[0], n = candidates.shape[0];
    if (spec.kind == CriticSpec::Kind::Joint) {
      auto rows = pair_concat(anchors, candidates);  // anchor-major rows
      auto out = joint.forward(ps, rows);            // [(B*N) x 1]
      return reshape(out, {b, n});
    }
    auto ea = embed_anchor.forward(ps, anchors);        // [B x W]
    auto ec = embed_candidate.forward(ps, candidates);  // [N x W]
    return matmul(ea, transpose2d(ec));
  }

  void collect(std::vector<Tensor<T>*>& out) {
    if (spec.kind == CriticSpec::Kind::Joint) {
      joint.collect(out);
    } else {
      embed_anchor.collect(out);
      embed_candidate.collect(out);
    }
  }
};

// ---------------------------------------------------------------------------
// Negative sampling.

struct NegativeSamplingConfig {
  std::int64_t negatives_per_positive = 0;  // 0 = every available candidate
  bool exclude_positive_from_marginals = true;
  enum class Source { WithinBatch, CrossBatch } source = Source::WithinBatch;
};

// Builds the [B x K] score matrix for matched (x_i, y_i) pairs. Within-batch
// negatives pair anchor i with candidates j != i (the positive joins the
// marginal pool only when the config says so); cross-batch negatives come
// from `neg_candidates`. Requested negative counts are drawn per anchor as a
// seeded permutation prefix.
template <typename T>
ScoreMatrix<T> build_score_matrix(Critic<T>& critic, nn::Pass<T>& ps, const Tensor<T>& anchors,
                                  const Tensor<T>& candidates, const NegativeSamplingConfig& cfg,
                                  Rng& rng, const Tensor<T>* neg_candidates = nullptr) {
  const auto b = anchors.shape[0];
  if (candidates.shape[0] != b)
    throw std::invalid_argument("build_score_matrix: anchors and candidates must pair up");
  if (cfg.source == NegativeSamplingConfig::Source::WithinBatch) {
    if (b < 2) throw std::invalid_argument("build_score_matrix: within-batch needs batch >= 2");
    auto all = critic.pair_scores(ps, anchors, candidates);  // [B x B]
    const std::int64_t pool = cfg.exclude_positive_from_marginals ? b - 1 : b;
    const std::int64_t want = cfg.negatives_per_positive == 0 ? pool : cfg.negatives_per_positive;
    if (want > pool)
      throw std::invalid_argument("build_score_matrix: requested " + std::to_string(want) +
                                  " negatives but only " + std::to_string(pool) + " candidates");
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(b * (1 + want)));
    for (std::int64_t i = 0; i < b; ++i) {
      idx.push_back(i * b + i);
      std::vector<std::int64_t> pool_cols;
      pool_cols.reserve(static_cast<std::size_t>(pool));
      for (std::int64_t j = 0; j < b; ++j)
        if (j != i || !cfg.exclude_positive_from_marginals) pool_cols.push_back(j);
      if (want == pool) {
        for (auto j : pool_cols) idx.push_back(i * b + j);
      } else {
        auto perm = rng.permutation(static_cast<std::int64_t>(pool_cols.size()));
        for (std::int64_t t = 0; t < want; ++t)
          idx.push_back(i * b + pool_cols[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)])]);
      }
    }
    return ScoreMatrix<T>{take(all, std::move(idx), {b, 1 + want})};
  }

  // Cross-batch: positives from the paired batch, negatives from a second one.
  if (!neg_candidates)
    throw std::invalid_argument("build_score_matrix: cross-batch needs a negative batch");
  const auto n2 = neg_candidates->shape[0];
  const std::int64_t want = cfg.negatives_per_positive == 0 ? n2 : cfg.negatives_per_positive;
  if (want > n2)
    throw std::invalid_argument("build_score_matrix: requested " + std::to_string(want) +
                                " negatives but only " + std::to_string(n2) + " candidates");
  auto pos_all = critic.pair_scores(ps, anchors, candidates);  // [B x B], diagonal is matched
  std::vector<std::int64_t> diag;
  for (std::int64_t i = 0; i < b; ++i) diag.push_back(i * b + i);
  auto pos = take(pos_all, std::move(diag), {b, 1});
  auto neg_all = critic.pair_scores(ps, anchors, *neg_candidates);  // [B x N2]
  if (want == n2) return ScoreMatrix<T>{concat_cols(pos, neg_all)};
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < b; ++i) {
    auto perm = rng.permutation(n2);
    for (std::int64_t t = 0; t < want; ++t) idx.push_back(i * n2 + perm[static_cast<std::size_t>(t)]);
  }
  auto negs = take(neg_all, std::move(idx), {b, want});
  return ScoreMatrix<T>{concat_cols(pos, negs)};
}

// ---------------------------------------------------------------------------
// MINE-style trainer: fit a critic to two paired sample streams by gradient
// ascent on the chosen estimator.

struct MineCurvePoint {
  std::int64_t step;
  double estimate;  // raw estimator value
  double loss;
  double lr;
};

struct MineResult {
  double estimate = 0.0;     // raw value, averaged over the final 10% of steps
  double mi_estimate = 0.0;  // MI-scale reading of the same average
  std::int64_t candidate_count = 0;
  std::vector<MineCurvePoint> curve;
  bool diverged = false;
  std::int64_t diverged_step = -1;
};

struct MineOptions {
  EstimatorKind kind = EstimatorKind::DV;
  CriticSpec critic;
  nn::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, nn::Schedule::constant()};
  std::int64_t steps = 1500;
  std::int64_t batch = 64;
  NegativeSamplingConfig negatives;
  std::uint64_t seed = 0;
};

// stream(rng, n) must return a pair of [n x dx] / [n x dy] tensors with
// matched rows; fresh samples every call.
template <typename T, typename StreamFn>
MineResult mine_fit(StreamFn&& stream, std::int64_t dim_x, std::int64_t dim_y,
                    const MineOptions& opt) {
  if (opt.steps < 1) throw std::invalid_argument("mine_fit: steps must be positive");
  Rng rng(opt.seed);
  Critic<T> critic = Critic<T>::make(dim_x, dim_y, opt.critic, rng);
  std::vector<Tensor<T>*> params;
  critic.collect(params);
  nn::Adam<T> adam(opt.adam, params);

  MineResult result;
  result.curve.reserve(static_cast<std::size_t>(opt.steps));
  for (std::int64_t step = 1; step <= opt.steps; ++step) {
    try {
      auto [x, y] = stream(rng, opt.batch);
      Tape<T> tape;
      nn::Pass<T> ps;
      ps.tape = &tape;
      ps.train = true;
      ps.rng = &rng;
      auto sm = build_score_matrix(critic, ps, y, x, opt.negatives, rng);
      result.candidate_count = sm.candidates();
      auto est = estimate(opt.kind, sm);
      auto loss = neg(est);
      tape.backward(loss);
      adam.step(ps);
      result.curve.push_back(
          {step, static_cast<double>(value(est)), static_cast<double>(value(loss)),
           adam.last_lr()});
    } catch (const std::runtime_error&) {
      result.diverged = true;
      result.diverged_step = step;
      break;
    }
  }

  if (!result.curve.empty()) {
    const auto tail = std::max<std::size_t>(1, result.curve.size() / 10);
    double acc = 0.0;
    for (std::size_t i = result.curve.size() - tail; i < result.curve.size(); ++i)
      acc += result.curve[i].estimate;
    result.estimate = acc / static_cast<double>(tail);
    result.mi_estimate = mi_scale(opt.kind, result.estimate, result.candidate_count);
  }
  return result;
}

}  // namespace infomax::mi
