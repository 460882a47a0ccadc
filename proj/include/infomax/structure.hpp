#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "infomax/dim.hpp"
#include "infomax/nn.hpp"
#include "infomax/rng.hpp"
#include "infomax/tensor.hpp"

namespace infomax::structure {

// ---------------------------------------------------------------------------
// Occlusion masks over input pixels, block-structured on the receptive-field
// grid. Sampling: force-occlude one aligned block, force-reveal another,
// then occlude each remaining aligned block independently with probability
// 1/2. Both constraints (>= 1 block fully visible, >= 1 fully occluded) hold
// by construction.

struct OcclusionMask {
  std::int64_t h = 0, w = 0, block = 0;
  std::vector<std::uint8_t> visible;  // h*w, 1 = visible

  bool all_visible() const {
    for (const auto v : visible)
      if (!v) return false;
    return true;
  }

  static OcclusionMask ones(std::int64_t h, std::int64_t w, std::int64_t block) {
    OcclusionMask m;
    m.h = h;
    m.w = w;
    m.block = block;
    m.visible.assign(static_cast<std::size_t>(h * w), 1);
    return m;
  }
};

inline OcclusionMask sample_occlusion_mask(Rng& rng, std::int64_t h, std::int64_t w,
                                           std::int64_t block) {
  if (block < 1 || h % block != 0 || w % block != 0)
    throw std::invalid_argument("sample_occlusion_mask: block must tile the input");
  const auto gh = h / block, gw = w / block;
  const auto cells = gh * gw;
  if (cells < 2)
    throw std::invalid_argument("sample_occlusion_mask: input too small for two disjoint blocks");

  const auto forced_occluded = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cells)));
  auto forced_visible = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cells - 1)));
  if (forced_visible >= forced_occluded) ++forced_visible;

  OcclusionMask m = OcclusionMask::ones(h, w, block);
  for (std::int64_t cell = 0; cell < cells; ++cell) {
    bool occlude;
    if (cell == forced_occluded) occlude = true;
    else if (cell == forced_visible) occlude = false;
    else occlude = rng.uniform() < 0.5;
    if (!occlude) continue;
    const auto bi = (cell / gw) * block, bj = (cell % gw) * block;
    for (std::int64_t i = 0; i < block; ++i)
      for (std::int64_t j = 0; j < block; ++j)
        m.visible[static_cast<std::size_t>((bi + i) * w + (bj + j))] = 0;
  }
  return m;
}

// Exhaustive per-draw check of both block constraints.
inline bool mask_satisfies_constraints(const OcclusionMask& m) {
  const auto gh = m.h / m.block, gw = m.w / m.block;
  bool any_visible = false, any_occluded = false;
  for (std::int64_t bi = 0; bi < gh; ++bi)
    for (std::int64_t bj = 0; bj < gw; ++bj) {
      bool all_vis = true, all_occ = true;
      for (std::int64_t i = 0; i < m.block; ++i)
        for (std::int64_t j = 0; j < m.block; ++j) {
          const auto v = m.visible[static_cast<std::size_t>((bi * m.block + i) * m.w +
                                                            (bj * m.block + j))];
          all_vis = all_vis && v;
          all_occ = all_occ && !v;
        }
      any_visible = any_visible || all_vis;
      any_occluded = any_occluded || all_occ;
    }
  return any_visible && any_occluded;
}

// x with occluded pixels set to zero (plain data, not tape-tracked).
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& x, const OcclusionMask& mask) {
  if (x.rank() != 4 || x.shape[2] != mask.h || x.shape[3] != mask.w)
    throw std::invalid_argument("apply_mask: mask does not match the input");
  auto out = x.clone();
  const auto b = x.shape[0], c = x.shape[1], hw = mask.h * mask.w;
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T* px = out.data->data() + (n * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i)
        px[i] = px[i] * static_cast<T>(mask.visible[static_cast<std::size_t>(i)]);
    }
  return out;
}

// Global feature from the occluded input, local map from the full input. The
// conv statistics are written by the clean pass only, so an all-ones mask
// reproduces the unaugmented encode, running statistics included.
template <typename T>
typename dim::DimEncoder<T>::Encoded occluded_global_encode(dim::DimEncoder<T>& enc,
                                                            nn::Pass<T>& ps, const Tensor<T>& x,
                                                            const OcclusionMask& mask) {
  typename dim::DimEncoder<T>::Encoded out;
  out.local = enc.local_map(ps, x);
  const bool saved = ps.update_stats;
  ps.update_stats = false;
  auto masked_local = enc.local_map(ps, apply_mask(x, mask));
  ps.update_stats = saved;
  out.global = enc.global_from_local(ps, masked_local);
  return out;
}

// ---------------------------------------------------------------------------
// Coordinate prediction: an MLP trunk (two hidden layers, ReLU + batchnorm)
// over [global, local] (absolute) or [global, source local, target local]
// (relative) with two categorical heads, one per axis. Heads start zeroed so
// the untrained losses sit exactly at the uniform baselines.

struct CoordPredictorConfig {
  std::int64_t grid = 4;  // M
  bool relative = false;  // heads of size 2M-1 instead of M
  std::vector<std::int64_t> hidden = {512, 512};
};

template <typename T>
struct CoordPredictor {
  CoordPredictorConfig cfg;
  std::vector<nn::Linear<T>> trunk;
  std::vector<nn::BatchNorm<T>> norms;
  nn::Linear<T> head_row, head_col;

  std::int64_t classes() const { return cfg.relative ? 2 * cfg.grid - 1 : cfg.grid; }

  static CoordPredictor make(std::int64_t global_dim, std::int64_t local_dim,
                             const CoordPredictorConfig& cfg, Rng& rng) {
    CoordPredictor p;
    p.cfg = cfg;
    std::int64_t in = global_dim + (cfg.relative ? 2 * local_dim : local_dim);
    for (const auto width : cfg.hidden) {
      p.trunk.push_back(nn::Linear<T>::make(in, width, nn::Init::He, rng));
      p.norms.push_back(nn::BatchNorm<T>::make(width));
      in = width;
    }
    p.head_row = nn::Linear<T>::make_zero(in, p.classes());
    p.head_col = nn::Linear<T>::make_zero(in, p.classes());
    return p;
  }

  std::pair<Tensor<T>, Tensor<T>> heads(nn::Pass<T>& ps, const Tensor<T>& rows) {
    Tensor<T> h = rows;
    for (std::size_t i = 0; i < trunk.size(); ++i)
      h = relu(norms[i].forward(ps, trunk[i].forward(ps, h)));
    return {head_row.forward(ps, h), head_col.forward(ps, h)};
  }

  void collect(std::vector<Tensor<T>*>& out) {
    for (auto& l : trunk) l.collect(out);
    for (auto& n : norms) n.collect(out);
    head_row.collect(out);
    head_col.collect(out);
  }
};

namespace detail {

template <typename T>
Tensor<T> twin_cross_entropy(const Tensor<T>& row_logits, const Tensor<T>& col_logits,
                             const std::vector<int>& row_labels,
                             const std::vector<int>& col_labels) {
  const auto n = row_logits.shape[0], c = row_logits.shape[1];
  std::vector<std::int64_t> ridx, cidx;
  for (std::int64_t i = 0; i < n; ++i) {
    ridx.push_back(i * c + row_labels[static_cast<std::size_t>(i)]);
    cidx.push_back(i * c + col_labels[static_cast<std::size_t>(i)]);
  }
  auto row_ce = mean(sub(logsumexp(row_logits, 1), take(row_logits, std::move(ridx), {n})));
  auto col_ce = mean(sub(logsumexp(col_logits, 1), take(col_logits, std::move(cidx), {n})));
  return add(row_ce, col_ce);
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& m, std::int64_t times) {
  const auto n = m.shape[0], c = m.shape[1];
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(n * times * c));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t t = 0; t < times; ++t)
      for (std::int64_t j = 0; j < c; ++j) idx.push_back(i * c + j);
  return take(m, std::move(idx), {n * times, c});
}

}  // namespace detail

// Sum of the two categorical cross-entropies for predicting a local feature's
// grid position from (global, local). By default the objective is
// marginalized over all M^2 locations of every batch element; passing `at`
// restricts it to one location.
template <typename T>
Tensor<T> abs_coord_loss(CoordPredictor<T>& pred, nn::Pass<T>& ps, const Tensor<T>& global_feats,
                         const Tensor<T>& local_rows,
                         std::optional<std::pair<std::int64_t, std::int64_t>> at = std::nullopt) {
  if (pred.cfg.relative) throw std::invalid_argument("abs_coord_loss: predictor is relative");
  const auto m = pred.cfg.grid;
  const auto b = global_feats.shape[0];
  const auto m2 = m * m;
  const auto d = local_rows.shape[1];
  if (local_rows.shape[0] != b * m2)
    throw std::invalid_argument("abs_coord_loss: expected one local row per grid cell");

  std::vector<int> row_labels, col_labels;
  Tensor<T> inputs;
  if (at) {
    const auto [i, j] = *at;
    if (i < 0 || i >= m || j < 0 || j >= m)
      throw std::invalid_argument("abs_coord_loss: coordinates out of range");
    std::vector<std::int64_t> idx;
    for (std::int64_t n = 0; n < b; ++n)
      for (std::int64_t c = 0; c < d; ++c) idx.push_back((n * m2 + i * m + j) * d + c);
    auto chosen = take(local_rows, std::move(idx), {b, d});
    inputs = concat_cols(global_feats, chosen);
    row_labels.assign(static_cast<std::size_t>(b), static_cast<int>(i));
    col_labels.assign(static_cast<std::size_t>(b), static_cast<int>(j));
  } else {
    auto rep_global = detail::repeat_rows(global_feats, m2);
    inputs = concat_cols(rep_global, local_rows);
    for (std::int64_t n = 0; n < b; ++n)
      for (std::int64_t loc = 0; loc < m2; ++loc) {
        row_labels.push_back(static_cast<int>(loc / m));
        col_labels.push_back(static_cast<int>(loc % m));
      }
  }
  auto [row_logits, col_logits] = pred.heads(ps, inputs);
  return detail::twin_cross_entropy(row_logits, col_logits, row_labels, col_labels);
}

// Cross-entropy over the two (2M-1)-way offset heads for predicting
// (i - i', j - j') from (global, source local, target local). One source per
// batch element; marginalized over all targets unless `target` is given.
template <typename T>
Tensor<T> rel_coord_loss(CoordPredictor<T>& pred, nn::Pass<T>& ps, const Tensor<T>& global_feats,
                         const Tensor<T>& local_rows, const std::vector<std::int64_t>& sources,
                         std::optional<std::int64_t> target = std::nullopt) {
  if (!pred.cfg.relative) throw std::invalid_argument("rel_coord_loss: predictor is absolute");
  const auto m = pred.cfg.grid;
  const auto b = global_feats.shape[0];
  const auto m2 = m * m;
  const auto d = local_rows.shape[1];
  if (local_rows.shape[0] != b * m2)
    throw std::invalid_argument("rel_coord_loss: expected one local row per grid cell");
  if (static_cast<std::int64_t>(sources.size()) != b)
    throw std::invalid_argument("rel_coord_loss: one source location per batch element");
  for (const auto s : sources)
    if (s < 0 || s >= m2) throw std::invalid_argument("rel_coord_loss: source out of range");
  if (target && (*target < 0 || *target >= m2))
    throw std::invalid_argument("rel_coord_loss: target out of range");

  const auto targets_per = target ? 1 : m2;
  std::vector<std::int64_t> gidx, sidx, tidx;
  std::vector<int> row_labels, col_labels;
  const auto g = global_feats.shape[1];
  for (std::int64_t n = 0; n < b; ++n) {
    const auto src = sources[static_cast<std::size_t>(n)];
    const auto si = src / m, sj = src % m;
    for (std::int64_t t = 0; t < targets_per; ++t) {
      const auto tgt = target ? *target : t;
      const auto ti = tgt / m, tj = tgt % m;
      for (std::int64_t c = 0; c < g; ++c) gidx.push_back(n * g + c);
      for (std::int64_t c = 0; c < d; ++c) sidx.push_back((n * m2 + src) * d + c);
      for (std::int64_t c = 0; c < d; ++c) tidx.push_back((n * m2 + tgt) * d + c);
      row_labels.push_back(static_cast<int>(si - ti + (m - 1)));
      col_labels.push_back(static_cast<int>(sj - tj + (m - 1)));
    }
  }
  const auto rows = b * targets_per;
  auto ginp = take(global_feats, std::move(gidx), {rows, g});
  auto sinp = take(local_rows, std::move(sidx), {rows, d});
  auto tinp = take(local_rows, std::move(tidx), {rows, d});
  auto inputs = concat_cols(concat_cols(ginp, sinp), tinp);
  auto [row_logits, col_logits] = pred.heads(ps, inputs);
  return detail::twin_cross_entropy(row_logits, col_logits, row_labels, col_labels);
}

// ---------------------------------------------------------------------------
// Hooks wiring the auxiliary objectives into dim_train_step.

struct AuxConfig {
  bool occlude = false;
  std::int64_t block = 4;
  bool abs_coord = false;
  bool rel_coord = false;
  double coord_weight = 1.0;
};

template <typename T>
dim::StepHooks<T> make_aux_hooks(const AuxConfig& aux, CoordPredictor<T>* abs_pred,
                                 CoordPredictor<T>* rel_pred) {
  dim::StepHooks<T> hooks;
  if (aux.occlude) {
    const auto block = aux.block;
    hooks.encode = [block](nn::Pass<T>& ps, dim::DimModel<T>& model, const Tensor<T>& batch,
                           Rng& rng) {
      auto mask = sample_occlusion_mask(rng, batch.shape[2], batch.shape[3], block);
      return occluded_global_encode(model.encoder, ps, batch, mask);
    };
  }
  if (aux.abs_coord || aux.rel_coord) {
    const double weight = aux.coord_weight;
    const bool use_abs = aux.abs_coord, use_rel = aux.rel_coord;
    hooks.extra_losses = [abs_pred, rel_pred, weight, use_abs, use_rel](
                             nn::Pass<T>& ps, dim::DimModel<T>&,
                             const typename dim::DimEncoder<T>::Encoded& enc, Rng& rng) {
      std::vector<std::pair<std::string, Tensor<T>>> out;
      auto rows = dim::local_feature_rows(enc.local);
      const auto b = enc.global.shape[0];
      const auto m2 = enc.local.shape[2] * enc.local.shape[3];
      if (use_abs) {
        auto loss = abs_coord_loss(*abs_pred, ps, enc.global, rows);
        out.emplace_back("abs_coord_loss", weight == 1.0 ? loss
                                                         : mul(loss, Tensor<T>::scalar(static_cast<T>(weight))));
      }
      if (use_rel) {
        std::vector<std::int64_t> sources;
        for (std::int64_t n = 0; n < b; ++n)
          sources.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(m2))));
        auto loss = rel_coord_loss(*rel_pred, ps, enc.global, rows, sources);
        out.emplace_back("rel_coord_loss", weight == 1.0 ? loss
                                                         : mul(loss, Tensor<T>::scalar(static_cast<T>(weight))));
      }
      return out;
    };
  }
  return hooks;
}

}  // namespace infomax::structure
