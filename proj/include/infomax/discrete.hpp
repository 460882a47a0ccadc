#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <vector>

#include "infomax/rng.hpp"

namespace infomax::discrete {

// Exact finite joint distribution p(x, y), row-major [n_x x n_y]. All
// information measures below use natural logarithms.
struct DiscreteJoint {
  std::int64_t nx = 0, ny = 0;
  std::vector<double> p;

  double at(std::int64_t i, std::int64_t j) const {
    return p[static_cast<std::size_t>(i * ny + j)];
  }

  std::vector<double> row_marginal() const {
    std::vector<double> px(static_cast<std::size_t>(nx), 0.0);
    for (std::int64_t i = 0; i < nx; ++i)
      for (std::int64_t j = 0; j < ny; ++j) px[static_cast<std::size_t>(i)] += at(i, j);
    return px;
  }

  std::vector<double> col_marginal() const {
    std::vector<double> py(static_cast<std::size_t>(ny), 0.0);
    for (std::int64_t i = 0; i < nx; ++i)
      for (std::int64_t j = 0; j < ny; ++j) py[static_cast<std::size_t>(j)] += at(i, j);
    return py;
  }

  void validate(double tol = 1e-12) const {
    if (nx < 1 || ny < 1 || static_cast<std::int64_t>(p.size()) != nx * ny)
      throw std::invalid_argument("DiscreteJoint: bad dimensions");
    double total = 0.0;
    for (const auto v : p) {
      if (v < 0.0) throw std::invalid_argument("DiscreteJoint: negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > tol)
      throw std::invalid_argument("DiscreteJoint: entries sum to " + std::to_string(total));
  }
};

struct JointSamplerConfig {
  std::int64_t nx = 8, ny = 8;
  double dropout_rate = 0.5;
};

// Paper-style random sparse joint: per row, draw n_y uniforms as logits, mask
// each to -inf with the dropout probability (rows that lose every entry are
// redrawn), softmax the row into p(y|x_i), and set the joint row to
// p(y|x_i) / n_x (uniform p(x)).
inline DiscreteJoint sample_random_joint(const JointSamplerConfig& cfg, Rng& rng) {
  if (cfg.nx < 1 || cfg.ny < 1) throw std::invalid_argument("sample_random_joint: bad dimensions");
  if (cfg.dropout_rate < 0.0 || cfg.dropout_rate >= 1.0)
    throw std::invalid_argument("sample_random_joint: dropout_rate must be in [0, 1)");
  DiscreteJoint joint;
  joint.nx = cfg.nx;
  joint.ny = cfg.ny;
  joint.p.assign(static_cast<std::size_t>(cfg.nx * cfg.ny), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(cfg.ny));
  std::vector<bool> masked(static_cast<std::size_t>(cfg.ny));
  for (std::int64_t i = 0; i < cfg.nx; ++i) {
    while (true) {
      for (auto& u : logits) u = rng.uniform();
      bool all_masked = true;
      for (auto&& m : masked) {
        m = rng.uniform() < cfg.dropout_rate;
        all_masked = all_masked && m;
      }
      if (all_masked) continue;
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < cfg.ny; ++j)
        if (!masked[static_cast<std::size_t>(j)])
          max_logit = std::max(max_logit, logits[static_cast<std::size_t>(j)]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < cfg.ny; ++j)
        if (!masked[static_cast<std::size_t>(j)])
          denom += std::exp(logits[static_cast<std::size_t>(j)] - max_logit);
      for (std::int64_t j = 0; j < cfg.ny; ++j) {
        const double cond = masked[static_cast<std::size_t>(j)]
                                ? 0.0
                                : std::exp(logits[static_cast<std::size_t>(j)] - max_logit) / denom;
        joint.p[static_cast<std::size_t>(i * cfg.ny + j)] = cond / static_cast<double>(cfg.nx);
      }
      break;
    }
  }
  return joint;
}

// I(X;Y) = sum p(x,y) ln[p(x,y) / (p(x) p(y))], with 0 ln 0 := 0.
inline double exact_mi(const DiscreteJoint& joint) {
  const auto px = joint.row_marginal();
  const auto py = joint.col_marginal();
  double mi = 0.0;
  for (std::int64_t i = 0; i < joint.nx; ++i)
    for (std::int64_t j = 0; j < joint.ny; ++j) {
      const double pij = joint.at(i, j);
      if (pij <= 0.0) continue;
      mi += pij * std::log(pij / (px[static_cast<std::size_t>(i)] * py[static_cast<std::size_t>(j)]));
    }
  return mi;
}

// JSD(joint || product of marginals) via the mixture m = (joint + product)/2;
// always in [0, ln 2].
inline double exact_jsd(const DiscreteJoint& joint) {
  const auto px = joint.row_marginal();
  const auto py = joint.col_marginal();
  double acc = 0.0;
  for (std::int64_t i = 0; i < joint.nx; ++i)
    for (std::int64_t j = 0; j < joint.ny; ++j) {
      const double pij = joint.at(i, j);
      const double qij = px[static_cast<std::size_t>(i)] * py[static_cast<std::size_t>(j)];
      const double mij = 0.5 * (pij + qij);
      if (pij > 0.0) acc += 0.5 * pij * std::log(pij / mij);
      if (qij > 0.0) acc += 0.5 * qij * std::log(qij / mij);
    }
  return acc;
}

// Spearman rank correlation with average ranks for ties. `degenerate` is set
// when either input has zero rank variance.
inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b,
                           bool* degenerate = nullptr) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman_rho: need two equal-length samples of size >= 2");
  auto ranks = [](const std::vector<double>& v) {
    const auto n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return cov / std::sqrt(va * vb);
}

// ---------------------------------------------------------------------------
// The JSD-vs-MI monotonicity experiment: per matrix size, draw joints and
// compute both exact measures, then rank-correlate. Draws parallelize over
// worker threads with a deterministic per-draw rng stream (stream id =
// size_index * draws + draw), so the output is independent of threading.

struct MonotonicityRow {
  std::int64_t size;
  std::int64_t draw;
  double mi_nats;
  double jsd_nats;
};

struct MonotonicitySummary {
  std::int64_t size;
  double spearman;
  bool degenerate;
  std::int64_t draws;
};

struct MonotonicityResult {
  std::vector<MonotonicityRow> rows;
  std::vector<MonotonicitySummary> summary;
};

inline MonotonicityResult monotonicity_experiment(const std::vector<std::int64_t>& sizes,
                                                  std::int64_t draws, double dropout_rate,
                                                  std::uint64_t seed, int threads = 1) {
  if (draws < 2) throw std::invalid_argument("monotonicity_experiment: draws must be >= 2");
  for (const auto s : sizes)
    if (s < 2) throw std::invalid_argument("monotonicity_experiment: sizes must be >= 2");
  MonotonicityResult result;
  result.rows.resize(static_cast<std::size_t>(sizes.size() * static_cast<std::size_t>(draws)));

  for (std::size_t si = 0; si < sizes.size(); ++si) {
    const auto size = sizes[si];
    auto worker = [&, si, size](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t d = lo; d < hi; ++d) {
        Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(si) * static_cast<std::uint64_t>(draws) +
                                        static_cast<std::uint64_t>(d));
        JointSamplerConfig cfg{size, size, dropout_rate};
        const auto joint = sample_random_joint(cfg, rng);
        result.rows[si * static_cast<std::size_t>(draws) + static_cast<std::size_t>(d)] =
            MonotonicityRow{size, d, exact_mi(joint), exact_jsd(joint)};
      }
    };
    const int workers = std::max(1, threads);
    if (workers == 1) {
      worker(0, draws);
    } else {
      std::vector<std::thread> pool;
      const std::int64_t chunk = (draws + workers - 1) / workers;
      for (int w = 0; w < workers; ++w) {
        const auto lo = static_cast<std::int64_t>(w) * chunk;
        const auto hi = std::min(draws, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(worker, lo, hi);
      }
      for (auto& t : pool) t.join();
    }

    std::vector<double> mis, jsds;
    mis.reserve(static_cast<std::size_t>(draws));
    for (std::int64_t d = 0; d < draws; ++d) {
      const auto& row = result.rows[si * static_cast<std::size_t>(draws) + static_cast<std::size_t>(d)];
      mis.push_back(row.mi_nats);
      jsds.push_back(row.jsd_nats);
    }
    bool degenerate = false;
    const double rho = spearman_rho(mis, jsds, &degenerate);
    result.summary.push_back({size, rho, degenerate, draws});
  }
  return result;
}

}  // namespace infomax::discrete
