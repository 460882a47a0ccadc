#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "infomax/discrete.hpp"

using namespace infomax;
using namespace infomax::discrete;
using Catch::Approx;

namespace {

DiscreteJoint product_joint(std::int64_t nx, std::int64_t ny) {
  DiscreteJoint j;
  j.nx = nx;
  j.ny = ny;
  j.p.assign(static_cast<std::size_t>(nx * ny), 1.0 / static_cast<double>(nx * ny));
  return j;
}

DiscreteJoint diagonal_joint(std::int64_t n) {
  DiscreteJoint j;
  j.nx = n;
  j.ny = n;
  j.p.assign(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    j.p[static_cast<std::size_t>(i * n + i)] = 1.0 / static_cast<double>(n);
  return j;
}

}  // namespace

TEST_CASE("sampler produces valid paper-style joints", "[discrete]") {
  Rng rng(3);
  JointSamplerConfig cfg{8, 8, 0.0};
  auto j = sample_random_joint(cfg, rng);
  j.validate();
  // No dropout: every entry strictly positive.
  for (const auto v : j.p) CHECK(v > 0.0);
  // Uniform p(x): row marginals are 1/n_x.
  for (const auto m : j.row_marginal()) CHECK(m == Approx(1.0 / 8.0).margin(1e-12));

  // Determinism.
  Rng a(9), b(9);
  JointSamplerConfig c2{16, 16, 0.5};
  auto j1 = sample_random_joint(c2, a);
  auto j2 = sample_random_joint(c2, b);
  REQUIRE(j1.p == j2.p);

  // Sampled joints always satisfy the type invariants.
  Rng r(11);
  for (int draw = 0; draw < 50; ++draw) {
    auto sample = sample_random_joint({12, 12, 0.7}, r);
    sample.validate();
    CHECK(exact_mi(sample) >= 0.0);
    const double jsd = exact_jsd(sample);
    CHECK(jsd >= 0.0);
    CHECK(jsd <= std::log(2.0) + 1e-12);
  }

  CHECK_THROWS_AS(sample_random_joint({8, 8, 1.0}, rng), std::invalid_argument);
}

TEST_CASE("high dropout drives rows to one-hot and MI to the hot-column entropy",
          "[discrete]") {
  Rng rng(13);
  // At this rate a surviving row keeps a single entry with probability
  // ~0.9996, so all eight rows come out exactly one-hot.
  JointSamplerConfig cfg{8, 8, 0.9999};
  auto j = sample_random_joint(cfg, rng);
  j.validate();
  std::map<std::int64_t, int> hot_count;
  for (std::int64_t i = 0; i < 8; ++i) {
    double best = 0.0;
    std::int64_t hot = -1;
    for (std::int64_t k = 0; k < 8; ++k)
      if (j.at(i, k) > best) {
        best = j.at(i, k);
        hot = k;
      }
    // A single surviving entry takes the whole row: exactly one-hot.
    CHECK(best == Approx(1.0 / 8.0).margin(1e-12));
    hot_count[hot]++;
  }
  // With one-hot rows, MI equals the entropy of the hot-column histogram,
  // which hits ln n exactly when the hot columns are distinct.
  double expected = 0.0;
  for (const auto& [col, count] : hot_count) {
    const double q = static_cast<double>(count) / 8.0;
    expected -= q * std::log(q);
  }
  CHECK(exact_mi(j) == Approx(expected).margin(1e-12));
  CHECK(exact_mi(j) <= std::log(8.0) + 1e-12);
}

TEST_CASE("exact MI closed-form cases", "[discrete]") {
  CHECK(exact_mi(product_joint(4, 6)) == Approx(0.0).margin(1e-12));
  CHECK(exact_mi(diagonal_joint(8)) == Approx(std::log(8.0)).epsilon(1e-12));
  CHECK(std::log(8.0) == Approx(2.079442).margin(1e-6));

  DiscreteJoint j{2, 2, {0.4, 0.1, 0.1, 0.4}};
  j.validate();
  CHECK(exact_mi(j) == Approx(0.192744757021758).margin(1e-12));
}

TEST_CASE("exact JSD closed-form cases and the second summation order", "[discrete]") {
  CHECK(exact_jsd(product_joint(5, 3)) == Approx(0.0).margin(1e-12));

  DiscreteJoint j{2, 2, {0.4, 0.1, 0.1, 0.4}};
  const double jsd = exact_jsd(j);
  CHECK(jsd == Approx(0.050671836985566).margin(1e-12));

  // Independent oracle: same quantity accumulated column-major.
  const auto px = j.row_marginal();
  const auto py = j.col_marginal();
  double acc = 0.0;
  for (std::int64_t col = 0; col < 2; ++col)
    for (std::int64_t row = 0; row < 2; ++row) {
      const double p = j.at(row, col);
      const double q = px[static_cast<std::size_t>(row)] * py[static_cast<std::size_t>(col)];
      const double m = 0.5 * (p + q);
      if (p > 0) acc += 0.5 * p * std::log(p / m);
      if (q > 0) acc += 0.5 * q * std::log(q / m);
    }
  CHECK(jsd == Approx(acc).margin(1e-15));

  // JSD of a maximally dependent joint approaches but never exceeds ln 2.
  CHECK(exact_jsd(diagonal_joint(64)) <= std::log(2.0) + 1e-12);
}

TEST_CASE("MI is invariant under row and column relabeling", "[discrete]") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    auto j = sample_random_joint({6, 6, 0.5}, rng);
    const double mi = exact_mi(j);
    auto rp = rng.permutation(6);
    auto cp = rng.permutation(6);
    DiscreteJoint relabeled{6, 6, std::vector<double>(36, 0.0)};
    for (std::int64_t i = 0; i < 6; ++i)
      for (std::int64_t k = 0; k < 6; ++k)
        relabeled.p[static_cast<std::size_t>(rp[static_cast<std::size_t>(i)] * 6 +
                                             cp[static_cast<std::size_t>(k)])] = j.at(i, k);
    CHECK(exact_mi(relabeled) == Approx(mi).margin(1e-12));
    CHECK(exact_jsd(relabeled) == Approx(exact_jsd(j)).margin(1e-12));
  }
}

TEST_CASE("spearman rank correlation", "[discrete]") {
  CHECK(spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}) == Approx(1.0));
  CHECK(spearman_rho({1, 2, 3, 4}, {4, 3, 2, 1}) == Approx(-1.0));
  // Monotone but nonlinear: rank correlation is still 1.
  CHECK(spearman_rho({1, 2, 3, 4}, {1, 8, 27, 256}) == Approx(1.0));

  bool degenerate = false;
  const double rho = spearman_rho({1, 1, 1}, {2, 5, 3}, &degenerate);
  CHECK(degenerate);
  CHECK(rho == 0.0);

  CHECK_THROWS_AS(spearman_rho({1}, {2}), std::invalid_argument);
}

TEST_CASE("monotonicity experiment at reduced scale", "[discrete]") {
  auto result = monotonicity_experiment({8, 16}, 100, 0.5, 12345, 1);
  REQUIRE(result.summary.size() == 2);
  for (const auto& s : result.summary) {
    INFO("size " << s.size << " rho " << s.spearman);
    CHECK_FALSE(s.degenerate);
    CHECK(s.spearman >= 0.9);
  }
  REQUIRE(result.rows.size() == 200);

  // Thread count must not change the result.
  auto threaded = monotonicity_experiment({8, 16}, 100, 0.5, 12345, 2);
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    REQUIRE(threaded.rows[i].mi_nats == result.rows[i].mi_nats);
    REQUIRE(threaded.rows[i].jsd_nats == result.rows[i].jsd_nats);
  }

  CHECK_THROWS_AS(monotonicity_experiment({8}, 1, 0.5, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(monotonicity_experiment({1}, 10, 0.5, 1, 1), std::invalid_argument);
}
