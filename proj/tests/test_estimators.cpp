#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "infomax/estimators.hpp"
#include "infomax/gradcheck.hpp"
#include "infomax/synth.hpp"

using namespace infomax;
using namespace infomax::mi;
using Catch::Approx;

namespace {

template <typename T>
ScoreMatrix<T> matrix_of(Shape shape, std::vector<T> values) {
  return ScoreMatrix<T>{Tensor<T>::from(std::move(shape), std::move(values))};
}

ScoreMatrix<double> random_matrix(Rng& rng, std::int64_t b, std::int64_t k, double lo = -3,
                                  double hi = 3) {
  return ScoreMatrix<double>{Tensor<double>::uniform({b, k}, rng, lo, hi)};
}

}  // namespace

TEST_CASE("dv estimate closed-form cases", "[estimators]") {
  // Constant zero critic: 0 - (ln N - ln N) = 0.
  auto zeros = matrix_of<double>({3, 4}, std::vector<double>(12, 0.0));
  CHECK(value(dv_estimate(zeros)) == Approx(0.0).margin(1e-12));

  // Positives at 1, negatives at 0: 1 - 0 = 1.
  std::vector<double> v(12, 0.0);
  for (int i = 0; i < 3; ++i) v[static_cast<std::size_t>(i * 4)] = 1.0;
  auto blocks = matrix_of<double>({3, 4}, std::move(v));
  CHECK(value(dv_estimate(blocks)) == Approx(1.0).margin(1e-12));

  auto too_small = matrix_of<double>({2, 1}, {0.0, 0.0});
  CHECK_THROWS_AS(dv_estimate(too_small), std::invalid_argument);
}

TEST_CASE("jsd estimate closed-form cases", "[estimators]") {
  auto zeros = matrix_of<double>({2, 3}, std::vector<double>(6, 0.0));
  CHECK(value(jsd_estimate(zeros)) == Approx(-2.0 * std::log(2.0)).epsilon(1e-12));

  // Saturated critic: positives +30, negatives -30 give an estimate near the
  // supremum 0 of this form.
  std::vector<double> v(6, -30.0);
  v[0] = 30.0;
  v[3] = 30.0;
  auto sat = matrix_of<double>({2, 3}, std::move(v));
  CHECK(std::abs(value(jsd_estimate(sat))) < 1e-9);

  // Constant critic c: -sp(-c) - sp(c), maximized at c = 0.
  auto at = [](double c) {
    auto sm = matrix_of<double>({2, 3}, std::vector<double>(6, c));
    return value(jsd_estimate(sm));
  };
  auto sp = [](double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0); };
  for (double c : {-2.0, 0.0, 2.0}) CHECK(at(c) == Approx(-sp(-c) - sp(c)).margin(1e-12));
  CHECK(at(0.0) > at(-2.0));
  CHECK(at(0.0) > at(2.0));
}

TEST_CASE("infonce estimate closed-form cases", "[estimators]") {
  // Uniform scores over K candidates: -ln K.
  auto zeros = matrix_of<double>({4, 8}, std::vector<double>(32, 0.0));
  CHECK(value(infonce_estimate(zeros)) == Approx(-std::log(8.0)).epsilon(1e-12));

  // Saturated: positive 30, negatives -30.
  std::vector<double> v(32, -30.0);
  for (int i = 0; i < 4; ++i) v[static_cast<std::size_t>(i * 8)] = 30.0;
  auto sat = matrix_of<double>({4, 8}, std::move(v));
  CHECK(std::abs(value(infonce_estimate(sat))) < 1e-9);

  auto too_small = matrix_of<double>({4, 1}, std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(infonce_estimate(too_small), std::invalid_argument);
}

TEST_CASE("estimator shift and permutation invariances", "[estimators]") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    auto sm = random_matrix(rng, 4, 6);
    const double dv0 = value(dv_estimate(sm));
    const double nce0 = value(infonce_estimate(sm));
    const double jsd0 = value(jsd_estimate(sm));

    // Adding a constant to every score cancels in DV and infoNCE.
    const double c = rng.uniform(-5, 5);
    auto shifted = ScoreMatrix<double>{add(sm.scores, Tensor<double>::scalar(c))};
    CHECK(value(dv_estimate(shifted)) == Approx(dv0).margin(1e-9));
    CHECK(value(infonce_estimate(shifted)) == Approx(nce0).margin(1e-9));

    // Permuting the negatives within a row changes nothing.
    auto permuted = sm.scores.clone();
    for (std::int64_t i = 0; i < 4; ++i) {
      auto p = rng.permutation(5);
      for (std::int64_t j = 0; j < 5; ++j)
        permuted.mut(i * 6 + 1 + j) = sm.scores.at({i, 1 + p[static_cast<std::size_t>(j)]});
    }
    auto psm = ScoreMatrix<double>{permuted};
    CHECK(value(dv_estimate(psm)) == Approx(dv0).margin(1e-12));
    CHECK(value(jsd_estimate(psm)) == Approx(jsd0).margin(1e-12));
    CHECK(value(infonce_estimate(psm)) == Approx(nce0).margin(1e-12));
  }
}

TEST_CASE("infonce never exceeds ln K", "[estimators]") {
  Rng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto b = static_cast<std::int64_t>(1 + rng.below(6));
    const auto k = static_cast<std::int64_t>(2 + rng.below(12));
    auto sm = random_matrix(rng, b, k, -30, 30);
    const double est = value(infonce_estimate(sm));
    CHECK(est <= std::log(static_cast<double>(k)) + 1e-9);
    CHECK(mi_scale(EstimatorKind::InfoNCE, est, k) <=
          std::log(static_cast<double>(k)) + 1e-9);
  }
}

TEST_CASE("estimators are differentiable", "[estimators]") {
  Rng rng(29);
  auto scores = Tensor<double>::uniform({3, 5}, rng, -2, 2);
  for (auto kind : {EstimatorKind::DV, EstimatorKind::JSD, EstimatorKind::InfoNCE}) {
    auto f = [kind](Tape<double>&, std::vector<Tensor<double>>& p) {
      return estimate(kind, ScoreMatrix<double>{p[0]});
    };
    auto rep = grad_check<double>(f, {scores}, 1e-5, 1e-5);
    INFO(estimator_name(kind));
    CHECK(rep.pass);
  }
}

TEST_CASE("build_score_matrix layouts and errors", "[estimators]") {
  Rng rng(31);
  CriticSpec spec;
  spec.kind = CriticSpec::Kind::Separable;
  spec.hidden = {8};
  spec.embed_dim = 4;
  auto critic = Critic<double>::make(2, 2, spec, rng);
  nn::Pass<double> ps;

  // Smallest case: B = 2 gives one positive and one negative per anchor.
  auto x2 = Tensor<double>::uniform({2, 2}, rng, -1, 1);
  auto y2 = Tensor<double>::uniform({2, 2}, rng, -1, 1);
  NegativeSamplingConfig cfg;
  auto sm = build_score_matrix(critic, ps, y2, x2, cfg, rng);
  CHECK(sm.anchors() == 2);
  CHECK(sm.candidates() == 2);

  // Column 0 holds the matched-pair score.
  auto all = critic.pair_scores(ps, y2, x2);
  CHECK(sm.scores.at({0, 0}) == all.at({0, 0}));
  CHECK(sm.scores.at({1, 0}) == all.at({1, 1}));
  CHECK(sm.scores.at({0, 1}) == all.at({0, 1}));
  CHECK(sm.scores.at({1, 1}) == all.at({1, 0}));

  // Keeping the positive in the marginal pool widens the row by one.
  auto x4 = Tensor<double>::uniform({4, 2}, rng, -1, 1);
  auto y4 = Tensor<double>::uniform({4, 2}, rng, -1, 1);
  auto excl = build_score_matrix(critic, ps, y4, x4, cfg, rng);
  CHECK(excl.candidates() == 4);
  NegativeSamplingConfig incl = cfg;
  incl.exclude_positive_from_marginals = false;
  auto kept = build_score_matrix(critic, ps, y4, x4, incl, rng);
  CHECK(kept.candidates() == 5);

  // Subsampling.
  NegativeSamplingConfig one = cfg;
  one.negatives_per_positive = 1;
  auto tiny = build_score_matrix(critic, ps, y4, x4, one, rng);
  CHECK(tiny.candidates() == 2);

  NegativeSamplingConfig toomany = cfg;
  toomany.negatives_per_positive = 4;  // only 3 others in a batch of 4
  CHECK_THROWS_AS(build_score_matrix(critic, ps, y4, x4, toomany, rng), std::invalid_argument);

  // Cross-batch negatives.
  NegativeSamplingConfig cross;
  cross.source = NegativeSamplingConfig::Source::CrossBatch;
  auto xneg = Tensor<double>::uniform({6, 2}, rng, -1, 1);
  auto csm = build_score_matrix(critic, ps, y4, x4, cross, rng, &xneg);
  CHECK(csm.candidates() == 7);
  CHECK_THROWS_AS(build_score_matrix(critic, ps, y4, x4, cross, rng), std::invalid_argument);
}

TEST_CASE("mine_fit is deterministic and ranks correlations", "[estimators][training]") {
  using namespace infomax::synth;
  auto make_stream = [](double corr) {
    return [corr](Rng& rng, std::int64_t n) {
      return sample_gaussian_pairs<double>({1, corr}, rng, n);
    };
  };
  MineOptions opt;
  opt.kind = EstimatorKind::DV;
  opt.critic.kind = CriticSpec::Kind::Separable;
  opt.critic.hidden = {64, 64};
  opt.critic.embed_dim = 32;
  opt.adam.lr0 = 5e-3;
  opt.adam.schedule = nn::Schedule::exp_decay(0.5, 150);
  opt.steps = 450;
  opt.batch = 64;
  opt.seed = 11;

  auto low = mine_fit<double>(make_stream(0.0), 1, 1, opt);
  auto high = mine_fit<double>(make_stream(0.9), 1, 1, opt);
  CHECK_FALSE(low.diverged);
  CHECK_FALSE(high.diverged);
  CHECK(static_cast<std::int64_t>(high.curve.size()) == opt.steps);
  CHECK(high.estimate > low.estimate + 0.1);

  auto rerun = mine_fit<double>(make_stream(0.9), 1, 1, opt);
  CHECK(rerun.estimate == high.estimate);  // same seed, same build
  for (std::size_t i = 0; i < high.curve.size(); i += 37)
    CHECK(rerun.curve[i].estimate == high.curve[i].estimate);
}
