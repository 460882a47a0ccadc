#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "infomax/dim.hpp"
#include "infomax/gradcheck.hpp"
#include "infomax/synth.hpp"

using namespace infomax;
using namespace infomax::dim;
using Catch::Approx;

namespace {

EncoderConfig toy_encoder_config() {
  return EncoderConfig{};  // 16x16x1, convs {32, 64} stride 2, fc 256, global 64
}

// Small stack for gradient checks: 8x8 input -> M = 2.
DimModelConfig small_model_config(ScorerKind local_kind, bool zero_heads) {
  DimModelConfig cfg;
  cfg.encoder.in_h = 8;
  cfg.encoder.in_w = 8;
  cfg.encoder.conv_channels = {4, 8};
  cfg.encoder.fc_hidden = 16;
  cfg.encoder.global_dim = 8;
  cfg.global_scorer = ScorerConfig{ScorerKind::ConcatConvolve, {8}, 8, zero_heads};
  cfg.local_scorer = ScorerConfig{local_kind, {8}, 8, zero_heads};
  cfg.prior.hidden = {16, 8};
  cfg.prior.zero_head_init = zero_heads;
  return cfg;
}

template <typename T>
Tensor<T> toy_batch(Rng& rng, std::int64_t b, std::int64_t size) {
  return Tensor<T>::uniform({b, 1, size, size}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("encoder shapes for the toy configuration", "[dim]") {
  Rng rng(3);
  auto enc = DimEncoder<double>::make(toy_encoder_config(), rng);
  CHECK(enc.map_size() == 4);
  CHECK(enc.local_dim() == 64);

  nn::Pass<double> ps;
  ps.train = true;
  auto x = toy_batch<double>(rng, 3, 16);
  auto out = enc.encode(ps, x);
  CHECK(out.local.shape == Shape{3, 64, 4, 4});
  CHECK(out.global.shape == Shape{3, 64});

  // Global output lives in (0, 1) thanks to the sigmoid head.
  for (std::int64_t i = 0; i < out.global.size(); ++i) {
    CHECK((*out.global.data)[i] > 0.0);
    CHECK((*out.global.data)[i] < 1.0);
  }

  // The global feature is computed from the same local map it is scored with.
  nn::Pass<double> ps2;
  ps2.train = true;
  auto local = enc.local_map(ps2, x);
  // (batchnorm running stats moved; eval-mode check instead)
  nn::Pass<double> eval_ps;
  auto a = enc.encode(eval_ps, x);
  auto b = enc.global_from_local(eval_ps, enc.local_map(eval_ps, x));
  for (std::int64_t i = 0; i < a.global.size(); ++i)
    CHECK((*a.global.data)[i] == (*b.data)[i]);
  (void)local;
}

TEST_CASE("encoder determinism and batch-size preconditions", "[dim]") {
  Rng rng(5);
  auto enc = DimEncoder<double>::make(toy_encoder_config(), rng);
  auto x = toy_batch<double>(rng, 2, 16);

  nn::Pass<double> eval_ps;
  auto e1 = enc.encode(eval_ps, x);
  auto e2 = enc.encode(eval_ps, x);
  for (std::int64_t i = 0; i < e1.global.size(); ++i)
    CHECK((*e1.global.data)[i] == (*e2.global.data)[i]);

  auto one = toy_batch<double>(rng, 1, 16);
  auto ok = enc.encode(eval_ps, one);  // eval mode accepts B = 1
  CHECK(ok.global.shape == Shape{1, 64});
  nn::Pass<double> train_ps;
  train_ps.train = true;
  CHECK_THROWS_AS(enc.encode(train_ps, one), std::invalid_argument);

  auto wrong = Tensor<double>::zeros({2, 1, 12, 12});
  CHECK_THROWS_AS(enc.encode(eval_ps, wrong), std::invalid_argument);
}

TEST_CASE("untrained objectives start at their uninformative values", "[dim]") {
  Rng rng(7);
  auto cfg = small_model_config(ScorerKind::EncodeDot, /*zero_heads=*/true);
  auto model = DimModel<double>::make(cfg, rng);
  auto x = toy_batch<double>(rng, 4, 8);

  Tape<double> tape;
  nn::Pass<double> ps;
  ps.tape = &tape;
  ps.train = true;
  auto enc = model.encoder.encode(ps, x);
  NegativeSamplingConfig neg;
  Rng sub(1);

  // JSD: scores are exactly zero at init, so the loss is exactly 2 ln 2.
  auto g_loss = global_mi_objective(ps, enc, model.global_scorer, EstimatorKind::JSD, neg, sub);
  CHECK(value(g_loss) == Approx(2.0 * std::log(2.0)).margin(1e-12));
  CHECK(std::abs(value(g_loss) - 2.0 * std::log(2.0)) < 0.3);  // the as-stated envelope

  auto l_loss = local_mi_objective(ps, enc, model.local_scorer, EstimatorKind::JSD, neg, sub);
  CHECK(value(l_loss) == Approx(2.0 * std::log(2.0)).margin(1e-12));

  // Prior discriminator starts at D = 1/2: loss 2 ln 2.
  auto v = sample_prior<double>(model.cfg.prior, rng, 4);
  auto d_loss = prior_d_loss(ps, model.prior_disc, v, enc.global.detached());
  CHECK(value(d_loss) == Approx(2.0 * std::log(2.0)).margin(1e-12));
}

TEST_CASE("local objective at M=1 equals the global objective", "[dim]") {
  // 4x4 input with two stride-2 convs collapses the map to a single location.
  for (auto kind : {ScorerKind::ConcatConvolve, ScorerKind::EncodeDot}) {
    DimModelConfig cfg = small_model_config(kind, /*zero_heads=*/false);
    cfg.encoder.in_h = 4;
    cfg.encoder.in_w = 4;
    Rng rng(11);
    auto model = DimModel<double>::make(cfg, rng);
    REQUIRE(model.encoder.map_size() == 1);

    Rng data_rng(13);
    auto x = toy_batch<double>(data_rng, 5, 4);
    nn::Pass<double> ps;
    ps.train = true;
    ps.update_stats = false;
    auto enc = model.encoder.encode(ps, x);

    NegativeSamplingConfig neg;
    for (auto est : {EstimatorKind::DV, EstimatorKind::JSD, EstimatorKind::InfoNCE}) {
      Rng r1(1), r2(1);
      // Same scorer instance on both paths: at M=1 the flattened map and the
      // single-location feature rows are the same matrix.
      auto g = global_mi_objective(ps, enc, model.local_scorer, est, neg, r1);
      auto l = local_mi_objective(ps, enc, model.local_scorer, est, neg, r2);
      INFO(scorer_name(kind) << " / " << mi::estimator_name(est));
      CHECK(std::abs(value(g) - value(l)) < 1e-6);
    }
  }
}

TEST_CASE("local objective candidate counting", "[dim]") {
  Rng rng(17);
  DimModelConfig cfg;
  cfg.encoder = toy_encoder_config();  // M = 4 -> M^2 = 16
  cfg.local_scorer = ScorerConfig{ScorerKind::EncodeDot, {16}, 16, false};
  cfg.global_scorer = ScorerConfig{ScorerKind::ConcatConvolve, {16}, 16, false};
  cfg.prior.hidden = {8};
  auto model = DimModel<double>::make(cfg, rng);

  auto x = toy_batch<double>(rng, 4, 16);
  nn::Pass<double> ps;
  ps.train = true;
  auto enc = model.encoder.encode(ps, x);

  // Cross-score grid: 4 anchors x (4 images * 16 locations) = 4 x 64.
  auto rows = local_feature_rows(enc.local);
  CHECK(rows.shape == Shape{64, 64});
  nn::Pass<double> sps;
  auto scores = model.local_scorer.cross_scores(sps, rows, enc.global);
  CHECK(scores.shape == Shape{4, 64});

  // Excluding positives: 3 * 16 = 48 negatives per anchor-location.
  ObjectiveStats stats;
  NegativeSamplingConfig neg;
  Rng sub(1);
  local_mi_objective(ps, enc, model.local_scorer, EstimatorKind::JSD, neg, sub, &stats);
  CHECK(stats.candidates == 49);  // 1 positive + 48 negatives
}

TEST_CASE("total_loss weighting and validation", "[dim]") {
  auto g = Tensor<double>::scalar(2.0);
  auto l = Tensor<double>::scalar(3.0);
  auto p = Tensor<double>::scalar(5.0);

  auto dim_g = DimHyperparams::dim_g();
  CHECK(dim_g.alpha == 1.0);
  CHECK(dim_g.beta == 0.0);
  CHECK(dim_g.gamma == 1.0);
  CHECK(value(total_loss<double>(dim_g, &g, nullptr, &p)) == Approx(7.0));

  auto dim_l = DimHyperparams::dim_l();
  CHECK(dim_l.alpha == 0.0);
  CHECK(dim_l.beta == 1.0);
  CHECK(dim_l.gamma == 0.1);
  CHECK(value(total_loss<double>(dim_l, nullptr, &l, &p)) == Approx(3.5));

  auto lg = DimHyperparams::dim_lg(0.2);
  CHECK(lg.alpha == 0.5);
  CHECK(lg.beta == 0.1);
  CHECK(value(total_loss<double>(lg, &g, &l, &p)) == Approx(1.0 + 0.3 + 1.0));

  DimHyperparams zero;
  zero.alpha = zero.beta = zero.gamma = 0.0;
  CHECK_THROWS_AS(total_loss<double>(zero, &g, &l, &p), std::invalid_argument);
  CHECK_THROWS_AS(total_loss<double>(dim_l, nullptr, nullptr, &p), std::invalid_argument);
}

TEST_CASE("gradient isolation between encoder and prior discriminator", "[dim]") {
  Rng rng(19);
  auto cfg = small_model_config(ScorerKind::EncodeDot, false);
  auto model = DimModel<double>::make(cfg, rng);
  auto x = toy_batch<double>(rng, 4, 8);

  // gamma = 0: the prior discriminator is never touched.
  {
    auto h = DimHyperparams::dim_l();
    h.gamma = 0.0;
    nn::AdamConfig acfg;
    acfg.lr0 = 1e-3;
    auto main_params = model.main_params();
    auto prior_params = model.prior_params();
    std::vector<std::vector<double>> before;
    for (auto* p : prior_params) before.push_back(*p->data);
    nn::Adam<double> opt_main(acfg, main_params);
    nn::Adam<double> opt_prior(acfg, prior_params);
    Rng step_rng(23);
    NegativeSamplingConfig neg;
    dim_train_step(model, x, h, neg, opt_main, opt_prior, step_rng);
    for (std::size_t i = 0; i < prior_params.size(); ++i)
      for (std::size_t j = 0; j < before[i].size(); ++j)
        REQUIRE((*prior_params[i]->data)[j] == before[i][j]);
  }

  // alpha = beta = 0: encoder gradients come only from the prior term, and
  // the scorers receive none.
  {
    DimHyperparams h;
    h.alpha = 0.0;
    h.beta = 0.0;
    h.gamma = 1.0;
    Tape<double> tape;
    nn::Pass<double> ps;
    ps.tape = &tape;
    ps.train = true;
    Rng step_rng(29);
    ps.rng = &step_rng;
    auto enc = model.encoder.encode(ps, x);
    auto p_loss = prior_e_loss(ps, model.prior_disc, enc.global, false);
    auto objective = total_loss<double>(h, nullptr, nullptr, &p_loss);
    tape.backward(objective);

    const auto* kernel_grad = ps.grad_of(model.encoder.convs[0].kernel);
    REQUIRE(kernel_grad != nullptr);
    double norm = 0;
    for (const auto g : *kernel_grad) norm += g * g;
    CHECK(norm > 0.0);

    std::vector<Tensor<double>*> scorer_params;
    model.local_scorer.collect(scorer_params);
    model.global_scorer.collect(scorer_params);
    for (auto* p : scorer_params) CHECK(ps.grad_of(*p) == nullptr);
  }
}

TEST_CASE("dim_train_step smoke, determinism, and metrics", "[dim][training]") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto cfg = small_model_config(ScorerKind::EncodeDot, true);
    auto model = DimModel<double>::make(cfg, rng);
    nn::AdamConfig acfg;
    acfg.lr0 = 1e-3;
    auto main_params = model.main_params();
    auto prior_params = model.prior_params();
    nn::Adam<double> opt_main(acfg, main_params);
    nn::Adam<double> opt_prior(acfg, prior_params);
    DimHyperparams h;  // DIM(L) defaults with infoNCE
    NegativeSamplingConfig neg;
    Rng data_rng(seed + 1);
    Rng step_rng(seed + 2);
    std::vector<double> totals;
    for (int step = 0; step < 10; ++step) {
      auto x = toy_batch<double>(data_rng, 2, 8);  // minimal batch
      auto metrics = dim_train_step(model, x, h, neg, opt_main, opt_prior, step_rng);
      totals.push_back(metrics.total);
    }
    return totals;
  };
  auto a = run(101);
  auto b = run(101);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bit-identical streams
  auto c = run(202);
  CHECK(a != c);
}

TEST_CASE("batch permutation equivariance of the objectives", "[dim]") {
  Rng rng(31);
  auto cfg = small_model_config(ScorerKind::EncodeDot, false);
  auto model = DimModel<double>::make(cfg, rng);
  auto x = toy_batch<double>(rng, 5, 8);

  // Swap batch elements 1 and 3 consistently.
  auto swapped = x.clone();
  const auto per = x.shape[1] * x.shape[2] * x.shape[3];
  for (std::int64_t k = 0; k < per; ++k)
    std::swap(swapped.mut(1 * per + k), swapped.mut(3 * per + k));

  NegativeSamplingConfig neg;
  auto loss_of = [&](const Tensor<double>& batch, auto objective_fn) {
    nn::Pass<double> ps;
    ps.train = true;
    ps.update_stats = false;
    auto enc = model.encoder.encode(ps, batch);
    Rng sub(1);
    return value(objective_fn(ps, enc, sub));
  };
  for (auto est : {EstimatorKind::DV, EstimatorKind::JSD, EstimatorKind::InfoNCE}) {
    auto global_fn = [&](nn::Pass<double>& ps, const DimEncoder<double>::Encoded& enc, Rng& sub) {
      return global_mi_objective(ps, enc, model.global_scorer, est, neg, sub);
    };
    auto local_fn = [&](nn::Pass<double>& ps, const DimEncoder<double>::Encoded& enc, Rng& sub) {
      return local_mi_objective(ps, enc, model.local_scorer, est, neg, sub);
    };
    CHECK(loss_of(x, global_fn) == Approx(loss_of(swapped, global_fn)).margin(1e-6));
    CHECK(loss_of(x, local_fn) == Approx(loss_of(swapped, local_fn)).margin(1e-6));
  }
}

TEST_CASE("full model gradcheck for each scorer and estimator", "[dim][slow]") {
  for (auto kind : {ScorerKind::ConcatConvolve, ScorerKind::EncodeDot}) {
    Rng rng(37);
    auto cfg = small_model_config(kind, /*zero_heads=*/false);
    // Normalizer eps values are raised for this check only: a relu-dead row
    // or a low-variance channel puts batchnorm/layer-norm in a regime whose
    // curvature scales like eps^(-3/2), beyond central-difference resolution.
    // The gradient formulas under test are the same at any eps.
    cfg.local_scorer.ln_eps = 1e-1;
    auto model = DimModel<double>::make(cfg, rng);
    for (auto& bn : model.encoder.conv_norms) bn.eps = 1e-2;
    model.encoder.fc_norm.eps = 1e-2;
    auto x = toy_batch<double>(rng, 2, 8);
    auto v = sample_prior<double>(model.cfg.prior, rng, 2);
    (void)v;

    std::vector<Tensor<double>*> param_ptrs = model.main_params();
    {
      std::vector<Tensor<double>*> prior_ptrs = model.prior_params();
      param_ptrs.insert(param_ptrs.end(), prior_ptrs.begin(), prior_ptrs.end());
    }
    std::vector<Tensor<double>> params;
    for (auto* p : param_ptrs) params.push_back(*p);

    for (auto est : {EstimatorKind::DV, EstimatorKind::JSD, EstimatorKind::InfoNCE}) {
      auto f = [&](Tape<double>& tape, std::vector<Tensor<double>>& p) {
        // Wire the tracked parameters into a model copy.
        auto local = model;
        std::vector<Tensor<double>*> ptrs = local.main_params();
        auto prior_ptrs = local.prior_params();
        ptrs.insert(ptrs.end(), prior_ptrs.begin(), prior_ptrs.end());
        for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = p[i];
        nn::Pass<double> ps;
        ps.tape = &tape;
        ps.train = true;
        ps.update_stats = false;
        auto enc = local.encoder.encode(ps, x);
        NegativeSamplingConfig neg;
        Rng sub(1);
        DimHyperparams h;
        h.alpha = 1.0;
        h.beta = 1.0;
        h.gamma = 1.0;
        h.estimator = est;
        auto g_loss = global_mi_objective(ps, enc, local.global_scorer, est, neg, sub);
        auto l_loss = local_mi_objective(ps, enc, local.local_scorer, est, neg, sub);
        auto p_loss = prior_e_loss(ps, local.prior_disc, enc.global, false);
        return total_loss<double>(h, &g_loss, &l_loss, &p_loss);
      };
      // fd step 1e-4: several parameters here have structurally tiny
      // gradients (a 2-sample batchnorm flattens everything upstream of the
      // fc layer), so a smaller step leaves the check measuring fd roundoff
      // against the 1e-8 relative-error floor.
      auto rep = grad_check<double>(f, params, 1e-4, 1e-3);
      INFO(scorer_name(kind) << " / " << mi::estimator_name(est) << " err " << rep.max_rel_err);
      CHECK(rep.pass);
    }
  }
}

TEST_CASE("probe training leaves the encoder checkpoint bit-identical", "[dim][training]") {
  Rng rng(41);
  auto enc = DimEncoder<double>::make(toy_encoder_config(), rng);
  synth::ToyImageSpec spec;
  Rng data_rng(43);
  auto [images, labels] = synth::sample_toy_images<double>(spec, data_rng, 256);
  auto features = encode_dataset(enc, images);
  CHECK(features.shape == Shape{256, 64});

  std::vector<Tensor<double>*> params;
  enc.collect(params);
  std::vector<std::vector<double>> before;
  for (auto* p : params) before.push_back(*p->data);

  synth::ProbeSpec pspec;
  pspec.epochs = 5;
  Rng prng(47);
  synth::train_probe(features, labels, pspec, prng);

  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < before[i].size(); ++j)
      REQUIRE((*params[i]->data)[j] == before[i][j]);
}
