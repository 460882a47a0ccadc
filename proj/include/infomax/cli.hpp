#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "infomax/config.hpp"
#include "infomax/csv.hpp"
#include "infomax/dim.hpp"
#include "infomax/discrete.hpp"
#include "infomax/estimators.hpp"
#include "infomax/gradcheck.hpp"
#include "infomax/io.hpp"
#include "infomax/manifest.hpp"
#include "infomax/ndm.hpp"
#include "infomax/nn.hpp"
#include "infomax/structure.hpp"
#include "infomax/synth.hpp"

namespace infomax::cli {

inline constexpr const char* kVersion = "0.1.0";

struct RunContext {
  config::IniConfig cfg;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string subcommand;
  bool quiet = false;
};

namespace detail {

inline int env_threads() {
  if (const char* env = std::getenv("INFOMAX_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const auto hw = static_cast<int>(std::thread::hardware_concurrency());
  return hw > 0 ? hw : 1;
}

// Deterministic sweep execution: fn(i) owns index i, results must be stored
// by index so thread count never changes any output.
template <typename Fn>
void parallel_indexed(std::int64_t n, int threads, Fn&& fn) {
  const int workers = static_cast<int>(std::min<std::int64_t>(std::max(1, threads), n));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (true) {
        const auto i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  for (auto& t : pool) t.join();
}

inline void write_labels_csv(const std::filesystem::path& path, const std::vector<int>& labels) {
  CsvWriter csv(path, {"index", "label"});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    csv.field(static_cast<std::int64_t>(i)).field(static_cast<std::int64_t>(labels[i]));
    csv.end_row();
  }
}

inline std::vector<int> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open labels file: " + path.string());
  std::vector<int> labels;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("malformed labels line: " + line);
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  return labels;
}

inline mi::CriticSpec critic_from_config(const config::IniConfig& cfg) {
  mi::CriticSpec spec;
  const auto kind = cfg.get_string("eval", "critic", "separable");
  if (kind == "separable") spec.kind = mi::CriticSpec::Kind::Separable;
  else if (kind == "joint") spec.kind = mi::CriticSpec::Kind::Joint;
  else throw config::ConfigError("eval.critic: expected joint or separable, got " + kind);
  spec.hidden = cfg.get_int_list("eval", "critic_hidden", "64,64");
  spec.embed_dim = cfg.get_int("eval", "critic_embed", 32);
  return spec;
}

inline nn::AdamConfig adam_from_config(const config::IniConfig& cfg, double default_lr,
                                       std::int64_t steps) {
  nn::AdamConfig adam;
  adam.lr0 = cfg.get_double("optimizer", "lr0", default_lr);
  const auto schedule = cfg.get_string("optimizer", "schedule", "exp-decay");
  if (schedule == "constant") {
    adam.schedule = nn::Schedule::constant();
  } else if (schedule == "exp-decay") {
    auto interval = cfg.get_int("optimizer", "decay_interval", 0);
    if (interval <= 0) interval = std::max<std::int64_t>(1, steps / 3);
    adam.schedule = nn::Schedule::exp_decay(cfg.get_double("optimizer", "decay_rate", 0.5), interval);
  } else {
    throw config::ConfigError("optimizer.schedule: expected constant or exp-decay, got " + schedule);
  }
  return adam;
}

inline std::vector<mi::EstimatorKind> estimators_from_config(const config::IniConfig& cfg,
                                                             const char* fallback) {
  std::vector<mi::EstimatorKind> kinds;
  for (const auto& name : cfg.get_list("eval", "estimators", fallback)) {
    if (name == "all") {
      return {mi::EstimatorKind::DV, mi::EstimatorKind::JSD, mi::EstimatorKind::InfoNCE};
    }
    kinds.push_back(mi::estimator_from_name(name));
  }
  if (kinds.empty()) throw config::ConfigError("eval.estimators: empty list");
  return kinds;
}

inline const std::set<std::string> kRunKeys = {"seed", "dtype", "out_dir"};

}  // namespace detail

// ---------------------------------------------------------------------------
// gradcheck: finite-difference verification of every differentiable op plus
// both scorer architectures, 20 seeded cases each at float64.

inline int cmd_gradcheck(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known({{"run", detail::kRunKeys},
                         {"eval", {"cases", "tolerance"}}});
  const auto cases = ctx.cfg.get_int("eval", "cases", 20);
  const auto tol = ctx.cfg.get_double("eval", "tolerance", 1e-4);
  using T = double;  // verification always runs at float64

  struct Entry {
    std::string op;
    std::int64_t case_id;
    double err;
  };
  std::vector<Entry> entries;

  auto run_case = [&](const std::string& op, std::int64_t case_id, auto&& f,
                      std::vector<Tensor<T>> params, double eps) {
    auto rep = grad_check<T>(f, std::move(params), static_cast<T>(eps), tol);
    entries.push_back({op, case_id, rep.max_rel_err});
  };

  for (std::int64_t c = 0; c < cases; ++c) {
    Rng rng(static_cast<std::uint64_t>(1000 + c));
    const auto rows = static_cast<std::int64_t>(2 + rng.below(4));
    const auto cols = static_cast<std::int64_t>(2 + rng.below(4));
    auto a = Tensor<T>::uniform({rows, cols}, rng, -1, 1);
    for (auto& v : *a.data) v += v >= 0 ? T(0.15) : T(-0.15);
    auto b = Tensor<T>::uniform({rows, cols}, rng, -1, 1);
    for (auto& v : *b.data) v += v >= 0 ? T(0.15) : T(-0.15);
    auto pos = Tensor<T>::uniform({rows, cols}, rng, 0.5, 2.0);
    auto w = Tensor<T>::uniform({rows, cols}, rng, -1, 1);

    run_case("add", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(add(p[0], p[1]), w)); }, {a, b}, 1e-5);
    run_case("sub", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(sub(p[0], p[1]), w)); }, {a, b}, 1e-5);
    run_case("mul", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(mul(p[0], p[1]), w)); }, {a, b}, 1e-5);
    run_case("div", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(div(p[0], p[1]), w)); }, {a, b}, 1e-5);
    run_case("relu", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(relu(p[0]), w)); }, {a}, 1e-5);
    run_case("softplus", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(softplus(p[0]), w)); }, {a}, 1e-5);
    run_case("sigmoid", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(sigmoid(p[0]), w)); }, {a}, 1e-5);
    run_case("exp", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(exp(p[0]), w)); }, {a}, 1e-5);
    run_case("log", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(log(p[0]), w)); }, {pos}, 1e-5);
    run_case("neg", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(neg(p[0]), w)); }, {a}, 1e-5);
    run_case("sqrt", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(sqrt(p[0]), w)); }, {pos}, 1e-5);
    run_case("matmul", c,
             [&](Tape<T>&, std::vector<Tensor<T>>& p) {
               return mean(mul(matmul(p[0], transpose2d(p[1])), mul(w, w)));
             },
             {a, b}, 1e-5);
    run_case("reduce_sum", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(sum(p[0], 1), sum(w, 1))); }, {a}, 1e-5);
    run_case("reduce_mean", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(mean(p[0], 0), mean(w, 0))); }, {a}, 1e-5);
    run_case("logsumexp", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(logsumexp(p[0], 1), sum(w, 1))); }, {a}, 1e-5);
    run_case("reduce_max", c, [&](Tape<T>&, std::vector<Tensor<T>>& p) { return mean(mul(reduce_max(p[0], 1), sum(w, 1))); }, {a}, 1e-5);

    {
      Rng crng(static_cast<std::uint64_t>(2000 + c));
      auto x = Tensor<T>::uniform({2, 2, 6, 6}, crng, -1, 1);
      auto kernel = Tensor<T>::uniform({3, 2, 3, 3}, crng, -0.5, 0.5);
      auto readout = Tensor<T>::uniform({2, 3, 3, 3}, crng, -1, 1);
      run_case("conv2d", c,
               [&](Tape<T>&, std::vector<Tensor<T>>& p) {
                 return mean(mul(conv2d(p[0], p[1], 2, Pad::Same), readout));
               },
               {x, kernel}, 1e-5);
    }
    {
      Rng brng(static_cast<std::uint64_t>(3000 + c));
      auto x = Tensor<T>::uniform({6, 3}, brng, -2, 2);
      auto readout = Tensor<T>::uniform({6, 3}, brng, -1, 1);
      auto gamma = Tensor<T>::uniform({3}, brng, 0.8, 1.2);
      auto beta = Tensor<T>::uniform({3}, brng, -0.2, 0.2);
      run_case("batchnorm", c,
               [&](Tape<T>& tape, std::vector<Tensor<T>>& p) {
                 nn::BatchNorm<T> bn = nn::BatchNorm<T>::make(3);
                 bn.gamma = p[1];
                 bn.beta = p[2];
                 nn::Pass<T> ps;
                 ps.tape = &tape;
                 ps.train = true;
                 ps.update_stats = false;
                 return mean(mul(bn.forward(ps, p[0]), readout));
               },
               {x, gamma, beta}, 1e-5);
    }
    {
      Rng lrng(static_cast<std::uint64_t>(4000 + c));
      auto layer = nn::Linear<T>::make(5, 4, nn::Init::Glorot, lrng);
      auto x = Tensor<T>::uniform({3, 5}, lrng, -1, 1);
      auto readout = Tensor<T>::uniform({3, 4}, lrng, -1, 1);
      run_case("linear", c,
               [&](Tape<T>&, std::vector<Tensor<T>>& p) {
                 return mean(mul(add_bias(matmul(x, transpose2d(p[0])), p[1]), readout));
               },
               {layer.weight, layer.bias}, 1e-5);
    }

    // Both scorer architectures on (local rows, globals) pairs.
    for (const auto kind : {dim::ScorerKind::ConcatConvolve, dim::ScorerKind::EncodeDot}) {
      Rng srng(static_cast<std::uint64_t>(5000 + c));
      dim::ScorerConfig scfg;
      scfg.kind = kind;
      scfg.hidden = {12};
      scfg.embed_dim = 12;
      scfg.zero_head_init = false;
      scfg.ln_eps = 1e-2;  // keeps the fd oracle inside its resolution
      auto scorer = dim::LocalScorer<T>::make(6, 5, scfg, srng);
      auto locals = Tensor<T>::uniform({8, 6}, srng, -1, 1);
      auto globals = Tensor<T>::uniform({4, 5}, srng, 0, 1);
      std::vector<Tensor<T>*> ptrs;
      scorer.collect(ptrs);
      std::vector<Tensor<T>> params;
      for (auto* p : ptrs) params.push_back(*p);
      auto readout = Tensor<T>::uniform({4, 8}, srng, -1, 1);
      run_case(std::string("scorer_") + dim::scorer_name(kind), c,
               [&](Tape<T>& tape, std::vector<Tensor<T>>& p) {
                 auto local_scorer = scorer;
                 std::vector<Tensor<T>*> inner;
                 local_scorer.collect(inner);
                 for (std::size_t i = 0; i < inner.size(); ++i) *inner[i] = p[i];
                 nn::Pass<T> ps;
                 ps.tape = &tape;
                 return mean(mul(local_scorer.cross_scores(ps, locals, globals), readout));
               },
               params, 1e-4);
    }
  }

  bool all_pass = true;
  {
    CsvWriter csv(ctx.out_dir / "gradcheck.csv", {"op", "case", "max_rel_err", "pass"});
    for (const auto& e : entries) {
      const bool pass = e.err <= tol;
      all_pass = all_pass && pass;
      csv.field(e.op).field(e.case_id).field(e.err).field(std::string(pass ? "1" : "0"));
      csv.end_row();
    }
  }
  man.add_file("gradcheck.csv");
  if (!ctx.quiet)
    std::cout << "gradcheck: " << entries.size() << " checks, tolerance " << tol
              << (all_pass ? ", all passed\n" : ", FAILURES present\n");
  if (!all_pass) throw std::runtime_error("gradcheck: tolerance exceeded");
  return 0;
}

// ---------------------------------------------------------------------------
// estimate-mi: fit critics on Gaussian pairs across a correlation sweep.

template <typename T>
int cmd_estimate_mi(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known(
      {{"run", detail::kRunKeys},
       {"data", {"dim", "corrs"}},
       {"eval",
        {"estimators", "steps", "batch", "critic", "critic_hidden", "critic_embed", "negatives",
         "exclude_positive"}},
       {"optimizer", {"lr0", "schedule", "decay_rate", "decay_interval"}}});
  const auto dim_n = ctx.cfg.get_int("data", "dim", 1);
  const auto corr_tokens = ctx.cfg.get_list("data", "corrs", "0,0.3,0.6,0.9");
  const auto estimators = detail::estimators_from_config(ctx.cfg, "dv");
  const auto steps = ctx.cfg.get_int("eval", "steps", 1500);
  const auto batch = ctx.cfg.get_int("eval", "batch", 64);

  mi::MineOptions base;
  base.critic = detail::critic_from_config(ctx.cfg);
  base.adam = detail::adam_from_config(ctx.cfg, 5e-3, steps);
  base.steps = steps;
  base.batch = batch;
  base.negatives.negatives_per_positive = ctx.cfg.get_int("eval", "negatives", 0);
  base.negatives.exclude_positive_from_marginals =
      ctx.cfg.get_bool("eval", "exclude_positive", true);

  struct Point {
    std::string corr_token;
    double corr;
    mi::EstimatorKind kind;
    mi::MineResult result;
  };
  std::vector<Point> points;
  for (const auto& kind : estimators)
    for (const auto& token : corr_tokens)
      points.push_back({token, std::stod(token), kind, {}});

  detail::parallel_indexed(static_cast<std::int64_t>(points.size()), ctx.threads, [&](std::int64_t i) {
    auto& pt = points[static_cast<std::size_t>(i)];
    mi::MineOptions opt = base;
    opt.kind = pt.kind;
    opt.seed = Rng::stream(ctx.seed, static_cast<std::uint64_t>(i)).next();
    synth::GaussianPairSpec spec{dim_n, pt.corr};
    pt.result = mi::mine_fit<T>(
        [&spec](Rng& rng, std::int64_t n) { return synth::sample_gaussian_pairs<T>(spec, rng, n); },
        dim_n, dim_n, opt);
  });

  {
    CsvWriter csv(ctx.out_dir / "estimate_mi.csv",
                  {"estimator", "corr", "analytic_mi", "estimate", "mi_estimate", "candidates",
                   "steps", "diverged"});
    for (const auto& pt : points) {
      csv.field(std::string(mi::estimator_name(pt.kind)))
          .field(pt.corr_token)
          .field(synth::gaussian_pair_mi({dim_n, pt.corr}))
          .field(pt.result.estimate)
          .field(pt.result.mi_estimate)
          .field(pt.result.candidate_count)
          .field(static_cast<std::int64_t>(pt.result.curve.size()))
          .field(std::string(pt.result.diverged ? "1" : "0"));
      csv.end_row();
    }
  }
  man.add_file("estimate_mi.csv");

  for (const auto& pt : points) {
    const auto name = std::string("mine_") + mi::estimator_name(pt.kind) + "_corr" +
                      pt.corr_token + ".csv";
    CsvWriter csv(ctx.out_dir / name, {"step", "estimate", "loss", "lr"});
    for (const auto& row : pt.result.curve) {
      csv.field(row.step).field(row.estimate).field(row.loss).field(row.lr);
      csv.end_row();
    }
    man.add_file(name);
  }
  if (!ctx.quiet) std::cout << "estimate-mi: " << points.size() << " fits done\n";
  return 0;
}

// ---------------------------------------------------------------------------
// jsd-kl: exact-divergence monotonicity experiment on random sparse joints.

inline int cmd_jsd_kl(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known({{"run", detail::kRunKeys},
                         {"data", {"sizes", "draws", "dropouts"}}});
  const auto sizes = ctx.cfg.get_int_list("data", "sizes", "8,16,32,64,128");
  const auto draws = ctx.cfg.get_int("data", "draws", 1000);
  const auto dropout_tokens = ctx.cfg.get_list("data", "dropouts", "0.3,0.5,0.7");

  for (const auto& token : dropout_tokens) {
    const double dropout = std::stod(token);
    const auto result =
        discrete::monotonicity_experiment(sizes, draws, dropout, ctx.seed, ctx.threads);
    const auto scatter_name = "jsd_kl_scatter_d" + token + ".csv";
    {
      CsvWriter csv(ctx.out_dir / scatter_name, {"size", "draw_index", "mi_nats", "jsd_nats"});
      for (const auto& row : result.rows) {
        csv.field(row.size).field(row.draw).field(row.mi_nats).field(row.jsd_nats);
        csv.end_row();
      }
    }
    man.add_file(scatter_name);
    const auto summary_name = "jsd_kl_summary_d" + token + ".csv";
    {
      CsvWriter csv(ctx.out_dir / summary_name, {"size", "spearman_rho", "draws"});
      for (const auto& s : result.summary) {
        csv.field(s.size).field(s.degenerate ? std::numeric_limits<double>::quiet_NaN() : s.spearman)
            .field(s.draws);
        csv.end_row();
      }
    }
    man.add_file(summary_name);
    if (!ctx.quiet) {
      std::cout << "jsd-kl dropout " << token << ":";
      for (const auto& s : result.summary) std::cout << " rho(" << s.size << ")=" << s.spearman;
      std::cout << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train-dim: the combined objective on toy images, with optional occlusion
// and coordinate-prediction auxiliaries; exports metrics, a checkpoint, and
// frozen features for probing.

template <typename T>
int cmd_train_dim(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known(
      {{"run", detail::kRunKeys},
       {"data", {"images", "classes", "size", "patch", "patch_noise", "pixel_noise"}},
       {"model",
        {"conv_channels", "kernel", "stride", "fc_hidden", "global_dim", "local_scorer",
         "local_hidden", "local_embed", "global_hidden", "global_embed", "global_scorer",
         "prior_hidden"}},
       {"objective",
        {"alpha", "beta", "gamma", "estimator", "scorer", "negatives", "exclude_positive",
         "occlude", "block", "abs_coord", "rel_coord", "coord_weight", "coord_hidden"}},
       {"optimizer",
        {"lr0", "prior_lr0", "schedule", "decay_rate", "decay_interval", "steps", "batch"}},
       {"eval", {"probes", "probe_epochs", "probe_lr", "probe_dropout", "export_features"}}});

  synth::ToyImageSpec data_spec;
  data_spec.size = ctx.cfg.get_int("data", "size", 16);
  data_spec.classes = ctx.cfg.get_int("data", "classes", 8);
  data_spec.patch = ctx.cfg.get_int("data", "patch", 4);
  data_spec.patch_noise = ctx.cfg.get_double("data", "patch_noise", 0.8);
  data_spec.pixel_noise = ctx.cfg.get_double("data", "pixel_noise", 0.1);
  const auto n_images = ctx.cfg.get_int("data", "images", 1024);

  dim::DimModelConfig mcfg;
  mcfg.encoder.in_h = data_spec.size;
  mcfg.encoder.in_w = data_spec.size;
  mcfg.encoder.conv_channels = ctx.cfg.get_int_list("model", "conv_channels", "32,64");
  mcfg.encoder.kernel = ctx.cfg.get_int("model", "kernel", 3);
  mcfg.encoder.stride = ctx.cfg.get_int("model", "stride", 2);
  mcfg.encoder.fc_hidden = ctx.cfg.get_int("model", "fc_hidden", 256);
  mcfg.encoder.global_dim = ctx.cfg.get_int("model", "global_dim", 64);
  mcfg.local_scorer.kind =
      dim::scorer_from_name(ctx.cfg.get_string("objective", "scorer", "encode-dot"));
  mcfg.local_scorer.hidden = ctx.cfg.get_int_list("model", "local_hidden", "512,512");
  mcfg.local_scorer.embed_dim = ctx.cfg.get_int("model", "local_embed", 2048);
  mcfg.global_scorer.kind =
      dim::scorer_from_name(ctx.cfg.get_string("model", "global_scorer", "concat-convolve"));
  mcfg.global_scorer.hidden = ctx.cfg.get_int_list("model", "global_hidden", "512,512");
  mcfg.global_scorer.embed_dim = ctx.cfg.get_int("model", "global_embed", 2048);
  mcfg.prior.hidden = ctx.cfg.get_int_list("model", "prior_hidden", "1000,200");

  dim::DimHyperparams h;
  h.alpha = ctx.cfg.get_double("objective", "alpha", 0.0);
  h.beta = ctx.cfg.get_double("objective", "beta", 1.0);
  h.gamma = ctx.cfg.get_double("objective", "gamma", 0.1);
  h.estimator = mi::estimator_from_name(ctx.cfg.get_string("objective", "estimator", "infonce"));
  h.scorer = mcfg.local_scorer.kind;
  h.validate();

  mi::NegativeSamplingConfig neg;
  neg.negatives_per_positive = ctx.cfg.get_int("objective", "negatives", 0);
  neg.exclude_positive_from_marginals = ctx.cfg.get_bool("objective", "exclude_positive", true);

  structure::AuxConfig aux;
  aux.occlude = ctx.cfg.get_bool("objective", "occlude", false);
  aux.block = ctx.cfg.get_int("objective", "block", data_spec.patch);
  aux.abs_coord = ctx.cfg.get_bool("objective", "abs_coord", false);
  aux.rel_coord = ctx.cfg.get_bool("objective", "rel_coord", false);
  aux.coord_weight = ctx.cfg.get_double("objective", "coord_weight", 1.0);

  const auto steps = ctx.cfg.get_int("optimizer", "steps", 1000);
  const auto batch = ctx.cfg.get_int("optimizer", "batch", 16);
  auto adam_cfg = detail::adam_from_config(ctx.cfg, 1e-4, steps);
  auto prior_cfg = adam_cfg;
  prior_cfg.lr0 = ctx.cfg.get_double("optimizer", "prior_lr0", adam_cfg.lr0);

  Rng init_rng(ctx.seed);
  auto model = dim::DimModel<T>::make(mcfg, init_rng);

  structure::CoordPredictor<T> abs_pred, rel_pred;
  const auto grid = model.encoder.map_size();
  if (aux.abs_coord || aux.rel_coord) {
    structure::CoordPredictorConfig ccfg;
    ccfg.grid = grid;
    ccfg.hidden = ctx.cfg.get_int_list("objective", "coord_hidden", "512,512");
    if (aux.abs_coord)
      abs_pred = structure::CoordPredictor<T>::make(mcfg.encoder.global_dim,
                                                    model.encoder.local_dim(), ccfg, init_rng);
    if (aux.rel_coord) {
      ccfg.relative = true;
      rel_pred = structure::CoordPredictor<T>::make(mcfg.encoder.global_dim,
                                                    model.encoder.local_dim(), ccfg, init_rng);
    }
  }
  auto hooks = structure::make_aux_hooks<T>(aux, &abs_pred, &rel_pred);

  auto main_params = model.main_params();
  if (aux.abs_coord) abs_pred.collect(main_params);
  if (aux.rel_coord) rel_pred.collect(main_params);
  nn::Adam<T> opt_main(adam_cfg, main_params);
  nn::Adam<T> opt_prior(prior_cfg, model.prior_params());

  std::vector<std::string> columns = {"step",         "global_loss",  "local_loss",
                                      "prior_d_loss", "prior_e_loss", "lr"};
  if (aux.abs_coord) columns.push_back("abs_coord_loss");
  if (aux.rel_coord) columns.push_back("rel_coord_loss");

  Rng data_rng(Rng::stream(ctx.seed, 1).next());
  Rng step_rng(Rng::stream(ctx.seed, 2).next());
  {
    CsvWriter csv(ctx.out_dir / "metrics.csv", columns);
    for (std::int64_t step = 1; step <= steps; ++step) {
      auto [images, labels] = synth::sample_toy_images<T>(data_spec, data_rng, batch);
      (void)labels;
      auto metrics = dim::dim_train_step(model, images, h, neg, opt_main, opt_prior, step_rng,
                                         (hooks.encode || hooks.extra_losses) ? &hooks : nullptr);
      csv.field(step)
          .field(metrics.global_loss)
          .field(metrics.local_loss)
          .field(metrics.prior_d_loss)
          .field(metrics.prior_e_loss)
          .field(metrics.lr);
      if (aux.abs_coord) csv.field(metrics.extra.count("abs_coord_loss") ? metrics.extra["abs_coord_loss"] : 0.0);
      if (aux.rel_coord) csv.field(metrics.extra.count("rel_coord_loss") ? metrics.extra["rel_coord_loss"] : 0.0);
      csv.end_row();
    }
  }
  man.add_file("metrics.csv");

  // Checkpoint: every parameter tensor as a DIMT file plus the text manifest.
  {
    std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
    std::vector<Tensor<T>*> all = model.main_params();
    auto prior = model.prior_params();
    all.insert(all.end(), prior.begin(), prior.end());
    for (std::size_t i = 0; i < all.size(); ++i)
      tensors.emplace_back("param" + std::to_string(i), all[i]);
    save_checkpoint(ctx.out_dir / "checkpoint", tensors);
  }

  // Frozen features for probing.
  if (ctx.cfg.get_bool("eval", "export_features", true)) {
    Rng eval_rng(Rng::stream(ctx.seed, 3).next());
    auto [images, labels] = synth::sample_toy_images<T>(data_spec, eval_rng, n_images);
    auto features = dim::encode_dataset(model.encoder, images);
    save_tensor(ctx.out_dir / "features.dimt", features);
    detail::write_labels_csv(ctx.out_dir / "labels.csv", labels);
    man.add_file("features.dimt");
    man.add_file("labels.csv");

    const auto probes = ctx.cfg.get_string("eval", "probes", "none");
    if (probes != "none") {
      CsvWriter csv(ctx.out_dir / "probe.csv",
                    {"probe", "accuracy", "final_accuracy", "train_count", "test_count"});
      auto run_probe = [&](synth::ProbeSpec::Kind kind, const char* name) {
        synth::ProbeSpec pspec;
        pspec.kind = kind;
        pspec.epochs = ctx.cfg.get_int("eval", "probe_epochs", 40);
        pspec.lr = ctx.cfg.get_double("eval", "probe_lr", 5e-3);
        pspec.dropout = ctx.cfg.get_double("eval", "probe_dropout", 0.1);
        Rng prng(Rng::stream(ctx.seed, 4).next());
        auto result = synth::train_probe(features, labels, pspec, prng);
        csv.field(std::string(name))
            .field(result.accuracy)
            .field(result.final_accuracy)
            .field(result.train_count)
            .field(result.test_count);
        csv.end_row();
        if (!ctx.quiet) std::cout << "probe " << name << ": " << result.accuracy << "%\n";
      };
      if (probes == "linear" || probes == "both") run_probe(synth::ProbeSpec::Kind::Linear, "linear");
      if (probes == "mlp200" || probes == "both") run_probe(synth::ProbeSpec::Kind::Mlp200, "mlp200");
      if (probes != "linear" && probes != "mlp200" && probes != "both")
        throw config::ConfigError("eval.probes: expected none, linear, mlp200, or both");
      man.add_file("probe.csv");
    }
  }
  if (!ctx.quiet) std::cout << "train-dim: " << steps << " steps done\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ndm: dependence sweep on synthetic pairs, or NDM of saved features.

template <typename T>
int cmd_ndm(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known(
      {{"run", detail::kRunKeys},
       {"data", {"source", "rhos", "features"}},
       {"eval", {"ndm_hidden", "ndm_steps", "ndm_batch", "ndm_lr", "sigmoid"}}});
  ndm::NdmConfig ncfg;
  ncfg.hidden = ctx.cfg.get_int_list("eval", "ndm_hidden", "512,512");
  ncfg.steps = ctx.cfg.get_int("eval", "ndm_steps", 400);
  ncfg.batch = ctx.cfg.get_int("eval", "ndm_batch", 128);
  ncfg.adam.lr0 = ctx.cfg.get_double("eval", "ndm_lr", 1e-3);
  ncfg.use_sigmoid_output = ctx.cfg.get_bool("eval", "sigmoid", false);

  struct Row {
    std::string source;
    ndm::NdmResult result;
  };
  std::vector<Row> rows;

  const auto source = ctx.cfg.get_string("data", "source", "sweep");
  if (source == "sweep") {
    const auto rho_tokens = ctx.cfg.get_list("data", "rhos", "0,0.5,0.9,0.99");
    rows.resize(rho_tokens.size());
    detail::parallel_indexed(static_cast<std::int64_t>(rho_tokens.size()), ctx.threads,
                             [&](std::int64_t i) {
                               const double rho = std::stod(rho_tokens[static_cast<std::size_t>(i)]);
                               auto stream = [rho](Rng& rng, std::int64_t n) {
                                 auto [x, y] = synth::sample_gaussian_pairs<T>({1, rho}, rng, n);
                                 std::vector<T> v(static_cast<std::size_t>(n * 2));
                                 for (std::int64_t k = 0; k < n; ++k) {
                                   v[static_cast<std::size_t>(k * 2)] = (*x.data)[static_cast<std::size_t>(k)];
                                   v[static_cast<std::size_t>(k * 2 + 1)] = (*y.data)[static_cast<std::size_t>(k)];
                                 }
                                 return Tensor<T>::from({n, 2}, std::move(v));
                               };
                               ndm::NdmConfig cfg = ncfg;
                               cfg.seed = Rng::stream(ctx.seed, static_cast<std::uint64_t>(i)).next();
                               Rng rng(cfg.seed + 1);
                               rows[static_cast<std::size_t>(i)] = {
                                   "rho=" + rho_tokens[static_cast<std::size_t>(i)],
                                   ndm::ndm_estimate<T>(stream, 2, cfg, rng)};
                             });
  } else if (source == "features") {
    const auto path = ctx.cfg.get_string("data", "features", "");
    if (path.empty()) throw config::ConfigError("data.features: required when source=features");
    auto features = load_tensor<T>(path);
    const auto n = features.shape[0];
    const auto d = features.shape[1];
    auto stream = [&features, n, d](Rng& rng, std::int64_t count) {
      std::vector<T> v(static_cast<std::size_t>(count * d));
      for (std::int64_t i = 0; i < count; ++i) {
        const auto row = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        for (std::int64_t c = 0; c < d; ++c)
          v[static_cast<std::size_t>(i * d + c)] = features.at({row, c});
      }
      return Tensor<T>::from({count, d}, std::move(v));
    };
    ndm::NdmConfig cfg = ncfg;
    cfg.seed = Rng::stream(ctx.seed, 0).next();
    Rng rng(cfg.seed + 1);
    rows.push_back({std::filesystem::path(path).filename().string(),
                    ndm::ndm_estimate<T>(stream, d, cfg, rng)});
  } else {
    throw config::ConfigError("data.source: expected sweep or features, got " + source);
  }

  {
    CsvWriter csv(ctx.out_dir / "ndm.csv", {"source", "ndm_raw", "ndm_clamped", "steps"});
    for (const auto& row : rows) {
      csv.field(row.source).field(row.result.raw).field(row.result.clamped).field(row.result.steps);
      csv.end_row();
    }
  }
  man.add_file("ndm.csv");
  if (!ctx.quiet)
    for (const auto& row : rows)
      std::cout << "ndm " << row.source << ": " << row.result.clamped << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// probe: classifiers on saved frozen features.

template <typename T>
int cmd_probe(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known(
      {{"run", detail::kRunKeys},
       {"data", {"features", "labels"}},
       {"eval", {"probes", "probe_epochs", "probe_lr", "probe_dropout", "test_fraction"}}});
  const auto fpath = ctx.cfg.get_string("data", "features", "");
  const auto lpath = ctx.cfg.get_string("data", "labels", "");
  if (fpath.empty() || lpath.empty())
    throw config::ConfigError("probe needs data.features and data.labels");
  auto features = load_tensor<T>(fpath);
  auto labels = detail::read_labels_csv(lpath);

  const auto probes = ctx.cfg.get_string("eval", "probes", "linear");
  CsvWriter csv(ctx.out_dir / "probe.csv",
                {"probe", "accuracy", "final_accuracy", "train_count", "test_count"});
  auto run_one = [&](synth::ProbeSpec::Kind kind, const char* name, std::uint64_t stream) {
    synth::ProbeSpec spec;
    spec.kind = kind;
    spec.epochs = ctx.cfg.get_int("eval", "probe_epochs", 40);
    spec.lr = ctx.cfg.get_double("eval", "probe_lr", 5e-3);
    spec.dropout = ctx.cfg.get_double("eval", "probe_dropout", 0.1);
    spec.test_fraction = ctx.cfg.get_double("eval", "test_fraction", 0.25);
    Rng rng(Rng::stream(ctx.seed, stream).next());
    auto result = synth::train_probe(features, labels, spec, rng);
    csv.field(std::string(name))
        .field(result.accuracy)
        .field(result.final_accuracy)
        .field(result.train_count)
        .field(result.test_count);
    csv.end_row();
    if (!ctx.quiet) std::cout << "probe " << name << ": " << result.accuracy << "%\n";
  };
  if (probes == "linear" || probes == "both") run_one(synth::ProbeSpec::Kind::Linear, "linear", 0);
  if (probes == "mlp200" || probes == "both") run_one(synth::ProbeSpec::Kind::Mlp200, "mlp200", 1);
  if (probes != "linear" && probes != "mlp200" && probes != "both")
    throw config::ConfigError("eval.probes: expected linear, mlp200, or both");
  man.add_file("probe.csv");
  return 0;
}

// ---------------------------------------------------------------------------
// negsweep: estimator value against negative-sample count.

template <typename T>
int cmd_negsweep(const RunContext& ctx, manifest::RunManifest& man) {
  ctx.cfg.require_known(
      {{"run", detail::kRunKeys},
       {"data", {"dim", "corr"}},
       {"eval",
        {"estimators", "negatives", "steps", "batch", "critic", "critic_hidden", "critic_embed"}},
       {"optimizer", {"lr0", "schedule", "decay_rate", "decay_interval"}}});
  const auto dim_n = ctx.cfg.get_int("data", "dim", 1);
  const auto corr = ctx.cfg.get_double("data", "corr", 0.9);
  const auto estimators = detail::estimators_from_config(ctx.cfg, "infonce,jsd");
  const auto negatives = ctx.cfg.get_int_list("eval", "negatives", "1,4,16,64");
  const auto steps = ctx.cfg.get_int("eval", "steps", 1200);
  const auto batch = ctx.cfg.get_int("eval", "batch", 0);

  struct Point {
    mi::EstimatorKind kind;
    std::int64_t negs;
    mi::MineResult result;
  };
  std::vector<Point> points;
  for (const auto kind : estimators)
    for (const auto n : negatives) points.push_back({kind, n, {}});

  synth::GaussianPairSpec spec{dim_n, corr};
  detail::parallel_indexed(static_cast<std::int64_t>(points.size()), ctx.threads, [&](std::int64_t i) {
    auto& pt = points[static_cast<std::size_t>(i)];
    mi::MineOptions opt;
    opt.kind = pt.kind;
    opt.critic = detail::critic_from_config(ctx.cfg);
    opt.adam = detail::adam_from_config(ctx.cfg, 5e-3, steps);
    opt.steps = steps;
    // Batch must exceed the largest negative count; default gives every sweep
    // point the same batch so only the negative count varies.
    std::int64_t max_neg = 0;
    for (const auto n : negatives) max_neg = std::max(max_neg, n);
    opt.batch = batch > 0 ? batch : max_neg + 1;
    opt.negatives.negatives_per_positive = pt.negs;
    opt.seed = Rng::stream(ctx.seed, static_cast<std::uint64_t>(i)).next();
    pt.result = mi::mine_fit<T>(
        [&spec](Rng& rng, std::int64_t n) { return synth::sample_gaussian_pairs<T>(spec, rng, n); },
        dim_n, dim_n, opt);
  });

  {
    CsvWriter csv(ctx.out_dir / "negsweep.csv",
                  {"estimator", "negatives", "candidates", "estimate", "mi_estimate", "diverged"});
    for (const auto& pt : points) {
      csv.field(std::string(mi::estimator_name(pt.kind)))
          .field(pt.negs)
          .field(pt.result.candidate_count)
          .field(pt.result.estimate)
          .field(pt.result.mi_estimate)
          .field(std::string(pt.result.diverged ? "1" : "0"));
      csv.end_row();
    }
  }
  man.add_file("negsweep.csv");
  if (!ctx.quiet) std::cout << "negsweep: " << points.size() << " fits done\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Dispatch.

inline int run_subcommand(RunContext& ctx) {
  const auto dtype = ctx.cfg.get_string("run", "dtype", "float64");
  if (dtype != "float32" && dtype != "float64")
    throw config::ConfigError("run.dtype: expected float32 or float64, got " + dtype);
  const bool f32 = dtype == "float32";

  std::filesystem::create_directories(ctx.out_dir);
  manifest::RunManifest man(kVersion, ctx.seed, ctx.subcommand);
  man.set_config(ctx.cfg);

  int rc = 0;
  if (ctx.subcommand == "gradcheck") rc = cmd_gradcheck(ctx, man);
  else if (ctx.subcommand == "estimate-mi")
    rc = f32 ? cmd_estimate_mi<float>(ctx, man) : cmd_estimate_mi<double>(ctx, man);
  else if (ctx.subcommand == "jsd-kl") rc = cmd_jsd_kl(ctx, man);
  else if (ctx.subcommand == "train-dim")
    rc = f32 ? cmd_train_dim<float>(ctx, man) : cmd_train_dim<double>(ctx, man);
  else if (ctx.subcommand == "ndm") rc = f32 ? cmd_ndm<float>(ctx, man) : cmd_ndm<double>(ctx, man);
  else if (ctx.subcommand == "probe")
    rc = f32 ? cmd_probe<float>(ctx, man) : cmd_probe<double>(ctx, man);
  else if (ctx.subcommand == "negsweep")
    rc = f32 ? cmd_negsweep<float>(ctx, man) : cmd_negsweep<double>(ctx, man);
  else throw config::ConfigError("unknown subcommand: " + ctx.subcommand);

  man.write(ctx.out_dir);
  return rc;
}

// Full CLI entry: `infomax <subcommand> [--config path] [--seed N] [--out DIR]
// [--set section.key=value ...]`. Exit codes: 0 success, 1 runtime failure,
// 2 config error.
inline int run(const std::vector<std::string>& args) {
  static const std::set<std::string> kCommands = {"gradcheck", "estimate-mi", "jsd-kl",
                                                  "train-dim", "ndm",         "probe",
                                                  "negsweep"};
  try {
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
      std::cout << "usage: infomax <subcommand> [--config PATH] [--seed N] [--out DIR] "
                   "[--set section.key=value ...]\n"
                   "subcommands: gradcheck estimate-mi jsd-kl train-dim ndm probe negsweep\n"
                   "The INFOMAX_THREADS environment variable caps sweep workers.\n";
      return args.empty() ? 2 : 0;
    }
    if (args[0] == "--version") {
      std::cout << "infomax " << kVersion << "\n";
      return 0;
    }

    RunContext ctx;
    ctx.subcommand = args[0];
    if (!kCommands.count(ctx.subcommand))
      throw config::ConfigError("unknown subcommand: " + ctx.subcommand);

    std::optional<std::string> config_path, seed_arg, out_arg;
    std::vector<std::string> overrides;
    for (std::size_t i = 1; i < args.size(); ++i) {
      const auto& arg = args[i];
      auto next = [&]() -> const std::string& {
        if (i + 1 >= args.size()) throw config::ConfigError(arg + " needs a value");
        return args[++i];
      };
      if (arg == "--config") config_path = next();
      else if (arg == "--seed") seed_arg = next();
      else if (arg == "--out") out_arg = next();
      else if (arg == "--set") overrides.push_back(next());
      else if (arg == "--quiet") ctx.quiet = true;
      else throw config::ConfigError("unknown argument: " + arg);
    }

    if (config_path) ctx.cfg = config::IniConfig::parse_file(*config_path);
    for (const auto& o : overrides) ctx.cfg.apply_override(o);
    if (seed_arg) {
      try {
        ctx.seed = std::stoull(*seed_arg);
      } catch (const std::exception&) {
        throw config::ConfigError("--seed: not an integer: " + *seed_arg);
      }
    } else {
      ctx.seed = static_cast<std::uint64_t>(ctx.cfg.get_int("run", "seed", 0));
    }
    ctx.out_dir = out_arg ? *out_arg : ctx.cfg.get_string("run", "out_dir", "out");
    ctx.threads = detail::env_threads();
    return run_subcommand(ctx);
  } catch (const config::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace infomax::cli
