#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "infomax/tensor.hpp"

namespace infomax {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Compares tape gradients of a scalar-valued function against central finite
// differences. `f` must be deterministic given its parameters; it receives
// the tape plus tape-tracked copies of `params` in order. Relative error is
// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
template <typename T, typename F>
GradCheckReport grad_check(F&& f, const std::vector<Tensor<T>>& params, T eps, double tol,
                           std::vector<std::string> names = {}) {
  std::vector<Tensor<T>> work;
  work.reserve(params.size());
  for (const auto& p : params) work.push_back(p.clone());

  auto eval = [&]() -> double {
    Tape<T> tape;
    std::vector<Tensor<T>> tracked;
    tracked.reserve(work.size());
    for (auto& p : work) tracked.push_back(tape.watch(p));
    Tensor<T> root = f(tape, tracked);
    const double v = static_cast<double>(value(root));
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: function value is non-finite");
    return v;
  };

  // Analytic pass.
  std::vector<std::vector<T>> analytic(work.size());
  {
    Tape<T> tape;
    std::vector<Tensor<T>> tracked;
    for (auto& p : work) tracked.push_back(tape.watch(p));
    Tensor<T> root = f(tape, tracked);
    if (root.size() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
    if (!std::isfinite(static_cast<double>(value(root))))
      throw std::runtime_error("grad_check: function value is non-finite");
    tape.backward(root);
    for (std::size_t i = 0; i < work.size(); ++i) analytic[i] = tape.grad(tracked[i].node);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < work.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = pi < names.size() ? names[pi] : "param" + std::to_string(pi);
    auto& buf = *work[pi].data;
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T saved = buf[i];
      buf[i] = saved + eps;
      const double up = eval();
      buf[i] = saved - eps;
      const double down = eval();
      buf[i] = saved;
      const double fd = (up - down) / (2.0 * static_cast<double>(eps));
      const double ad = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(ad - fd) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.params.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace infomax
