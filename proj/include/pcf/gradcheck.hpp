#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "pcf/tensor.hpp"

namespace pcf {

using LossBuilder = std::function<Tensor()>;

struct GradCheckOptions {
  double step = 1e-6;
  std::size_t max_samples = 512;  // per parameter tensor
  std::uint64_t seed = 0x5eedULL;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // entries skipped as non-differentiable within the step
  // Location of the worst element.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

namespace detail {

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

/// Compares backward() against central finite differences. Parameter tensors
/// with more than `max_samples` elements are subsampled with a fixed seed.
inline GradCheckResult grad_check_detailed(const LossBuilder& build, std::span<Tensor> params,
                                           const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw ParameterError("grad_check: step must be positive");
  for (auto& p : params) p.zero_grad();

  const Tensor loss = build();
  double baseline = 0.0;
  {
    NoGradGuard guard;
    baseline = build().item();
  }
  if (loss.item() != baseline) {
    throw DeterminismError(detail::concat("grad_check: builder is not deterministic (", loss.item(),
                                          " vs ", baseline, ")"));
  }
  backward(loss);

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.numel(), 0.0);
    std::vector<std::size_t> picks(p.numel());
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    if (picks.size() > opts.max_samples) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(opts.max_samples);
      std::sort(picks.begin(), picks.end());
    }
    auto values = p.mutable_data();
    NoGradGuard guard;
    for (std::size_t i : picks) {
      const double original = values[i];
      values[i] = original + opts.step;
      const double plus = build().item();
      values[i] = original - opts.step;
      const double minus = build().item();
      values[i] = original;
      // A relu or max switching branch inside [x - step, x + step] makes the
      // one-sided slopes disagree; the derivative is undefined there and no
      // analytic value can be judged against the central difference.
      const double right = (plus - baseline) / opts.step, left = (baseline - minus) / opts.step;
      if (detail::relative_error(right, left) > 1e-2) {
        ++result.kinks;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double err = detail::relative_error(analytic[i], numeric);
      if (err > result.max_rel_error || result.checked == 0) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
      ++result.checked;
    }
  }
  return result;
}

inline double grad_check(const LossBuilder& build, std::span<Tensor> params, double step = 1e-6) {
  GradCheckOptions opts;
  opts.step = step;
  return grad_check_detailed(build, params, opts).max_rel_error;
}

}  // namespace pcf
