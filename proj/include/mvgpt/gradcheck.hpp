#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvgpt/rng.hpp"
#include "mvgpt/tensor.hpp"
#include "mvgpt/autodiff.hpp"

namespace mvgpt {

struct GradCheckOptions {
  double h = 1e-5;                       // central-difference step
  std::size_t max_coords_per_param = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;                // coordinate subsampling
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares analytic gradients against central differences.
//
// `f(true)` must run forward and backward, accumulating into each parameter's
// grad, and return the loss; `f(false)` runs forward only. The closure must be
// deterministic: we evaluate the baseline twice and demand bit-equal losses,
// otherwise finite differences would measure noise, not slope.
inline GradCheckResult finite_diff_check(const std::function<double(bool)>& f,
                                         std::span<Parameter* const> params,
                                         GradCheckOptions opt = {}) {
  if (!(opt.h >= 1e-7 && opt.h <= 1e-3)) {
    throw std::invalid_argument("finite_diff_check: step h out of sane range [1e-7, 1e-3]");
  }
  {
    const double l1 = f(false);
    const double l2 = f(false);
    if (std::memcmp(&l1, &l2, sizeof(double)) != 0) {
      throw std::logic_error("finite_diff_check: loss closure is nondeterministic");
    }
  }

  for (Parameter* p : params) p->grad.zero();
  f(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad.clone());

  GradCheckResult res;
  Rng rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_param == 0 || opt.max_coords_per_param >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      // sample without replacement via partial shuffle
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      for (std::size_t i = 0; i < opt.max_coords_per_param; ++i) {
        const std::size_t j = i + rng.uniform_int(n - i);
        std::swap(all[i], all[j]);
        coords.push_back(all[i]);
      }
    }
    for (std::size_t c : coords) {
      const double orig = p.value.at(c);
      p.value.at(c) = orig + opt.h;
      const double lp = f(false);
      p.value.at(c) = orig - opt.h;
      const double lm = f(false);
      p.value.at(c) = orig;
      const double numeric = (lp - lm) / (2.0 * opt.h);
      const double a = analytic[pi].at(c);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = c;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace mvgpt
