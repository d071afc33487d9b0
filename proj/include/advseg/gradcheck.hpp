// Central finite-difference gradient checker.
//
// Runs the closure in the tensor scalar type (use double instantiations to
// avoid float cancellation) and compares analytic gradients against
// (f(x+h) - f(x-h)) / 2h per sampled coordinate.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

template <typename T>
using GradCheckFn = std::function<TensorT<T>(TapeT<T>*, std::vector<TensorT<T>>&)>;

struct GradCheckOptions {
  double h = 1e-3;                 // central-difference step, in [1e-4, 1e-2]
  int max_coords_per_tensor = 0;   // 0 = every coordinate
  std::uint64_t seed = 0x5EEDull;  // coordinate subsampling stream
  // Central differences at steps h and h/2 must agree to this relative
  // margin; a disagreement means the probe straddled a non-smooth point
  // (relu kink, pool tie) where finite differences are meaningless, and the
  // coordinate is skipped. 0 disables the guard.
  double kink_guard = 0.005;
  // Both slopes below this magnitude count as zero: FD rounding noise on an
  // exactly-compensated gradient (conv bias under instance norm) would
  // otherwise swamp the comparison.
  double zero_tol = 1e-6;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::int64_t worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int checked_coords = 0;
  int skipped_kinks = 0;
};

// f must be deterministic: two forward passes are compared bitwise first.
template <typename T>
GradCheckResult grad_check(const GradCheckFn<T>& f, std::vector<TensorT<T>> params,
                           const GradCheckOptions& opt = {}) {
  ADVSEG_CHECK(opt.h >= 1e-4 && opt.h <= 1e-2, ContractError,
               "grad_check: step h=", opt.h, " outside [1e-4, 1e-2]");

  auto eval = [&](bool with_grad) {
    if (with_grad) {
      TapeT<T> tape;
      TensorT<T> y = f(&tape, params);
      ADVSEG_CHECK(y.numel() == 1, ContractError, "grad_check: f must return a scalar");
      tape.backward(y);
      return static_cast<double>(y.value());
    }
    TensorT<T> y = f(nullptr, params);
    ADVSEG_CHECK(y.numel() == 1, ContractError, "grad_check: f must return a scalar");
    return static_cast<double>(y.value());
  };

  const double y0 = eval(false);
  const double y1 = eval(false);
  ADVSEG_CHECK(y0 == y1, ContractError,
               "grad_check: f is not deterministic (two forward passes differ: ", y0, " vs ", y1,
               ")");

  for (auto& p : params) p.zero_grad();
  eval(true);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    p.grad();  // ensure allocated
    analytic.push_back(p.grad_vec());
  }

  std::mt19937_64 rng(opt.seed);
  GradCheckResult res;
  const double h = opt.h;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::int64_t n = p.numel();
    std::vector<std::int64_t> coords;
    if (opt.max_coords_per_tensor > 0 && n > opt.max_coords_per_tensor) {
      std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
      for (int s = 0; s < opt.max_coords_per_tensor; ++s) coords.push_back(dist(rng));
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (std::int64_t c : coords) {
      T* slot = p.data() + c;
      const T saved = *slot;
      auto probe = [&](double step) {
        *slot = saved + static_cast<T>(step);
        const double fp = eval(false);
        *slot = saved - static_cast<T>(step);
        const double fm = eval(false);
        *slot = saved;
        return (fp - fm) / (2.0 * step);
      };
      const double numeric = probe(h);
      if (opt.kink_guard > 0.0) {
        const double refined = probe(h / 2.0);
        const double denom = std::max({std::fabs(numeric), std::fabs(refined), 1e-6});
        if (std::fabs(numeric - refined) / denom > opt.kink_guard) {
          ++res.skipped_kinks;
          continue;
        }
      }
      ++res.checked_coords;
      const double a = static_cast<double>(analytic[pi][static_cast<std::size_t>(c)]);
      if (std::fabs(a) < opt.zero_tol && std::fabs(numeric) < opt.zero_tol) continue;
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_tensor = p.name().empty() ? ("param" + std::to_string(pi)) : p.name();
        res.worst_coord = c;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace advseg
