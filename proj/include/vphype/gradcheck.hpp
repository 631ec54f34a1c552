#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "vphype/errors.hpp"
#include "vphype/rng.hpp"
#include "vphype/tensor.hpp"

namespace vphype {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Central-difference check of the tape gradient of a scalar-valued function.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const ScalarFn& f, Tensor x, double h = 1e-5) {
  x.set_requires_grad(true);
  Tensor y = f(x);
  if (y.numel() != 1) {
    throw ContractError("grad_check requires a scalar-valued function, got shape " +
                        shape_str(y.shape()));
  }
  Tape tape(y);
  tape.backward();
  std::vector<double> analytic = x.grad();

  double max_err = 0.0;
  auto& xd = x.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    double orig = xd[i];
    double fp, fm;
    {
      NoGradGuard ng;
      xd[i] = orig + h;
      fp = f(x).item();
      xd[i] = orig - h;
      fm = f(x).item();
      xd[i] = orig;
    }
    double numeric = (fp - fm) / (2.0 * h);
    double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

// Multi-parameter variant for whole-model checks. The loss closure reads the
// parameters in place; for each parameter a deterministic sample of
// coordinates is perturbed. Parameters must already carry requires_grad.
inline double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                std::int64_t coords_per_tensor, Rng& rng, double h = 1e-5) {
  Tensor y = loss_fn();
  if (y.numel() != 1) throw ContractError("grad_check_params requires a scalar loss");
  Tape tape(y);
  tape.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& pd = params[pi].mutable_data();
    std::int64_t n = static_cast<std::int64_t>(pd.size());
    std::int64_t samples = std::min<std::int64_t>(coords_per_tensor, n);
    for (std::int64_t s = 0; s < samples; ++s) {
      std::int64_t i = samples == n ? s : static_cast<std::int64_t>(rng.uniform_int(n));
      double orig = pd[i];
      double fp, fm;
      {
        NoGradGuard ng;
        pd[i] = orig + h;
        fp = loss_fn().item();
        pd[i] = orig - h;
        fm = loss_fn().item();
        pd[i] = orig;
      }
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi][i];
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace vphype
