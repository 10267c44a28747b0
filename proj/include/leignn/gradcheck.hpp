#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "leignn/tensor.hpp"

namespace leignn {

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences over every element of every parameter tensor.
/// Returns the maximum relative error
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// The function must be deterministic; it is re-evaluated 2 times per
/// parameter element with the element perturbed by +/- step.
template <typename Real>
Real gradcheck(const std::function<Tensor<Real>(Tape<Real>&)>& function,
               std::span<Tensor<Real>> params, Real step) {
  detail::check(step > Real(0), "gradcheck: step must be positive");
  for (auto& p : params) p.zero_grad();

  std::vector<std::vector<Real>> analytic;
  {
    Tape<Real> tape;
    Tensor<Real> out = function(tape);
    detail::check(std::isfinite(static_cast<double>(out.item())),
                  "gradcheck: non-finite function value");
    tape.backward(out);
    for (auto& p : params) {
      detail::ensure_grad(*p.impl());
      analytic.push_back(p.grad_data());
    }
  }

  auto evaluate = [&function]() -> Real {
    Tape<Real> tape;
    Tensor<Real> out = function(tape);
    const Real value = out.item();
    detail::check(std::isfinite(static_cast<double>(value)),
                  "gradcheck: non-finite intermediate value");
    return value;
  };

  Real max_rel_err = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].mutable_data();
    for (std::size_t ei = 0; ei < values.size(); ++ei) {
      const Real saved = values[ei];
      values[ei] = saved + step;
      const Real plus = evaluate();
      values[ei] = saved - step;
      const Real minus = evaluate();
      values[ei] = saved;

      const Real numeric = (plus - minus) / (2 * step);
      const Real exact = analytic[pi][ei];
      const Real denom = std::max({std::abs(exact), std::abs(numeric), Real(1e-12)});
      max_rel_err = std::max(max_rel_err, std::abs(exact - numeric) / denom);
    }
  }
  return max_rel_err;
}

}  // namespace leignn
