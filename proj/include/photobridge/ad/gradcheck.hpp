#pragma once

// Central finite differences against reverse mode.
//
// `fn` is a generic callable, instantiated twice:
//   fn(const std::vector<Tensor<double>>&)      -> scalar Tensor<double>
//   fn(const std::vector<Tensor<long double>>&) -> scalar Tensor<long double>
// Reverse mode runs in double. The difference quotients are taken in long
// double so their roundoff stays far below the relative tolerance even for
// small gradient entries. Stop-gradient and straight-through values are frozen
// at the unperturbed point (see FreezeTape), so the oracle differentiates the
// same surrogate path that backward() does. Random noise must be an explicit
// input of `fn`, never resampled inside it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "photobridge/ad/tensor.hpp"

namespace photobridge::ad {

using OracleScalar = long double;

struct FdOptions {
  double step = 1e-6;
  // 2: (f(x+h) - f(x-h)) / 2h.  4: five-point central stencil.
  int order = 2;
};

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

template <class Fn>
FdReport finite_diff_check(Fn&& fn, const std::vector<Tensor<double>>& inputs, FdOptions opt = {}) {
  if (opt.order != 2 && opt.order != 4) throw ContractError("finite_diff_check: order must be 2 or 4");

  std::vector<Tensor<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(x.detach(true));
  {
    Tensor<double> y = fn(leaves);
    backward(y);
  }

  std::vector<Tensor<OracleScalar>> base;
  for (const auto& x : inputs) base.push_back(x.template cast<OracleScalar>());
  NoGradGuard no_grad;
  {
    FreezeScope<OracleScalar> rec(false);
    (void)fn(base);
  }
  auto eval = [&]() -> OracleScalar {
    FreezeScope<OracleScalar> replay(true);
    return fn(base).item();
  };

  const OracleScalar h = static_cast<OracleScalar>(opt.step);
  FdReport report;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const std::vector<double> analytic = leaves[i].grad();
    auto data = base[i].mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const OracleScalar x0 = data[j];
      auto at = [&](OracleScalar dx) {
        data[j] = x0 + dx;
        const OracleScalar f = eval();
        data[j] = x0;
        return f;
      };
      OracleScalar numeric;
      if (opt.order == 2) {
        numeric = (at(h) - at(-h)) / (2 * h);
      } else {
        numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      }
      const double err = relative_error(analytic[j], static_cast<double>(numeric));
      ++report.checked;
      if (report.checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = i;
        report.worst_index = j;
        report.analytic = analytic[j];
        report.numeric = static_cast<double>(numeric);
      }
    }
  }
  return report;
}

}  // namespace photobridge::ad
