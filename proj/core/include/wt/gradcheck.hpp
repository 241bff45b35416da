#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "wt/ops.hpp"
#include "wt/parallel.hpp"
#include "wt/tape.hpp"
#include "wt/tensor.hpp"

namespace wt {

// Scalar objective over a parameter set. Must be deterministic and free of
// side effects; called many times with perturbed copies.
using GradCheckFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Central-difference gradient check in 64-bit. Returns the max over all
// parameter coordinates of |autodiff - fd| / (|fd| + eps), where eps absorbs
// the O(|f|*ulp/h) roundoff floor of the difference quotient so that
// coordinates with near-zero true gradient do not dominate the ratio.
inline double grad_check(const GradCheckFn& f, const std::vector<Tensor<double>>& params,
                         double h) {
  if (h <= 0) throw std::invalid_argument("grad_check: h must be positive");

  // Autodiff pass on a private copy.
  std::vector<Tensor<double>> base;
  base.reserve(params.size());
  for (const auto& p : params) {
    Tensor<double> c = p.clone();
    c.requires_grad = true;
    c.ensure_grad();
    base.push_back(std::move(c));
  }
  double f0;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = f(base);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    f0 = (*loss.data)[0];
    if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite objective");
    // A loss that never touched the params has an all-zero gradient.
    if (loss.requires_grad) tape.backward(loss);
  }

  const double eps = 1e-4 * std::max(1.0, std::fabs(f0));

  // Coordinate layout: flatten (tensor, element) pairs.
  std::vector<int64_t> offsets(params.size() + 1, 0);
  for (size_t t = 0; t < params.size(); ++t) offsets[t + 1] = offsets[t] + params[t].numel();
  const int64_t total = offsets.back();

  const int64_t grain = std::max<int64_t>(1, total / (4 * max_threads()) + 1);
  std::vector<double> chunk_max((total + grain - 1) / grain, 0.0);

  parallel_for(total, grain, [&](int64_t c0, int64_t c1) {
    // Each chunk perturbs its own deep copy of the parameters.
    std::vector<Tensor<double>> local;
    local.reserve(params.size());
    for (const auto& p : params) {
      Tensor<double> c = p.clone();
      c.requires_grad = false;
      local.push_back(std::move(c));
    }
    double worst = 0.0;
    for (int64_t c = c0; c < c1; ++c) {
      size_t t = 0;
      while (offsets[t + 1] <= c) ++t;
      const int64_t e = c - offsets[t];
      double& slot = (*local[t].data)[static_cast<size_t>(e)];
      const double saved = slot;
      slot = saved + h;
      const double fp = (*f(local).data)[0];
      slot = saved - h;
      const double fm = (*f(local).data)[0];
      slot = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("grad_check: non-finite objective during perturbation");
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = (*base[t].grad)[static_cast<size_t>(e)];
      const double rel = std::fabs(ad - fd) / (std::fabs(fd) + eps);
      worst = std::max(worst, rel);
    }
    chunk_max[static_cast<size_t>(c0 / grain)] = worst;
  });

  double result = 0.0;
  for (double m : chunk_max) result = std::max(result, m);
  return result;
}

}  // namespace wt
