#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "clae/errors.hpp"
#include "clae/tensor.hpp"

namespace clae {

// Central-difference gradient estimate of a scalar-valued function:
// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i.
inline Tensor finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  require(h > 0.0, "finite_diff_grad: step must be positive");
  Tensor probe(x.shape(), x.values());
  Tensor grad(x.shape());
  auto eval = [&f, &probe] {
    const Tensor y = f(probe);
    require(y.size() == 1, "finite_diff_grad: function output has shape " +
                               shape_string(y.shape()) + ", expected a scalar");
    return y[0];
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    probe[i] = xi + h;
    const double up = eval();
    probe[i] = xi - h;
    const double down = eval();
    probe[i] = xi;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  return finite_diff_grad(
      std::function<Tensor(const Tensor&)>([&f](const Tensor& t) { return Tensor::scalar(f(t)); }),
      x, h);
}

struct GradientComparison {
  // Largest |a - n| / max(|a|, |n|, abs_floor / rel_tol); below rel_tol
  // means every coordinate passed.
  double worst_error = 0.0;
  std::size_t worst_index = 0;
  bool ok = true;
};

// Elementwise check: |a - n| <= max(rel_tol * max(|a|, |n|), abs_floor).
inline GradientComparison compare_gradients(std::span<const double> analytic,
                                            std::span<const double> numeric,
                                            double rel_tol = 1e-4, double abs_floor = 1e-7) {
  require(analytic.size() == numeric.size(), "compare_gradients: length mismatch");
  GradientComparison out;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), abs_floor / rel_tol});
    const double err = std::isfinite(a) && std::isfinite(n) ? std::abs(a - n) / denom : INFINITY;
    if (err > out.worst_error || !std::isfinite(err)) {
      out.worst_error = err;
      out.worst_index = i;
    }
  }
  out.ok = out.worst_error < rel_tol;
  return out;
}

}  // namespace clae
