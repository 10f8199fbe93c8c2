#pragma once

// Differentiable primitives. Binary elementwise ops broadcast scalars and,
// for rank-2 operands, singleton rows or columns. Row-wise ops
// (l2_normalize, logsumexp, softmax) treat dimension 1 as the feature axis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "clae/autodiff.hpp"

namespace clae {

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

inline Var neg(Var a) {
  return detail::unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var operator-(Var a) { return neg(a); }

inline Var scale(Var a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericDomainError("log of a non-positive value");
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericDomainError("sqrt of a non-positive value");
  return detail::unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_rank2(av, "matmul");
  detail::check_rank2(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  require(bv.rows() == k, "matmul: inner dimensions differ, " + shape_string(av.shape()) +
                              " x " + shape_string(bv.shape()));
  Tensor out({m, n});
  detail::gemm(av.data().data(), false, bv.data().data(), false, m, k, n, out.data().data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {a, b},
                     [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
                       std::span<double> ga = t.grad_buffer(ia);
                       std::span<double> gb = t.grad_buffer(ib);
                       if (!ga.empty())
                         detail::gemm(g.data(), false, t.value(ib).data().data(), true, m, n, k, ga.data(), true);
                       if (!gb.empty())
                         detail::gemm(t.value(ia).data().data(), true, g.data(), false, k, m, n, gb.data(), true);
                     });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  const std::size_t ia = a.id();
  return a.tape()->record("transpose", std::move(out), {a},
                          [ia, r, c](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                          });
}

// Full reduction to shape {1}.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, std::span<const double> g) {
    for (double& x : t.grad_buffer(ia)) x += g[0];
  });
}

// Reduction of a rank-2 tensor along `axis`, keeping the reduced dimension.
inline Var sum(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "sum(axis)");
  require(axis < 2, "sum: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(axis == 0 ? Shape{1, c} : Shape{r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
  const std::size_t ia = a.id();
  return a.tape()->record("sum_axis", std::move(out), {a},
                          [ia, r, c, axis](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                ga[i * c + j] += g[axis == 0 ? j : i];
                          });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record("mean", Tensor::scalar(s / n), {a},
                          [ia, n](Tape& t, std::span<const double> g) {
                            for (double& x : t.grad_buffer(ia)) x += g[0] / n;
                          });
}

inline Var mean(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "mean(axis)");
  require(axis < 2, "mean: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  const double n = static_cast<double>(axis == 0 ? r : c);
  Tensor out(axis == 0 ? Shape{1, c} : Shape{r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
  for (double& v : out.data()) v /= n;
  const std::size_t ia = a.id();
  return a.tape()->record("mean_axis", std::move(out), {a},
                          [ia, r, c, axis, n](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                ga[i * c + j] += g[axis == 0 ? j : i] / n;
                          });
}

// Row-wise maximum, shape {rows, 1}. The gradient goes to the first argmax.
inline Var max_reduce(Var a) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "max_reduce");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({r, 1});
  std::vector<std::size_t> arg(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = av.row(i);
    arg[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out[i] = row[arg[i]];
  }
  const std::size_t ia = a.id();
  return a.tape()->record("max_reduce", std::move(out), {a},
                          [ia, c, arg = std::move(arg)](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < arg.size(); ++i) ga[i * c + arg[i]] += g[i];
                          });
}

// Scales each row to unit L2 norm; rows shorter than 1e-12 are divided by
// 1e-12 instead.
inline Var l2_normalize(Var a) {
  constexpr double kFloor = 1e-12;
  const Tensor& av = a.value();
  detail::check_rank2(av, "l2_normalize");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(av.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = av.row(i);
    double s = 0.0;
    for (double v : row) s += v * v;
    norms[i] = std::max(std::sqrt(s), kFloor);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] / norms[i];
  }
  const std::size_t ia = a.id(), io = a.tape()->next_id();
  return a.tape()->record(
      "l2_normalize", std::move(out), {a},
      [ia, io, r, c, norms = std::move(norms)](Tape& t, std::span<const double> g) {
        std::span<double> ga = t.grad_buffer(ia);
        const Tensor& y = t.value(io);
        for (std::size_t i = 0; i < r; ++i) {
          const bool floored = norms[i] <= kFloor;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            const double gj = g[i * c + j];
            ga[i * c + j] += floored ? gj / norms[i] : (gj - y[i * c + j] * dot) / norms[i];
          }
        }
      });
}

// Row-wise log-sum-exp, shape {rows, 1}, max-shifted. Entries where `mask`
// is zero are excluded from the sum (and receive no gradient).
inline Var logsumexp(Var a, const std::optional<Tensor>& mask = std::nullopt) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "logsumexp");
  const std::size_t r = av.rows(), c = av.cols();
  if (mask) require(mask->shape() == av.shape(), "logsumexp: mask shape mismatch");
  auto allowed = [&mask](std::size_t k) { return !mask || (*mask)[k] != 0.0; };
  Tensor out({r, 1});
  Tensor probs(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (allowed(i * c + j)) m = std::max(m, av[i * c + j]);
    require(std::isfinite(m), "logsumexp: row " + std::to_string(i) + " is fully masked");
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (allowed(i * c + j)) s += std::exp(av[i * c + j] - m);
    out[i] = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j)
      probs[i * c + j] = allowed(i * c + j) ? std::exp(av[i * c + j] - m) / s : 0.0;
  }
  const std::size_t ia = a.id();
  return a.tape()->record("logsumexp", std::move(out), {a},
                          [ia, r, c, probs = std::move(probs)](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                ga[i * c + j] += g[i] * probs[i * c + j];
                          });
}

// Row-wise softmax, max-shifted.
inline Var softmax(Var a) {
  const Tensor& av = a.value();
  detail::check_rank2(av, "softmax");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    auto row = av.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(row[j] - m));
    // dividing keeps the result exact when m is large; exp(v - lse) does not
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  const std::size_t ia = a.id(), io = a.tape()->next_id();
  return a.tape()->record("softmax", std::move(out), {a},
                          [ia, io, r, c](Tape& t, std::span<const double> g) {
                            std::span<double> ga = t.grad_buffer(ia);
                            const Tensor& y = t.value(io);
                            for (std::size_t i = 0; i < r; ++i) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                              for (std::size_t j = 0; j < c; ++j)
                                ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                            }
                          });
}

// Stacks two rank-2 tensors with equal column counts.
inline Var concat_rows(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b, "concat_rows");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::check_rank2(av, "concat_rows");
  detail::check_rank2(bv, "concat_rows");
  require(av.cols() == bv.cols(), "concat_rows: column counts differ");
  std::vector<double> data(av.values());
  data.insert(data.end(), bv.values().begin(), bv.values().end());
  const std::size_t na = av.size(), ia = a.id(), ib = b.id();
  return tape.record("concat_rows", Tensor({av.rows() + bv.rows(), av.cols()}, std::move(data)),
                     {a, b}, [na, ia, ib](Tape& t, std::span<const double> g) {
                       t.accumulate(ia, g.first(na));
                       std::span<double> gb = t.grad_buffer(ib);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                     });
}

// Same value, cut off from the gradient.
inline Var detach(Var a) { return a.tape()->constant(Tensor(a.shape(), a.value().values())); }

inline Tensor identity_matrix(std::size_t n) {
  Tensor eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return eye;
}

}  // namespace clae
