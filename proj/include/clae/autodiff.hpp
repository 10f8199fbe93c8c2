#pragma once

// Tape-based reverse-mode differentiation over clae::Tensor.
//
// A Tape owns every value produced while it is alive. Operations append one
// node each, so node order is already topological; backward() walks it in
// reverse and every node is visited once. Gradients accumulate additively
// into per-node buffers, which handles fan-out.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clae/errors.hpp"
#include "clae/tensor.hpp"

namespace clae {

class Tape;

class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

namespace testing {

// Fault injection for the gradient-check harness: when `op` is non-empty,
// the upstream gradient reaching every node with that op tag is multiplied
// by `scale` during backward().
struct GradientFault {
  std::string op;
  double scale = 1.0;
};

inline GradientFault& gradient_fault() {
  thread_local GradientFault fault;
  return fault;
}

}  // namespace testing

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  struct Record {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    if (!value.finite()) throw NumericDomainError("non-finite value passed as tape input");
    value.clear_grad();
    nodes_.push_back(Node{"leaf", std::move(value), {}, {}, requires_grad, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends the result of a primitive. `fn` receives the gradient flowing
  // into this node and must push contributions to its inputs via
  // accumulate() / grad_buffer().
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    if (!value.finite())
      throw NumericDomainError(std::string("operation '") + op + "' produced non-finite values");
    Node node{op, std::move(value), {}, {}, false, false, {}};
    for (const Var& in : inputs) {
      require(in.tape_ == this, std::string("operation '") + op + "' mixes tapes");
      node.inputs.push_back(in.id_);
      node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  // Id the next recorded node will receive.
  std::size_t next_id() const noexcept { return nodes_.size(); }

  // Zero-initialized gradient storage for node `id`, created on first use.
  // Returns an empty span when the node does not require a gradient.
  std::span<double> grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return {};
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
  }

  void accumulate(std::size_t id, std::span<const double> g) {
    std::span<double> buf = grad_buffer(id);
    if (buf.empty()) return;
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  void backward(Var output) {
    require(output.tape_ == this, "backward() on a foreign variable");
    require(nodes_[output.id_].value.size() == 1,
            "backward() needs a scalar output, got shape " +
                shape_string(nodes_[output.id_].value.shape()));
    for (Node& n : nodes_) n.grad.clear();
    const auto& fault = testing::gradient_fault();
    if (nodes_[output.id_].requires_grad) {
      grad_buffer(output.id_)[0] = 1.0;
      for (std::size_t i = output.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        if (!fault.op.empty() && n.op == fault.op)
          for (double& g : n.grad) g *= fault.scale;
        n.backward(*this, std::span<const double>(n.grad));
      }
    }
    for (Node& n : nodes_) {
      if (!n.is_leaf || !n.requires_grad) continue;
      if (n.grad.empty())
        n.value.set_grad(std::vector<double>(n.value.size(), 0.0));
      else
        n.value.set_grad(n.grad);
    }
  }

  // Gradient of the last backward() output w.r.t. `v` (zeros if none flowed).
  Tensor gradient(Var v) const {
    const Node& n = nodes_.at(v.id_);
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
  }

  std::vector<Record> records() const {
    std::vector<Record> out;
    out.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      out.push_back(Record{nodes_[i].op, nodes_[i].inputs, i});
    return out;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<double> grad;
  };

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  require(tape_ != nullptr, "use of an unbound Var");
  return tape_->value(id_);
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Eigen's kernels peel differently depending on where the operands sit in
// memory, which flips last bits between otherwise identical products. Copying
// through aligned scratch pins the summation order to the shape alone.
inline void gemm(const double* a, bool ta, const double* b, bool tb, std::size_t m, std::size_t k,
                 std::size_t n, double* out, bool accumulate) {
  RowMatrix A = ta ? RowMatrix(ConstMatMap(a, k, m).transpose()) : RowMatrix(ConstMatMap(a, m, k));
  RowMatrix B = tb ? RowMatrix(ConstMatMap(b, n, k).transpose()) : RowMatrix(ConstMatMap(b, k, n));
  RowMatrix C(m, n);
  C.noalias() = A * B;
  const double* c = C.data();
  if (accumulate)
    for (std::size_t i = 0; i < m * n; ++i) out[i] += c[i];
  else
    std::copy(c, c + m * n, out);
}

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  require(a.valid() && a.tape() == b.tape(), std::string(op) + ": operands on different tapes");
  return *a.tape();
}

// Elementwise broadcast layout. Index of element (r, c) in operand a is
// r * a_rs + c * a_cs; a stride of zero marks a broadcast dimension.
struct Broadcast {
  std::size_t rows = 1, cols = 1;
  std::size_t a_rs = 0, a_cs = 1, b_rs = 0, b_cs = 1;
  Shape out;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const std::size_t na = shape_size(a), nb = shape_size(b);
  if (a == b) {
    p.cols = na;
    p.out = a;
    return p;
  }
  if (nb == 1) {
    p.cols = na;
    p.b_cs = 0;
    p.out = a;
    return p;
  }
  if (na == 1) {
    p.cols = nb;
    p.a_cs = 0;
    p.out = b;
    return p;
  }
  if (a.size() == 2 && b.size() == 2) {
    auto fits = [](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
    if (fits(a[0], b[0]) && fits(a[1], b[1])) {
      p.rows = std::max(a[0], b[0]);
      p.cols = std::max(a[1], b[1]);
      p.a_rs = a[0] == 1 ? 0 : a[1];
      p.a_cs = a[1] == 1 ? 0 : 1;
      p.b_rs = b[0] == 1 ? 0 : b[1];
      p.b_cs = b[1] == 1 ? 0 : 1;
      p.out = {p.rows, p.cols};
      return p;
    }
  }
  throw ContractViolation(std::string(op) + ": shapes " + shape_string(a) + " and " +
                          shape_string(b) + " do not broadcast");
}

// out = f(a, b); backward receives (g, a, b) and returns (da, db) factors.
template <typename Forward, typename DA, typename DB>
Var binary(const char* op, Var a, Var b, Forward f, DA da, DB db) {
  Tape& tape = same_tape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast p = plan_broadcast(av.shape(), bv.shape(), op);
  Tensor out(p.out);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t c = 0; c < p.cols; ++c)
      out[r * p.cols + c] = f(av[r * p.a_rs + c * p.a_cs], bv[r * p.b_rs + c * p.b_cs]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {a, b},
                     [p, ia, ib, da, db](Tape& t, std::span<const double> g) {
                       const Tensor& x = t.value(ia);
                       const Tensor& y = t.value(ib);
                       std::span<double> ga = t.grad_buffer(ia);
                       std::span<double> gb = t.grad_buffer(ib);
                       for (std::size_t r = 0; r < p.rows; ++r)
                         for (std::size_t c = 0; c < p.cols; ++c) {
                           const std::size_t ka = r * p.a_rs + c * p.a_cs;
                           const std::size_t kb = r * p.b_rs + c * p.b_cs;
                           const double gi = g[r * p.cols + c];
                           if (!ga.empty()) ga[ka] += gi * da(x[ka], y[kb]);
                           if (!gb.empty()) gb[kb] += gi * db(x[ka], y[kb]);
                         }
                     });
}

// out = f(a); d(x, y) is the local derivative given input x and output y.
template <typename Forward, typename Deriv>
Var unary(const char* op, Var a, Forward f, Deriv d) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id(), io = tape.next_id();
  return tape.record(op, std::move(out), {a}, [ia, io, d](Tape& t, std::span<const double> g) {
    std::span<double> ga = t.grad_buffer(ia);
    if (ga.empty()) return;
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(io);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * d(x[i], y[i]);
  });
}

inline void check_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + " requires a rank-2 tensor, got " +
                             shape_string(t.shape()));
}

}  // namespace detail

}  // namespace clae
