#pragma once

// Finite-difference verification of every differentiable piece, grouped in
// scopes: numerics (one check per primitive), losses, encoder (bn_forward,
// encode, projection head) and attack (the crafting objective).
//
// Each check draws seeded random instances, reduces the function output to
// a scalar with a fixed random weighting, and compares the tape gradient of
// every input against central differences. Instances with a relu input or a
// max_reduce tie near the kink are redrawn.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clae/attacks.hpp"
#include "clae/contrastive.hpp"
#include "clae/encoder.hpp"
#include "clae/finite_diff.hpp"
#include "clae/ops.hpp"
#include "clae/rng.hpp"

namespace clae {

enum class GradcheckScope { numerics, losses, encoder, attack, all };

inline GradcheckScope parse_gradcheck_scope(const std::string& s) {
  if (s == "numerics") return GradcheckScope::numerics;
  if (s == "losses") return GradcheckScope::losses;
  if (s == "encoder") return GradcheckScope::encoder;
  if (s == "attack") return GradcheckScope::attack;
  if (s == "all") return GradcheckScope::all;
  throw ConfigError("unknown gradcheck scope '" + s + "' (numerics|losses|encoder|attack|all)");
}

inline const char* to_string(GradcheckScope s) {
  switch (s) {
    case GradcheckScope::numerics: return "numerics";
    case GradcheckScope::losses: return "losses";
    case GradcheckScope::encoder: return "encoder";
    case GradcheckScope::attack: return "attack";
    case GradcheckScope::all: return "all";
  }
  return "?";
}

struct GradcheckOptions {
  GradcheckScope scope = GradcheckScope::all;
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-7;
  double kink_margin = 1e-3;
  std::size_t max_redraws = 50;
};

struct CheckOutcome {
  std::string name;
  std::string scope;
  std::size_t instances = 0;
  std::size_t redrawn = 0;
  double worst_error = 0.0;   // |analytic - numeric| / max(|analytic|, |numeric|, floor/tol)
  std::size_t worst_instance = 0;
  std::string worst_input;
  bool ok = true;
  std::vector<std::string> suspects;  // failing primitives used by this check
};

struct GradcheckReport {
  std::vector<CheckOutcome> checks;

  bool ok() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckOutcome& c) { return c.ok; });
  }
  const CheckOutcome* worst() const {
    const CheckOutcome* w = nullptr;
    for (const auto& c : checks)
      if (w == nullptr || c.worst_error > w->worst_error) w = &c;
    return w;
  }
  bool ran(const std::string& name) const {
    return std::any_of(checks.begin(), checks.end(),
                       [&](const CheckOutcome& c) { return c.name == name; });
  }
};

namespace detail {

using GradFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct Instance {
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  GradFn fn;
};

using InstanceMaker = std::function<Instance(Rng&)>;

struct CheckSpec {
  std::string name;
  std::string scope;
  std::string op;  // primitive tag for numerics checks, empty otherwise
  InstanceMaker make;
};

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar objective: sum(weights * f(inputs)).
inline Var reduce_to_scalar(Tape& tape, Var y, const Tensor& weights) {
  if (y.value().size() == 1) return y;
  return sum(mul(y, tape.constant(weights)));
}

inline bool near_kink(const Tape& tape, double margin) {
  for (const Tape::Record& r : tape.records()) {
    if (r.op == "relu") {
      for (double v : tape.value(r.inputs[0]).data())
        if (std::abs(v) < margin) return true;
    } else if (r.op == "max_reduce") {
      const Tensor& x = tape.value(r.inputs[0]);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        std::vector<double> row(x.row(i).begin(), x.row(i).end());
        if (row.size() < 2) continue;
        std::partial_sort(row.begin(), row.begin() + 2, row.end(), std::greater<>());
        if (row[0] - row[1] < margin) return true;
      }
    }
  }
  return false;
}

struct InstanceResult {
  double worst = 0.0;
  std::string input;
  bool ok = true;
  std::set<std::string> ops;
};

inline double relative_error(double a, double n, const GradcheckOptions& o) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), o.abs_floor / o.rel_tol});
}

inline InstanceResult check_instance(const Instance& inst, const GradcheckOptions& o,
                                     bool* kinked) {
  // the output weighting depends only on the output shape
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inst.inputs) leaves.push_back(tape.leaf(t, true));
  Var y = inst.fn(tape, leaves);
  Rng wrng = Rng::stream(fnv1a64(shape_string(y.shape())), "probe");
  const Tensor weights = random_tensor(wrng, y.shape(), 0.5, 1.5);
  Var out = reduce_to_scalar(tape, y, weights);
  if (near_kink(tape, o.kink_margin)) {
    *kinked = true;
    return {};
  }
  *kinked = false;
  tape.backward(out);

  InstanceResult res;
  for (const Tape::Record& r : tape.records()) res.ops.insert(r.op);
  for (std::size_t k = 0; k < inst.inputs.size(); ++k) {
    const Tensor analytic = tape.gradient(leaves[k]);
    const std::function<double(const Tensor&)> f = [&](const Tensor& xk) {
      Tape t2;
      std::vector<Var> vs;
      for (std::size_t m = 0; m < inst.inputs.size(); ++m)
        vs.push_back(t2.constant(m == k ? xk : inst.inputs[m]));
      return reduce_to_scalar(t2, inst.fn(t2, vs), weights).value().item();
    };
    const Tensor numeric = finite_diff_grad(f, inst.inputs[k], o.step);
    const GradientComparison cmp =
        compare_gradients(analytic.data(), numeric.data(), o.rel_tol, o.abs_floor);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double e = relative_error(analytic[i], numeric[i], o);
      if (e > res.worst) {
        res.worst = e;
        res.input = inst.names[k] + "[" + std::to_string(i) + "]";
      }
    }
    res.ok = res.ok && cmp.ok;
  }
  return res;
}

inline CheckOutcome run_check(const CheckSpec& spec, const GradcheckOptions& o,
                              std::size_t instances) {
  CheckOutcome out;
  out.name = spec.name;
  out.scope = spec.scope;
  Rng rng = Rng::stream(o.seed, "gradcheck." + spec.name);
  for (std::size_t i = 0; i < instances; ++i) {
    InstanceResult r;
    bool kinked = true;
    for (std::size_t attempt = 0; kinked; ++attempt) {
      if (attempt > o.max_redraws)
        throw NumericDomainError("gradcheck " + spec.name + ": no kink-free instance after " +
                                 std::to_string(o.max_redraws) + " redraws");
      if (attempt > 0) ++out.redrawn;
      r = check_instance(spec.make(rng), o, &kinked);
    }
    ++out.instances;
    out.ok = out.ok && r.ok;
    if (r.worst >= out.worst_error) {
      out.worst_error = r.worst;
      out.worst_instance = i;
      out.worst_input = r.input;
    }
    if (!r.ok && out.suspects.empty()) {
      for (const std::string& op : r.ops) out.suspects.push_back(op);
    }
  }
  return out;
}

// ---- instance makers ---------------------------------------------------

inline Instance unary_instance(Rng& rng, Shape shape, double lo, double hi,
                               std::function<Var(Var)> f) {
  return Instance{{random_tensor(rng, std::move(shape), lo, hi)},
                  {"x"},
                  [f](Tape&, const std::vector<Var>& v) { return f(v[0]); }};
}

inline Instance binary_instance(Rng& rng, Shape a, Shape b, double blo, double bhi,
                                std::function<Var(Var, Var)> f) {
  return Instance{{random_tensor(rng, std::move(a)), random_tensor(rng, std::move(b), blo, bhi)},
                  {"a", "b"},
                  [f](Tape&, const std::vector<Var>& v) { return f(v[0], v[1]); }};
}

inline std::vector<CheckSpec> numerics_checks() {
  std::vector<CheckSpec> s;
  auto add_binary = [&s](const std::string& name, const std::string& op, Shape a, Shape b,
                         double blo, double bhi, std::function<Var(Var, Var)> f) {
    s.push_back({name, "numerics", op, [=](Rng& rng) { return binary_instance(rng, a, b, blo, bhi, f); }});
  };
  auto add_unary = [&s](const std::string& name, const std::string& op, Shape shape, double lo,
                        double hi, std::function<Var(Var)> f) {
    s.push_back({name, "numerics", op, [=](Rng& rng) { return unary_instance(rng, shape, lo, hi, f); }});
  };
  auto fadd = [](Var a, Var b) { return add(a, b); };
  auto fsub = [](Var a, Var b) { return sub(a, b); };
  auto fmul = [](Var a, Var b) { return mul(a, b); };
  auto fdiv = [](Var a, Var b) { return div(a, b); };
  add_binary("add", "add", {3, 4}, {3, 4}, -1, 1, fadd);
  add_binary("add.row_broadcast", "add", {3, 4}, {1, 4}, -1, 1, fadd);
  add_binary("add.scalar_broadcast", "add", {3, 4}, {1}, -1, 1, fadd);
  add_binary("sub", "sub", {3, 4}, {3, 1}, -1, 1, fsub);
  add_binary("mul", "mul", {3, 4}, {3, 4}, -1, 1, fmul);
  add_binary("mul.col_broadcast", "mul", {3, 4}, {3, 1}, -1, 1, fmul);
  add_binary("div", "div", {3, 4}, {1, 4}, 0.5, 2.0, fdiv);
  add_unary("neg", "neg", {3, 4}, -1, 1, [](Var a) { return neg(a); });
  add_unary("scale", "scale", {3, 4}, -1, 1, [](Var a) { return scale(a, -2.5); });
  add_unary("add_scalar", "add_scalar", {3, 4}, -1, 1, [](Var a) { return add_scalar(a, 0.7); });
  add_unary("relu", "relu", {3, 4}, -1, 1, [](Var a) { return relu(a); });
  add_unary("exp", "exp", {3, 4}, -1, 1, [](Var a) { return exp(a); });
  add_unary("log", "log", {3, 4}, 0.5, 2.0, [](Var a) { return log(a); });
  add_unary("sqrt", "sqrt", {3, 4}, 0.5, 2.0, [](Var a) { return sqrt(a); });
  add_binary("matmul", "matmul", {3, 4}, {4, 2}, -1, 1, [](Var a, Var b) { return matmul(a, b); });
  add_unary("transpose", "transpose", {3, 4}, -1, 1, [](Var a) { return transpose(a); });
  add_unary("sum", "sum", {3, 4}, -1, 1, [](Var a) { return sum(a); });
  add_unary("sum_axis.0", "sum_axis", {3, 4}, -1, 1, [](Var a) { return sum(a, 0); });
  add_unary("sum_axis.1", "sum_axis", {3, 4}, -1, 1, [](Var a) { return sum(a, 1); });
  add_unary("mean", "mean", {3, 4}, -1, 1, [](Var a) { return mean(a); });
  add_unary("mean_axis.0", "mean_axis", {3, 4}, -1, 1, [](Var a) { return mean(a, 0); });
  add_unary("mean_axis.1", "mean_axis", {3, 4}, -1, 1, [](Var a) { return mean(a, 1); });
  add_unary("max_reduce", "max_reduce", {3, 4}, -1, 1, [](Var a) { return max_reduce(a); });
  add_unary("l2_normalize", "l2_normalize", {3, 4}, -1, 1, [](Var a) { return l2_normalize(a); });
  add_unary("logsumexp", "logsumexp", {3, 4}, -2, 2, [](Var a) { return logsumexp(a); });
  add_unary("logsumexp.masked", "logsumexp", {4, 4}, -2, 2, [](Var a) {
    Tensor mask({4, 4}, 1.0);
    for (std::size_t i = 0; i < 4; ++i) mask[i * 4 + i] = 0.0;
    return logsumexp(a, mask);
  });
  add_unary("softmax", "softmax", {3, 4}, -2, 2, [](Var a) { return softmax(a); });
  add_binary("concat_rows", "concat_rows", {2, 3}, {3, 3}, -1, 1,
             [](Var a, Var b) { return concat_rows(a, b); });
  return s;
}

inline Tensor random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = random_tensor(rng, {rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    auto r = t.row(i);
    double s = 0.0;
    for (double v : r) s += v * v;
    for (double& v : r) v /= std::sqrt(s);
  }
  return t;
}

inline std::vector<CheckSpec> loss_checks() {
  std::vector<CheckSpec> s;
  const double taus[] = {0.1, 0.5, 1.0};
  s.push_back({"contrastive_loss", "losses", "", [taus](Rng& rng) {
                 const double tau = taus[rng.index(3)];
                 return Instance{{random_unit_rows(rng, 4, 3), random_unit_rows(rng, 4, 3)},
                                 {"zp", "zq"},
                                 [tau](Tape&, const std::vector<Var>& v) {
                                   return contrastive_loss(v[0], v[1], tau);
                                 }};
               }});
  s.push_back({"ce_reformulation", "losses", "", [taus](Rng& rng) {
                 const double tau = taus[rng.index(3)];
                 return Instance{{random_unit_rows(rng, 4, 3), random_unit_rows(rng, 4, 3)},
                                 {"zq", "zw"},
                                 [tau](Tape&, const std::vector<Var>& v) {
                                   return ce_reformulation(v[0], reformulated_weights(v[1], tau));
                                 }};
               }});
  s.push_back({"simclr_loss", "losses", "", [taus](Rng& rng) {
                 const double tau = taus[rng.index(3)];
                 return Instance{{random_unit_rows(rng, 4, 3), random_unit_rows(rng, 4, 3)},
                                 {"z1", "z2"},
                                 [tau](Tape&, const std::vector<Var>& v) {
                                   return simclr_loss(v[0], v[1], tau);
                                 }};
               }});
  // raw (unnormalized) inputs through l2_normalize, as the encoder feeds them
  s.push_back({"contrastive_loss.normalized", "losses", "", [](Rng& rng) {
                 return Instance{{random_tensor(rng, {4, 3}), random_tensor(rng, {4, 3})},
                                 {"hp", "hq"},
                                 [](Tape&, const std::vector<Var>& v) {
                                   return contrastive_loss(l2_normalize(v[0]), l2_normalize(v[1]), 0.5);
                                 }};
               }});
  return s;
}

// Tiny encoder for the encoder and attack scopes.
inline EncoderConfig tiny_encoder_config(bool head) {
  EncoderConfig c;
  c.input_dim = 5;
  c.hidden_dims = {4, 3};
  c.embed_dim = 3;
  c.use_projection_head = head;
  c.projection_dim = 3;
  return c;
}

// Random encoder with perturbed BN affine parameters and running statistics.
inline EncoderState random_encoder(Rng& rng, bool head) {
  EncoderState e = init_encoder(tiny_encoder_config(head), rng.next_u64());
  for (auto& n : e.norms) {
    for (double& g : n.gamma.data()) g = rng.uniform(0.5, 1.5);
    for (double& b : n.beta.data()) b = rng.uniform(-0.5, 0.5);
    for (auto& st : n.branches) {
      for (double& m : st.running_mean) m = rng.uniform(-0.3, 0.3);
      for (double& v : st.running_var) v = rng.uniform(0.5, 1.5);
    }
  }
  return e;
}

// Inputs: images then every encoder parameter in EncoderState::parameters() order.
inline Instance encoder_instance(Rng& rng, bool head, Mode mode, Branch branch, bool projected) {
  auto enc = std::make_shared<EncoderState>(random_encoder(rng, head));
  Instance inst;
  inst.inputs.push_back(random_tensor(rng, {4, 5}, 0.0, 1.0));
  inst.names.push_back("images");
  std::size_t k = 0;
  for (const Tensor* p : enc->parameters()) {
    inst.inputs.push_back(*p);
    inst.names.push_back("param" + std::to_string(k++));
  }
  inst.fn = [enc, mode, branch, projected](Tape&, const std::vector<Var>& v) {
    EncoderVars vars;
    const std::size_t layers = enc->layers.size(), norms = enc->norms.size();
    std::size_t i = 1;
    for (std::size_t l = 0; l < layers; ++l) {
      vars.weights.push_back(v[i++]);
      vars.biases.push_back(v[i++]);
    }
    for (std::size_t n = 0; n < norms; ++n) {
      vars.gammas.push_back(v[i++]);
      vars.betas.push_back(v[i++]);
    }
    if (enc->head) {
      vars.head_weight = v[i++];
      vars.head_bias = v[i++];
    }
    Var z = encode(*v[0].tape(), v[0], std::as_const(*enc), vars, branch, mode);
    return projected ? project(z, *enc, vars) : z;
  };
  return inst;
}

inline std::vector<CheckSpec> encoder_checks() {
  std::vector<CheckSpec> s;
  for (Mode mode : {Mode::train, Mode::eval}) {
    const std::string m = mode == Mode::train ? "train" : "eval";
    s.push_back({"bn_forward." + m, "encoder", "", [mode](Rng& rng) {
                   auto stats = std::make_shared<BatchNormStats>();
                   for (int j = 0; j < 3; ++j) {
                     stats->running_mean.push_back(rng.uniform(-0.5, 0.5));
                     stats->running_var.push_back(rng.uniform(0.5, 1.5));
                   }
                   return Instance{{random_tensor(rng, {4, 3}, -2, 2), random_tensor(rng, {1, 3}, 0.5, 1.5),
                                    random_tensor(rng, {1, 3}, -0.5, 0.5)},
                                   {"x", "gamma", "beta"},
                                   [stats, mode](Tape& t, const std::vector<Var>& v) {
                                     return bn_forward(t, v[0], v[1], v[2], *stats, 1e-5, mode);
                                   }};
                 }});
  }
  s.push_back({"encode.train.clean", "encoder", "",
               [](Rng& r) { return encoder_instance(r, false, Mode::train, Branch::clean, false); }});
  s.push_back({"encode.train.adv", "encoder", "",
               [](Rng& r) { return encoder_instance(r, false, Mode::train, Branch::adversarial, false); }});
  s.push_back({"encode.eval.clean", "encoder", "",
               [](Rng& r) { return encoder_instance(r, false, Mode::eval, Branch::clean, false); }});
  s.push_back({"encode.head", "encoder", "",
               [](Rng& r) { return encoder_instance(r, true, Mode::train, Branch::clean, true); }});
  return s;
}

inline std::vector<CheckSpec> attack_checks() {
  std::vector<CheckSpec> s;
  for (LossVariant variant : {LossVariant::plain, LossVariant::simclr}) {
    const std::string name = std::string("attack_objective.") + to_string(variant);
    s.push_back({name, "attack", "", [variant](Rng& rng) {
                   const bool head = variant == LossVariant::simclr;
                   auto enc = std::make_shared<EncoderState>(random_encoder(rng, head));
                   const LossConfig loss = LossConfig::defaults_for(variant);
                   const Tensor xq = random_tensor(rng, {4, 5}, 0.0, 1.0);
                   Tensor images = xq;
                   for (double& v : images.data()) v = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);
                   const Tensor anchors = attack_anchors(xq, *enc, loss);
                   return Instance{{images},
                                   {"images"},
                                   [enc, loss, anchors](Tape& t, const std::vector<Var>& v) {
                                     const EncoderVars vars = bind_parameters(t, *enc, false);
                                     return attack_objective(t, t.constant(anchors), v[0], *enc, vars, loss);
                                   }};
                 }});
  }
  return s;
}

inline std::vector<CheckSpec> checks_for(GradcheckScope scope) {
  std::vector<CheckSpec> out;
  auto take = [&out](std::vector<CheckSpec> v) {
    for (auto& c : v) out.push_back(std::move(c));
  };
  if (scope == GradcheckScope::numerics || scope == GradcheckScope::all) take(numerics_checks());
  if (scope == GradcheckScope::losses || scope == GradcheckScope::all) take(loss_checks());
  if (scope == GradcheckScope::encoder || scope == GradcheckScope::all) take(encoder_checks());
  if (scope == GradcheckScope::attack || scope == GradcheckScope::all) take(attack_checks());
  return out;
}

}  // namespace detail

// Runs every check of the chosen scope. Composite checks that fail are
// followed by the primitive checks of the ops on their tape; the primitives
// that fail themselves are listed as suspects.
inline GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  GradcheckReport report;
  const std::vector<detail::CheckSpec> prims = detail::numerics_checks();
  for (const detail::CheckSpec& spec : detail::checks_for(opts.scope)) {
    CheckOutcome c = detail::run_check(spec, opts, opts.instances);
    if (!c.ok) {
      const std::set<std::string> used(c.suspects.begin(), c.suspects.end());
      c.suspects.clear();
      std::set<std::string> failing;
      for (const detail::CheckSpec& p : prims) {
        if (!used.count(p.op)) continue;
        if (!detail::run_check(p, opts, std::min<std::size_t>(opts.instances, 5)).ok)
          failing.insert(p.op);
      }
      c.suspects.assign(failing.begin(), failing.end());
    }
    report.checks.push_back(std::move(c));
  }
  return report;
}

inline std::string format_outcome(const CheckOutcome& c) {
  std::ostringstream os;
  os << (c.ok ? "ok   " : "FAIL ") << c.scope << "/" << c.name << "  instances=" << c.instances
     << " redrawn=" << c.redrawn << " worst_rel_error=" << c.worst_error;
  if (!c.worst_input.empty()) os << " at " << c.worst_input << " (instance " << c.worst_instance << ")";
  if (!c.ok) {
    os << " suspect ops:";
    if (c.suspects.empty()) os << " none isolated";
    for (const auto& s : c.suspects) os << " " << s;
  }
  return os.str();
}

}  // namespace clae
