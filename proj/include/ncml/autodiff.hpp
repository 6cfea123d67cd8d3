#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ncml/tensor.hpp"

// Minimal reverse-mode differentiation engine.
//
// A Tape records a straight-line program over a closed primitive set as it
// executes (eager evaluation). backward() then propagates adjoints once;
// tapes are single-use and re-differentiation requires re-recording.
// Tensors on a tape are immutable after construction; disjoint tapes may be
// driven from different threads, one tape is confined to one thread.

namespace ncml::ad {

// Shape mismatch in a primitive. Carries the primitive name and the
// offending shapes in both the message and the fields.
struct ShapeError : std::invalid_argument {
  ShapeError(std::string prim, std::string detail)
      : std::invalid_argument(prim + ": " + detail),
        primitive(std::move(prim)),
        shapes(std::move(detail)) {}
  std::string primitive;
  std::string shapes;
};

struct TapeError : std::logic_error {
  explicit TapeError(const std::string& msg) : std::logic_error(msg) {}
};

class Tape;

// Handle to a value on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Gradients produced by one backward() pass. Parameter gradients are keyed
// by the caller-chosen parameter id; input gradients are ordered by input
// registration. Every registered parameter/input has an entry (zero-filled
// when the output does not depend on it).
struct GradientBundle {
  std::vector<std::pair<int, Tensor>> params;  // (param id, gradient)
  std::vector<Tensor> inputs;

  const Tensor& param_grad(int id) const {
    for (const auto& [pid, g] : params)
      if (pid == id) return g;
    throw TapeError("gradient requested for untracked parameter id " + std::to_string(id));
  }
  const Tensor& input_grad(size_t index = 0) const {
    if (index >= inputs.size())
      throw TapeError("gradient requested for untracked input " + std::to_string(index));
    return inputs[index];
  }
};

namespace detail {

enum class Op : std::uint8_t {
  Leaf,       // param / input / const
  MatVec,     // (W ⊙ mask) · x
  Add,
  Sub,
  Mul,
  Neg,
  Scale,      // c * x
  AddScalar,  // x + c
  ClampMin,   // max(x, c)
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Softplus,
  LogExpm1,   // log(e^x - 1), x > 0
  Sin,
  Cos,
  Sum,
  LogSumExp,
  Concat,
  Slice,
};

struct Node {
  Op op = Op::Leaf;
  int a = -1;
  int b = -1;
  double c = 0.0;                        // scalar attribute
  int offset = 0;                        // Slice
  std::vector<int> list;                 // Concat inputs
  std::shared_ptr<const Tensor> mask;    // MatVec mask (may be null)
};

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// log(e^x - 1) for x > 0 without overflow or cancellation
inline double stable_logexpm1(double x) {
  return x > 0.6931471805599453 ? x + std::log1p(-std::exp(-x))
                                : std::log(std::expm1(x));
}

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Vars alias the tape by address; keep tapes pinned.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  // Tracked parameter leaf; gradient reported under `param_id`.
  Var param(Tensor value, int param_id) {
    int id = push(detail::Node{}, std::move(value));
    param_ids_.emplace_back(id, param_id);
    return {this, id};
  }

  // Tracked input leaf; gradient reported in registration order.
  Var input(Tensor value) {
    int id = push(detail::Node{}, std::move(value));
    input_ids_.push_back(id);
    return {this, id};
  }

  // Untracked leaf.
  Var constant(Tensor value) { return {this, push(detail::Node{}, std::move(value))}; }

  const Tensor& value(Var v) const { return values_[static_cast<size_t>(v.id)]; }

  // Mutable access to a recorded value. Introspection/debug hook; mutating
  // a primal invalidates gradients, which is exactly what the gradient
  // checker's negative-control fixture exploits.
  Tensor& mutable_value(Var v) { return values_[static_cast<size_t>(v.id)]; }

  int num_values() const { return static_cast<int>(values_.size()); }
  bool consumed() const { return consumed_; }

  friend GradientBundle backward(Tape& tape, Var output, const Tensor& seed);

  // the primitive set (defined at namespace scope below)
  friend Var matvec(Var w, Var x);
  friend Var matvec_masked(Var w, Var x, std::shared_ptr<const Tensor> mask);
  friend Var add(Var a, Var b);
  friend Var sub(Var a, Var b);
  friend Var mul(Var a, Var b);
  friend Var neg(Var a);
  friend Var scale(Var a, double c);
  friend Var add_scalar(Var a, double c);
  friend Var clamp_min(Var a, double c);
  friend Var tanh(Var a);
  friend Var sigmoid(Var a);
  friend Var exp(Var a);
  friend Var log(Var a);
  friend Var softplus(Var a);
  friend Var logexpm1(Var a);
  friend Var sin(Var a);
  friend Var cos(Var a);
  friend Var sum(Var a);
  friend Var logsumexp(Var a);
  friend Var concat(const std::vector<Var>& parts);
  friend Var slice(Var a, int offset, int len);

 private:
  int push(detail::Node node, Tensor value) {
    nodes_.push_back(std::move(node));
    values_.push_back(std::move(value));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static Var matvec_impl(const char* name, Var w, Var x,
                         std::shared_ptr<const Tensor> mask) {
    Tape& t = *w.tape;
    const Tensor& W = t.value(w);
    const Tensor& X = t.value(x);
    if (W.rank() != 2 || X.rank() != 1 || W.cols() != X.size()) {
      throw ShapeError(name, "W " + W.shape_string() + ", x " + X.shape_string());
    }
    if (mask && !mask->same_shape(W)) {
      throw ShapeError(name, "mask " + mask->shape_string() + " vs W " + W.shape_string());
    }
    Tensor out({W.rows()});
    if (mask) {
      const Tensor& M = *mask;
      for (int i = 0; i < W.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < W.cols(); ++j) s += W.at(i, j) * M.at(i, j) * X[j];
        out[i] = s;
      }
    } else {
      for (int i = 0; i < W.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < W.cols(); ++j) s += W.at(i, j) * X[j];
        out[i] = s;
      }
    }
    detail::Node n;
    n.op = detail::Op::MatVec;
    n.a = w.id;
    n.b = x.id;
    n.mask = std::move(mask);
    return {&t, t.push(std::move(n), std::move(out))};
  }

  // elementwise binary with size-1 broadcast on either side
  static Var binary_impl(detail::Op op, const char* name, Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    bool a_scalar = A.size() == 1;
    bool b_scalar = B.size() == 1;
    if (!A.same_shape(B) && !a_scalar && !b_scalar) {
      throw ShapeError(name, "a " + A.shape_string() + ", b " + B.shape_string());
    }
    const Tensor& shape_src = a_scalar && !b_scalar ? B : A;
    Tensor out(shape_src.shape());
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) {
      double av = A[a_scalar ? 0 : i];
      double bv = B[b_scalar ? 0 : i];
      switch (op) {
        case detail::Op::Add: out[i] = av + bv; break;
        case detail::Op::Sub: out[i] = av - bv; break;
        case detail::Op::Mul: out[i] = av * bv; break;
        default: break;
      }
    }
    detail::Node n2;
    n2.op = op;
    n2.a = a.id;
    n2.b = b.id;
    return {&t, t.push(std::move(n2), std::move(out))};
  }

  static Var unary_impl(detail::Op op, Var a, double c) {
    Tape& t = *a.tape;
    const Tensor& A = t.value(a);
    Tensor out(A.shape());
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) {
      double x = A[i];
      double y = 0.0;
      switch (op) {
        case detail::Op::Neg: y = -x; break;
        case detail::Op::Scale: y = c * x; break;
        case detail::Op::AddScalar: y = x + c; break;
        case detail::Op::ClampMin: y = x < c ? c : x; break;
        case detail::Op::Tanh: y = std::tanh(x); break;
        case detail::Op::Sigmoid: y = detail::stable_sigmoid(x); break;
        case detail::Op::Exp: y = std::exp(x); break;
        case detail::Op::Log: y = std::log(x); break;
        case detail::Op::Softplus: y = detail::stable_softplus(x); break;
        case detail::Op::LogExpm1:
          if (!(x > 0.0))
            throw ShapeError("logexpm1", "requires positive input, got " + std::to_string(x));
          y = detail::stable_logexpm1(x);
          break;
        case detail::Op::Sin: y = std::sin(x); break;
        case detail::Op::Cos: y = std::cos(x); break;
        default: break;
      }
      out[i] = y;
    }
    detail::Node n2;
    n2.op = op;
    n2.a = a.id;
    n2.c = c;
    return {&t, t.push(std::move(n2), std::move(out))};
  }

  std::vector<detail::Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<std::pair<int, int>> param_ids_;  // (value id, caller param id)
  std::vector<int> input_ids_;
  bool consumed_ = false;
};

inline Var matvec(Var w, Var x) { return Tape::matvec_impl("matvec", w, x, nullptr); }

inline Var matvec_masked(Var w, Var x, std::shared_ptr<const Tensor> mask) {
  if (!mask) throw ShapeError("matvec_masked", "null mask");
  return Tape::matvec_impl("matvec_masked", w, x, std::move(mask));
}

inline Var add(Var a, Var b) { return Tape::binary_impl(detail::Op::Add, "add", a, b); }
inline Var sub(Var a, Var b) { return Tape::binary_impl(detail::Op::Sub, "sub", a, b); }
inline Var mul(Var a, Var b) { return Tape::binary_impl(detail::Op::Mul, "mul", a, b); }

inline Var neg(Var a) { return Tape::unary_impl(detail::Op::Neg, a, 0.0); }
inline Var scale(Var a, double c) { return Tape::unary_impl(detail::Op::Scale, a, c); }
inline Var add_scalar(Var a, double c) { return Tape::unary_impl(detail::Op::AddScalar, a, c); }
inline Var clamp_min(Var a, double c) { return Tape::unary_impl(detail::Op::ClampMin, a, c); }
inline Var tanh(Var a) { return Tape::unary_impl(detail::Op::Tanh, a, 0.0); }
inline Var sigmoid(Var a) { return Tape::unary_impl(detail::Op::Sigmoid, a, 0.0); }
inline Var exp(Var a) { return Tape::unary_impl(detail::Op::Exp, a, 0.0); }
inline Var log(Var a) { return Tape::unary_impl(detail::Op::Log, a, 0.0); }
inline Var softplus(Var a) { return Tape::unary_impl(detail::Op::Softplus, a, 0.0); }
inline Var logexpm1(Var a) { return Tape::unary_impl(detail::Op::LogExpm1, a, 0.0); }
inline Var sin(Var a) { return Tape::unary_impl(detail::Op::Sin, a, 0.0); }
inline Var cos(Var a) { return Tape::unary_impl(detail::Op::Cos, a, 0.0); }

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double x : t.value(a).values()) s += x;
  detail::Node n;
  n.op = detail::Op::Sum;
  n.a = a.id;
  return {&t, t.push(std::move(n), Tensor::scalar(s))};
}

inline Var logsumexp(Var a) {
  Tape& t = *a.tape;
  const auto& xs = t.value(a).values();
  double m = xs[0];
  for (double x : xs) m = std::max(m, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  detail::Node n;
  n.op = detail::Op::LogSumExp;
  n.a = a.id;
  return {&t, t.push(std::move(n), Tensor::scalar(m + std::log(s)))};
}

inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Tape& t = *parts[0].tape;
  std::vector<double> out;
  detail::Node n;
  n.op = detail::Op::Concat;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    if (v.rank() != 1)
      throw ShapeError("concat", "rank-1 inputs required, got " + v.shape_string());
    out.insert(out.end(), v.values().begin(), v.values().end());
    n.list.push_back(p.id);
  }
  return {&t, t.push(std::move(n), Tensor::vector(std::move(out)))};
}

inline Var slice(Var a, int offset, int len) {
  Tape& t = *a.tape;
  const Tensor& v = t.value(a);
  if (v.rank() != 1 || offset < 0 || len < 1 || offset + len > v.size()) {
    throw ShapeError("slice", "offset " + std::to_string(offset) + " len " +
                                  std::to_string(len) + " of " + v.shape_string());
  }
  std::vector<double> out(v.data() + offset, v.data() + offset + len);
  detail::Node n;
  n.op = detail::Op::Slice;
  n.a = a.id;
  n.offset = offset;
  return {&t, t.push(std::move(n), Tensor::vector(std::move(out)))};
}

// Propagates seed through the tape once. `seed` must match the output shape;
// returns d(seed . output)/d(leaf) for every tracked leaf.
inline GradientBundle backward(Tape& tape, Var output, const Tensor& seed) {
  if (tape.consumed_) throw TapeError("backward: tape already consumed");
  const Tensor& out_val = tape.value(output);
  if (!seed.same_shape(out_val)) {
    throw ShapeError("backward", "seed " + seed.shape_string() + " vs output " +
                                     out_val.shape_string());
  }
  tape.consumed_ = true;

  const int n = tape.num_values();
  std::vector<Tensor> adj(static_cast<size_t>(n));
  std::vector<bool> live(static_cast<size_t>(n), false);
  auto touch = [&](int id) -> Tensor& {
    if (!live[static_cast<size_t>(id)]) {
      adj[static_cast<size_t>(id)] = Tensor(tape.values_[static_cast<size_t>(id)].shape());
      live[static_cast<size_t>(id)] = true;
    }
    return adj[static_cast<size_t>(id)];
  };
  touch(output.id) = seed;

  using detail::Op;
  for (int id = n - 1; id >= 0; --id) {
    if (!live[static_cast<size_t>(id)]) continue;
    const detail::Node& node = tape.nodes_[static_cast<size_t>(id)];
    if (node.op == Op::Leaf) continue;
    const Tensor& g = adj[static_cast<size_t>(id)];
    const Tensor& y = tape.values_[static_cast<size_t>(id)];

    switch (node.op) {
      case Op::MatVec: {
        const Tensor& W = tape.values_[static_cast<size_t>(node.a)];
        const Tensor& X = tape.values_[static_cast<size_t>(node.b)];
        Tensor& gw = touch(node.a);
        Tensor& gx = touch(node.b);
        if (node.mask) {
          const Tensor& M = *node.mask;
          for (int i = 0; i < W.rows(); ++i) {
            double gi = g[i];
            if (gi == 0.0) continue;
            for (int j = 0; j < W.cols(); ++j) {
              double m = M.at(i, j);
              gw.at(i, j) += gi * m * X[j];
              gx[j] += gi * m * W.at(i, j);
            }
          }
        } else {
          for (int i = 0; i < W.rows(); ++i) {
            double gi = g[i];
            if (gi == 0.0) continue;
            for (int j = 0; j < W.cols(); ++j) {
              gw.at(i, j) += gi * X[j];
              gx[j] += gi * W.at(i, j);
            }
          }
        }
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& A = tape.values_[static_cast<size_t>(node.a)];
        const Tensor& B = tape.values_[static_cast<size_t>(node.b)];
        bool a_scalar = A.size() == 1 && y.size() > 1;
        bool b_scalar = B.size() == 1 && y.size() > 1;
        Tensor& ga = touch(node.a);
        Tensor& gb = touch(node.b);
        for (std::int64_t i = 0; i < y.size(); ++i) {
          double gi = g[i];
          double av = A[a_scalar ? 0 : i];
          double bv = B[b_scalar ? 0 : i];
          double da = 0.0, db = 0.0;
          if (node.op == Op::Add) {
            da = gi;
            db = gi;
          } else if (node.op == Op::Sub) {
            da = gi;
            db = -gi;
          } else {
            da = gi * bv;
            db = gi * av;
          }
          ga[a_scalar ? 0 : i] += da;
          gb[b_scalar ? 0 : i] += db;
        }
        break;
      }
      case Op::Neg:
      case Op::Scale:
      case Op::AddScalar:
      case Op::ClampMin:
      case Op::Tanh:
      case Op::Sigmoid:
      case Op::Exp:
      case Op::Log:
      case Op::Softplus:
      case Op::LogExpm1:
      case Op::Sin:
      case Op::Cos: {
        const Tensor& X = tape.values_[static_cast<size_t>(node.a)];
        Tensor& ga = touch(node.a);
        for (std::int64_t i = 0; i < y.size(); ++i) {
          double gi = g[i];
          if (gi == 0.0) continue;
          double d = 0.0;
          double x = X[i];
          switch (node.op) {
            case Op::Neg: d = -1.0; break;
            case Op::Scale: d = node.c; break;
            case Op::AddScalar: d = 1.0; break;
            case Op::ClampMin: d = x > node.c ? 1.0 : 0.0; break;
            case Op::Tanh: d = 1.0 - y[i] * y[i]; break;
            case Op::Sigmoid: d = y[i] * (1.0 - y[i]); break;
            case Op::Exp: d = y[i]; break;
            case Op::Log: d = 1.0 / x; break;
            case Op::Softplus: d = detail::stable_sigmoid(x); break;
            case Op::LogExpm1: d = 1.0 / (-std::expm1(-x)); break;
            case Op::Sin: d = std::cos(x); break;
            case Op::Cos: d = -std::sin(x); break;
            default: break;
          }
          ga[i] += gi * d;
        }
        break;
      }
      case Op::Sum: {
        Tensor& ga = touch(node.a);
        double g0 = g[0];
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g0;
        break;
      }
      case Op::LogSumExp: {
        const Tensor& X = tape.values_[static_cast<size_t>(node.a)];
        Tensor& ga = touch(node.a);
        double g0 = g[0];
        double lse = y[0];
        for (std::int64_t i = 0; i < X.size(); ++i) ga[i] += g0 * std::exp(X[i] - lse);
        break;
      }
      case Op::Concat: {
        std::int64_t off = 0;
        for (int src : node.list) {
          Tensor& ga = touch(src);
          for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g[off + i];
          off += ga.size();
        }
        break;
      }
      case Op::Slice: {
        Tensor& ga = touch(node.a);
        for (std::int64_t i = 0; i < y.size(); ++i) ga[node.offset + i] += g[i];
        break;
      }
      case Op::Leaf:
        break;
    }
  }

  GradientBundle bundle;
  for (auto [vid, pid] : tape.param_ids_) {
    if (live[static_cast<size_t>(vid)]) {
      bundle.params.emplace_back(pid, std::move(adj[static_cast<size_t>(vid)]));
    } else {
      bundle.params.emplace_back(pid, Tensor(tape.values_[static_cast<size_t>(vid)].shape()));
    }
  }
  for (int vid : tape.input_ids_) {
    if (live[static_cast<size_t>(vid)]) {
      bundle.inputs.push_back(std::move(adj[static_cast<size_t>(vid)]));
    } else {
      bundle.inputs.emplace_back(tape.values_[static_cast<size_t>(vid)].shape());
    }
  }
  return bundle;
}

// --- program recording & gradient checking -----------------------------

// A program is a callable composing the primitives above over registered
// tracked inputs.
using Program = std::function<Var(Tape&, const std::vector<Var>&)>;

// Vars hold raw tape pointers, so the tape lives behind a unique_ptr to
// keep its address stable across moves of the Recording.
struct Recording {
  std::unique_ptr<Tape> tape;
  Var output;
  std::vector<Var> inputs;
};

inline Recording record_forward(const Program& program, const std::vector<Tensor>& inputs) {
  Recording rec;
  rec.tape = std::make_unique<Tape>();
  for (const Tensor& t : inputs) rec.inputs.push_back(rec.tape->input(t));
  rec.output = program(*rec.tape, rec.inputs);
  return rec;
}

struct GradCheckEntry {
  int input = 0;
  std::int64_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

// Compares backward() against central finite differences of sum(output),
// coordinate by coordinate. Reports failures instead of raising.
// `mutate` (optional) runs between recording and backward; the test suite
// uses it to corrupt a stored primal as a negative control.
inline GradCheckReport check_gradients(
    const Program& program, const std::vector<Tensor>& inputs, double h, double tol,
    const std::function<void(Tape&, Var)>& mutate = nullptr) {
  if (!(h > 0.0) || !(tol > 0.0)) {
    throw std::invalid_argument("check_gradients: h and tol must be positive");
  }
  Recording rec = record_forward(program, inputs);
  if (mutate) mutate(*rec.tape, rec.output);
  Tensor seed = Tensor::full(rec.tape->value(rec.output).shape(), 1.0);
  GradientBundle bundle = backward(*rec.tape, rec.output, seed);

  auto eval_sum = [&](const std::vector<Tensor>& xs) {
    Recording r = record_forward(program, xs);
    double s = 0.0;
    for (double v : r.tape->value(r.output).values()) s += v;
    return s;
  };

  GradCheckReport report;
  std::vector<Tensor> work = inputs;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].size(); ++i) {
      double orig = work[k][i];
      work[k][i] = orig + h;
      double fp = eval_sum(work);
      work[k][i] = orig - h;
      double fm = eval_sum(work);
      work[k][i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double analytic = bundle.inputs[k][i];
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      double rel = std::abs(analytic - numeric) / denom;
      report.entries.push_back({static_cast<int>(k), i, analytic, numeric, rel});
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace ncml::ad
