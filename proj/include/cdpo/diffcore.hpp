#pragma once

// Dense row-major matrices of doubles and a reverse-mode tape over a closed
// set of primitives. Every trainable piece of the library (GNN, policy,
// soft-prompt projector) is written against these primitives.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdpo/error.hpp"
#include "cdpo/rng.hpp"

namespace cdpo::diff {

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    check_dims();
  }

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_dims();
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape [" +
                       std::to_string(rows_) + "x" + std::to_string(cols_) + "]");
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }

  std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  double item() const {
    if (rows_ != 1 || cols_ != 1) throw ShapeError("Tensor::item on " + shape_string());
    return data_[0];
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  bool requires_grad = false;

 private:
  void check_dims() const {
    if (rows_ == 0 || cols_ == 0) {
      throw ShapeError("Tensor: dimensions must be positive, got [" + std::to_string(rows_) +
                       "x" + std::to_string(cols_) + "]");
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double x) { return std::isfinite(x); });
}

// Named trainable matrix. The tape reads `value` in place and, after
// backward, adds into `grad`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.rows(), value.cols());
  }

  void zero_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.rows(), value.cols());
    grad.fill(0.0);
  }
};

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng, double gain = 1.0) {
  Tensor t(rows, cols);
  const double a = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (auto& x : t.data()) x = (2.0 * rng.uniform() - 1.0) * a;
  return t;
}

inline Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Tensor t(rows, cols);
  for (auto& x : t.data()) x = rng.normal() * stddev;
  return t;
}

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  add_row,
  sub,
  mul,
  scale,
  transpose,
  reshape,
  concat_rows,
  concat_cols,
  slice_cols,
  gather_rows,
  pick,
  neighbor_mean,
  mean_rows,
  sum,
  sigmoid,
  relu,
  log,
  softplus,
  softmax,
  log_softmax,
  causal_mask,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::add_row: return "add_row";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::pick: return "pick";
    case OpKind::neighbor_mean: return "neighbor_mean";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::sum: return "sum";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::relu: return "relu";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::causal_mask: return "causal_mask";
  }
  return "?";
}

class Tape;

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

namespace kernel {

// C += A * B
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = pa + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = pb + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += arow[j] * brow[j];
      pc[i * k + p] += acc;
    }
  }
}

// C += A^T * B
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = pb + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      double* crow = pc + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kernel

// log sigma(z) in the stable form -softplus(-z).
inline double log_sigmoid(double z) { return -kernel::softplus(-z); }

// Gradients produced by one backward pass, indexed by tape node.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Tensor> grads, std::vector<std::array<std::size_t, 2>> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  // Zero-filled when the node was not an ancestor of the loss.
  Tensor of(const Var& v) const {
    if (v.id() >= grads_.size()) throw LookupError("Gradients::of: unknown node");
    if (!grads_[v.id()].empty()) return grads_[v.id()];
    return Tensor(shapes_[v.id()][0], shapes_[v.id()][1]);
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<std::array<std::size_t, 2>> shapes_;
};

class Tape {
 public:
  // Receives the upstream gradient and this node's forward output.
  using BackwardFn = std::function<void(Tape&, const Tensor&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value, bool requires_grad = true) {
    Node n;
    n.kind = OpKind::leaf;
    n.requires_grad = requires_grad;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  Var constant(Tensor value) { return variable(std::move(value), false); }

  // Binds a parameter by reference. Binding the same parameter twice yields
  // the same node, so its gradient is accumulated once per backward pass.
  Var param(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    Node n;
    n.kind = OpKind::leaf;
    n.requires_grad = grad_enabled_;
    n.external = &p.value;
    n.parameter = grad_enabled_ ? &p : nullptr;
    Var v = push(std::move(n));
    bound_.emplace(&p, v.id());
    return v;
  }

  // Read-only binding; never receives gradient.
  Var param(const Parameter& p) {
    Node n;
    n.kind = OpKind::leaf;
    n.requires_grad = false;
    n.external = &p.value;
    return push(std::move(n));
  }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.owned = std::move(value);
    for (const Var& in : inputs) {
      if (in.tape() != this) throw Error(std::string(op_name(kind)) + ": input from another tape");
      n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Var record_many(OpKind kind, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.owned = std::move(value);
    for (const Var& in : inputs) {
      if (in.tape() != this) throw Error(std::string(op_name(kind)) + ": input from another tape");
      n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient accumulator for node `id`; only valid during backward.
  Tensor& grad_ref(std::size_t id) {
    Tensor& g = grads_[id];
    if (g.empty()) {
      const Tensor& v = value(id);
      g = Tensor(v.rows(), v.cols());
    }
    return g;
  }

  // Reverse sweep from a scalar loss. Nodes are visited once, in reverse
  // recording order, which is a valid reverse topological order. Gradients of
  // bound parameters are added into Parameter::grad.
  Gradients backward(const Var& loss) {
    if (loss.tape() != this) throw Error("backward: loss from another tape");
    const Tensor& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + lv.shape_string());
    }
    if (backward_done_) throw Error("backward: tape already consumed");
    backward_done_ = true;
    visits_ = 0;

    grads_.assign(nodes_.size(), Tensor{});
    grads_[loss.id()] = Tensor::scalar(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || grads_[i].empty()) continue;
      if (n.backward) {
        ++visits_;
        n.backward(*this, grads_[i], value(i));
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.parameter == nullptr || grads_[i].empty()) continue;
      Parameter& p = *n.parameter;
      if (p.grad.size() != p.value.size()) p.zero_grad();
      for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad[j] += grads_[i][j];
    }

    std::vector<std::array<std::size_t, 2>> shapes;
    shapes.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) shapes.push_back(value(i).shape());
    return Gradients(std::move(grads_), std::move(shapes));
  }

  // Number of operations whose backward ran in the last sweep.
  std::size_t backward_visits() const { return visits_; }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor owned;
    const Tensor* external = nullptr;
    Parameter* parameter = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(const char* op, const Var& a) {
  if (!a.valid()) throw Error(std::string(op) + ": invalid variable");
  return *a.tape();
}

inline Tape& same_tape(const char* op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw Error(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

[[noreturn]] inline void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

template <class F>
Var unary(OpKind kind, const Var& a, F&& f, Tape::BackwardFn bw) {
  Tape& t = same_tape(op_name(kind), a);
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(kind, std::move(out), {a}, std::move(bw));
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.rows()) detail::shape_mismatch("matmul", x, y);
  Tensor out(x.rows(), y.cols());
  kernel::gemm_nn(x, y, out);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(OpKind::matmul, std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(ia)) kernel::gemm_nt(g, tp.value(ib), tp.grad_ref(ia));
    if (tp.requires_grad(ib)) kernel::gemm_tn(tp.value(ia), g, tp.grad_ref(ib));
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("add", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) detail::shape_mismatch("add", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(OpKind::add, std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
    for (std::size_t id : {ia, ib}) {
      if (!tp.requires_grad(id)) continue;
      Tensor& d = tp.grad_ref(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

// a + row, with `row` (1 x cols) repeated down every row of `a`.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape("add_row", a, row);
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  if (r.rows() != 1 || r.cols() != x.cols()) detail::shape_mismatch("add_row", x, r);
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += r[j];
  const std::size_t ia = a.id(), ir = row.id();
  return t.record(OpKind::add_row, std::move(out), {a, row}, [ia, ir](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(ia)) {
      Tensor& d = tp.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (tp.requires_grad(ir)) {
      Tensor& d = tp.grad_ref(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) d[j] += g(i, j);
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("sub", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) detail::shape_mismatch("sub", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(OpKind::sub, std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(ia)) {
      Tensor& d = tp.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& d = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("mul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) detail::shape_mismatch("mul", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(OpKind::mul, std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(ia)) {
      Tensor& d = tp.grad_ref(ia);
      const Tensor& y = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& d = tp.grad_ref(ib);
      const Tensor& x = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(OpKind::scale, a, [s](double x) { return s * x; },
                       [ia = a.id(), s](Tape& tp, const Tensor& g, const Tensor&) {
                         Tensor& d = tp.grad_ref(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
                       });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::same_tape("transpose", a);
  const Tensor& x = a.value();
  Tensor out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  const std::size_t ia = a.id();
  return t.record(OpKind::transpose, std::move(out), {a}, [ia](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) d(j, i) += g(i, j);
  });
}

inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  Tape& t = detail::same_tape("reshape", a);
  const Tensor& x = a.value();
  if (rows * cols != x.size()) {
    throw ShapeError("reshape: cannot view " + x.shape_string() + " as [" + std::to_string(rows) +
                     "x" + std::to_string(cols) + "]");
  }
  Tensor out(rows, cols, x.storage());
  const std::size_t ia = a.id();
  return t.record(OpKind::reshape, std::move(out), {a}, [ia](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = detail::same_tape("concat_rows", parts.front());
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::same_tape("concat_rows", parts.front(), p);
    if (p.cols() != cols) detail::shape_mismatch("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) {
    const auto& s = p.value().storage();
    data.insert(data.end(), s.begin(), s.end());
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.record_many(OpKind::concat_rows, Tensor(rows, cols, std::move(data)), parts,
                       [ids](Tape& tp, const Tensor& g, const Tensor&) {
                         std::size_t offset = 0;
                         for (std::size_t id : ids) {
                           const std::size_t n = tp.value(id).size();
                           if (tp.requires_grad(id)) {
                             Tensor& d = tp.grad_ref(id);
                             for (std::size_t i = 0; i < n; ++i) d[i] += g[offset + i];
                           }
                           offset += n;
                         }
                       });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_cols(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("concat_cols", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rows() != y.rows()) detail::shape_mismatch("concat_cols", x, y);
  const std::size_t ca = x.cols(), cb = y.cols();
  Tensor out(x.rows(), ca + cb);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < ca; ++j) out(i, j) = x(i, j);
    for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = y(i, j);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(OpKind::concat_cols, std::move(out), {a, b},
                  [ia, ib, ca, cb](Tape& tp, const Tensor& g, const Tensor&) {
                    if (tp.requires_grad(ia)) {
                      Tensor& d = tp.grad_ref(ia);
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < ca; ++j) d(i, j) += g(i, j);
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& d = tp.grad_ref(ib);
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < cb; ++j) d(i, j) += g(i, ca + j);
                    }
                  });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  Tape& t = detail::same_tape("slice_cols", a);
  const Tensor& x = a.value();
  if (count == 0 || begin + count > x.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + x.shape_string());
  }
  Tensor out(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, begin + j);
  const std::size_t ia = a.id();
  return t.record(OpKind::slice_cols, std::move(out), {a},
                  [ia, begin, count](Tape& tp, const Tensor& g, const Tensor&) {
                    Tensor& d = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < count; ++j) d(i, begin + j) += g(i, j);
                  });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
  Tape& t = detail::same_tape("gather_rows", a);
  const Tensor& x = a.value();
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  for (std::size_t r : rows) {
    if (r >= x.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " +
                       x.shape_string());
    }
  }
  const std::size_t c = x.cols();
  Tensor out(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.row_span(rows[i]).begin(), c, out.row_span(i).begin());
  const std::size_t ia = a.id();
  return t.record(OpKind::gather_rows, std::move(out), {a},
                  [ia, rows = std::move(rows), c](Tape& tp, const Tensor& g, const Tensor&) {
                    Tensor& d = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t j = 0; j < c; ++j) d(rows[i], j) += g(i, j);
                  });
}

// out[i] = a[i, cols[i]], shape (rows x 1).
inline Var pick(const Var& a, std::vector<std::size_t> cols) {
  Tape& t = detail::same_tape("pick", a);
  const Tensor& x = a.value();
  if (cols.size() != x.rows()) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + x.shape_string());
  }
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= x.cols()) {
      throw ShapeError("pick: column " + std::to_string(cols[i]) + " out of range for " +
                       x.shape_string());
    }
    out[i] = x(i, cols[i]);
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::pick, std::move(out), {a},
                  [ia, cols = std::move(cols)](Tape& tp, const Tensor& g, const Tensor&) {
                    Tensor& d = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < cols.size(); ++i) d(i, cols[i]) += g[i];
                  });
}

// Row i of the result is the mean of the rows of `a` listed in neighbors[i],
// or zero when the list is empty. Each of n neighbors receives 1/n of the
// upstream gradient.
inline Var neighbor_mean(const Var& a, std::vector<std::vector<std::size_t>> neighbors) {
  Tape& t = detail::same_tape("neighbor_mean", a);
  const Tensor& x = a.value();
  if (neighbors.empty()) throw ShapeError("neighbor_mean: no output rows");
  const std::size_t c = x.cols();
  Tensor out(neighbors.size(), c);
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const auto& nb = neighbors[i];
    if (nb.empty()) continue;
    auto row = out.row_span(i);
    for (std::size_t r : nb) {
      if (r >= x.rows()) {
        throw ShapeError("neighbor_mean: neighbor " + std::to_string(r) + " out of range for " +
                         x.shape_string());
      }
      auto src = x.row_span(r);
      for (std::size_t j = 0; j < c; ++j) row[j] += src[j];
    }
    const double inv = 1.0 / static_cast<double>(nb.size());
    for (auto& v : row) v *= inv;
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::neighbor_mean, std::move(out), {a},
                  [ia, neighbors = std::move(neighbors), c](Tape& tp, const Tensor& g, const Tensor&) {
                    Tensor& d = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < neighbors.size(); ++i) {
                      const auto& nb = neighbors[i];
                      if (nb.empty()) continue;
                      const double inv = 1.0 / static_cast<double>(nb.size());
                      for (std::size_t r : nb)
                        for (std::size_t j = 0; j < c; ++j) d(r, j) += inv * g(i, j);
                    }
                  });
}

// Mean over the row axis: (rows x cols) -> (1 x cols).
inline Var mean_rows(const Var& a) {
  Tape& t = detail::same_tape("mean_rows", a);
  const Tensor& x = a.value();
  Tensor out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (auto& v : out.data()) v *= inv;
  const std::size_t ia = a.id();
  return t.record(OpKind::mean_rows, std::move(out), {a}, [ia, inv](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += inv * g[j];
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::same_tape("sum", a);
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id();
  return t.record(OpKind::sum, Tensor::scalar(s), {a}, [ia](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor& d = tp.grad_ref(ia);
    const double gv = g[0];
    for (auto& v : d.data()) v += gv;
  });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(OpKind::sigmoid, a, [](double x) { return kernel::sigmoid(x); },
                       [ia = a.id()](Tape& tp, const Tensor& g, const Tensor& y) {
                         Tensor& d = tp.grad_ref(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
                       });
}

inline Var relu(const Var& a) {
  return detail::unary(OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [ia = a.id()](Tape& tp, const Tensor& g, const Tensor& y) {
                         Tensor& d = tp.grad_ref(ia);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           if (y[i] > 0.0) d[i] += g[i];
                       });
}

inline Var log(const Var& a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw NumericError("log: non-positive input " + std::to_string(x));
  }
  return detail::unary(OpKind::log, a, [](double x) { return std::log(x); },
                       [ia = a.id()](Tape& tp, const Tensor& g, const Tensor&) {
                         Tensor& d = tp.grad_ref(ia);
                         const Tensor& x = tp.value(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / x[i];
                       });
}

inline Var softplus(const Var& a) {
  return detail::unary(OpKind::softplus, a, [](double x) { return kernel::softplus(x); },
                       [ia = a.id()](Tape& tp, const Tensor& g, const Tensor&) {
                         Tensor& d = tp.grad_ref(ia);
                         const Tensor& x = tp.value(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * kernel::sigmoid(x[i]);
                       });
}

// Row-wise softmax; each row is shifted by its max before exponentiation.
inline Var softmax(const Var& a) {
  Tape& t = detail::same_tape("softmax", a);
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row_span(i);
    auto dst = out.row_span(i);
    const double m = *std::max_element(src.begin(), src.end());
    double z = 0.0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::exp(src[j] - m);
      z += dst[j];
    }
    for (auto& v : dst) v /= z;
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::softmax, std::move(out), {a}, [ia](Tape& tp, const Tensor& g, const Tensor& y) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// Row-wise log-softmax via max-shifted log-sum-exp.
inline Var log_softmax(const Var& a) {
  Tape& t = detail::same_tape("log_softmax", a);
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row_span(i);
    auto dst = out.row_span(i);
    const double m = *std::max_element(src.begin(), src.end());
    double z = 0.0;
    for (double v : src) z += std::exp(v - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] - lse;
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::log_softmax, std::move(out), {a}, [ia](Tape& tp, const Tensor& g, const Tensor& y) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

// Square matrix with every entry above the diagonal set to -inf, so a
// following softmax lets position i attend to positions 0..i only.
inline Var causal_mask(const Var& a) {
  Tape& t = detail::same_tape("causal_mask", a);
  const Tensor& x = a.value();
  if (x.rows() != x.cols()) throw ShapeError("causal_mask: expected square, got " + x.shape_string());
  Tensor out = x;
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = i + 1; j < x.cols(); ++j) out(i, j) = ninf;
  const std::size_t ia = a.id();
  return t.record(OpKind::causal_mask, std::move(out), {a}, [ia](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor& d = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j <= i; ++j) d(i, j) += g(i, j);
  });
}

// -log sigma(z) = softplus(-z), elementwise.
inline Var neg_log_sigmoid(const Var& z) { return softplus(scale(z, -1.0)); }

// Affine map x * W + b with b broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul(x, w), b); }

}  // namespace cdpo::diff
