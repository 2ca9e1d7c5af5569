#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cdds/errors.hpp"

namespace cdds {

// Dense row-major matrix of doubles with optional reverse-mode gradient
// tracking. Everything in this library is rank-2: scalars are 1x1, row
// vectors 1xd, column vectors mx1. Values are immutable once created; only
// grad buffers (and explicit parameter updates by an optimizer) mutate.

class Tape;

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::string op = "leaf";
  const Tape* tape = nullptr;
  std::function<void(Node&)> backprop;

  std::size_t numel() const { return rows * cols; }

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    if (rows == 0 || cols == 0) throw DimensionError("tensor dimensions must be positive");
    if (values.size() != rows * cols)
      throw DimensionError("data length " + std::to_string(values.size()) +
                           " does not match shape " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    auto n = std::make_shared<detail::Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return matrix(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return matrix(1, 1, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  std::size_t rows() const { return n_->rows; }
  std::size_t cols() const { return n_->cols; }
  std::size_t numel() const { return n_->numel(); }
  bool is_scalar() const { return n_->numel() == 1; }
  bool requires_grad() const { return n_->requires_grad; }
  const std::string& op() const { return n_->op; }

  const std::vector<double>& values() const { return n_->value; }
  double value_at(std::size_t r, std::size_t c) const { return n_->value[r * n_->cols + c]; }
  double scalar_value() const {
    if (!is_scalar()) throw ContractError("scalar_value() on non-scalar tensor");
    return n_->value[0];
  }

  // Gradient of the last backward pass; zeros if this leaf was not reached.
  std::vector<double> grad() const {
    if (n_->grad.empty()) return std::vector<double>(n_->value.size(), 0.0);
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  // In-place access for optimizers and deserialization only; never call on a
  // tensor that participates in a live tape.
  std::vector<double>& mutable_values() { return n_->value; }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;

  friend class Tape;
  friend Tensor make_op(const char*, std::size_t, std::size_t, std::vector<double>,
                        std::vector<Tensor>, std::function<void(detail::Node&)>);
};

// Records operations for one forward pass. Single-threaded; independent tapes
// may live on separate threads.
class Tape {
 public:
  Tape() : prev_(current_ptr()) { current_ptr() = this; }
  ~Tape() { current_ptr() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ptr(); }

  std::size_t size() const { return nodes_.size(); }

  void record(std::shared_ptr<detail::Node> n) {
    n->tape = this;
    nodes_.push_back(std::move(n));
  }

  // Populates grads of every requires_grad tensor reachable from `loss`.
  void backward(const Tensor& loss) {
    if (used_) throw ContractError("backward called twice on the same tape");
    if (!loss.is_scalar()) throw ContractError("backward requires a scalar loss");
    if (loss.node()->tape != this)
      throw ContractError("loss tensor was not recorded on this tape");
    used_ = true;
    loss.node()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.grad.empty() || !n.backprop) continue;
      n.backprop(n);
    }
  }

 private:
  static Tape*& current_ptr() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool used_ = false;
  Tape* prev_ = nullptr;
};

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(op);
}

// Creates an op node, records it on the current tape when gradients are being
// tracked, and wires the backward closure. The closure receives the output
// node and must scatter into the parents captured by value.
inline Tensor make_op(const char* op, std::size_t rows, std::size_t cols,
                      std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
  check_finite(op, value);
  auto n = std::make_shared<detail::Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->op = op;
  Tape* tape = Tape::current();
  bool needs_grad = false;
  for (const auto& t : inputs)
    if (t.requires_grad()) needs_grad = true;
  if (tape != nullptr && needs_grad) {
    n->requires_grad = true;
    n->backprop = std::move(backward);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

enum class Broadcast { none, b_scalar, a_scalar, b_row };

inline Broadcast classify_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::none;
  if (b.is_scalar()) return Broadcast::b_scalar;
  if (a.is_scalar()) return Broadcast::a_scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::b_row;
  throw DimensionError(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) +
                       "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  using detail::Broadcast;
  const Broadcast bc = detail::classify_broadcast("add", a, b);
  const Tensor& big = (bc == Broadcast::a_scalar) ? b : a;
  std::vector<double> out(big.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  switch (bc) {
    case Broadcast::none:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
      break;
    case Broadcast::b_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
      break;
    case Broadcast::a_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] + bv[i];
      break;
    case Broadcast::b_row:
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[r * a.cols() + c] = av[r * a.cols() + c] + bv[c];
      break;
  }
  return make_op("add", big.rows(), big.cols(), std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), bc](detail::Node& o) {
                   if (an->requires_grad) {
                     if (an->numel() == o.numel()) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i]);
                     } else {  // a scalar
                       double s = 0;
                       for (double g : o.grad) s += g;
                       an->accumulate(0, s);
                     }
                   }
                   if (bn->requires_grad) {
                     if (bc == Broadcast::none) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) bn->accumulate(i, o.grad[i]);
                     } else if (bc == Broadcast::b_scalar) {
                       double s = 0;
                       for (double g : o.grad) s += g;
                       bn->accumulate(0, s);
                     } else if (bc == Broadcast::b_row) {
                       for (std::size_t r = 0; r < o.rows; ++r)
                         for (std::size_t c = 0; c < o.cols; ++c) bn->accumulate(c, o.grad[r * o.cols + c]);
                     } else {  // a_scalar: b has full shape
                       for (std::size_t i = 0; i < o.grad.size(); ++i) bn->accumulate(i, o.grad[i]);
                     }
                   }
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  using detail::Broadcast;
  const Broadcast bc = detail::classify_broadcast("sub", a, b);
  const Tensor& big = (bc == Broadcast::a_scalar) ? b : a;
  std::vector<double> out(big.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  switch (bc) {
    case Broadcast::none:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
      break;
    case Broadcast::b_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[0];
      break;
    case Broadcast::a_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] - bv[i];
      break;
    case Broadcast::b_row:
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[r * a.cols() + c] = av[r * a.cols() + c] - bv[c];
      break;
  }
  return make_op("sub", big.rows(), big.cols(), std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), bc](detail::Node& o) {
                   if (an->requires_grad) {
                     if (an->numel() == o.numel()) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i]);
                     } else {
                       double s = 0;
                       for (double g : o.grad) s += g;
                       an->accumulate(0, s);
                     }
                   }
                   if (bn->requires_grad) {
                     if (bc == Broadcast::none || bc == Broadcast::a_scalar) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) bn->accumulate(i, -o.grad[i]);
                     } else if (bc == Broadcast::b_scalar) {
                       double s = 0;
                       for (double g : o.grad) s += g;
                       bn->accumulate(0, -s);
                     } else {
                       for (std::size_t r = 0; r < o.rows; ++r)
                         for (std::size_t c = 0; c < o.cols; ++c) bn->accumulate(c, -o.grad[r * o.cols + c]);
                     }
                   }
                 });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  using detail::Broadcast;
  Broadcast bc = detail::classify_broadcast("mul", a, b);
  if (bc == Broadcast::b_row) throw DimensionError("mul: row broadcast not supported");
  const Tensor& big = (bc == Broadcast::a_scalar) ? b : a;
  std::vector<double> out(big.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  if (bc == Broadcast::none)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  else if (bc == Broadcast::b_scalar)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[0];
  else
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] * bv[i];
  return make_op("mul", big.rows(), big.cols(), std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), bc](detail::Node& o) {
                   const auto& av = an->value;
                   const auto& bv = bn->value;
                   if (an->requires_grad) {
                     if (bc == Broadcast::a_scalar) {
                       double s = 0;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) s += o.grad[i] * bv[i];
                       an->accumulate(0, s);
                     } else if (bc == Broadcast::b_scalar) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] * bv[0]);
                     } else {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] * bv[i]);
                     }
                   }
                   if (bn->requires_grad) {
                     if (bc == Broadcast::b_scalar) {
                       double s = 0;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) s += o.grad[i] * av[i];
                       bn->accumulate(0, s);
                     } else if (bc == Broadcast::a_scalar) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) bn->accumulate(i, o.grad[i] * av[0]);
                     } else {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) bn->accumulate(i, o.grad[i] * av[i]);
                     }
                   }
                 });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  using detail::Broadcast;
  Broadcast bc = detail::classify_broadcast("div", a, b);
  if (bc == Broadcast::b_row || bc == Broadcast::a_scalar)
    throw DimensionError("div: only same-shape or scalar divisor supported");
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  if (bc == Broadcast::none)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  else
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[0];
  return make_op("div", a.rows(), a.cols(), std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), bc](detail::Node& o) {
                   const auto& av = an->value;
                   const auto& bv = bn->value;
                   if (an->requires_grad) {
                     if (bc == Broadcast::none)
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] / bv[i]);
                     else
                       for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] / bv[0]);
                   }
                   if (bn->requires_grad) {
                     if (bc == Broadcast::none) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i)
                         bn->accumulate(i, -o.grad[i] * av[i] / (bv[i] * bv[i]));
                     } else {
                       double s = 0;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) s += -o.grad[i] * av[i] / (bv[0] * bv[0]);
                       bn->accumulate(0, s);
                     }
                   }
                 });
}

inline Tensor scalar_mul(double c, const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  return make_op("scalar_mul", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node(), c](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, c * o.grad[i]);
                 });
}

inline Tensor add_const(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return make_op("add_const", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i]);
                 });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make_op("exp", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] * o.value[i]);
                 });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return make_op("log", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i) an->accumulate(i, o.grad[i] / an->value[i]);
                 });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op("sigmoid", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                     const double y = o.value[i];
                     an->accumulate(i, o.grad[i] * y * (1.0 - y));
                   }
                 });
}

// Softmax over the last axis (per row), numerically shifted by the row max.
inline Tensor softmax(const Tensor& a) {
  if (a.cols() < 1) throw DimensionError("softmax: empty reduction axis");
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const std::size_t base = r * a.cols();
    double mx = av[base];
    for (std::size_t c = 1; c < a.cols(); ++c) mx = std::max(mx, av[base + c]);
    double sum = 0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      out[base + c] = std::exp(av[base + c] - mx);
      sum += out[base + c];
    }
    for (std::size_t c = 0; c < a.cols(); ++c) out[base + c] /= sum;
  }
  return make_op("softmax", a.rows(), a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t r = 0; r < o.rows; ++r) {
                     const std::size_t base = r * o.cols;
                     double dot = 0;
                     for (std::size_t c = 0; c < o.cols; ++c) dot += o.grad[base + c] * o.value[base + c];
                     for (std::size_t c = 0; c < o.cols; ++c)
                       an->accumulate(base + c, o.value[base + c] * (o.grad[base + c] - dot));
                   }
                 });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return make_op("matmul", m, n, std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), m, k, n](detail::Node& o) {
                   const auto& av = an->value;
                   const auto& bv = bn->value;
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) {
                         const double g = o.grad[i * n + j];
                         if (g == 0.0) continue;
                         for (std::size_t p = 0; p < k; ++p) an->grad[i * k + p] += g * bv[p * n + j];
                       }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double a_ip = av[i * k + p];
                         if (a_ip == 0.0) continue;
                         for (std::size_t j = 0; j < n; ++j) bn->grad[p * n + j] += a_ip * o.grad[i * n + j];
                       }
                   }
                 });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op("transpose", n, m, std::move(out), {a},
                 [an = a.node(), m, n](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) an->accumulate(i * n + j, o.grad[j * m + i]);
                 });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.values()) s += v;
  return make_op("sum", 1, 1, {s}, {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < an->value.size(); ++i) an->accumulate(i, o.grad[0]);
                 });
}

inline Tensor mean(const Tensor& a) {
  double s = 0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_op("mean", 1, 1, {s * inv}, {a},
                 [an = a.node(), inv](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t i = 0; i < an->value.size(); ++i) an->accumulate(i, o.grad[0] * inv);
                 });
}

// Reduce over rows: [m x n] -> [1 x n].
inline Tensor sum_rows(const Tensor& a) {
  std::vector<double> out(a.cols(), 0.0);
  const auto& av = a.values();
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += av[r * a.cols() + c];
  return make_op("sum_rows", 1, a.cols(), std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   const std::size_t rows = an->rows, cols = an->cols;
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t c = 0; c < cols; ++c) an->accumulate(r * cols + c, o.grad[c]);
                 });
}

// Reduce over columns: [m x n] -> [m x 1].
inline Tensor sum_cols(const Tensor& a) {
  std::vector<double> out(a.rows(), 0.0);
  const auto& av = a.values();
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out[r] += av[r * a.cols() + c];
  return make_op("sum_cols", a.rows(), 1, std::move(out), {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   const std::size_t rows = an->rows, cols = an->cols;
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t c = 0; c < cols; ++c) an->accumulate(r * cols + c, o.grad[r]);
                 });
}

inline Tensor l2_norm(const Tensor& a) {
  double s = 0;
  for (double v : a.values()) s += v * v;
  const double norm = std::sqrt(s);
  return make_op("l2_norm", 1, 1, {norm}, {a},
                 [an = a.node()](detail::Node& o) {
                   if (!an->requires_grad) return;
                   const double inv = 1.0 / o.value[0];
                   for (std::size_t i = 0; i < an->value.size(); ++i)
                     an->accumulate(i, o.grad[0] * an->value[i] * inv);
                 });
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

// Per-row cosine similarity of two equally shaped matrices: [m x d] -> [m x 1].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("cosine_similarity", a, b);
  const std::size_t m = a.rows(), d = a.cols();
  std::vector<double> out(m), na(m), nb(m);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t r = 0; r < m; ++r) {
    double dot = 0, sa = 0, sb = 0;
    for (std::size_t c = 0; c < d; ++c) {
      dot += av[r * d + c] * bv[r * d + c];
      sa += av[r * d + c] * av[r * d + c];
      sb += bv[r * d + c] * bv[r * d + c];
    }
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    out[r] = dot / (na[r] * nb[r]);
  }
  return make_op("cosine_similarity", m, 1, std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), na, nb, m, d](detail::Node& o) {
                   const auto& av = an->value;
                   const auto& bv = bn->value;
                   for (std::size_t r = 0; r < m; ++r) {
                     const double g = o.grad[r];
                     if (g == 0.0) continue;
                     const double c = o.value[r];
                     if (an->requires_grad)
                       for (std::size_t k = 0; k < d; ++k)
                         an->accumulate(r * d + k, g * (bv[r * d + k] / (na[r] * nb[r]) -
                                                        c * av[r * d + k] / (na[r] * na[r])));
                     if (bn->requires_grad)
                       for (std::size_t k = 0; k < d; ++k)
                         bn->accumulate(r * d + k, g * (av[r * d + k] / (na[r] * nb[r]) -
                                                        c * bv[r * d + k] / (nb[r] * nb[r])));
                   }
                 });
}

// All-pairs cosine similarity: [m x d], [n x d] -> [m x n].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DimensionError("cosine_matrix: feature dims differ");
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  std::vector<double> na(m), nb(n), out(m * n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += av[i * d + k] * av[i * d + k];
    na[i] = std::sqrt(s);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += bv[j * d + k] * bv[j * d + k];
    nb[j] = std::sqrt(s);
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += av[i * d + k] * bv[j * d + k];
      out[i * n + j] = dot / (na[i] * nb[j]);
    }
  return make_op("cosine_matrix", m, n, std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), na, nb, m, n, d](detail::Node& o) {
                   const auto& av = an->value;
                   const auto& bv = bn->value;
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       double gc = 0;  // sum_j g_ij * c_ij
                       std::vector<double> gb(d, 0.0);
                       for (std::size_t j = 0; j < n; ++j) {
                         const double g = o.grad[i * n + j];
                         if (g == 0.0) continue;
                         gc += g * o.value[i * n + j];
                         const double w = g / nb[j];
                         for (std::size_t k = 0; k < d; ++k) gb[k] += w * bv[j * d + k];
                       }
                       const double inv_na = 1.0 / na[i];
                       for (std::size_t k = 0; k < d; ++k)
                         an->grad[i * d + k] += gb[k] * inv_na - gc * av[i * d + k] * inv_na * inv_na;
                     }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t j = 0; j < n; ++j) {
                       double gc = 0;
                       std::vector<double> ga(d, 0.0);
                       for (std::size_t i = 0; i < m; ++i) {
                         const double g = o.grad[i * n + j];
                         if (g == 0.0) continue;
                         gc += g * o.value[i * n + j];
                         const double w = g / na[i];
                         for (std::size_t k = 0; k < d; ++k) ga[k] += w * av[i * d + k];
                       }
                       const double inv_nb = 1.0 / nb[j];
                       for (std::size_t k = 0; k < d; ++k)
                         bn->grad[j * d + k] += ga[k] * inv_nb - gc * bv[j * d + k] * inv_nb * inv_nb;
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Normalization and structure
// ---------------------------------------------------------------------------

// Per-row layer normalization without affine parameters.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  const std::size_t m = a.rows(), d = a.cols();
  std::vector<double> out(m * d), inv_std(m);
  const auto& av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += av[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = av[r * d + c] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (av[r * d + c] - mu) * inv_std[r];
  }
  return make_op("layer_norm", m, d, std::move(out), {a},
                 [an = a.node(), inv_std, m, d](detail::Node& o) {
                   if (!an->requires_grad) return;
                   for (std::size_t r = 0; r < m; ++r) {
                     double g_mean = 0, gy_mean = 0;
                     for (std::size_t c = 0; c < d; ++c) {
                       g_mean += o.grad[r * d + c];
                       gy_mean += o.grad[r * d + c] * o.value[r * d + c];
                     }
                     g_mean /= static_cast<double>(d);
                     gy_mean /= static_cast<double>(d);
                     for (std::size_t c = 0; c < d; ++c)
                       an->accumulate(r * d + c, inv_std[r] * (o.grad[r * d + c] - g_mean -
                                                               o.value[r * d + c] * gy_mean));
                   }
                 });
}

// Vertical concatenation; all inputs must share the column count.
inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("stack_rows: empty input list");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw DimensionError("stack_rows: column counts differ");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<detail::Node>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op("stack_rows", total, d, std::move(out), parts,
                 [nodes](detail::Node& o) {
                   std::size_t offset = 0;
                   for (const auto& n : nodes) {
                     if (n->requires_grad)
                       for (std::size_t i = 0; i < n->value.size(); ++i) n->accumulate(i, o.grad[offset + i]);
                     offset += n->value.size();
                   }
                 });
}

// Forward value identical to the input but detached from the tape.
inline Tensor detach(const Tensor& a) {
  return Tensor::matrix(a.rows(), a.cols(), a.values(), false);
}

}  // namespace cdds
