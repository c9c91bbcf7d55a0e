#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvgpt/tensor.hpp"

namespace mvgpt {

class Tape;

enum class ParamKind { Weight, Bias, Gain, Embedding };

// A named, trainable tensor. Lives outside any tape; grad persists across
// steps and is zeroed by the training loop, not by backward().
struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::Weight;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, ParamKind k, Tensor v)
      : name(std::move(n)), kind(k), value(std::move(v)), grad(Tensor(value.shape(), 0.0)) {}
};

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand; for parameter leaves it aliases Parameter::grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;  // pulls this->grad into input grads
  Tape* tape = nullptr;

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor(value.shape(), 0.0);
  }
};

}  // namespace detail

// Handle to a node on a tape. Cheap to copy. A default-constructed handle is
// empty; every accessor below assumes a bound node.
class Var {
 public:
  Var() = default;

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const {
    if (!node_->grad.defined()) throw std::logic_error("grad(): no gradient; run backward first");
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.dim(0); }
  std::size_t cols() const { return node_->value.dim(1); }

  Tape& tape() const { return *node_->tape; }
  detail::Node* node() const { return node_.get(); }

 private:
  friend class Tape;
  friend Var make_op(Tape&, Tensor, std::vector<Var>, std::function<void(detail::Node&)>);
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Define-by-run recording of executed ops, in execution order (which is a
// topological order by construction). One tape per training step; backward
// walks the record exactly once, in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->tape = this;
    nodes_.push_back(n);
    return Var(n);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Leaf whose grad buffer is the parameter's own, so backward accumulates
  // straight into it. Using the same parameter twice on one tape sums both
  // contributions, which is what weight sharing needs.
  Var param(Parameter& p) {
    auto n = std::make_shared<detail::Node>();
    n->value = p.value;
    n->grad = p.grad;
    n->requires_grad = true;
    n->tape = this;
    nodes_.push_back(n);
    return Var(n);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates through the whole record in
  // reverse. Tensors never reached from the loss keep zero grads.
  void backward(const Var& loss) {
    if (loss.node()->tape != this) throw std::logic_error("backward: loss is not on this tape");
    if (loss.value().size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (backward_done_) throw std::logic_error("backward: already run on this tape");
    backward_done_ = true;

    loss.node()->ensure_grad();
    loss.node()->grad.at(0) += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward_fn && n.grad.defined()) n.backward_fn(n);
    }
  }

 private:
  friend Var make_op(Tape&, Tensor, std::vector<Var>, std::function<void(detail::Node&)>);
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool backward_done_ = false;
};

inline Var make_op(Tape& tape, Tensor value, std::vector<Var> inputs,
                   std::function<void(detail::Node&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->tape = &tape;
  n->inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.node()->tape != &tape) throw std::logic_error("op inputs come from different tapes");
    n->inputs.push_back(v.node_);
    n->requires_grad = n->requires_grad || v.requires_grad();
  }
  if (n->requires_grad) n->backward_fn = std::move(backward);
  tape.nodes_.push_back(n);
  return Var(n);
}

namespace detail {
// Accumulate g into the grad of `in` if it participates in differentiation.
inline bool wants_grad(const Var& in) { return in.requires_grad(); }
inline Tensor& grad_of(const Var& in) {
  in.node()->ensure_grad();
  return in.node()->grad;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  auto da = a.value().data(), db = b.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = da[i] + db[i];
  return make_op(a.tape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    auto g = n.grad.data();
    if (detail::wants_grad(a)) {
      auto ga = detail::grad_of(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (detail::wants_grad(b)) {
      auto gb = detail::grad_of(b).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  auto da = a.value().data(), db = b.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = da[i] - db[i];
  return make_op(a.tape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    auto g = n.grad.data();
    if (detail::wants_grad(a)) {
      auto ga = detail::grad_of(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (detail::wants_grad(b)) {
      auto gb = detail::grad_of(b).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  auto da = a.value().data(), db = b.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = da[i] * db[i];
  return make_op(a.tape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    auto g = n.grad.data();
    auto va = a.value().data(), vb = b.value().data();
    if (detail::wants_grad(a)) {
      auto ga = detail::grad_of(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (detail::wants_grad(b)) {
      auto gb = detail::grad_of(b).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out(a.shape());
  auto da = a.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = da[i] * c;
  return make_op(a.tape(), std::move(out), {a}, [a, c](detail::Node& n) {
    auto g = n.grad.data();
    auto ga = detail::grad_of(a).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

// tanh-approximated GELU, the BERT/GPT-2 flavor
inline Var gelu(const Var& x) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  Tensor out(x.shape());
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < dout.size(); ++i) {
    const double v = dx[i];
    dout[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_op(x.tape(), std::move(out), {x}, [x](detail::Node& n) {
    auto g = n.grad.data();
    auto dx = x.value().data();
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = dx[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// matrix ops

inline Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(Shape{m, n}, 0.0);
  {
    auto da = a.value().data();
    auto db = b.value().data();
    auto dout = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = da[i * k + p];
        for (std::size_t j = 0; j < n; ++j) dout[i * n + j] += av * db[p * n + j];
      }
  }
  return make_op(a.tape(), std::move(out), {a, b}, [a, b, m, k, n](detail::Node& nd) {
    auto g = nd.grad.data();
    if (detail::wants_grad(a)) {  // dA = G B^T
      auto ga = detail::grad_of(a).data();
      auto db = b.value().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * db[p * n + j];
        }
    }
    if (detail::wants_grad(b)) {  // dB = A^T G
      auto gb = detail::grad_of(b).data();
      auto da = a.value().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = da[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(Shape{n, m});
  auto da = a.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dout[j * m + i] = da[i * n + j];
  return make_op(a.tape(), std::move(out), {a}, [a, m, n](detail::Node& nd) {
    auto g = nd.grad.data();
    auto ga = detail::grad_of(a).data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// x: [n, d], bias: [d]  (row-broadcast add)
inline Var add_rowvec(const Var& x, const Var& bias) {
  if (x.value().rank() != 2 || bias.value().rank() != 1 || bias.value().dim(0) != x.cols()) {
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(x.shape()) + " and " +
                                shape_str(bias.shape()));
  }
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(Shape{n, d});
  auto dx = x.value().data();
  auto db = bias.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) dout[i * d + j] = dx[i * d + j] + db[j];
  return make_op(x.tape(), std::move(out), {x, bias}, [x, bias, n, d](detail::Node& nd) {
    auto g = nd.grad.data();
    if (detail::wants_grad(x)) {
      auto gx = detail::grad_of(x).data();
      for (std::size_t i = 0; i < n * d; ++i) gx[i] += g[i];
    }
    if (detail::wants_grad(bias)) {
      auto gb = detail::grad_of(bias).data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    }
  });
}

// per-row constant scaling (used for padding masks); factors carry no gradient
inline Var scale_rows(const Var& x, const std::vector<double>& factors) {
  if (x.value().rank() != 2 || factors.size() != x.rows()) {
    throw std::invalid_argument("scale_rows: need one factor per row of " + shape_str(x.shape()));
  }
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(Shape{n, d});
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) dout[i * d + j] = dx[i * d + j] * factors[i];
  return make_op(x.tape(), std::move(out), {x}, [x, factors, n, d](detail::Node& nd) {
    auto g = nd.grad.data();
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * factors[i];
  });
}

// ---------------------------------------------------------------------------
// shape ops

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.cols() != d) {
      throw std::invalid_argument("concat_rows: column mismatch at " + shape_str(p.shape()));
    }
    total += p.rows();
  }
  Tensor out(Shape{total, d});
  auto dout = out.data();
  std::size_t r = 0;
  for (const Var& p : parts) {
    auto dp = p.value().data();
    std::copy(dp.begin(), dp.end(), dout.begin() + r * d);
    r += p.rows();
  }
  return make_op(parts[0].tape(), std::move(out), parts, [parts, d](detail::Node& nd) {
    auto g = nd.grad.data();
    std::size_t r = 0;
    for (const Var& p : parts) {
      if (detail::wants_grad(p)) {
        auto gp = detail::grad_of(p).data();
        for (std::size_t i = 0; i < p.rows() * d; ++i) gp[i] += g[r * d + i];
      }
      r += p.rows();
    }
  });
}

inline Var concat_rows(const Var& a, const Var& b) { return concat_rows(std::vector<Var>{a, b}); }

inline Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  if (x.value().rank() != 2 || r0 >= r1 || r1 > x.rows()) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                                ") out of " + shape_str(x.shape()));
  }
  const std::size_t d = x.cols(), n = r1 - r0;
  Tensor out(Shape{n, d});
  auto dx = x.value().data();
  std::copy(dx.begin() + r0 * d, dx.begin() + r1 * d, out.data().begin());
  return make_op(x.tape(), std::move(out), {x}, [x, r0, n, d](detail::Node& nd) {
    auto g = nd.grad.data();
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < n * d; ++i) gx[r0 * d + i] += g[i];
  });
}

inline Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  if (x.value().rank() != 2 || c0 >= c1 || c1 > x.cols()) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") out of " + shape_str(x.shape()));
  }
  const std::size_t n = x.rows(), d = x.cols(), w = c1 - c0;
  Tensor out(Shape{n, w});
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) dout[i * w + j] = dx[i * d + c0 + j];
  return make_op(x.tape(), std::move(out), {x}, [x, c0, n, d, w](detail::Node& nd) {
    auto g = nd.grad.data();
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * d + c0 + j] += g[i * w + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.rows() != n) {
      throw std::invalid_argument("concat_cols: row mismatch at " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out(Shape{n, total});
  auto dout = out.data();
  std::size_t c = 0;
  for (const Var& p : parts) {
    auto dp = p.value().data();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) dout[i * total + c + j] = dp[i * w + j];
    c += w;
  }
  return make_op(parts[0].tape(), std::move(out), parts, [parts, n, total](detail::Node& nd) {
    auto g = nd.grad.data();
    std::size_t c = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.cols();
      if (detail::wants_grad(p)) {
        auto gp = detail::grad_of(p).data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + c + j];
      }
      c += w;
    }
  });
}

// rows of `table` gathered by token id; grads scatter-add back
inline Var embedding_rows(const Var& table, const std::vector<int>& ids) {
  if (table.value().rank() != 2) throw std::invalid_argument("embedding_rows: table must be rank-2");
  if (ids.empty()) throw std::invalid_argument("embedding_rows: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of vocab " +
                                  std::to_string(v));
    }
  }
  Tensor out(Shape{ids.size(), d});
  auto dt = table.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t r = static_cast<std::size_t>(ids[i]);
    std::copy(dt.begin() + r * d, dt.begin() + (r + 1) * d, dout.begin() + i * d);
  }
  return make_op(table.tape(), std::move(out), {table}, [table, ids, d](detail::Node& nd) {
    auto g = nd.grad.data();
    auto gt = detail::grad_of(table).data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(ids[i]);
      for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_op(x.tape(), Tensor::scalar(s), {x}, [x](detail::Node& nd) {
    const double g = nd.grad.at(0);
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

inline Var mean_all(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_op(x.tape(), Tensor::scalar(s / n), {x}, [x, n](detail::Node& nd) {
    const double g = nd.grad.at(0) / n;
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

// mean over rows selected by `rows` (all rows when empty) -> [1, d]
inline Var mean_rows(const Var& x, const std::vector<bool>& rows = {}) {
  if (x.value().rank() != 2) throw std::invalid_argument("mean_rows: rank-2 only");
  const std::size_t n = x.rows(), d = x.cols();
  if (!rows.empty() && rows.size() != n) {
    throw std::invalid_argument("mean_rows: mask size mismatch");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (rows.empty() || rows[i]) ++count;
  if (count == 0) throw std::invalid_argument("mean_rows: no selected rows");
  Tensor out(Shape{1, d}, 0.0);
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows.empty() && !rows[i]) continue;
    for (std::size_t j = 0; j < d; ++j) dout[j] += dx[i * d + j];
  }
  for (std::size_t j = 0; j < d; ++j) dout[j] /= static_cast<double>(count);
  return make_op(x.tape(), std::move(out), {x}, [x, rows, n, d, count](detail::Node& nd) {
    auto g = nd.grad.data();
    auto gx = detail::grad_of(x).data();
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i) {
      if (!rows.empty() && !rows[i]) continue;
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[j] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// normalization and softmax

// Softmax along `axis` with max-subtraction. Works for any rank.
inline Var softmax(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  Tensor out(s);
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = dx[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, dx[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(dx[base + i * inner] - mx);
        dout[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < len; ++i) dout[base + i * inner] /= sum;
    }
  }
  Var result = make_op(x.tape(), std::move(out), {x},
                       [x, outer, inner, len](detail::Node& nd) {
                         auto g = nd.grad.data();
                         auto y = nd.value.data();
                         auto gx = detail::grad_of(x).data();
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t in = 0; in < inner; ++in) {
                             const std::size_t base = o * len * inner + in;
                             double dot = 0.0;
                             for (std::size_t i = 0; i < len; ++i)
                               dot += g[base + i * inner] * y[base + i * inner];
                             for (std::size_t i = 0; i < len; ++i) {
                               const std::size_t k = base + i * inner;
                               gx[k] += y[k] * (g[k] - dot);
                             }
                           }
                         }
                       });
  return result;
}

// Row-wise layer normalization over the last dimension of [n, d].
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  if (x.value().rank() != 2) throw std::invalid_argument("layer_norm: rank-2 input only");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.value().rank() != 1 || gain.value().dim(0) != d || bias.value().rank() != 1 ||
      bias.value().dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " do not match last dim of " +
                                shape_str(x.shape()));
  }
  Tensor out(Shape{n, d});
  Tensor xhat(Shape{n, d});
  std::vector<double> inv_std(n);
  {
    auto dx = x.value().data();
    auto dg = gain.value().data();
    auto db = bias.value().data();
    auto dout = out.data();
    auto dh = xhat.data();
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += dx[i * d + j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = dx[i * d + j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[i] = is;
      for (std::size_t j = 0; j < d; ++j) {
        const double h = (dx[i * d + j] - mean) * is;
        dh[i * d + j] = h;
        dout[i * d + j] = dg[j] * h + db[j];
      }
    }
  }
  return make_op(x.tape(), std::move(out), {x, gain, bias},
                 [x, gain, bias, xhat, inv_std, n, d](detail::Node& nd) {
                   auto g = nd.grad.data();
                   auto dh = xhat.data();
                   auto dg = gain.value().data();
                   if (detail::wants_grad(x)) {
                     auto gx = detail::grad_of(x).data();
                     for (std::size_t i = 0; i < n; ++i) {
                       double mean_t = 0.0, mean_th = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double t = g[i * d + j] * dg[j];
                         mean_t += t;
                         mean_th += t * dh[i * d + j];
                       }
                       mean_t /= static_cast<double>(d);
                       mean_th /= static_cast<double>(d);
                       for (std::size_t j = 0; j < d; ++j) {
                         const double t = g[i * d + j] * dg[j];
                         gx[i * d + j] += inv_std[i] * (t - mean_t - dh[i * d + j] * mean_th);
                       }
                     }
                   }
                   if (detail::wants_grad(gain)) {
                     auto gg = detail::grad_of(gain).data();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * dh[i * d + j];
                   }
                   if (detail::wants_grad(bias)) {
                     auto gb = detail::grad_of(bias).data();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                   }
                 });
}

// Rows scaled to unit L2 norm; rejects zero rows (no well-defined direction).
inline Var l2_normalize_rows(const Var& x) {
  if (x.value().rank() != 2) throw std::invalid_argument("l2_normalize_rows: rank-2 only");
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(Shape{n, d});
  std::vector<double> norms(n);
  auto dx = x.value().data();
  auto dout = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += dx[i * d + j] * dx[i * d + j];
    if (s == 0.0) {
      throw std::invalid_argument("l2_normalize_rows: zero-vector row " + std::to_string(i));
    }
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) dout[i * d + j] = dx[i * d + j] / norms[i];
  }
  return make_op(x.tape(), std::move(out), {x}, [x, norms, n, d](detail::Node& nd) {
    auto g = nd.grad.data();
    auto y = nd.value.data();
    auto gx = detail::grad_of(x).data();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        gx[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) / norms[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// losses

// Mean negative log-likelihood over unignored positions. Ignored positions
// contribute zero loss and exactly zero gradient.
inline Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                         const std::vector<bool>& ignore = {}) {
  if (logits.value().rank() != 2) throw std::invalid_argument("cross_entropy: logits must be rank-2");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(n) + " rows");
  }
  if (!ignore.empty() && ignore.size() != n) {
    throw std::invalid_argument("cross_entropy: ignore mask size mismatch");
  }
  std::size_t live = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (ignore.empty() || !ignore[i]) ++live;
  if (live == 0) throw std::invalid_argument("cross_entropy: all positions ignored");

  auto dl = logits.value().data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ignore.empty() && ignore[i]) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range at row " + std::to_string(i));
    }
    double mx = dl[i * v];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, dl[i * v + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(dl[i * v + j] - mx);
    loss += mx + std::log(sum) - dl[i * v + static_cast<std::size_t>(t)];
  }
  loss /= static_cast<double>(live);

  return make_op(logits.tape(), Tensor::scalar(loss), {logits},
                 [logits, targets, ignore, n, v, live](detail::Node& nd) {
                   const double gs = nd.grad.at(0) / static_cast<double>(live);
                   auto dl = logits.value().data();
                   auto gl = detail::grad_of(logits).data();
                   for (std::size_t i = 0; i < n; ++i) {
                     if (!ignore.empty() && ignore[i]) continue;
                     double mx = dl[i * v];
                     for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, dl[i * v + j]);
                     double sum = 0.0;
                     for (std::size_t j = 0; j < v; ++j) sum += std::exp(dl[i * v + j] - mx);
                     for (std::size_t j = 0; j < v; ++j) {
                       double p = std::exp(dl[i * v + j] - mx) / sum;
                       if (j == static_cast<std::size_t>(targets[i])) p -= 1.0;
                       gl[i * v + j] += gs * p;
                     }
                   }
                 });
}

}  // namespace mvgpt
