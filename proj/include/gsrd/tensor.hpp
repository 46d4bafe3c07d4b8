#pragma once

// Dense row-major matrices of doubles with tape-based reverse-mode
// differentiation. Every tensor is two-dimensional; scalars are 1x1 and bias
// vectors are 1xC.
//
// Reductions that aggregate over atoms (sum, sum_rows, segment_sum,
// segment_softmax) add their terms in ascending value order, so their results do
// not depend on the order atoms are listed in. This is what makes the encoders
// and the decoder bit-exactly permutation equivariant.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gsrd/errors.hpp"

namespace gsrd {

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Sum that is independent of the order of its inputs (the buffer is sorted).
inline double ordered_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

}  // namespace detail

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a node of the differentiation tape. Copies share the node.
class Value {
 public:
  Value() = default;
  explicit Value(detail::NodePtr node) : node_(std::move(node)) {}

  static Value constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
    if (data.size() != rows * cols)
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           detail::shape_str(rows, cols));
    auto n = std::make_shared<detail::Node>();
    n->rows = rows;
    n->cols = cols;
    n->data = std::move(data);
    return Value(std::move(n));
  }
  static Value zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  }
  static Value scalar(double v) { return constant(1, 1, {v}); }
  /// Leaf that accumulates gradients.
  static Value parameter(std::size_t rows, std::size_t cols, std::vector<double> data) {
    Value v = constant(rows, cols, std::move(data));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->data.size(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  std::string shape() const { return detail::shape_str(rows(), cols()); }

  std::span<const double> data() const { return node_->data; }
  /// Writable storage. Only meaningful on leaves (optimizer updates, probes).
  std::span<double> mutable_data() { return node_->data; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar " + shape());
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  /// Gradient, or zeros when nothing reached this node.
  std::vector<double> grad_or_zero() const {
    if (node_->grad.size() == node_->data.size()) return node_->grad;
    return std::vector<double>(node_->data.size(), 0.0);
  }
  void zero_grad() { node_->grad.clear(); }
  const char* op() const { return node_->op; }

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

namespace detail {

inline Value make_result(std::size_t rows, std::size_t cols, std::vector<double> data,
                         std::vector<NodePtr> parents, const char* op,
                         std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->data = std::move(data);
  n->op = op;
  bool track = grad_mode() && std::any_of(parents.begin(), parents.end(),
                                           [](const NodePtr& p) { return p->requires_grad; });
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Value(std::move(n));
}

// Broadcast indexing: a dimension of extent 1 repeats.
struct Bcast {
  std::size_t rows, cols;
  std::size_t index(std::size_t r, std::size_t c) const {
    return (rows == 1 ? 0 : r) * cols + (cols == 1 ? 0 : c);
  }
};

inline std::pair<std::size_t, std::size_t> broadcast_shape(const Value& a, const Value& b,
                                                           const char* op) {
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(op) + ": cannot broadcast " + a.shape() + " with " + b.shape());
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

template <typename Fwd, typename DA, typename DB>
Value binary(const Value& a, const Value& b, const char* op, Fwd fwd, DA da, DB db) {
  auto [rows, cols] = broadcast_shape(a, b, op);
  Bcast ia{a.rows(), a.cols()}, ib{b.rows(), b.cols()};
  std::vector<double> out(rows * cols);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = fwd(ad[ia.index(r, c)], bd[ib.index(r, c)]);
  return make_result(rows, cols, std::move(out), {a.node(), b.node()}, op,
                     [rows, cols, ia, ib, da, db](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       const auto& g = self.grad;
                       if (pa.requires_grad) {
                         auto& ga = pa.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) {
                             std::size_t i = ia.index(r, c), j = ib.index(r, c);
                             ga[i] += g[r * cols + c] * da(pa.data[i], pb.data[j]);
                           }
                       }
                       if (pb.requires_grad) {
                         auto& gb = pb.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) {
                             std::size_t i = ia.index(r, c), j = ib.index(r, c);
                             gb[j] += g[r * cols + c] * db(pa.data[i], pb.data[j]);
                           }
                       }
                     });
}

// y = f(x) elementwise; df receives (x, y).
template <typename F, typename DF>
Value unary(const Value& a, const char* op, F f, DF df) {
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return make_result(a.rows(), a.cols(), std::move(out), {a.node()}, op, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with broadcasting over unit dimensions)

inline Value add(const Value& a, const Value& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Value sub(const Value& a, const Value& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Value mul(const Value& a, const Value& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Value div(const Value& a, const Value& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

inline Value scale(const Value& a, double s) {
  return detail::unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Value neg(const Value& a) { return scale(a, -1.0); }
inline Value operator-(const Value& a) { return neg(a); }

inline Value add_scalar(const Value& a, double s) {
  return detail::unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Value silu(const Value& a) {
  return detail::unary(
      a, "silu", [](double x) { return x * detail::sigmoid_scalar(x); },
      [](double x, double) {
        double s = detail::sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Value sigmoid(const Value& a) {
  return detail::unary(
      a, "sigmoid", [](double x) { return detail::sigmoid_scalar(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Value exp(const Value& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Value square(const Value& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Value sqrt(const Value& a) {
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

// Subgradient 0 at the kink.
inline Value abs(const Value& a) {
  return detail::unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

/// Forward identity that records nothing on the tape.
inline Value stop_gradient(const Value& a) {
  std::vector<double> copy(a.data().begin(), a.data().end());
  return Value::constant(a.rows(), a.cols(), std::move(copy));
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

inline Value matmul(const Value& a, const Value& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ for " + a.shape() + " and " + b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_result(m, n, std::move(out), {a.node(), b.node()}, "matmul",
                             [m, k, n](detail::Node& self) {
                               detail::Node& pa = *self.parents[0];
                               detail::Node& pb = *self.parents[1];
                               const auto& g = self.grad;
                               if (pa.requires_grad) {
                                 auto& ga = pa.grad_buffer();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     double s = 0.0;
                                     const double* grow = g.data() + i * n;
                                     const double* brow = pb.data.data() + p * n;
                                     for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                     ga[i * k + p] += s;
                                   }
                               }
                               if (pb.requires_grad) {
                                 auto& gb = pb.grad_buffer();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     double av = pa.data[i * k + p];
                                     if (av == 0.0) continue;
                                     double* gbrow = gb.data() + p * n;
                                     const double* grow = g.data() + i * n;
                                     for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                                   }
                               }
                             });
}

inline Value transpose(const Value& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return detail::make_result(c, r, std::move(out), {a.node()}, "transpose", [r, c](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j * r + i];
  });
}

inline Value reshape(const Value& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size())
    throw DimensionError("reshape: " + a.shape() + " to " + detail::shape_str(rows, cols));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(rows, cols, std::move(out), {a.node()}, "reshape", [](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

/// Sum of all entries, as a 1x1 value.
inline Value sum(const Value& a) {
  std::vector<double> buf(a.data().begin(), a.data().end());
  double s = detail::ordered_sum(buf);
  return detail::make_result(1, 1, {s}, {a.node()}, "sum", [](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (double& g : gp) g += self.grad[0];
  });
}

inline Value mean(const Value& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Per-row sum across columns: [r x c] -> [r x 1].
inline Value sum_cols(const Value& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += ad[i * c + j];
  return detail::make_result(r, 1, std::move(out), {a.node()}, "sum_cols", [r, c](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[i];
  });
}

/// Per-column sum across rows: [r x c] -> [1 x c], order independent.
inline Value sum_rows(const Value& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(c, 0.0);
  std::vector<double> buf(r);
  auto ad = a.data();
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < r; ++i) buf[i] = ad[i * c + j];
    out[j] = detail::ordered_sum(buf);
  }
  return detail::make_result(1, c, std::move(out), {a.node()}, "sum_rows", [r, c](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

inline Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<detail::NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch " + parts[0].shape() + " vs " + p.shape());
    offsets.push_back(total);
    total += p.cols();
    parents.push_back(p.node());
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pd = parts[k].data();
    const std::size_t c = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pd.data() + i * c, c, out.data() + i * total + offsets[k]);
  }
  return detail::make_result(r, total, std::move(out), std::move(parents), "concat_cols",
                             [r, total, offsets](detail::Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 detail::Node& p = *self.parents[k];
                                 if (!p.requires_grad) continue;
                                 auto& gp = p.grad_buffer();
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < p.cols; ++j)
                                     gp[i * p.cols + j] += self.grad[i * total + offsets[k] + j];
                               }
                             });
}

inline Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<detail::NodePtr> parents;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch " + parts[0].shape() + " vs " + p.shape());
    offsets.push_back(total);
    total += p.rows();
    parents.push_back(p.node());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result(total, c, std::move(out), std::move(parents), "concat_rows",
                             [c, offsets](detail::Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 detail::Node& p = *self.parents[k];
                                 if (!p.requires_grad) continue;
                                 auto& gp = p.grad_buffer();
                                 for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[offsets[k] * c + i];
                               }
                             });
}

inline Value slice_cols(const Value& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols())
    throw DimensionError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + a.shape());
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * count);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(ad.data() + i * c + start, count, out.data() + i * count);
  return detail::make_result(r, count, std::move(out), {a.node()}, "slice_cols",
                             [r, c, start, count](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   gp[i * c + start + j] += self.grad[i * count + j];
                             });
}

/// out[k] = a[idx[k]] row-wise.
inline Value gather_rows(const Value& a, std::vector<std::size_t> idx) {
  const std::size_t c = a.cols();
  std::vector<double> out(idx.size() * c);
  auto ad = a.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= a.rows())
      throw DimensionError("gather_rows: index " + std::to_string(idx[k]) + " out of " + a.shape());
    std::copy_n(ad.data() + idx[k] * c, c, out.data() + k * c);
  }
  const std::size_t n = idx.size();
  return detail::make_result(n, c, std::move(out), {a.node()}, "gather_rows",
                             [c, idx = std::move(idx)](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t k = 0; k < idx.size(); ++k)
                                 for (std::size_t j = 0; j < c; ++j) gp[idx[k] * c + j] += self.grad[k * c + j];
                             });
}

/// out has `rows` rows; out[idx[k]] = a[k], every other row is zero. idx must be unique.
inline Value scatter_rows(const Value& a, std::vector<std::size_t> idx, std::size_t rows) {
  if (idx.size() != a.rows())
    throw DimensionError("scatter_rows: " + std::to_string(idx.size()) + " indices for " + a.shape());
  const std::size_t c = a.cols();
  std::vector<double> out(rows * c, 0.0);
  std::vector<bool> seen(rows, false);
  auto ad = a.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= rows || seen[idx[k]]) throw DimensionError("scatter_rows: bad or repeated index");
    seen[idx[k]] = true;
    std::copy_n(ad.data() + k * c, c, out.data() + idx[k] * c);
  }
  return detail::make_result(rows, c, std::move(out), {a.node()}, "scatter_rows",
                             [c, idx = std::move(idx)](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t k = 0; k < idx.size(); ++k)
                                 for (std::size_t j = 0; j < c; ++j) gp[k * c + j] += self.grad[idx[k] * c + j];
                             });
}

namespace detail {
inline std::vector<std::vector<std::size_t>> group_by_segment(const std::vector<std::size_t>& seg,
                                                              std::size_t nseg) {
  std::vector<std::vector<std::size_t>> groups(nseg);
  for (std::size_t k = 0; k < seg.size(); ++k) {
    if (seg[k] >= nseg) throw DimensionError("segment id " + std::to_string(seg[k]) + " >= " + std::to_string(nseg));
    groups[seg[k]].push_back(k);
  }
  return groups;
}
}  // namespace detail

/// out[s] = sum of rows k with seg[k] == s. Empty segments are zero rows.
inline Value segment_sum(const Value& a, std::vector<std::size_t> seg, std::size_t nseg) {
  if (seg.size() != a.rows())
    throw DimensionError("segment_sum: " + std::to_string(seg.size()) + " ids for " + a.shape());
  const std::size_t c = a.cols();
  auto groups = detail::group_by_segment(seg, nseg);
  std::vector<double> out(nseg * c, 0.0);
  std::vector<double> buf;
  auto ad = a.data();
  for (std::size_t s = 0; s < nseg; ++s) {
    if (groups[s].empty()) continue;
    buf.resize(groups[s].size());
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t t = 0; t < groups[s].size(); ++t) buf[t] = ad[groups[s][t] * c + j];
      out[s * c + j] = detail::ordered_sum(buf);
    }
  }
  return detail::make_result(nseg, c, std::move(out), {a.node()}, "segment_sum",
                             [c, seg = std::move(seg)](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t k = 0; k < seg.size(); ++k)
                                 for (std::size_t j = 0; j < c; ++j) gp[k * c + j] += self.grad[seg[k] * c + j];
                             });
}

/// Column-wise softmax within each segment of rows.
inline Value segment_softmax(const Value& a, std::vector<std::size_t> seg, std::size_t nseg) {
  if (seg.size() != a.rows())
    throw DimensionError("segment_softmax: " + std::to_string(seg.size()) + " ids for " + a.shape());
  const std::size_t c = a.cols();
  auto groups = detail::group_by_segment(seg, nseg);
  std::vector<double> out(a.size(), 0.0);
  std::vector<double> buf;
  auto ad = a.data();
  for (std::size_t s = 0; s < nseg; ++s) {
    const auto& rows = groups[s];
    if (rows.empty()) continue;
    buf.resize(rows.size());
    for (std::size_t j = 0; j < c; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k : rows) mx = std::max(mx, ad[k * c + j]);
      for (std::size_t t = 0; t < rows.size(); ++t) {
        out[rows[t] * c + j] = std::exp(ad[rows[t] * c + j] - mx);
        buf[t] = out[rows[t] * c + j];
      }
      double z = detail::ordered_sum(buf);
      for (std::size_t k : rows) out[k * c + j] /= z;
    }
  }
  return detail::make_result(a.rows(), c, std::move(out), {a.node()}, "segment_softmax",
                             [c, groups = std::move(groups)](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (const auto& rows : groups)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   double dot = 0.0;
                                   for (std::size_t k : rows) dot += self.grad[k * c + j] * self.data[k * c + j];
                                   for (std::size_t k : rows)
                                     gp[k * c + j] += self.data[k * c + j] * (self.grad[k * c + j] - dot);
                                 }
                             });
}

/// [r x h] -> [r x h*times]; column b*times+t copies column b.
inline Value repeat_cols(const Value& a, std::size_t times) {
  const std::size_t r = a.rows(), h = a.cols();
  std::vector<double> out(r * h * times);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t b = 0; b < h; ++b)
      for (std::size_t t = 0; t < times; ++t) out[(i * h + b) * times + t] = ad[i * h + b];
  return detail::make_result(r, h * times, std::move(out), {a.node()}, "repeat_cols",
                             [r, h, times](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t b = 0; b < h; ++b)
                                   for (std::size_t t = 0; t < times; ++t)
                                     gp[i * h + b] += self.grad[(i * h + b) * times + t];
                             });
}

/// [r x c] -> [r x blocks], summing each contiguous block of c/blocks columns.
inline Value block_sum(const Value& a, std::size_t blocks) {
  const std::size_t r = a.rows(), c = a.cols();
  if (blocks == 0 || c % blocks != 0)
    throw DimensionError("block_sum: " + std::to_string(blocks) + " blocks do not divide " + a.shape());
  const std::size_t w = c / blocks;
  std::vector<double> out(r * blocks, 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t t = 0; t < w; ++t) out[i * blocks + b] += ad[i * c + b * w + t];
  return detail::make_result(r, blocks, std::move(out), {a.node()}, "block_sum",
                             [r, c, blocks, w](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t b = 0; b < blocks; ++b)
                                   for (std::size_t t = 0; t < w; ++t)
                                     gp[i * c + b * w + t] += self.grad[i * blocks + b];
                             });
}

// ---------------------------------------------------------------------------
// Normalization, similarity, classification

/// Row-wise layer normalization with a learnable per-channel scale gamma [1 x c].
inline Value layer_norm(const Value& x, const Value& gamma, double eps = 1e-5) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c)
    throw DimensionError("layer_norm: gamma " + gamma.shape() + " for input " + x.shape());
  std::vector<double> out(r * c), xhat(r * c), inv_std(r);
  auto xd = x.data();
  auto gd = gamma.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xd[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xd[i * c + j] - mu) * (xd[i * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xd[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gd[j];
    }
  }
  return detail::make_result(
      r, c, std::move(out), {x.node(), gamma.node()}, "layer_norm",
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pg = *self.parents[1];
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += self.grad[i * c + j] * xhat[i * c + j];
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              double dxh = self.grad[i * c + j] * pg.data[j];
              m1 += dxh;
              m2 += dxh * xhat[i * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              double dxh = self.grad[i * c + j] * pg.data[j];
              gx[i * c + j] += inv_std[i] * (dxh - m1 - xhat[i * c + j] * m2);
            }
          }
        }
      });
}

inline constexpr double kDegenerateNorm = 1e-12;

/// Row-wise cosine similarity of two [r x c] tensors -> [r x 1].
/// Throws DegenerateVectorError when any row has norm below 1e-12.
inline Value cosine_rows(const Value& a, const Value& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("cosine: shape mismatch " + a.shape() + " vs " + b.shape());
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r), na(r), nb(r);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += ad[i * c + j] * bd[i * c + j];
      aa += ad[i * c + j] * ad[i * c + j];
      bb += bd[i * c + j] * bd[i * c + j];
    }
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    if (na[i] < kDegenerateNorm || nb[i] < kDegenerateNorm) {
      std::ostringstream msg;
      msg << "cosine similarity of degenerate vector at row " << i << " (norms " << na[i] << ", " << nb[i] << ")";
      throw DegenerateVectorError(msg.str());
    }
    out[i] = dot / (na[i] * nb[i]);
  }
  return detail::make_result(r, 1, std::move(out), {a.node(), b.node()}, "cosine",
                             [r, c, na = std::move(na), nb = std::move(nb)](detail::Node& self) {
                               detail::Node& pa = *self.parents[0];
                               detail::Node& pb = *self.parents[1];
                               for (std::size_t i = 0; i < r; ++i) {
                                 double g = self.grad[i];
                                 double cs = self.data[i];
                                 if (pa.requires_grad) {
                                   auto& ga = pa.grad_buffer();
                                   for (std::size_t j = 0; j < c; ++j)
                                     ga[i * c + j] += g * (pb.data[i * c + j] / (na[i] * nb[i]) -
                                                           cs * pa.data[i * c + j] / (na[i] * na[i]));
                                 }
                                 if (pb.requires_grad) {
                                   auto& gb = pb.grad_buffer();
                                   for (std::size_t j = 0; j < c; ++j)
                                     gb[i * c + j] += g * (pa.data[i * c + j] / (na[i] * nb[i]) -
                                                           cs * pb.data[i * c + j] / (nb[i] * nb[i]));
                                 }
                               }
                             });
}

/// Cosine similarity of two equally sized vectors (any orientation) -> 1x1.
inline Value cosine_similarity(const Value& u, const Value& v) {
  if (u.size() != v.size())
    throw DimensionError("cosine: size mismatch " + u.shape() + " vs " + v.shape());
  return cosine_rows(reshape(u, 1, u.size()), reshape(v, 1, v.size()));
}

/// Mean negative log-likelihood of integer labels under row-wise softmax(logits).
inline Value cross_entropy(const Value& logits, const std::vector<int>& labels) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.size() != r)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + logits.shape());
  std::vector<double> prob(r * c);
  double total = 0.0;
  auto ld = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DimensionError("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, ld[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(ld[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(ld[i * c + j] - mx) / z;
    total += -(ld[i * c + static_cast<std::size_t>(labels[i])] - mx - std::log(z));
  }
  return detail::make_result(1, 1, {total / static_cast<double>(r)}, {logits.node()}, "cross_entropy",
                             [r, c, labels, prob = std::move(prob)](detail::Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               const double g = self.grad[0] / static_cast<double>(r);
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   double t = (static_cast<int>(j) == labels[i]) ? 1.0 : 0.0;
                                   gp[i * c + j] += g * (prob[i * c + j] - t);
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Interior gradients are reset first, so calling twice doubles only leaves.
inline void backward(const Value& loss) {
  if (!loss.defined() || !loss.is_scalar())
    throw DimensionError("backward needs a scalar loss, got " + (loss.defined() ? loss.shape() : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; parents are visited in recorded order so the
  // resulting topological order (and hence accumulation order) is deterministic.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / (std::fabs(analytic) + std::fabs(numeric) + 1e-12);
}

/// Compares the reverse-mode gradient of a scalar `loss_fn()` w.r.t. the leaf
/// `x` against central differences, perturbing `x` in place. Other leaves that
/// the loss reaches get their gradients accumulated as a side effect. When
/// `indices` is non-empty only those entries are perturbed. `five_point`
/// switches to the fourth-order stencil, for losses whose gradients are small
/// next to the rounding noise of a two-point difference.
inline GradCheckResult finite_diff_check_leaf(const std::function<Value()>& loss_fn, Value x, double h,
                                              const std::vector<std::size_t>& indices = {},
                                              bool five_point = false) {
  if (!(h > 0)) throw DomainError("finite_diff_check: step must be positive");
  if (!x.requires_grad()) throw ContractError("finite_diff_check: leaf does not require grad");
  x.zero_grad();
  Value loss = loss_fn();
  backward(loss);
  std::vector<double> analytic = x.grad_or_zero();
  GradCheckResult res;
  auto xd = x.mutable_data();
  NoGradGuard guard;
  std::vector<std::size_t> todo = indices;
  if (todo.empty()) {
    todo.resize(xd.size());
    std::iota(todo.begin(), todo.end(), std::size_t{0});
  }
  bool first = true;
  for (std::size_t i : todo) {
    if (i >= xd.size()) throw DimensionError("finite_diff_check: index out of range");
    const double orig = xd[i];
    auto at = [&](double dx) {
      xd[i] = orig + dx;
      return loss_fn().item();
    };
    const double d1 = at(h) - at(-h);
    double numeric = five_point ? (8.0 * d1 - (at(2 * h) - at(-2 * h))) / (12.0 * h) : d1 / (2.0 * h);
    xd[i] = orig;
    double err = relative_error(analytic[i], numeric);
    if (first || err > res.max_rel_error) {
      first = false;
      res.max_rel_error = err;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  return res;
}

/// finite_diff_check(f, x, h) for a map of a single input tensor.
inline double finite_diff_check(const std::function<Value(const Value&)>& f, const Value& x, double h) {
  Value leaf = Value::parameter(x.rows(), x.cols(), std::vector<double>(x.data().begin(), x.data().end()));
  return finite_diff_check_leaf([&] { return f(leaf); }, leaf, h).max_rel_error;
}

}  // namespace gsrd
