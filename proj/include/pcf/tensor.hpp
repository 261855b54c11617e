#pragma once

// Dense row-major f64 tensors with tape-style reverse-mode differentiation.
//
// Every operation returns a fresh tensor. When at least one input requires a
// gradient (and grad mode is on), the result carries a node holding the
// inputs and a backward closure. backward() collects the nodes reachable from
// the loss, orders them by creation id (creation order is a topological order
// because inputs always exist before their consumers) and runs each closure
// exactly once.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pcf/errors.hpp"

namespace pcf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Row-major table of row indices, e.g. N query points by K neighbors.
struct IndexTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> values;

  IndexTable() = default;
  IndexTable(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0) {}
  IndexTable(std::size_t r, std::size_t c, std::vector<std::size_t> v)
      : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != rows * cols) {
      throw DimensionError(detail::concat("index table of ", rows, "x", cols,
                                          " given ", values.size(), " values"));
    }
  }

  std::size_t& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::size_t operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  bool operator==(const IndexTable&) const = default;
};

/// 64-byte aligned storage. Eigen picks its vectorized reduction path from
/// the runtime alignment of a buffer, so a fixed alignment keeps summation
/// order, and with it every result bit, independent of the allocator.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class Tensor;

namespace detail {

struct TensorImpl;

using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Node {
  std::uint64_t id = 0;
  const char* tag = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first needed
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::span<double> grad_of(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, const std::vector<double>& data)
      : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}
  Tensor(Shape shape, std::initializer_list<double> data)
      : Tensor(std::move(shape), Buffer(data)) {}
  Tensor(Shape shape, Buffer data) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError(detail::concat("shape ", shape_str(shape), " needs ",
                                          shape_numel(shape), " values, got ", data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, value));
  }
  static Tensor scalar(double value) { return Tensor({}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Writable view; only for leaves that no live graph depends on.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (impl_->node) throw ContractError("requires_grad can only be toggled on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  const char* op_tag() const { return impl_->node ? impl_->node->tag : "leaf"; }

  /// Copy of the values with no graph attachment.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline Tensor make_result(Shape shape, Buffer data, const char* tag,
                          std::initializer_list<Tensor> inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->id = next_node_id();
  node->tag = tag;
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(concat(op, ": expected rank ", rank, ", got ", shape_str(t.shape())));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(concat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                shape_str(b.shape())));
  }
}

}  // namespace detail

/// Runs reverse-mode differentiation from a scalar loss. Leaf gradients
/// accumulate across calls; intermediate gradients are not kept.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not attached to any tensor requiring grad");
  }
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{loss.impl().get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!t->node || !seen.insert(t).second) continue;
    order.push_back(t);
    for (const auto& in : t->node->inputs) {
      if (in->node && in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->node->id > b->node->id; });
  // Intermediate gradients are allocated on first write and freed once
  // propagated; a node nothing wrote to contributes nothing.
  for (auto* t : order) t->grad = Buffer();
  detail::grad_of(*loss.impl())[0] += 1.0;
  for (auto* t : order) {
    if (t->grad.empty()) continue;
    t->node->backward(*t);
    if (t != loss.impl().get()) t->grad = Buffer();
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b},
                             [a, b](const detail::TensorImpl& o) {
                               for (const auto& t : {a, b}) {
                                 if (!t.requires_grad()) continue;
                                 auto g = detail::grad_of(*t.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b},
                             [a, b](const detail::TensorImpl& o) {
                               if (a.requires_grad()) {
                                 auto g = detail::grad_of(*a.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                               if (b.requires_grad()) {
                                 auto g = detail::grad_of(*b.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [a, b](const detail::TensorImpl& o) {
                               if (a.requires_grad()) {
                                 auto g = detail::grad_of(*a.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b[i];
                               }
                               if (b.requires_grad()) {
                                 auto g = detail::grad_of(*b.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(out), "scale", {a},
                             [a, s](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*a.impl());
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
                             });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({}, {s}, "sum", {x}, [x](const detail::TensorImpl& o) {
    auto g = detail::grad_of(*x.impl());
    for (double& v : g) v += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError(detail::concat("reshape ", shape_str(x.shape()), " -> ",
                                        shape_str(shape)));
  }
  Buffer out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), "reshape", {x},
                             [x](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*x.impl());
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Buffer out(static_cast<std::size_t>(m * n));
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  return detail::make_result(
      {a.dim(0), b.dim(1)}, std::move(out), "matmul", {a, b},
      [a, b, m, k, n](const detail::TensorImpl& o) {
        detail::ConstMap go(o.grad.data(), m, n);
        if (a.requires_grad()) {
          detail::MutMap(detail::grad_of(*a.impl()).data(), m, k).noalias() +=
              go * detail::ConstMap(b.data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          detail::MutMap(detail::grad_of(*b.impl()).data(), k, n).noalias() +=
              detail::ConstMap(a.data().data(), m, k).transpose() * go;
        }
      });
}

/// x[..., c_in] * weight[c_in, c_out] + bias[c_out], applied to every row of
/// the leading axes. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  detail::require_rank(weight, 2, "linear weight");
  if (x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(1))) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const auto cin = static_cast<Eigen::Index>(weight.dim(0));
  const auto cout = static_cast<Eigen::Index>(weight.dim(1));
  const auto rows = static_cast<Eigen::Index>(x.numel() / weight.dim(0));
  Buffer out(static_cast<std::size_t>(rows * cout));
  detail::MutMap om(out.data(), rows, cout);
  om.noalias() = detail::ConstMap(x.data().data(), rows, cin) *
                 detail::ConstMap(weight.data().data(), cin, cout);
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), cout);
    om.rowwise() += bv;
  }
  Shape shape = x.shape();
  shape.back() = weight.dim(1);
  auto fn = [x, weight, bias, rows, cin, cout](const detail::TensorImpl& o) {
    detail::ConstMap go(o.grad.data(), rows, cout);
    if (x.requires_grad()) {
      detail::MutMap(detail::grad_of(*x.impl()).data(), rows, cin).noalias() +=
          go * detail::ConstMap(weight.data().data(), cin, cout).transpose();
    }
    if (weight.requires_grad()) {
      detail::MutMap(detail::grad_of(*weight.impl()).data(), cin, cout).noalias() +=
          detail::ConstMap(x.data().data(), rows, cin).transpose() * go;
    }
    if (bias.defined() && bias.requires_grad()) {
      Eigen::Map<Eigen::RowVectorXd>(detail::grad_of(*bias.impl()).data(), cout) +=
          go.colwise().sum();
    }
  };
  if (bias.defined()) {
    return detail::make_result(std::move(shape), std::move(out), "linear", {x, weight, bias},
                               std::move(fn));
  }
  return detail::make_result(std::move(shape), std::move(out), "linear", {x, weight},
                             std::move(fn));
}

/// Adds a vector along the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() == 0 || x.shape().back() != b.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t c = b.dim(0);
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % c];
  return detail::make_result(x.shape(), std::move(out), "add_bias", {x, b},
                             [x, b, c](const detail::TensorImpl& o) {
                               if (x.requires_grad()) {
                                 auto g = detail::grad_of(*x.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                               if (b.requires_grad()) {
                                 auto g = detail::grad_of(*b.impl());
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i];
                               }
                             });
}

/// Multiplies along the last axis by a vector.
inline Tensor scale_columns(const Tensor& x, const Tensor& s) {
  if (s.rank() != 1 || x.rank() == 0 || x.shape().back() != s.dim(0)) {
    throw DimensionError("scale_columns: " + shape_str(x.shape()) + " * " + shape_str(s.shape()));
  }
  const std::size_t c = s.dim(0);
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s[i % c];
  return detail::make_result(x.shape(), std::move(out), "scale_columns", {x, s},
                             [x, s, c](const detail::TensorImpl& o) {
                               if (x.requires_grad()) {
                                 auto g = detail::grad_of(*x.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s[i % c];
                               }
                               if (s.requires_grad()) {
                                 auto g = detail::grad_of(*s.impl());
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i] * x[i];
                               }
                             });
}

/// Per-column (x - mean) / sqrt(var + eps) over the rows of an [N,c] matrix,
/// with the biased batch variance.
inline Tensor standardize_columns(const Tensor& x, double eps) {
  detail::require_rank(x, 2, "standardize_columns");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Buffer mu(c, 0.0), inv(c, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) mu[j] += x[r * c + j];
  for (double& m : mu) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[r * c + j] - mu[j];
      inv[j] += d * d;
    }
  for (double& v : inv) v = 1.0 / std::sqrt(v / static_cast<double>(n) + eps);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (x[r * c + j] - mu[j]) * inv[j];
  auto y = std::make_shared<Buffer>(out);
  return detail::make_result(
      x.shape(), std::move(out), "standardize_columns", {x},
      [x, y, inv, n, c](const detail::TensorImpl& o) {
        // dx = inv * (g - mean(g) - y * mean(g * y))
        Buffer mg(c, 0.0), mgy(c, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            mg[j] += o.grad[r * c + j];
            mgy[j] += o.grad[r * c + j] * (*y)[r * c + j];
          }
        auto g = detail::grad_of(*x.impl());
        const double scale_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            g[i] += inv[j] * (o.grad[i] - mg[j] * scale_n - (*y)[i] * mgy[j] * scale_n);
          }
      });
}

// ---------------------------------------------------------------------------
// Neighborhood primitives

/// out[n,k,:] = src[idx(n,k),:]. Backward scatter-adds into src.
inline Tensor gather_rows(const Tensor& src, const IndexTable& idx) {
  detail::require_rank(src, 2, "gather_rows");
  const std::size_t m = src.dim(0);
  const std::size_t c = src.dim(1);
  for (std::size_t n = 0; n < idx.rows; ++n) {
    for (std::size_t k = 0; k < idx.cols; ++k) {
      if (idx(n, k) >= m) {
        throw IndexError(detail::concat("gather_rows: index ", idx(n, k), " at (", n, ",", k,
                                        ") out of range for ", m, " rows"));
      }
    }
  }
  Buffer out(idx.values.size() * c);
  const double* s = src.data().data();
  for (std::size_t j = 0; j < idx.values.size(); ++j) {
    std::copy_n(s + idx.values[j] * c, c, out.begin() + static_cast<std::ptrdiff_t>(j * c));
  }
  return detail::make_result({idx.rows, idx.cols, c}, std::move(out), "gather_rows", {src},
                             [src, idx, c](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*src.impl());
                               for (std::size_t j = 0; j < idx.values.size(); ++j) {
                                 double* dst = g.data() + idx.values[j] * c;
                                 const double* go = o.grad.data() + j * c;
                                 for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += go[ch];
                               }
                             });
}

/// Mean of the rows listed in each group: [M,c] -> [groups,c].
inline Tensor segment_mean(const Tensor& src, const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_rank(src, 2, "segment_mean");
  const std::size_t m = src.dim(0), c = src.dim(1);
  Buffer out(groups.size() * c, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw ContractError(detail::concat("segment_mean: group ", g, " is empty"));
    for (std::size_t r : groups[g]) {
      if (r >= m) {
        throw IndexError(detail::concat("segment_mean: row ", r, " in group ", g, " out of range for ",
                                        m, " rows"));
      }
      for (std::size_t j = 0; j < c; ++j) out[g * c + j] += src[r * c + j];
    }
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t j = 0; j < c; ++j) out[g * c + j] *= inv;
  }
  return detail::make_result({groups.size(), c}, std::move(out), "segment_mean", {src},
                             [src, groups, c](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*src.impl());
                               for (std::size_t s = 0; s < groups.size(); ++s) {
                                 const double inv = 1.0 / static_cast<double>(groups[s].size());
                                 for (std::size_t r : groups[s])
                                   for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[s * c + j] * inv;
                               }
                             });
}

/// Sum over the neighbor axis: [N,K,c] -> [N,c].
inline Tensor neighborhood_reduce(const Tensor& x) {
  detail::require_rank(x, 3, "neighborhood_reduce");
  const std::size_t n = x.dim(0), k = x.dim(1), c = x.dim(2);
  Buffer out(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double* row = x.data().data() + (i * k + j) * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += row[ch];
    }
  }
  return detail::make_result({n, c}, std::move(out), "neighborhood_reduce", {x},
                             [x, n, k, c](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*x.impl());
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < k; ++j) {
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     g[(i * k + j) * c + ch] += o.grad[i * c + ch];
                                   }
                                 }
                               }
                             });
}

/// Per-channel max over the neighbor axis: [N,K,c] -> [N,c]. Ties route the
/// gradient to the first maximal slot.
inline Tensor neighborhood_max(const Tensor& x) {
  detail::require_rank(x, 3, "neighborhood_max");
  const std::size_t n = x.dim(0), k = x.dim(1), c = x.dim(2);
  if (k == 0) throw DimensionError("neighborhood_max: empty neighborhood");
  Buffer out(n * c);
  std::vector<std::size_t> arg(n * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::size_t best = 0;
      double v = x[(i * k) * c + ch];
      for (std::size_t j = 1; j < k; ++j) {
        const double w = x[(i * k + j) * c + ch];
        if (w > v) {
          v = w;
          best = j;
        }
      }
      out[i * c + ch] = v;
      arg[i * c + ch] = best;
    }
  }
  return detail::make_result({n, c}, std::move(out), "neighborhood_max", {x},
                             [x, arg = std::move(arg), k, c](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*x.impl());
                               for (std::size_t r = 0; r < arg.size(); ++r) {
                                 const std::size_t i = r / c, ch = r % c;
                                 g[(i * k + arg[r]) * c + ch] += o.grad[r];
                               }
                             });
}

/// nbr[n,k,:] - center[n,:].
inline Tensor sub_center(const Tensor& nbr, const Tensor& center) {
  detail::require_rank(nbr, 3, "sub_center");
  detail::require_rank(center, 2, "sub_center");
  const std::size_t n = nbr.dim(0), k = nbr.dim(1), c = nbr.dim(2);
  if (center.dim(0) != n || center.dim(1) != c) {
    throw DimensionError("sub_center: " + shape_str(nbr.shape()) + " vs " +
                         shape_str(center.shape()));
  }
  Buffer out(nbr.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(i * k + j) * c + ch] = nbr[(i * k + j) * c + ch] - center[i * c + ch];
      }
    }
  }
  return detail::make_result(nbr.shape(), std::move(out), "sub_center", {nbr, center},
                             [nbr, center, n, k, c](const detail::TensorImpl& o) {
                               if (nbr.requires_grad()) {
                                 auto g = detail::grad_of(*nbr.impl());
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                               if (center.requires_grad()) {
                                 auto g = detail::grad_of(*center.impl());
                                 for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < k; ++j) {
                                     for (std::size_t ch = 0; ch < c; ++ch) {
                                       g[i * c + ch] -= o.grad[(i * k + j) * c + ch];
                                     }
                                   }
                                 }
                               }
                             });
}

/// Scales channel group h of x[n,k,:] by s[n,k,h]; groups are contiguous
/// blocks of c/H channels.
inline Tensor group_scale(const Tensor& x, const Tensor& s) {
  detail::require_rank(x, 3, "group_scale");
  detail::require_rank(s, 3, "group_scale");
  const std::size_t n = x.dim(0), k = x.dim(1), c = x.dim(2), heads = s.dim(2);
  if (s.dim(0) != n || s.dim(1) != k || heads == 0 || c % heads != 0) {
    throw DimensionError("group_scale: " + shape_str(x.shape()) + " by " +
                         shape_str(s.shape()));
  }
  const std::size_t group = c / heads;
  Buffer out(x.numel());
  for (std::size_t r = 0; r < n * k; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      out[r * c + ch] = x[r * c + ch] * s[r * heads + ch / group];
    }
  }
  return detail::make_result(x.shape(), std::move(out), "group_scale", {x, s},
                             [x, s, n, k, c, heads, group](const detail::TensorImpl& o) {
                               if (x.requires_grad()) {
                                 auto g = detail::grad_of(*x.impl());
                                 for (std::size_t r = 0; r < n * k; ++r) {
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     g[r * c + ch] += o.grad[r * c + ch] * s[r * heads + ch / group];
                                   }
                                 }
                               }
                               if (s.requires_grad()) {
                                 auto g = detail::grad_of(*s.impl());
                                 for (std::size_t r = 0; r < n * k; ++r) {
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     g[r * heads + ch / group] += o.grad[r * c + ch] * x[r * c + ch];
                                   }
                                 }
                               }
                             });
}

/// out[n, m*c + i] = sum_k h[n,k,m] * x[n,k,i]; the flattened per-point
/// outer-product sum that a final linear map consumes.
inline Tensor neighborhood_outer(const Tensor& h, const Tensor& x) {
  detail::require_rank(h, 3, "neighborhood_outer");
  detail::require_rank(x, 3, "neighborhood_outer");
  const std::size_t n = h.dim(0), k = h.dim(1), m = h.dim(2), c = x.dim(2);
  if (x.dim(0) != n || x.dim(1) != k) {
    throw DimensionError("neighborhood_outer: " + shape_str(h.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  Buffer out(n * m * c);
  const auto K = static_cast<Eigen::Index>(k), M = static_cast<Eigen::Index>(m),
             C = static_cast<Eigen::Index>(c);
  for (std::size_t i = 0; i < n; ++i) {
    detail::ConstMap hm(h.data().data() + i * k * m, K, M);
    detail::ConstMap xm(x.data().data() + i * k * c, K, C);
    detail::MutMap(out.data() + i * m * c, M, C).noalias() = hm.transpose() * xm;
  }
  return detail::make_result(
      {n, m * c}, std::move(out), "neighborhood_outer", {h, x},
      [h, x, n, K, M, C](const detail::TensorImpl& o) {
        const auto k = static_cast<std::size_t>(K), m = static_cast<std::size_t>(M),
                   c = static_cast<std::size_t>(C);
        for (std::size_t i = 0; i < n; ++i) {
          detail::ConstMap go(o.grad.data() + i * m * c, M, C);
          if (h.requires_grad()) {
            detail::MutMap(detail::grad_of(*h.impl()).data() + i * k * m, K, M).noalias() +=
                detail::ConstMap(x.data().data() + i * k * c, K, C) * go.transpose();
          }
          if (x.requires_grad()) {
            detail::MutMap(detail::grad_of(*x.impl()).data() + i * k * c, K, C).noalias() +=
                detail::ConstMap(h.data().data() + i * k * m, K, M) * go;
          }
        }
      });
}

/// Per-head scaled dot product: q[n,k,H*d] with kc[n,H*d] -> [n,k,H].
inline Tensor head_dot(const Tensor& q, const Tensor& kc, std::size_t heads, double factor) {
  detail::require_rank(q, 3, "head_dot");
  detail::require_rank(kc, 2, "head_dot");
  const std::size_t n = q.dim(0), k = q.dim(1), width = q.dim(2);
  if (kc.dim(0) != n || kc.dim(1) != width || heads == 0 || width % heads != 0) {
    throw DimensionError("head_dot: " + shape_str(q.shape()) + " vs " + shape_str(kc.shape()));
  }
  const std::size_t d = width / heads;
  Buffer out(n * k * heads, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        double acc = 0.0;
        for (std::size_t e = 0; e < d; ++e) {
          acc += q[(i * k + j) * width + hd * d + e] * kc[i * width + hd * d + e];
        }
        out[(i * k + j) * heads + hd] = acc * factor;
      }
    }
  }
  return detail::make_result(
      {n, k, heads}, std::move(out), "head_dot", {q, kc},
      [q, kc, n, k, width, heads, d, factor](const detail::TensorImpl& o) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t hd = 0; hd < heads; ++hd) {
              const double go = o.grad[(i * k + j) * heads + hd] * factor;
              for (std::size_t e = 0; e < d; ++e) {
                const std::size_t qi = (i * k + j) * width + hd * d + e;
                const std::size_t ki = i * width + hd * d + e;
                if (q.requires_grad()) detail::grad_of(*q.impl())[qi] += go * kc[ki];
                if (kc.requires_grad()) detail::grad_of(*kc.impl())[ki] += go * q[qi];
              }
            }
          }
        }
      });
}

/// Repeats v[m] into every (n,k) slot: [N,K,m].
inline Tensor broadcast_slots(const Tensor& v, std::size_t n, std::size_t k) {
  detail::require_rank(v, 1, "broadcast_slots");
  const std::size_t m = v.dim(0);
  Buffer out(n * k * m);
  for (std::size_t r = 0; r < n * k; ++r) std::copy_n(v.data().data(), m, out.data() + r * m);
  return detail::make_result({n, k, m}, std::move(out), "broadcast_slots", {v},
                             [v, m](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*v.impl());
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % m] += o.grad[i];
                             });
}

/// Concatenates two matrices along columns.
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_last");
  detail::require_rank(b, 2, "concat_last");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_last: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Buffer out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return detail::make_result({n, ca + cb}, std::move(out), "concat_last", {a, b},
                             [a, b, n, ca, cb](const detail::TensorImpl& o) {
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double* go = o.grad.data() + i * (ca + cb);
                                 if (a.requires_grad()) {
                                   auto g = detail::grad_of(*a.impl());
                                   for (std::size_t c = 0; c < ca; ++c) g[i * ca + c] += go[c];
                                 }
                                 if (b.requires_grad()) {
                                   auto g = detail::grad_of(*b.impl());
                                   for (std::size_t c = 0; c < cb; ++c) g[i * cb + c] += go[ca + c];
                                 }
                               }
                             });
}

/// [N,A,B] -> [N,B,A].
inline Tensor swap_last_axes(const Tensor& x) {
  detail::require_rank(x, 3, "swap_last_axes");
  const std::size_t n = x.dim(0), a = x.dim(1), b = x.dim(2);
  Buffer out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < a; ++p)
      for (std::size_t q = 0; q < b; ++q) out[(i * b + q) * a + p] = x[(i * a + p) * b + q];
  return detail::make_result({n, b, a}, std::move(out), "swap_last_axes", {x},
                             [x, n, a, b](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*x.impl());
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t p = 0; p < a; ++p)
                                   for (std::size_t q = 0; q < b; ++q)
                                     g[(i * a + p) * b + q] += o.grad[(i * b + q) * a + p];
                             });
}

// ---------------------------------------------------------------------------
// Activations

enum class Pointwise { identity, sigmoid, relu, softmax_over_last };

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor pointwise(const Tensor& x, Pointwise fn) {
  Buffer out(x.numel());
  switch (fn) {
    case Pointwise::identity:
      std::copy(x.data().begin(), x.data().end(), out.begin());
      return detail::make_result(x.shape(), std::move(out), "identity", {x},
                                 [x](const detail::TensorImpl& o) {
                                   auto g = detail::grad_of(*x.impl());
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                 });
    case Pointwise::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(x[i]);
      return detail::make_result(x.shape(), std::move(out), "sigmoid", {x},
                                 [x](const detail::TensorImpl& o) {
                                   auto g = detail::grad_of(*x.impl());
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                     const double y = o.data[i];
                                     g[i] += o.grad[i] * y * (1.0 - y);
                                   }
                                 });
    case Pointwise::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      return detail::make_result(x.shape(), std::move(out), "relu", {x},
                                 [x](const detail::TensorImpl& o) {
                                   auto g = detail::grad_of(*x.impl());
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                     if (x[i] > 0.0) g[i] += o.grad[i];
                                   }
                                 });
    case Pointwise::softmax_over_last: {
      if (x.rank() == 0) throw DimensionError("softmax_over_last on a scalar");
      const std::size_t width = x.shape().back();
      const std::size_t rows = width ? x.numel() / width : 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * width;
        double* y = out.data() + r * width;
        const double mx = *std::max_element(in, in + width);
        double z = 0.0;
        for (std::size_t j = 0; j < width; ++j) z += (y[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < width; ++j) y[j] /= z;
      }
      return detail::make_result(x.shape(), std::move(out), "softmax", {x},
                                 [x, rows, width](const detail::TensorImpl& o) {
                                   auto g = detail::grad_of(*x.impl());
                                   for (std::size_t r = 0; r < rows; ++r) {
                                     const double* y = o.data.data() + r * width;
                                     const double* gy = o.grad.data() + r * width;
                                     double dot = 0.0;
                                     for (std::size_t j = 0; j < width; ++j) dot += y[j] * gy[j];
                                     for (std::size_t j = 0; j < width; ++j) {
                                       g[r * width + j] += y[j] * (gy[j] - dot);
                                     }
                                   }
                                 });
    }
  }
  throw ContractError("pointwise: unknown function");
}

inline Tensor relu(const Tensor& x) { return pointwise(x, Pointwise::relu); }
inline Tensor sigmoid(const Tensor& x) { return pointwise(x, Pointwise::sigmoid); }

}  // namespace pcf
