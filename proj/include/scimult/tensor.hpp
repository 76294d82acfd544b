#pragma once

// Reverse-mode autodiff on dense row-major tensors. Every op allocates a
// fresh node; recording a backward closure only happens when gradients are
// enabled and some input requires them. backward() walks the implicit graph
// in reverse topological order and accumulates additively, so shared
// subexpressions (e.g. one embedding matrix used by many rows) just work.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "scimult/common.hpp"

namespace scimult {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
};

template <class S>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<S> data) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (shape.empty() || n != data.size())
      throw contract_error("tensor: shape does not match element count");
    for (const S v : data)
      if (!std::isfinite(static_cast<double>(v)))
        throw contract_error("tensor: non-finite entry");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return from_data(std::move(shape), std::vector<S>(n, S(0)));
  }

  static Tensor full(std::vector<std::size_t> shape, S v) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return from_data(std::move(shape), std::vector<S>(n, v));
  }

  static Tensor scalar(S v) { return from_data({1}, {v}); }

  static Tensor randn(std::vector<std::size_t> shape, rng::Stream& stream,
                      S stddev) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<S> data(n);
    for (auto& v : data) v = static_cast<S>(stream.next_normal()) * stddev;
    return from_data(std::move(shape), std::move(data));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return check().shape; }
  std::size_t rank() const { return check().shape.size(); }
  std::size_t numel() const { return check().data.size(); }
  std::size_t rows() const { return shape().at(0); }
  std::size_t cols() const {
    if (rank() != 2) throw contract_error("tensor: cols() on non-matrix");
    return shape()[1];
  }

  std::span<S> data() { return {check().data.data(), check().data.size()}; }
  std::span<const S> data() const {
    return {check().data.data(), check().data.size()};
  }
  std::span<const S> grad() const {
    return {check().grad.data(), check().grad.size()};
  }
  std::span<S> grad() { return {check().grad.data(), check().grad.size()}; }
  bool has_grad() const { return !check().grad.empty(); }

  S value() const {
    if (numel() != 1) throw contract_error("tensor: value() on non-scalar");
    return check().data[0];
  }

  S at(std::size_t i) const { return check().data.at(i); }
  S at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw contract_error("tensor: 2d index on non-matrix");
    return check().data.at(r * shape()[1] + c);
  }

  bool requires_grad() const { return check().requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    check().requires_grad = rg;
    if (rg) check().ensure_grad();
    return *this;
  }

  void zero_grad() {
    auto& n = check();
    n.grad.assign(n.data.size(), S(0));
  }

  std::shared_ptr<Node> node() const { return node_; }
  Node& check() const {
    if (!node_) throw contract_error("tensor: use of empty handle");
    return *node_;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class S>
void check_finite(const std::vector<S>& v, const char* op) {
  for (const S x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw contract_error(std::string("tensor: non-finite result in ") + op);
}

// c[m,n] = a[m,k] * b[k,n]
template <class S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, S(0));
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = a[i * k + p];
      if (aip == S(0)) continue;
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T
template <class S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = accumulate ? crow[j] : S(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// c[k,n] = a[m,k]^T * b[m,n]
template <class S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + k * n, S(0));
  for (std::size_t i = 0; i < m; ++i) {
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = a[i * k + p];
      if (aip == S(0)) continue;
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <class S>
Tensor<S> make_result(std::vector<std::size_t> shape, std::vector<S> data,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(TensorNode<S>&)> backward,
                      const char* op) {
  check_finite(data, op);
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled_flag()) {
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) needs = true;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs)
      if (t.defined()) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<S>(std::move(node));
}

template <class S>
void accum(TensorNode<S>& dst, const std::vector<S>& contribution) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i)
    dst.grad[i] += contribution[i];
}

}  // namespace detail

// ---- ops ----

inline std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw contract_error("matmul: inner dimensions disagree (" +
                         shape_text(a.shape()) + " vs " +
                         shape_text(b.shape()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<S> out(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](TensorNode<S>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(),
                          m, n, k, /*accumulate=*/true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(),
                          m, k, n, /*accumulate=*/true);
        }
      },
      "matmul");
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw contract_error("transpose: needs a matrix");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<S> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  auto an = a.node();
  return detail::make_result<S>(
      {n, m}, std::move(out), {a},
      [an, m, n](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            an->grad[i * n + j] += self.grad[j * m + i];
      },
      "transpose");
}

// add/sub support equal shapes, a matrix plus a row vector (broadcast over
// rows), and anything plus a scalar.
namespace detail {

enum class BroadcastKind { Same, RowVector, Scalar };

template <class S>
BroadcastKind classify_broadcast(const Tensor<S>& a, const Tensor<S>& b,
                                 const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::Same;
  if (b.numel() == 1) return BroadcastKind::Scalar;
  if (a.rank() == 2 && b.rank() == 1 && b.numel() == a.cols())
    return BroadcastKind::RowVector;
  throw contract_error(std::string(op) + ": incompatible shapes");
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const auto kind = detail::classify_broadcast(a, b, "add");
  std::vector<S> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  if (kind == detail::BroadcastKind::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  } else if (kind == detail::BroadcastKind::Scalar) {
    for (auto& v : out) v += bd[0];
  } else {
    const std::size_t n = b.numel();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a, b},
      [an, bn, kind](TensorNode<S>& self) {
        if (an->requires_grad) detail::accum(*an, self.grad);
        if (!bn->requires_grad) return;
        bn->ensure_grad();
        if (kind == detail::BroadcastKind::Same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] += self.grad[i];
        } else if (kind == detail::BroadcastKind::Scalar) {
          for (const S g : self.grad) bn->grad[0] += g;
        } else {
          const std::size_t n = bn->data.size();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i % n] += self.grad[i];
        }
      },
      "add");
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  const auto kind = detail::classify_broadcast(a, b, "sub");
  std::vector<S> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  if (kind == detail::BroadcastKind::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  } else if (kind == detail::BroadcastKind::Scalar) {
    for (auto& v : out) v -= bd[0];
  } else {
    const std::size_t n = b.numel();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % n];
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a, b},
      [an, bn, kind](TensorNode<S>& self) {
        if (an->requires_grad) detail::accum(*an, self.grad);
        if (!bn->requires_grad) return;
        bn->ensure_grad();
        if (kind == detail::BroadcastKind::Same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] -= self.grad[i];
        } else if (kind == detail::BroadcastKind::Scalar) {
          for (const S g : self.grad) bn->grad[0] -= g;
        } else {
          const std::size_t n = bn->data.size();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i % n] -= self.grad[i];
        }
      },
      "sub");
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw contract_error("mul: shapes disagree");
  std::vector<S> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a, b},
      [an, bn](TensorNode<S>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] += self.grad[i] * an->data[i];
        }
      },
      "mul");
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  if (!std::isfinite(static_cast<double>(c)))
    throw contract_error("scale: non-finite factor");
  std::vector<S> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a},
      [an, c](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * c;
      },
      "scale");
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = 0;
  for (const S v : a.data()) acc += v;
  auto an = a.node();
  return detail::make_result<S>(
      {1}, {acc}, {a},
      [an](TensorNode<S>& self) {
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0];
      },
      "sum_all");
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  return scale(sum_all(a), inv);
}

namespace detail {

// Treats the tensor as [outer, axis_len, inner] and applies fn per lane.
struct AxisView {
  std::size_t outer, len, inner;
};

inline AxisView axis_view(const std::vector<std::size_t>& shape,
                          std::size_t axis) {
  if (axis >= shape.size()) throw contract_error("softmax: axis out of range");
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace detail

template <class S>
Tensor<S> softmax(const Tensor<S>& a, std::size_t axis) {
  const auto view = detail::axis_view(a.shape(), axis);
  std::vector<S> out(a.numel());
  const auto src = a.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t in = 0; in < view.inner; ++in) {
      const std::size_t base = o * view.len * view.inner + in;
      S mx = src[base];
      for (std::size_t t = 1; t < view.len; ++t)
        mx = std::max(mx, src[base + t * view.inner]);
      S denom = 0;
      for (std::size_t t = 0; t < view.len; ++t) {
        const S e = std::exp(src[base + t * view.inner] - mx);
        out[base + t * view.inner] = e;
        denom += e;
      }
      for (std::size_t t = 0; t < view.len; ++t)
        out[base + t * view.inner] /= denom;
    }
  }
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a},
      [an, view](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t o = 0; o < view.outer; ++o) {
          for (std::size_t in = 0; in < view.inner; ++in) {
            const std::size_t base = o * view.len * view.inner + in;
            S dot = 0;
            for (std::size_t t = 0; t < view.len; ++t) {
              const std::size_t idx = base + t * view.inner;
              dot += self.grad[idx] * self.data[idx];
            }
            for (std::size_t t = 0; t < view.len; ++t) {
              const std::size_t idx = base + t * view.inner;
              an->grad[idx] += (self.grad[idx] - dot) * self.data[idx];
            }
          }
        }
      },
      "softmax");
}

template <class S>
Tensor<S> log_softmax(const Tensor<S>& a, std::size_t axis) {
  const auto view = detail::axis_view(a.shape(), axis);
  std::vector<S> out(a.numel());
  const auto src = a.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t in = 0; in < view.inner; ++in) {
      const std::size_t base = o * view.len * view.inner + in;
      S mx = src[base];
      for (std::size_t t = 1; t < view.len; ++t)
        mx = std::max(mx, src[base + t * view.inner]);
      S denom = 0;
      for (std::size_t t = 0; t < view.len; ++t)
        denom += std::exp(src[base + t * view.inner] - mx);
      const S lse = mx + std::log(denom);
      for (std::size_t t = 0; t < view.len; ++t) {
        const std::size_t idx = base + t * view.inner;
        out[idx] = src[idx] - lse;
      }
    }
  }
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a},
      [an, view](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t o = 0; o < view.outer; ++o) {
          for (std::size_t in = 0; in < view.inner; ++in) {
            const std::size_t base = o * view.len * view.inner + in;
            S gsum = 0;
            for (std::size_t t = 0; t < view.len; ++t)
              gsum += self.grad[base + t * view.inner];
            for (std::size_t t = 0; t < view.len; ++t) {
              const std::size_t idx = base + t * view.inner;
              an->grad[idx] +=
                  self.grad[idx] - std::exp(self.data[idx]) * gsum;
            }
          }
        }
      },
      "log_softmax");
}

// Normalizes over the last dimension, then applies gain and bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw contract_error("layer_norm: gain/bias length mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  std::vector<S> inv_sigma(rows), mean(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = xd.data() + r * d;
    S mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<S>(d);
    S var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const S c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_sigma[r] = inv;
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = (row[j] - mu) * inv * gd[j] + bd[j];
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, d, rows, mean = std::move(mean),
       inv_sigma = std::move(inv_sigma)](TensorNode<S>& self) {
        for (std::size_t r = 0; r < rows; ++r) {
          const S* xrow = xn->data.data() + r * d;
          const S* grow = self.grad.data() + r * d;
          const S mu = mean[r];
          const S inv = inv_sigma[r];
          if (gn->requires_grad || bn->requires_grad) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) {
              const S xhat = (xrow[j] - mu) * inv;
              if (gn->requires_grad) gn->grad[j] += grow[j] * xhat;
              if (bn->requires_grad) bn->grad[j] += grow[j];
            }
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            S sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const S dy = grow[j] * gn->data[j];
              const S xhat = (xrow[j] - mu) * inv;
              sum_dy += dy;
              sum_dy_xhat += dy * xhat;
            }
            const S invd = S(1) / static_cast<S>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const S dy = grow[j] * gn->data[j];
              const S xhat = (xrow[j] - mu) * inv;
              xn->grad[r * d + j] +=
                  inv * (dy - sum_dy * invd - xhat * sum_dy_xhat * invd);
            }
          }
        }
      },
      "layer_norm");
}

// Exact Gaussian GELU: x * Phi(x).
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  std::vector<S> out(a.numel());
  const auto src = a.data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(src[i]);
    out[i] = static_cast<S>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), {a},
      [an](TensorNode<S>& self) {
        an->ensure_grad();
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double x = static_cast<double>(an->data[i]);
          const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
          an->grad[i] += self.grad[i] * static_cast<S>(phi + x * dens);
        }
      },
      "gelu");
}

// Gathers rows of a [V, d] table; gradient scatter-adds, so repeated ids
// accumulate.
template <class S>
Tensor<S> embedding_rows(const Tensor<S>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw contract_error("embedding_rows: table not 2-d");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<S> out(ids.size() * d);
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw contract_error("embedding_rows: id outside table");
    std::memcpy(out.data() + i * d, src.data() + static_cast<std::size_t>(id) * d,
                d * sizeof(S));
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result<S>(
      {ids.size(), d}, std::move(out), {table},
      [tn, d, idv = std::move(idv)](TensorNode<S>& self) {
        tn->ensure_grad();
        for (std::size_t i = 0; i < idv.size(); ++i) {
          S* dst = tn->grad.data() + static_cast<std::size_t>(idv[i]) * d;
          const S* g = self.grad.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
        }
      },
      "embedding_rows");
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2 || r0 > r1 || r1 > a.rows())
    throw contract_error("slice_rows: bad range");
  const std::size_t d = a.cols();
  std::vector<S> out((r1 - r0) * d);
  std::memcpy(out.data(), a.data().data() + r0 * d, out.size() * sizeof(S));
  auto an = a.node();
  return detail::make_result<S>(
      {r1 - r0, d}, std::move(out), {a},
      [an, r0, d](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[r0 * d + i] += self.grad[i];
      },
      "slice_rows");
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2 || c0 > c1 || c1 > a.cols())
    throw contract_error("slice_cols: bad range");
  const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
  std::vector<S> out(m * w);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * w, src.data() + i * n + c0, w * sizeof(S));
  auto an = a.node();
  return detail::make_result<S>(
      {m, w}, std::move(out), {a},
      [an, c0, m, n, w](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j)
            an->grad[i * n + c0 + j] += self.grad[i * w + j];
      },
      "slice_cols");
}

// Takes row r of a matrix as a 1-d vector.
template <class S>
Tensor<S> take_row(const Tensor<S>& a, std::size_t r) {
  if (a.rank() != 2 || r >= a.rows()) throw contract_error("take_row: bad row");
  const std::size_t d = a.cols();
  std::vector<S> out(d);
  std::memcpy(out.data(), a.data().data() + r * d, d * sizeof(S));
  auto an = a.node();
  return detail::make_result<S>(
      {d}, std::move(out), {a},
      [an, r, d](TensorNode<S>& self) {
        an->ensure_grad();
        for (std::size_t j = 0; j < d; ++j)
          an->grad[r * d + j] += self.grad[j];
      },
      "take_row");
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw contract_error("concat_rows: no parts");
  std::size_t d = 0, total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2) throw contract_error("concat_rows: parts must be 2-d");
    if (d == 0) d = p.cols();
    if (p.cols() != d && p.rows() != 0)
      throw contract_error("concat_rows: column counts disagree");
    total += p.rows();
  }
  if (d == 0) throw contract_error("concat_rows: zero-width parts");
  std::vector<S> out(total * d);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto src = p.data();
    std::memcpy(out.data() + off, src.data(), src.size() * sizeof(S));
    off += src.size();
  }
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<std::size_t> row_counts;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    row_counts.push_back(p.rows());
  }
  return detail::make_result<S>(
      {total, d}, std::move(out), parts,
      [nodes, row_counts, d](TensorNode<S>& self) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          const std::size_t n = row_counts[pi] * d;
          if (nodes[pi]->requires_grad) {
            nodes[pi]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
              nodes[pi]->grad[i] += self.grad[off + i];
          }
          off += n;
        }
      },
      "concat_rows");
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != m)
      throw contract_error("concat_cols: row counts disagree");
    total += p.cols();
  }
  std::vector<S> out(m * total);
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    const auto src = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * total + coff, src.data() + i * w,
                  w * sizeof(S));
    coff += w;
  }
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return detail::make_result<S>(
      {m, total}, std::move(out), parts,
      [nodes, widths, m, total](TensorNode<S>& self) {
        std::size_t coff = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          const std::size_t w = widths[pi];
          if (nodes[pi]->requires_grad) {
            nodes[pi]->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j)
                nodes[pi]->grad[i * w + j] += self.grad[i * total + coff + j];
          }
          coff += w;
        }
      },
      "concat_cols");
}

// Stacks 1-d vectors of equal length into a matrix, one per row.
template <class S>
Tensor<S> stack_rows(const std::vector<Tensor<S>>& rows) {
  if (rows.empty()) throw contract_error("stack_rows: no rows");
  const std::size_t d = rows.front().numel();
  std::vector<S> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].rank() != 1 || rows[i].numel() != d)
      throw contract_error("stack_rows: rows must be 1-d of equal length");
    std::memcpy(out.data() + i * d, rows[i].data().data(), d * sizeof(S));
  }
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& r : rows) nodes.push_back(r.node());
  return detail::make_result<S>(
      {rows.size(), d}, std::move(out), rows,
      [nodes, d](TensorNode<S>& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          nodes[i]->ensure_grad();
          for (std::size_t j = 0; j < d; ++j)
            nodes[i]->grad[j] += self.grad[i * d + j];
        }
      },
      "stack_rows");
}

// out[i] = x[i, idx[i]]
template <class S>
Tensor<S> pick(const Tensor<S>& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2 || idx.size() != x.rows())
    throw contract_error("pick: need one column index per row");
  const std::size_t n = x.cols();
  std::vector<S> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw contract_error("pick: column out of range");
    out[i] = x.data()[i * n + idx[i]];
  }
  auto xn = x.node();
  return detail::make_result<S>(
      {idx.size()}, std::move(out), {x},
      [xn, idx, n](TensorNode<S>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          xn->grad[i * n + idx[i]] += self.grad[i];
      },
      "pick");
}

template <class S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.numel() != b.numel()) throw contract_error("dot: lengths disagree");
  S acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      {1}, {acc}, {a, b},
      [an, bn](TensorNode<S>& self) {
        const S g = self.grad[0];
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < an->data.size(); ++i)
            an->grad[i] += g * bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < bn->data.size(); ++i)
            bn->grad[i] += g * an->data[i];
        }
      },
      "dot");
}

// ---- backward ----

template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw contract_error("backward: loss must be scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order walk over grad-requiring ancestry.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace scimult
