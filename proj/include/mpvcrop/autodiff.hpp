#pragma once

// Reverse-mode differentiation over dense row-major tensors. Each op that has
// at least one differentiable input records a closure that pushes its output
// gradient back into its inputs; inputs that do not require gradients (frozen
// teacher parameters, images, detached boxes) never enter the tape.

#include "mpvcrop/error.hpp"
#include "mpvcrop/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace mpvcrop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // empty until first needed
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;

    std::vector<T>& ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
      return grad;
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_->value.assign(shape_numel(shape), T(0));
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  template <class U>
  static Tensor from(Shape shape, std::span<const U> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw usage_error("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    Tensor t;
    t.node_->value.assign(values.begin(), values.end());
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw usage_error("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    Tensor t;
    t.node_->value = std::move(values);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v) { return from({1}, std::vector<T>{v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> value() { return node_->value; }
  std::span<const T> value() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw usage_error("Tensor::item on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Gradient buffer; empty span when nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool is_leaf() const { return !node_->backward; }
  const char* op() const { return node_->op; }

  /// Fresh leaf with a copy of the values and no history.
  Tensor detach() const {
    Tensor t;
    t.node_->value = node_->value;
    t.node_->shape = node_->shape;
    return t;
  }

  /// Deep copy, keeping the requires-grad flag but not the gradient.
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
  std::shared_ptr<Node> node_;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

namespace ad {

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, const char* op, std::initializer_list<const Tensor<T>*> inputs) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  auto* n = out.node();
  n->op = op;
  for (const auto* in : inputs) {
    if (in->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto* in : inputs) n->parents.push_back(in->node_ptr());
  }
  return out;
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& detail) {
  throw usage_error(std::string(op) + ": shape mismatch: " + detail);
}

} // namespace detail

/// y = x W^T + b for x [N, D], W [O, D], b [O].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
  if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1 || x.dim(1) != W.dim(1) || b.dim(0) != W.dim(0))
    detail::shape_fail("linear", "x" + shape_str(x.shape()) + " W" + shape_str(W.shape()) + " b" + shape_str(b.shape()));
  const std::size_t N = x.dim(0), D = x.dim(1), O = W.dim(0);
  auto out = detail::make_result<T>({N, O}, "linear", {&x, &W, &b});
  {
    const T* xv = x.value().data();
    const T* wv = W.value().data();
    const T* bv = b.value().data();
    T* yv = out.value().data();
    for (std::size_t n = 0; n < N; ++n) {
      const T* xr = xv + n * D;
      for (std::size_t o = 0; o < O; ++o) {
        const T* wr = wv + o * D;
        T acc = bv[o];
        for (std::size_t d = 0; d < D; ++d) acc += xr[d] * wr[d];
        yv[n * O + o] = acc;
      }
    }
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    auto* wn = W.node();
    auto* bn = b.node();
    on->backward = [=] {
      const T* dy = on->grad.data();
      if (wn->requires_grad) {
        T* dw = wn->ensure_grad().data();
        for (std::size_t n = 0; n < N; ++n) {
          const T* xr = xn->value.data() + n * D;
          for (std::size_t o = 0; o < O; ++o) {
            const T g = dy[n * O + o];
            if (g == T(0)) continue;
            T* dwr = dw + o * D;
            for (std::size_t d = 0; d < D; ++d) dwr[d] += g * xr[d];
          }
        }
      }
      if (bn->requires_grad) {
        T* db = bn->ensure_grad().data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) db[o] += dy[n * O + o];
      }
      if (xn->requires_grad) {
        T* dx = xn->ensure_grad().data();
        for (std::size_t n = 0; n < N; ++n) {
          T* dxr = dx + n * D;
          for (std::size_t o = 0; o < O; ++o) {
            const T g = dy[n * O + o];
            if (g == T(0)) continue;
            const T* wr = wn->value.data() + o * D;
            for (std::size_t d = 0; d < D; ++d) dxr[d] += g * wr[d];
          }
        }
      }
    };
  }
  return out;
}

/// 2-D convolution with zero "same" padding (k/2) applied before the stride.
/// x [N, C, H, W], K [O, C, k, k], b [O] -> [N, O, Ho, Wo].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& K, const Tensor<T>& b, std::size_t stride = 1) {
  if (x.rank() != 4 || K.rank() != 4 || b.rank() != 1 || K.dim(1) != x.dim(1) || K.dim(2) != K.dim(3) ||
      b.dim(0) != K.dim(0) || stride == 0)
    detail::shape_fail("conv2d", "x" + shape_str(x.shape()) + " K" + shape_str(K.shape()) + " b" +
                                     shape_str(b.shape()) + " stride " + std::to_string(stride));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = K.dim(0), k = K.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  if (H + 2 * pad < k || W + 2 * pad < k) detail::shape_fail("conv2d", "kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t R = C * k * k, Q = Ho * Wo;

  auto out = detail::make_result<T>({N, O, Ho, Wo}, "conv2d", {&x, &K, &b});

  // im2col: cols[n][r][q], r = (c, ky, kx), q = (oy, ox)
  auto cols = std::make_shared<std::vector<T>>(N * R * Q, T(0));
  {
    const T* xv = x.value().data();
    for (std::size_t n = 0; n < N; ++n) {
      T* cn = cols->data() + n * R * Q;
      for (std::size_t c = 0; c < C; ++c) {
        const T* xc = xv + (n * C + c) * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            T* row = cn + ((c * k + ky) * k + kx) * Q;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                row[oy * Wo + ox] = xc[iy * static_cast<std::ptrdiff_t>(W) + ix];
              }
            }
          }
        }
      }
    }
    const T* kv = K.value().data();
    const T* bv = b.value().data();
    T* yv = out.value().data();
    for (std::size_t n = 0; n < N; ++n) {
      const T* cn = cols->data() + n * R * Q;
      for (std::size_t o = 0; o < O; ++o) {
        T* yr = yv + (n * O + o) * Q;
        std::fill(yr, yr + Q, bv[o]);
        const T* kr = kv + o * R;
        for (std::size_t r = 0; r < R; ++r) {
          const T w = kr[r];
          const T* cr = cn + r * Q;
          for (std::size_t q = 0; q < Q; ++q) yr[q] += w * cr[q];
        }
      }
    }
  }

  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    auto* kn = K.node();
    auto* bn = b.node();
    on->backward = [=] {
      const T* dy = on->grad.data();
      if (bn->requires_grad) {
        T* db = bn->ensure_grad().data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) {
            const T* dyr = dy + (n * O + o) * Q;
            T s = 0;
            for (std::size_t q = 0; q < Q; ++q) s += dyr[q];
            db[o] += s;
          }
      }
      if (kn->requires_grad) {
        T* dk = kn->ensure_grad().data();
        for (std::size_t n = 0; n < N; ++n) {
          const T* cn = cols->data() + n * R * Q;
          for (std::size_t o = 0; o < O; ++o) {
            const T* dyr = dy + (n * O + o) * Q;
            T* dkr = dk + o * R;
            for (std::size_t r = 0; r < R; ++r) {
              const T* cr = cn + r * Q;
              T s = 0;
              for (std::size_t q = 0; q < Q; ++q) s += dyr[q] * cr[q];
              dkr[r] += s;
            }
          }
        }
      }
      if (xn->requires_grad) {
        T* dx = xn->ensure_grad().data();
        std::vector<T> dcols(R * Q);
        const T* kv = kn->value.data();
        for (std::size_t n = 0; n < N; ++n) {
          std::fill(dcols.begin(), dcols.end(), T(0));
          for (std::size_t o = 0; o < O; ++o) {
            const T* dyr = dy + (n * O + o) * Q;
            const T* kr = kv + o * R;
            for (std::size_t r = 0; r < R; ++r) {
              const T w = kr[r];
              T* dr = dcols.data() + r * Q;
              for (std::size_t q = 0; q < Q; ++q) dr[q] += w * dyr[q];
            }
          }
          for (std::size_t c = 0; c < C; ++c) {
            T* dxc = dx + (n * C + c) * H * W;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = dcols.data() + ((c * k + ky) * k + kx) * Q;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    dxc[iy * static_cast<std::ptrdiff_t>(W) + ix] += row[oy * Wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv_from_output) {
  auto out = make_result<T>(x.shape(), op, {&x});
  auto xv = x.value();
  auto yv = out.value();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [=] {
      T* dx = xn->ensure_grad().data();
      const T* dy = on->grad.data();
      const T* y = on->value.data();
      const T* xin = xn->value.data();
      for (std::size_t i = 0; i < on->value.size(); ++i) dx[i] += dy[i] * deriv_from_output(xin[i], y[i]);
    };
  }
  return out;
}

} // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                       [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, "scale", [s](T v) { return s * v; }, [s](T, T) { return s; });
}

/// Elementwise sum of two tensors with identical shapes.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), "add", {&a, &b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* an = a.node();
    auto* bn = b.node();
    on->backward = [=] {
      for (auto* pn : {an, bn}) {
        if (!pn->requires_grad) continue;
        auto& g = pn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    };
  }
  return out;
}

/// Mean of all elements, shape [1].
template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) detail::shape_fail("mean", "empty tensor");
  auto out = detail::make_result<T>({1}, "mean", {&x});
  T s = 0;
  for (T v : x.value()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  out.value()[0] = s * inv;
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [=] {
      auto& g = xn->ensure_grad();
      const T d = on->grad[0] * inv;
      for (auto& v : g) v += d;
    };
  }
  return out;
}

/// Mean absolute elementwise difference, shape [1].
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    detail::shape_fail("l1_loss", shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  if (pred.numel() == 0) detail::shape_fail("l1_loss", "empty tensor");
  auto out = detail::make_result<T>({1}, "l1_loss", {&pred, &target});
  T s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(pred.value()[i] - target.value()[i]);
  const T inv = T(1) / static_cast<T>(pred.numel());
  out.value()[0] = s * inv;
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* pn = pred.node();
    auto* tn = target.node();
    on->backward = [=] {
      const T d = on->grad[0] * inv;
      auto sign = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
      if (pn->requires_grad) {
        auto& g = pn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * sign(pn->value[i] - tn->value[i]);
      }
      if (tn->requires_grad) {
        auto& g = tn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d * sign(pn->value[i] - tn->value[i]);
      }
    };
  }
  return out;
}

/// [N, C, H, W] -> [N, C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) detail::shape_fail("global_avg_pool", shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = detail::make_result<T>({N, C}, "global_avg_pool", {&x});
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s = 0;
    for (std::size_t i = 0; i < HW; ++i) s += x.value()[nc * HW + i];
    out.value()[nc] = s * inv;
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [=] {
      auto& g = xn->ensure_grad();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T d = on->grad[nc] * inv;
        for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += d;
      }
    };
  }
  return out;
}

/// Same data, new shape (element count must match).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) detail::shape_fail("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = detail::make_result<T>(std::move(shape), "reshape", {&x});
  std::copy(x.value().begin(), x.value().end(), out.value().begin());
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [=] {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    };
  }
  return out;
}

/// [N, ...] -> [N, rest]
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) detail::shape_fail("flatten", "rank-0 tensor");
  return reshape(x, {x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

/// Column concatenation of [N, A] and [N, B] -> [N, A + B].
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    detail::shape_fail("concat_cols", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t N = a.dim(0), A = a.dim(1), B = b.dim(1);
  auto out = detail::make_result<T>({N, A + B}, "concat_cols", {&a, &b});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * A, A, out.value().data() + n * (A + B));
    std::copy_n(b.value().data() + n * B, B, out.value().data() + n * (A + B) + A);
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* an = a.node();
    auto* bn = b.node();
    on->backward = [=] {
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < A; ++i) g[n * A + i] += on->grad[n * (A + B) + i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < B; ++i) g[n * B + i] += on->grad[n * (A + B) + A + i];
      }
    };
  }
  return out;
}

/// Rows of (cx, cy, w, h) -> rows of (x1, y1, x2, y2), no repair.
template <class T>
Tensor<T> center_to_corners(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != 4) detail::shape_fail("center_to_corners", shape_str(x.shape()));
  const std::size_t N = x.dim(0);
  auto out = detail::make_result<T>({N, 4}, "center_to_corners", {&x});
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = x.value().data() + 4 * n;
    T* o = out.value().data() + 4 * n;
    o[0] = r[0] - T(0.5) * r[2];
    o[1] = r[1] - T(0.5) * r[3];
    o[2] = r[0] + T(0.5) * r[2];
    o[3] = r[1] + T(0.5) * r[3];
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [=] {
      auto& g = xn->ensure_grad();
      for (std::size_t n = 0; n < N; ++n) {
        const T* d = on->grad.data() + 4 * n;
        T* gx = g.data() + 4 * n;
        gx[0] += d[0] + d[2];
        gx[1] += d[1] + d[3];
        gx[2] += T(0.5) * (d[2] - d[0]);
        gx[3] += T(0.5) * (d[3] - d[1]);
      }
    };
  }
  return out;
}

/// RoIAlign-style sampling: for each batch item n, a grid x grid lattice of
/// points at the cell centers of boxes[n] is bilinearly interpolated from
/// feature_map[n]. Feature pixel (i, j) sits at normalized ((j+0.5)/W, (i+0.5)/H);
/// samples outside the outermost centers are clamped to the border.
/// Boxes are constants: only the feature map receives gradients.
template <class T>
Tensor<T> bilinear_roi_sample(const Tensor<T>& feature_map, std::span<const Box> boxes, std::size_t grid) {
  if (feature_map.rank() != 4 || boxes.size() != feature_map.dim(0) || grid == 0)
    detail::shape_fail("bilinear_roi_sample", "feature_map" + shape_str(feature_map.shape()) + " with " +
                                                  std::to_string(boxes.size()) + " boxes, grid " +
                                                  std::to_string(grid));
  const std::size_t N = feature_map.dim(0), C = feature_map.dim(1), H = feature_map.dim(2), W = feature_map.dim(3);
  const std::size_t P = grid;
  auto out = detail::make_result<T>({N, C, P, P}, "bilinear_roi_sample", {&feature_map});

  struct Tap {
    std::size_t idx[4];
    T w[4];
  };
  auto taps = std::make_shared<std::vector<Tap>>(N * P * P);
  auto axis = [](double u, std::size_t extent, std::size_t& i0, std::size_t& i1, double& frac) {
    double f = std::clamp(u * static_cast<double>(extent) - 0.5, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(std::floor(f));
    i1 = std::min(i0 + 1, extent - 1);
    frac = f - static_cast<double>(i0);
  };
  for (std::size_t n = 0; n < N; ++n) {
    const Box& bx = boxes[n];
    for (std::size_t py = 0; py < P; ++py) {
      const double v = bx.y1 + (static_cast<double>(py) + 0.5) / static_cast<double>(P) * bx.height();
      std::size_t y0, y1;
      double fy;
      axis(v, H, y0, y1, fy);
      for (std::size_t px = 0; px < P; ++px) {
        const double u = bx.x1 + (static_cast<double>(px) + 0.5) / static_cast<double>(P) * bx.width();
        std::size_t x0, x1;
        double fx;
        axis(u, W, x0, x1, fx);
        Tap& t = (*taps)[(n * P + py) * P + px];
        t.idx[0] = y0 * W + x0;
        t.idx[1] = y0 * W + x1;
        t.idx[2] = y1 * W + x0;
        t.idx[3] = y1 * W + x1;
        t.w[0] = static_cast<T>((1 - fy) * (1 - fx));
        t.w[1] = static_cast<T>((1 - fy) * fx);
        t.w[2] = static_cast<T>(fy * (1 - fx));
        t.w[3] = static_cast<T>(fy * fx);
      }
    }
  }
  const T* fv = feature_map.value().data();
  T* ov = out.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = fv + (n * C + c) * H * W;
      for (std::size_t p = 0; p < P * P; ++p) {
        const Tap& t = (*taps)[n * P * P + p];
        ov[(n * C + c) * P * P + p] =
            t.w[0] * plane[t.idx[0]] + t.w[1] * plane[t.idx[1]] + t.w[2] * plane[t.idx[2]] + t.w[3] * plane[t.idx[3]];
      }
    }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* fn = feature_map.node();
    on->backward = [=] {
      T* g = fn->ensure_grad().data();
      const T* d = on->grad.data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          T* plane = g + (n * C + c) * H * W;
          for (std::size_t p = 0; p < P * P; ++p) {
            const Tap& t = (*taps)[n * P * P + p];
            const T dv = d[(n * C + c) * P * P + p];
            for (int k = 0; k < 4; ++k) plane[t.idx[k]] += t.w[k] * dv;
          }
        }
    };
  }
  return out;
}

} // namespace ad

/// Runs reverse-mode accumulation from a scalar loss. Leaf gradients
/// accumulate across calls; intermediate buffers are reset on each call.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw usage_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  using Node = typename Tensor<T>::Node;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (n->backward) n->grad.assign(n->value.size(), T(0));
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward();
}

template <class T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params)
    if (p.has_grad()) std::fill(p.grad().begin(), p.grad().end(), T(0));
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
  zero_grads(std::span<Tensor<T>>(params));
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters without an accumulated gradient are
/// treated as having a zero gradient for the step.
template <class T>
class Adam {
public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    const bool any = std::any_of(params_.begin(), params_.end(), [](const Tensor<T>& p) { return p.has_grad(); });
    if (!any) throw usage_error("adam_step: no gradients have been computed (call backward first)");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto val = p.value();
      const bool has = p.has_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        const T g = has ? p.grad()[j] : T(0);
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        const T mhat = m[j] * ibc1;
        const T vhat = v[j] * ibc2;
        val[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  /// Same optimizer state driving a different (shape-identical) parameter list.
  Adam rebound(std::vector<Tensor<T>> params) const {
    if (params.size() != params_.size()) throw usage_error("Adam::rebound: parameter count mismatch");
    Adam out = *this;
    out.params_ = std::move(params);
    return out;
  }

  std::int64_t steps() const { return t_; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
};

} // namespace mpvcrop
