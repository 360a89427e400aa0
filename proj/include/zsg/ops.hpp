#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace zsg::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C = A B (or C += A B). Eigen's matrix-vector kernels pick their vectorized
// reduction order from the operands' memory alignment, which would make
// results depend on where the allocator put a buffer. Products with a
// single-row or single-column result, and tiny products that Eigen would
// evaluate coefficient-wise, use a fixed-order loop instead.
template <class C, class A, class B>
void product(C&& c, const A& a, const B& b, bool accumulate) {
  if (a.rows() == 1 || b.cols() == 1 || a.rows() + b.cols() + a.cols() < 24) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.cols(); ++j) {
        typename std::decay_t<C>::Scalar acc = 0;
        for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
        c(i, j) = accumulate ? c(i, j) + acc : acc;
      }
    }
  } else if (accumulate) {
    c.noalias() += a * b;
  } else {
    c.noalias() = a * b;
  }
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= 0) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

inline void check(bool cond, const std::string& what) { require(cond, ErrorClass::InvalidInput, what); }

// Builds the message only on failure; for messages that format shapes.
template <class F>
void check_lazy(bool cond, F&& message) {
  if (!cond) fail(ErrorClass::InvalidInput, message());
}

}  // namespace detail

enum class Elementwise { Relu, Sigmoid, Tanh, Add, Mul, Sub };

// ---------------------------------------------------------------- pointwise

/// Unary pointwise op. ReLU uses subgradient 0 at the origin.
template <class T>
Tensor<T> elementwise(Tape<T>& tape, const Tensor<T>& x, Elementwise kind) {
  auto out = make_output(tape, x.shape(), {&x});
  auto xs = x.data();
  auto ys = out.data();
  switch (kind) {
    case Elementwise::Relu:
      for (std::size_t i = 0; i < xs.size(); ++i) {
        ys[i] = xs[i] > T(0) ? xs[i] : T(0);
        tape.log_branch(xs[i] > T(0));
      }
      break;
    case Elementwise::Sigmoid:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = detail::stable_sigmoid(xs[i]);
      break;
    case Elementwise::Tanh:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::tanh(xs[i]);
      break;
    default:
      detail::check(false, "elementwise: binary kind passed to unary overload");
  }
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node(), kind] {
      if (!xn->requires_grad) return;
      const std::size_t n = yn->value.size();
      const T* y = yn->value.data();
      const T* x = xn->value.data();
      const T* gy = yn->grad.data();
      T* gx = xn->grad.data();
      switch (kind) {
        case Elementwise::Relu:
          for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
          break;
        case Elementwise::Sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
          break;
        case Elementwise::Tanh:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (T(1) - y[i] * y[i]);
          break;
        default: break;
      }
    });
  }
  return out;
}

/// Binary pointwise op on equal shapes; `b` may also be a single-element
/// tensor, which is broadcast.
template <class T>
Tensor<T> elementwise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, Elementwise kind) {
  const bool scalar_b = b.size() == 1 && a.size() != 1;
  detail::check_lazy(scalar_b || a.shape() == b.shape(), [&] {
    return "elementwise: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape());
  });
  auto out = make_output(tape, a.shape(), {&a, &b});
  auto as = a.data();
  auto bs = b.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < as.size(); ++i) {
    const T bv = scalar_b ? bs[0] : bs[i];
    switch (kind) {
      case Elementwise::Add: ys[i] = as[i] + bv; break;
      case Elementwise::Sub: ys[i] = as[i] - bv; break;
      case Elementwise::Mul: ys[i] = as[i] * bv; break;
      default: detail::check(false, "elementwise: unary kind passed to binary overload");
    }
  }
  if (out.requires_grad()) {
    tape.record([an = a.shared_node(), bn = b.shared_node(), yn = out.shared_node(), kind, scalar_b] {
      const auto& gy = yn->grad;
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const std::size_t bi = scalar_b ? 0 : i;
        T ga = 0, gb = 0;
        switch (kind) {
          case Elementwise::Add: ga = gy[i]; gb = gy[i]; break;
          case Elementwise::Sub: ga = gy[i]; gb = -gy[i]; break;
          case Elementwise::Mul:
            ga = gy[i] * bn->value[bi];
            gb = gy[i] * an->value[i];
            break;
          default: break;
        }
        if (an->requires_grad) an->grad[i] += ga;
        if (bn->requires_grad) bn->grad[bi] += gb;
      }
    });
  }
  return out;
}

template <class T> Tensor<T> relu(Tape<T>& t, const Tensor<T>& x) { return elementwise(t, x, Elementwise::Relu); }
template <class T> Tensor<T> sigmoid(Tape<T>& t, const Tensor<T>& x) { return elementwise(t, x, Elementwise::Sigmoid); }
template <class T> Tensor<T> tanh(Tape<T>& t, const Tensor<T>& x) { return elementwise(t, x, Elementwise::Tanh); }
template <class T> Tensor<T> add(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, a, b, Elementwise::Add); }
template <class T> Tensor<T> sub(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, a, b, Elementwise::Sub); }
template <class T> Tensor<T> mul(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, a, b, Elementwise::Mul); }

/// Multiplies by a constant.
template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  auto out = make_output(tape, x.shape(), {&x});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node(), factor] {
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i] * factor;
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  auto out = make_output(tape, Shape{1}, {&x});
  T acc = 0;
  for (T v : x.data()) acc += v;
  out[0] = acc;
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node()] {
      const T g = yn->grad[0];
      for (auto& gx : xn->grad) gx += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.size()));
}

/// Sum of single-element tensors, accumulated in list order.
template <class T>
Tensor<T> add_scalars(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
  detail::check(!xs.empty(), "add_scalars: empty list");
  auto out = Tensor<T>(Shape{1}, T(0), tape.recording() && any_requires_grad(xs));
  T acc = 0;
  for (const auto& x : xs) {
    detail::check(x.size() == 1, "add_scalars: non-scalar element");
    acc += x[0];
  }
  out[0] = acc;
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& x : xs) nodes.push_back(x.shared_node());
    tape.record([nodes, yn = out.shared_node()] {
      for (auto& n : nodes)
        if (n->requires_grad) n->grad[0] += yn->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  detail::check(numel(shape) == x.size(), "reshape: element count changes");
  auto out = make_output(tape, std::move(shape), {&x});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node()] {
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
  }
  return out;
}

/// Slice [begin, end) along dimension 0; remaining dimensions kept.
template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::check(x.rank() >= 1 && begin < end && end <= x.dim(0), "slice_rows: bad range");
  Shape s = x.shape();
  const std::size_t inner = x.size() / s[0];
  s[0] = end - begin;
  auto out = make_output(tape, s, {&x});
  std::copy(x.data().begin() + begin * inner, x.data().begin() + end * inner, out.data().begin());
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node(), off = begin * inner] {
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[off + i] += yn->grad[i];
    });
  }
  return out;
}

/// Columns [begin, end) of an N x D matrix.
template <class T>
Tensor<T> slice_columns(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::check(x.rank() == 2 && begin < end && end <= x.dim(1), "slice_columns: bad range");
  const std::size_t n = x.dim(0), d = x.dim(1), w = end - begin;
  auto out = make_output(tape, Shape{n, w}, {&x});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * d + begin + c];
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node(), n, d, w, begin] {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) xn->grad[r * d + begin + c] += yn->grad[r * w + c];
    });
  }
  return out;
}

/// Concatenates along dimension 1 (channels of NCHW, or columns of N x D).
/// All other dimensions must agree.
template <class T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::check(!parts.empty(), "concat_channels: no parts");
  const Shape& s0 = parts[0].shape();
  detail::check(s0.size() >= 2, "concat_channels: rank must be >= 2");
  const std::size_t n = s0[0];
  const std::size_t spatial = numel(Shape(s0.begin() + 2, s0.end()));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    detail::check_lazy(s.size() == s0.size() && s[0] == n && numel(Shape(s.begin() + 2, s.end())) == spatial &&
                      std::equal(s.begin() + 2, s.end(), s0.begin() + 2),
                  [&] { return "concat_channels: spatial mismatch " + shape_string(s) + " vs " + shape_string(s0); });
    channels += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = channels;
  auto out = Tensor<T>(out_shape, T(0), tape.recording() && any_requires_grad(parts));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy(p.data().begin() + b * c * spatial, p.data().begin() + (b + 1) * c * spatial,
                out.data().begin() + (b * channels + offset) * spatial);
    }
    offset += c;
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.shared_node());
    tape.record([nodes, yn = out.shared_node(), n, channels, spatial] {
      std::size_t off = 0;
      for (auto& pn : nodes) {
        const std::size_t c = pn->shape[1];
        if (pn->requires_grad) {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < c * spatial; ++i)
              pn->grad[b * c * spatial + i] += yn->grad[(b * channels + off) * spatial + i];
        }
        off += c;
      }
    });
  }
  return out;
}

/// Concatenates along dimension 0; trailing dimensions must agree.
template <class T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::check(!parts.empty(), "concat_rows: no parts");
  Shape out_shape = parts[0].shape();
  out_shape[0] = 0;
  for (const auto& p : parts) {
    detail::check(p.rank() == out_shape.size() && std::equal(p.shape().begin() + 1, p.shape().end(),
                                                             out_shape.begin() + 1),
                  "concat_rows: trailing shape mismatch");
    out_shape[0] += p.dim(0);
  }
  auto out = Tensor<T>(out_shape, T(0), tape.recording() && any_requires_grad(parts));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.size();
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.shared_node());
    tape.record([nodes, yn = out.shared_node()] {
      std::size_t o = 0;
      for (auto& pn : nodes) {
        if (pn->requires_grad)
          for (std::size_t i = 0; i < pn->value.size(); ++i) pn->grad[i] += yn->grad[o + i];
        o += pn->value.size();
      }
    });
  }
  return out;
}

/// Inverse of concat_channels (not recorded on any tape).
template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
  const Shape& s = x.shape();
  const std::size_t n = s[0], channels = s[1];
  const std::size_t spatial = x.size() / (n * channels);
  std::size_t total = 0;
  for (auto c : sizes) total += c;
  detail::check(total == channels, "split_channels: sizes do not sum to channel count");
  std::vector<Tensor<T>> parts;
  std::size_t off = 0;
  for (auto c : sizes) {
    Shape ps = s;
    ps[1] = c;
    Tensor<T> p(ps);
    for (std::size_t b = 0; b < n; ++b)
      std::copy(x.data().begin() + (b * channels + off) * spatial,
                x.data().begin() + (b * channels + off + c) * spatial, p.data().begin() + b * c * spatial);
    parts.push_back(p);
    off += c;
  }
  return parts;
}

/// Repeats each row of an N x D matrix over an H x W grid: N x D x H x W.
template <class T>
Tensor<T> tile_spatial(Tape<T>& tape, const Tensor<T>& v, std::size_t h, std::size_t w) {
  detail::check(v.rank() == 2, "tile_spatial: expects N x D");
  const std::size_t n = v.dim(0), d = v.dim(1), hw = h * w;
  auto out = make_output(tape, Shape{n, d, h, w}, {&v});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < d; ++c)
      std::fill_n(out.data().begin() + (b * d + c) * hw, hw, v[b * d + c]);
  if (out.requires_grad()) {
    tape.record([vn = v.shared_node(), yn = out.shared_node(), n, d, hw] {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < d; ++c) {
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += yn->grad[(b * d + c) * hw + i];
          vn->grad[b * d + c] += acc;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------- dense layers

/// x (N x D) . w (D x E) + b (E). An undefined bias is treated as zero.
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  detail::check_lazy(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0), [&] {
    return "linear: shape mismatch " + shape_string(x.shape()) + " . " + shape_string(w.shape());
  });
  const std::size_t n = x.dim(0), d = x.dim(1), e = w.dim(1);
  detail::check(!b.defined() || b.size() == e, "linear: bias length mismatch");
  auto out = make_output(tape, Shape{n, e}, {&x, &w, &b});
  detail::product(detail::MapMat<T>(out.data().data(), n, e), detail::CMapMat<T>(x.data().data(), n, d),
                  detail::CMapMat<T>(w.data().data(), d, e), false);
  if (b.defined()) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < e; ++c) out[r * e + c] += b[c];
  }
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node(),
                 yn = out.shared_node(), n, d, e] {
      detail::CMapMat<T> gy(yn->grad.data(), n, e);
      if (xn->requires_grad)
        detail::product(detail::MapMat<T>(xn->grad.data(), n, d), gy,
                        detail::CMapMat<T>(wn->value.data(), d, e).transpose(), true);
      if (wn->requires_grad)
        detail::product(detail::MapMat<T>(wn->grad.data(), d, e),
                        detail::CMapMat<T>(xn->value.data(), n, d).transpose(), gy, true);
      if (bn && bn->requires_grad)
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < e; ++c) bn->grad[c] += yn->grad[r * e + c];
    });
  }
  return out;
}

namespace detail {

struct ConvGeometry {
  std::size_t c, h, w, k, stride, pad, ho, wo;
};

/// Output columns [lo, hi) whose kernel tap kx lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t kx, std::size_t stride, std::size_t pad,
                                                       std::size_t w, std::size_t wo) {
  std::size_t lo = 0;
  while (lo < wo && lo * stride + kx < pad) ++lo;
  std::size_t hi = lo;
  while (hi < wo && hi * stride + kx < pad + w) ++hi;
  return {lo, hi};
}

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ch * g.k + ky) * g.k + kx) * p;
        const auto [ox_lo, ox_hi] = valid_range(kx, g.stride, g.pad, g.w, g.wo);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          T* dst = row + oy * g.wo;
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + ox_lo, T(0));
          const std::size_t x0 = ox_lo * g.stride + kx - g.pad;
          if (g.stride == 1) {
            std::copy(src + x0, src + x0 + (ox_hi - ox_lo), dst + ox_lo);
          } else {
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = src[x0 + (ox - ox_lo) * g.stride];
          }
          std::fill(dst + ox_hi, dst + g.wo, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ch * g.k + ky) * g.k + kx) * p;
        const auto [ox_lo, ox_hi] = valid_range(kx, g.stride, g.pad, g.w, g.wo);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.wo;
          const std::size_t x0 = ox_lo * g.stride + kx - g.pad;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) dst[x0 + (ox - ox_lo) * g.stride] += src[ox];
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation. input N x C x H x W, weight O x C x k x k, bias O.
/// Output spatial size floor((H + 2p - k) / s) + 1.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  detail::check(x.rank() == 4 && w.rank() == 4, "conv2d: expects NCHW input and OIkk weight");
  detail::check_lazy(w.dim(1) == x.dim(1), [&] {
    return "conv2d: channel mismatch " + shape_string(x.shape()) + " vs " + shape_string(w.shape());
  });
  detail::check(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  detail::check(stride >= 1, "conv2d: stride must be positive");
  const std::size_t n = x.dim(0), o = w.dim(0), k = w.dim(2);
  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  detail::check(g.h + 2 * pad >= k && g.w + 2 * pad >= k, "conv2d: kernel larger than padded input");
  detail::check(!b.defined() || b.size() == o, "conv2d: bias length mismatch");
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  const std::size_t ckk = g.c * k * k, p = g.ho * g.wo;
  const bool direct = k == 1 && stride == 1 && pad == 0;

  auto out = make_output(tape, Shape{n, o, g.ho, g.wo}, {&x, &w, &b});
  std::vector<T> cols(direct ? 0 : n * ckk * p);
  detail::CMapMat<T> wm(w.data().data(), o, ckk);
  for (std::size_t i = 0; i < n; ++i) {
    const T* xin = x.data().data() + i * g.c * g.h * g.w;
    const T* col = xin;
    if (!direct) {
      detail::im2col(xin, g, cols.data() + i * ckk * p);
      col = cols.data() + i * ckk * p;
    }
    T* y = out.data().data() + i * o * p;
    detail::product(detail::MapMat<T>(y, o, p), wm, detail::CMapMat<T>(col, ckk, p), false);
    if (b.defined())
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t q = 0; q < p; ++q) y[oc * p + q] += b[oc];
  }
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node(), yn = out.shared_node(),
                 cols = std::move(cols), g, n, o, ckk, p, direct] {
      detail::CMapMat<T> wm(wn->value.data(), o, ckk);
      std::vector<T> dcol(xn->requires_grad && !direct ? ckk * p : 0);
      for (std::size_t i = 0; i < n; ++i) {
        detail::CMapMat<T> gy(yn->grad.data() + i * o * p, o, p);
        const T* col = direct ? xn->value.data() + i * g.c * g.h * g.w : cols.data() + i * ckk * p;
        if (wn->requires_grad)
          detail::product(detail::MapMat<T>(wn->grad.data(), o, ckk), gy, detail::CMapMat<T>(col, ckk, p).transpose(),
                          true);
        if (bn && bn->requires_grad) {
          const T* gyp = yn->grad.data() + i * o * p;
          for (std::size_t oc = 0; oc < o; ++oc) {
            T acc = 0;
            for (std::size_t q = 0; q < p; ++q) acc += gyp[oc * p + q];
            bn->grad[oc] += acc;
          }
        }
        if (xn->requires_grad) {
          T* gx = xn->grad.data() + i * g.c * g.h * g.w;
          if (direct) {
            detail::product(detail::MapMat<T>(gx, ckk, p), wm.transpose(), gy, true);
          } else {
            detail::product(detail::MapMat<T>(dcol.data(), ckk, p), wm.transpose(), gy, false);
            detail::col2im_add(dcol.data(), g, gx);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

/// At every (n, h, w) divides the channel vector by max(eps, ||v||_2).
/// Rank-2 inputs (N x D) are normalized per row.
template <class T>
Tensor<T> channel_l2_normalize(Tape<T>& tape, const Tensor<T>& x, T eps) {
  detail::check(x.rank() >= 2 && x.dim(1) >= 1, "channel_l2_normalize: needs a channel dimension");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.size() / (n * c);
  auto out = make_output(tape, x.shape(), {&x});
  std::vector<T> denom(n * spatial);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t s = 0; s < spatial; ++s) {
      T sq = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T v = x[(b * c + ch) * spatial + s];
        sq += v * v;
      }
      const T norm = std::sqrt(sq);
      tape.log_branch(norm > eps);
      const T d = norm > eps ? norm : eps;
      denom[b * spatial + s] = d;
      for (std::size_t ch = 0; ch < c; ++ch) out[(b * c + ch) * spatial + s] = x[(b * c + ch) * spatial + s] / d;
    }
  if (out.requires_grad()) {
    tape.record([xn = x.shared_node(), yn = out.shared_node(), denom = std::move(denom), n, c, spatial, eps] {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < spatial; ++s) {
          const T d = denom[b * spatial + s];
          const bool guarded = !(d > eps);
          T dot = 0;
          if (!guarded)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = (b * c + ch) * spatial + s;
              dot += yn->value[idx] * yn->grad[idx];
            }
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t idx = (b * c + ch) * spatial + s;
            xn->grad[idx] += (yn->grad[idx] - (guarded ? T(0) : yn->value[idx] * dot)) / d;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------- recurrence

template <class T>
struct LstmParams {
  Tensor<T> w_input;   // D x 4d, gate blocks ordered input, forget, candidate, output
  Tensor<T> w_hidden;  // d x 4d
  Tensor<T> bias;      // 4d

  std::size_t hidden() const { return w_hidden.dim(0); }
};

template <class T>
struct LstmState {
  Tensor<T> h;
  Tensor<T> c;
};

/// One gated LSTM cell update:
///   i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
template <class T>
LstmState<T> recurrent_step(Tape<T>& tape, const Tensor<T>& x, const LstmState<T>& state,
                            const LstmParams<T>& p) {
  const std::size_t d = p.hidden();
  detail::check(p.w_hidden.dim(1) == 4 * d && p.w_input.dim(1) == 4 * d && p.bias.size() == 4 * d,
                "recurrent_step: parameter shapes inconsistent");
  detail::check(state.h.rank() == 2 && state.h.dim(1) == d && state.c.shape() == state.h.shape() &&
                    x.dim(0) == state.h.dim(0),
                "recurrent_step: state shape mismatch");
  auto gates = add(tape, linear(tape, x, p.w_input, p.bias), linear(tape, state.h, p.w_hidden));
  auto i = sigmoid(tape, slice_columns(tape, gates, 0, d));
  auto f = sigmoid(tape, slice_columns(tape, gates, d, 2 * d));
  auto g = tanh(tape, slice_columns(tape, gates, 2 * d, 3 * d));
  auto o = sigmoid(tape, slice_columns(tape, gates, 3 * d, 4 * d));
  auto c = add(tape, mul(tape, f, state.c), mul(tape, i, g));
  auto h = mul(tape, o, tanh(tape, c));
  return {h, c};
}

}  // namespace zsg::ad
