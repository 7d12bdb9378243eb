#pragma once

#include "m3/tensor.hpp"

#include <cmath>
#include <memory>

// Differentiable free functions over Tensor<S>. Shape errors name the op and
// the offending shapes; any non-finite forward output is a hard error raised
// by make_op.

namespace m3 {

namespace detail {

// Decompose `shape` around `axis` as {outer, n, inner} for strided loops.
struct AxisSplit {
  Dim outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  require(axis >= 0 && axis < static_cast<int>(shape.size()),
          std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
              shape_str(shape));
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class S>
Eigen::Map<MatrixRM<S>> grad_matrix(TensorNode<S>& n, Dim rows, Dim cols) {
  return Eigen::Map<MatrixRM<S>>(n.grad_buffer().data(), rows, cols);
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  Array<S> v = a.value() + b.value();
  return detail::make_op<S>("add", a.shape(), std::move(v), {a, b}, [](TensorNode<S>& n) {
    for (int i = 0; i < 2; ++i)
      if (n.parents[i]->requires_grad) n.parents[i]->grad_buffer() += n.grad;
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  Array<S> v = a.value() * b.value();
  return detail::make_op<S>("mul", a.shape(), std::move(v), {a, b}, [](TensorNode<S>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad_buffer() += n.grad * n.parents[1]->value;
    if (n.parents[1]->requires_grad) n.parents[1]->grad_buffer() += n.grad * n.parents[0]->value;
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Array<S> v = a.value() * c;
  return detail::make_op<S>("scale", a.shape(), std::move(v), {a}, [c](TensorNode<S>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad_buffer() += n.grad * c;
  });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Array<S> v = x.value().max(S(0));
  return detail::make_op<S>("relu", x.shape(), std::move(v), {x}, [](TensorNode<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    const Array<S>& xv = n.parents[0]->value;
    n.parents[0]->grad_buffer() += (xv > S(0)).template cast<S>() * n.grad;
  });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  // Piecewise-exact logistic, then nudged one ulp inside (0,1): probability
  // outputs must never round to exactly 0 or 1 however saturated the logit.
  const S lo = std::numeric_limits<S>::min();
  const S hi = std::nextafter(S(1), S(0));
  Array<S> v(x.size());
  const Array<S>& xv = x.value();
  for (Dim i = 0; i < xv.size(); ++i) {
    const S z = xv[i];
    S s;
    if (z >= S(0)) {
      s = S(1) / (S(1) + std::exp(-z));
    } else {
      const S e = std::exp(z);
      s = e / (S(1) + e);
    }
    v[i] = std::min(std::max(s, lo), hi);
  }
  return detail::make_op<S>("sigmoid", x.shape(), std::move(v), {x}, [](TensorNode<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buffer() += n.grad * n.value * (S(1) - n.value);
  });
}

// C = opA(a) * opB(b) with optional transposition of either operand.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: need 2-D operands, got " +
                                              shape_str(a.shape()) + " and " +
                                              shape_str(b.shape()));
  const Dim m = trans_a ? a.dim(1) : a.dim(0);
  const Dim ka = trans_a ? a.dim(0) : a.dim(1);
  const Dim kb = trans_b ? b.dim(1) : b.dim(0);
  const Dim n = trans_b ? b.dim(0) : b.dim(1);
  require(ka == kb, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                        (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) +
                        (trans_b ? "^T" : ""));

  auto A = a.matrix(a.dim(0), a.dim(1));
  auto B = b.matrix(b.dim(0), b.dim(1));
  Array<S> v(m * n);
  Eigen::Map<MatrixRM<S>> C(v.data(), m, n);
  if (!trans_a && !trans_b)
    C.noalias() = A * B;
  else if (!trans_a && trans_b)
    C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b)
    C.noalias() = A.transpose() * B;
  else
    C.noalias() = A.transpose() * B.transpose();

  return detail::make_op<S>(
      "matmul", {m, n}, std::move(v), {a, b}, [trans_a, trans_b, m, n](TensorNode<S>& nd) {
        Eigen::Map<const MatrixRM<S>> G(nd.grad.data(), m, n);
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        Eigen::Map<const MatrixRM<S>> A(pa.value.data(), pa.shape[0], pa.shape[1]);
        Eigen::Map<const MatrixRM<S>> B(pb.value.data(), pb.shape[0], pb.shape[1]);
        if (pa.requires_grad) {
          auto dA = detail::grad_matrix(pa, pa.shape[0], pa.shape[1]);
          if (!trans_a && !trans_b)
            dA.noalias() += G * B.transpose();
          else if (!trans_a && trans_b)
            dA.noalias() += G * B;
          else if (trans_a && !trans_b)
            dA.noalias() += B * G.transpose();
          else
            dA.noalias() += B.transpose() * G.transpose();
        }
        if (pb.requires_grad) {
          auto dB = detail::grad_matrix(pb, pb.shape[0], pb.shape[1]);
          if (!trans_a && !trans_b)
            dB.noalias() += A.transpose() * G;
          else if (!trans_a && trans_b)
            dB.noalias() += G.transpose() * A;
          else if (trans_a && !trans_b)
            dB.noalias() += A * G;
          else
            dB.noalias() += G.transpose() * A.transpose();
        }
      });
}

// Affine layer y = x*W + b for x {n,f}, W {f,u}, b {u}.
template <class S>
Tensor<S> dense(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  require(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1,
          "dense: expected x {n,f}, w {f,u}, b {u}, got " + shape_str(x.shape()) + ", " +
              shape_str(w.shape()) + ", " + shape_str(b.shape()));
  require(x.dim(1) == w.dim(0) && w.dim(1) == b.dim(0),
          "dense: dimensions disagree, x " + shape_str(x.shape()) + " w " + shape_str(w.shape()) +
              " b " + shape_str(b.shape()));
  const Dim n = x.dim(0), u = w.dim(1);
  Array<S> v(n * u);
  Eigen::Map<MatrixRM<S>> Y(v.data(), n, u);
  Y.noalias() = x.matrix(n, x.dim(1)) * w.matrix(w.dim(0), u);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), u);

  return detail::make_op<S>("dense", {n, u}, std::move(v), {x, w, b}, [n, u](TensorNode<S>& nd) {
    Eigen::Map<const MatrixRM<S>> G(nd.grad.data(), n, u);
    auto& px = *nd.parents[0];
    auto& pw = *nd.parents[1];
    auto& pb = *nd.parents[2];
    Eigen::Map<const MatrixRM<S>> X(px.value.data(), px.shape[0], px.shape[1]);
    Eigen::Map<const MatrixRM<S>> W(pw.value.data(), pw.shape[0], pw.shape[1]);
    if (px.requires_grad)
      detail::grad_matrix(px, px.shape[0], px.shape[1]).noalias() += G * W.transpose();
    if (pw.requires_grad)
      detail::grad_matrix(pw, pw.shape[0], pw.shape[1]).noalias() += X.transpose() * G;
    if (pb.requires_grad)
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb.grad_buffer().data(), u) +=
          G.colwise().sum();
  });
}

// Softmax along `axis` (default: last). Row max is subtracted for stability.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  if (axis < 0) axis += x.ndim();
  auto sp = detail::split_axis(x.shape(), axis, "softmax");
  Array<S> v(x.size());
  const Array<S>& xv = x.value();
  for (Dim o = 0; o < sp.outer; ++o) {
    for (Dim i = 0; i < sp.inner; ++i) {
      const Dim base = o * sp.n * sp.inner + i;
      S mx = xv[base];
      for (Dim j = 1; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      S sum = S(0);
      for (Dim j = 0; j < sp.n; ++j) {
        const S e = std::exp(xv[base + j * sp.inner] - mx);
        v[base + j * sp.inner] = e;
        sum += e;
      }
      for (Dim j = 0; j < sp.n; ++j) v[base + j * sp.inner] /= sum;
    }
  }
  return detail::make_op<S>("softmax", x.shape(), std::move(v), {x}, [sp](TensorNode<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Array<S>& dx = nd.parents[0]->grad_buffer();
    for (Dim o = 0; o < sp.outer; ++o) {
      for (Dim i = 0; i < sp.inner; ++i) {
        const Dim base = o * sp.n * sp.inner + i;
        S dot = S(0);
        for (Dim j = 0; j < sp.n; ++j) {
          const Dim k = base + j * sp.inner;
          dot += nd.grad[k] * nd.value[k];
        }
        for (Dim j = 0; j < sp.n; ++j) {
          const Dim k = base + j * sp.inner;
          dx[k] += nd.value[k] * (nd.grad[k] - dot);
        }
      }
    }
  });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  require(shape_size(shape) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                             " as " + shape_str(shape));
  Array<S> v = x.value();
  return detail::make_op<S>("reshape", std::move(shape), std::move(v), {x},
                            [](TensorNode<S>& nd) {
                              if (nd.parents[0]->requires_grad)
                                nd.parents[0]->grad_buffer() += nd.grad;
                            });
}

template <class S>
Tensor<S> flatten(const Tensor<S>& x) {
  require(x.ndim() >= 1, "flatten: scalar input");
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

// Mean over one axis; the axis is dropped from the output shape.
template <class S>
Tensor<S> mean(const Tensor<S>& x, int axis) {
  if (axis < 0) axis += x.ndim();
  auto sp = detail::split_axis(x.shape(), axis, "mean");
  Shape out_shape;
  for (int i = 0; i < x.ndim(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  Array<S> v = Array<S>::Zero(sp.outer * sp.inner);
  const Array<S>& xv = x.value();
  for (Dim o = 0; o < sp.outer; ++o)
    for (Dim j = 0; j < sp.n; ++j)
      for (Dim i = 0; i < sp.inner; ++i)
        v[o * sp.inner + i] += xv[(o * sp.n + j) * sp.inner + i];
  v /= S(sp.n);

  return detail::make_op<S>("mean", std::move(out_shape), std::move(v), {x},
                            [sp](TensorNode<S>& nd) {
                              if (!nd.parents[0]->requires_grad) return;
                              Array<S>& dx = nd.parents[0]->grad_buffer();
                              const S inv = S(1) / S(sp.n);
                              for (Dim o = 0; o < sp.outer; ++o)
                                for (Dim j = 0; j < sp.n; ++j)
                                  for (Dim i = 0; i < sp.inner; ++i)
                                    dx[(o * sp.n + j) * sp.inner + i] +=
                                        nd.grad[o * sp.inner + i] * inv;
                            });
}

// Concatenate along `axis`; all other dimensions must agree.
template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  if (axis < 0) axis += parts[0].ndim();
  Shape out_shape = parts[0].shape();
  require(axis >= 0 && axis < static_cast<int>(out_shape.size()),
          "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(out_shape));
  Dim total = 0;
  for (const auto& p : parts) {
    require(p.ndim() == parts[0].ndim(), "concat: rank mismatch " + shape_str(p.shape()) +
                                             " vs " + shape_str(parts[0].shape()));
    for (int i = 0; i < p.ndim(); ++i)
      require(i == axis || p.dim(i) == parts[0].dim(i),
              "concat: shape mismatch off-axis, " + shape_str(p.shape()) + " vs " +
                  shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  auto sp = detail::split_axis(out_shape, axis, "concat");

  Array<S> v(shape_size(out_shape));
  Dim off = 0;
  for (const auto& p : parts) {
    const Dim nk = p.dim(axis);
    const Array<S>& pv = p.value();
    for (Dim o = 0; o < sp.outer; ++o)
      std::copy(pv.data() + o * nk * sp.inner, pv.data() + (o + 1) * nk * sp.inner,
                v.data() + (o * sp.n + off) * sp.inner);
    off += nk;
  }

  std::vector<Dim> sizes;
  for (const auto& p : parts) sizes.push_back(p.dim(axis));
  return detail::make_op<S>("concat", std::move(out_shape), std::move(v), parts,
                            [sp, sizes](TensorNode<S>& nd) {
                              Dim off = 0;
                              for (std::size_t t = 0; t < nd.parents.size(); ++t) {
                                const Dim nk = sizes[t];
                                auto& p = *nd.parents[t];
                                if (p.requires_grad) {
                                  Array<S>& dp = p.grad_buffer();
                                  for (Dim o = 0; o < sp.outer; ++o)
                                    Eigen::Map<Array<S>>(dp.data() + o * nk * sp.inner,
                                                         nk * sp.inner) +=
                                        Eigen::Map<const Array<S>>(
                                            nd.grad.data() + (o * sp.n + off) * sp.inner,
                                            nk * sp.inner);
                                }
                                off += nk;
                              }
                            });
}

// Contiguous slice [start, start+len) along `axis`.
template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, Dim start, Dim len) {
  if (axis < 0) axis += x.ndim();
  auto sp = detail::split_axis(x.shape(), axis, "slice");
  require(start >= 0 && len >= 1 && start + len <= sp.n,
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of bounds for axis size " + std::to_string(sp.n));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;

  Array<S> v(sp.outer * len * sp.inner);
  const Array<S>& xv = x.value();
  for (Dim o = 0; o < sp.outer; ++o)
    std::copy(xv.data() + (o * sp.n + start) * sp.inner,
              xv.data() + (o * sp.n + start + len) * sp.inner, v.data() + o * len * sp.inner);

  return detail::make_op<S>("slice", std::move(out_shape), std::move(v), {x},
                            [sp, start, len](TensorNode<S>& nd) {
                              if (!nd.parents[0]->requires_grad) return;
                              Array<S>& dx = nd.parents[0]->grad_buffer();
                              for (Dim o = 0; o < sp.outer; ++o)
                                Eigen::Map<Array<S>>(dx.data() + (o * sp.n + start) * sp.inner,
                                                     len * sp.inner) +=
                                    Eigen::Map<const Array<S>>(nd.grad.data() + o * len * sp.inner,
                                                               len * sp.inner);
                            });
}

namespace detail {

struct ConvDims {
  Dim n, h, w, c;       // input
  Dim kh, kw, f;        // kernel
  Dim oh, ow;           // output
  Dim stride, pad;
  Dim rows() const { return n * oh * ow; }
  Dim cols() const { return kh * kw * c; }
};

// Unfold NHWC input patches into a (N*OH*OW) x (KH*KW*C) row-major matrix.
// Out-of-bounds taps read as zero.
template <class S>
void im2col(const Array<S>& x, const ConvDims& d, MatrixRM<S>& cols) {
  cols.resize(d.rows(), d.cols());
  for (Dim n = 0; n < d.n; ++n) {
    for (Dim oy = 0; oy < d.oh; ++oy) {
      for (Dim ox = 0; ox < d.ow; ++ox) {
        S* row = cols.data() + ((n * d.oh + oy) * d.ow + ox) * d.cols();
        for (Dim ky = 0; ky < d.kh; ++ky) {
          const Dim iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) {
            std::fill(row, row + d.kw * d.c, S(0));
            row += d.kw * d.c;
            continue;
          }
          for (Dim kx = 0; kx < d.kw; ++kx) {
            const Dim ix = ox * d.stride + kx - d.pad;
            if (ix < 0 || ix >= d.w) {
              std::fill(row, row + d.c, S(0));
            } else {
              const S* src = x.data() + ((n * d.h + iy) * d.w + ix) * d.c;
              std::copy(src, src + d.c, row);
            }
            row += d.c;
          }
        }
      }
    }
  }
}

// Scatter-add of an unfolded gradient back onto the input layout.
template <class S>
void col2im_add(const MatrixRM<S>& dcols, const ConvDims& d, Array<S>& dx) {
  for (Dim n = 0; n < d.n; ++n) {
    for (Dim oy = 0; oy < d.oh; ++oy) {
      for (Dim ox = 0; ox < d.ow; ++ox) {
        const S* row = dcols.data() + ((n * d.oh + oy) * d.ow + ox) * d.cols();
        for (Dim ky = 0; ky < d.kh; ++ky) {
          const Dim iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) {
            row += d.kw * d.c;
            continue;
          }
          for (Dim kx = 0; kx < d.kw; ++kx) {
            const Dim ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.w) {
              S* dst = dx.data() + ((n * d.h + iy) * d.w + ix) * d.c;
              for (Dim c = 0; c < d.c; ++c) dst[c] += row[c];
            }
            row += d.c;
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, NHWC input {N,H,W,C}, kernel {KH,KW,C,F}, bias {F}.
// Default padding keeps the spatial size at stride 1 for odd kernels.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Dim stride = 1,
                 Dim pad = -1) {
  require(x.ndim() == 4, "conv2d: input must be {N,H,W,C}, got " + shape_str(x.shape()));
  require(w.ndim() == 4, "conv2d: kernel must be {KH,KW,C,F}, got " + shape_str(w.shape()));
  require(b.ndim() == 1 && b.dim(0) == w.dim(3),
          "conv2d: bias shape " + shape_str(b.shape()) + " does not match kernel " +
              shape_str(w.shape()));
  require(x.dim(3) == w.dim(2), "conv2d: input channels " + std::to_string(x.dim(3)) +
                                    " != kernel channels " + std::to_string(w.dim(2)) + " (x=" +
                                    shape_str(x.shape()) + ", w=" + shape_str(w.shape()) + ")");
  require(stride >= 1, "conv2d: stride must be >= 1");
  if (pad < 0) pad = (w.dim(0) - 1) / 2;

  detail::ConvDims d;
  d.n = x.dim(0), d.h = x.dim(1), d.w = x.dim(2), d.c = x.dim(3);
  d.kh = w.dim(0), d.kw = w.dim(1), d.f = w.dim(3);
  d.stride = stride, d.pad = pad;
  require(d.h + 2 * pad >= d.kh && d.w + 2 * pad >= d.kw,
          "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
              shape_str(x.shape()));
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;

  const bool is_1x1 = d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0;
  Array<S> v(d.rows() * d.f);
  {
    Eigen::Map<MatrixRM<S>> Y(v.data(), d.rows(), d.f);
    Eigen::Map<const MatrixRM<S>> W(w.value().data(), d.cols(), d.f);
    if (is_1x1) {
      Eigen::Map<const MatrixRM<S>> X(x.value().data(), d.rows(), d.c);
      Y.noalias() = X * W;
    } else {
      MatrixRM<S> cols;
      detail::im2col(x.value(), d, cols);
      Y.noalias() = cols * W;
    }
    Y.rowwise() +=
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), d.f);
  }

  return detail::make_op<S>(
      "conv2d", {d.n, d.oh, d.ow, d.f}, std::move(v), {x, w, b},
      [d, is_1x1](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        Eigen::Map<const MatrixRM<S>> G(nd.grad.data(), d.rows(), d.f);
        Eigen::Map<const MatrixRM<S>> W(pw.value.data(), d.cols(), d.f);

        if (pb.requires_grad)
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb.grad_buffer().data(), d.f) +=
              G.colwise().sum();

        if (is_1x1) {
          Eigen::Map<const MatrixRM<S>> X(px.value.data(), d.rows(), d.c);
          if (pw.requires_grad)
            detail::grad_matrix(pw, d.cols(), d.f).noalias() += X.transpose() * G;
          if (px.requires_grad)
            detail::grad_matrix(px, d.rows(), d.c).noalias() += G * W.transpose();
          return;
        }

        // Patches are cheap to rebuild relative to the GEMMs, so the forward
        // does not keep them alive.
        if (pw.requires_grad) {
          MatrixRM<S> cols;
          detail::im2col(px.value, d, cols);
          detail::grad_matrix(pw, d.cols(), d.f).noalias() += cols.transpose() * G;
        }
        if (px.requires_grad) {
          MatrixRM<S> dcols(d.rows(), d.cols());
          dcols.noalias() = G * W.transpose();
          detail::col2im_add(dcols, d, px.grad_buffer());
        }
      });
}

template <class S>
Tensor<S> maxpool2d(const Tensor<S>& x, Dim k = 2, Dim stride = -1) {
  require(x.ndim() == 4, "maxpool2d: input must be {N,H,W,C}, got " + shape_str(x.shape()));
  if (stride < 0) stride = k;
  const Dim n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  require(h >= k && w >= k, "maxpool2d: window " + std::to_string(k) + " exceeds input " +
                                shape_str(x.shape()));
  const Dim oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;

  Array<S> v(n * oh * ow * c);
  auto argmax = std::make_shared<std::vector<Dim>>(static_cast<std::size_t>(n * oh * ow * c));
  const Array<S>& xv = x.value();
  for (Dim ni = 0; ni < n; ++ni)
    for (Dim oy = 0; oy < oh; ++oy)
      for (Dim ox = 0; ox < ow; ++ox)
        for (Dim ci = 0; ci < c; ++ci) {
          S best;
          Dim best_idx = -1;
          for (Dim ky = 0; ky < k; ++ky)
            for (Dim kx = 0; kx < k; ++kx) {
              const Dim idx =
                  ((ni * h + oy * stride + ky) * w + ox * stride + kx) * c + ci;
              if (best_idx < 0 || xv[idx] > best) {
                best = xv[idx];
                best_idx = idx;
              }
            }
          const Dim out_idx = ((ni * oh + oy) * ow + ox) * c + ci;
          v[out_idx] = best;
          (*argmax)[static_cast<std::size_t>(out_idx)] = best_idx;
        }

  return detail::make_op<S>("maxpool2d", {n, oh, ow, c}, std::move(v), {x},
                            [argmax](TensorNode<S>& nd) {
                              if (!nd.parents[0]->requires_grad) return;
                              Array<S>& dx = nd.parents[0]->grad_buffer();
                              for (Dim i = 0; i < nd.size(); ++i)
                                dx[(*argmax)[static_cast<std::size_t>(i)]] += nd.grad[i];
                            });
}

template <class S>
Tensor<S> avgpool2d(const Tensor<S>& x, Dim k = 2, Dim stride = -1) {
  require(x.ndim() == 4, "avgpool2d: input must be {N,H,W,C}, got " + shape_str(x.shape()));
  if (stride < 0) stride = k;
  const Dim n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  require(h >= k && w >= k, "avgpool2d: window " + std::to_string(k) + " exceeds input " +
                                shape_str(x.shape()));
  const Dim oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const S inv = S(1) / S(k * k);

  Array<S> v = Array<S>::Zero(n * oh * ow * c);
  const Array<S>& xv = x.value();
  for (Dim ni = 0; ni < n; ++ni)
    for (Dim oy = 0; oy < oh; ++oy)
      for (Dim ox = 0; ox < ow; ++ox) {
        const Dim out_base = ((ni * oh + oy) * ow + ox) * c;
        for (Dim ky = 0; ky < k; ++ky)
          for (Dim kx = 0; kx < k; ++kx) {
            const Dim in_base = ((ni * h + oy * stride + ky) * w + ox * stride + kx) * c;
            for (Dim ci = 0; ci < c; ++ci) v[out_base + ci] += xv[in_base + ci];
          }
      }
  v *= inv;

  return detail::make_op<S>(
      "avgpool2d", {n, oh, ow, c}, std::move(v), {x}, [n, h, w, c, oh, ow, k, stride, inv](TensorNode<S>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Array<S>& dx = nd.parents[0]->grad_buffer();
        for (Dim ni = 0; ni < n; ++ni)
          for (Dim oy = 0; oy < oh; ++oy)
            for (Dim ox = 0; ox < ow; ++ox) {
              const Dim out_base = ((ni * oh + oy) * ow + ox) * c;
              for (Dim ky = 0; ky < k; ++ky)
                for (Dim kx = 0; kx < k; ++kx) {
                  const Dim in_base =
                      ((ni * h + oy * stride + ky) * w + ox * stride + kx) * c;
                  for (Dim ci = 0; ci < c; ++ci) dx[in_base + ci] += nd.grad[out_base + ci] * inv;
                }
            }
      });
}

// Per-position normalization over the channel (last) axis with learned
// per-channel gain/shift. Every leading dimension is treated as a row.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  require(x.ndim() >= 1, "layer_norm: scalar input");
  const Dim c = x.dim(x.ndim() - 1);
  require(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 && beta.dim(0) == c,
          "layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match channel dim " + std::to_string(c) + " of " + shape_str(x.shape()));
  const Dim rows = x.size() / c;

  Array<S> v(x.size());
  auto inv_std = std::make_shared<Array<S>>(rows);
  auto mu = std::make_shared<Array<S>>(rows);
  const Array<S>& xv = x.value();
  const Array<S>& g = gamma.value();
  const Array<S>& be = beta.value();
  for (Dim r = 0; r < rows; ++r) {
    Eigen::Map<const Array<S>> row(xv.data() + r * c, c);
    const S m = row.mean();
    const S var = (row - m).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*mu)[r] = m;
    (*inv_std)[r] = is;
    Eigen::Map<Array<S>>(v.data() + r * c, c) = (row - m) * is * g + be;
  }

  return detail::make_op<S>(
      "layer_norm", x.shape(), std::move(v), {x, gamma, beta},
      [rows, c, mu, inv_std](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const Array<S>& xv = px.value;
        const Array<S>& gv = pg.value;
        for (Dim r = 0; r < rows; ++r) {
          Eigen::Map<const Array<S>> row(xv.data() + r * c, c);
          Eigen::Map<const Array<S>> go(nd.grad.data() + r * c, c);
          const S is = (*inv_std)[r];
          Array<S> xc = row - (*mu)[r];
          Array<S> xhat = xc * is;
          if (pg.requires_grad)
            Eigen::Map<Array<S>>(pg.grad_buffer().data(), c) += go * xhat;
          if (pb.requires_grad) Eigen::Map<Array<S>>(pb.grad_buffer().data(), c) += go;
          if (px.requires_grad) {
            Array<S> dxhat = go * gv;
            const S dvar = (dxhat * xc).sum() * S(-0.5) * is * is * is;
            const S dmu = -is * dxhat.sum();
            Eigen::Map<Array<S>>(px.grad_buffer().data() + r * c, c) +=
                dxhat * is + xc * (S(2) * dvar / S(c)) + dmu / S(c);
          }
        }
      });
}

// Mean binary cross-entropy over all elements, computed from logits.
template <class S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& labels) {
  detail::check_same_shape("bce_with_logits", logits, labels);
  require(!labels.requires_grad(), "bce_with_logits: labels must not require grad");
  const Array<S>& z = logits.value();
  const Array<S>& y = labels.value();
  // max(z,0) - z*y + log1p(exp(-|z|)) is exact and overflow-free.
  Array<S> per = z.max(S(0)) - z * y + (-z.abs()).exp().log1p();
  Array<S> v(1);
  v[0] = per.mean();
  const S inv_n = S(1) / S(z.size());
  return detail::make_op<S>("bce_with_logits", {1}, std::move(v), {logits, labels},
                            [inv_n](TensorNode<S>& nd) {
                              auto& pz = *nd.parents[0];
                              if (!pz.requires_grad) return;
                              const Array<S>& z = pz.value;
                              const Array<S>& y = nd.parents[1]->value;
                              Array<S> sig = ((z * S(0.5)).tanh() + S(1)) * S(0.5);
                              pz.grad_buffer() += nd.grad[0] * inv_n * (sig - y);
                            });
}

}  // namespace m3
