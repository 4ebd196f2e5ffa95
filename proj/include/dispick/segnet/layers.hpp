#pragma once

// Forward/backward kernels for the segmentation network.  Images are HWC
// tensors; convolution kernels are [kh, kw, Cin, Cout].  Convolutions run
// as im2col followed by one GEMM (Eigen, single-threaded, so results are
// reproducible bit for bit).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dispick::segnet {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw StructuralError(what);
}

template <class T>
void check_conv_shapes(const Tensor<T>& in, const Tensor<T>& k, const Tensor<T>& b, const char* op) {
  require(in.rank() == 3, std::string(op) + ": input must be [H,W,C], got " + shape_str(in.shape()));
  require(k.rank() == 4 && k.dim(0) == k.dim(1) && k.dim(0) % 2 == 1,
          std::string(op) + ": kernel must be [k,k,Cin,Cout] with odd k, got " + shape_str(k.shape()));
  require(k.dim(2) == in.dim(2), std::string(op) + ": kernel Cin " + std::to_string(k.dim(2)) +
                                     " does not match input channels " + std::to_string(in.dim(2)));
  require(b.rank() == 1 && b.dim(0) == k.dim(3), std::string(op) + ": bias must be [Cout]");
}

// cols[(h*W + w), ((kh*k + kw)*C + c)] = in[h+kh-p, w+kw-p, c] (zero outside)
template <class T>
void im2col(const Tensor<T>& in, std::size_t k, AlignedVector<T>& cols) {
  const std::size_t H = in.dim(0), W = in.dim(1), C = in.dim(2);
  const auto p = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t row_len = k * k * C;
  cols.assign(H * W * row_len, T{0});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      T* dst = cols.data() + (h * W + w) * row_len;
      for (std::size_t kh = 0; kh < k; ++kh) {
        const auto y = static_cast<std::ptrdiff_t>(h + kh) - p;
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kw = 0; kw < k; ++kw) {
          const auto x = static_cast<std::ptrdiff_t>(w + kw) - p;
          if (x < 0 || x >= static_cast<std::ptrdiff_t>(W)) continue;
          const T* src = in.data() + (static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C;
          std::copy(src, src + C, dst + (kh * k + kw) * C);
        }
      }
    }
}

template <class T>
void col2im_add(const AlignedVector<T>& cols, std::size_t k, Tensor<T>& out) {
  const std::size_t H = out.dim(0), W = out.dim(1), C = out.dim(2);
  const auto p = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t row_len = k * k * C;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const T* src = cols.data() + (h * W + w) * row_len;
      for (std::size_t kh = 0; kh < k; ++kh) {
        const auto y = static_cast<std::ptrdiff_t>(h + kh) - p;
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kw = 0; kw < k; ++kw) {
          const auto x = static_cast<std::ptrdiff_t>(w + kw) - p;
          if (x < 0 || x >= static_cast<std::ptrdiff_t>(W)) continue;
          T* dst = out.data() + (static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C;
          const T* s = src + (kh * k + kw) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += s[c];
        }
      }
    }
}

}  // namespace detail

/// "Same" convolution (zero padding k/2, stride 1) plus bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>& bias) {
  detail::check_conv_shapes(in, kernel, bias, "conv2d");
  const std::size_t H = in.dim(0), W = in.dim(1), k = kernel.dim(0), Cin = in.dim(2), Cout = kernel.dim(3);
  Tensor<T> out({H, W, Cout});
  MatMap<T> o(out.data(), static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cout));
  ConstMatMap<T> kmat(kernel.data(), static_cast<Eigen::Index>(k * k * Cin), static_cast<Eigen::Index>(Cout));
  if (k == 1) {
    ConstMatMap<T> x(in.data(), static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cin));
    o.noalias() = x * kmat;
  } else {
    AlignedVector<T> cols;
    detail::im2col(in, k, cols);
    ConstMatMap<T> x(cols.data(), static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(k * k * Cin));
    o.noalias() = x * kmat;
  }
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), static_cast<Eigen::Index>(Cout));
  o.rowwise() += b;
  return out;
}

/// Accumulates kernel/bias gradients into `dkernel`/`dbias` and, when
/// `din` is non-null, writes the input gradient.
template <class T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>& dout, Tensor<T>* din,
                     Tensor<T>& dkernel, Tensor<T>& dbias) {
  const std::size_t H = in.dim(0), W = in.dim(1), k = kernel.dim(0), Cin = in.dim(2), Cout = kernel.dim(3);
  detail::require(dout.rank() == 3 && dout.dim(0) == H && dout.dim(1) == W && dout.dim(2) == Cout,
                  "conv2d_backward: output gradient shape " + shape_str(dout.shape()));
  const auto hw = static_cast<Eigen::Index>(H * W);
  const auto kc = static_cast<Eigen::Index>(k * k * Cin);
  ConstMatMap<T> g(dout.data(), hw, static_cast<Eigen::Index>(Cout));
  ConstMatMap<T> kmat(kernel.data(), kc, static_cast<Eigen::Index>(Cout));
  MatMap<T> dk(dkernel.data(), kc, static_cast<Eigen::Index>(Cout));
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(dbias.data(), static_cast<Eigen::Index>(Cout));
  db += g.colwise().sum();
  if (k == 1) {
    ConstMatMap<T> x(in.data(), hw, kc);
    dk.noalias() += x.transpose() * g;
    if (din) {
      *din = Tensor<T>(in.shape());
      MatMap<T> dx(din->data(), hw, kc);
      dx.noalias() = g * kmat.transpose();
    }
    return;
  }
  AlignedVector<T> cols;
  detail::im2col(in, k, cols);
  ConstMatMap<T> x(cols.data(), hw, kc);
  dk.noalias() += x.transpose() * g;
  if (din) {
    AlignedVector<T> dcols(cols.size());
    MatMap<T> dc(dcols.data(), hw, kc);
    dc.noalias() = g * kmat.transpose();
    *din = Tensor<T>(in.shape());
    detail::col2im_add(dcols, k, *din);
  }
}

/// 2x2 non-overlapping max pooling.  `argmax` records, per output value,
/// the flat input index that won (first in scan order on ties).
template <class T>
Tensor<T> maxpool2(const Tensor<T>& in, std::vector<std::uint32_t>* argmax = nullptr) {
  detail::require(in.rank() == 3, "maxpool2: input must be [H,W,C]");
  const std::size_t H = in.dim(0), W = in.dim(1), C = in.dim(2);
  detail::require(H % 2 == 0 && W % 2 == 0, "maxpool2: spatial dims must be even, got " + shape_str(in.shape()));
  Tensor<T> out({H / 2, W / 2, C});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t h = 0; h < H / 2; ++h)
    for (std::size_t w = 0; w < W / 2; ++w)
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t best = ((2 * h) * W + 2 * w) * C + c;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * h + dy) * W + 2 * w + dx) * C + c;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (h * (W / 2) + w) * C + c;
        out[o] = in[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  return out;
}

template <class T>
Tensor<T> maxpool2_backward(const Tensor<T>& dout, const std::vector<std::uint32_t>& argmax,
                            const typename Tensor<T>::Shape& in_shape) {
  detail::require(argmax.size() == dout.size(), "maxpool2_backward: argmax/gradient size mismatch");
  Tensor<T> din(in_shape);
  for (std::size_t i = 0; i < dout.size(); ++i) din[argmax[i]] += dout[i];
  return din;
}

/// Stride-2 transposed convolution with a [2,2,Cin,Cout] kernel: every
/// input pixel scatters one 2x2 output patch.
template <class T>
Tensor<T> transpose_conv2(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>& bias) {
  detail::require(in.rank() == 3, "transpose_conv2: input must be [H,W,C]");
  detail::require(kernel.rank() == 4 && kernel.dim(0) == 2 && kernel.dim(1) == 2 && kernel.dim(2) == in.dim(2),
                  "transpose_conv2: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                      shape_str(in.shape()));
  detail::require(bias.rank() == 1 && bias.dim(0) == kernel.dim(3), "transpose_conv2: bias must be [Cout]");
  const std::size_t H = in.dim(0), W = in.dim(1), Cin = in.dim(2), Cout = kernel.dim(3);
  Tensor<T> out({2 * H, 2 * W, Cout});
  ConstMatMap<T> x(in.data(), static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cin));
  RowMat<T> y(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cout));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      ConstMatMap<T> k(kernel.data() + (a * 2 + b) * Cin * Cout, static_cast<Eigen::Index>(Cin),
                       static_cast<Eigen::Index>(Cout));
      y.noalias() = x * k;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          T* dst = out.data() + ((2 * h + a) * 2 * W + 2 * w + b) * Cout;
          const T* src = y.data() + (h * W + w) * Cout;
          for (std::size_t c = 0; c < Cout; ++c) dst[c] = src[c] + bias[c];
        }
    }
  return out;
}

template <class T>
void transpose_conv2_backward(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>& dout, Tensor<T>* din,
                              Tensor<T>& dkernel, Tensor<T>& dbias) {
  const std::size_t H = in.dim(0), W = in.dim(1), Cin = in.dim(2), Cout = kernel.dim(3);
  detail::require(dout.rank() == 3 && dout.dim(0) == 2 * H && dout.dim(1) == 2 * W && dout.dim(2) == Cout,
                  "transpose_conv2_backward: output gradient shape " + shape_str(dout.shape()));
  ConstMatMap<T> x(in.data(), static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cin));
  RowMat<T> g(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cout));
  RowMat<T> dx = RowMat<T>::Zero(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(Cin));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const T* src = dout.data() + ((2 * h + a) * 2 * W + 2 * w + b) * Cout;
          T* dst = g.data() + (h * W + w) * Cout;
          for (std::size_t c = 0; c < Cout; ++c) {
            dst[c] = src[c];
            dbias[c] += src[c];
          }
        }
      const std::size_t off = (a * 2 + b) * Cin * Cout;
      ConstMatMap<T> k(kernel.data() + off, static_cast<Eigen::Index>(Cin), static_cast<Eigen::Index>(Cout));
      MatMap<T> dk(dkernel.data() + off, static_cast<Eigen::Index>(Cin), static_cast<Eigen::Index>(Cout));
      dk.noalias() += x.transpose() * g;
      if (din) dx.noalias() += g * k.transpose();
    }
  if (din) {
    *din = Tensor<T>(in.shape());
    std::copy(dx.data(), dx.data() + dx.size(), din->data());
  }
}

template <class T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T{0} ? v : T{0};
}

/// Masks `grad` where the ReLU output was not positive.
template <class T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(out[i] > T{0})) grad[i] = T{0};
}

/// Channel concatenation [a | b] of two HWC tensors with equal H, W.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1),
                  "concat: spatial dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t HW = a.dim(0) * a.dim(1), ca = a.dim(2), cb = b.dim(2);
  Tensor<T> out({a.dim(0), a.dim(1), ca + cb});
  for (std::size_t i = 0; i < HW; ++i) {
    std::copy_n(a.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return out;
}

template <class T>
void split_channels(const Tensor<T>& g, std::size_t ca, Tensor<T>& ga, Tensor<T>& gb) {
  const std::size_t H = g.dim(0), W = g.dim(1), c = g.dim(2), cb = c - ca;
  ga = Tensor<T>({H, W, ca});
  gb = Tensor<T>({H, W, cb});
  for (std::size_t i = 0; i < H * W; ++i) {
    std::copy_n(g.data() + i * c, ca, ga.data() + i * ca);
    std::copy_n(g.data() + i * c + ca, cb, gb.data() + i * cb);
  }
}

template <class T>
struct SoftmaxCE {
  double loss = 0.0;
  Tensor<T> grad;   // d loss / d logits
  Tensor<T> probs;
};

/// Pixelwise softmax cross-entropy, averaged over pixels.  `target` holds
/// one class index per pixel in row-major order.
template <class T>
SoftmaxCE<T> softmax_ce(const Tensor<T>& logits, std::span<const std::uint8_t> target) {
  detail::require(logits.rank() == 3, "softmax_ce: logits must be [H,W,C]");
  const std::size_t P = logits.dim(0) * logits.dim(1), C = logits.dim(2);
  detail::require(target.size() == P, "softmax_ce: target has " + std::to_string(target.size()) +
                                          " pixels, logits have " + std::to_string(P));
  SoftmaxCE<T> r{0.0, Tensor<T>(logits.shape()), Tensor<T>(logits.shape())};
  const double inv = 1.0 / static_cast<double>(P);
  double total = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    const T* z = logits.data() + i * C;
    T* p = r.probs.data() + i * C;
    T* g = r.grad.data() + i * C;
    detail::require(target[i] < C, "softmax_ce: target class out of range");
    const double zmax = *std::max_element(z, z + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[c]) - zmax);
    const double log_s = std::log(s);
    for (std::size_t c = 0; c < C; ++c) {
      const double lp = static_cast<double>(z[c]) - zmax - log_s;
      p[c] = static_cast<T>(std::exp(lp));
      g[c] = static_cast<T>((std::exp(lp) - (c == target[i] ? 1.0 : 0.0)) * inv);
    }
    total -= static_cast<double>(z[target[i]]) - zmax - log_s;
  }
  r.loss = total * inv;
  return r;
}

}  // namespace dispick::segnet
