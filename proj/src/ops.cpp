#include "maskjepa/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace mjepa::ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapR<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapR<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
CMapR<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapR<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_rank(const char* op, const Var<T>& x, std::size_t rank) {
  if (x.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw_shape_error(op, a.shape(), b.shape());
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.rank() == 0 ? 1 : t.shape().back();
}

// Accumulates src into the gradient of node input i, if it wants one.
template <typename T>
Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* in = self.inputs[i].get();
  return (in && in->requires_grad) ? in : nullptr;
}

template <typename T>
void im2col(const T* img, std::size_t cin, std::size_t h, std::size_t w, int k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t cin, std::size_t h, std::size_t w, int k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* img) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same("add", a, b);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* in = grad_target(self, k)) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same("sub", a, b);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (auto* in = grad_target(self, 1)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same("mul", a, b);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* in = grad_target(self, 0)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (auto* in = grad_target(self, 1)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const std::size_t m = trans_a ? ac : ar, ka = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (ka != kb) throw_shape_error("matmul", a.shape(), b.shape());
  Tensor<T> out({m, n});
  {
    auto A = as_mat(a.value(), ar, ac);
    auto B = as_mat(b.value(), br, bc);
    auto C = as_mat(out, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    auto A = as_mat(self.inputs[0]->value, ar, ac);
    auto B = as_mat(self.inputs[1]->value, br, bc);
    auto G = as_mat(static_cast<const Tensor<T>&>(self.grad), m, n);
    if (auto* in = grad_target(self, 0)) {
      auto GA = as_mat(in->grad_buffer(), ar, ac);
      if (!trans_a) {
        if (trans_b) GA.noalias() += G * B;
        else GA.noalias() += G * B.transpose();
      } else {
        if (trans_b) GA.noalias() += B.transpose() * G.transpose();
        else GA.noalias() += B * G.transpose();
      }
    }
    if (auto* in = grad_target(self, 1)) {
      auto GB = as_mat(in->grad_buffer(), br, bc);
      if (!trans_b) {
        if (trans_a) GB.noalias() += A * G;
        else GB.noalias() += A.transpose() * G;
      } else {
        if (trans_a) GB.noalias() += G.transpose() * A.transpose();
        else GB.noalias() += G.transpose() * A;
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.dim(0), in_f = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in_f) throw_shape_error("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{out_f}) throw_shape_error("linear", weight.shape(), bias.shape());
  Tensor<T> out({n, out_f});
  {
    auto X = as_mat(x.value(), n, in_f);
    auto W = as_mat(weight.value(), out_f, in_f);
    auto Y = as_mat(out, n, out_f);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.value().ptr(), static_cast<Eigen::Index>(out_f));
      Y.rowwise() += b;
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    auto G = as_mat(static_cast<const Tensor<T>&>(self.grad), n, out_f);
    if (auto* in = grad_target(self, 0)) {
      auto W = as_mat(self.inputs[1]->value, out_f, in_f);
      as_mat(in->grad_buffer(), n, in_f).noalias() += G * W;
    }
    if (auto* in = grad_target(self, 1)) {
      auto X = as_mat(self.inputs[0]->value, n, in_f);
      as_mat(in->grad_buffer(), out_f, in_f).noalias() += G.transpose() * X;
    }
    if (self.inputs.size() > 2) {
      if (auto* in = grad_target(self, 2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(in->grad_buffer().ptr(), static_cast<Eigen::Index>(out_f));
        gb += G.colwise().sum();
      }
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const std::size_t cols = last_dim(x.value());
  const std::size_t rows = cols ? x.numel() / cols : 0;
  Tensor<T> out(x.shape());
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = src + r * cols;
    T* d = dst + r * cols;
    T mx = *std::max_element(s, s + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      d[c] = std::exp(s[c] - mx);
      total += d[c];
    }
    for (std::size_t c = 0; c < cols; ++c) d[c] /= total;
  }
  return make_result<T>(std::move(out), {x}, [rows, cols](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    auto& g = in->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.ptr() + r * cols;
      const T* gy = self.grad.ptr() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
      T* gx = g.ptr() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t cols = last_dim(x.value());
  const std::size_t rows = cols ? x.numel() / cols : 0;
  if (gamma.defined() && gamma.shape() != Shape{cols}) throw_shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.defined() && beta.shape() != Shape{cols}) throw_shape_error("layer_norm", x.shape(), beta.shape());

  auto row_stats = [cols, eps](const T* s) {
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += s[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (s[c] - mu) * (s[c] - mu);
    var /= static_cast<T>(cols);
    return std::pair<T, T>{mu, T(1) / std::sqrt(var + eps)};
  };

  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = x.value().ptr() + r * cols;
    T* d = out.ptr() + r * cols;
    auto [mu, inv] = row_stats(s);
    for (std::size_t c = 0; c < cols; ++c) {
      T v = (s[c] - mu) * inv;
      if (gamma.defined()) v *= gamma.value()[c];
      if (beta.defined()) v += beta.value()[c];
      d[c] = v;
    }
  }
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  std::vector<Var<T>> inputs{x};
  if (has_gamma) inputs.push_back(gamma);
  if (has_beta) inputs.push_back(beta);
  return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const std::size_t gi = 1, bi = has_gamma ? 2 : 1;
    Node<T>* gx_node = grad_target(self, 0);
    Node<T>* gg_node = has_gamma ? grad_target(self, gi) : nullptr;
    Node<T>* gb_node = has_beta ? grad_target(self, bi) : nullptr;
    const T* gamma_v = has_gamma ? self.inputs[gi]->value.ptr() : nullptr;
    AlignedVector<T> xhat(cols), gxhat(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* s = self.inputs[0]->value.ptr() + r * cols;
      const T* gy = self.grad.ptr() + r * cols;
      auto [mu, inv] = row_stats(s);
      T mean_g = 0, mean_gx = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[c] = (s[c] - mu) * inv;
        gxhat[c] = gamma_v ? gy[c] * gamma_v[c] : gy[c];
        mean_g += gxhat[c];
        mean_gx += gxhat[c] * xhat[c];
      }
      mean_g /= static_cast<T>(cols);
      mean_gx /= static_cast<T>(cols);
      if (gx_node) {
        T* gx = gx_node->grad_buffer().ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gx[c] += inv * (gxhat[c] - mean_g - xhat[c] * mean_gx);
      }
      if (gg_node) {
        T* gg = gg_node->grad_buffer().ptr();
        for (std::size_t c = 0; c < cols; ++c) gg[c] += gy[c] * xhat[c];
      }
      if (gb_node) {
        T* gb = gb_node->grad_buffer().ptr();
        for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[c];
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x.value()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T v = in->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(x.value()[i], T(0));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (in->value[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != weight.dim(2)) throw_shape_error("conv2d", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{cout}) throw_shape_error("conv2d", weight.shape(), bias.shape());
  if (stride < 1 || padding < 0 || static_cast<long>(h) + 2 * padding < k || static_cast<long>(w) + 2 * padding < k) {
    throw_shape_error("conv2d", x.shape(), weight.shape());
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t kdim = cin * k * k, npix = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  Tensor<T> out({batch, cout, ho, wo});
  AlignedVector<T> cols(pointwise ? 0 : kdim * npix);
  auto W = as_mat(weight.value(), cout, kdim);
  for (std::size_t n = 0; n < batch; ++n) {
    const T* img = x.value().ptr() + n * cin * h * w;
    const T* colp = img;
    if (!pointwise) {
      im2col(img, cin, h, w, k, stride, padding, ho, wo, cols.data());
      colp = cols.data();
    }
    CMapR<T> C(colp, static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
    MapR<T> Y(out.ptr() + n * cout * npix, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(npix));
    Y.noalias() = W * C;
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.value().ptr(), static_cast<Eigen::Index>(cout));
      Y.colwise() += b;
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    Node<T>* gx_node = grad_target(self, 0);
    Node<T>* gw_node = grad_target(self, 1);
    Node<T>* gb_node = self.inputs.size() > 2 ? grad_target(self, 2) : nullptr;
    auto Wm = as_mat(self.inputs[1]->value, cout, kdim);
    AlignedVector<T> cols_buf(pointwise ? 0 : kdim * npix);
    AlignedVector<T> gcols(pointwise ? 0 : kdim * npix);
    for (std::size_t n = 0; n < batch; ++n) {
      CMapR<T> G(self.grad.ptr() + n * cout * npix, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(npix));
      const T* img = self.inputs[0]->value.ptr() + n * cin * h * w;
      if (gw_node) {
        const T* colp = img;
        if (!pointwise) {
          im2col(img, cin, h, w, k, stride, padding, ho, wo, cols_buf.data());
          colp = cols_buf.data();
        }
        CMapR<T> C(colp, static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
        as_mat(gw_node->grad_buffer(), cout, kdim).noalias() += G * C.transpose();
      }
      if (gb_node) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(gb_node->grad_buffer().ptr(), static_cast<Eigen::Index>(cout));
        gb += G.rowwise().sum();
      }
      if (gx_node) {
        T* gimg = gx_node->grad_buffer().ptr() + n * cin * h * w;
        if (pointwise) {
          MapR<T> GX(gimg, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(npix));
          GX.noalias() += Wm.transpose() * G;
        } else {
          MapR<T> GC(gcols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
          GC.noalias() = Wm.transpose() * G;
          col2im(gcols.data(), cin, h, w, k, stride, padding, ho, wo, gimg);
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank("upsample_nearest2x", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = x.value().ptr() + p * h * w;
    T* d = out.ptr() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) d[i * 2 * w + j] = s[(i / 2) * w + j / 2];
    }
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    for (std::size_t p = 0; p < planes; ++p) {
      T* g = in->grad_buffer().ptr() + p * h * w;
      const T* gy = self.grad.ptr() + p * 4 * h * w;
      for (std::size_t i = 0; i < 2 * h; ++i) {
        for (std::size_t j = 0; j < 2 * w; ++j) g[(i / 2) * w + j / 2] += gy[i * 2 * w + j];
      }
    }
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, int factor) {
  require_rank("avg_pool", x, 4);
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (factor < 1 || h % f || w % f) {
    throw ShapeError("avg_pool: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  }
  const std::size_t ho = h / f, wo = w / f;
  const T inv = T(1) / static_cast<T>(f * f);
  Tensor<T> out({x.dim(0), x.dim(1), ho, wo});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = x.value().ptr() + p * h * w;
    T* d = out.ptr() + p * ho * wo;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) d[(i / f) * wo + j / f] += s[i * w + j];
    }
    for (std::size_t i = 0; i < ho * wo; ++i) d[i] *= inv;
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    for (std::size_t p = 0; p < planes; ++p) {
      T* g = in->grad_buffer().ptr() + p * h * w;
      const T* gy = self.grad.ptr() + p * ho * wo;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += gy[(i / f) * wo + j / f] * inv;
      }
    }
  });
}

template <typename T>
Var<T> mask_substitute(const Var<T>& x, const std::vector<std::uint8_t>& row_mask, const Var<T>& token) {
  require_rank("mask_substitute", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (row_mask.size() != rows) throw_shape_error("mask_substitute", x.shape(), Shape{row_mask.size()});
  if (token.shape() != Shape{cols}) throw_shape_error("mask_substitute", x.shape(), token.shape());
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_mask[r]) std::copy_n(token.value().ptr(), cols, out.ptr() + r * cols);
  }
  return make_result<T>(std::move(out), {x, token}, [row_mask, rows, cols](Node<T>& self) {
    Node<T>* gx = grad_target(self, 0);
    Node<T>* gt = grad_target(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gy = self.grad.ptr() + r * cols;
      if (row_mask[r]) {
        if (gt) {
          T* g = gt->grad_buffer().ptr();
          for (std::size_t c = 0; c < cols; ++c) g[c] += gy[c];
        }
      } else if (gx) {
        T* g = gx->grad_buffer().ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) g[c] += gy[c];
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  return make_result<T>(Tensor<T>({1}, {total}), {x}, [](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    const T g0 = self.grad[0];
    for (auto& g : in->grad_buffer().storage()) g += g0;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  require_same("mse", pred, target);
  const std::size_t n = pred.numel();
  if (n == 0) throw ShapeError("mse: empty tensor");
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target.value()[i];
    total += d * d;
  }
  return make_result<T>(Tensor<T>({1}, {total / static_cast<T>(n)}), {pred, target}, [n](Node<T>& self) {
    const T coef = T(2) * self.grad[0] / static_cast<T>(n);
    const auto& p = self.inputs[0]->value;
    const auto& t = self.inputs[1]->value;
    Node<T>* gp = grad_target(self, 0);
    Node<T>* gt = grad_target(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T g = coef * (p[i] - t[i]);
      if (gp) gp->grad_buffer()[i] += g;
      if (gt) gt->grad_buffer()[i] -= g;
    }
  });
}

template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Var<T>& target, const std::vector<std::uint8_t>& row_mask) {
  require_same("masked_mse", pred, target);
  require_rank("masked_mse", pred, 2);
  const std::size_t rows = pred.dim(0), cols = pred.dim(1);
  if (row_mask.size() != rows) throw_shape_error("masked_mse", pred.shape(), Shape{row_mask.size()});
  std::size_t selected = 0;
  for (auto m : row_mask) selected += m ? 1 : 0;
  if (selected == 0) throw std::invalid_argument("masked_mse: no masked cells, loss undefined");
  const T count = static_cast<T>(selected * cols);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = pred.value()[r * cols + c] - target.value()[r * cols + c];
      total += d * d;
    }
  }
  return make_result<T>(Tensor<T>({1}, {total / count}), {pred, target}, [=](Node<T>& self) {
    const T coef = T(2) * self.grad[0] / count;
    const auto& p = self.inputs[0]->value;
    const auto& t = self.inputs[1]->value;
    Node<T>* gp = grad_target(self, 0);
    Node<T>* gt = grad_target(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!row_mask[r]) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const T g = coef * (p[i] - t[i]);
        if (gp) gp->grad_buffer()[i] += g;
        if (gt) gt->grad_buffer()[i] -= g;
      }
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (labels.size() != rows) throw_shape_error("softmax_cross_entropy", logits.shape(), Shape{labels.size()});
  Tensor<T> probs(logits.shape());
  T total = 0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = logits.value().ptr() + r * k;
    T* p = probs.ptr() + r * k;
    const T mx = *std::max_element(s, s + k);
    T z = 0;
    for (std::size_t c = 0; c < k; ++c) {
      p[c] = std::exp(s[c] - mx);
      z += p[c];
    }
    for (std::size_t c = 0; c < k; ++c) p[c] /= z;
    const int lbl = labels[r];
    if (lbl < 0) continue;
    if (static_cast<std::size_t>(lbl) >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
    total += std::log(z) + mx - s[lbl];
    ++valid;
  }
  const T denom = static_cast<T>(std::max<std::size_t>(valid, 1));
  return make_result<T>(Tensor<T>({1}, {total / denom}), {logits},
                        [probs = std::move(probs), labels, rows, k, denom](Node<T>& self) {
                          auto* in = grad_target(self, 0);
                          if (!in) return;
                          const T coef = self.grad[0] / denom;
                          T* g = in->grad_buffer().ptr();
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (labels[r] < 0) continue;
                            for (std::size_t c = 0; c < k; ++c) {
                              const T target = static_cast<int>(c) == labels[r] ? T(1) : T(0);
                              g[r * k + c] += coef * (probs[r * k + c] - target);
                            }
                          }
                        });
}

template <typename T>
Var<T> image_tokens(const Var<T>& x, std::size_t n) {
  require_rank("image_tokens", x, 4);
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (n >= x.dim(0)) throw std::out_of_range("image_tokens: batch index out of range");
  Tensor<T> out({hw, c});
  const T* s = x.value().ptr() + n * c * hw;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = s[ch * hw + p];
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    T* g = in->grad_buffer().ptr() + n * c * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += self.grad[p * c + ch];
    }
  });
}

template <typename T>
Var<T> tokens_to_image(const Var<T>& tokens, std::size_t h, std::size_t w) {
  require_rank("tokens_to_image", tokens, 2);
  const std::size_t hw = tokens.dim(0), c = tokens.dim(1);
  if (hw != h * w) throw_shape_error("tokens_to_image", tokens.shape(), Shape{h, w});
  Tensor<T> out({1, c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = tokens.value()[p * c + ch];
  }
  return make_result<T>(std::move(out), {tokens}, [=](Node<T>& self) {
    auto* in = grad_target(self, 0);
    if (!in) return;
    T* g = in->grad_buffer().ptr();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) g[p * c + ch] += self.grad[ch * hw + p];
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, bool scaled,
                 Tensor<T>* weights_out) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  require_same("attention", k, v);
  const std::size_t n = q.dim(0), m = k.dim(0), c = q.dim(1);
  if (k.dim(1) != c) throw_shape_error("attention", q.shape(), k.shape());
  if (heads < 1 || c % static_cast<std::size_t>(heads)) {
    throw ShapeError("attention: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  }
  const auto nh = static_cast<std::size_t>(heads);
  const std::size_t d = c / nh;
  const T factor = scaled ? T(1) / std::sqrt(static_cast<T>(d)) : T(1);
  const auto N = static_cast<Eigen::Index>(n), Mi = static_cast<Eigen::Index>(m), D = static_cast<Eigen::Index>(d);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(c));

  Tensor<T> probs({nh, n, m});
  Tensor<T> out({n, c});
  for (std::size_t h = 0; h < nh; ++h) {
    CStridedMap<T> Qh(q.value().ptr() + h * d, N, D, stride);
    CStridedMap<T> Kh(k.value().ptr() + h * d, Mi, D, stride);
    CStridedMap<T> Vh(v.value().ptr() + h * d, Mi, D, stride);
    MapR<T> P(probs.ptr() + h * n * m, N, Mi);
    P.noalias() = (Qh * Kh.transpose()) * factor;
    for (Eigen::Index r = 0; r < N; ++r) {
      const T mx = P.row(r).maxCoeff();
      P.row(r) = (P.row(r).array() - mx).exp();
      P.row(r) /= P.row(r).sum();
    }
    StridedMap<T> Oh(out.ptr() + h * d, N, D, stride);
    Oh.noalias() = P * Vh;
  }
  if (weights_out) *weights_out = probs;

  return make_result<T>(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node<T>& self) {
    const Eigen::OuterStride<> st(static_cast<Eigen::Index>(c));
    Node<T>* gq = grad_target(self, 0);
    Node<T>* gk = grad_target(self, 1);
    Node<T>* gv = grad_target(self, 2);
    MatR<T> gP(N, Mi);
    for (std::size_t h = 0; h < nh; ++h) {
      CStridedMap<T> Qh(self.inputs[0]->value.ptr() + h * d, N, D, st);
      CStridedMap<T> Kh(self.inputs[1]->value.ptr() + h * d, Mi, D, st);
      CStridedMap<T> Vh(self.inputs[2]->value.ptr() + h * d, Mi, D, st);
      CStridedMap<T> G(self.grad.ptr() + h * d, N, D, st);
      CMapR<T> P(probs.ptr() + h * n * m, N, Mi);
      if (gv) {
        StridedMap<T> GV(gv->grad_buffer().ptr() + h * d, Mi, D, st);
        GV.noalias() += P.transpose() * G;
      }
      if (!gq && !gk) continue;
      gP.noalias() = G * Vh.transpose();
      for (Eigen::Index r = 0; r < N; ++r) {
        const T dot = gP.row(r).dot(P.row(r));
        gP.row(r) = (P.row(r).array() * (gP.row(r).array() - dot)) * factor;
      }
      if (gq) {
        StridedMap<T> GQ(gq->grad_buffer().ptr() + h * d, N, D, st);
        GQ.noalias() += gP * Kh;
      }
      if (gk) {
        StridedMap<T> GK(gk->grad_buffer().ptr() + h * d, Mi, D, st);
        GK.noalias() += gP.transpose() * Qh;
      }
    }
  });
}

template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& row) {
  if (row.shape() == x.shape()) return add(x, row);
  require_rank("add_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (row.shape() != Shape{cols}) throw_shape_error("add_rows", x.shape(), row.shape());
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += row.value()[c];
  }
  return make_result<T>(std::move(out), {x, row}, [rows, cols](Node<T>& self) {
    if (auto* in = grad_target(self, 0)) {
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (auto* in = grad_target(self, 1)) {
      T* g = in->grad_buffer().ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
      }
    }
  });
}

#define MJEPA_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> scale(const Var<T>&, T);                                                               \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool, bool);                                      \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                   \
  template Var<T> softmax(const Var<T>&);                                                                \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                            \
  template Var<T> gelu(const Var<T>&);                                                                   \
  template Var<T> relu(const Var<T>&);                                                                   \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                         \
  template Var<T> upsample_nearest2x(const Var<T>&);                                                     \
  template Var<T> avg_pool(const Var<T>&, int);                                                          \
  template Var<T> mask_substitute(const Var<T>&, const std::vector<std::uint8_t>&, const Var<T>&);       \
  template Var<T> sum(const Var<T>&);                                                                    \
  template Var<T> mean(const Var<T>&);                                                                   \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> masked_mse(const Var<T>&, const Var<T>&, const std::vector<std::uint8_t>&);            \
  template Var<T> softmax_cross_entropy(const Var<T>&, const std::vector<int>&);                         \
  template Var<T> image_tokens(const Var<T>&, std::size_t);                                              \
  template Var<T> tokens_to_image(const Var<T>&, std::size_t, std::size_t);                              \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, bool, Tensor<T>*);         \
  template Var<T> add_rows(const Var<T>&, const Var<T>&);

MJEPA_INSTANTIATE_OPS(float)
MJEPA_INSTANTIATE_OPS(double)

}  // namespace mjepa::ops
