#include "rgrid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rgrid/error.hpp"

namespace rgrid::ops {

using detail::make_result;

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw ConfigError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const std::string& why) {
  throw ConfigError(std::string(op) + ": shape " + shape_str(a.shape()) + " " + why);
}

void accumulate(std::vector<double>* dst, std::span<const double> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a, b);
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t n = b.shape().back();
  if (b.shape()[b.rank() - 2] != k) shape_error("matmul", a, b);

  const bool shared_rhs = b.rank() == 2;
  std::size_t batch = 1;
  if (!shared_rhs) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_error("matmul", a, b);
    }
  }
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.shape()[i];

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* ap = A.data() + t * m * k;
    const double* bp = B.data() + (shared_rhs ? 0 : t * k * n);
    double* op = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ap[i * k + p];
        const double* brow = bp + p * n;
        double* orow = op + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }

  return make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                     [a, b, batch, m, k, n, shared_rhs](std::span<const double> g,
                                                         std::span<std::vector<double>* const> gp) {
                       auto A = a.data();
                       auto B = b.data();
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* ap = A.data() + t * m * k;
                         const double* bp = B.data() + (shared_rhs ? 0 : t * k * n);
                         const double* gt = g.data() + t * m * n;
                         if (gp[0]) {
                           double* ga = gp[0]->data() + t * m * k;
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               double acc = 0.0;
                               for (std::size_t j = 0; j < n; ++j) acc += gt[i * n + j] * bp[p * n + j];
                               ga[i * k + p] += acc;
                             }
                         }
                         if (gp[1]) {
                           double* gb = gp[1]->data() + (shared_rhs ? 0 : t * k * n);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               const double av = ap[i * k + p];
                               for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gt[i * n + j];
                             }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - bs.size())) {
    shape_error("add", a, b);
  }
  const std::size_t inner = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % inner];
  return make_result(as, std::move(out), "add", {a, b},
                     [inner](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       accumulate(gp[0], g);
                       if (gp[1]) {
                         auto& gb = *gp[1];
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a, b);
  std::vector<double> out(a.numel());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b},
                     [](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       accumulate(gp[0], g);
                       if (gp[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gp[1])[i] -= g[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  std::vector<double> out(a.numel());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b},
                     [a, b](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       auto A = a.data();
                       auto B = b.data();
                       if (gp[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += g[i] * B[i];
                       if (gp[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gp[1])[i] += g[i] * A[i];
                     });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {a},
                     [factor](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       if (gp[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += factor * g[i];
                     });
}

Tensor abs(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(A[i]);
  return make_result(a.shape(), std::move(out), "abs", {a},
                     [a](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       auto A = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double s = A[i] > 0.0 ? 1.0 : (A[i] < 0.0 ? -1.0 : 0.0);
                         (*gp[0])[i] += s * g[i];
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({1}, {total}, "sum", {a},
                     [](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       for (double& v : *gp[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) shape_error("mean", a, "has no axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<double> out(outer * inner, 0.0);
  auto A = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += A[(o * n + t) * inner + i];
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= inv;

  return make_result(std::move(out_shape), std::move(out), "mean", {a},
                     [outer, inner, n, inv](std::span<const double> g,
                                            std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       auto& ga = *gp[0];
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t t = 0; t < n; ++t)
                           for (std::size_t i = 0; i < inner; ++i)
                             ga[(o * n + t) * inner + i] += g[o * inner + i] * inv;
                     });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * A[i] * (1.0 + std::erf(A[i] * std::numbers::sqrt2 / 2.0));
  return make_result(a.shape(), std::move(out), "gelu", {a},
                     [a](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       auto A = a.data();
                       const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = A[i];
                         const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
                         const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                         (*gp[0])[i] += g[i] * (cdf + x * pdf);
                       }
                     });
}

Tensor softmax(const Tensor& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto A = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = A.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  std::vector<double> saved = out;
  return make_result(a.shape(), std::move(out), "softmax", {a},
                     [saved = std::move(saved), n, rows](std::span<const double> g,
                                                         std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = saved.data() + r * n;
                         const double* gr = g.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
                         for (std::size_t j = 0; j < n; ++j) (*gp[0])[r * n + j] += y[j] * (gr[j] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: epsilon must be positive");
  const std::size_t f = x.shape().back();
  if (gamma.shape() != Shape{f}) shape_error("layer_norm", x, gamma);
  if (beta.shape() != Shape{f}) shape_error("layer_norm", x, beta);
  const std::size_t rows = x.numel() / f;
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  auto X = x.data();
  auto G = gamma.data();
  auto Bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * f;
    double mu = 0.0;
    for (std::size_t j = 0; j < f; ++j) mu += xr[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(f);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * f + j] = h;
      out[r * f + j] = h * G[j] + Bt[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), f, rows](
          std::span<const double> g, std::span<std::vector<double>* const> gp) {
        auto G = gamma.data();
        std::vector<double> dh(f);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * f;
          const double* hr = xhat.data() + r * f;
          if (gp[1])
            for (std::size_t j = 0; j < f; ++j) (*gp[1])[j] += gr[j] * hr[j];
          if (gp[2])
            for (std::size_t j = 0; j < f; ++j) (*gp[2])[j] += gr[j];
          if (!gp[0]) continue;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < f; ++j) {
            dh[j] = gr[j] * G[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * hr[j];
          }
          mean_dh /= static_cast<double>(f);
          mean_dh_h /= static_cast<double>(f);
          for (std::size_t j = 0; j < f; ++j)
            (*gp[0])[r * f + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
        }
      });
}

namespace {

struct ConvGeom {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, sh, sw, ph, pw, oh, ow;
  std::size_t col_rows() const { return in_ch * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

// Writes one sample's patch matrix into rows of length `ld` starting at `cols`.
void im2col(const double* x, const ConvGeom& g, double* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ky) - static_cast<std::ptrdiff_t>(g.ph);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.sw + kx) - static_cast<std::ptrdiff_t>(g.pw);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, const ConvGeom& g, double* gx, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ky) - static_cast<std::ptrdiff_t>(g.ph);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.sw + kx) - static_cast<std::ptrdiff_t>(g.pw);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            gx[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

// The whole batch shares one patch matrix [R, B*P] so the GEMM inner loops
// run over batch x positions rather than the (often tiny) spatial extent.
Tensor conv_impl(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t sh,
                 std::size_t sw, std::size_t ph, std::size_t pw, const char* name) {
  if (x.rank() != 4 || weight.rank() != 4 || x.shape()[1] != weight.shape()[1]) shape_error(name, x, weight);
  if (sh == 0 || sw == 0) throw ConfigError(std::string(name) + ": stride must be positive");
  ConvGeom g{};
  g.batch = x.shape()[0];
  g.in_ch = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.out_ch = weight.shape()[0];
  g.kh = weight.shape()[2];
  g.kw = weight.shape()[3];
  g.sh = sh;
  g.sw = sw;
  g.ph = ph;
  g.pw = pw;
  if (g.h + 2 * ph < g.kh || g.w + 2 * pw < g.kw) shape_error(name, x, weight);
  g.oh = (g.h + 2 * ph - g.kh) / sh + 1;
  g.ow = (g.w + 2 * pw - g.kw) / sw + 1;
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{g.out_ch}) shape_error(name, weight, bias);

  const std::size_t R = g.col_rows(), P = g.col_cols(), N = g.batch * P;
  const std::size_t image = g.in_ch * g.h * g.w;
  auto X = x.data();
  auto W = weight.data();
  std::vector<double> cols(R * N);
  for (std::size_t b = 0; b < g.batch; ++b) im2col(X.data() + b * image, g, cols.data() + b * P, N);

  std::vector<double> prod(g.out_ch * N, 0.0);
  for (std::size_t o = 0; o < g.out_ch; ++o) {
    double* orow = prod.data() + o * N;
    for (std::size_t q = 0; q < R; ++q) {
      const double wv = W[o * R + q];
      const double* crow = cols.data() + q * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += wv * crow[n];
    }
  }
  std::vector<double> out(g.batch * g.out_ch * P);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const double add = has_bias ? bias.data()[o] : 0.0;
      const double* src = prod.data() + o * N + b * P;
      double* dst = out.data() + (b * g.out_ch + o) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + add;
    }

  std::vector<Tensor> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result(
      {g.batch, g.out_ch, g.oh, g.ow}, std::move(out), name, std::move(parents),
      [weight, g, has_bias, cols = std::move(cols)](std::span<const double> grad,
                                                    std::span<std::vector<double>* const> gp) {
        const std::size_t R = g.col_rows(), P = g.col_cols(), N = g.batch * P;
        auto W = weight.data();
        // grad [B, O, P] -> [O, B*P]
        std::vector<double> go(g.out_ch * N);
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t o = 0; o < g.out_ch; ++o)
            std::copy_n(grad.data() + (b * g.out_ch + o) * P, P, go.data() + o * N + b * P);
        if (gp[1]) {
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            const double* grow = go.data() + o * N;
            for (std::size_t q = 0; q < R; ++q) {
              const double* crow = cols.data() + q * N;
              double acc = 0.0;
              for (std::size_t n = 0; n < N; ++n) acc += grow[n] * crow[n];
              (*gp[1])[o * R + q] += acc;
            }
          }
        }
        if (has_bias && gp[2]) {
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) acc += go[o * N + n];
            (*gp[2])[o] += acc;
          }
        }
        if (gp[0]) {
          std::vector<double> gcols(R * N, 0.0);
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            const double* grow = go.data() + o * N;
            for (std::size_t q = 0; q < R; ++q) {
              const double wv = W[o * R + q];
              double* gc = gcols.data() + q * N;
              for (std::size_t n = 0; n < N; ++n) gc[n] += wv * grow[n];
            }
          }
          const std::size_t image = g.in_ch * g.h * g.w;
          for (std::size_t b = 0; b < g.batch; ++b) col2im_add(gcols.data() + b * P, g, gp[0]->data() + b * image, N);
        }
      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  return conv_impl(x, weight, bias, opt.stride, opt.stride, opt.padding, opt.padding, "conv2d");
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  if (x.rank() != 3 || weight.rank() != 3) shape_error("conv1d", x, weight);
  const Tensor x4 = reshape(x, {x.shape()[0], x.shape()[1], 1, x.shape()[2]});
  const Tensor w4 = reshape(weight, {weight.shape()[0], weight.shape()[1], 1, weight.shape()[2]});
  const Tensor y = conv_impl(x4, w4, bias, 1, opt.stride, 0, opt.padding, "conv1d");
  return reshape(y, {y.shape()[0], y.shape()[1], y.shape()[3]});
}

namespace {

struct PoolGeom {
  std::size_t planes, h, w, k, oh, ow;
};

PoolGeom pool_geom(const Tensor& x, std::size_t k, const char* name) {
  if (x.rank() < 2) shape_error(name, x, "needs at least two axes");
  if (k == 0) throw ConfigError(std::string(name) + ": window must be positive");
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  if (h % k || w % k) shape_error(name, x, "is not divisible by pooling window " + std::to_string(k));
  return {x.numel() / (h * w), h, w, k, h / k, w / k};
}

Shape pooled_shape(const Tensor& x, const PoolGeom& g) {
  Shape s = x.shape();
  s[s.size() - 2] = g.oh;
  s[s.size() - 1] = g.ow;
  return s;
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  const PoolGeom g = pool_geom(x, k, "avg_pool2d");
  std::vector<double> out(g.planes * g.oh * g.ow, 0.0);
  auto X = x.data();
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t pl = 0; pl < g.planes; ++pl)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t xx = 0; xx < g.w; ++xx)
        out[(pl * g.oh + y / k) * g.ow + xx / k] += X[(pl * g.h + y) * g.w + xx];
  for (double& v : out) v *= inv;
  return make_result(pooled_shape(x, g), std::move(out), "avg_pool2d", {x},
                     [g, inv](std::span<const double> grad, std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       for (std::size_t pl = 0; pl < g.planes; ++pl)
                         for (std::size_t y = 0; y < g.h; ++y)
                           for (std::size_t xx = 0; xx < g.w; ++xx)
                             (*gp[0])[(pl * g.h + y) * g.w + xx] +=
                                 inv * grad[(pl * g.oh + y / g.k) * g.ow + xx / g.k];
                     });
}

Tensor max_pool2d(const Tensor& x, std::size_t k) {
  const PoolGeom g = pool_geom(x, k, "max_pool2d");
  std::vector<double> out(g.planes * g.oh * g.ow);
  std::vector<std::size_t> argmax(out.size());
  auto X = x.data();
  for (std::size_t pl = 0; pl < g.planes; ++pl)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        std::size_t best = (pl * g.h + oy * k) * g.w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (pl * g.h + oy * k + dy) * g.w + ox * k + dx;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (pl * g.oh + oy) * g.ow + ox;
        out[o] = X[best];
        argmax[o] = best;
      }
  return make_result(pooled_shape(x, g), std::move(out), "max_pool2d", {x},
                     [argmax = std::move(argmax)](std::span<const double> grad,
                                                  std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       for (std::size_t o = 0; o < grad.size(); ++o) (*gp[0])[argmax[o]] += grad[o];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a},
                     [](std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       accumulate(gp[0], g);
                     });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw ConfigError("gather: index length " + std::to_string(index.size()) +
                      " does not match output shape " + shape_str(out_shape));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(index.size());
  auto A = a.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ConfigError("gather: index out of range for " + shape_str(a.shape()));
    out[i] = A[index[i]];
  }
  return make_result(std::move(out_shape), std::move(out), "gather", {a},
                     [index = std::move(index)](std::span<const double> g,
                                                std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) (*gp[0])[index[i]] += g[i];
                     });
}

Tensor permute(const Tensor& a, std::span<const std::size_t> axes) {
  const Shape& s = a.shape();
  if (axes.size() != s.size()) shape_error("permute", a, "needs " + std::to_string(s.size()) + " axes");
  std::vector<bool> used(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || used[axes[i]]) shape_error("permute", a, "given an invalid axis order");
    used[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  std::vector<std::size_t> index(a.numel());
  std::vector<std::size_t> coord(s.size(), 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < coord.size(); ++i) src += coord[i] * in_stride[axes[i]];
    index[flat] = src;
    for (std::size_t i = coord.size(); i-- > 0;) {
      if (++coord[i] < out_shape[i]) break;
      coord[i] = 0;
    }
  }
  return gather(a, std::move(index), std::move(out_shape));
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= axes.size() || axis1 >= axes.size()) shape_error("transpose", a, "has too few axes");
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) shape_error("softmax_cross_entropy", logits, "must be [batch, classes]");
  if (labels.size() != logits.shape()[0]) {
    throw ConfigError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for logits " + shape_str(logits.shape()));
  }
  const int k = static_cast<int>(logits.shape()[1]);
  for (int y : labels)
    if (y < 0 || y >= k) throw UsageError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
}

}  // namespace

std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  auto Z = logits.data();
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = Z.data() + b * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += std::exp(z[j] - mx);
    out[b] = std::log(s) + mx - z[labels[b]];
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  auto Z = logits.data();
  std::vector<double> probs(B * K);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = Z.data() + b * K;
    double* p = probs.data() + b * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < K; ++j) p[j] /= s;
    total += std::log(s) + mx - z[labels[b]];
  }
  std::vector<int> y(labels.begin(), labels.end());
  return make_result({1}, {total / static_cast<double>(B)}, "softmax_cross_entropy", {logits},
                     [probs = std::move(probs), y = std::move(y), B, K](
                         std::span<const double> g, std::span<std::vector<double>* const> gp) {
                       if (!gp[0]) return;
                       const double s = g[0] / static_cast<double>(B);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t j = 0; j < K; ++j) {
                           const double onehot = static_cast<int>(j) == y[b] ? 1.0 : 0.0;
                           (*gp[0])[b * K + j] += s * (probs[b * K + j] - onehot);
                         }
                     });
}

}  // namespace rgrid::ops
