#include "rgrid/diagnostics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rgrid/error.hpp"
#include "rgrid/io.hpp"
#include "rgrid/model.hpp"
#include "rgrid/ops.hpp"
#include "rgrid/rng.hpp"

namespace rgrid {

std::vector<double> fourier_basis(const FourierBasisSpec& spec) {
  const std::size_t n = spec.n;
  if (n == 0) throw ConfigError("fourier_basis needs N > 0");
  if (spec.i >= n || spec.j >= n) {
    throw ConfigError("fourier_basis index (" + std::to_string(spec.i) + ", " + std::to_string(spec.j) +
                      ") outside [0, " + std::to_string(n) + ")");
  }
  if (!(spec.v > 0.0)) throw ConfigError("fourier_basis needs v > 0");
  // cos pattern has squared norm N^2/2, or N^2 when the two bins coincide
  const bool self_conjugate = (2 * spec.i) % n == 0 && (2 * spec.j) % n == 0;
  const double nn = static_cast<double>(n);
  const double scale = spec.v * (self_conjugate ? 1.0 : std::sqrt(2.0)) / nn;
  std::vector<double> out(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      // reduce the phase index mod N first so large N stays exact
      const std::size_t k = (spec.i * a + spec.j * b) % n;
      out[a * n + b] = scale * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / nn);
    }
  return out;
}

double heatmap_sign(std::uint64_t seed, std::size_t i, std::size_t j, std::size_t sample) {
  const std::uint64_t h = derive_seed(derive_seed(derive_seed(seed, i), j), sample);
  return (h >> 63) ? -1.0 : 1.0;
}

double FourierHeatmap::high_frequency_mean() const {
  double total = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t fi = std::min(i, n - i), fj = std::min(j, n - j);
      if (4 * fi >= n && 4 * fj >= n) {
        total += at(i, j);
        ++cells;
      }
    }
  return cells ? total / static_cast<double>(cells) : 0.0;
}

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.size(0), k = logits.size(1);
  auto d = logits.data();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = static_cast<int>(std::max_element(d.begin() + i * k, d.begin() + (i + 1) * k) - (d.begin() + i * k));
  }
  return out;
}

}  // namespace

FourierHeatmap fourier_heatmap(const LogitFn& f, const LabeledImageSet& data, const HeatmapOptions& options) {
  if (data.height != data.width) throw ConfigError("fourier_heatmap needs square images");
  if (!(options.v >= 0.0)) throw ConfigError("fourier_heatmap needs v >= 0");
  if (options.batch_size == 0) throw ConfigError("batch size must be >= 1");
  const std::size_t n = data.height;
  const std::size_t count = std::min(options.max_samples, data.size());
  if (count == 0) throw UsageError("fourier_heatmap on an empty dataset");
  const std::size_t plane = n * n;
  const std::size_t per = data.image_size();

  FourierHeatmap map;
  map.n = n;
  map.norm_v = options.v;
  map.sample_count = count;
  map.error.assign(n * n, 0.0);

  NoGradGuard guard;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::vector<double> basis =
          options.v > 0.0 ? fourier_basis({i, j, options.v, n}) : std::vector<double>(plane, 0.0);
      std::size_t wrong = 0;
      for (std::size_t start = 0; start < count; start += options.batch_size) {
        const std::size_t len = std::min(options.batch_size, count - start);
        std::vector<double> pixels(len * per);
        std::vector<int> labels(len);
        for (std::size_t s = 0; s < len; ++s) {
          const std::size_t sample = start + s;
          labels[s] = data.labels[sample];
          const double sign = heatmap_sign(options.seed, i, j, sample);
          auto img = data.image(sample);
          for (std::size_t c = 0; c < data.channels; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              pixels[s * per + c * plane + p] = std::clamp(img[c * plane + p] + sign * basis[p], 0.0, 1.0);
            }
        }
        const Tensor x = Tensor::from_data({len, data.channels, n, n}, std::move(pixels));
        const std::vector<int> pred = argmax_rows(f(x));
        for (std::size_t s = 0; s < len; ++s) wrong += pred[s] != labels[s];
      }
      map.error[i * n + j] = static_cast<double>(wrong) / static_cast<double>(count);
    }
  return map;
}

namespace {

using Rgb = std::array<unsigned char, 3>;

const std::array<Rgb, 256>& viridis_table() {
  static const std::array<Rgb, 256> table = [] {
    static constexpr double kAnchors[9][3] = {{68, 1, 84},    {71, 44, 122},  {59, 81, 139},
                                              {44, 113, 142}, {33, 144, 141}, {39, 173, 129},
                                              {92, 200, 99},  {170, 220, 50}, {253, 231, 37}};
    std::array<Rgb, 256> t{};
    for (std::size_t k = 0; k < 256; ++k) {
      const double pos = static_cast<double>(k) / 255.0 * 8.0;
      const auto lo = std::min<std::size_t>(static_cast<std::size_t>(pos), 7);
      const double frac = pos - static_cast<double>(lo);
      for (int c = 0; c < 3; ++c) {
        const double value = kAnchors[lo][c] + frac * (kAnchors[lo + 1][c] - kAnchors[lo][c]);
        t[k][c] = static_cast<unsigned char>(std::lround(value));
      }
    }
    return t;
  }();
  return table;
}

}  // namespace

std::string render_heatmap_ppm(std::span<const double> values, std::size_t n, const std::string& comment,
                               std::size_t scale) {
  if (values.size() != n * n || n == 0) throw UsageError("heatmap values must be n x n");
  scale = std::max<std::size_t>(scale, 1);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  const auto& table = viridis_table();
  const std::size_t side = n * scale;
  std::string out = "P6\n# " + comment + "\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  out.reserve(out.size() + side * side * 3);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double v = values[(r / scale) * n + c / scale];
      const double unit = range > 0.0 ? (v - lo) / range : 0.0;
      const Rgb& rgb = table[static_cast<std::size_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0))];
      out.append(reinterpret_cast<const char*>(rgb.data()), 3);
    }
  return out;
}

std::string heatmap_csv(std::span<const double> values, std::size_t n, const std::string& comment) {
  if (values.size() != n * n) throw UsageError("heatmap values must be n x n");
  std::string out = "# " + comment + "\n";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out += ',';
      out += format_g6(values[i * n + j]);
    }
    out += '\n';
  }
  return out;
}

LipschitzEstimate local_lipschitz(const LogitFn& f, const Tensor& x, const LipschitzOptions& options) {
  if (!(options.epsilon > 0.0)) throw ConfigError("local_lipschitz needs epsilon > 0");
  if (options.restarts < 1) throw ConfigError("local_lipschitz needs restarts >= 1");
  if (x.rank() < 1) throw ConfigError("local_lipschitz needs a batched input");
  const double eps = options.epsilon;
  const double alpha = options.step_size > 0.0 ? options.step_size : eps / 10.0;
  const std::size_t batch = x.size(0);
  const std::size_t per = x.numel() / batch;
  auto base = x.data();

  Tensor fx;
  {
    NoGradGuard guard;
    fx = f(x).detach();
  }
  if (fx.rank() < 1 || fx.size(0) != batch) throw ConfigError("local_lipschitz: model output is not batched");
  const std::size_t out_per = fx.numel() / batch;

  LipschitzEstimate est;
  est.per_sample.assign(batch, 0.0);
  est.epsilon = eps;
  est.steps = options.steps;
  est.restarts = options.restarts;

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> u(-eps, eps);
  std::vector<double> delta(base.size());
  for (std::size_t r = 0; r < options.restarts; ++r) {
    for (double& d : delta) d = u(rng);
    for (std::size_t s = 0;; ++s) {
      std::vector<double> point(base.size());
      for (std::size_t k = 0; k < point.size(); ++k) point[k] = base[k] + delta[k];
      Tensor leaf = Tensor::from_data(x.shape(), std::move(point), true);
      Tensor diff = ops::sub(f(leaf), fx);
      auto dd = diff.data();
      for (std::size_t b = 0; b < batch; ++b) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < out_per; ++k) num += std::abs(dd[b * out_per + k]);
        for (std::size_t k = 0; k < per; ++k) den = std::max(den, std::abs(delta[b * per + k]));
        if (den > 0.0) est.per_sample[b] = std::max(est.per_sample[b], num / den);
      }
      if (s == options.steps) break;
      Tensor objective = ops::sum(ops::abs(diff));
      if (!objective.requires_grad()) break;
      const Tensor wrt[] = {leaf};
      const std::vector<double> g = gradients(objective, wrt)[0];
      for (std::size_t k = 0; k < delta.size(); ++k) {
        const double sg = g[k] > 0.0 ? 1.0 : (g[k] < 0.0 ? -1.0 : 0.0);
        delta[k] = std::clamp(delta[k] + alpha * sg, -eps, eps);
      }
    }
  }
  est.mean = std::accumulate(est.per_sample.begin(), est.per_sample.end(), 0.0) / static_cast<double>(batch);
  return est;
}

double rank1_residual(std::span<const double> z, std::size_t rows, std::size_t cols) {
  if (z.size() != rows * cols || rows == 0 || cols == 0) throw UsageError("rank1_residual: bad matrix extent");
  std::vector<double> mean(cols, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      mean[c] += z[r * cols + c];
      total += z[r * cols + c] * z[r * cols + c];
    }
  if (total == 0.0) throw UsageError("rank1_residual of a zero matrix");
  for (double& m : mean) m /= static_cast<double>(rows);
  double resid = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = z[r * cols + c] - mean[c];
      resid += d * d;
    }
  return std::sqrt(resid / total);
}

double rank1_residual(const Tensor& z) {
  if (z.rank() != 2) throw UsageError("rank1_residual needs an [N, d] matrix, got " + shape_str(z.shape()));
  return rank1_residual(z.data(), z.size(0), z.size(1));
}

namespace {

// c[n, m] = a[n, k] * b[k, m]
std::vector<double> matmul_plain(const std::vector<double>& a, const std::vector<double>& b, std::size_t n,
                                 std::size_t k, std::size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      for (std::size_t j = 0; j < m; ++j) c[i * m + j] += av * b[p * m + j];
    }
  return c;
}

}  // namespace

std::vector<double> rank_collapse_profile(const RankCollapseConfig& config, std::uint64_t seed) {
  const std::size_t n = config.tokens, d = config.dim, h = config.heads;
  if (n == 0 || d == 0 || h == 0 || d % h) throw ConfigError("rank collapse stack needs dim divisible by heads");
  const std::size_t dh = d / h;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  auto draw = [&](std::size_t count, double stddev) {
    std::vector<double> v(count);
    for (double& x : v) x = stddev * unit(rng);
    return v;
  };
  std::vector<double> z = draw(n * d, 1.0);
  const double sd = static_cast<double>(d);
  std::vector<double> profile;
  for (std::size_t layer = 0; layer < config.depth; ++layer) {
    const auto wq = draw(d * d, config.qkv_gain / std::sqrt(sd));
    const auto wk = draw(d * d, config.qkv_gain / std::sqrt(sd));
    const auto wv = draw(d * d, config.qkv_gain / std::sqrt(sd));
    const auto wo = draw(d * d, 1.0 / std::sqrt(sd));
    const auto q = matmul_plain(z, wq, n, d, d);
    const auto k = matmul_plain(z, wk, n, d, d);
    const auto v = matmul_plain(z, wv, n, d, d);
    std::vector<double> heads_out(n * d, 0.0);
    std::vector<double> row(n);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t hh = 0; hh < h; ++hh) {
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[i * d + hh * dh + c] * k[j * d + hh * dh + c];
          row[j] = s * inv;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (double& r : row) total += (r = std::exp(r - mx));
        for (std::size_t j = 0; j < n; ++j) {
          const double a = row[j] / total;
          for (std::size_t c = 0; c < dh; ++c) heads_out[i * d + hh * dh + c] += a * v[j * d + hh * dh + c];
        }
      }
    }
    const auto out = matmul_plain(heads_out, wo, n, d, d);
    if (config.residual) {
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += out[i];
    } else {
      z = out;
    }
    profile.push_back(rank1_residual(z, n, d));
  }
  return profile;
}

std::vector<double> rank_collapse_median(const RankCollapseConfig& config, std::size_t seeds) {
  if (seeds == 0) throw UsageError("rank_collapse_median needs at least one seed");
  std::vector<std::vector<double>> runs;
  for (std::size_t s = 0; s < seeds; ++s) runs.push_back(rank_collapse_profile(config, s));
  std::vector<double> median(config.depth);
  for (std::size_t l = 0; l < config.depth; ++l) {
    std::vector<double> col;
    for (const auto& r : runs) col.push_back(r[l]);
    std::sort(col.begin(), col.end());
    median[l] = col.size() % 2 ? col[col.size() / 2] : 0.5 * (col[col.size() / 2 - 1] + col[col.size() / 2]);
  }
  return median;
}

std::vector<double> model_rank_profile(const Model& model, const Tensor& images) {
  NoGradGuard guard;
  ForwardTrace trace;
  model.forward(images, &trace);
  std::vector<double> out;
  for (const Tensor& z : trace.block_outputs) {
    const std::size_t n = z.size(1), d = z.size(2);
    out.push_back(rank1_residual(z.data().subspan(0, n * d), n, d));
  }
  return out;
}

std::vector<std::complex<double>> idft(std::span<const std::complex<double>> coefficients) {
  const std::size_t n = coefficients.size();
  if (n == 0) throw UsageError("idft of an empty sequence");
  std::vector<std::complex<double>> out(n);
  const double nn = static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) {
    std::complex<double> acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / nn;
      acc += coefficients[k] * std::complex<double>(std::cos(angle), std::sin(angle));
    }
    out[t] = acc / nn;
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

LossRange sigmoid_loss_range(double x_lo, double x_hi, int label) {
  if (x_lo > x_hi) throw UsageError("sigmoid_loss_range needs x_lo <= x_hi");
  if (label != 0 && label != 1) throw UsageError("sigmoid_loss_range label must be 0 or 1");
  LossRange r;
  r.y_lo = sigmoid(x_lo);
  r.y_hi = sigmoid(x_hi);
  if (label == 1) {
    r.loss_lo = -std::log(r.y_hi);
    r.loss_hi = -std::log(r.y_lo);
  } else {
    r.loss_lo = -std::log1p(-r.y_lo);
    r.loss_hi = -std::log1p(-r.y_hi);
  }
  return r;
}

}  // namespace rgrid
