#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/data.hpp"
#include "rgrid/tensor.hpp"

namespace rgrid {

class Model;

// ---- Fourier sensitivity ----

struct FourierBasisSpec {
  std::size_t i = 0;
  std::size_t j = 0;
  double v = 4.0;  // l2 norm of the perturbation
  std::size_t n = 32;
};

/// Real N x N image (row-major) whose 2-D DFT is supported exactly on
/// (i, j) and (-i mod N, -j mod N), scaled to l2 norm v. The sign is fixed
/// here; heatmaps flip it per sample (see heatmap_sign).
std::vector<double> fourier_basis(const FourierBasisSpec& spec);

/// +1 or -1, a pure function of (seed, cell, sample).
double heatmap_sign(std::uint64_t seed, std::size_t i, std::size_t j, std::size_t sample);

struct FourierHeatmap {
  std::size_t n = 0;
  std::vector<double> error;  // n x n, cell (i, j) at i * n + j, raw DFT indexing
  double norm_v = 0.0;
  std::size_t sample_count = 0;

  double at(std::size_t i, std::size_t j) const { return error[i * n + j]; }
  /// Mean error over cells whose frequency is at least n/4 on both axes
  /// (distance to the nearest DC alias).
  double high_frequency_mean() const;
};

struct HeatmapOptions {
  double v = 4.0;
  std::size_t max_samples = 256;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
};

/// Cell (i, j) = error rate on the first `max_samples` samples after adding
/// +-fourier_basis(i, j, v) to every channel and clipping to [0, 1].
FourierHeatmap fourier_heatmap(const LogitFn& f, const LabeledImageSet& data, const HeatmapOptions& options);

/// Binary PPM (P6) in raw DFT indexing, so DC sits in the corners and the
/// highest frequencies in the centre. Header "P6\n# <comment>\n<w> <h>\n255\n", then RGB
/// triples row by row, top row first. Values are min-max scaled per map,
/// then mapped through a fixed 256-entry viridis-like table. Each matrix
/// cell becomes a `scale` x `scale` block.
std::string render_heatmap_ppm(std::span<const double> values, std::size_t n, const std::string& comment,
                               std::size_t scale = 8);
/// Raw matrix, one row per line, comma separated, "%.6g".
std::string heatmap_csv(std::span<const double> values, std::size_t n, const std::string& comment);

// ---- Local Lipschitz ----

struct LipschitzOptions {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 50;
  std::size_t restarts = 3;
  double step_size = 0.0;  // 0 = epsilon / 10
  std::uint64_t seed = 0;
};

struct LipschitzEstimate {
  std::vector<double> per_sample;
  double mean = 0.0;
  double epsilon = 0.0;
  std::size_t steps = 0;
  std::size_t restarts = 0;
};

/// Sign-gradient ascent on ||f(x') - f(x)||_1 over the l-infinity ball of
/// radius epsilon around each sample, starting uniformly inside the ball.
/// Reports the best ||f(x') - f(x)||_1 / ||x' - x||_inf seen across all
/// iterates. The ball is not clipped to the pixel range. Works on any input
/// shape [B, ...].
LipschitzEstimate local_lipschitz(const LogitFn& f, const Tensor& x, const LipschitzOptions& options);

// ---- Rank collapse ----

/// ||Z - 1 c^T||_F / ||Z||_F with c the column means of Z [N, d].
double rank1_residual(std::span<const double> z, std::size_t rows, std::size_t cols);
double rank1_residual(const Tensor& z);

/// Pure multi-head self-attention stack (no MLP, no norm) on Gaussian tokens.
/// Query/key/value weights ~ N(0, (qkv_gain / sqrt(d))^2), output weights
/// ~ N(0, 1/d): large enough logits that skipless collapse proceeds over all
/// depths instead of reaching the floating-point floor within a few layers.
struct RankCollapseConfig {
  std::size_t tokens = 64;
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t depth = 8;
  double qkv_gain = 1.7;
  bool residual = false;
};

/// Residual after each layer (index 0 = depth 1) for one random init.
std::vector<double> rank_collapse_profile(const RankCollapseConfig& config, std::uint64_t seed);
/// Per-depth median over seeds 0..seeds-1.
std::vector<double> rank_collapse_median(const RankCollapseConfig& config, std::size_t seeds);
/// Residual of sample 0's token matrix after every mixer block of a model.
std::vector<double> model_rank_profile(const Model& model, const Tensor& images);

// ---- Frequency argument and loss-range demo ----

/// x[n] = (1/N) sum_k X[k] e^{+j 2 pi k n / N}
std::vector<std::complex<double>> idft(std::span<const std::complex<double>> coefficients);

double sigmoid(double x);

/// Image of an input interval [x_lo, x_hi] under the sigmoid, and the
/// resulting binary cross-entropy interval for the given label: a wider
/// input interval produces a wider loss interval.
struct LossRange {
  double y_lo = 0.0;
  double y_hi = 0.0;
  double loss_lo = 0.0;
  double loss_hi = 0.0;
};
LossRange sigmoid_loss_range(double x_lo, double x_hi, int label);

}  // namespace rgrid
