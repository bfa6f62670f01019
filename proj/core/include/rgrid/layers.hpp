#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rgrid/structure.hpp"
#include "rgrid/tensor.hpp"

namespace rgrid {

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Creates named, trainable parameters in construction order. Weights are
/// drawn from a normal truncated at two standard deviations; biases and
/// norm shifts start at zero, norm gains at one.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed, bool randomize = true);

  Tensor truncated_normal(const std::string& name, Shape shape, double stddev = 0.02);
  Tensor normal(const std::string& name, Shape shape, double stddev = 0.02);
  Tensor zeros(const std::string& name, Shape shape);
  Tensor ones(const std::string& name, Shape shape);

  std::vector<NamedTensor> take() { return std::move(params_); }

 private:
  Tensor add(const std::string& name, Shape shape, std::vector<double> data);

  std::mt19937_64 rng_;
  bool randomize_;
  std::vector<NamedTensor> params_;
};

struct TokenGrid {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t count() const { return h * w; }
};

/// [B, C, H, W] -> [B, N, P*P*C], N = HW/P^2, patches in row-major order and
/// each patch flattened as (row, column, channel).
Tensor patchify(const Tensor& images, std::size_t patch);
/// [B, N, C] tokens laid out on `grid` -> [B, C, h, w].
Tensor seq_to_map(const Tensor& seq, TokenGrid grid);
/// [B, C, h, w] -> [B, h*w, C].
Tensor map_to_seq(const Tensor& map);

/// Partition of a token grid into square windows after a cyclic roll by
/// `shift` (toward the origin) on both axes. merge() is the exact inverse.
class WindowLayout {
 public:
  WindowLayout(TokenGrid grid, std::size_t window, std::size_t shift);

  std::size_t window() const { return window_; }
  std::size_t shift() const { return shift_; }
  std::size_t windows() const { return (grid_.h / window_) * (grid_.w / window_); }
  std::size_t tokens_per_window() const { return window_ * window_; }

  /// [B, N, C] -> [B * windows, window^2, C]
  Tensor partition(const Tensor& seq) const;
  /// [B * windows, window^2, C] -> [B, N, C]
  Tensor merge(const Tensor& windowed) const;

 private:
  std::vector<std::size_t> source_token_;  // window-major position -> grid token
  TokenGrid grid_;
  std::size_t window_;
  std::size_t shift_;
};

/// Per-token projection [B, N, in] -> [B, N, out]: a linear map, or a
/// shape-preserving convolution (kernel 3, padding 1) over the token
/// sequence (1-D) or the token grid (2-D).
class Projection {
 public:
  enum class Kind { Linear, Conv1d, Conv2d };

  Projection(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Kind kind,
             TokenGrid grid, bool bias = true);
  Tensor operator()(const Tensor& seq) const;

 private:
  Kind kind_;
  TokenGrid grid_;
  Tensor weight_;
  Tensor bias_;
};

/// Layer norm over the channel axis, or identity.
class Norm {
 public:
  Norm(ParamStore& store, const std::string& name, std::size_t dim, NormKind kind);
  Tensor operator()(const Tensor& x) const;
  bool active() const { return gamma_.defined(); }

 private:
  Tensor gamma_;
  Tensor beta_;
};

/// Token mixers all map [B, N, d] -> [B, N, d].
class TokenMixer {
 public:
  virtual ~TokenMixer() = default;
  virtual Tensor forward(const Tensor& seq, std::vector<Tensor>* attention_out) const = 0;
};

/// Multi-head self-attention, optionally restricted to windows.
class Attention final : public TokenMixer {
 public:
  Attention(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
            Projection::Kind proj, TokenGrid grid, std::optional<WindowLayout> layout);
  Tensor forward(const Tensor& seq, std::vector<Tensor>* attention_out) const override;

 private:
  std::size_t dim_;
  std::size_t heads_;
  Projection q_, k_, v_, o_;
  std::optional<WindowLayout> layout_;
};

/// Token-mixing MLP across the token axis (per channel), hidden width
/// max(1, T/2) for T tokens per group.
class TokenMlp final : public TokenMixer {
 public:
  TokenMlp(ParamStore& store, const std::string& name, std::size_t tokens, std::optional<WindowLayout> layout);
  Tensor forward(const Tensor& seq, std::vector<Tensor>* attention_out) const override;

 private:
  Tensor w1_, b1_, w2_, b2_;
  std::optional<WindowLayout> layout_;
};

/// Convolutional token mixing on the grid: conv3x3, GELU, conv3x3.
class ConvMixer final : public TokenMixer {
 public:
  ConvMixer(ParamStore& store, const std::string& name, std::size_t dim, TokenGrid grid);
  Tensor forward(const Tensor& seq, std::vector<Tensor>* attention_out) const override;

 private:
  Projection c1_, c2_;
};

/// Two projections with a GELU in between.
class ChannelMlp {
 public:
  ChannelMlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
             Projection::Kind kind, TokenGrid grid);
  Tensor operator()(const Tensor& seq) const;

 private:
  Projection fc1_, fc2_;
};

/// One token-mixer layer: Z' = Skip(TM(Norm(Z))), Z_next = Skip(MLP(Norm(Z'))).
/// The MLP sub-block is omitted when `mlp` is empty.
class MixerBlock {
 public:
  MixerBlock(ParamStore& store, const std::string& name, std::size_t dim, NormKind norm, SkipKind skip,
             std::unique_ptr<TokenMixer> mixer, std::optional<ChannelMlp> mlp);
  Tensor forward(const Tensor& seq, std::vector<Tensor>* attention_out = nullptr) const;

 private:
  Norm norm1_, norm2_;
  bool residual_;
  std::unique_ptr<TokenMixer> mixer_;
  std::optional<ChannelMlp> mlp_;
};

/// Builds one MixerBlock for a stage of `spec`. `layer` is the index within
/// the stage (window shift alternates on odd layers).
MixerBlock make_mixer_block(ParamStore& store, const std::string& name, const StructureSpec& spec,
                            const StageGeometry& stage, std::size_t layer);

/// ImagePy stage transition on a [B, d, s, s] map: shape-preserving conv
/// (d -> out), optional layer norm over channels, 2x max-pool.
/// Throws ConfigError on an odd spatial side.
Tensor block_aggregate(const Tensor& map, const Tensor& conv_weight, const Tensor& conv_bias, const Norm* norm);

}  // namespace rgrid
