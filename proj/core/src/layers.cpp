#include "rgrid/layers.hpp"

#include <cmath>
#include <unordered_set>

#include "rgrid/error.hpp"
#include "rgrid/ops.hpp"

namespace rgrid {

ParamStore::ParamStore(std::uint64_t seed, bool randomize) : rng_(seed), randomize_(randomize) {}

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> data) {
  for (const auto& p : params_)
    if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), true);
  params_.push_back({name, t});
  return t;
}

Tensor ParamStore::truncated_normal(const std::string& name, Shape shape, double stddev) {
  std::vector<double> data(shape_numel(shape), 0.0);
  if (randomize_) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : data) {
      double z;
      do {
        z = dist(rng_);
      } while (std::fabs(z) > 2.0);
      v = z * stddev;
    }
  }
  return add(name, std::move(shape), std::move(data));
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev) {
  std::vector<double> data(shape_numel(shape), 0.0);
  if (randomize_) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : data) v = dist(rng_);
  }
  return add(name, std::move(shape), std::move(data));
}

Tensor ParamStore::zeros(const std::string& name, Shape shape) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return add(name, std::move(shape), std::move(data));
}

Tensor ParamStore::ones(const std::string& name, Shape shape) {
  std::vector<double> data(shape_numel(shape), 1.0);
  return add(name, std::move(shape), std::move(data));
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4) throw ConfigError("patchify: expected [B, C, H, W], got " + shape_str(images.shape()));
  const std::size_t B = images.shape()[0], C = images.shape()[1], H = images.shape()[2], W = images.shape()[3];
  if (patch == 0 || H % patch || W % patch) {
    throw ConfigError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, N = gh * gw, F = patch * patch * C;
  std::vector<std::size_t> index(B * N * F);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t c = 0; c < C; ++c)
              index[o++] = ((b * C + c) * H + py * patch + dy) * W + px * patch + dx;
  return ops::gather(images, std::move(index), {B, N, F});
}

Tensor seq_to_map(const Tensor& seq, TokenGrid grid) {
  if (seq.rank() != 3 || seq.shape()[1] != grid.count()) {
    throw ConfigError("seq_to_map: tokens " + shape_str(seq.shape()) + " do not fill a " + std::to_string(grid.h) +
                      "x" + std::to_string(grid.w) + " grid");
  }
  const std::size_t axes[] = {0, 3, 1, 2};
  return ops::permute(ops::reshape(seq, {seq.shape()[0], grid.h, grid.w, seq.shape()[2]}), axes);
}

Tensor map_to_seq(const Tensor& map) {
  if (map.rank() != 4) throw ConfigError("map_to_seq: expected [B, C, h, w], got " + shape_str(map.shape()));
  const std::size_t axes[] = {0, 2, 3, 1};
  const Tensor t = ops::permute(map, axes);
  return ops::reshape(t, {map.shape()[0], map.shape()[2] * map.shape()[3], map.shape()[1]});
}

WindowLayout::WindowLayout(TokenGrid grid, std::size_t window, std::size_t shift)
    : grid_(grid), window_(window), shift_(shift) {
  if (window == 0 || window > grid.h || window > grid.w) {
    throw ConfigError("window " + std::to_string(window) + " does not fit a " + std::to_string(grid.h) + "x" +
                      std::to_string(grid.w) + " token grid");
  }
  if (grid.h % window || grid.w % window) {
    throw ConfigError("token grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                      " is not divisible by window " + std::to_string(window));
  }
  if (shift >= window) throw ConfigError("window shift " + std::to_string(shift) + " must be below the window");
  const std::size_t wy_count = grid.h / window, wx_count = grid.w / window;
  source_token_.reserve(grid.count());
  for (std::size_t wy = 0; wy < wy_count; ++wy)
    for (std::size_t wx = 0; wx < wx_count; ++wx)
      for (std::size_t ly = 0; ly < window; ++ly)
        for (std::size_t lx = 0; lx < window; ++lx) {
          const std::size_t gy = (wy * window + ly + shift) % grid.h;
          const std::size_t gx = (wx * window + lx + shift) % grid.w;
          source_token_.push_back(gy * grid.w + gx);
        }
}

Tensor WindowLayout::partition(const Tensor& seq) const {
  if (seq.rank() != 3 || seq.shape()[1] != grid_.count()) {
    throw ConfigError("window partition: tokens " + shape_str(seq.shape()) + " do not match the grid");
  }
  const std::size_t B = seq.shape()[0], N = grid_.count(), C = seq.shape()[2];
  std::vector<std::size_t> index(B * N * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t pos = 0; pos < N; ++pos)
      for (std::size_t c = 0; c < C; ++c) index[(b * N + pos) * C + c] = (b * N + source_token_[pos]) * C + c;
  return ops::gather(seq, std::move(index), {B * windows(), tokens_per_window(), C});
}

Tensor WindowLayout::merge(const Tensor& windowed) const {
  const std::size_t N = grid_.count();
  if (windowed.rank() != 3 || windowed.shape()[1] != tokens_per_window() || windowed.shape()[0] % windows()) {
    throw ConfigError("window merge: unexpected shape " + shape_str(windowed.shape()));
  }
  const std::size_t B = windowed.shape()[0] / windows(), C = windowed.shape()[2];
  std::vector<std::size_t> index(B * N * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t pos = 0; pos < N; ++pos)
      for (std::size_t c = 0; c < C; ++c) index[(b * N + source_token_[pos]) * C + c] = (b * N + pos) * C + c;
  return ops::gather(windowed, std::move(index), {B, N, C});
}

Projection::Projection(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Kind kind,
                       TokenGrid grid, bool bias)
    : kind_(kind), grid_(grid) {
  switch (kind) {
    case Kind::Linear: weight_ = store.truncated_normal(name + ".weight", {in, out}); break;
    case Kind::Conv1d: weight_ = store.truncated_normal(name + ".weight", {out, in, 3}); break;
    case Kind::Conv2d: weight_ = store.truncated_normal(name + ".weight", {out, in, 3, 3}); break;
  }
  if (bias) bias_ = store.zeros(name + ".bias", {out});
}

Tensor Projection::operator()(const Tensor& seq) const {
  switch (kind_) {
    case Kind::Linear: {
      const Tensor y = ops::matmul(seq, weight_);
      return bias_.defined() ? ops::add(y, bias_) : y;
    }
    case Kind::Conv1d: {
      const Tensor x = ops::transpose(seq, 1, 2);
      return ops::transpose(ops::conv1d(x, weight_, bias_, {1, 1}), 1, 2);
    }
    case Kind::Conv2d:
      return map_to_seq(ops::conv2d(seq_to_map(seq, grid_), weight_, bias_, {1, 1}));
  }
  return seq;
}

Norm::Norm(ParamStore& store, const std::string& name, std::size_t dim, NormKind kind) {
  if (kind == NormKind::LayerNorm) {
    gamma_ = store.ones(name + ".gamma", {dim});
    beta_ = store.zeros(name + ".beta", {dim});
  }
}

Tensor Norm::operator()(const Tensor& x) const {
  return active() ? ops::layer_norm(x, gamma_, beta_, 1e-5) : x;
}

Attention::Attention(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                     Projection::Kind proj, TokenGrid grid, std::optional<WindowLayout> layout)
    : dim_(dim),
      heads_(heads),
      q_(store, name + ".q", dim, dim, proj, grid),
      k_(store, name + ".k", dim, dim, proj, grid),
      v_(store, name + ".v", dim, dim, proj, grid),
      o_(store, name + ".o", dim, dim, proj, grid),
      layout_(std::move(layout)) {
  if (heads == 0 || dim % heads) throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads");
}

Tensor Attention::forward(const Tensor& seq, std::vector<Tensor>* attention_out) const {
  Tensor q = q_(seq), k = k_(seq), v = v_(seq);
  if (layout_) {
    q = layout_->partition(q);
    k = layout_->partition(k);
    v = layout_->partition(v);
  }
  const std::size_t groups = q.shape()[0], T = q.shape()[1], dh = dim_ / heads_;
  const Shape split{groups, T, heads_, dh};
  const std::size_t to_heads[] = {0, 2, 1, 3};
  const std::size_t to_keys[] = {0, 2, 3, 1};
  const Tensor qh = ops::permute(ops::reshape(q, split), to_heads);
  const Tensor kt = ops::permute(ops::reshape(k, split), to_keys);
  const Tensor vh = ops::permute(ops::reshape(v, split), to_heads);
  const Tensor attn = ops::softmax(ops::scale(ops::matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh))));
  if (attention_out) attention_out->push_back(attn);
  Tensor ctx = ops::reshape(ops::permute(ops::matmul(attn, vh), to_heads), {groups, T, dim_});
  if (layout_) ctx = layout_->merge(ctx);
  return o_(ctx);
}

TokenMlp::TokenMlp(ParamStore& store, const std::string& name, std::size_t tokens,
                   std::optional<WindowLayout> layout)
    : layout_(std::move(layout)) {
  const std::size_t T = layout_ ? layout_->tokens_per_window() : tokens;
  const std::size_t hidden = std::max<std::size_t>(1, T / 2);
  w1_ = store.truncated_normal(name + ".fc1.weight", {T, hidden});
  b1_ = store.zeros(name + ".fc1.bias", {hidden});
  w2_ = store.truncated_normal(name + ".fc2.weight", {hidden, T});
  b2_ = store.zeros(name + ".fc2.bias", {T});
}

Tensor TokenMlp::forward(const Tensor& seq, std::vector<Tensor>*) const {
  Tensor x = layout_ ? layout_->partition(seq) : seq;
  x = ops::transpose(x, 1, 2);
  x = ops::add(ops::matmul(ops::gelu(ops::add(ops::matmul(x, w1_), b1_)), w2_), b2_);
  x = ops::transpose(x, 1, 2);
  return layout_ ? layout_->merge(x) : x;
}

ConvMixer::ConvMixer(ParamStore& store, const std::string& name, std::size_t dim, TokenGrid grid)
    : c1_(store, name + ".conv1", dim, dim, Projection::Kind::Conv2d, grid),
      c2_(store, name + ".conv2", dim, dim, Projection::Kind::Conv2d, grid) {}

Tensor ConvMixer::forward(const Tensor& seq, std::vector<Tensor>*) const { return c2_(ops::gelu(c1_(seq))); }

ChannelMlp::ChannelMlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                       Projection::Kind kind, TokenGrid grid)
    : fc1_(store, name + ".fc1", dim, hidden, kind, grid), fc2_(store, name + ".fc2", hidden, dim, kind, grid) {}

Tensor ChannelMlp::operator()(const Tensor& seq) const { return fc2_(ops::gelu(fc1_(seq))); }

MixerBlock::MixerBlock(ParamStore& store, const std::string& name, std::size_t dim, NormKind norm, SkipKind skip,
                       std::unique_ptr<TokenMixer> mixer, std::optional<ChannelMlp> mlp)
    : norm1_(store, name + ".norm1", dim, norm),
      norm2_(store, name + ".norm2", dim, mlp ? norm : NormKind::None),
      residual_(skip == SkipKind::Residual),
      mixer_(std::move(mixer)),
      mlp_(std::move(mlp)) {}

Tensor MixerBlock::forward(const Tensor& seq, std::vector<Tensor>* attention_out) const {
  const Tensor mixed = mixer_->forward(norm1_(seq), attention_out);
  Tensor z = residual_ ? ops::add(seq, mixed) : mixed;
  if (mlp_) {
    const Tensor h = (*mlp_)(norm2_(z));
    z = residual_ ? ops::add(z, h) : h;
  }
  return z;
}

MixerBlock make_mixer_block(ParamStore& store, const std::string& name, const StructureSpec& spec,
                            const StageGeometry& stage, std::size_t layer) {
  const TokenGrid grid{stage.grid_h, stage.grid_w};
  std::optional<WindowLayout> layout;
  if (stage.group_side && (stage.group_side < stage.grid_h || stage.group_side < stage.grid_w)) {
    const bool shifted = spec.token_mixer == TokenMixerKind::WindowShift && layer % 2 == 1;
    layout.emplace(grid, stage.group_side, shifted ? stage.group_side / 2 : 0);
  }
  const bool conv_mixer = spec.token_mixer == TokenMixerKind::Conv;
  const Projection::Kind proj = conv_mixer ? Projection::Kind::Conv2d : Projection::Kind::Linear;

  std::unique_ptr<TokenMixer> mixer;
  if (spec.family == Family::ViT) {
    mixer = std::make_unique<Attention>(store, name + ".attn", stage.dim, spec.heads, proj, grid, layout);
  } else if (conv_mixer) {
    mixer = std::make_unique<ConvMixer>(store, name + ".mix", stage.dim, grid);
  } else {
    mixer = std::make_unique<TokenMlp>(store, name + ".mix", grid.count(), layout);
  }

  std::optional<ChannelMlp> mlp;
  if (spec.cmlp != ChannelMlpKind::None) {
    const auto hidden = static_cast<std::size_t>(std::lround(static_cast<double>(stage.dim) * spec.mlp_ratio));
    mlp.emplace(store, name + ".mlp", stage.dim, std::max<std::size_t>(1, hidden), proj, grid);
  }
  return MixerBlock(store, name, stage.dim, spec.norm, spec.skip, std::move(mixer), std::move(mlp));
}

Tensor block_aggregate(const Tensor& map, const Tensor& conv_weight, const Tensor& conv_bias, const Norm* norm) {
  if (map.rank() != 4) throw ConfigError("block_aggregate: expected [B, d, s, s], got " + shape_str(map.shape()));
  if (map.shape()[2] % 2 || map.shape()[3] % 2) {
    throw ConfigError("block_aggregate: spatial side of " + shape_str(map.shape()) + " is odd");
  }
  Tensor y = ops::conv2d(map, conv_weight, conv_bias, {1, conv_weight.shape()[2] / 2});
  if (norm && norm->active()) {
    const TokenGrid grid{y.shape()[2], y.shape()[3]};
    y = seq_to_map((*norm)(map_to_seq(y)), grid);
  }
  return ops::max_pool2d(y, 2);
}

}  // namespace rgrid
