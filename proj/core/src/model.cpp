#include "rgrid/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "rgrid/error.hpp"
#include "rgrid/ops.hpp"

namespace rgrid {

namespace {

struct Transition {
  Stacking kind;
  Tensor conv_weight, conv_bias;   // CNNBased, ImagePy
  std::optional<Norm> norm;
  Tensor merge_weight;             // SwinBased
  TokenGrid in_grid;
};

struct Stage {
  StageGeometry geometry;
  std::optional<Transition> transition;
  std::vector<MixerBlock> blocks;
};

// [B, N, d] on grid (h, w) -> [B, N/4, 4d] gathering each 2x2 neighbourhood.
Tensor merge_patches(const Tensor& seq, TokenGrid grid) {
  const std::size_t B = seq.shape()[0], d = seq.shape()[2];
  const std::size_t oh = grid.h / 2, ow = grid.w / 2, N = grid.count();
  std::vector<std::size_t> index(B * oh * ow * 4 * d);
  constexpr std::size_t offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (const auto& off : offsets)
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t token = (2 * y + off[0]) * grid.w + 2 * x + off[1];
            index[o++] = (b * N + token) * d + c;
          }
  return ops::gather(seq, std::move(index), {B, oh * ow, 4 * d});
}

}  // namespace

struct Model::Impl {
  StructureSpec spec;
  std::uint64_t seed;
  std::vector<NamedTensor> params;
  InputNormalization input_norm;
  Tensor input_norm_weight, input_norm_bias;

  // embedding
  Tensor stem1_w, stem1_b, stem2_w, stem2_b;
  std::optional<Projection> patch_proj;
  Tensor pconv_w, pconv_b;
  Tensor pos;

  std::vector<Stage> stages;

  // head
  std::optional<Norm> head_norm;
  std::optional<ChannelMlp> head_mlp;
  std::optional<Norm> final_norm;
  Tensor classifier_w, classifier_b;

  Impl(StructureSpec s, std::uint64_t sd, bool randomize) : spec(std::move(s)), seed(sd) {
    require_valid(spec);
    ParamStore store(seed, randomize);
    const std::size_t C = spec.image.channels, P = spec.patch, d = spec.embed_dim;
    const TokenGrid grid0{spec.grid_height(), spec.grid_width()};

    switch (spec.embedding) {
      case EmbeddingKind::Ori:
        patch_proj.emplace(store, "embed.proj", P * P * C, d, Projection::Kind::Linear, grid0);
        pos = store.normal("embed.pos", {grid0.count(), d});
        break;
      case EmbeddingKind::Conv:
        stem1_w = store.truncated_normal("embed.stem1.weight", {kConvStemWidth, C, 3, 3});
        stem1_b = store.zeros("embed.stem1.bias", {kConvStemWidth});
        stem2_w = store.truncated_normal("embed.stem2.weight", {kConvStemWidth, kConvStemWidth, 3, 3});
        stem2_b = store.zeros("embed.stem2.bias", {kConvStemWidth});
        patch_proj.emplace(store, "embed.proj", P * P * kConvStemWidth, d, Projection::Kind::Linear, grid0);
        pos = store.normal("embed.pos", {grid0.count(), d});
        break;
      case EmbeddingKind::PConv:
        pconv_w = store.truncated_normal("embed.pconv.weight", {d, C, P, P});
        pconv_b = store.zeros("embed.pconv.bias", {d});
        pos = store.normal("embed.pos", {d, grid0.h, grid0.w});
        break;
    }

    const auto plan = stage_plan(spec);
    for (std::size_t k = 0; k < plan.size(); ++k) {
      Stage stage{plan[k], std::nullopt, {}};
      const std::string prefix = "stage" + std::to_string(k);
      if (k > 0) {
        const StageGeometry& prev = plan[k - 1];
        Transition t{spec.stacking, {}, {}, std::nullopt, {}, {prev.grid_h, prev.grid_w}};
        switch (spec.stacking) {
          case Stacking::CNNBased:
          case Stacking::ImagePy:
            t.conv_weight = store.truncated_normal(prefix + ".transition.conv.weight", {plan[k].dim, prev.dim, 3, 3});
            t.conv_bias = store.zeros(prefix + ".transition.conv.bias", {plan[k].dim});
            t.norm.emplace(store, prefix + ".transition.norm", plan[k].dim, spec.norm);
            break;
          case Stacking::SwinBased:
            t.norm.emplace(store, prefix + ".transition.norm", 4 * prev.dim, spec.norm);
            t.merge_weight = store.truncated_normal(prefix + ".transition.merge.weight", {4 * prev.dim, plan[k].dim});
            break;
          case Stacking::OriViT: break;
        }
        stage.transition = std::move(t);
      }
      for (std::size_t l = 0; l < plan[k].layers; ++l) {
        stage.blocks.push_back(
            make_mixer_block(store, prefix + ".block" + std::to_string(l), spec, plan[k], l));
      }
      stages.push_back(std::move(stage));
    }

    const StageGeometry& last = plan.back();
    const TokenGrid last_grid{last.grid_h, last.grid_w};
    if (spec.cmlp != ChannelMlpKind::None) {
      Projection::Kind kind = Projection::Kind::Linear;
      if (spec.cmlp == ChannelMlpKind::Conv) {
        kind = spec.stacking == Stacking::OriViT ? Projection::Kind::Conv1d : Projection::Kind::Conv2d;
      }
      const auto hidden = static_cast<std::size_t>(std::lround(static_cast<double>(last.dim) * spec.mlp_ratio));
      head_norm.emplace(store, "head.norm1", last.dim, spec.norm);
      head_mlp.emplace(store, "head.mlp", last.dim, std::max<std::size_t>(1, hidden), kind, last_grid);
    }
    final_norm.emplace(store, "head.norm", last.dim, spec.norm);
    classifier_w = store.truncated_normal("head.classifier.weight", {last.dim, spec.classes});
    classifier_b = store.zeros("head.classifier.bias", {spec.classes});

    params = store.take();
  }

  Tensor normalize_input(const Tensor& images) const {
    if (input_norm.identity()) return images;
    return ops::conv2d(images, input_norm_weight, input_norm_bias);
  }

  Tensor embed(const Tensor& images) const {
    const Shape expect{spec.image.channels, spec.image.height, spec.image.width};
    if (images.rank() != 4 || !std::equal(expect.begin(), expect.end(), images.shape().begin() + 1)) {
      throw ConfigError("model expects images [B, " + std::to_string(spec.image.channels) + ", " +
                        std::to_string(spec.image.height) + ", " + std::to_string(spec.image.width) + "], got " +
                        shape_str(images.shape()));
    }
    const Tensor x = normalize_input(images);
    switch (spec.embedding) {
      case EmbeddingKind::Ori:
        return ops::add((*patch_proj)(patchify(x, spec.patch)), pos);
      case EmbeddingKind::Conv: {
        Tensor s = ops::gelu(ops::conv2d(x, stem1_w, stem1_b, {1, 1}));
        s = ops::gelu(ops::conv2d(s, stem2_w, stem2_b, {1, 1}));
        return ops::add((*patch_proj)(patchify(s, spec.patch)), pos);
      }
      case EmbeddingKind::PConv:
        return ops::add(ops::conv2d(x, pconv_w, pconv_b, {spec.patch, 0}), pos);
    }
    return x;
  }

  Tensor transition(const Transition& t, const Tensor& seq) const {
    switch (t.kind) {
      case Stacking::CNNBased: {
        const Tensor map = ops::conv2d(seq_to_map(seq, t.in_grid), t.conv_weight, t.conv_bias, {2, 1});
        return (*t.norm)(map_to_seq(map));
      }
      case Stacking::ImagePy:
        return map_to_seq(block_aggregate(seq_to_map(seq, t.in_grid), t.conv_weight, t.conv_bias, &*t.norm));
      case Stacking::SwinBased:
        return ops::matmul((*t.norm)(merge_patches(seq, t.in_grid)), t.merge_weight);
      case Stacking::OriViT: break;
    }
    return seq;
  }

  Tensor forward(const Tensor& images, ForwardTrace* trace) const {
    const Tensor z0 = embed(images);
    if (trace) trace->embedding = z0;
    Tensor z = spec.embedding == EmbeddingKind::PConv ? map_to_seq(z0) : z0;
    for (const Stage& stage : stages) {
      if (stage.transition) z = transition(*stage.transition, z);
      for (const MixerBlock& block : stage.blocks) {
        z = block.forward(z, trace ? &trace->attention : nullptr);
        if (trace) trace->block_outputs.push_back(z);
      }
    }
    if (head_mlp) {
      const Tensor h = (*head_mlp)((*head_norm)(z));
      z = spec.skip == SkipKind::Residual ? ops::add(z, h) : h;
    }
    const Tensor pooled = ops::mean((*final_norm)(z), 1);
    return ops::add(ops::matmul(pooled, classifier_w), classifier_b);
  }
};

Model::Model(StructureSpec spec, std::uint64_t seed) : Model(std::move(spec), seed, true) {}
Model::Model(StructureSpec spec, std::uint64_t seed, bool randomize)
    : impl_(std::make_unique<Impl>(std::move(spec), seed, randomize)) {}
Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

Model Model::clone() const {
  Model copy(impl_->spec, impl_->seed, false);
  for (std::size_t i = 0; i < impl_->params.size(); ++i) {
    auto src = impl_->params[i].value.data();
    auto dst = copy.impl_->params[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (!impl_->input_norm.identity()) copy.set_input_normalization(impl_->input_norm);
  return copy;
}

const StructureSpec& Model::spec() const { return impl_->spec; }
std::uint64_t Model::seed() const { return impl_->seed; }

Tensor Model::forward(const Tensor& images, ForwardTrace* trace) const { return impl_->forward(images, trace); }
Tensor Model::embed(const Tensor& images) const { return impl_->embed(images); }

std::vector<int> Model::predict(const Tensor& images) const {
  NoGradGuard no_grad;
  const Tensor logits = forward(images);
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  std::vector<int> out(B);
  auto z = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    out[b] = static_cast<int>(std::max_element(z.begin() + b * K, z.begin() + (b + 1) * K) - (z.begin() + b * K));
  }
  return out;
}

std::vector<NamedTensor>& Model::parameters() { return impl_->params; }
const std::vector<NamedTensor>& Model::parameters() const { return impl_->params; }

Tensor Model::parameter(std::string_view name) const {
  for (const auto& p : impl_->params)
    if (p.name == name) return p.value;
  throw UsageError("no parameter named '" + std::string(name) + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : impl_->params) n += p.value.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : impl_->params) p.value.zero_grad();
}

void Model::set_input_normalization(InputNormalization norm) {
  const std::size_t C = impl_->spec.image.channels;
  if (norm.identity()) {
    impl_->input_norm = {};
    impl_->input_norm_weight = {};
    impl_->input_norm_bias = {};
    return;
  }
  if (norm.mean.size() != C || norm.stddev.size() != C) {
    throw ConfigError("input normalization needs " + std::to_string(C) + " channel statistics");
  }
  std::vector<double> w(C * C, 0.0), b(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (!(norm.stddev[c] > 0.0)) throw ConfigError("input normalization stddev must be positive");
    w[c * C + c] = 1.0 / norm.stddev[c];
    b[c] = -norm.mean[c] / norm.stddev[c];
  }
  impl_->input_norm_weight = Tensor::from_data({C, C, 1, 1}, std::move(w));
  impl_->input_norm_bias = Tensor::from_data({C}, std::move(b));
  impl_->input_norm = std::move(norm);
}

const InputNormalization& Model::input_normalization() const { return impl_->input_norm; }

}  // namespace rgrid
