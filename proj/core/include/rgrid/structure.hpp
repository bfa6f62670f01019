#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rgrid {

enum class Family { ViT, VMLP };
enum class EmbeddingKind { Ori, Conv, PConv };
enum class TokenMixerKind { Ori, Conv, WindowShift };
enum class ChannelMlpKind { Ori, Conv, None };
enum class NormKind { LayerNorm, None };
enum class SkipKind { Residual, None };
enum class Stacking { OriViT, CNNBased, SwinBased, ImagePy };

std::string_view to_string(Family v);
std::string_view to_string(EmbeddingKind v);
std::string_view to_string(TokenMixerKind v);
std::string_view to_string(ChannelMlpKind v);
std::string_view to_string(NormKind v);
std::string_view to_string(SkipKind v);
std::string_view to_string(Stacking v);

/// Parse helpers; throw UsageError listing accepted names.
Family parse_family(std::string_view s);
EmbeddingKind parse_embedding(std::string_view s);
TokenMixerKind parse_token_mixer(std::string_view s);
ChannelMlpKind parse_cmlp(std::string_view s);
NormKind parse_norm(std::string_view s);
SkipKind parse_skip(std::string_view s);
Stacking parse_stacking(std::string_view s);

struct ImageGeometry {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  bool operator==(const ImageGeometry&) const = default;
};

/// Full architecture description. Defaults are the desk-scale dims.
struct StructureSpec {
  Family family = Family::ViT;
  EmbeddingKind embedding = EmbeddingKind::Ori;
  TokenMixerKind token_mixer = TokenMixerKind::Ori;
  ChannelMlpKind cmlp = ChannelMlpKind::Ori;
  NormKind norm = NormKind::LayerNorm;
  SkipKind skip = SkipKind::Residual;
  Stacking stacking = Stacking::OriViT;
  std::vector<std::size_t> stage_layers{12};
  ImageGeometry image{};
  std::size_t patch = 4;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t classes = 10;

  std::size_t grid_height() const { return image.height / patch; }
  std::size_t grid_width() const { return image.width / patch; }
  std::size_t token_count() const { return grid_height() * grid_width(); }
  std::size_t total_layers() const;

  bool operator==(const StructureSpec&) const = default;
};

/// Swin window side; stages whose grid is smaller clamp to the grid side.
inline constexpr std::size_t kSwinWindow = 4;
/// Channel width of the convolution stem in front of the Conv embedding.
inline constexpr std::size_t kConvStemWidth = 16;

struct ValidationResult {
  bool ok = true;
  std::string rule;     // empty when ok
  std::string message;  // empty when ok
};

/// Checks component compatibility and geometry. Compatibility rule names:
///   oriViT-dimension       OriViT with PConv embedding or Conv token mixer
///   cnnBased-components    CNNBased without PConv embedding + Conv token mixer
///   swin-conv-mixer        SwinBased with a Conv token mixer
///   imagePy-embedding      ImagePy without PConv embedding
/// Geometry rule names: patch-divisibility, head-divisibility, stage-layers,
/// stage-resolution, window-tiling, dimensions.
ValidationResult validate_structure(const StructureSpec& spec);

/// Throws ValidationError carrying the rule name when validation fails.
void require_valid(const StructureSpec& spec);

/// Ids "(a)".."(n)" for the main comparison grid, "(1)".."(24)" for the
/// norm/skip/CMLP ablation grid.
StructureSpec structure_from_preset(std::string_view id, Family family);
std::vector<std::string> preset_ids();
bool is_preset_id(std::string_view id);

/// Per-stage geometry of a validated spec.
struct StageGeometry {
  std::size_t layers;
  std::size_t dim;
  std::size_t grid_h;
  std::size_t grid_w;
  std::size_t group_side;  // attention/token-mixing group side (0 = global)
};
std::vector<StageGeometry> stage_plan(const StructureSpec& spec);

/// Canonical compact JSON text for the spec (stable key order).
std::string structure_to_json(const StructureSpec& spec);
StructureSpec structure_from_json(std::string_view text);

}  // namespace rgrid
