#include "rgrid/structure.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <utility>

#include <json.hpp>

#include "rgrid/error.hpp"

namespace rgrid {

namespace {

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, std::string_view>, N>;

constexpr NameTable<Family, 2> kFamilies{{{Family::ViT, "ViT"}, {Family::VMLP, "VMLP"}}};
constexpr NameTable<EmbeddingKind, 3> kEmbeddings{
    {{EmbeddingKind::Ori, "Ori"}, {EmbeddingKind::Conv, "Conv"}, {EmbeddingKind::PConv, "PConv"}}};
constexpr NameTable<TokenMixerKind, 3> kMixers{{{TokenMixerKind::Ori, "Ori"},
                                                {TokenMixerKind::Conv, "Conv"},
                                                {TokenMixerKind::WindowShift, "WindowShift"}}};
constexpr NameTable<ChannelMlpKind, 3> kCmlps{
    {{ChannelMlpKind::Ori, "Ori"}, {ChannelMlpKind::Conv, "Conv"}, {ChannelMlpKind::None, "None"}}};
constexpr NameTable<NormKind, 2> kNorms{{{NormKind::LayerNorm, "LayerNorm"}, {NormKind::None, "None"}}};
constexpr NameTable<SkipKind, 2> kSkips{{{SkipKind::Residual, "Residual"}, {SkipKind::None, "None"}}};
constexpr NameTable<Stacking, 4> kStackings{{{Stacking::OriViT, "OriViT"},
                                             {Stacking::CNNBased, "CNNBased"},
                                             {Stacking::SwinBased, "SwinBased"},
                                             {Stacking::ImagePy, "ImagePy"}}};

template <typename E, std::size_t N>
std::string_view name_of(const NameTable<E, N>& table, E v) {
  for (const auto& [e, name] : table)
    if (e == v) return name;
  return "?";
}

template <typename E, std::size_t N>
E parse_name(const NameTable<E, N>& table, std::string_view s, const char* what) {
  std::string accepted;
  for (const auto& [e, name] : table) {
    if (name == s) return e;
    accepted += accepted.empty() ? "" : ", ";
    accepted += name;
  }
  throw UsageError("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of: " + accepted + ")");
}

bool is_hierarchical(Stacking s) { return s != Stacking::OriViT; }

}  // namespace

std::string_view to_string(Family v) { return name_of(kFamilies, v); }
std::string_view to_string(EmbeddingKind v) { return name_of(kEmbeddings, v); }
std::string_view to_string(TokenMixerKind v) { return name_of(kMixers, v); }
std::string_view to_string(ChannelMlpKind v) { return name_of(kCmlps, v); }
std::string_view to_string(NormKind v) { return name_of(kNorms, v); }
std::string_view to_string(SkipKind v) { return name_of(kSkips, v); }
std::string_view to_string(Stacking v) { return name_of(kStackings, v); }

Family parse_family(std::string_view s) { return parse_name(kFamilies, s, "family"); }
EmbeddingKind parse_embedding(std::string_view s) { return parse_name(kEmbeddings, s, "embedding"); }
TokenMixerKind parse_token_mixer(std::string_view s) { return parse_name(kMixers, s, "token_mixer"); }
ChannelMlpKind parse_cmlp(std::string_view s) { return parse_name(kCmlps, s, "cmlp"); }
NormKind parse_norm(std::string_view s) { return parse_name(kNorms, s, "norm"); }
SkipKind parse_skip(std::string_view s) { return parse_name(kSkips, s, "skip"); }
Stacking parse_stacking(std::string_view s) { return parse_name(kStackings, s, "stacking"); }

std::size_t StructureSpec::total_layers() const {
  return std::accumulate(stage_layers.begin(), stage_layers.end(), std::size_t{0});
}

std::vector<StageGeometry> stage_plan(const StructureSpec& spec) {
  std::vector<StageGeometry> plan;
  const std::size_t gh = spec.grid_height(), gw = spec.grid_width();
  if (spec.stacking == Stacking::OriViT) {
    std::size_t group = 0;
    if (spec.token_mixer == TokenMixerKind::WindowShift) group = std::min({kSwinWindow, gh, gw});
    plan.push_back({spec.total_layers(), spec.embed_dim, gh, gw, group});
    return plan;
  }
  const std::size_t stages = spec.stage_layers.size();
  const std::size_t block_side = std::min(gh, gw) >> (stages - 1);
  for (std::size_t k = 0; k < stages; ++k) {
    StageGeometry st{spec.stage_layers[k], spec.embed_dim << k, gh >> k, gw >> k, 0};
    if (spec.stacking == Stacking::ImagePy) {
      st.group_side = block_side;
    } else if (spec.token_mixer == TokenMixerKind::WindowShift) {
      st.group_side = std::min({kSwinWindow, st.grid_h, st.grid_w});
    }
    plan.push_back(st);
  }
  return plan;
}

ValidationResult validate_structure(const StructureSpec& spec) {
  auto reject = [](std::string rule, std::string msg) { return ValidationResult{false, std::move(rule), std::move(msg)}; };

  if (spec.stacking == Stacking::OriViT &&
      (spec.embedding == EmbeddingKind::PConv || spec.token_mixer == TokenMixerKind::Conv)) {
    return reject("oriViT-dimension",
                  "OriViT emits 1-D tokens; PConv embedding and Conv token mixer need a 2-D layout");
  }
  if (spec.stacking == Stacking::CNNBased &&
      !(spec.embedding == EmbeddingKind::PConv && spec.token_mixer == TokenMixerKind::Conv)) {
    return reject("cnnBased-components", "CNNBased stacking requires PConv embedding and Conv token mixer");
  }
  if (spec.stacking == Stacking::SwinBased && spec.token_mixer == TokenMixerKind::Conv) {
    return reject("swin-conv-mixer", "SwinBased stacking cannot use a Conv token mixer");
  }
  if (spec.stacking == Stacking::ImagePy && spec.embedding != EmbeddingKind::PConv) {
    return reject("imagePy-embedding", "ImagePy stacking requires PConv embedding");
  }

  if (spec.patch == 0 || spec.embed_dim == 0 || spec.heads == 0 || spec.classes < 2 ||
      spec.image.height == 0 || spec.image.width == 0 || spec.image.channels == 0 || !(spec.mlp_ratio > 0.0)) {
    return reject("dimensions", "patch, embed_dim, heads, image extents and mlp_ratio must be positive; classes >= 2");
  }
  if (spec.image.height % spec.patch || spec.image.width % spec.patch) {
    return reject("patch-divisibility", "image " + std::to_string(spec.image.height) + "x" +
                                            std::to_string(spec.image.width) + " is not divisible by patch " +
                                            std::to_string(spec.patch));
  }
  if (spec.family == Family::ViT && spec.embed_dim % spec.heads) {
    return reject("head-divisibility", "embed_dim " + std::to_string(spec.embed_dim) + " is not divisible by heads " +
                                           std::to_string(spec.heads));
  }
  if (spec.stage_layers.empty() ||
      std::any_of(spec.stage_layers.begin(), spec.stage_layers.end(), [](std::size_t n) { return n == 0; })) {
    return reject("stage-layers", "stage_layers must be a non-empty list of positive counts");
  }
  if (is_hierarchical(spec.stacking)) {
    const std::size_t factor = std::size_t{1} << (spec.stage_layers.size() - 1);
    if (spec.grid_height() % factor || spec.grid_width() % factor) {
      return reject("stage-resolution", "token grid " + std::to_string(spec.grid_height()) + "x" +
                                            std::to_string(spec.grid_width()) + " cannot be halved " +
                                            std::to_string(spec.stage_layers.size() - 1) + " times");
    }
  }
  for (const StageGeometry& st : stage_plan(spec)) {
    if (st.group_side && (st.grid_h % st.group_side || st.grid_w % st.group_side)) {
      return reject("window-tiling", "token grid " + std::to_string(st.grid_h) + "x" + std::to_string(st.grid_w) +
                                         " is not tiled by windows of side " + std::to_string(st.group_side));
    }
  }
  return {};
}

void require_valid(const StructureSpec& spec) {
  ValidationResult r = validate_structure(spec);
  if (!r.ok) throw ValidationError(r.rule, "structure rejected by rule " + r.rule + ": " + r.message);
}

namespace {

struct PresetRow {
  std::string_view id;
  EmbeddingKind embedding;
  TokenMixerKind mixer;
  ChannelMlpKind cmlp;
  NormKind norm;
  SkipKind skip;
  Stacking stacking;
};

using E = EmbeddingKind;
using T = TokenMixerKind;
using C = ChannelMlpKind;
using N = NormKind;
using S = SkipKind;
using K = Stacking;

// Main comparison grid. Rows (i)-(n) carry LN forward from row (h). Row (m)
// uses PConv: ImagePy needs the 2-D embedding.
constexpr std::array<PresetRow, 14> kTableRows{{
    {"(a)", E::Ori, T::Ori, C::Ori, N::None, S::Residual, K::OriViT},
    {"(b)", E::Ori, T::Ori, C::Ori, N::LayerNorm, S::Residual, K::OriViT},
    {"(c)", E::Ori, T::Ori, C::Conv, N::None, S::Residual, K::OriViT},
    {"(d)", E::Ori, T::Ori, C::Conv, N::LayerNorm, S::Residual, K::OriViT},
    {"(e)", E::Conv, T::Ori, C::Ori, N::None, S::Residual, K::OriViT},
    {"(f)", E::Conv, T::Ori, C::Ori, N::LayerNorm, S::Residual, K::OriViT},
    {"(g)", E::Conv, T::Ori, C::Conv, N::None, S::Residual, K::OriViT},
    {"(h)", E::Conv, T::Ori, C::Conv, N::LayerNorm, S::Residual, K::OriViT},
    {"(i)", E::PConv, T::Conv, C::Ori, N::LayerNorm, S::Residual, K::CNNBased},
    {"(j)", E::PConv, T::Conv, C::Conv, N::LayerNorm, S::Residual, K::CNNBased},
    {"(k)", E::Ori, T::WindowShift, C::Ori, N::LayerNorm, S::Residual, K::SwinBased},
    {"(l)", E::PConv, T::WindowShift, C::Conv, N::LayerNorm, S::Residual, K::SwinBased},
    {"(m)", E::PConv, T::Ori, C::Ori, N::LayerNorm, S::Residual, K::ImagePy},
    {"(n)", E::PConv, T::Conv, C::Conv, N::LayerNorm, S::Residual, K::ImagePy},
}};

std::vector<std::size_t> default_stages(Stacking s) {
  switch (s) {
    case Stacking::OriViT: return {12};
    case Stacking::CNNBased: return {1, 2, 9};
    case Stacking::SwinBased: return {2, 2, 6, 2};
    case Stacking::ImagePy: return {2, 2, 8};
  }
  return {12};
}

StructureSpec from_row(const PresetRow& row, Family family) {
  StructureSpec spec;
  spec.family = family;
  spec.embedding = row.embedding;
  spec.token_mixer = row.mixer;
  spec.cmlp = row.cmlp;
  spec.norm = row.norm;
  spec.skip = row.skip;
  spec.stacking = row.stacking;
  spec.stage_layers = default_stages(row.stacking);
  return spec;
}

// Ablation grid: six (embedding, cmlp) groups, each swept over
// (LN, Res), (LN, none), (none, Res), (none, none).
std::optional<PresetRow> ablation_row(int index) {
  if (index < 1 || index > 24) return std::nullopt;
  constexpr std::array<std::pair<E, C>, 6> groups{{{E::Ori, C::Ori},
                                                   {E::Ori, C::None},
                                                   {E::Ori, C::Conv},
                                                   {E::Conv, C::Ori},
                                                   {E::Conv, C::None},
                                                   {E::Conv, C::Conv}}};
  constexpr std::array<std::pair<N, S>, 4> toggles{
      {{N::LayerNorm, S::Residual}, {N::LayerNorm, S::None}, {N::None, S::Residual}, {N::None, S::None}}};
  const auto [emb, cmlp] = groups[(index - 1) / 4];
  const auto [norm, skip] = toggles[(index - 1) % 4];
  return PresetRow{"", emb, T::Ori, cmlp, norm, skip, K::OriViT};
}

}  // namespace

std::vector<std::string> preset_ids() {
  std::vector<std::string> ids;
  for (const auto& row : kTableRows) ids.emplace_back(row.id);
  for (int i = 1; i <= 24; ++i) ids.push_back("(" + std::to_string(i) + ")");
  return ids;
}

bool is_preset_id(std::string_view id) {
  const auto ids = preset_ids();
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

StructureSpec structure_from_preset(std::string_view id, Family family) {
  for (const auto& row : kTableRows)
    if (row.id == id) return from_row(row, family);
  if (id.size() >= 3 && id.front() == '(' && id.back() == ')') {
    const std::string digits(id.substr(1, id.size() - 2));
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      if (auto row = ablation_row(std::stoi(digits))) return from_row(*row, family);
    }
  }
  std::string valid;
  for (const auto& v : preset_ids()) valid += (valid.empty() ? "" : " ") + v;
  throw UsageError("unknown preset id '" + std::string(id) + "'; valid ids: " + valid);
}

std::string structure_to_json(const StructureSpec& spec) {
  nlohmann::ordered_json j;
  j["family"] = to_string(spec.family);
  j["embedding"] = to_string(spec.embedding);
  j["token_mixer"] = to_string(spec.token_mixer);
  j["cmlp"] = to_string(spec.cmlp);
  j["norm"] = to_string(spec.norm);
  j["skip"] = to_string(spec.skip);
  j["stacking"] = to_string(spec.stacking);
  j["stage_layers"] = spec.stage_layers;
  j["image"] = {spec.image.height, spec.image.width, spec.image.channels};
  j["patch"] = spec.patch;
  j["embed_dim"] = spec.embed_dim;
  j["heads"] = spec.heads;
  j["mlp_ratio"] = spec.mlp_ratio;
  j["classes"] = spec.classes;
  return j.dump();
}

StructureSpec structure_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("structure JSON: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("structure JSON must be an object");
  StructureSpec spec;
  static const std::vector<std::string> known{"family", "embedding", "token_mixer", "cmlp", "norm",
                                              "skip",   "stacking",  "stage_layers", "image", "patch",
                                              "embed_dim", "heads",  "mlp_ratio",   "classes"};
  try {
    for (const auto& [key, value] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw UsageError("structure JSON: unknown key '" + key + "'");
      }
    }
    if (j.contains("family")) spec.family = parse_family(j["family"].get<std::string>());
    if (j.contains("embedding")) spec.embedding = parse_embedding(j["embedding"].get<std::string>());
    if (j.contains("token_mixer")) spec.token_mixer = parse_token_mixer(j["token_mixer"].get<std::string>());
    if (j.contains("cmlp")) spec.cmlp = parse_cmlp(j["cmlp"].get<std::string>());
    if (j.contains("norm")) spec.norm = parse_norm(j["norm"].get<std::string>());
    if (j.contains("skip")) spec.skip = parse_skip(j["skip"].get<std::string>());
    if (j.contains("stacking")) spec.stacking = parse_stacking(j["stacking"].get<std::string>());
    if (j.contains("stage_layers")) spec.stage_layers = j["stage_layers"].get<std::vector<std::size_t>>();
    if (j.contains("image")) {
      const auto dims = j["image"].get<std::vector<std::size_t>>();
      if (dims.size() != 3) throw UsageError("structure JSON: image must be [height, width, channels]");
      spec.image = {dims[0], dims[1], dims[2]};
    }
    if (j.contains("patch")) spec.patch = j["patch"].get<std::size_t>();
    if (j.contains("embed_dim")) spec.embed_dim = j["embed_dim"].get<std::size_t>();
    if (j.contains("heads")) spec.heads = j["heads"].get<std::size_t>();
    if (j.contains("mlp_ratio")) spec.mlp_ratio = j["mlp_ratio"].get<double>();
    if (j.contains("classes")) spec.classes = j["classes"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("structure JSON: ") + e.what());
  }
  return spec;
}

}  // namespace rgrid
