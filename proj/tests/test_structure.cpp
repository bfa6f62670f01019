#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "rgrid/error.hpp"
#include "rgrid/grad_check.hpp"
#include "rgrid/layers.hpp"
#include "rgrid/model.hpp"
#include "rgrid/ops.hpp"
#include "rgrid/structure.hpp"
#include "support.hpp"

using namespace rgrid;
using rgrid::testing::random_tensor;

namespace {

StructureSpec small_spec(StructureSpec spec) {
  spec.embed_dim = 16;
  spec.heads = 2;
  spec.mlp_ratio = 2.0;
  return spec;
}

Tensor weighted_sum(const Tensor& t) {
  std::vector<double> w(t.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.2 + 0.05 * static_cast<double>(i % 11);
  return ops::sum(ops::mul(t, Tensor::from_data(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("patchify shapes and layout") {
  SUBCASE("32x32x3 with P=4 gives 64 tokens of 48") {
    Tensor x = random_tensor({2, 3, 32, 32}, 1);
    CHECK(patchify(x, 4).shape() == Shape{2, 64, 48});
  }
  SUBCASE("single patch equals the flattened image") {
    Tensor x = random_tensor({1, 1, 8, 8}, 2);
    Tensor t = patchify(x, 8);
    REQUIRE(t.shape() == Shape{1, 1, 64});
    for (std::size_t i = 0; i < 64; ++i) CHECK(t.at(i) == x.at(i));
  }
  SUBCASE("patch entries follow (row, column, channel) order") {
    Tensor x = random_tensor({1, 2, 4, 4}, 3);
    Tensor t = patchify(x, 2);
    // token 3 is the bottom-right patch; its entry (r=1, c=0, ch=1)
    const std::size_t idx = 3 * 8 + (1 * 2 + 0) * 2 + 1;
    CHECK(t.at(idx) == x.at(1 * 16 + 3 * 4 + 2));
  }
  SUBCASE("indivisible side is a configuration error") {
    CHECK_THROWS_AS(patchify(Tensor::zeros({1, 3, 10, 10}), 4), ConfigError);
  }
}

TEST_CASE("PConv embedding keeps the 2-D layout") {
  StructureSpec spec = structure_from_preset("(n)", Family::ViT);
  Model model(spec, 5);
  Tensor z0 = model.embed(random_tensor({1, 3, 32, 32}, 4, 0.0, 1.0));
  CHECK(z0.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("Ori embedding with zero positional embedding is the patch projection") {
  StructureSpec spec = small_spec(structure_from_preset("(b)", Family::ViT));
  Model model(spec, 6);
  auto pos = model.parameter("embed.pos").mutable_data();
  std::fill(pos.begin(), pos.end(), 0.0);
  Tensor x = random_tensor({2, 3, 32, 32}, 7, 0.0, 1.0);
  Tensor proj = ops::add(ops::matmul(patchify(x, 4), model.parameter("embed.proj.weight")),
                         model.parameter("embed.proj.bias"));
  Tensor z0 = model.embed(x);
  REQUIRE(z0.shape() == proj.shape());
  for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(z0.at(i) == proj.at(i));
}

TEST_CASE("positional embedding of the wrong shape is rejected") {
  CHECK_THROWS_AS(ops::add(Tensor::zeros({1, 64, 16}), Tensor::zeros({63, 16})), ConfigError);
}

TEST_CASE("validation rules") {
  auto with = [](Stacking s, EmbeddingKind e, TokenMixerKind t) {
    StructureSpec spec;
    spec.stacking = s;
    spec.embedding = e;
    spec.token_mixer = t;
    spec.stage_layers = s == Stacking::OriViT ? std::vector<std::size_t>{12} : std::vector<std::size_t>{2, 2, 8};
    return validate_structure(spec);
  };
  CHECK(with(Stacking::OriViT, EmbeddingKind::PConv, TokenMixerKind::Ori).rule == "oriViT-dimension");
  CHECK(with(Stacking::OriViT, EmbeddingKind::Ori, TokenMixerKind::Conv).rule == "oriViT-dimension");
  CHECK(with(Stacking::CNNBased, EmbeddingKind::PConv, TokenMixerKind::Conv).ok);
  CHECK(with(Stacking::CNNBased, EmbeddingKind::Ori, TokenMixerKind::Conv).rule == "cnnBased-components");
  CHECK(with(Stacking::CNNBased, EmbeddingKind::PConv, TokenMixerKind::Ori).rule == "cnnBased-components");
  CHECK(with(Stacking::SwinBased, EmbeddingKind::PConv, TokenMixerKind::Conv).rule == "swin-conv-mixer");
  CHECK(with(Stacking::SwinBased, EmbeddingKind::Ori, TokenMixerKind::WindowShift).ok);
  CHECK(with(Stacking::ImagePy, EmbeddingKind::Ori, TokenMixerKind::Ori).rule == "imagePy-embedding");
  CHECK(with(Stacking::ImagePy, EmbeddingKind::Conv, TokenMixerKind::Conv).rule == "imagePy-embedding");
  CHECK(with(Stacking::ImagePy, EmbeddingKind::PConv, TokenMixerKind::Conv).ok);
  CHECK(with(Stacking::OriViT, EmbeddingKind::Conv, TokenMixerKind::WindowShift).ok);

  StructureSpec spec;
  spec.patch = 5;
  CHECK(validate_structure(spec).rule == "patch-divisibility");
  spec = {};
  spec.heads = 5;
  CHECK(validate_structure(spec).rule == "head-divisibility");
  spec.family = Family::VMLP;
  CHECK(validate_structure(spec).ok);
  spec = {};
  spec.stage_layers = {};
  CHECK(validate_structure(spec).rule == "stage-layers");
  spec.stage_layers = {3, 0};
  CHECK(validate_structure(spec).rule == "stage-layers");
  spec = structure_from_preset("(n)", Family::ViT);
  spec.stage_layers = {1, 1, 1, 1, 1};  // 8x8 grid cannot halve four times
  CHECK(validate_structure(spec).rule == "stage-resolution");
  spec = {};
  spec.classes = 1;
  CHECK(validate_structure(spec).rule == "dimensions");

  spec = structure_from_preset("(a)", Family::ViT);
  spec.embedding = EmbeddingKind::PConv;
  try {
    require_valid(spec);
    FAIL("expected a ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.rule() == "oriViT-dimension");
    CHECK(e.kind() == "validation");
  }
}

TEST_CASE("preset table rows") {
  const StructureSpec b = structure_from_preset("(b)", Family::ViT);
  CHECK(b.embedding == EmbeddingKind::Ori);
  CHECK(b.token_mixer == TokenMixerKind::Ori);
  CHECK(b.cmlp == ChannelMlpKind::Ori);
  CHECK(b.norm == NormKind::LayerNorm);
  CHECK(b.skip == SkipKind::Residual);
  CHECK(b.stacking == Stacking::OriViT);

  const StructureSpec n = structure_from_preset("(n)", Family::VMLP);
  CHECK(n.family == Family::VMLP);
  CHECK(n.embedding == EmbeddingKind::PConv);
  CHECK(n.token_mixer == TokenMixerKind::Conv);
  CHECK(n.cmlp == ChannelMlpKind::Conv);
  CHECK(n.stacking == Stacking::ImagePy);
  CHECK(n.stage_layers == std::vector<std::size_t>{2, 2, 8});

  const StructureSpec four = structure_from_preset("(4)", Family::ViT);
  CHECK(four.norm == NormKind::None);
  CHECK(four.skip == SkipKind::None);

  CHECK(structure_from_preset("(i)", Family::ViT).stage_layers == std::vector<std::size_t>{1, 2, 9});
  CHECK(structure_from_preset("(k)", Family::ViT).stage_layers == std::vector<std::size_t>{2, 2, 6, 2});
  CHECK(structure_from_preset("(5)", Family::ViT).cmlp == ChannelMlpKind::None);
  CHECK(structure_from_preset("(21)", Family::ViT).embedding == EmbeddingKind::Conv);

  for (const std::string& id : preset_ids()) CHECK(structure_from_preset(id, Family::ViT).total_layers() == 12);

  try {
    structure_from_preset("(z)", Family::ViT);
    FAIL("expected a UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("(a)") != std::string::npos);
    CHECK(std::string(e.what()).find("(24)") != std::string::npos);
  }
  CHECK_THROWS_AS(structure_from_preset("(25)", Family::ViT), UsageError);
  CHECK(preset_ids().size() == 38);
}

TEST_CASE("every preset instantiates and maps Bx3x32x32 to Bx10") {
  const Tensor x = random_tensor({2, 3, 32, 32}, 11, 0.0, 1.0);
  for (Family family : {Family::ViT, Family::VMLP}) {
    for (const std::string& id : preset_ids()) {
      CAPTURE(id);
      CAPTURE(to_string(family));
      const StructureSpec spec = structure_from_preset(id, family);
      REQUIRE(validate_structure(spec).ok);
      Model model(spec, 1);
      std::set<std::string> names;
      for (const auto& p : model.parameters()) names.insert(p.name);
      CHECK(names.size() == model.parameters().size());
      NoGradGuard no_grad;
      const Tensor logits = model.forward(x);
      CHECK(logits.shape() == Shape{2, 10});
      for (double v : logits.data()) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("construction and forward are deterministic") {
  for (const char* id : {"(b)", "(k)", "(n)"}) {
    const StructureSpec spec = small_spec(structure_from_preset(id, Family::ViT));
    Model a(spec, 42), b(spec, 42), c(spec, 43);
    REQUIRE(a.parameters().size() == b.parameters().size());
    bool any_differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      CHECK(a.parameters()[i].name == b.parameters()[i].name);
      auto da = a.parameters()[i].value.data(), db = b.parameters()[i].value.data(),
           dc = c.parameters()[i].value.data();
      CHECK(std::equal(da.begin(), da.end(), db.begin()));
      any_differs = any_differs || !std::equal(da.begin(), da.end(), dc.begin());
    }
    CHECK(any_differs);
    const Tensor x = random_tensor({2, 3, 32, 32}, 12, 0.0, 1.0);
    const Tensor la = a.forward(x), lb = b.forward(x);
    CHECK(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));
  }
}

TEST_CASE("window partition tiles and inverts") {
  const Tensor seq = random_tensor({2, 64, 3}, 13);
  WindowLayout plain({8, 8}, 4, 0);
  const Tensor w = plain.partition(seq);
  CHECK(w.shape() == Shape{8, 16, 3});
  CHECK(plain.windows() == 4);
  // first window holds grid rows 0..3, columns 0..3
  CHECK(w.at((0 * 16 + 5) * 3 + 1) == seq.at((1 * 8 + 1) * 3 + 1));

  for (std::size_t shift : {0u, 1u, 2u, 3u}) {
    WindowLayout layout({8, 8}, 4, shift);
    const Tensor back = layout.merge(layout.partition(seq));
    CHECK(std::equal(back.data().begin(), back.data().end(), seq.data().begin()));
  }
  WindowLayout shifted({8, 8}, 4, 2);
  // after rolling by 2 toward the origin, window 0 starts at grid token (2, 2)
  CHECK(shifted.partition(seq).at(0) == seq.at((2 * 8 + 2) * 3));

  CHECK_THROWS_AS(WindowLayout({8, 8}, 16, 0), ConfigError);
  CHECK_THROWS_AS(WindowLayout({8, 8}, 4, 4), ConfigError);
}

TEST_CASE("block aggregate halves the side") {
  ParamStore store(3);
  Norm norm(store, "n", 6, NormKind::LayerNorm);
  const Tensor map = random_tensor({2, 4, 8, 8}, 14);
  const Tensor w = random_tensor({6, 4, 3, 3}, 15);
  const Tensor b = random_tensor({6}, 16);
  CHECK(block_aggregate(map, w, b, &norm).shape() == Shape{2, 6, 4, 4});

  SUBCASE("identity conv keeps a constant map") {
    std::vector<double> id(3 * 3 * 3 * 3, 0.0);
    for (std::size_t c = 0; c < 3; ++c) id[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    const Tensor out = block_aggregate(Tensor::full({1, 3, 8, 8}, 0.37), Tensor::from_data({3, 3, 3, 3}, id),
                                       Tensor::zeros({3}), nullptr);
    REQUIRE(out.shape() == Shape{1, 3, 4, 4});
    for (double v : out.data()) CHECK(v == 0.37);
  }
  SUBCASE("odd side is a configuration error") {
    CHECK_THROWS_AS(block_aggregate(Tensor::zeros({1, 4, 7, 7}), w, b, &norm), ConfigError);
  }
  SUBCASE("gradient matches finite differences") {
    const Tensor x = random_tensor({1, 4, 4, 4}, 17);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(block_aggregate(t, w, b, &norm)); }, x) <= 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(block_aggregate(x, t, b, &norm)); }, w) <= 1e-4);
  }
}

TEST_CASE("single-token attention is exactly one and passes the value through") {
  ParamStore store(21);
  Attention attn(store, "a", 8, 2, Projection::Kind::Linear, {1, 1}, std::nullopt);
  const auto params = store.take();
  auto find = [&](const std::string& name) {
    for (const auto& p : params)
      if (p.name == name) return p.value;
    FAIL("missing " << name);
    return Tensor{};
  };
  const Tensor x = random_tensor({3, 1, 8}, 22);
  std::vector<Tensor> weights;
  const Tensor out = attn.forward(x, &weights);
  REQUIRE(weights.size() == 1);
  for (double a : weights[0].data()) CHECK(a == 1.0);
  const Tensor v = ops::add(ops::matmul(x, find("a.v.weight")), find("a.v.bias"));
  const Tensor expect = ops::add(ops::matmul(v, find("a.o.weight")), find("a.o.bias"));
  CHECK(rgrid::testing::max_abs_diff(out.data(), expect.data()) <= 1e-14);
}

TEST_CASE("attention rows sum to one") {
  for (const char* id : {"(b)", "(k)", "(m)"}) {
    CAPTURE(id);
    const StructureSpec spec = small_spec(structure_from_preset(id, Family::ViT));
    Model model(spec, 8);
    ForwardTrace trace;
    NoGradGuard no_grad;
    model.forward(random_tensor({2, 3, 32, 32}, 9, 0.0, 1.0), &trace);
    REQUIRE(!trace.attention.empty());
    double worst = 0.0;
    for (const Tensor& a : trace.attention) {
      const std::size_t T = a.shape().back();
      for (std::size_t r = 0; r < a.numel() / T; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < T; ++c) s += a.at(r * T + c);
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("zero block weights with residual skips give the identity stack") {
  for (const char* id : {"(b)", "(d)", "(h)"}) {
    for (Family family : {Family::ViT, Family::VMLP}) {
      CAPTURE(id);
      StructureSpec spec = small_spec(structure_from_preset(id, family));
      Model model(spec, 10);
      for (auto& p : model.parameters()) {
        if (p.name.rfind("stage", 0) != 0) continue;
        auto d = p.value.mutable_data();
        std::fill(d.begin(), d.end(), 0.0);
      }
      ForwardTrace trace;
      NoGradGuard no_grad;
      model.forward(random_tensor({2, 3, 32, 32}, 19, 0.0, 1.0), &trace);
      const Tensor& z0 = trace.embedding;
      const Tensor& last = trace.block_outputs.back();
      REQUIRE(last.shape() == z0.shape());
      CHECK(std::equal(last.data().begin(), last.data().end(), z0.data().begin()));
    }
  }
}

TEST_CASE("one mixer block matches finite differences for every token mixer") {
  struct Case {
    const char* name;
    Family family;
    TokenMixerKind mixer;
    ChannelMlpKind cmlp;
    Stacking stacking;
  };
  const Case cases[] = {
      {"ViT Ori", Family::ViT, TokenMixerKind::Ori, ChannelMlpKind::Ori, Stacking::OriViT},
      {"ViT Conv", Family::ViT, TokenMixerKind::Conv, ChannelMlpKind::Conv, Stacking::ImagePy},
      {"ViT WindowShift", Family::ViT, TokenMixerKind::WindowShift, ChannelMlpKind::Ori, Stacking::SwinBased},
      {"VMLP Ori", Family::VMLP, TokenMixerKind::Ori, ChannelMlpKind::Conv, Stacking::OriViT},
      {"VMLP Conv", Family::VMLP, TokenMixerKind::Conv, ChannelMlpKind::Ori, Stacking::CNNBased},
      {"VMLP WindowShift", Family::VMLP, TokenMixerKind::WindowShift, ChannelMlpKind::None, Stacking::SwinBased},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    StructureSpec spec;
    spec.family = c.family;
    spec.token_mixer = c.mixer;
    spec.cmlp = c.cmlp;
    spec.stacking = c.stacking;
    spec.embedding = c.stacking == Stacking::OriViT ? EmbeddingKind::Ori : EmbeddingKind::PConv;
    spec.image = {8, 8, 3};
    spec.patch = 1;
    spec.embed_dim = 4;
    spec.heads = 2;
    spec.mlp_ratio = 2.0;
    spec.stage_layers = c.stacking == Stacking::OriViT ? std::vector<std::size_t>{2} : std::vector<std::size_t>{2, 1};
    REQUIRE(validate_structure(spec).ok);
    const StageGeometry stage = stage_plan(spec).front();
    ParamStore store(31);
    // layer 1 so the window variant exercises a shift
    MixerBlock block = make_mixer_block(store, "blk", spec, stage, 1);
    const Tensor z = random_tensor({1, stage.grid_h * stage.grid_w, stage.dim}, 32);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(block.forward(t)); }, z) <= 1e-4);
  }
}

TEST_CASE("structure JSON round trip") {
  for (const std::string& id : preset_ids()) {
    const StructureSpec spec = structure_from_preset(id, Family::VMLP);
    CHECK(structure_from_json(structure_to_json(spec)) == spec);
  }
  StructureSpec odd;
  odd.mlp_ratio = 2.5;
  odd.image = {16, 24, 1};
  odd.stage_layers = {3, 4};
  CHECK(structure_from_json(structure_to_json(odd)) == odd);
  CHECK_THROWS_AS(structure_from_json(R"({"famly":"ViT"})"), UsageError);
  CHECK_THROWS_AS(structure_from_json(R"({"norm":"BatchNorm"})"), UsageError);
  CHECK_THROWS_AS(structure_from_json("[1,2]"), UsageError);
}

TEST_CASE("model rejects images of the wrong geometry") {
  Model model(small_spec(structure_from_preset("(b)", Family::ViT)), 1);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 16, 16})), ConfigError);
  CHECK_THROWS_AS(model.parameter("nope"), UsageError);
}
