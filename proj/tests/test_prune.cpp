#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "rgrid/error.hpp"
#include "rgrid/prune.hpp"
#include "rgrid/train.hpp"
#include "support.hpp"

using namespace rgrid;

namespace {

StructureSpec toy_spec() {
  StructureSpec spec = structure_from_preset("(b)", Family::ViT);
  spec.image = {8, 8, 3};
  spec.patch = 4;
  spec.embed_dim = 16;
  spec.heads = 2;
  spec.mlp_ratio = 2.0;
  spec.classes = 2;
  spec.stage_layers = {2};
  return spec;
}

std::size_t count_prunable(const Model& m) {
  std::size_t total = 0;
  for (const auto& p : m.parameters())
    if (is_prunable(p.name)) total += p.value.numel();
  return total;
}

std::size_t count_nonzero_prunable(const Model& m) {
  std::size_t nz = 0;
  for (const auto& p : m.parameters())
    if (is_prunable(p.name))
      for (double w : p.value.data()) nz += w != 0.0;
  return nz;
}

bool same_params(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto da = a.parameters()[i].value.data(), db = b.parameters()[i].value.data();
    if (!std::equal(da.begin(), da.end(), db.begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("prunable parameter names") {
  CHECK(is_prunable("stage0.block0.attn.q.weight"));
  CHECK(is_prunable("head.classifier.weight"));
  CHECK_FALSE(is_prunable("stage0.block0.attn.q.bias"));
  CHECK_FALSE(is_prunable("embed.pos"));
  CHECK_FALSE(is_prunable("head.norm.gain"));
}

TEST_CASE("smallest weights go first") {
  std::vector<NamedTensor> params = {{"fc.weight", Tensor::from_data({5}, {3, 1, 4, 1, 5})},
                                     {"fc.bias", Tensor::from_data({2}, {0.01, -0.02})}};
  const PruneMask mask = magnitude_prune(params, 0.4);
  CHECK(params[0].value.data()[0] == 3.0);
  CHECK(std::vector<double>(params[0].value.data().begin(), params[0].value.data().end()) ==
        std::vector<double>{3, 0, 4, 0, 5});
  CHECK(params[1].value.at(0) == 0.01);
  REQUIRE(mask.names == std::vector<std::string>{"fc.weight"});
  CHECK(mask.keep[0] == std::vector<bool>{true, false, true, false, true});
  CHECK(mask.total_prunable == 5);
  CHECK(mask.achieved_nonzero == 3);
  CHECK(mask.target_fraction == 0.4);
}

TEST_CASE("ties break by parameter order then index") {
  std::vector<NamedTensor> params = {{"a.weight", Tensor::from_data({3}, {2, -1, 1})},
                                     {"b.weight", Tensor::from_data({2}, {1, -1})}};
  const PruneMask mask = magnitude_prune(params, 0.6);  // 3 of 5
  CHECK(mask.keep[0] == std::vector<bool>{true, false, false});
  CHECK(mask.keep[1] == std::vector<bool>{false, true});
  CHECK(params[1].value.at(1) == -1.0);
}

TEST_CASE("nonzero accounting is exact at every fraction") {
  const Model base(toy_spec(), 3);
  const std::size_t total = count_prunable(base);
  for (double f : {0.0, 0.1, 0.25, 0.333, 0.5, 0.9, 0.99, 1.0}) {
    const PrunedModel pruned = magnitude_prune_copy(base, f);
    const auto removed = static_cast<std::size_t>(std::floor(f * static_cast<double>(total)));
    CHECK(pruned.mask.total_prunable == total);
    CHECK(pruned.mask.achieved_nonzero == total - removed);
    CHECK(count_nonzero_prunable(pruned.model) == total - removed);
    std::size_t kept = 0;
    for (std::size_t p = 0; p < pruned.mask.keep.size(); ++p) {
      const Tensor w = pruned.model.parameter(pruned.mask.names[p]);
      REQUIRE(pruned.mask.keep[p].size() == w.numel());
      for (std::size_t k = 0; k < w.numel(); ++k) {
        kept += pruned.mask.keep[p][k];
        if (!pruned.mask.keep[p][k]) CHECK(w.at(k) == 0.0);
      }
    }
    CHECK(kept == pruned.mask.achieved_nonzero);
  }
  CHECK(count_nonzero_prunable(base) == total);
}

TEST_CASE("fraction 0 is bit-identical, fraction 1 is input independent") {
  const Model base(toy_spec(), 4);
  const Tensor x = rgrid::testing::random_tensor({4, 3, 8, 8}, 1, 0.0, 1.0);
  const PrunedModel none = magnitude_prune_copy(base, 0.0);
  CHECK(same_params(none.model, base));
  const Tensor a = base.forward(x), b = none.model.forward(x);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  const PrunedModel all = magnitude_prune_copy(base, 1.0);
  CHECK(all.mask.achieved_nonzero == 0);
  const Tensor y = all.model.forward(x);
  for (std::size_t s = 1; s < 4; ++s)
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(y.at(s * 2 + k) - y.at(k)) < 1e-12);
  CHECK_THROWS_AS(magnitude_prune_copy(base, 1.5), UsageError);
  CHECK_THROWS_AS(magnitude_prune_copy(base, -0.1), UsageError);
}

TEST_CASE("pruning is idempotent and respects a global threshold") {
  const Model base(toy_spec(), 5);
  PrunedModel once = magnitude_prune_copy(base, 0.7);
  const Model snapshot = once.model.clone();
  const PruneMask again = magnitude_prune(once.model, 0.7);
  CHECK(same_params(once.model, snapshot));
  CHECK(again.keep == once.mask.keep);

  double max_pruned = 0.0, min_kept = INFINITY;
  for (std::size_t p = 0; p < once.mask.names.size(); ++p) {
    const Tensor w = base.parameter(once.mask.names[p]);
    for (std::size_t k = 0; k < w.numel(); ++k) {
      if (once.mask.keep[p][k]) {
        min_kept = std::min(min_kept, std::abs(w.at(k)));
      } else {
        max_pruned = std::max(max_pruned, std::abs(w.at(k)));
      }
    }
  }
  CHECK(min_kept >= max_pruned);
  // the base model is untouched
  CHECK(count_nonzero_prunable(base) == count_prunable(base));
}

TEST_CASE("sparsity sweep") {
  SyntheticFreqSpec s;
  s.count = 64;
  s.seed = 2;
  const LabeledImageSet data = synth_freq_dataset(s);
  const Model base(toy_spec(), 6);
  EvalAttack pgd;
  pgd.name = "pgd";
  pgd.spec.steps = 3;
  const EvalAttack attacks[] = {pgd};

  const double zero[] = {0.0};
  const auto single = sparsity_sweep(base, zero, data, attacks, 1);
  REQUIRE(single.size() == 1);
  const RobustAccuracy direct = robust_accuracy(logits_of(base), data, attacks, 1);
  CHECK(single[0].clean_accuracy == direct.clean);
  CHECK(single[0].robust_accuracy == direct.per_attack);
  CHECK(single[0].worst_case == direct.worst_case);

  const double fractions[] = {0.0, 0.5, 0.9};
  const auto rows = sparsity_sweep(base, fractions, data, attacks, 1);
  REQUIRE(rows.size() == 3);
  const std::size_t total = count_prunable(base);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(rows[r].fraction == fractions[r]);
    CHECK(rows[r].total_prunable == total);
    CHECK(rows[r].nonzero == total - static_cast<std::size_t>(std::floor(fractions[r] * static_cast<double>(total))));
  }
  const double descending[] = {0.5, 0.1};
  CHECK_THROWS_AS(sparsity_sweep(base, descending, data, attacks, 1), UsageError);
}

TEST_CASE("heavy pruning does not help a trained toy model") {
  SyntheticFreqSpec s;
  s.count = 96;
  s.seed = 3;
  const LabeledImageSet data = synth_freq_dataset(s);
  std::vector<double> dense, sparse;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Model model(toy_spec(), 10 + seed);
    TrainConfig config;
    config.epochs = 12;
    config.batch = 16;
    config.seed = seed;
    Trainer(model, config).fit(data);
    const double fractions[] = {0.0, 0.99};
    const auto rows = sparsity_sweep(model, fractions, data, {}, seed);
    dense.push_back(rows[0].clean_accuracy);
    sparse.push_back(rows[1].clean_accuracy);
  }
  std::sort(dense.begin(), dense.end());
  std::sort(sparse.begin(), sparse.end());
  CHECK(sparse[1] <= dense[1]);
}
