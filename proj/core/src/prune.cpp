#include "rgrid/prune.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "rgrid/error.hpp"

namespace rgrid {

bool is_prunable(const std::string& name) {
  static constexpr std::string_view kSuffix = ".weight";
  return name.size() >= kSuffix.size() && name.compare(name.size() - kSuffix.size(), kSuffix.size(), kSuffix) == 0;
}

PruneMask magnitude_prune(std::vector<NamedTensor>& params, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw UsageError("prune fraction must be in [0, 1]");

  PruneMask mask;
  mask.target_fraction = fraction;
  std::vector<std::size_t> owners;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!is_prunable(params[p].name)) continue;
    owners.push_back(p);
    mask.names.push_back(params[p].name);
    mask.keep.emplace_back(params[p].value.numel(), true);
    mask.total_prunable += params[p].value.numel();
  }

  struct Entry {
    double magnitude;
    std::size_t param;
    std::size_t index;
  };
  std::vector<Entry> entries;
  entries.reserve(mask.total_prunable);
  for (std::size_t k = 0; k < owners.size(); ++k) {
    auto d = params[owners[k]].value.data();
    for (std::size_t i = 0; i < d.size(); ++i) entries.push_back({std::abs(d[i]), k, i});
  }
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(mask.total_prunable)));
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(count), entries.end(),
                    [](const Entry& a, const Entry& b) {
                      return std::tie(a.magnitude, a.param, a.index) < std::tie(b.magnitude, b.param, b.index);
                    });
  for (std::size_t e = 0; e < count; ++e) {
    mask.keep[entries[e].param][entries[e].index] = false;
    params[owners[entries[e].param]].value.mutable_data()[entries[e].index] = 0.0;
  }
  mask.achieved_nonzero = mask.total_prunable - count;
  return mask;
}

PruneMask magnitude_prune(Model& model, double fraction) { return magnitude_prune(model.parameters(), fraction); }

PrunedModel magnitude_prune_copy(const Model& model, double fraction) {
  Model copy = model.clone();
  PruneMask mask = magnitude_prune(copy, fraction);
  return {std::move(mask), std::move(copy)};
}

std::vector<SweepRow> sparsity_sweep(const Model& model, std::span<const double> fractions,
                                     const LabeledImageSet& data, std::span<const EvalAttack> attacks,
                                     std::uint64_t seed) {
  if (!std::is_sorted(fractions.begin(), fractions.end())) throw UsageError("prune fractions must be ascending");
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    PrunedModel pruned = magnitude_prune_copy(model, f);
    const RobustAccuracy acc = robust_accuracy(logits_of(pruned.model), data, attacks, seed);
    rows.push_back({f, pruned.mask.achieved_nonzero, pruned.mask.total_prunable, acc.clean, acc.per_attack,
                    acc.worst_case});
  }
  return rows;
}

}  // namespace rgrid
