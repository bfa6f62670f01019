#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/data.hpp"
#include "rgrid/model.hpp"

namespace rgrid {

/// Weight matrices and kernels (names ending in ".weight") are prunable;
/// biases, norm gains/shifts and positional embeddings are not.
bool is_prunable(const std::string& parameter_name);

struct PruneMask {
  std::vector<std::string> names;         // prunable parameters, model order
  std::vector<std::vector<bool>> keep;    // aligned with each parameter's data
  double target_fraction = 0.0;
  std::size_t total_prunable = 0;
  std::size_t achieved_nonzero = 0;       // count of kept entries
};

/// Zeros the floor(fraction * total) globally smallest-|w| prunable weights.
/// Ties are broken by parameter order, then flat index. Non-prunable
/// entries of `params` are ignored.
PruneMask magnitude_prune(std::vector<NamedTensor>& params, double fraction);
PruneMask magnitude_prune(Model& model, double fraction);

struct PrunedModel {
  PruneMask mask;
  Model model;
};
/// Pruned copy; `model` is untouched.
PrunedModel magnitude_prune_copy(const Model& model, double fraction);

struct SweepRow {
  double fraction = 0.0;
  std::size_t nonzero = 0;
  std::size_t total_prunable = 0;
  double clean_accuracy = 0.0;
  std::vector<double> robust_accuracy;  // per attack
  double worst_case = 0.0;
};

/// One row per fraction (ascending), each pruned from the unpruned model.
std::vector<SweepRow> sparsity_sweep(const Model& model, std::span<const double> fractions,
                                     const LabeledImageSet& data, std::span<const EvalAttack> attacks,
                                     std::uint64_t seed);

}  // namespace rgrid
