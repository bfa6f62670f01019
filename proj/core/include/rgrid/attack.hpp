#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rgrid/data.hpp"
#include "rgrid/tensor.hpp"

namespace rgrid {

class Model;

/// Any differentiable classifier: images [B, C, H, W] -> logits [B, K].
using LogitFn = std::function<Tensor(const Tensor&)>;

LogitFn logits_of(const Model& model);

enum class AttackInit { Clean, UniformInBall };

std::string_view to_string(AttackInit init);
AttackInit parse_attack_init(std::string_view text);

/// l-infinity attack in raw [0, 1] pixel units.
struct AttackSpec {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 10;
  double step_size = 0.01;
  std::size_t restarts = 1;
  AttackInit init = AttackInit::Clean;

  void validate() const;
};

/// clip(x + eps * sign(grad), ball, [0, 1]); sign(0) = 0.
Tensor fgsm(const LogitFn& f, const Tensor& x, std::span<const int> labels, double epsilon);

/// Multi-restart PGD returning, per sample, the highest-loss iterate seen.
/// Every iterate is a candidate, including each restart's starting point.
/// With init = Clean the first restart starts at x and later restarts start
/// uniformly in the ball, so adding restarts only adds candidates.
Tensor pgd(const LogitFn& f, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           std::mt19937_64& rng);

/// Random-search black-box attack: per query, each sample proposes flipping
/// a square patch of its perturbation to +-eps (one sign per channel) and
/// keeps the proposal only if its loss strictly increases. Forward only.
Tensor square_lite(const LogitFn& f, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                   std::size_t queries, std::mt19937_64& rng);

struct EvalAttack {
  enum class Kind { Pgd, Square };
  std::string name;
  Kind kind = Kind::Pgd;
  AttackSpec spec;
  std::size_t queries = 0;  // Square only
};

struct RobustAccuracy {
  double clean = 0.0;
  std::vector<double> per_attack;  // aligned with the attack list
  double worst_case = 0.0;         // correct on clean and under every attack
  std::size_t samples = 0;
};

/// A sample counts as robust under an attack when both the clean input and
/// the adversary are classified correctly. Batches use independent rngs
/// derived from `seed`.
RobustAccuracy robust_accuracy(const LogitFn& f, const LabeledImageSet& data, std::span<const EvalAttack> attacks,
                               std::uint64_t seed, std::size_t batch_size = 64);

double clean_accuracy(const LogitFn& f, const LabeledImageSet& data, std::size_t batch_size = 64);

/// Per-sample cross-entropy of f(x), without a tape.
std::vector<double> per_sample_loss(const LogitFn& f, const Tensor& x, std::span<const int> labels);

}  // namespace rgrid
