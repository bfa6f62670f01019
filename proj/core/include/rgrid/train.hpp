#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/data.hpp"
#include "rgrid/layers.hpp"
#include "rgrid/model.hpp"

namespace rgrid {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 1;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  /// When set, every step trains on PGD adversaries of the batch.
  std::optional<AttackSpec> adversarial;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view text);

/// Per-parameter optimizer slots: SGD keeps one velocity buffer, Adam the
/// first and second moments.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config);

  /// Applies one update from the parameters' accumulated grads. Parameters
  /// without a grad are left untouched.
  void step(std::vector<NamedTensor>& params);

  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState state) { state_ = std::move(state); }

 private:
  TrainConfig config_;
  OptimizerState state_;
};

struct FitResult {
  std::vector<double> losses;  // one per step taken
  std::size_t epochs_completed = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Self-describing training snapshot. File layout (little endian):
///   "RGRIDCKP" | u32 version | u64 n + n bytes of JSON header
///   (spec, model seed, input normalization, train config, epoch, steps,
///   rng state) | u32 optimizer kind | u64 t | u64 param count |
///   per parameter: u32 name length, name, u32 rank, u64 dims[rank],
///   f64 values, u32 slot count, f64 slots
struct Checkpoint {
  StructureSpec spec;
  std::uint64_t model_seed = 0;
  InputNormalization input_norm;
  TrainConfig config;
  std::size_t epoch = 0;
  std::uint64_t steps = 0;
  std::string rng_state;
  struct Param {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Param> params;
  OptimizerState optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Rebuilds the model and copies the stored parameters in.
Model model_from_checkpoint(const Checkpoint& ckpt);

/// Owns the optimizer, data-order rng and step counter for one model.
/// (seed, config, data) fully determine the parameter trajectory.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig config);

  /// One optimizer step on a batch. Throws NumericError (before touching any
  /// parameter) when the loss is not finite.
  double train_step(const Tensor& images, std::span<const int> labels);

  /// Runs epochs until config.epochs are done. A non-finite loss stops the
  /// run with aborted = true; parameters stay at the last good step. When
  /// `checkpoint_path` is given, a checkpoint is written after every epoch.
  FitResult fit(const LabeledImageSet& data, const std::filesystem::path& checkpoint_path = {});

  Checkpoint checkpoint() const;
  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state, epoch and rng. The checkpoint's
  /// spec and parameter layout must match the model.
  void restore(const Checkpoint& ckpt);

  std::size_t epoch() const { return epoch_; }
  std::uint64_t steps() const { return steps_; }
  const TrainConfig& config() const { return config_; }
  Model& model() { return model_; }

 private:
  Model& model_;
  TrainConfig config_;
  Optimizer optimizer_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
  std::uint64_t steps_ = 0;
};

/// Convenience wrapper: fresh Trainer, full fit.
FitResult fit(Model& model, const LabeledImageSet& data, const TrainConfig& config);

}  // namespace rgrid
