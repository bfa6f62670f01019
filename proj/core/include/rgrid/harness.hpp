#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/data.hpp"
#include "rgrid/diagnostics.hpp"
#include "rgrid/model.hpp"
#include "rgrid/structure.hpp"
#include "rgrid/train.hpp"

namespace rgrid {

struct DatasetConfig {
  enum class Kind { Synthetic, Cifar10 };
  Kind kind = Kind::Synthetic;
  // synthetic: `synthetic` drives the training set; the evaluation set uses
  // the same spec with eval_count samples and a derived seed
  SyntheticFreqSpec synthetic;
  std::size_t eval_count = 256;
  // cifar10
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> eval_files;
  std::size_t train_limit = 0;  // 0 = all
  std::size_t eval_limit = 0;
  /// Fold per-channel training-set mean/std into the model's first layer.
  bool normalize = false;
};

/// Desk-scale adjustments applied on top of every preset.
struct StructureOverrides {
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> heads;
  std::optional<std::size_t> patch;
  std::optional<double> mlp_ratio;
  std::map<Stacking, std::vector<std::size_t>> stage_layers;
};

enum class TrainingMode { Natural, Adversarial };
std::string_view to_string(TrainingMode mode);
TrainingMode parse_training_mode(std::string_view text);

struct EvaluationConfig {
  std::optional<AttackSpec> pgd;
  std::optional<AttackSpec> square;
  std::size_t square_queries = 100;
  std::size_t max_samples = 256;
  std::size_t batch = 64;
};

struct HeatmapConfig {
  double v = 4.0;
  std::size_t samples = 256;
};

struct LipschitzConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 50;
  std::size_t restarts = 3;
  std::size_t samples = 32;
};

/// Parsed experiment manifest (JSON; see README for the schema). Unknown
/// keys are rejected at every level.
struct ExperimentManifest {
  std::string hash;  // hex FNV-1a of the canonical manifest text
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::filesystem::path output_dir = "out";
  Family family = Family::ViT;
  std::vector<std::string> presets;
  std::optional<StructureSpec> structure;
  StructureOverrides overrides;
  DatasetConfig dataset;
  TrainConfig train;
  std::vector<TrainingMode> modes{TrainingMode::Adversarial};
  AttackSpec adversarial;  // inner max for TrainingMode::Adversarial
  EvaluationConfig evaluation;
  std::optional<HeatmapConfig> heatmap;
  std::optional<LipschitzConfig> lipschitz;
  std::vector<double> prune_fractions;
  bool save_checkpoints = false;
  /// Load this model instead of training (single-model subcommands).
  std::optional<std::filesystem::path> checkpoint;
};

/// Relative paths inside the manifest resolve against `base_dir`.
ExperimentManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentManifest load_manifest(const std::filesystem::path& path);

struct ResolvedStructure {
  std::string id;  // preset id, or "custom"
  StructureSpec spec;
  ValidationResult validation;
};

/// Preset (or explicit) specs with overrides applied and image geometry and
/// class count taken from the dataset. Not validated-or-throw: each entry
/// carries its own verdict.
std::vector<ResolvedStructure> resolve_structures(const ExperimentManifest& manifest);

struct Datasets {
  LabeledImageSet train;
  LabeledImageSet eval;
};
Datasets load_datasets(const DatasetConfig& config);

/// One CSV row.
struct ExperimentRecord {
  std::string preset;
  std::string family;
  std::string training_mode;
  std::uint64_t seed = 0;
  std::optional<double> prune_fraction;
  std::optional<std::size_t> nonzero_weights;
  std::optional<std::size_t> param_count;
  std::optional<double> clean_acc;
  std::optional<double> pgd_acc;
  std::optional<double> ensemble_acc;
  std::optional<double> lipschitz;
  std::optional<double> heatmap_hf_error;
  std::optional<double> final_loss;
  std::string input_norm;
  std::string error;
  double wall_time_s = 0.0;  // reported separately; never in results.csv
};

inline constexpr int kResultsSchemaVersion = 1;
std::string results_csv_header();
std::string results_csv_row(const ExperimentRecord& record, const std::string& manifest_hash);
std::string results_csv(const std::vector<ExperimentRecord>& records, const std::string& manifest_hash);

/// Seed of one (structure id, seed index) cell; independent of grid order.
std::uint64_t cell_seed(std::uint64_t manifest_seed, std::string_view id, std::size_t seed_index);

/// Builds and trains (or loads, when the manifest names a checkpoint) one
/// model. `fit` is empty when loaded.
struct PreparedModel {
  Model model;
  FitResult fit;
};
PreparedModel prepare_model(const ExperimentManifest& manifest, const ResolvedStructure& structure, TrainingMode mode,
                            std::uint64_t seed, const Datasets& data,
                            const std::filesystem::path& checkpoint_out = {});

/// The manifest's evaluation attacks, in CSV column order (pgd, square).
std::vector<EvalAttack> evaluation_attacks(const EvaluationConfig& config);

struct GridResult {
  std::vector<ExperimentRecord> records;
  std::filesystem::path results_path;
};

/// The comparison protocol per (structure, seed, mode): train, clean / PGD /
/// ensemble evaluation, Lipschitz, heatmap, optional prune sweep. Failed
/// cells yield rows with an error and the run continues. Writes
/// results.csv, timings.csv, heatmaps/ and checkpoints/ under the output
/// directory. Rows are ordered by structure, seed, mode.
GridResult run_grid(const ExperimentManifest& manifest, std::size_t jobs = 1);

/// "mean0|mean1|.../std0|std1|..." or "none".
std::string describe_normalization(const InputNormalization& norm);

}  // namespace rgrid
