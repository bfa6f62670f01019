#include <cstdio>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rgrid/diagnostics.hpp"
#include "rgrid/error.hpp"
#include "rgrid/harness.hpp"
#include "rgrid/io.hpp"
#include "rgrid/prune.hpp"
#include "rgrid/rng.hpp"

using namespace rgrid;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string manifest;
  std::string out;
  std::optional<std::uint64_t> seed_override;
  std::size_t jobs = 1;
  std::string preset;
  std::string family = "ViT";
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out + "\"";
}

ExperimentManifest load(const Options& o) {
  if (o.manifest.empty()) throw UsageError("--manifest is required for this subcommand");
  ExperimentManifest m = load_manifest(o.manifest);
  if (!o.out.empty()) m.output_dir = o.out;
  if (o.seed_override) {
    m.seed = *o.seed_override;
    m.hash = hex64(fnv1a(m.hash + ":seed=" + std::to_string(m.seed)));
  }
  if (!o.preset.empty()) {
    m.presets = {o.preset};
    m.structure.reset();
  }
  return m;
}

// Single-model subcommands use the first structure, seed index 0 and the
// first training mode.
struct Single {
  ExperimentManifest manifest;
  ResolvedStructure structure;
  TrainingMode mode;
  std::uint64_t seed;
  Datasets data;
};

Single single(const Options& o) {
  ExperimentManifest m = load(o);
  std::vector<ResolvedStructure> rs = resolve_structures(m);
  if (rs.empty()) throw UsageError("manifest names no structure");
  if (!rs[0].validation.ok) throw ValidationError(rs[0].validation.rule, rs[0].validation.message);
  const TrainingMode mode = m.modes.empty() ? TrainingMode::Natural : m.modes.front();
  const std::uint64_t seed = cell_seed(m.seed, rs[0].id, 0);
  Datasets data = load_datasets(m.dataset);
  return {std::move(m), std::move(rs[0]), mode, seed, std::move(data)};
}

std::string stem_of(const Single& s) {
  std::string id;
  for (char c : s.structure.id)
    if (std::isalnum(static_cast<unsigned char>(c))) id += c;
  return (id.empty() ? "x" : id) + "_" + std::string(to_string(s.mode)) + "_s0";
}

std::vector<std::size_t> first_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

int run_validate(const Options& o) {
  std::vector<ResolvedStructure> rs;
  if (o.manifest.empty()) {
    if (o.preset.empty()) throw UsageError("validate needs --manifest or --preset");
    StructureSpec spec = structure_from_preset(o.preset, parse_family(o.family));
    rs.push_back({o.preset, spec, validate_structure(spec)});
  } else {
    rs = resolve_structures(load(o));
  }
  std::optional<ResolvedStructure> failed;
  for (const auto& r : rs) {
    std::cout << r.id << " " << structure_to_json(r.spec) << "\n";
    if (!r.validation.ok && !failed) failed = r;
  }
  if (failed) throw ValidationError(failed->validation.rule, failed->id + ": " + failed->validation.message);
  return 0;
}

int run_train(const Options& o) {
  const Single s = single(o);
  const fs::path ckpt = s.manifest.output_dir / "checkpoints" / (stem_of(s) + ".ckpt");
  const PreparedModel p = prepare_model(s.manifest, s.structure, s.mode, s.seed, s.data, ckpt);
  std::cout << "preset=" << s.structure.id << " mode=" << to_string(s.mode)
            << " epochs=" << p.fit.epochs_completed << " steps=" << p.fit.losses.size();
  if (!p.fit.losses.empty()) std::cout << " final_loss=" << format_g6(p.fit.losses.back());
  std::cout << " clean_acc=" << format_g6(clean_accuracy(logits_of(p.model), s.data.eval))
            << " checkpoint=" << ckpt.string() << "\n";
  if (p.fit.aborted) throw NumericError("training aborted: " + p.fit.abort_reason);
  return 0;
}

int run_attack(const Options& o) {
  const Single s = single(o);
  const PreparedModel p = prepare_model(s.manifest, s.structure, s.mode, s.seed, s.data);
  const std::vector<EvalAttack> attacks = evaluation_attacks(s.manifest.evaluation);
  const LabeledImageSet eval = s.data.eval.head(s.manifest.evaluation.max_samples);
  const RobustAccuracy acc =
      robust_accuracy(logits_of(p.model), eval, attacks, derive_seed(s.seed, 2), s.manifest.evaluation.batch);
  std::cout << "preset=" << s.structure.id << " samples=" << eval.size() << " clean_acc=" << format_g6(acc.clean);
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    std::cout << " " << attacks[a].name << "_acc=" << format_g6(acc.per_attack[a]);
  }
  if (!attacks.empty()) std::cout << " ensemble_acc=" << format_g6(acc.worst_case);
  std::cout << "\n";
  return 0;
}

int run_heatmap(const Options& o) {
  const Single s = single(o);
  const PreparedModel p = prepare_model(s.manifest, s.structure, s.mode, s.seed, s.data);
  const HeatmapConfig config = s.manifest.heatmap.value_or(HeatmapConfig{});
  HeatmapOptions opt;
  opt.v = config.v;
  opt.max_samples = config.samples;
  opt.seed = derive_seed(s.seed, 4);
  opt.batch_size = s.manifest.evaluation.batch;
  const FourierHeatmap map = fourier_heatmap(logits_of(p.model), s.data.eval, opt);
  const std::string comment = "manifest=" + s.manifest.hash + " preset=" + s.structure.id +
                              " mode=" + std::string(to_string(s.mode)) + " seed=0 v=" + format_g6(map.norm_v) +
                              " samples=" + std::to_string(map.sample_count);
  const fs::path base = s.manifest.output_dir / "heatmaps" / stem_of(s);
  write_file_atomic(fs::path(base.string() + ".ppm"), render_heatmap_ppm(map.error, map.n, comment));
  write_file_atomic(fs::path(base.string() + ".csv"), heatmap_csv(map.error, map.n, comment));
  std::cout << "preset=" << s.structure.id << " hf_error=" << format_g6(map.high_frequency_mean())
            << " ppm=" << base.string() << ".ppm\n";
  return 0;
}

int run_lipschitz(const Options& o) {
  const Single s = single(o);
  const PreparedModel p = prepare_model(s.manifest, s.structure, s.mode, s.seed, s.data);
  const LipschitzConfig config = s.manifest.lipschitz.value_or(LipschitzConfig{});
  const LabeledImageSet sub = s.data.eval.head(config.samples);
  LipschitzOptions opt;
  opt.epsilon = config.epsilon;
  opt.steps = config.steps;
  opt.restarts = config.restarts;
  opt.seed = derive_seed(s.seed, 3);
  const LipschitzEstimate est = local_lipschitz(logits_of(p.model), sub.batch(first_indices(sub.size())), opt);
  std::cout << "preset=" << s.structure.id << " samples=" << sub.size() << " epsilon=" << format_g6(est.epsilon)
            << " lipschitz=" << format_g6(est.mean) << "\n";
  return 0;
}

int run_prune(const Options& o) {
  const Single s = single(o);
  if (s.manifest.prune_fractions.empty()) throw UsageError("manifest has no prune_fractions");
  const PreparedModel p = prepare_model(s.manifest, s.structure, s.mode, s.seed, s.data);
  const std::vector<EvalAttack> attacks = evaluation_attacks(s.manifest.evaluation);
  const LabeledImageSet eval = s.data.eval.head(s.manifest.evaluation.max_samples);
  const auto rows = sparsity_sweep(p.model, s.manifest.prune_fractions, eval, attacks, derive_seed(s.seed, 2));
  std::vector<ExperimentRecord> records;
  for (const SweepRow& row : rows) {
    ExperimentRecord r;
    r.preset = s.structure.id;
    r.family = std::string(to_string(s.structure.spec.family));
    r.training_mode = std::string(to_string(s.mode));
    r.prune_fraction = row.fraction;
    r.nonzero_weights = row.nonzero;
    r.param_count = p.model.parameter_count();
    r.clean_acc = row.clean_accuracy;
    if (s.manifest.evaluation.pgd) r.pgd_acc = row.robust_accuracy[0];
    if (!attacks.empty()) r.ensemble_acc = row.worst_case;
    r.input_norm = describe_normalization(p.model.input_normalization());
    records.push_back(r);
    std::cout << "fraction=" << format_g6(row.fraction) << " nonzero=" << row.nonzero << "/" << row.total_prunable
              << " clean_acc=" << format_g6(row.clean_accuracy) << "\n";
  }
  write_file_atomic(s.manifest.output_dir / "prune.csv", results_csv(records, s.manifest.hash));
  return 0;
}

int run_grid_cmd(const Options& o) {
  const ExperimentManifest m = load(o);
  const GridResult result = run_grid(m, o.jobs);
  std::size_t failed = 0;
  for (const auto& r : result.records) failed += !r.error.empty();
  std::cout << "rows=" << result.records.size() << " failed=" << failed << " results=" << result.results_path.string()
            << "\n";
  return 0;
}

void print_error(const std::string& kind, const std::string& rule, const std::string& message) {
  std::cerr << "error kind=" << kind;
  if (!rule.empty()) std::cerr << " rule=" << rule;
  std::cerr << " message=" << quote(message) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-grid robustness laboratory"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--manifest", o.manifest, "Experiment manifest (JSON)");
    sub->add_option("--out", o.out, "Output directory (overrides the manifest)");
    sub->add_option("--seed-override", o.seed_override, "Replace the manifest seed");
    sub->add_option("--preset", o.preset, "Use only this preset id");
  };
  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Entry entries[] = {
      {"validate", "Resolve and validate structures; print them as JSON", run_validate},
      {"train", "Train the first structure and write a checkpoint", run_train},
      {"attack", "Clean, PGD and ensemble accuracy of one model", run_attack},
      {"heatmap", "Fourier sensitivity heatmap of one model", run_heatmap},
      {"lipschitz", "Empirical local Lipschitz estimate of one model", run_lipschitz},
      {"prune", "Magnitude-pruning sweep of one model", run_prune},
      {"grid", "Run the full comparison grid", run_grid_cmd},
  };
  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> subs;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub);
    if (std::string(e.name) == "validate") {
      sub->add_option("--family", o.family, "ViT or VMLP (with --preset and no manifest)");
    }
    if (std::string(e.name) == "grid") sub->add_option("--jobs", o.jobs, "Parallel grid cells")->check(CLI::PositiveNumber);
    subs.emplace_back(sub, e.run);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", "", e.what());
    return 2;
  }

  try {
    for (auto& [sub, run] : subs)
      if (sub->parsed()) return run(o);
  } catch (const ValidationError& e) {
    print_error(e.kind(), e.rule(), e.what());
    return 2;
  } catch (const ConfigError& e) {
    print_error(e.kind(), "", e.what());
    return 2;
  } catch (const UsageError& e) {
    print_error(e.kind(), "", e.what());
    return 2;
  } catch (const Error& e) {
    print_error(e.kind(), "", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", "", e.what());
    return 1;
  }
  return 1;
}
