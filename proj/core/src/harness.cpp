#include "rgrid/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <exception>
#include <initializer_list>
#include <thread>

#include "json.hpp"
#include "rgrid/error.hpp"
#include "rgrid/io.hpp"
#include "rgrid/prune.hpp"
#include "rgrid/rng.hpp"

namespace rgrid {

using json = nlohmann::json;

std::string_view to_string(TrainingMode mode) { return mode == TrainingMode::Natural ? "natural" : "adversarial"; }

TrainingMode parse_training_mode(std::string_view text) {
  if (text == "natural") return TrainingMode::Natural;
  if (text == "adversarial") return TrainingMode::Adversarial;
  throw ConfigError("manifest: unknown training mode '" + std::string(text) + "' (expected natural or adversarial)");
}

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("manifest: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      std::string list;
      for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
      throw ConfigError("manifest: unknown key '" + it.key() + "' in " + where + " (allowed: " + list + ")");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

AttackSpec parse_attack(const json& j, const std::string& where, std::size_t* queries = nullptr) {
  if (queries) {
    check_keys(j, {"epsilon", "steps", "step_size", "restarts", "init", "queries"}, where);
    read_opt(j, "queries", *queries);
  } else {
    check_keys(j, {"epsilon", "steps", "step_size", "restarts", "init"}, where);
  }
  AttackSpec a;
  read_opt(j, "epsilon", a.epsilon);
  read_opt(j, "steps", a.steps);
  read_opt(j, "step_size", a.step_size);
  read_opt(j, "restarts", a.restarts);
  if (j.contains("init")) a.init = parse_attack_init(j.at("init").get<std::string>());
  a.validate();
  return a;
}

std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

DatasetConfig parse_dataset(const json& j, const std::filesystem::path& base) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("manifest: dataset needs a 'kind'");
  DatasetConfig d;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "synthetic") {
    check_keys(j, {"kind", "side", "channels", "low_freq_index", "high_freq_index", "amplitude", "noise_std", "count",
                   "eval_count", "seed", "normalize"},
               "dataset");
    d.kind = DatasetConfig::Kind::Synthetic;
    auto& s = d.synthetic;
    read_opt(j, "side", s.side);
    read_opt(j, "channels", s.channels);
    read_opt(j, "low_freq_index", s.low_freq_index);
    read_opt(j, "high_freq_index", s.high_freq_index);
    read_opt(j, "amplitude", s.amplitude);
    read_opt(j, "noise_std", s.noise_std);
    read_opt(j, "count", s.count);
    read_opt(j, "seed", s.seed);
    read_opt(j, "eval_count", d.eval_count);
    if (s.side == 0 || s.channels == 0 || s.count == 0 || d.eval_count == 0) {
      throw ConfigError("manifest: synthetic side, channels, count and eval_count must be positive");
    }
    if (s.low_freq_index >= s.side || s.high_freq_index >= s.side) {
      throw ConfigError("manifest: synthetic frequency indices must be below side");
    }
  } else if (kind == "cifar10") {
    check_keys(j, {"kind", "train_files", "eval_files", "train_limit", "eval_limit", "normalize"}, "dataset");
    d.kind = DatasetConfig::Kind::Cifar10;
    for (const auto& p : j.at("train_files")) d.train_files.push_back(resolve_path(p.get<std::string>(), base));
    for (const auto& p : j.at("eval_files")) d.eval_files.push_back(resolve_path(p.get<std::string>(), base));
    if (d.train_files.empty() || d.eval_files.empty()) {
      throw ConfigError("manifest: cifar10 needs non-empty train_files and eval_files");
    }
    read_opt(j, "train_limit", d.train_limit);
    read_opt(j, "eval_limit", d.eval_limit);
  } else {
    throw ConfigError("manifest: unknown dataset kind '" + kind + "' (expected synthetic or cifar10)");
  }
  read_opt(j, "normalize", d.normalize);
  return d;
}

}  // namespace

ExperimentManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  ExperimentManifest m;
  try {
    check_keys(j,
               {"seed", "seeds", "output_dir", "family", "presets", "structure", "overrides", "dataset", "train", "modes",
                "adversarial", "evaluation", "heatmap", "lipschitz", "prune_fractions", "save_checkpoints",
                "checkpoint"},
               "manifest");
    m.hash = hex64(fnv1a(j.dump()));
    read_opt(j, "seed", m.seed);
    read_opt(j, "seeds", m.seeds);
    if (m.seeds == 0) throw ConfigError("manifest: seeds must be >= 1");
    if (j.contains("output_dir")) m.output_dir = resolve_path(j.at("output_dir").get<std::string>(), base_dir);
    else m.output_dir = resolve_path("out", base_dir);
    if (j.contains("family")) m.family = parse_family(j.at("family").get<std::string>());

    if (j.contains("presets") == j.contains("structure")) {
      throw ConfigError("manifest: exactly one of 'presets' or 'structure' is required");
    }
    if (j.contains("presets")) {
      m.presets = j.at("presets").get<std::vector<std::string>>();
      if (m.presets.empty()) throw ConfigError("manifest: presets is empty");
      for (const auto& id : m.presets) structure_from_preset(id, m.family);  // UsageError listing valid ids
    } else {
      m.structure = structure_from_json(j.at("structure").dump());
    }

    if (j.contains("overrides")) {
      const json& o = j.at("overrides");
      check_keys(o, {"embed_dim", "heads", "patch", "mlp_ratio", "stage_layers"}, "overrides");
      if (o.contains("embed_dim")) m.overrides.embed_dim = o.at("embed_dim").get<std::size_t>();
      if (o.contains("heads")) m.overrides.heads = o.at("heads").get<std::size_t>();
      if (o.contains("patch")) m.overrides.patch = o.at("patch").get<std::size_t>();
      if (o.contains("mlp_ratio")) m.overrides.mlp_ratio = o.at("mlp_ratio").get<double>();
      if (o.contains("stage_layers")) {
        const json& s = o.at("stage_layers");
        check_keys(s, {"OriViT", "CNNBased", "SwinBased", "ImagePy"}, "overrides.stage_layers");
        for (auto it = s.begin(); it != s.end(); ++it) {
          m.overrides.stage_layers[parse_stacking(it.key())] = it->get<std::vector<std::size_t>>();
        }
      }
    }

    if (!j.contains("dataset")) throw ConfigError("manifest: 'dataset' is required");
    m.dataset = parse_dataset(j.at("dataset"), base_dir);

    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, {"optimizer", "lr", "momentum", "beta1", "beta2", "adam_eps", "epochs", "batch"}, "train");
      m.train = train_config_from_json(t.dump());
    }
    if (j.contains("modes")) {
      m.modes.clear();
      for (const auto& s : j.at("modes")) m.modes.push_back(parse_training_mode(s.get<std::string>()));
      if (m.modes.empty()) throw ConfigError("manifest: modes is empty");
    }
    if (j.contains("adversarial")) m.adversarial = parse_attack(j.at("adversarial"), "adversarial");

    if (j.contains("evaluation")) {
      const json& e = j.at("evaluation");
      check_keys(e, {"pgd", "square", "max_samples", "batch"}, "evaluation");
      if (e.contains("pgd") && !e.at("pgd").is_null()) m.evaluation.pgd = parse_attack(e.at("pgd"), "evaluation.pgd");
      if (e.contains("square") && !e.at("square").is_null()) {
        m.evaluation.square = parse_attack(e.at("square"), "evaluation.square", &m.evaluation.square_queries);
        if (m.evaluation.square_queries == 0) throw ConfigError("manifest: square queries must be >= 1");
      }
      read_opt(e, "max_samples", m.evaluation.max_samples);
      read_opt(e, "batch", m.evaluation.batch);
      if (m.evaluation.max_samples == 0 || m.evaluation.batch == 0) {
        throw ConfigError("manifest: evaluation max_samples and batch must be positive");
      }
    }
    if (j.contains("heatmap") && !j.at("heatmap").is_null()) {
      const json& h = j.at("heatmap");
      check_keys(h, {"v", "samples"}, "heatmap");
      HeatmapConfig hc;
      read_opt(h, "v", hc.v);
      read_opt(h, "samples", hc.samples);
      if (!(hc.v >= 0.0) || hc.samples == 0) throw ConfigError("manifest: heatmap needs v >= 0 and samples >= 1");
      m.heatmap = hc;
    }
    if (j.contains("lipschitz") && !j.at("lipschitz").is_null()) {
      const json& l = j.at("lipschitz");
      check_keys(l, {"epsilon", "steps", "restarts", "samples"}, "lipschitz");
      LipschitzConfig lc;
      read_opt(l, "epsilon", lc.epsilon);
      read_opt(l, "steps", lc.steps);
      read_opt(l, "restarts", lc.restarts);
      read_opt(l, "samples", lc.samples);
      if (!(lc.epsilon > 0.0) || lc.restarts == 0 || lc.samples == 0) {
        throw ConfigError("manifest: lipschitz needs epsilon > 0, restarts >= 1, samples >= 1");
      }
      m.lipschitz = lc;
    }
    if (j.contains("prune_fractions")) {
      m.prune_fractions = j.at("prune_fractions").get<std::vector<double>>();
      for (double f : m.prune_fractions)
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("manifest: prune fractions must be in [0, 1]");
      if (!std::is_sorted(m.prune_fractions.begin(), m.prune_fractions.end())) {
        throw ConfigError("manifest: prune_fractions must be ascending");
      }
    }
    read_opt(j, "save_checkpoints", m.save_checkpoints);
    if (j.contains("checkpoint")) m.checkpoint = resolve_path(j.at("checkpoint").get<std::string>(), base_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

ExperimentManifest load_manifest(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IngestionError&) {
    throw UsageError("cannot read manifest " + path.string());
  }
  return parse_manifest(text, path.parent_path());
}

std::vector<ResolvedStructure> resolve_structures(const ExperimentManifest& m) {
  ImageGeometry image;
  std::size_t classes = 10;
  if (m.dataset.kind == DatasetConfig::Kind::Synthetic) {
    image = {m.dataset.synthetic.side, m.dataset.synthetic.side, m.dataset.synthetic.channels};
    classes = 2;
  }
  auto finish = [&](std::string id, StructureSpec spec) {
    const auto& o = m.overrides;
    if (o.embed_dim) spec.embed_dim = *o.embed_dim;
    if (o.heads) spec.heads = *o.heads;
    if (o.patch) spec.patch = *o.patch;
    if (o.mlp_ratio) spec.mlp_ratio = *o.mlp_ratio;
    if (auto it = o.stage_layers.find(spec.stacking); it != o.stage_layers.end()) spec.stage_layers = it->second;
    spec.image = image;
    spec.classes = classes;
    ValidationResult v = validate_structure(spec);
    return ResolvedStructure{std::move(id), std::move(spec), std::move(v)};
  };
  std::vector<ResolvedStructure> out;
  if (m.structure) {
    out.push_back(finish("custom", *m.structure));
  } else {
    for (const auto& id : m.presets) out.push_back(finish(id, structure_from_preset(id, m.family)));
  }
  return out;
}

Datasets load_datasets(const DatasetConfig& config) {
  Datasets d;
  if (config.kind == DatasetConfig::Kind::Synthetic) {
    SyntheticFreqSpec train = config.synthetic;
    d.train = synth_freq_dataset(train);
    SyntheticFreqSpec eval = config.synthetic;
    eval.count = config.eval_count;
    eval.seed = derive_seed(config.synthetic.seed, 0x65766131);
    d.eval = synth_freq_dataset(eval);
  } else {
    d.train = read_cifar10(config.train_files);
    d.eval = read_cifar10(config.eval_files);
    if (config.train_limit) d.train = d.train.head(config.train_limit);
    if (config.eval_limit) d.eval = d.eval.head(config.eval_limit);
  }
  return d;
}

std::string describe_normalization(const InputNormalization& norm) {
  if (norm.identity()) return "none";
  std::string out;
  for (std::size_t c = 0; c < norm.mean.size(); ++c) out += (c ? "|" : "") + format_g6(norm.mean[c]);
  out += "/";
  for (std::size_t c = 0; c < norm.stddev.size(); ++c) out += (c ? "|" : "") + format_g6(norm.stddev[c]);
  return out;
}

namespace {

constexpr const char* kColumns[] = {"schema_version", "manifest_hash",   "preset",     "family",
                                    "training_mode",  "seed",            "prune_fraction", "nonzero_weights",
                                    "param_count",    "clean_acc",       "pgd_acc",    "ensemble_acc",
                                    "lipschitz",      "heatmap_hf_error", "final_loss", "input_norm",
                                    "error"};

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return out + "\"";
}

std::string opt_num(const std::optional<double>& v) { return v ? format_g6(*v) : std::string(); }
std::string opt_int(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string(); }

}  // namespace

std::string results_csv_header() {
  std::string out;
  for (const char* c : kColumns) out += (out.empty() ? "" : ",") + std::string(c);
  return out + "\n";
}

std::string results_csv_row(const ExperimentRecord& r, const std::string& manifest_hash) {
  const std::string fields[] = {std::to_string(kResultsSchemaVersion),
                                manifest_hash,
                                r.preset,
                                r.family,
                                r.training_mode,
                                std::to_string(r.seed),
                                opt_num(r.prune_fraction),
                                opt_int(r.nonzero_weights),
                                opt_int(r.param_count),
                                opt_num(r.clean_acc),
                                opt_num(r.pgd_acc),
                                opt_num(r.ensemble_acc),
                                opt_num(r.lipschitz),
                                opt_num(r.heatmap_hf_error),
                                opt_num(r.final_loss),
                                r.input_norm,
                                r.error};
  std::string out;
  for (std::size_t i = 0; i < std::size(fields); ++i) out += (i ? "," : "") + csv_field(fields[i]);
  return out + "\n";
}

std::string results_csv(const std::vector<ExperimentRecord>& records, const std::string& manifest_hash) {
  std::string out = results_csv_header();
  for (const auto& r : records) out += results_csv_row(r, manifest_hash);
  return out;
}

std::uint64_t cell_seed(std::uint64_t manifest_seed, std::string_view id, std::size_t seed_index) {
  return derive_seed(derive_seed(manifest_seed, fnv1a(id)), seed_index);
}

std::vector<EvalAttack> evaluation_attacks(const EvaluationConfig& config) {
  std::vector<EvalAttack> attacks;
  if (config.pgd) attacks.push_back({"pgd", EvalAttack::Kind::Pgd, *config.pgd, 0});
  if (config.square) attacks.push_back({"square", EvalAttack::Kind::Square, *config.square, config.square_queries});
  return attacks;
}

PreparedModel prepare_model(const ExperimentManifest& manifest, const ResolvedStructure& structure, TrainingMode mode,
                            std::uint64_t seed, const Datasets& data, const std::filesystem::path& checkpoint_out) {
  require_valid(structure.spec);
  if (manifest.checkpoint) {
    const Checkpoint ckpt = read_checkpoint(*manifest.checkpoint);
    if (ckpt.spec != structure.spec) {
      throw UsageError("checkpoint " + manifest.checkpoint->string() + " holds a different structure than " +
                       structure.id);
    }
    return {model_from_checkpoint(ckpt), {}};
  }
  PreparedModel out{Model(structure.spec, seed), {}};
  if (manifest.dataset.normalize) {
    const ChannelStats stats = channel_statistics(data.train);
    out.model.set_input_normalization({stats.mean, stats.stddev});
  }
  TrainConfig config = manifest.train;
  config.seed = derive_seed(seed, 1);
  if (mode == TrainingMode::Adversarial) config.adversarial = manifest.adversarial;
  else config.adversarial.reset();
  if (config.epochs > 0) {
    Trainer trainer(out.model, config);
    out.fit = trainer.fit(data.train, checkpoint_out);
  }
  return out;
}

namespace {

std::string slug(const std::string& id) {
  std::string s;
  for (char c : id)
    if (std::isalnum(static_cast<unsigned char>(c))) s += c;
  return s.empty() ? "x" : s;
}

struct Cell {
  const ResolvedStructure* structure;
  std::size_t seed_index;
  TrainingMode mode;
};

std::vector<ExperimentRecord> run_cell(const ExperimentManifest& m, const Cell& cell, const Datasets& data) {
  const auto started = std::chrono::steady_clock::now();
  const ResolvedStructure& rs = *cell.structure;
  ExperimentRecord base;
  base.preset = rs.id;
  base.family = std::string(to_string(rs.spec.family));
  base.training_mode = std::string(to_string(cell.mode));
  base.seed = cell.seed_index;
  base.input_norm = "none";
  std::vector<ExperimentRecord> rows;

  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  if (!rs.validation.ok) {
    base.error = "validation:" + rs.validation.rule + ": " + rs.validation.message;
    rows.push_back(base);
    return rows;
  }
  const std::uint64_t seed = cell_seed(m.seed, rs.id, cell.seed_index);
  const std::string stem = slug(rs.id) + "_" + base.training_mode + "_s" + std::to_string(cell.seed_index);
  try {
    const std::filesystem::path ckpt_path =
        m.save_checkpoints ? m.output_dir / "checkpoints" / (stem + ".ckpt") : std::filesystem::path{};
    PreparedModel prepared = prepare_model(m, rs, cell.mode, seed, data, ckpt_path);
    const Model& model = prepared.model;
    const LogitFn f = logits_of(model);
    base.param_count = model.parameter_count();
    base.input_norm = describe_normalization(model.input_normalization());
    if (!prepared.fit.losses.empty()) base.final_loss = prepared.fit.losses.back();
    if (prepared.fit.aborted) base.error = "aborted:" + prepared.fit.abort_reason;

    const LabeledImageSet eval = data.eval.head(m.evaluation.max_samples);
    const std::vector<EvalAttack> attacks = evaluation_attacks(m.evaluation);
    const RobustAccuracy acc = robust_accuracy(f, eval, attacks, derive_seed(seed, 2), m.evaluation.batch);
    base.clean_acc = acc.clean;
    if (m.evaluation.pgd) base.pgd_acc = acc.per_attack[0];
    if (!attacks.empty()) base.ensemble_acc = acc.worst_case;

    if (m.lipschitz) {
      const LabeledImageSet sub = data.eval.head(m.lipschitz->samples);
      std::vector<std::size_t> idx(sub.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      LipschitzOptions opt;
      opt.epsilon = m.lipschitz->epsilon;
      opt.steps = m.lipschitz->steps;
      opt.restarts = m.lipschitz->restarts;
      opt.seed = derive_seed(seed, 3);
      base.lipschitz = local_lipschitz(f, sub.batch(idx), opt).mean;
    }
    if (m.heatmap) {
      HeatmapOptions opt;
      opt.v = m.heatmap->v;
      opt.max_samples = m.heatmap->samples;
      opt.seed = derive_seed(seed, 4);
      opt.batch_size = m.evaluation.batch;
      const FourierHeatmap map = fourier_heatmap(f, data.eval, opt);
      base.heatmap_hf_error = map.high_frequency_mean();
      const std::string comment = "manifest=" + m.hash + " preset=" + rs.id + " mode=" + base.training_mode +
                                  " seed=" + std::to_string(cell.seed_index) + " v=" + format_g6(map.norm_v) +
                                  " samples=" + std::to_string(map.sample_count);
      write_file_atomic(m.output_dir / "heatmaps" / (stem + ".ppm"), render_heatmap_ppm(map.error, map.n, comment));
      write_file_atomic(m.output_dir / "heatmaps" / (stem + ".csv"), heatmap_csv(map.error, map.n, comment));
    }
    base.wall_time_s = elapsed();
    rows.push_back(base);

    if (!m.prune_fractions.empty()) {
      for (const SweepRow& s : sparsity_sweep(model, m.prune_fractions, eval, attacks, derive_seed(seed, 2))) {
        ExperimentRecord r = base;
        r.prune_fraction = s.fraction;
        r.nonzero_weights = s.nonzero;
        r.clean_acc = s.clean_accuracy;
        r.pgd_acc = m.evaluation.pgd ? std::optional<double>(s.robust_accuracy[0]) : std::nullopt;
        r.ensemble_acc = attacks.empty() ? std::nullopt : std::optional<double>(s.worst_case);
        r.lipschitz.reset();
        r.heatmap_hf_error.reset();
        r.wall_time_s = elapsed();
        rows.push_back(r);
      }
    }
  } catch (const Error& e) {
    base.error = e.kind() + ": " + e.what();
    base.wall_time_s = elapsed();
    rows.assign(1, base);
  } catch (const std::exception& e) {
    base.error = std::string("internal: ") + e.what();
    base.wall_time_s = elapsed();
    rows.assign(1, base);
  }
  return rows;
}

}  // namespace

GridResult run_grid(const ExperimentManifest& manifest, std::size_t jobs) {
  const std::vector<ResolvedStructure> structures = resolve_structures(manifest);
  const Datasets data = load_datasets(manifest.dataset);

  std::vector<Cell> cells;
  for (const auto& s : structures)
    for (std::size_t k = 0; k < manifest.seeds; ++k)
      for (TrainingMode mode : manifest.modes) cells.push_back({&s, k, mode});

  std::vector<std::vector<ExperimentRecord>> results(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
      results[i] = run_cell(manifest, cells[i], data);
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(cells.size(), 1));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  GridResult out;
  for (auto& r : results)
    for (auto& rec : r) out.records.push_back(std::move(rec));

  std::string timings = "preset,training_mode,seed,prune_fraction,wall_time_s\n";
  for (const auto& r : out.records) {
    timings += csv_field(r.preset) + "," + r.training_mode + "," + std::to_string(r.seed) + "," +
               opt_num(r.prune_fraction) + "," + format_g6(r.wall_time_s) + "\n";
  }
  out.results_path = manifest.output_dir / "results.csv";
  write_file_atomic(out.results_path, results_csv(out.records, manifest.hash));
  write_file_atomic(manifest.output_dir / "timings.csv", timings);
  return out;
}

}  // namespace rgrid
