#include "rgrid/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rgrid/error.hpp"
#include "rgrid/io.hpp"
#include "rgrid/ops.hpp"
#include "rgrid/rng.hpp"

namespace rgrid {

using json = nlohmann::ordered_json;

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "SGD" : "Adam"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "SGD" || text == "sgd" || text == "SGD-momentum") return OptimizerKind::Sgd;
  if (text == "Adam" || text == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected SGD or Adam)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train lr must be > 0");
  if (batch < 1) throw ConfigError("train batch must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("Adam eps must be > 0");
  if (adversarial) adversarial->validate();
}

namespace {

json attack_to_json(const AttackSpec& a) {
  return json{{"epsilon", a.epsilon},
              {"steps", a.steps},
              {"step_size", a.step_size},
              {"restarts", a.restarts},
              {"init", std::string(to_string(a.init))}};
}

AttackSpec attack_from_json(const json& j) {
  AttackSpec a;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "epsilon") a.epsilon = it->get<double>();
    else if (k == "steps") a.steps = it->get<std::size_t>();
    else if (k == "step_size") a.step_size = it->get<double>();
    else if (k == "restarts") a.restarts = it->get<std::size_t>();
    else if (k == "init") a.init = parse_attack_init(it->get<std::string>());
    else throw ConfigError("unknown attack key '" + k + "'");
  }
  return a;
}

json config_to_json(const TrainConfig& c) {
  json j{{"optimizer", std::string(to_string(c.optimizer))},
         {"lr", c.lr},
         {"momentum", c.momentum},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"epochs", c.epochs},
         {"batch", c.batch},
         {"seed", c.seed}};
  j["adversarial"] = c.adversarial ? attack_to_json(*c.adversarial) : json(nullptr);
  return j;
}

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "optimizer") c.optimizer = parse_optimizer(it->get<std::string>());
    else if (k == "lr") c.lr = it->get<double>();
    else if (k == "momentum") c.momentum = it->get<double>();
    else if (k == "beta1") c.beta1 = it->get<double>();
    else if (k == "beta2") c.beta2 = it->get<double>();
    else if (k == "adam_eps") c.adam_eps = it->get<double>();
    else if (k == "epochs") c.epochs = it->get<std::size_t>();
    else if (k == "batch") c.batch = it->get<std::size_t>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else if (k == "adversarial") {
      if (it->is_null()) c.adversarial.reset();
      else c.adversarial = attack_from_json(*it);
    } else throw ConfigError("unknown train key '" + k + "'");
  }
  c.validate();
  return c;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& config) { return config_to_json(config).dump(); }

TrainConfig train_config_from_json(std::string_view text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

Optimizer::Optimizer(const TrainConfig& config) : config_(config) { state_.kind = config.optimizer; }

void Optimizer::step(std::vector<NamedTensor>& params) {
  if (state_.m.size() != params.size()) {
    state_.m.assign(params.size(), {});
    state_.v.assign(params.size(), {});
  }
  ++state_.t;
  const bool adam = config_.optimizer == OptimizerKind::Adam;
  const double bc1 = adam ? 1.0 - std::pow(config_.beta1, static_cast<double>(state_.t)) : 1.0;
  const double bc2 = adam ? 1.0 - std::pow(config_.beta2, static_cast<double>(state_.t)) : 1.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].value;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = state_.m[p];
    if (m.empty()) m.assign(w.size(), 0.0);
    if (adam) {
      auto& v = state_.v[p];
      if (v.empty()) v.assign(w.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        w[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.adam_eps);
      }
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.momentum * m[i] + g[i];
        w[i] -= config_.lr * m[i];
      }
    }
  }
}

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(model), config_(std::move(config)), optimizer_(config_), rng_(config_.seed) {
  config_.validate();
}

double Trainer::train_step(const Tensor& images, std::span<const int> labels) {
  if (images.rank() != 4 || images.size(0) == 0) throw UsageError("train_step needs a nonempty [B, C, H, W] batch");
  Tensor inputs = images;
  if (config_.adversarial) {
    // inner max: gradients w.r.t. the inputs only; parameter grads untouched
    std::mt19937_64 attack_rng(derive_seed(config_.seed, steps_));
    inputs = pgd(logits_of(model_), images, labels, *config_.adversarial, attack_rng);
  }
  model_.zero_grad();
  Tensor loss = ops::softmax_cross_entropy(model_.forward(inputs), labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(steps_));
  }
  backward(loss);
  optimizer_.step(model_.parameters());
  ++steps_;
  return value;
}

FitResult Trainer::fit(const LabeledImageSet& data, const std::filesystem::path& checkpoint_path) {
  if (data.size() == 0) throw UsageError("fit on an empty dataset");
  FitResult result;
  std::vector<std::size_t> order(data.size());
  while (epoch_ < config_.epochs) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    for (std::size_t start = 0; start < order.size(); start += config_.batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config_.batch, order.size() - start));
      const Tensor x = data.batch(idx);
      const std::vector<int> y = data.batch_labels(idx);
      try {
        result.losses.push_back(train_step(x, y));
      } catch (const NumericError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        return result;
      }
    }
    ++epoch_;
    ++result.epochs_completed;
    if (!checkpoint_path.empty()) save(checkpoint_path);
  }
  return result;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.spec = model_.spec();
  c.model_seed = model_.seed();
  c.input_norm = model_.input_normalization();
  c.config = config_;
  c.epoch = epoch_;
  c.steps = steps_;
  std::ostringstream rng_text;
  rng_text << rng_;
  c.rng_state = rng_text.str();
  for (const auto& p : model_.parameters()) {
    auto d = p.value.data();
    c.params.push_back({p.name, p.value.shape(), std::vector<double>(d.begin(), d.end())});
  }
  c.optimizer = optimizer_.state();
  return c;
}

void Trainer::save(const std::filesystem::path& path) const { write_checkpoint(checkpoint(), path); }

void Trainer::restore(const Checkpoint& ckpt) {
  if (structure_to_json(ckpt.spec) != structure_to_json(model_.spec())) {
    throw UsageError("checkpoint structure does not match the model");
  }
  auto& params = model_.parameters();
  if (ckpt.params.size() != params.size()) throw UsageError("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.params[i].name != params[i].name || ckpt.params[i].shape != params[i].value.shape()) {
      throw UsageError("checkpoint parameter '" + ckpt.params[i].name + "' does not match model parameter '" +
                       params[i].name + "'");
    }
    std::copy(ckpt.params[i].values.begin(), ckpt.params[i].values.end(), params[i].value.mutable_data().begin());
  }
  model_.set_input_normalization(ckpt.input_norm);
  config_ = ckpt.config;
  optimizer_ = Optimizer(config_);
  optimizer_.set_state(ckpt.optimizer);
  epoch_ = ckpt.epoch;
  steps_ = ckpt.steps;
  std::istringstream rng_text(ckpt.rng_state);
  rng_text >> rng_;
  if (!rng_text) throw IngestionError("checkpoint rng state is malformed");
}

FitResult fit(Model& model, const LabeledImageSet& data, const TrainConfig& config) {
  Trainer trainer(model, config);
  return trainer.fit(data);
}

// ---- checkpoint file ----

namespace {

constexpr char kMagic[8] = {'R', 'G', 'R', 'I', 'D', 'C', 'K', 'P'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) {
    for (double x : v) f64(x);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw IngestionError(origin_ + ": checkpoint truncated at byte offset " + std::to_string(pos_));
    }
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<double> doubles(std::size_t n) {
    need(n * 8);
    std::vector<double> v(n);
    for (double& x : v) x = f64();
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header;
  header["spec"] = json::parse(structure_to_json(ckpt.spec));
  header["model_seed"] = ckpt.model_seed;
  header["input_norm"] = {{"mean", ckpt.input_norm.mean}, {"stddev", ckpt.input_norm.stddev}};
  header["train"] = config_to_json(ckpt.config);
  header["epoch"] = ckpt.epoch;
  header["steps"] = ckpt.steps;
  header["rng"] = ckpt.rng_state;
  const std::string text = header.dump();

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  w.u32(ckpt.optimizer.kind == OptimizerKind::Sgd ? 0 : 1);
  w.u64(ckpt.optimizer.t);
  w.u64(ckpt.params.size());
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& p = ckpt.params[i];
    w.str32(p.name);
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t d : p.shape) w.u64(d);
    w.doubles(p.values);
    std::vector<const std::vector<double>*> slots;
    if (i < ckpt.optimizer.m.size() && !ckpt.optimizer.m[i].empty()) slots.push_back(&ckpt.optimizer.m[i]);
    if (i < ckpt.optimizer.v.size() && !ckpt.optimizer.v[i].empty()) slots.push_back(&ckpt.optimizer.v[i]);
    w.u32(static_cast<std::uint32_t>(slots.size()));
    for (const auto* s : slots) w.doubles(*s);
  }
  write_file_atomic(path, w.str());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw IngestionError(path.string() + ": not an rgrid checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IngestionError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  try {
    const json header = json::parse(r.bytes(r.u64()));
    c.spec = structure_from_json(header.at("spec").dump());
    c.model_seed = header.at("model_seed").get<std::uint64_t>();
    c.input_norm.mean = header.at("input_norm").at("mean").get<std::vector<double>>();
    c.input_norm.stddev = header.at("input_norm").at("stddev").get<std::vector<double>>();
    c.config = config_from_json(header.at("train"));
    c.epoch = header.at("epoch").get<std::size_t>();
    c.steps = header.at("steps").get<std::uint64_t>();
    c.rng_state = header.at("rng").get<std::string>();
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": bad checkpoint header: " + e.what());
  }
  c.optimizer.kind = r.u32() == 0 ? OptimizerKind::Sgd : OptimizerKind::Adam;
  c.optimizer.t = r.u64();
  const std::uint64_t count = r.u64();
  c.optimizer.m.resize(count);
  c.optimizer.v.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Checkpoint::Param p;
    p.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) p.shape.push_back(r.u64());
    const std::size_t n = shape_numel(p.shape);
    p.values = r.doubles(n);
    const std::uint32_t slots = r.u32();
    if (slots > 2) throw IngestionError(path.string() + ": bad optimizer slot count for " + p.name);
    if (slots >= 1) c.optimizer.m[i] = r.doubles(n);
    if (slots >= 2) c.optimizer.v[i] = r.doubles(n);
    c.params.push_back(std::move(p));
  }
  if (!r.done()) throw IngestionError(path.string() + ": trailing bytes after checkpoint payload");
  return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model model(ckpt.spec, ckpt.model_seed);
  auto& params = model.parameters();
  if (params.size() != ckpt.params.size()) throw UsageError("checkpoint parameter count does not match its structure");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ckpt.params[i].name || params[i].value.shape() != ckpt.params[i].shape) {
      throw UsageError("checkpoint parameter '" + ckpt.params[i].name + "' does not match its structure");
    }
    std::copy(ckpt.params[i].values.begin(), ckpt.params[i].values.end(), params[i].value.mutable_data().begin());
  }
  model.set_input_normalization(ckpt.input_norm);
  return model;
}

}  // namespace rgrid
