#include "rgrid/attack.hpp"

#include <algorithm>
#include <cmath>

#include "rgrid/error.hpp"
#include "rgrid/model.hpp"
#include "rgrid/ops.hpp"
#include "rgrid/rng.hpp"

namespace rgrid {

LogitFn logits_of(const Model& model) {
  return [&model](const Tensor& x) { return model.forward(x); };
}

std::string_view to_string(AttackInit init) {
  return init == AttackInit::Clean ? "clean" : "uniform";
}

AttackInit parse_attack_init(std::string_view text) {
  if (text == "clean") return AttackInit::Clean;
  if (text == "uniform" || text == "uniform-in-ball") return AttackInit::UniformInBall;
  throw ConfigError("unknown attack init '" + std::string(text) + "' (expected clean or uniform)");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be finite and >= 0");
  if (steps > 0 && !(step_size > 0.0)) throw ConfigError("attack step_size must be > 0 when steps > 0");
  if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_batch(const Tensor& x, std::span<const int> labels) {
  if (x.rank() != 4) throw ConfigError("attack input must be [B, C, H, W], got " + shape_str(x.shape()));
  if (x.size(0) != labels.size()) {
    throw ConfigError("attack got " + std::to_string(labels.size()) + " labels for batch " + shape_str(x.shape()));
  }
}

// x_adv <- clip01(clamp(x_adv, x - eps, x + eps))
void project(std::vector<double>& adv, std::span<const double> x, double eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv[i] = std::clamp(std::clamp(adv[i], x[i] - eps, x[i] + eps), 0.0, 1.0);
  }
}

struct LossAndGrad {
  std::vector<double> per_sample;
  std::vector<double> grad;
};

LossAndGrad loss_and_input_grad(const LogitFn& f, const Shape& shape, std::span<const double> point,
                                std::span<const int> labels) {
  Tensor leaf = Tensor::from_data(shape, std::vector<double>(point.begin(), point.end()), true);
  Tensor logits = f(leaf);
  LossAndGrad out;
  out.per_sample = ops::cross_entropy_per_sample(logits, labels);
  Tensor loss = ops::softmax_cross_entropy(logits, labels);
  if (loss.requires_grad()) {
    const Tensor wrt[] = {leaf};
    out.grad = std::move(gradients(loss, wrt)[0]);
  } else {
    out.grad.assign(point.size(), 0.0);
  }
  return out;
}

std::vector<double> loss_at(const LogitFn& f, const Shape& shape, std::span<const double> point,
                            std::span<const int> labels) {
  NoGradGuard guard;
  Tensor x = Tensor::from_data(shape, std::vector<double>(point.begin(), point.end()));
  return ops::cross_entropy_per_sample(f(x), labels);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.size(0), k = logits.size(1);
  auto d = logits.data();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = static_cast<int>(std::max_element(d.begin() + i * k, d.begin() + (i + 1) * k) - (d.begin() + i * k));
  }
  return out;
}

std::vector<double> start_point(std::span<const double> x, double eps, bool uniform, std::mt19937_64& rng) {
  std::vector<double> p(x.begin(), x.end());
  if (uniform && eps > 0.0) {
    std::uniform_real_distribution<double> u(-eps, eps);
    for (double& v : p) v += u(rng);
    project(p, x, eps);
  }
  return p;
}

}  // namespace

std::vector<double> per_sample_loss(const LogitFn& f, const Tensor& x, std::span<const int> labels) {
  check_batch(x, labels);
  return loss_at(f, x.shape(), x.data(), labels);
}

Tensor fgsm(const LogitFn& f, const Tensor& x, std::span<const int> labels, double epsilon) {
  check_batch(x, labels);
  if (!(epsilon >= 0.0)) throw ConfigError("fgsm epsilon must be >= 0");
  auto base = x.data();
  LossAndGrad lg = loss_and_input_grad(f, x.shape(), base, labels);
  std::vector<double> adv(base.begin(), base.end());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += epsilon * sign(lg.grad[i]);
  project(adv, base, epsilon);
  return Tensor::from_data(x.shape(), std::move(adv));
}

Tensor pgd(const LogitFn& f, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           std::mt19937_64& rng) {
  check_batch(x, labels);
  spec.validate();
  const Shape& shape = x.shape();
  auto base = x.data();
  const std::size_t batch = shape[0];
  const std::size_t per = x.numel() / batch;

  std::vector<double> best(base.begin(), base.end());
  std::vector<double> best_loss(batch, -INFINITY);

  auto consider = [&](const std::vector<double>& point, const std::vector<double>& losses) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (losses[b] > best_loss[b]) {
        best_loss[b] = losses[b];
        std::copy_n(point.begin() + b * per, per, best.begin() + b * per);
      }
    }
  };

  for (std::size_t r = 0; r < spec.restarts; ++r) {
    const bool uniform = spec.init == AttackInit::UniformInBall || r > 0;
    std::vector<double> cur = start_point(base, spec.epsilon, uniform, rng);
    for (std::size_t s = 0; s < spec.steps; ++s) {
      LossAndGrad lg = loss_and_input_grad(f, shape, cur, labels);
      consider(cur, lg.per_sample);
      for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += spec.step_size * sign(lg.grad[i]);
      project(cur, base, spec.epsilon);
    }
    consider(cur, loss_at(f, shape, cur, labels));
  }
  return Tensor::from_data(shape, std::move(best));
}

namespace {

// Fraction of the image covered by a proposal square, halving on a schedule
// normalized to the query budget.
double square_fraction(std::size_t query, std::size_t queries) {
  static constexpr std::size_t kMarks[] = {10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
  const double it = 10000.0 * static_cast<double>(query) / static_cast<double>(std::max<std::size_t>(queries, 1));
  double p = 0.3;
  for (std::size_t m : kMarks) {
    if (it > static_cast<double>(m)) p /= 2.0;
  }
  return p;
}

}  // namespace

Tensor square_lite(const LogitFn& f, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                   std::size_t queries, std::mt19937_64& rng) {
  check_batch(x, labels);
  spec.validate();
  if (queries < 1) throw ConfigError("square_lite needs queries >= 1");
  const Shape& shape = x.shape();
  const std::size_t batch = shape[0], channels = shape[1], h = shape[2], w = shape[3];
  const std::size_t per = channels * h * w;
  auto base = x.data();
  const double eps = spec.epsilon;

  std::vector<double> cur = start_point(base, eps, spec.init == AttackInit::UniformInBall, rng);
  std::vector<double> cur_loss = loss_at(f, shape, cur, labels);

  std::bernoulli_distribution coin(0.5);
  for (std::size_t q = 0; q < queries; ++q) {
    const double frac = square_fraction(q, queries);
    const auto side = static_cast<std::size_t>(
        std::clamp<double>(std::round(std::sqrt(frac * static_cast<double>(h * w))), 1.0,
                           static_cast<double>(std::min(h, w))));
    std::vector<double> proposal = cur;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t r0 = std::uniform_int_distribution<std::size_t>(0, h - side)(rng);
      const std::size_t c0 = std::uniform_int_distribution<std::size_t>(0, w - side)(rng);
      for (std::size_t c = 0; c < channels; ++c) {
        const double s = coin(rng) ? eps : -eps;
        for (std::size_t i = r0; i < r0 + side; ++i)
          for (std::size_t j = c0; j < c0 + side; ++j) {
            const std::size_t k = b * per + (c * h + i) * w + j;
            proposal[k] = base[k] + s;
          }
      }
    }
    project(proposal, base, eps);
    const std::vector<double> loss = loss_at(f, shape, proposal, labels);
    for (std::size_t b = 0; b < batch; ++b) {
      if (loss[b] > cur_loss[b]) {
        cur_loss[b] = loss[b];
        std::copy_n(proposal.begin() + b * per, per, cur.begin() + b * per);
      }
    }
  }
  return Tensor::from_data(shape, std::move(cur));
}

double clean_accuracy(const LogitFn& f, const LabeledImageSet& data, std::size_t batch_size) {
  std::vector<EvalAttack> none;
  return robust_accuracy(f, data, none, 0, batch_size).clean;
}

RobustAccuracy robust_accuracy(const LogitFn& f, const LabeledImageSet& data, std::span<const EvalAttack> attacks,
                               std::uint64_t seed, std::size_t batch_size) {
  if (data.size() == 0) throw UsageError("robust_accuracy on an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  for (const auto& a : attacks) a.spec.validate();

  RobustAccuracy out;
  out.samples = data.size();
  std::size_t clean_hits = 0, worst_hits = 0;
  std::vector<std::size_t> hits(attacks.size(), 0);

  for (std::size_t start = 0, batch_index = 0; start < data.size(); start += batch_size, ++batch_index) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor x = data.batch(idx);
    const std::vector<int> y = data.batch_labels(idx);

    std::vector<char> robust(idx.size());
    {
      NoGradGuard guard;
      const std::vector<int> pred = argmax_rows(f(x));
      for (std::size_t i = 0; i < idx.size(); ++i) robust[i] = pred[i] == y[i];
    }
    clean_hits += static_cast<std::size_t>(std::count(robust.begin(), robust.end(), 1));
    std::vector<char> worst = robust;

    for (std::size_t a = 0; a < attacks.size(); ++a) {
      std::mt19937_64 rng(derive_seed(derive_seed(seed, a), batch_index));
      const Tensor adv = attacks[a].kind == EvalAttack::Kind::Pgd
                             ? pgd(f, x, y, attacks[a].spec, rng)
                             : square_lite(f, x, y, attacks[a].spec, attacks[a].queries, rng);
      NoGradGuard guard;
      const std::vector<int> pred = argmax_rows(f(adv));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const bool ok = robust[i] && pred[i] == y[i];
        hits[a] += ok;
        worst[i] = worst[i] && ok;
      }
    }
    worst_hits += static_cast<std::size_t>(std::count(worst.begin(), worst.end(), 1));
  }

  const auto n = static_cast<double>(data.size());
  out.clean = static_cast<double>(clean_hits) / n;
  for (std::size_t h : hits) out.per_attack.push_back(static_cast<double>(h) / n);
  out.worst_case = static_cast<double>(worst_hits) / n;
  return out;
}

}  // namespace rgrid
