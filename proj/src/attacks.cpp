#include "attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"

namespace advcheck::attacks {

using netcore::CrossEntropyLoss;
using netcore::GradientTarget;
using netcore::Network;

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::pgd: return "pgd";
    case AttackKind::auna: return "auna";
    case AttackKind::noisy: return "noisy";
    case AttackKind::adaptive: return "adaptive";
  }
  return "unknown";
}

AttackKind attack_kind_from_string(std::string_view name) {
  for (auto k : {AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::auna, AttackKind::noisy,
                 AttackKind::adaptive})
    if (to_string(k) == name) return k;
  throw InvalidArgument("unknown attack kind '" + std::string(name) + "'");
}

std::string_view to_string(Norm norm) { return norm == Norm::l_inf ? "l_inf" : "l_2"; }

Norm norm_from_string(std::string_view name) {
  if (name == "l_inf") return Norm::l_inf;
  if (name == "l_2") return Norm::l_2;
  throw InvalidArgument("unknown norm '" + std::string(name) + "'");
}

Norm native_norm(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm:
    case AttackKind::bim:
    case AttackKind::pgd: return Norm::l_inf;
    default: return Norm::l_2;
  }
}

AttackConfig AttackConfig::defaults(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  c.norm = native_norm(kind);
  switch (kind) {
    case AttackKind::fgsm:
      c.epsilon = 0.2f;
      c.max_iterations = 1000;
      break;
    case AttackKind::bim:
      c.epsilon = 0.3f;
      c.step_size = 0.05f;
      c.max_iterations = 10;
      break;
    case AttackKind::pgd:
      c.epsilon = 0.3f;
      c.step_size = 0.01f;
      c.max_iterations = 40;
      break;
    case AttackKind::auna:
      c.epsilon = 0.2f;
      c.max_iterations = 1000;
      break;
    case AttackKind::noisy:
      c.epsilon = 0.25f;
      c.max_iterations = 1000;
      break;
    case AttackKind::adaptive:
      c.epsilon = 1.0f;
      c.step_size = 0.01f;
      c.max_iterations = 10;
      c.lambda = 1.0f;
      break;
  }
  return c;
}

void AttackConfig::validate() const {
  const auto name = std::string(to_string(kind));
  if (!(epsilon > 0.0f) || !std::isfinite(epsilon)) throw InvalidArgument(name + ": epsilon must be > 0");
  if (max_iterations < 1) throw InvalidArgument(name + ": max_iterations must be >= 1");
  const bool uses_step = kind == AttackKind::bim || kind == AttackKind::pgd || kind == AttackKind::adaptive;
  if (uses_step && !(step_size > 0.0f)) throw InvalidArgument(name + ": step_size must be > 0");
  if (kind == AttackKind::adaptive && !(lambda > 0.0f)) throw InvalidArgument(name + ": lambda must be > 0");
  if (norm != native_norm(kind))
    throw InvalidArgument(name + " uses the " + std::string(to_string(native_norm(kind))) + " norm");
}

void to_json(nlohmann::json& j, const AttackConfig& cfg) {
  j = nlohmann::json{{"kind", to_string(cfg.kind)},       {"norm", to_string(cfg.norm)},
                     {"epsilon", cfg.epsilon},            {"step_size", cfg.step_size},
                     {"max_iterations", cfg.max_iterations}, {"lambda", cfg.lambda},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, AttackConfig& cfg) {
  if (!j.is_object() || !j.contains("kind")) throw InvalidArgument("attack config needs a 'kind' field");
  cfg = AttackConfig::defaults(attack_kind_from_string(j.at("kind").get<std::string>()));
  if (j.contains("norm")) cfg.norm = norm_from_string(j.at("norm").get<std::string>());
  if (j.contains("epsilon")) cfg.epsilon = j.at("epsilon").get<float>();
  if (j.contains("step_size")) cfg.step_size = j.at("step_size").get<float>();
  if (j.contains("max_iterations")) cfg.max_iterations = j.at("max_iterations").get<int>();
  if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<float>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
}

void project(const Tensor& x, Tensor& x_adv, Norm norm, float epsilon) {
  if (norm == Norm::l_inf) {
    for (std::size_t i = 0; i < x.size(); ++i)
      x_adv[i] = std::clamp(std::clamp(x_adv[i], x[i] - epsilon, x[i] + epsilon), 0.0f, 1.0f);
    return;
  }
  for (auto& v : x_adv.data) v = std::clamp(v, 0.0f, 1.0f);
  // Shrinking towards x keeps the point inside [0,1]; repeat in case float rounding lands just outside.
  for (int pass = 0; pass < 4; ++pass) {
    const double d = l2_distance(x_adv.span(), x.span());
    if (d <= epsilon) return;
    const double s = double(epsilon) / d * (1.0 - 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) x_adv[i] = float(x[i] + (double(x_adv[i]) - x[i]) * s);
  }
}

namespace {

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

AttackResult finish(const Tensor& x, Tensor x_adv, bool success, int iterations) {
  AttackResult r;
  r.perturbation_l2 = l2_distance(x_adv.span(), x.span());
  r.x_adv = std::move(x_adv);
  r.success = success;
  r.iterations_used = iterations;
  return r;
}

bool all_zero(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](float v) { return v == 0.0f; });
}

void check_config(const AttackConfig& cfg, AttackKind expected) {
  if (cfg.kind != expected)
    throw InvalidArgument("attack config kind '" + std::string(to_string(cfg.kind)) + "' passed to " +
                          std::string(to_string(expected)));
  cfg.validate();
}

// Shared loop of bim and pgd: signed-gradient ascent on cross-entropy, projected every step, stopping at
// the first iterate whose prediction differs from the clean prediction.
AttackResult iterative_sign_ascent(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                                   Tensor start, const StepObserver& observer) {
  const auto original = net.predict(x);
  Tensor x_adv = std::move(start);
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    const auto g = net.grad_wrt_input(x_adv, CrossEntropyLoss{label});
    for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += cfg.step_size * sign(g[i]);
    project(x, x_adv, Norm::l_inf, cfg.epsilon);
    if (observer) observer(x_adv);
    if (net.predict(x_adv) != original) return finish(x, std::move(x_adv), true, it);
  }
  return finish(x, std::move(x_adv), false, cfg.max_iterations);
}

}  // namespace

AttackResult fgsm(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  check_config(cfg, AttackKind::fgsm);
  const auto original = net.predict(x);
  const auto g = net.grad_wrt_input(x, CrossEntropyLoss{label});
  if (all_zero(g)) return finish(x, x, false, 1);
  Tensor direction(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) direction[i] = sign(g[i]);

  Tensor x_adv = x;
  for (int k = 1; k <= cfg.max_iterations; ++k) {
    const float eps = k == cfg.max_iterations ? cfg.epsilon : cfg.epsilon * float(k) / float(cfg.max_iterations);
    for (std::size_t i = 0; i < x.size(); ++i) x_adv[i] = x[i] + eps * direction[i];
    project(x, x_adv, Norm::l_inf, cfg.epsilon);
    if (net.predict(x_adv) != original) return finish(x, std::move(x_adv), true, k);
  }
  return finish(x, std::move(x_adv), false, cfg.max_iterations);
}

AttackResult bim(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                 const StepObserver& observer) {
  check_config(cfg, AttackKind::bim);
  return iterative_sign_ascent(net, x, label, cfg, x, observer);
}

AttackResult pgd(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                 const StepObserver& observer) {
  check_config(cfg, AttackKind::pgd);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<float> start_noise(-cfg.epsilon, cfg.epsilon);
  Tensor start = x;
  for (auto& v : start.data) v += start_noise(rng);
  project(x, start, Norm::l_inf, cfg.epsilon);
  if (observer) observer(start);
  return iterative_sign_ascent(net, x, label, cfg, std::move(start), observer);
}

AttackResult noisy_misclassify(const LabelOracle& predict, const Tensor& x, float bound_l2, int max_attempts,
                               std::uint64_t seed, NoiseShape shape) {
  if (!(bound_l2 > 0.0f)) throw InvalidArgument("noise bound must be > 0");
  if (max_attempts < 1) throw InvalidArgument("max_attempts must be >= 1");
  const auto original = predict(x);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uniform(-1.0f, 1.0f);
  std::normal_distribution<float> gaussian(0.0f, 1.0f);
  Tensor noise(x.shape);
  Tensor candidate = x;
  for (int k = 1; k <= max_attempts; ++k) {
    const float radius = k == max_attempts ? bound_l2 : bound_l2 * float(k) / float(max_attempts);
    for (auto& v : noise.data) v = shape == NoiseShape::uniform ? uniform(rng) : gaussian(rng);
    const float n = l2_norm(noise.span());
    if (n == 0.0f) continue;
    for (std::size_t i = 0; i < x.size(); ++i) candidate[i] = x[i] + noise[i] * (radius / n);
    project(x, candidate, Norm::l_2, radius);
    if (predict(candidate) != original) return finish(x, std::move(candidate), true, k);
  }
  return finish(x, std::move(candidate), false, max_attempts);
}

AttackResult noisy_misclassify(const Network& net, const Tensor& x, float bound_l2, int max_attempts,
                               std::uint64_t seed, NoiseShape shape) {
  return noisy_misclassify([&net](const Tensor& t) { return net.predict(t); }, x, bound_l2, max_attempts, seed,
                           shape);
}

AttackResult auna(const LabelOracle& predict, const Tensor& x, const AttackConfig& cfg) {
  check_config(cfg, AttackKind::auna);
  return noisy_misclassify(predict, x, cfg.epsilon, cfg.max_iterations, cfg.seed, NoiseShape::uniform);
}

AttackResult auna(const Network& net, const Tensor& x, const AttackConfig& cfg) {
  return auna([&net](const Tensor& t) { return net.predict(t); }, x, cfg);
}

AdaptiveObjective::AdaptiveObjective(const Network& net, const Tensor& x, std::size_t label, std::size_t layer_index,
                                     float lambda, GradientTarget target)
    : net_(net), label_(label), layer_(layer_index), lambda_(lambda), target_(target) {
  if (layer_index >= net.layer_count()) throw InvalidArgument("adaptive: layer index out of range");
  if (label >= net.class_count()) throw InvalidArgument("adaptive: label out of range");
  reference_ = local_gradient(x);
}

Tensor AdaptiveObjective::local_gradient(const Tensor& x) const {
  const auto trace = net_.forward(x);
  return net_.grad_wrt_layer(trace, x, layer_, trace.predicted, target_);
}

double AdaptiveObjective::mse_term(const Tensor& x_adv) const {
  const auto mu = local_gradient(x_adv);
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double d = double(mu[i]) - reference_[i];
    acc += d * d;
  }
  return acc / double(mu.size());
}

double AdaptiveObjective::value(const Tensor& x_adv) const {
  const auto logits = net_.logits(x_adv);
  // log-sum-exp in double: a saturated float softmax would round the loss to zero
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float z : logits) sum += std::exp(double(z) - top);
  const double ce = top + std::log(sum) - double(logits[label_]);
  return mse_term(x_adv) - double(lambda_) * ce;
}

Tensor AdaptiveObjective::cross_entropy_gradient(const Tensor& x_adv) const {
  return net_.grad_wrt_input(x_adv, CrossEntropyLoss{label_});
}

Tensor AdaptiveObjective::mse_gradient(const Tensor& x_adv, std::mt19937_64& rng) const {
  std::vector<std::size_t> coords(x_adv.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > kSubspaceSize) {
    // Partial Fisher-Yates: the first kSubspaceSize entries become a uniform sample.
    for (std::size_t i = 0; i < kSubspaceSize; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
      std::swap(coords[i], coords[pick(rng)]);
    }
    coords.resize(kSubspaceSize);
  }
  Tensor g(x_adv.shape);
  Tensor probe = x_adv;
  const float h = kFiniteDifferenceStep;
  for (auto c : coords) {
    const float saved = probe[c];
    probe[c] = saved + h;
    const double up = mse_term(probe);
    probe[c] = saved - h;
    const double down = mse_term(probe);
    probe[c] = saved;
    g[c] = float((up - down) / (2.0 * h));
  }
  return g;
}

Tensor AdaptiveObjective::gradient(const Tensor& x_adv, std::mt19937_64& rng) const {
  auto g = mse_gradient(x_adv, rng);
  const auto ce = cross_entropy_gradient(x_adv);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= lambda_ * ce[i];
  return g;
}

AttackResult adaptive(const Network& net, const Tensor& x, std::size_t label, std::size_t layer_index,
                      const AttackConfig& cfg, GradientTarget target, AdaptiveTrace* trace) {
  check_config(cfg, AttackKind::adaptive);
  const AdaptiveObjective objective(net, x, label, layer_index, cfg.lambda, target);
  const auto original = net.predict(x);
  std::mt19937_64 rng(cfg.seed);
  Tensor x_adv = x;
  if (trace) trace->objective = {objective.value(x_adv)};
  for (int round = 0; round < cfg.max_iterations; ++round) {
    const auto g = objective.gradient(x_adv, rng);
    const float scale = linf_norm(g.span());
    if (scale == 0.0f) break;
    for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] -= cfg.step_size * g[i] / scale;
    project(x, x_adv, Norm::l_2, cfg.epsilon);
    if (trace) trace->objective.push_back(objective.value(x_adv));
  }
  const bool success = net.predict(x_adv) != original;
  return finish(x, std::move(x_adv), success, cfg.max_iterations);
}

AttackResult run_attack(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                        std::size_t layer_index, GradientTarget target) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(net, x, label, cfg);
    case AttackKind::bim: return bim(net, x, label, cfg);
    case AttackKind::pgd: return pgd(net, x, label, cfg);
    case AttackKind::auna: return auna(net, x, cfg);
    case AttackKind::noisy:
      cfg.validate();
      return noisy_misclassify(net, x, cfg.epsilon, cfg.max_iterations, cfg.seed);
    case AttackKind::adaptive: return adaptive(net, x, label, layer_index, cfg, target);
  }
  throw InvalidArgument("unknown attack kind");
}

}  // namespace advcheck::attacks
