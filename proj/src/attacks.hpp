#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "network.hpp"

namespace advcheck::attacks {

enum class AttackKind { fgsm, bim, pgd, auna, noisy, adaptive };
enum class Norm { l_inf, l_2 };

std::string_view to_string(AttackKind kind);
AttackKind attack_kind_from_string(std::string_view name);
std::string_view to_string(Norm norm);
Norm norm_from_string(std::string_view name);

/// Norm convention of each attack: gradient-sign attacks are l_inf, noise and adaptive attacks l_2.
Norm native_norm(AttackKind kind);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  Norm norm = Norm::l_inf;
  float epsilon = 0.2f;
  float step_size = 0.0f;
  int max_iterations = 1;
  float lambda = 1.0f;
  std::uint64_t seed = 42;

  /// Attack parameter defaults:
  ///   fgsm      l_inf  eps 0.2,  scan of 1000 step sizes
  ///   bim       l_inf  eps 0.3,  step 0.05, 10 iterations
  ///   pgd       l_inf  eps 0.3,  step 0.01, 40 iterations
  ///   auna      l_2    eps 0.2,  1000 attempts
  ///   noisy     l_2    eps 0.25, 1000 attempts
  ///   adaptive  l_2    eps 1.0,  step 0.01, 10 rounds, lambda 1
  static AttackConfig defaults(AttackKind kind);

  /// Throws InvalidArgument on a non-positive budget/step/iteration count or a norm that does not
  /// match the kind's convention.
  void validate() const;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

void to_json(nlohmann::json& j, const AttackConfig& cfg);
/// Missing fields fall back to AttackConfig::defaults(kind); `kind` is required.
void from_json(const nlohmann::json& j, AttackConfig& cfg);

struct AttackResult {
  Tensor x_adv;
  bool success = false;  // prediction differs from the prediction on the clean input
  float perturbation_l2 = 0.0f;
  int iterations_used = 0;
};

/// Black-box access to a model: the predicted class only.
using LabelOracle = std::function<std::size_t(const Tensor&)>;
/// Receives every iterate an iterative attack produces.
using StepObserver = std::function<void(const Tensor&)>;

/// Single-gradient FGSM. The sign of the cross-entropy gradient at x is scaled by eps*k/max_iterations for
/// k = 1..max_iterations and the first scale that flips the prediction is returned; max_iterations = 1
/// is the classic one-shot step at eps.
AttackResult fgsm(const netcore::Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg);

AttackResult bim(const netcore::Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                 const StepObserver& observer = {});

AttackResult pgd(const netcore::Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                 const StepObserver& observer = {});

/// Additive uniform noise: attempt k of max_iterations uses l_2 radius eps*k/max_iterations.
AttackResult auna(const LabelOracle& predict, const Tensor& x, const AttackConfig& cfg);
AttackResult auna(const netcore::Network& net, const Tensor& x, const AttackConfig& cfg);

enum class NoiseShape { uniform, gaussian };

/// The detector's training-noise generator: the auna loop with radius bound_l2.
AttackResult noisy_misclassify(const LabelOracle& predict, const Tensor& x, float bound_l2, int max_attempts,
                               std::uint64_t seed, NoiseShape shape = NoiseShape::uniform);
AttackResult noisy_misclassify(const netcore::Network& net, const Tensor& x, float bound_l2 = 0.25f,
                               int max_attempts = 1000, std::uint64_t seed = 42,
                               NoiseShape shape = NoiseShape::uniform);

/// MSE(mu(x), mu(x_adv)) - lambda * CE(x_adv, label), with mu the local gradient at `layer_index`.
class AdaptiveObjective {
 public:
  static constexpr std::size_t kSubspaceSize = 64;
  static constexpr float kFiniteDifferenceStep = 1e-3f;

  AdaptiveObjective(const netcore::Network& net, const Tensor& x, std::size_t label, std::size_t layer_index,
                    float lambda, netcore::GradientTarget target);

  double mse_term(const Tensor& x_adv) const;
  double value(const Tensor& x_adv) const;

  /// Cross-entropy part by backpropagation; the MSE part by central differences over a random subspace of
  /// kSubspaceSize input coordinates (all coordinates when the input is smaller).
  Tensor gradient(const Tensor& x_adv, std::mt19937_64& rng) const;
  Tensor mse_gradient(const Tensor& x_adv, std::mt19937_64& rng) const;
  Tensor cross_entropy_gradient(const Tensor& x_adv) const;

 private:
  Tensor local_gradient(const Tensor& x) const;

  const netcore::Network& net_;
  std::size_t label_;
  std::size_t layer_;
  float lambda_;
  netcore::GradientTarget target_;
  Tensor reference_;
};

struct AdaptiveTrace {
  std::vector<double> objective;  // value at the start and after every round
};

/// Gradient descent on AdaptiveObjective for max_iterations rounds. Each round steps by
/// step_size * g / max|g| (no pixel moves more than step_size), clips to [0, 1] and projects onto the
/// eps l_2 ball.
AttackResult adaptive(const netcore::Network& net, const Tensor& x, std::size_t label, std::size_t layer_index,
                      const AttackConfig& cfg, netcore::GradientTarget target = netcore::GradientTarget::probability,
                      AdaptiveTrace* trace = nullptr);

/// Dispatches on cfg.kind. `layer_index` is only used by the adaptive attack.
AttackResult run_attack(const netcore::Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg,
                        std::size_t layer_index = 0,
                        netcore::GradientTarget target = netcore::GradientTarget::probability);

/// Pulls x_adv back inside the configured ball around x and into [0, 1].
void project(const Tensor& x, Tensor& x_adv, Norm norm, float epsilon);

}  // namespace advcheck::attacks
