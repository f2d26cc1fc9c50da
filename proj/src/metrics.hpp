#pragma once

#include <span>
#include <vector>

#include "attacks.hpp"
#include "detector.hpp"
#include "tensor.hpp"

namespace advcheck::evalkit {

/// Fraction of attack results that flipped the prediction. Throws InvalidArgument when empty.
double asr(std::span<const attacks::AttackResult> results);

/// Fraction of verdicts that flag the input as misclassified; 0 for an empty set.
double detection_rate(std::span<const detector::Verdict> verdicts);

/// Normalized Mann-Whitney U: probability that a misclassified score exceeds a benign one, ties
/// counted 1/2. Computed from midranks in O(n log n).
double auc(std::span<const double> benign_scores, std::span<const double> misclassified_scores);

struct MannWhitneyResult {
  double u = 0.0;  // U of the second sample
  double z = 0.0;
  double p_value = 1.0;  // one-sided: second sample stochastically greater
};

/// One-sided Mann-Whitney U test, normal approximation with tie and continuity corrections.
MannWhitneyResult mann_whitney_greater(std::span<const double> lower, std::span<const double> greater);

double perturbation_l2(const Tensor& x, const Tensor& x_adv);

/// Median of a non-empty sample (mean of the middle pair for even sizes).
double median(std::vector<double> values);

}  // namespace advcheck::evalkit
