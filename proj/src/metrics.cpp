#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"

namespace advcheck::evalkit {

namespace {

struct RankSum {
  double second = 0.0;  // rank sum of the second sample
  double tie_term = 0.0;  // sum of t^3 - t over tie groups
};

RankSum rank_sum(std::span<const double> a, std::span<const double> b) {
  std::vector<std::pair<double, int>> all;
  all.reserve(a.size() + b.size());
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  RankSum out;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double midrank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 1) out.second += midrank;
    const double t = double(j - i);
    out.tie_term += t * t * t - t;
    i = j;
  }
  return out;
}

void check_scores(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("both score samples must be non-empty");
  for (double v : a)
    if (std::isnan(v)) throw NumericError("NaN score");
  for (double v : b)
    if (std::isnan(v)) throw NumericError("NaN score");
}

}  // namespace

double asr(std::span<const attacks::AttackResult> results) {
  if (results.empty()) throw InvalidArgument("asr of an empty result set");
  const auto hits = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.success; });
  return double(hits) / double(results.size());
}

double detection_rate(std::span<const detector::Verdict> verdicts) {
  if (verdicts.empty()) return 0.0;
  const auto hits = std::count(verdicts.begin(), verdicts.end(), detector::Verdict::misclassified);
  return double(hits) / double(verdicts.size());
}

double auc(std::span<const double> benign_scores, std::span<const double> misclassified_scores) {
  check_scores(benign_scores, misclassified_scores);
  const double n = double(benign_scores.size()), m = double(misclassified_scores.size());
  const double u = rank_sum(benign_scores, misclassified_scores).second - m * (m + 1.0) / 2.0;
  return u / (n * m);
}

MannWhitneyResult mann_whitney_greater(std::span<const double> lower, std::span<const double> greater) {
  check_scores(lower, greater);
  const double n = double(lower.size()), m = double(greater.size()), total = n + m;
  const auto rs = rank_sum(lower, greater);
  MannWhitneyResult out;
  out.u = rs.second - m * (m + 1.0) / 2.0;
  const double mean = n * m / 2.0;
  const double var = n * m / 12.0 * ((total + 1.0) - rs.tie_term / (total * (total - 1.0)));
  if (var <= 0.0) {
    out.z = 0.0;
    out.p_value = out.u > mean ? 0.0 : 1.0;
    return out;
  }
  out.z = (out.u - mean - 0.5) / std::sqrt(var);
  out.p_value = 0.5 * std::erfc(out.z / std::sqrt(2.0));
  return out;
}

double perturbation_l2(const Tensor& x, const Tensor& x_adv) {
  if (x.shape != x_adv.shape) throw ShapeMismatch("perturbation_l2: " + shape_to_string(x.shape) + " vs " +
                                                  shape_to_string(x_adv.shape));
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x_adv[i]) - double(x[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty sample");
  const auto mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lo + hi);
}

}  // namespace advcheck::evalkit
