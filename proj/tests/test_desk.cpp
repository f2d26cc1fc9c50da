// Measured properties of the desk-scale pipeline.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "attacks.hpp"
#include "dataset.hpp"
#include "desk.hpp"
#include "detector.hpp"
#include "doctest.h"
#include "experiment.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "trainer.hpp"

using namespace advcheck;
using namespace advcheck::evalkit;
using attacks::AttackConfig;
using attacks::AttackKind;

namespace {

Session& desk() {
  static Session session(ExperimentConfig::from_json(testing::desk_config_json({"fgsm", "bim", "pgd", "auna"})));
  return session;
}

const AttackConfig& configured(AttackKind kind) {
  for (const auto& a : desk().config().attacks)
    if (a.kind == kind) return a;
  throw std::logic_error("attack not configured");
}

double linf(const std::vector<float>& v) {
  double m = 0.0;
  for (float f : v) m = std::max(m, double(std::abs(f)));
  return m;
}

std::vector<double> linf_features(const std::vector<Tensor>& xs) {
  auto& s = desk();
  std::vector<double> out;
  for (const auto& x : xs) out.push_back(linf(detector::local_gradient(s.model(), x, s.layer())));
  return out;
}

}  // namespace

TEST_CASE("desk net is accurate") {
  CHECK(desk().clean_accuracy() >= 0.9);
}

TEST_CASE("bim succeeds at least as often as fgsm at equal epsilon") {
  auto& s = desk();
  auto fgsm = configured(AttackKind::fgsm);
  auto bim = configured(AttackKind::bim);
  fgsm.epsilon = bim.epsilon;
  const auto& order = s.correct_test_order();
  REQUIRE(order.size() >= 200);
  std::size_t f = 0, b = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& x = s.test_data().images[order[i]];
    const auto y = s.test_data().labels[order[i]];
    f += attacks::fgsm(s.model(), x, y, fgsm).success;
    b += attacks::bim(s.model(), x, y, bim).success;
  }
  MESSAGE("eps " << bim.epsilon << ": fgsm " << f << "/200, bim " << b << "/200");
  CHECK(b >= f);
}

TEST_CASE("noisy training examples: base rate or escalation") {
  auto& s = desk();
  const auto& order = s.correct_test_order();
  std::size_t hits = 0;
  const std::size_t n = 100;
  for (std::size_t i = 0; i < n; ++i)
    hits += attacks::noisy_misclassify(s.model(), s.test_data().images[order[i]], 0.25f, 1000, derive_seed(7, i)).success;
  const double rate = double(hits) / double(n);
  const auto& inputs = s.noisy_inputs();
  MESSAGE("noisy rate at l2 0.25: " << rate << ", final bound " << inputs.final_bound_l2 << " over "
                                     << inputs.sources_tried << " sources");
  CHECK(inputs.misclassified.size() == s.config().detector.training_set.n_misclassified);
  if (rate < 0.3) CHECK(inputs.final_bound_l2 > 0.25f);
}

TEST_CASE("detector fits its 210-record training set") {
  const auto& det = desk().detector();
  CHECK(desk().noisy_inputs().benign.size() + desk().noisy_inputs().misclassified.size() == 210);
  CHECK(det.train_accuracy() >= 0.95);
}

TEST_CASE("fgsm local gradients are at least ten times the benign ones") {
  auto& s = desk();
  const auto benign = median(linf_features(s.benign_inputs()));
  const auto& adv = s.adversarial(configured(AttackKind::fgsm));
  REQUIRE(adv.adversarial.size() == 200);
  const auto fgsm = median(linf_features(adv.adversarial));
  MESSAGE("median |mu|_inf benign " << benign << ", fgsm " << fgsm);
  CHECK(fgsm >= 10.0 * benign);
}

TEST_CASE("fgsm detection rate on 200 held-out examples") {
  auto& s = desk();
  const auto& adv = s.adversarial(configured(AttackKind::fgsm));
  std::size_t flagged = 0;
  for (const auto& x : adv.adversarial)
    flagged += detector::detect(s.model(), s.detector(), x).verdict == detector::Verdict::misclassified;
  CHECK(double(flagged) / double(adv.adversarial.size()) >= 0.95);
}

TEST_CASE("benign medians sit ten times below every attack's") {
  const auto csv = desk().distributions();
  std::map<std::string, std::vector<double>> medians;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string source, field;
    std::getline(row, source, ',');
    for (int i = 0; i < 3; ++i) std::getline(row, field, ',');
    std::getline(row, field, ',');
    medians[source].push_back(std::stod(field));
  }
  REQUIRE(medians.count("benign"));
  const double benign = median(medians.at("benign"));
  for (const auto& [source, values] : medians) {
    if (source == "benign") continue;
    MESSAGE(source << " median " << median(values) << " vs benign " << benign);
    CHECK(median(values) >= 10.0 * benign);
  }
}

TEST_CASE("desk protocol meets the detection floors") {
  const auto r = desk().evaluate();
  REQUIRE_FALSE(r.error);
  CHECK(r.benign_detection_accuracy >= 0.95);
  for (const auto& a : r.attacks) {
    INFO(attacks::to_string(a.config.kind));
    CHECK(a.detection_rate >= (a.config.kind == AttackKind::auna ? 0.90 : 0.95));
  }
}

TEST_CASE("training-source diagonal is not beaten by other sources") {
  const auto m = sweep_training_source(desk());
  for (std::size_t t = 0; t < m.targets.size(); ++t) {
    const auto self = std::find(m.sources.begin(), m.sources.end(), m.targets[t]);
    if (self == m.sources.end()) continue;
    const double diag = m.detection_rate[std::size_t(self - m.sources.begin())][t];
    for (std::size_t s = 0; s < m.sources.size(); ++s) {
      INFO(m.sources[s] << " -> " << m.targets[t]);
      CHECK(diag >= m.detection_rate[s][t] - 0.05);
    }
  }
}

TEST_CASE("layer sweep stays above the floor") {
  for (const auto& row : sweep_layers(desk())) {
    INFO(row.layer_name);
    CHECK(row.detection_rate >= 0.90);
  }
}

TEST_CASE("adaptive objective decreases every round on most attempts") {
  auto& s = desk();
  auto cfg = testing::desk_config_json({"adaptive"})["attacks"][0].get<AttackConfig>();
  const auto& order = s.correct_test_order();
  std::size_t decreasing = 0;
  const std::size_t n = 50;
  for (std::size_t i = 0; i < n; ++i) {
    attacks::AdaptiveTrace trace;
    cfg.seed = derive_seed(11, i);
    attacks::adaptive(s.model(), s.test_data().images[order[i]], s.test_data().labels[order[i]], s.layer(), cfg,
                      netcore::GradientTarget::probability, &trace);
    bool strict = true;
    for (std::size_t k = 1; k < trace.objective.size(); ++k) strict = strict && trace.objective[k] < trace.objective[k - 1];
    decreasing += strict;
  }
  MESSAGE("strictly decreasing on " << decreasing << "/" << n);
  CHECK(double(decreasing) / double(n) >= 0.8);
}

TEST_CASE("auna fools half the inputs at half the inter-class distance" * doctest::may_fail()) {
  auto& s = desk();
  const double distance = mean_interclass_distance(s.test_data(), 2000, 5);
  auto cfg = configured(AttackKind::auna);
  cfg.epsilon = float(0.5 * distance);
  const auto& order = s.correct_test_order();
  std::size_t hits = 0;
  const std::size_t n = 100;
  for (std::size_t i = 0; i < n; ++i) {
    cfg.seed = derive_seed(13, i);
    hits += attacks::auna(s.model(), s.test_data().images[order[i]], cfg).success;
  }
  MESSAGE("mean inter-class distance " << distance << ", auna at eps " << cfg.epsilon << ": " << hits << "/" << n);
  CHECK(double(hits) / double(n) >= 0.5);
}

TEST_CASE("small conv net generalizes on 8x8 striped digits") {
  const auto train = dataio::synth_dataset(dataio::SynthKind::striped_patterns, 1000, 10, 8, 21);
  const auto test = dataio::synth_dataset(dataio::SynthKind::striped_patterns, 500, 10, 8, 22);
  auto net = netcore::Network::initialized({1, 8, 8}, default_architecture(10), 23);
  netcore::TrainOptions opt;
  opt.epochs = 20;
  netcore::train_classifier(net, train, opt);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += net.predict(test.images[i]) == test.labels[i];
  const double acc = double(correct) / double(test.size());
  MESSAGE("held-out accuracy " << acc);
  CHECK(acc >= 0.9);
}
