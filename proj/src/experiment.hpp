#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "dataset.hpp"
#include "detector.hpp"
#include "json.hpp"
#include "network.hpp"
#include "trainer.hpp"

namespace advcheck::evalkit {

using nlohmann::json;

struct DatasetSpec {
  std::string kind = "synthetic";  // "synthetic" | "idx"
  dataio::SynthKind pattern = dataio::SynthKind::gaussian_blobs;
  std::size_t classes = 5;
  std::size_t image_side = 10;
  std::size_t train_size = 2000;
  std::size_t test_size = 1000;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t class_count = 10;  // idx only
};

struct ModelSpec {
  std::string checkpoint;  // load instead of training when set
  std::vector<netcore::LayerSpec> architecture;  // empty: conv(8,3) relu pool(2) flatten dense(32) relu dense(C)
  netcore::TrainOptions training;
};

struct DetectorSpec {
  std::optional<std::size_t> layer;  // empty: the flatten layer
  netcore::GradientTarget target = netcore::GradientTarget::probability;
  // Desk-scale defaults: unweighted loss, and noise bounds that escalate far enough for 10x10 inputs.
  detector::DetectorConfig model{.structure = {512, 2}, .epochs = 7, .batch_size = 32, .learning_rate = 0.02,
                                 .class_weighting = false, .seed = 42};
  detector::TrainingSetOptions training_set{.n_benign = 10,
                                            .n_misclassified = 200,
                                            .bound_l2 = 0.25f,
                                            .bound_step = 0.25f,
                                            .max_bound_l2 = 4.0f,
                                            .max_attempts = 1000,
                                            .noise = attacks::NoiseShape::uniform,
                                            .seed = 42,
                                            .workers = 1};
};

struct EvaluationSpec {
  std::size_t adversarial_per_attack = 200;
  std::size_t benign_count = 200;
  std::size_t max_attack_inputs = 1000;
  bool natural_misclassified = true;
  bool measure_timing = false;  // wall-clock numbers make reports run-dependent
  std::size_t timing_calls = 100;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  unsigned workers = 1;
  DatasetSpec dataset;
  ModelSpec model;
  DetectorSpec detector;
  std::vector<attacks::AttackConfig> attacks;
  EvaluationSpec evaluation;

  /// Applies `seed` to every component that did not set its own.
  static ExperimentConfig from_json(const json& j);
  json to_json() const;
};

json layer_to_json(const netcore::LayerSpec& layer);
netcore::LayerSpec layer_from_json(const json& j);
std::vector<netcore::LayerSpec> default_architecture(std::size_t classes);

struct AttackReport {
  attacks::AttackConfig config;
  std::size_t attempted = 0;
  std::size_t succeeded = 0;
  std::size_t detected = 0;
  double asr = 0.0;
  double detection_rate = 0.0;
  double mean_perturbation_l2 = 0.0;
  std::optional<double> auc;
  std::optional<double> objective_decrease_rate;  // adaptive only
  std::optional<double> seconds_per_detection;

  friend bool operator==(const AttackReport&, const AttackReport&) = default;
};

struct NaturalReport {
  std::size_t count = 0;
  std::size_t detected = 0;
  std::optional<double> detection_rate;

  friend bool operator==(const NaturalReport&, const NaturalReport&) = default;
};

struct StageError {
  std::string stage;
  int code = 0;
  std::string message;

  friend bool operator==(const StageError&, const StageError&) = default;
};

struct EvalReport {
  json config;
  std::uint64_t seed = 0;
  std::string model_fingerprint;
  std::size_t test_count = 0;
  double clean_accuracy = 0.0;
  std::size_t layer_index = 0;
  std::string layer_name;
  std::string gradient_target;
  std::size_t detector_records = 0;
  double detector_train_accuracy = 0.0;
  double noise_bound_l2 = 0.0;
  std::size_t benign_count = 0;
  std::size_t benign_flagged = 0;
  double benign_detection_accuracy = 0.0;
  std::optional<double> seconds_per_detection;
  std::vector<AttackReport> attacks;
  std::optional<NaturalReport> natural;
  std::optional<StageError> error;

  json to_json() const;
  static EvalReport from_json(const json& j);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Inputs an attack produced from correctly classified sources, in source order.
struct AdversarialSet {
  attacks::AttackConfig config;
  std::size_t attempted = 0;
  std::vector<Tensor> adversarial;  // successes only
  std::vector<std::size_t> source_index;  // test-split index each success came from
  std::vector<double> perturbation_l2;  // per success
  std::size_t objective_decreasing = 0;  // adaptive: successes-or-not whose objective fell every round
};

using Logger = std::function<void(const std::string&)>;

/// Lazily prepares data, the base model, detector training inputs and adversarial sets, caching each
/// so that reports and sweeps over one configuration share work.
class Session {
 public:
  explicit Session(ExperimentConfig config, Logger log = {});

  const ExperimentConfig& config() const noexcept { return config_; }
  const dataio::LabeledDataset& train_data();
  const dataio::LabeledDataset& test_data();
  const netcore::Network& model();
  /// Replaces the configured model; cached detector inputs and adversarial sets are dropped.
  void set_model(netcore::Network net);
  const std::string& model_fingerprint();
  std::size_t layer();
  double clean_accuracy();

  /// Correctly classified test indices in seeded order.
  const std::vector<std::size_t>& correct_test_order();
  /// The first benign_count entries of correct_test_order.
  const std::vector<Tensor>& benign_inputs();

  const detector::TrainingInputs& noisy_inputs(attacks::NoiseShape shape = attacks::NoiseShape::uniform);
  /// Detector training inputs whose positives come from `attack` run on the training split.
  const detector::TrainingInputs& attack_training_inputs(const attacks::AttackConfig& attack);

  const AdversarialSet& adversarial(const attacks::AttackConfig& attack);

  detector::DetectorModel train_detector(const detector::TrainingInputs& inputs, std::size_t layer_index,
                                         const std::string& source);
  const detector::DetectorModel& detector();

  /// Runs the configured protocol. Stage failures are recorded in the report's error section.
  EvalReport evaluate();

  /// `source,example_index,min,max,median` over |features| for benign, noisy and every configured attack.
  std::string distributions();

 private:
  void log(const std::string& line) const;

  ExperimentConfig config_;
  Logger log_;
  std::optional<dataio::LabeledDataset> train_, test_;
  std::optional<netcore::Network> model_;
  std::string fingerprint_;
  std::optional<std::vector<std::size_t>> correct_test_;
  std::optional<std::vector<Tensor>> benign_;
  std::map<int, detector::TrainingInputs> noisy_;
  std::map<std::string, detector::TrainingInputs> attack_training_;
  std::map<std::string, AdversarialSet> adversarial_;
  std::optional<detector::DetectorModel> detector_;
};

EvalReport run_experiment(const ExperimentConfig& config, Logger log = {});

struct LayerSweepRow {
  std::size_t layer_index = 0;
  std::string layer_name;
  std::size_t feature_length = 0;
  double detection_rate = 0.0;
};

/// One detector per eligible layer, each scored on the configured FGSM set.
std::vector<LayerSweepRow> sweep_layers(Session& session);

struct SourceMatrix {
  std::vector<std::string> sources;  // detector training positives
  std::vector<std::string> targets;  // attacks scored
  std::vector<std::vector<double>> detection_rate;  // [source][target]
};

/// Detectors trained on noise, gaussian, fgsm and pgd positives, scored on fgsm, pgd and auna sets.
SourceMatrix sweep_training_source(Session& session);

json to_json(const std::vector<LayerSweepRow>& rows);
json to_json(const SourceMatrix& matrix);

struct NamedInputs {
  std::string source;
  std::vector<Tensor> inputs;
};

/// CSV of per-example statistics of |local gradient|.
std::string export_distributions(const netcore::Network& net, const std::vector<NamedInputs>& sets,
                                 std::size_t layer_index, netcore::GradientTarget target, unsigned workers = 1);

/// Mean l2 distance between `pairs` random pairs of inputs with different labels.
double mean_interclass_distance(const dataio::LabeledDataset& data, std::size_t pairs, std::uint64_t seed);

}  // namespace advcheck::evalkit
