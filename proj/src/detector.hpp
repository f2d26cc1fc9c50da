#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "dataset.hpp"
#include "network.hpp"

namespace advcheck::detector {

enum class Verdict : int { benign = 0, misclassified = 1 };

std::string_view to_string(Verdict v);

/// One detector example: the flattened local gradient and its label.
struct LocalGradientRecord {
  std::vector<float> features;
  Verdict label = Verdict::benign;
  std::string source;  // "benign", "noisy", "attack:<kind>", ...
};

/// The layer between the convolutional stack and the dense head: the flatten layer.
std::size_t default_layer(const netcore::Network& net);

/// Layers a detector can be trained on: conv2d, flatten and hidden dense layers.
std::vector<std::size_t> eligible_layers(const netcore::Network& net);

/// Flattened derivative of the predicted class's score w.r.t. the output of `layer_index`.
std::vector<float> local_gradient(const netcore::Network& net, const Tensor& x, std::size_t layer_index,
                                  netcore::GradientTarget target = netcore::GradientTarget::probability);

struct TrainingSetOptions {
  std::size_t n_benign = 10;
  std::size_t n_misclassified = 200;
  float bound_l2 = 0.25f;
  float bound_step = 0.05f;
  float max_bound_l2 = 0.5f;
  int max_attempts = 1000;
  attacks::NoiseShape noise = attacks::NoiseShape::uniform;
  std::uint64_t seed = 42;
  unsigned workers = 1;
};

/// Benign inputs and their noise-perturbed misclassified counterparts, before feature extraction.
struct TrainingInputs {
  std::vector<Tensor> benign;
  std::vector<Tensor> misclassified;
  float final_bound_l2 = 0.0f;  // noise bound in effect when the quota was met
  std::size_t sources_tried = 0;
};

/// Picks n_benign correctly classified inputs (seeded order) and generates n_misclassified noisy
/// misclassified inputs from correctly classified sources. When a bound level cannot meet the quota the
/// bound rises by bound_step up to max_bound_l2. A level is abandoned early once the success rate over
/// its first sources cannot reach the remaining quota.
TrainingInputs collect_training_inputs(const netcore::Network& net, const dataio::LabeledDataset& pool,
                                       const TrainingSetOptions& options);

std::vector<LocalGradientRecord> to_records(const netcore::Network& net, const TrainingInputs& inputs,
                                            std::size_t layer_index, netcore::GradientTarget target,
                                            const std::string& misclassified_source = "noisy");

std::vector<LocalGradientRecord> build_training_set(const netcore::Network& net, const dataio::LabeledDataset& pool,
                                                    std::size_t layer_index, const TrainingSetOptions& options,
                                                    netcore::GradientTarget target =
                                                        netcore::GradientTarget::probability);

struct DetectorConfig {
  std::vector<std::size_t> structure{512, 2};
  int epochs = 7;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  bool class_weighting = true;
  std::uint64_t seed = 42;
};

struct DetectionResult {
  Verdict verdict = Verdict::benign;
  float score = 0.0f;  // softmax probability of "misclassified"
};

class DetectorModel {
 public:
  DetectorModel(netcore::Network net, std::size_t layer_index, std::string base_fingerprint,
                netcore::GradientTarget target, double train_accuracy = 0.0);

  const netcore::Network& network() const noexcept { return net_; }
  std::size_t layer_index() const noexcept { return layer_index_; }
  const std::string& base_fingerprint() const noexcept { return base_fingerprint_; }
  std::size_t feature_length() const noexcept { return net_.input_shape()[0]; }
  netcore::GradientTarget gradient_target() const noexcept { return target_; }
  double train_accuracy() const noexcept { return train_accuracy_; }

  /// Throws CompatibilityError unless `base` is the model this detector was trained for.
  void check_compatible(const netcore::Network& base) const;

  DetectionResult classify(std::span<const float> features) const;

  void save(const std::filesystem::path& path) const;
  static DetectorModel load(const std::filesystem::path& path);

  friend bool operator==(const DetectorModel&, const DetectorModel&) = default;

 private:
  netcore::Network net_;
  std::size_t layer_index_;
  std::string base_fingerprint_;
  netcore::GradientTarget target_;
  double train_accuracy_;
};

/// Trains the fully connected detector. Hidden widths come from structure[0..n-2]; the last entry must be 2.
DetectorModel train_detector(const std::vector<LocalGradientRecord>& records, std::size_t layer_index,
                             std::string base_fingerprint, netcore::GradientTarget target,
                             const DetectorConfig& config);

/// A detector paired with the base model it was verified against; the fingerprint check runs once.
class BoundDetector {
 public:
  BoundDetector(const netcore::Network& base, const DetectorModel& detector);
  DetectionResult detect(const Tensor& x) const;

 private:
  const netcore::Network& base_;
  const DetectorModel& detector_;
};

DetectionResult detect(const netcore::Network& base, const DetectorModel& detector, const Tensor& x);

}  // namespace advcheck::detector
