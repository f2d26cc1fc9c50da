#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "network.hpp"

namespace advcheck::netcore {

enum class Optimizer { sgd_momentum, adam };

std::string_view to_string(Optimizer opt);
Optimizer optimizer_from_string(std::string_view name);

struct TrainOptions {
  double learning_rate = 0.05;
  double momentum = 0.9;  // sgd_momentum only
  int epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::sgd_momentum;
  std::vector<float> class_weights;  // empty: every class weighs 1
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  double train_accuracy = 0.0;
};

/// Minibatch cross-entropy training, in place. The visiting order is drawn from `seed`, so results are
/// reproducible bit-for-bit. A non-finite loss raises TrainingError carrying the epoch index.
TrainReport train_classifier(Network& net, std::span<const Tensor> inputs, std::span<const std::size_t> labels,
                             const TrainOptions& options);
TrainReport train_classifier(Network& net, const dataio::LabeledDataset& data, const TrainOptions& options);

double accuracy(const Network& net, std::span<const Tensor> inputs, std::span<const std::size_t> labels);

}  // namespace advcheck::netcore
