#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "errors.hpp"

namespace advcheck::netcore {

std::string_view to_string(Optimizer opt) { return opt == Optimizer::adam ? "adam" : "sgd_momentum"; }

Optimizer optimizer_from_string(std::string_view name) {
  if (name == "adam") return Optimizer::adam;
  if (name == "sgd_momentum" || name == "sgd") return Optimizer::sgd_momentum;
  throw InvalidArgument("unknown optimizer '" + std::string(name) + "'");
}

namespace {

struct OptimizerState {
  ParameterGradients first;   // velocity (sgd) or first moment (adam)
  ParameterGradients second;  // adam second moment
  long step = 0;
};

void apply_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, const TrainOptions& opt, long step) {
  const float lr = float(opt.learning_rate);
  if (opt.optimizer == Optimizer::sgd_momentum) {
    const float mu = float(opt.momentum);
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = mu * m[i] - lr * grad[i];
      param[i] += m[i];
    }
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-7;
  const double c1 = 1.0 - std::pow(b1, double(step));
  const double c2 = 1.0 - std::pow(b2, double(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = float(b1 * m[i] + (1 - b1) * grad[i]);
    v[i] = float(b2 * v[i] + (1 - b2) * double(grad[i]) * grad[i]);
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] -= float(opt.learning_rate * mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace

TrainReport train_classifier(Network& net, std::span<const Tensor> inputs, std::span<const std::size_t> labels,
                             const TrainOptions& options) {
  if (inputs.size() != labels.size()) throw InvalidArgument("train_classifier: inputs and labels differ in length");
  if (inputs.empty()) throw InvalidArgument("train_classifier: empty dataset");
  if (options.batch_size == 0) throw InvalidArgument("train_classifier: batch_size must be positive");
  if (options.epochs < 0) throw InvalidArgument("train_classifier: epochs must be >= 0");
  for (auto l : labels)
    if (l >= net.class_count()) throw InvalidArgument("train_classifier: label " + std::to_string(l) + " out of range");
  if (!options.class_weights.empty() && options.class_weights.size() != net.class_count())
    throw InvalidArgument("train_classifier: class_weights must have one entry per class");

  TrainReport report;
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  OptimizerState state{net.zero_gradients(), net.zero_gradients(), 0};

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      const float inv_batch = 1.0f / float(end - start);
      auto grads = net.zero_gradients();
      for (std::size_t j = start; j < end; ++j) {
        const auto idx = order[j];
        const float w = options.class_weights.empty() ? 1.0f : options.class_weights[labels[idx]];
        double loss = 0.0;
        try {
          loss = net.accumulate_cross_entropy(inputs[idx], labels[idx], w * inv_batch, grads);
        } catch (const NumericError& e) {
          throw TrainingError(epoch, std::string("diverged: ") + e.what());
        }
        loss_sum += loss;
      }
      ++state.step;
      auto& layers = net.mutable_layers();
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!layers[i].has_parameters()) continue;
        apply_update(layers[i].weight, grads.weight[i], state.first.weight[i], state.second.weight[i], options,
                     state.step);
        apply_update(layers[i].bias, grads.bias[i], state.first.bias[i], state.second.bias[i], options, state.step);
      }
    }
    const double mean_loss = loss_sum / double(order.size());
    if (!std::isfinite(mean_loss)) throw TrainingError(epoch, "loss is not finite");
    report.epoch_loss.push_back(mean_loss);
  }
  report.train_accuracy = accuracy(net, inputs, labels);
  return report;
}

TrainReport train_classifier(Network& net, const dataio::LabeledDataset& data, const TrainOptions& options) {
  return train_classifier(net, data.images, data.labels, options);
}

double accuracy(const Network& net, std::span<const Tensor> inputs, std::span<const std::size_t> labels) {
  if (inputs.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (net.predict(inputs[i]) == labels[i]) ++correct;
  return double(correct) / double(inputs.size());
}

}  // namespace advcheck::netcore
