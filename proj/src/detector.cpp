#include "detector.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "parallel.hpp"
#include "trainer.hpp"

namespace advcheck::detector {

using netcore::GradientTarget;
using netcore::LayerKind;
using netcore::LayerSpec;
using netcore::Network;

std::string_view to_string(Verdict v) { return v == Verdict::benign ? "benign" : "misclassified"; }

std::size_t default_layer(const Network& net) {
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::flatten) return i;
  throw StructureError("network has no flatten layer to take local gradients from");
}

std::vector<std::size_t> eligible_layers(const Network& net) {
  std::vector<std::size_t> out;
  const auto& layers = net.layers();
  // The logit layer is excluded: its local gradient does not depend on the input beyond the class.
  for (std::size_t i = 0; i < net.logit_layer(); ++i) {
    const auto k = layers[i].kind;
    if (k == LayerKind::conv2d || k == LayerKind::flatten || k == LayerKind::dense) out.push_back(i);
  }
  return out;
}

std::vector<float> local_gradient(const Network& net, const Tensor& x, std::size_t layer_index, GradientTarget target) {
  const auto trace = net.forward(x);
  return net.grad_wrt_layer(trace, x, layer_index, trace.predicted, target).data;
}

TrainingInputs collect_training_inputs(const Network& net, const dataio::LabeledDataset& pool,
                                       const TrainingSetOptions& options) {
  if (pool.size() != pool.labels.size()) throw DataError("dataset images and labels differ in length");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> correct;
  for (auto i : order)
    if (net.predict(pool.images[i]) == pool.labels[i]) correct.push_back(i);
  if (correct.size() < options.n_benign)
    throw DataError("only " + std::to_string(correct.size()) + " correctly classified inputs, need " +
                    std::to_string(options.n_benign) + " benign examples");

  TrainingInputs out;
  for (std::size_t i = 0; i < options.n_benign; ++i) out.benign.push_back(pool.images[correct[i]]);
  if (options.n_misclassified == 0) return out;
  if (correct.empty()) throw DataError("no correctly classified inputs to perturb");
  if (!(options.bound_step > 0.0f)) throw InvalidArgument("bound_step must be > 0");

  const std::size_t quota = options.n_misclassified;
  std::vector<bool> done(correct.size(), false);
  const std::size_t chunk = std::max<std::size_t>(16, std::size_t(options.workers) * 4);

  for (std::size_t level = 0;; ++level) {
    const float bound = options.bound_l2 + float(level) * options.bound_step;
    if (bound > options.max_bound_l2 + 1e-6f)
      throw QuotaError(out.misclassified.size(), quota,
                       "noisy misclassified quota unreachable up to l2 bound " + std::to_string(options.max_bound_l2));
    out.final_bound_l2 = bound;

    std::vector<std::size_t> pending;
    for (std::size_t j = 0; j < correct.size(); ++j)
      if (!done[j]) pending.push_back(j);
    const std::size_t probe = std::max<std::size_t>(32, pending.size() / 10);
    std::size_t tried = 0, found = 0;
    bool escalate = false;

    for (std::size_t start = 0; start < pending.size() && !escalate; start += chunk) {
      const std::size_t end = std::min(pending.size(), start + chunk);
      std::vector<attacks::AttackResult> results(end - start);
      parallel_for(start, end, options.workers, [&](std::size_t p) {
        const auto j = pending[p];
        results[p - start] = attacks::noisy_misclassify(net, pool.images[correct[j]], bound, options.max_attempts,
                                                        derive_seed(options.seed, correct[j], level), options.noise);
      });
      for (std::size_t p = start; p < end; ++p) {
        ++tried;
        ++out.sources_tried;
        auto& r = results[p - start];
        if (!r.success) continue;
        done[pending[p]] = true;
        ++found;
        out.misclassified.push_back(std::move(r.x_adv));
        if (out.misclassified.size() == quota) return out;
      }
      if (tried >= probe) {
        const double projected = double(found) * double(pending.size()) / double(tried);
        if (double(out.misclassified.size()) - double(found) + projected < double(quota)) escalate = true;
      }
    }
  }
}

std::vector<LocalGradientRecord> to_records(const Network& net, const TrainingInputs& inputs, std::size_t layer_index,
                                            GradientTarget target, const std::string& misclassified_source) {
  std::vector<LocalGradientRecord> records;
  records.reserve(inputs.benign.size() + inputs.misclassified.size());
  for (const auto& x : inputs.benign)
    records.push_back({local_gradient(net, x, layer_index, target), Verdict::benign, "benign"});
  for (const auto& x : inputs.misclassified)
    records.push_back({local_gradient(net, x, layer_index, target), Verdict::misclassified, misclassified_source});
  return records;
}

std::vector<LocalGradientRecord> build_training_set(const Network& net, const dataio::LabeledDataset& pool,
                                                    std::size_t layer_index, const TrainingSetOptions& options,
                                                    GradientTarget target) {
  if (layer_index >= net.layer_count()) throw InvalidArgument("layer index out of range");
  return to_records(net, collect_training_inputs(net, pool, options), layer_index, target);
}

DetectorModel::DetectorModel(Network net, std::size_t layer_index, std::string base_fingerprint, GradientTarget target,
                             double train_accuracy)
    : net_(std::move(net)),
      layer_index_(layer_index),
      base_fingerprint_(std::move(base_fingerprint)),
      target_(target),
      train_accuracy_(train_accuracy) {
  if (net_.class_count() != 2) throw StructureError("detector must have exactly 2 outputs");
  if (net_.input_shape().size() != 1) throw StructureError("detector input must be a flat feature vector");
}

void DetectorModel::check_compatible(const Network& base) const {
  if (layer_index_ >= base.layer_count())
    throw CompatibilityError("detector layer index " + std::to_string(layer_index_) + " not present in base model");
  if (shape_size(base.layers()[layer_index_].output_shape) != feature_length())
    throw CompatibilityError("detector expects " + std::to_string(feature_length()) + " features");
  if (netcore::fingerprint(base) != base_fingerprint_)
    throw CompatibilityError("detector was trained for a different base model (fingerprint mismatch)");
}

DetectionResult DetectorModel::classify(std::span<const float> features) const {
  if (features.size() != feature_length())
    throw CompatibilityError("feature length " + std::to_string(features.size()) + " != detector input " +
                             std::to_string(feature_length()));
  const auto trace = net_.forward(Tensor({features.size()}, std::vector<float>(features.begin(), features.end())));
  const auto p = softmax(trace.logits);
  return {trace.predicted == 1 ? Verdict::misclassified : Verdict::benign, p[1]};
}

void DetectorModel::save(const std::filesystem::path& path) const {
  char acc[32];
  std::snprintf(acc, sizeof acc, "%.17g", train_accuracy_);
  netcore::save_checkpoint(path, net_,
                           {{"kind", "detector"},
                            {"layer_index", std::to_string(layer_index_)},
                            {"base_fingerprint", base_fingerprint_},
                            {"feature_length", std::to_string(feature_length())},
                            {"gradient_target", std::string(netcore::to_string(target_))},
                            {"train_accuracy", acc}});
}

DetectorModel DetectorModel::load(const std::filesystem::path& path) {
  auto ckpt = netcore::load_checkpoint(path);
  auto& m = ckpt.metadata;
  auto field = [&](const std::string& key) -> const std::string& {
    const auto it = m.find(key);
    if (it == m.end()) throw FormatError("meta." + key, "missing from detector checkpoint");
    return it->second;
  };
  if (field("kind") != "detector") throw FormatError("meta.kind", "not a detector checkpoint");
  std::size_t layer = 0, features = 0;
  try {
    layer = std::stoul(field("layer_index"));
    features = std::stoul(field("feature_length"));
  } catch (const std::logic_error&) {
    throw FormatError("meta.layer_index", "not an integer");
  }
  if (ckpt.network.input_shape() != Shape{features})
    throw FormatError("meta.feature_length", "does not match the detector input layer");
  const auto target = netcore::gradient_target_from_string(field("gradient_target"));
  double acc = 0.0;
  if (m.contains("train_accuracy")) acc = std::stod(m.at("train_accuracy"));
  return DetectorModel(std::move(ckpt.network), layer, field("base_fingerprint"), target, acc);
}

DetectorModel train_detector(const std::vector<LocalGradientRecord>& records, std::size_t layer_index,
                             std::string base_fingerprint, GradientTarget target, const DetectorConfig& config) {
  if (records.empty()) throw InvalidArgument("train_detector: no records");
  const auto width = records.front().features.size();
  if (width == 0) throw InvalidArgument("train_detector: empty feature vectors");
  std::size_t counts[2] = {0, 0};
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;
  inputs.reserve(records.size());
  for (const auto& r : records) {
    if (r.features.size() != width) throw InvalidArgument("train_detector: records differ in feature length");
    ++counts[int(r.label)];
    inputs.emplace_back(Shape{width}, r.features);
    labels.push_back(std::size_t(r.label));
  }
  if (counts[0] == 0 || counts[1] == 0) throw InvalidArgument("train_detector: records must contain both labels");
  if (config.structure.empty() || config.structure.back() != 2)
    throw InvalidArgument("train_detector: structure must end with 2 outputs");

  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < config.structure.size(); ++i) {
    layers.push_back(LayerSpec::dense(config.structure[i]));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::dense(2));
  auto net = Network::initialized({width}, std::move(layers), config.seed);

  netcore::TrainOptions opt;
  opt.learning_rate = config.learning_rate;
  opt.epochs = config.epochs;
  opt.batch_size = config.batch_size;
  opt.seed = derive_seed(config.seed, 1);
  opt.optimizer = netcore::Optimizer::adam;
  if (config.class_weighting) {
    const double n = double(records.size());
    opt.class_weights = {float(n / (2.0 * counts[0])), float(n / (2.0 * counts[1]))};
  }
  const auto report = netcore::train_classifier(net, inputs, labels, opt);
  return DetectorModel(std::move(net), layer_index, std::move(base_fingerprint), target, report.train_accuracy);
}

BoundDetector::BoundDetector(const Network& base, const DetectorModel& detector) : base_(base), detector_(detector) {
  detector.check_compatible(base);
}

DetectionResult BoundDetector::detect(const Tensor& x) const {
  return detector_.classify(local_gradient(base_, x, detector_.layer_index(), detector_.gradient_target()));
}

DetectionResult detect(const Network& base, const DetectorModel& detector, const Tensor& x) {
  return BoundDetector(base, detector).detect(x);
}

}  // namespace advcheck::detector
