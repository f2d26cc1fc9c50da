#include "experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "parallel.hpp"

namespace advcheck::evalkit {

using attacks::AttackConfig;
using attacks::AttackKind;
using detector::DetectorModel;
using detector::TrainingInputs;
using detector::Verdict;
using netcore::LayerKind;
using netcore::LayerSpec;
using netcore::Network;

namespace {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

std::size_t chunk_size(unsigned workers) { return std::max<std::size_t>(16, std::size_t(workers) * 4); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::string cache_key(const AttackConfig& cfg) {
  json j = cfg;
  return j.dump();
}

double median_seconds(const std::vector<Tensor>& inputs, std::size_t calls, const detector::BoundDetector& det) {
  std::vector<double> seconds;
  seconds.reserve(calls);
  for (std::size_t i = 0; i < calls; ++i) {
    const auto start = std::chrono::steady_clock::now();
    (void)det.detect(inputs[i % inputs.size()]);
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return median(std::move(seconds));
}

std::vector<detector::DetectionResult> detect_all(const detector::BoundDetector& det, const std::vector<Tensor>& xs,
                                                  unsigned workers) {
  std::vector<detector::DetectionResult> out(xs.size());
  parallel_for(0, xs.size(), workers, [&](std::size_t i) { out[i] = det.detect(xs[i]); });
  return out;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

json layer_to_json(const LayerSpec& layer) {
  json j{{"kind", std::string(netcore::to_string(layer.kind))}};
  switch (layer.kind) {
    case LayerKind::conv2d:
      j["out_channels"] = layer.out_channels;
      j["kernel"] = layer.kernel;
      j["stride"] = layer.stride;
      j["padding"] = layer.padding;
      break;
    case LayerKind::maxpool2d:
      j["kernel"] = layer.kernel;
      j["stride"] = layer.stride;
      break;
    case LayerKind::dense:
      j["units"] = layer.units;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  const auto kind = netcore::layer_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case LayerKind::conv2d:
      return LayerSpec::conv2d(j.at("out_channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
                               get_or<std::size_t>(j, "stride", 1), get_or<std::size_t>(j, "padding", 0));
    case LayerKind::maxpool2d:
      return LayerSpec::maxpool2d(j.at("kernel").get<std::size_t>(), get_or<std::size_t>(j, "stride", 0));
    case LayerKind::dense:
      return LayerSpec::dense(j.at("units").get<std::size_t>());
    case LayerKind::relu:
      return LayerSpec::relu();
    case LayerKind::flatten:
      return LayerSpec::flatten();
    case LayerKind::softmax:
      return LayerSpec::softmax();
  }
  throw InvalidArgument("unknown layer kind");
}

std::vector<LayerSpec> default_architecture(std::size_t classes) {
  return {LayerSpec::conv2d(8, 3), LayerSpec::relu(),      LayerSpec::maxpool2d(2), LayerSpec::flatten(),
          LayerSpec::dense(32),    LayerSpec::relu(),      LayerSpec::dense(classes)};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    c.seed = get_or<std::uint64_t>(j, "seed", 42);
    c.workers = std::max(1u, get_or<unsigned>(j, "workers", 1));

    const json d = get_or<json>(j, "dataset", json::object());
    c.dataset.kind = get_or<std::string>(d, "kind", "synthetic");
    if (c.dataset.kind == "synthetic") {
      c.dataset.pattern = dataio::synth_kind_from_string(get_or<std::string>(d, "pattern", "gaussian_blobs"));
      c.dataset.classes = get_or<std::size_t>(d, "classes", c.dataset.classes);
      c.dataset.image_side = get_or<std::size_t>(d, "image_side", c.dataset.image_side);
      c.dataset.train_size = get_or<std::size_t>(d, "train_size", c.dataset.train_size);
      c.dataset.test_size = get_or<std::size_t>(d, "test_size", c.dataset.test_size);
    } else if (c.dataset.kind == "idx") {
      c.dataset.train_images = d.at("train_images").get<std::string>();
      c.dataset.train_labels = d.at("train_labels").get<std::string>();
      c.dataset.test_images = d.at("test_images").get<std::string>();
      c.dataset.test_labels = d.at("test_labels").get<std::string>();
      c.dataset.class_count = get_or<std::size_t>(d, "class_count", 10);
    } else {
      throw InvalidArgument("dataset.kind must be \"synthetic\" or \"idx\"");
    }

    const json m = get_or<json>(j, "model", json::object());
    c.model.checkpoint = get_or<std::string>(m, "checkpoint", "");
    if (m.contains("architecture"))
      for (const auto& l : m.at("architecture")) c.model.architecture.push_back(layer_from_json(l));
    const json t = get_or<json>(m, "training", json::object());
    auto& to = c.model.training;
    to.learning_rate = get_or(t, "learning_rate", to.learning_rate);
    to.momentum = get_or(t, "momentum", to.momentum);
    to.epochs = get_or(t, "epochs", to.epochs);
    to.batch_size = get_or(t, "batch_size", to.batch_size);
    to.optimizer = netcore::optimizer_from_string(get_or<std::string>(t, "optimizer", "sgd_momentum"));
    to.seed = get_or(t, "seed", derive_seed(c.seed, 1));

    const json det = get_or<json>(j, "detector", json::object());
    if (det.contains("layer") && !det.at("layer").is_null()) c.detector.layer = det.at("layer").get<std::size_t>();
    c.detector.target =
        netcore::gradient_target_from_string(get_or<std::string>(det, "gradient_target", "probability"));
    auto& dm = c.detector.model;
    dm.structure = get_or(det, "structure", dm.structure);
    dm.epochs = get_or(det, "epochs", dm.epochs);
    dm.batch_size = get_or(det, "batch_size", dm.batch_size);
    dm.learning_rate = get_or(det, "learning_rate", dm.learning_rate);
    dm.class_weighting = get_or(det, "class_weighting", dm.class_weighting);
    dm.seed = get_or(det, "seed", derive_seed(c.seed, 2));
    auto& ts = c.detector.training_set;
    ts.n_benign = get_or(det, "n_benign", ts.n_benign);
    ts.n_misclassified = get_or(det, "n_misclassified", ts.n_misclassified);
    ts.bound_l2 = get_or(det, "noise_bound_l2", ts.bound_l2);
    ts.bound_step = get_or(det, "noise_bound_step", ts.bound_step);
    ts.max_bound_l2 = get_or(det, "noise_max_bound_l2", ts.max_bound_l2);
    ts.max_attempts = get_or(det, "noise_max_attempts", ts.max_attempts);
    ts.seed = get_or(det, "noise_seed", derive_seed(c.seed, 3));
    ts.workers = c.workers;

    if (j.contains("attacks")) {
      std::size_t i = 0;
      for (const auto& a : j.at("attacks")) {
        auto cfg = a.get<AttackConfig>();
        if (!a.contains("seed")) cfg.seed = derive_seed(c.seed, 100 + i);
        cfg.validate();
        c.attacks.push_back(cfg);
        ++i;
      }
    }

    const json e = get_or<json>(j, "evaluation", json::object());
    auto& ev = c.evaluation;
    ev.adversarial_per_attack = get_or(e, "adversarial_per_attack", ev.adversarial_per_attack);
    ev.benign_count = get_or(e, "benign_count", ev.benign_count);
    ev.max_attack_inputs = get_or(e, "max_attack_inputs", ev.max_attack_inputs);
    ev.natural_misclassified = get_or(e, "natural_misclassified", ev.natural_misclassified);
    ev.measure_timing = get_or(e, "measure_timing", ev.measure_timing);
    ev.timing_calls = get_or(e, "timing_calls", ev.timing_calls);
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("experiment config: ") + ex.what());
  }
  return c;
}

json ExperimentConfig::to_json() const {
  json d;
  d["kind"] = dataset.kind;
  if (dataset.kind == "synthetic") {
    d["pattern"] = std::string(dataio::to_string(dataset.pattern));
    d["classes"] = dataset.classes;
    d["image_side"] = dataset.image_side;
    d["train_size"] = dataset.train_size;
    d["test_size"] = dataset.test_size;
  } else {
    d["train_images"] = dataset.train_images;
    d["train_labels"] = dataset.train_labels;
    d["test_images"] = dataset.test_images;
    d["test_labels"] = dataset.test_labels;
    d["class_count"] = dataset.class_count;
  }

  json m;
  if (!model.checkpoint.empty()) m["checkpoint"] = model.checkpoint;
  if (!model.architecture.empty()) {
    m["architecture"] = json::array();
    for (const auto& l : model.architecture) m["architecture"].push_back(layer_to_json(l));
  }
  const auto& to = model.training;
  m["training"] = {{"learning_rate", to.learning_rate}, {"momentum", to.momentum},
                   {"epochs", to.epochs},               {"batch_size", to.batch_size},
                   {"optimizer", std::string(netcore::to_string(to.optimizer))}, {"seed", to.seed}};

  const auto& dm = detector.model;
  const auto& ts = detector.training_set;
  json det{{"layer", detector.layer ? json(*detector.layer) : json(nullptr)},
           {"gradient_target", std::string(netcore::to_string(detector.target))},
           {"structure", dm.structure},
           {"epochs", dm.epochs},
           {"batch_size", dm.batch_size},
           {"learning_rate", dm.learning_rate},
           {"class_weighting", dm.class_weighting},
           {"seed", dm.seed},
           {"n_benign", ts.n_benign},
           {"n_misclassified", ts.n_misclassified},
           {"noise_bound_l2", ts.bound_l2},
           {"noise_bound_step", ts.bound_step},
           {"noise_max_bound_l2", ts.max_bound_l2},
           {"noise_max_attempts", ts.max_attempts},
           {"noise_seed", ts.seed}};

  const auto& ev = evaluation;
  json e{{"adversarial_per_attack", ev.adversarial_per_attack},
         {"benign_count", ev.benign_count},
         {"max_attack_inputs", ev.max_attack_inputs},
         {"natural_misclassified", ev.natural_misclassified},
         {"measure_timing", ev.measure_timing},
         {"timing_calls", ev.timing_calls}};

  return {{"seed", seed}, {"workers", workers},   {"dataset", d},         {"model", m},
          {"detector", det}, {"attacks", attacks}, {"evaluation", e}};
}

json EvalReport::to_json() const {
  json atk = json::array();
  for (const auto& a : attacks)
    atk.push_back({{"kind", std::string(attacks::to_string(a.config.kind))},
                   {"config", a.config},
                   {"attempted", a.attempted},
                   {"succeeded", a.succeeded},
                   {"detected", a.detected},
                   {"asr", a.asr},
                   {"detection_rate", a.detection_rate},
                   {"mean_perturbation_l2", a.mean_perturbation_l2},
                   {"auc", optional_json(a.auc)},
                   {"objective_decrease_rate", optional_json(a.objective_decrease_rate)},
                   {"seconds_per_detection", optional_json(a.seconds_per_detection)}});
  json j{{"config", config},
         {"seed", seed},
         {"model_fingerprint", model_fingerprint},
         {"test_count", test_count},
         {"clean_accuracy", clean_accuracy},
         {"layer_index", layer_index},
         {"layer_name", layer_name},
         {"gradient_target", gradient_target},
         {"detector_records", detector_records},
         {"detector_train_accuracy", detector_train_accuracy},
         {"noise_bound_l2", noise_bound_l2},
         {"benign_count", benign_count},
         {"benign_flagged", benign_flagged},
         {"benign_detection_accuracy", benign_detection_accuracy},
         {"seconds_per_detection", optional_json(seconds_per_detection)},
         {"attacks", atk}};
  j["natural_misclassified"] =
      natural ? json{{"count", natural->count},
                     {"detected", natural->detected},
                     {"detection_rate", optional_json(natural->detection_rate)}}
              : json(nullptr);
  j["error"] = error ? json{{"stage", error->stage}, {"code", error->code}, {"message", error->message}}
                     : json(nullptr);
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.config = j.at("config");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  r.test_count = j.at("test_count").get<std::size_t>();
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.layer_index = j.at("layer_index").get<std::size_t>();
  r.layer_name = j.at("layer_name").get<std::string>();
  r.gradient_target = j.at("gradient_target").get<std::string>();
  r.detector_records = j.at("detector_records").get<std::size_t>();
  r.detector_train_accuracy = j.at("detector_train_accuracy").get<double>();
  r.noise_bound_l2 = j.at("noise_bound_l2").get<double>();
  r.benign_count = j.at("benign_count").get<std::size_t>();
  r.benign_flagged = j.at("benign_flagged").get<std::size_t>();
  r.benign_detection_accuracy = j.at("benign_detection_accuracy").get<double>();
  r.seconds_per_detection = optional_double(j, "seconds_per_detection");
  for (const auto& a : j.at("attacks")) {
    AttackReport ar;
    ar.config = a.at("config").get<AttackConfig>();
    ar.attempted = a.at("attempted").get<std::size_t>();
    ar.succeeded = a.at("succeeded").get<std::size_t>();
    ar.detected = a.at("detected").get<std::size_t>();
    ar.asr = a.at("asr").get<double>();
    ar.detection_rate = a.at("detection_rate").get<double>();
    ar.mean_perturbation_l2 = a.at("mean_perturbation_l2").get<double>();
    ar.auc = optional_double(a, "auc");
    ar.objective_decrease_rate = optional_double(a, "objective_decrease_rate");
    ar.seconds_per_detection = optional_double(a, "seconds_per_detection");
    r.attacks.push_back(std::move(ar));
  }
  if (j.contains("natural_misclassified") && !j.at("natural_misclassified").is_null()) {
    const auto& n = j.at("natural_misclassified");
    r.natural = NaturalReport{n.at("count").get<std::size_t>(), n.at("detected").get<std::size_t>(),
                              optional_double(n, "detection_rate")};
  }
  if (j.contains("error") && !j.at("error").is_null()) {
    const auto& e = j.at("error");
    r.error = StageError{e.at("stage").get<std::string>(), e.at("code").get<int>(), e.at("message").get<std::string>()};
  }
  return r;
}

Session::Session(ExperimentConfig config, Logger log) : config_(std::move(config)), log_(std::move(log)) {
  config_.detector.training_set.workers = config_.workers;
}

void Session::log(const std::string& line) const {
  if (log_) log_(line);
}

const dataio::LabeledDataset& Session::train_data() {
  if (!train_) {
    const auto& d = config_.dataset;
    if (d.kind == "idx") {
      train_ = dataio::load_idx(d.train_images, d.train_labels, d.class_count);
      test_ = dataio::load_idx(d.test_images, d.test_labels, d.class_count);
      test_->split = dataio::Split::validation;
    } else {
      train_ = dataio::synth_dataset(d.pattern, d.train_size, d.classes, d.image_side, derive_seed(config_.seed, 11));
      test_ = dataio::synth_dataset(d.pattern, d.test_size, d.classes, d.image_side, derive_seed(config_.seed, 12));
      test_->split = dataio::Split::validation;
    }
    train_->validate();
    test_->validate();
    log("data: " + std::to_string(train_->size()) + " train, " + std::to_string(test_->size()) + " test, " +
        std::to_string(train_->class_count) + " classes");
  }
  return *train_;
}

const dataio::LabeledDataset& Session::test_data() {
  train_data();
  return *test_;
}

const Network& Session::model() {
  if (!model_) {
    const auto& train = train_data();
    if (!config_.model.checkpoint.empty()) {
      model_ = netcore::load_checkpoint(config_.model.checkpoint).network;
      if (model_->input_shape() != train.image_shape())
        throw CompatibilityError("checkpoint input shape " + shape_to_string(model_->input_shape()) +
                                 " does not match the dataset images " + shape_to_string(train.image_shape()));
      log("model: loaded " + config_.model.checkpoint);
    } else {
      auto arch = config_.model.architecture.empty() ? default_architecture(train.class_count)
                                                     : config_.model.architecture;
      model_ = Network::initialized(train.image_shape(), std::move(arch), derive_seed(config_.model.training.seed, 0));
      const auto report = netcore::train_classifier(*model_, train, config_.model.training);
      log("model: trained, train accuracy " + format_number(report.train_accuracy));
    }
    if (model_->class_count() != train.class_count)
      throw CompatibilityError("model has " + std::to_string(model_->class_count()) + " classes, dataset " +
                               std::to_string(train.class_count));
    fingerprint_ = netcore::fingerprint(*model_);
  }
  return *model_;
}

void Session::set_model(Network net) {
  if (net.input_shape() != train_data().image_shape())
    throw CompatibilityError("model input shape " + shape_to_string(net.input_shape()) +
                             " does not match the dataset images " + shape_to_string(train_data().image_shape()));
  if (net.class_count() != train_data().class_count)
    throw CompatibilityError("model has " + std::to_string(net.class_count()) + " classes, dataset " +
                             std::to_string(train_data().class_count));
  model_ = std::move(net);
  fingerprint_ = netcore::fingerprint(*model_);
  correct_test_.reset();
  benign_.reset();
  noisy_.clear();
  attack_training_.clear();
  adversarial_.clear();
  detector_.reset();
}

const std::string& Session::model_fingerprint() {
  model();
  return fingerprint_;
}

std::size_t Session::layer() {
  const auto& net = model();
  const auto idx = config_.detector.layer ? *config_.detector.layer : detector::default_layer(net);
  if (idx >= net.layer_count()) throw InvalidArgument("detector layer " + std::to_string(idx) + " out of range");
  return idx;
}

double Session::clean_accuracy() {
  const auto& test = test_data();
  return netcore::accuracy(model(), test.images, test.labels);
}

const std::vector<std::size_t>& Session::correct_test_order() {
  if (!correct_test_) {
    const auto& net = model();
    const auto& test = test_data();
    std::vector<std::size_t> order(test.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(config_.seed, 21));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> ok(test.size());
    parallel_for(0, test.size(), config_.workers,
                 [&](std::size_t i) { ok[i] = net.predict(test.images[i]) == test.labels[i]; });
    correct_test_.emplace();
    for (auto i : order)
      if (ok[i]) correct_test_->push_back(i);
  }
  return *correct_test_;
}

const std::vector<Tensor>& Session::benign_inputs() {
  if (!benign_) {
    const auto& order = correct_test_order();
    const auto n = std::min(order.size(), config_.evaluation.benign_count);
    if (n < config_.evaluation.benign_count)
      log("benign: only " + std::to_string(n) + " correctly classified test inputs available");
    benign_.emplace();
    for (std::size_t i = 0; i < n; ++i) benign_->push_back(test_data().images[order[i]]);
  }
  return *benign_;
}

const TrainingInputs& Session::noisy_inputs(attacks::NoiseShape shape) {
  const int key = int(shape);
  if (!noisy_.contains(key)) {
    auto opts = config_.detector.training_set;
    opts.noise = shape;
    if (shape == attacks::NoiseShape::gaussian) opts.seed = derive_seed(opts.seed, 1);
    noisy_[key] = detector::collect_training_inputs(model(), train_data(), opts);
    const auto& got = noisy_[key];
    log(std::string("detector inputs: ") + (shape == attacks::NoiseShape::uniform ? "uniform" : "gaussian") +
        " noise, " + std::to_string(got.misclassified.size()) + " misclassified at l2 bound " +
        format_number(got.final_bound_l2) + " from " + std::to_string(got.sources_tried) + " tries");
  }
  return noisy_.at(key);
}


const TrainingInputs& Session::attack_training_inputs(const AttackConfig& attack) {
  const auto key = cache_key(attack);
  if (attack_training_.contains(key)) return attack_training_.at(key);
  const auto& net = model();
  const auto& train = train_data();
  const auto& ts = config_.detector.training_set;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(ts.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> correct;
  for (auto i : order)
    if (net.predict(train.images[i]) == train.labels[i]) correct.push_back(i);
  if (correct.size() < ts.n_benign) throw DataError("not enough correctly classified training inputs");

  TrainingInputs out;
  for (std::size_t i = 0; i < ts.n_benign; ++i) out.benign.push_back(train.images[correct[i]]);
  const std::size_t layer_index = layer();
  const std::size_t chunk = chunk_size(config_.workers);
  for (std::size_t start = 0; start < correct.size() && out.misclassified.size() < ts.n_misclassified;
       start += chunk) {
    const std::size_t end = std::min(correct.size(), start + chunk);
    std::vector<attacks::AttackResult> results(end - start);
    parallel_for(start, end, config_.workers, [&](std::size_t p) {
      auto cfg = attack;
      cfg.seed = derive_seed(attack.seed, correct[p], 1);
      results[p - start] = attacks::run_attack(net, train.images[correct[p]], train.labels[correct[p]], cfg,
                                               layer_index, config_.detector.target);
    });
    for (auto& r : results) {
      ++out.sources_tried;
      if (!r.success) continue;
      out.misclassified.push_back(std::move(r.x_adv));
      if (out.misclassified.size() == ts.n_misclassified) break;
    }
  }
  if (out.misclassified.size() < ts.n_misclassified)
    throw QuotaError(out.misclassified.size(), ts.n_misclassified,
                     std::string(attacks::to_string(attack.kind)) + " produced too few misclassified training inputs");
  log(std::string("detector inputs: ") + std::string(attacks::to_string(attack.kind)) + ", " +
      std::to_string(out.misclassified.size()) + " misclassified from " + std::to_string(out.sources_tried) +
      " sources");
  return attack_training_[key] = std::move(out);
}

const AdversarialSet& Session::adversarial(const AttackConfig& attack) {
  const auto key = cache_key(attack);
  if (adversarial_.contains(key)) return adversarial_.at(key);
  attack.validate();
  const auto& net = model();
  const auto& test = test_data();
  const auto& order = correct_test_order();
  const auto& ev = config_.evaluation;
  const std::size_t layer_index = attack.kind == AttackKind::adaptive ? layer() : 0;
  const std::size_t limit = std::min(order.size(), ev.max_attack_inputs);
  const std::size_t chunk = chunk_size(config_.workers);

  AdversarialSet set;
  set.config = attack;
  for (std::size_t start = 0; start < limit && set.adversarial.size() < ev.adversarial_per_attack;
       start += chunk) {
    const std::size_t end = std::min(limit, start + chunk);
    std::vector<attacks::AttackResult> results(end - start);
    std::vector<char> decreasing(end - start, 0);
    parallel_for(start, end, config_.workers, [&](std::size_t p) {
      const auto idx = order[p];
      auto cfg = attack;
      cfg.seed = derive_seed(attack.seed, idx);
      if (attack.kind == AttackKind::adaptive) {
        attacks::AdaptiveTrace trace;
        results[p - start] = attacks::adaptive(net, test.images[idx], test.labels[idx], layer_index, cfg,
                                               config_.detector.target, &trace);
        bool down = trace.objective.size() > 1;
        for (std::size_t k = 1; k < trace.objective.size(); ++k) down = down && trace.objective[k] < trace.objective[k - 1];
        decreasing[p - start] = down;
      } else {
        results[p - start] = attacks::run_attack(net, test.images[idx], test.labels[idx], cfg, layer_index,
                                                 config_.detector.target);
      }
    });
    for (std::size_t p = start; p < end; ++p) {
      auto& r = results[p - start];
      ++set.attempted;
      set.objective_decreasing += decreasing[p - start];
      if (r.success) {
        set.perturbation_l2.push_back(perturbation_l2(test.images[order[p]], r.x_adv));
        set.source_index.push_back(order[p]);
        set.adversarial.push_back(std::move(r.x_adv));
        if (set.adversarial.size() == ev.adversarial_per_attack) break;
      }
    }
  }
  log(std::string("attack ") + std::string(attacks::to_string(attack.kind)) + ": " +
      std::to_string(set.adversarial.size()) + "/" + std::to_string(set.attempted) + " succeeded");
  return adversarial_[key] = std::move(set);
}

DetectorModel Session::train_detector(const TrainingInputs& inputs, std::size_t layer_index,
                                      const std::string& source) {
  const auto& net = model();
  const auto records = detector::to_records(net, inputs, layer_index, config_.detector.target, source);
  return detector::train_detector(records, layer_index, model_fingerprint(), config_.detector.target,
                                  config_.detector.model);
}

const DetectorModel& Session::detector() {
  if (!detector_) {
    detector_ = train_detector(noisy_inputs(), layer(), "noisy");
    log("detector: layer " + std::to_string(detector_->layer_index()) + ", train accuracy " +
        format_number(detector_->train_accuracy()));
  }
  return *detector_;
}

EvalReport Session::evaluate() {
  EvalReport r;
  r.config = config_.to_json();
  r.seed = config_.seed;
  std::string stage = "data";
  try {
    const auto& test = test_data();
    r.test_count = test.size();
    stage = "model";
    const auto& net = model();
    r.model_fingerprint = model_fingerprint();
    r.clean_accuracy = clean_accuracy();

    stage = "detector";
    const auto& det = detector();
    r.layer_index = det.layer_index();
    r.layer_name = net.layers()[r.layer_index].name(r.layer_index);
    r.gradient_target = std::string(netcore::to_string(det.gradient_target()));
    const auto& noisy = noisy_inputs();
    r.detector_records = noisy.benign.size() + noisy.misclassified.size();
    r.detector_train_accuracy = det.train_accuracy();
    r.noise_bound_l2 = noisy.final_bound_l2;
    const detector::BoundDetector bound(net, det);

    stage = "benign";
    const auto& benign = benign_inputs();
    const auto benign_results = detect_all(bound, benign, config_.workers);
    std::vector<double> benign_scores;
    for (const auto& d : benign_results) {
      benign_scores.push_back(d.score);
      r.benign_flagged += d.verdict == Verdict::misclassified;
    }
    r.benign_count = benign.size();
    r.benign_detection_accuracy =
        benign.empty() ? 0.0 : double(r.benign_count - r.benign_flagged) / double(r.benign_count);
    if (config_.evaluation.measure_timing && !benign.empty())
      r.seconds_per_detection = median_seconds(benign, config_.evaluation.timing_calls, bound);

    for (const auto& attack : config_.attacks) {
      stage = "attack:" + std::string(attacks::to_string(attack.kind));
      const auto& set = adversarial(attack);
      AttackReport ar;
      ar.config = attack;
      ar.attempted = set.attempted;
      ar.succeeded = set.adversarial.size();
      ar.asr = set.attempted ? double(ar.succeeded) / double(set.attempted) : 0.0;
      const auto results = detect_all(bound, set.adversarial, config_.workers);
      std::vector<Verdict> verdicts;
      std::vector<double> scores;
      for (const auto& d : results) {
        verdicts.push_back(d.verdict);
        scores.push_back(d.score);
      }
      ar.detected = std::size_t(std::count(verdicts.begin(), verdicts.end(), Verdict::misclassified));
      ar.detection_rate = detection_rate(verdicts);
      if (!set.perturbation_l2.empty())
        ar.mean_perturbation_l2 = std::accumulate(set.perturbation_l2.begin(), set.perturbation_l2.end(), 0.0) /
                                  double(set.perturbation_l2.size());
      if (!scores.empty() && !benign_scores.empty()) ar.auc = auc(benign_scores, scores);
      if (attack.kind == AttackKind::adaptive && set.attempted)
        ar.objective_decrease_rate = double(set.objective_decreasing) / double(set.attempted);
      if (config_.evaluation.measure_timing && !set.adversarial.empty())
        ar.seconds_per_detection = median_seconds(set.adversarial, config_.evaluation.timing_calls, bound);
      r.attacks.push_back(std::move(ar));
    }

    if (config_.evaluation.natural_misclassified) {
      stage = "natural";
      const auto& train = train_data();
      std::vector<char> wrong(train.size());
      parallel_for(0, train.size(), config_.workers,
                   [&](std::size_t i) { wrong[i] = net.predict(train.images[i]) != train.labels[i]; });
      std::vector<Tensor> natural;
      for (std::size_t i = 0; i < train.size(); ++i)
        if (wrong[i]) natural.push_back(train.images[i]);
      NaturalReport nr;
      nr.count = natural.size();
      for (const auto& d : detect_all(bound, natural, config_.workers)) nr.detected += d.verdict == Verdict::misclassified;
      if (nr.count) nr.detection_rate = double(nr.detected) / double(nr.count);
      r.natural = nr;
    }
  } catch (const Error& e) {
    r.error = StageError{stage, int(e.code()), e.what()};
  } catch (const std::exception& e) {
    r.error = StageError{stage, int(ErrorCode::numeric), e.what()};
  }
  return r;
}

std::string Session::distributions() {
  std::vector<NamedInputs> sets;
  sets.push_back({"benign", benign_inputs()});
  sets.push_back({"noisy", noisy_inputs().misclassified});
  std::map<std::string, int> seen;
  for (const auto& attack : config_.attacks) {
    std::string name = "attack:" + std::string(attacks::to_string(attack.kind));
    if (seen[name]++) name += "#" + std::to_string(seen[name] - 1);
    sets.push_back({name, adversarial(attack).adversarial});
  }
  return export_distributions(model(), sets, layer(), config_.detector.target, config_.workers);
}

EvalReport run_experiment(const ExperimentConfig& config, Logger log) {
  Session session(config, std::move(log));
  return session.evaluate();
}

namespace {

AttackConfig configured_or_default(const ExperimentConfig& cfg, AttackKind kind) {
  for (const auto& a : cfg.attacks)
    if (a.kind == kind) return a;
  auto a = AttackConfig::defaults(kind);
  a.seed = derive_seed(cfg.seed, 200 + std::size_t(kind));
  return a;
}

double detection_rate_on(const Network& net, const DetectorModel& det, const std::vector<Tensor>& xs,
                         unsigned workers) {
  const detector::BoundDetector bound(net, det);
  std::vector<Verdict> verdicts;
  for (const auto& d : detect_all(bound, xs, workers)) verdicts.push_back(d.verdict);
  return detection_rate(verdicts);
}

}  // namespace

std::vector<LayerSweepRow> sweep_layers(Session& session) {
  const auto& net = session.model();
  const auto fgsm = configured_or_default(session.config(), AttackKind::fgsm);
  const auto& targets = session.adversarial(fgsm).adversarial;
  const auto& inputs = session.noisy_inputs();
  std::vector<LayerSweepRow> rows;
  for (auto layer_index : detector::eligible_layers(net)) {
    const auto det = session.train_detector(inputs, layer_index, "noisy");
    LayerSweepRow row;
    row.layer_index = layer_index;
    row.layer_name = net.layers()[layer_index].name(layer_index);
    row.feature_length = det.feature_length();
    row.detection_rate = detection_rate_on(net, det, targets, session.config().workers);
    rows.push_back(row);
  }
  return rows;
}

SourceMatrix sweep_training_source(Session& session) {
  const auto& cfg = session.config();
  const auto& net = session.model();
  const std::size_t layer_index = session.layer();
  SourceMatrix m;
  m.sources = {"noise", "gaussian", "fgsm", "pgd"};
  const std::vector<AttackKind> target_kinds{AttackKind::fgsm, AttackKind::pgd, AttackKind::auna};
  for (auto k : target_kinds) m.targets.emplace_back(attacks::to_string(k));

  for (const auto& source : m.sources) {
    const TrainingInputs* inputs = nullptr;
    if (source == "noise")
      inputs = &session.noisy_inputs(attacks::NoiseShape::uniform);
    else if (source == "gaussian")
      inputs = &session.noisy_inputs(attacks::NoiseShape::gaussian);
    else
      inputs = &session.attack_training_inputs(configured_or_default(cfg, attacks::attack_kind_from_string(source)));
    const auto det = session.train_detector(*inputs, layer_index, source);
    std::vector<double> row;
    for (auto k : target_kinds)
      row.push_back(detection_rate_on(net, det, session.adversarial(configured_or_default(cfg, k)).adversarial,
                                      cfg.workers));
    m.detection_rate.push_back(std::move(row));
  }
  return m;
}

json to_json(const std::vector<LayerSweepRow>& rows) {
  json j = json::array();
  for (const auto& r : rows)
    j.push_back({{"layer_index", r.layer_index},
                 {"layer_name", r.layer_name},
                 {"feature_length", r.feature_length},
                 {"detection_rate", r.detection_rate}});
  return j;
}

json to_json(const SourceMatrix& m) {
  return {{"sources", m.sources}, {"targets", m.targets}, {"detection_rate", m.detection_rate}};
}

std::string export_distributions(const Network& net, const std::vector<NamedInputs>& sets, std::size_t layer_index,
                                 netcore::GradientTarget target, unsigned workers) {
  std::ostringstream out;
  out << "source,example_index,min,max,median\n";
  for (const auto& set : sets) {
    std::vector<std::array<double, 3>> stats(set.inputs.size());
    parallel_for(0, set.inputs.size(), workers, [&](std::size_t i) {
      auto f = detector::local_gradient(net, set.inputs[i], layer_index, target);
      std::vector<double> a(f.size());
      std::transform(f.begin(), f.end(), a.begin(), [](float v) { return std::fabs(double(v)); });
      const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
      stats[i] = {*lo, *hi, median(a)};
    });
    for (std::size_t i = 0; i < stats.size(); ++i)
      out << set.source << ',' << i << ',' << format_number(stats[i][0]) << ',' << format_number(stats[i][1]) << ','
          << format_number(stats[i][2]) << '\n';
  }
  return out.str();
}

double mean_interclass_distance(const dataio::LabeledDataset& data, std::size_t pairs, std::uint64_t seed) {
  if (data.size() < 2 || pairs == 0) throw InvalidArgument("mean_interclass_distance needs data and pairs");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  double sum = 0.0;
  std::size_t found = 0;
  for (std::size_t tries = 0; found < pairs && tries < pairs * 100; ++tries) {
    const auto a = pick(rng), b = pick(rng);
    if (data.labels[a] == data.labels[b]) continue;
    sum += perturbation_l2(data.images[a], data.images[b]);
    ++found;
  }
  if (found == 0) throw DataError("no pairs with different labels");
  return sum / double(found);
}

}  // namespace advcheck::evalkit
