#include "advcheck/advcheck.h"

#include <cstring>
#include <fstream>
#include <mutex>
#include <new>
#include <sstream>
#include <string>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "detector.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "json.hpp"

struct advcheck_network {
  advcheck::netcore::Network net;
};

struct advcheck_dataset {
  advcheck::dataio::LabeledDataset data;
};

struct advcheck_detector {
  advcheck::detector::DetectorModel model;
};

namespace {

using namespace advcheck;
using nlohmann::json;

thread_local std::string last_error;

std::mutex log_mutex;
advcheck_log_fn log_fn = nullptr;
void* log_user = nullptr;

evalkit::Logger make_logger() {
  std::lock_guard lock(log_mutex);
  if (!log_fn) return {};
  return [fn = log_fn, user = log_user](const std::string& line) { fn(line.c_str(), user); };
}

template <class Fn>
advcheck_status guarded(Fn&& fn) {
  try {
    fn();
    last_error.clear();
    return ADVCHECK_OK;
  } catch (const Error& e) {
    last_error = e.what();
    return advcheck_status(int(e.code()));
  } catch (const json::exception& e) {
    last_error = std::string("json: ") + e.what();
    return ADVCHECK_INVALID_ARGUMENT;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return ADVCHECK_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return ADVCHECK_INTERNAL;
  }
}

template <class T>
void require(const T* p, const char* name) {
  if (!p) throw InvalidArgument(std::string(name) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

Tensor input_tensor(const netcore::Network& net, const float* x, std::size_t len) {
  require(x, "x");
  if (len != shape_size(net.input_shape()))
    throw ShapeMismatch("input has " + std::to_string(len) + " values, network expects " +
                        std::to_string(shape_size(net.input_shape())));
  return Tensor(net.input_shape(), std::vector<float>(x, x + len));
}

evalkit::ExperimentConfig parse_config(const char* config_json) {
  require(config_json, "config_json");
  return evalkit::ExperimentConfig::from_json(json::parse(config_json));
}

evalkit::Session make_session(const char* config_json, const advcheck_network* net) {
  evalkit::Session session(parse_config(config_json), make_logger());
  if (net) session.set_model(net->net);
  return session;
}

}  // namespace

extern "C" {

const char* advcheck_version(void) { return "0.1.0"; }

const char* advcheck_status_name(advcheck_status status) {
  switch (status) {
    case ADVCHECK_OK: return "ok";
    case ADVCHECK_INVALID_ARGUMENT: return "invalid_argument";
    case ADVCHECK_SHAPE_MISMATCH: return "shape_mismatch";
    case ADVCHECK_NUMERIC: return "numeric";
    case ADVCHECK_FORMAT: return "format";
    case ADVCHECK_IO: return "io";
    case ADVCHECK_TRAINING: return "training";
    case ADVCHECK_DATA: return "data";
    case ADVCHECK_QUOTA: return "quota";
    case ADVCHECK_COMPATIBILITY: return "compatibility";
    case ADVCHECK_STRUCTURE: return "structure";
    case ADVCHECK_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* advcheck_last_error(void) { return last_error.c_str(); }

void advcheck_set_log_callback(advcheck_log_fn fn, void* user) {
  std::lock_guard lock(log_mutex);
  log_fn = fn;
  log_user = user;
}

void advcheck_string_free(char* s) { std::free(s); }

advcheck_status advcheck_sha256_file(const char* path, char** out_hex) {
  return guarded([&] {
    require(path, "path");
    require(out_hex, "out_hex");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(std::string("cannot open ") + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    *out_hex = dup_string(netcore::sha256_hex(buf.str()));
  });
}

advcheck_status advcheck_network_load(const char* path, advcheck_network** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new advcheck_network{netcore::load_checkpoint(path).network};
  });
}

advcheck_status advcheck_network_save(const advcheck_network* net, const char* path) {
  return guarded([&] {
    require(net, "net");
    require(path, "path");
    netcore::save_checkpoint(path, net->net);
  });
}

void advcheck_network_free(advcheck_network* net) { delete net; }

advcheck_status advcheck_network_input_size(const advcheck_network* net, size_t* out) {
  return guarded([&] {
    require(net, "net");
    require(out, "out");
    *out = shape_size(net->net.input_shape());
  });
}

advcheck_status advcheck_network_class_count(const advcheck_network* net, size_t* out) {
  return guarded([&] {
    require(net, "net");
    require(out, "out");
    *out = net->net.class_count();
  });
}

advcheck_status advcheck_network_layer_count(const advcheck_network* net, size_t* out) {
  return guarded([&] {
    require(net, "net");
    require(out, "out");
    *out = net->net.layer_count();
  });
}

advcheck_status advcheck_network_layer_size(const advcheck_network* net, size_t layer, size_t* out) {
  return guarded([&] {
    require(net, "net");
    require(out, "out");
    if (layer >= net->net.layer_count()) throw InvalidArgument("layer index out of range");
    *out = shape_size(net->net.layers()[layer].output_shape);
  });
}

advcheck_status advcheck_network_fingerprint(const advcheck_network* net, char** out_hex) {
  return guarded([&] {
    require(net, "net");
    require(out_hex, "out_hex");
    *out_hex = dup_string(netcore::fingerprint(net->net));
  });
}

advcheck_status advcheck_network_predict(const advcheck_network* net, const float* x, size_t len, size_t* out_class,
                                         float* logits, size_t logits_len) {
  return guarded([&] {
    require(net, "net");
    require(out_class, "out_class");
    const auto trace = net->net.forward(input_tensor(net->net, x, len));
    if (logits) {
      if (logits_len != trace.logits.size()) throw ShapeMismatch("logits buffer length != class count");
      std::copy(trace.logits.begin(), trace.logits.end(), logits);
    }
    *out_class = trace.predicted;
  });
}

advcheck_status advcheck_network_local_gradient(const advcheck_network* net, const float* x, size_t len, size_t layer,
                                                const char* gradient_target, float* out, size_t out_len) {
  return guarded([&] {
    require(net, "net");
    require(out, "out");
    const auto target = gradient_target ? netcore::gradient_target_from_string(gradient_target)
                                        : netcore::GradientTarget::probability;
    if (layer >= net->net.layer_count()) throw InvalidArgument("layer index out of range");
    const auto g = detector::local_gradient(net->net, input_tensor(net->net, x, len), layer, target);
    if (out_len != g.size()) throw ShapeMismatch("gradient buffer length != layer output size");
    std::copy(g.begin(), g.end(), out);
  });
}

advcheck_status advcheck_dataset_load_idx(const char* images_path, const char* labels_path, size_t class_count,
                                          advcheck_dataset** out) {
  return guarded([&] {
    require(images_path, "images_path");
    require(labels_path, "labels_path");
    require(out, "out");
    *out = new advcheck_dataset{dataio::load_idx(images_path, labels_path, class_count)};
  });
}

advcheck_status advcheck_dataset_load_images(const char* images_path, advcheck_dataset** out) {
  return guarded([&] {
    require(images_path, "images_path");
    require(out, "out");
    dataio::LabeledDataset ds;
    ds.images = dataio::load_idx_images(images_path);
    ds.labels.assign(ds.images.size(), 0);
    ds.class_count = 1;
    *out = new advcheck_dataset{std::move(ds)};
  });
}

advcheck_status advcheck_dataset_synth(const char* kind, size_t n, size_t classes, size_t image_side, uint64_t seed,
                                       advcheck_dataset** out) {
  return guarded([&] {
    require(kind, "kind");
    require(out, "out");
    *out = new advcheck_dataset{
        dataio::synth_dataset(dataio::synth_kind_from_string(kind), n, classes, image_side, seed)};
  });
}

advcheck_status advcheck_dataset_save_idx(const advcheck_dataset* ds, const char* images_path,
                                          const char* labels_path) {
  return guarded([&] {
    require(ds, "ds");
    require(images_path, "images_path");
    require(labels_path, "labels_path");
    dataio::save_idx(ds->data, images_path, labels_path);
  });
}

void advcheck_dataset_free(advcheck_dataset* ds) { delete ds; }

advcheck_status advcheck_dataset_size(const advcheck_dataset* ds, size_t* out) {
  return guarded([&] {
    require(ds, "ds");
    require(out, "out");
    *out = ds->data.size();
  });
}

advcheck_status advcheck_dataset_image_size(const advcheck_dataset* ds, size_t* out) {
  return guarded([&] {
    require(ds, "ds");
    require(out, "out");
    *out = ds->data.empty() ? 0 : ds->data.images.front().size();
  });
}

advcheck_status advcheck_dataset_image(const advcheck_dataset* ds, size_t index, float* out, size_t len,
                                       size_t* out_label) {
  return guarded([&] {
    require(ds, "ds");
    require(out, "out");
    if (index >= ds->data.size()) throw InvalidArgument("image index out of range");
    const auto& img = ds->data.images[index];
    if (len != img.size()) throw ShapeMismatch("image buffer length != image size");
    std::copy(img.data.begin(), img.data.end(), out);
    if (out_label) *out_label = ds->data.labels[index];
  });
}

advcheck_status advcheck_detector_load(const char* path, advcheck_detector** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new advcheck_detector{detector::DetectorModel::load(path)};
  });
}

advcheck_status advcheck_detector_save(const advcheck_detector* det, const char* path) {
  return guarded([&] {
    require(det, "det");
    require(path, "path");
    det->model.save(path);
  });
}

void advcheck_detector_free(advcheck_detector* det) { delete det; }

advcheck_status advcheck_detector_layer(const advcheck_detector* det, size_t* out) {
  return guarded([&] {
    require(det, "det");
    require(out, "out");
    *out = det->model.layer_index();
  });
}

advcheck_status advcheck_detect(const advcheck_network* net, const advcheck_detector* det, const float* x,
                                size_t len, advcheck_verdict* out_verdict, float* out_score) {
  return guarded([&] {
    require(net, "net");
    require(det, "det");
    require(out_verdict, "out_verdict");
    const auto r = detector::detect(net->net, det->model, input_tensor(net->net, x, len));
    *out_verdict = r.verdict == detector::Verdict::misclassified ? ADVCHECK_MISCLASSIFIED : ADVCHECK_BENIGN;
    if (out_score) *out_score = r.score;
  });
}

advcheck_status advcheck_train_model(const char* config_json, advcheck_network** out, char** out_summary) {
  return guarded([&] {
    require(out, "out");
    auto session = make_session(config_json, nullptr);
    const auto& net = session.model();
    const json summary{{"fingerprint", session.model_fingerprint()},
                       {"parameters", net.parameter_count()},
                       {"class_count", net.class_count()},
                       {"train_accuracy", netcore::accuracy(net, session.train_data().images,
                                                            session.train_data().labels)},
                       {"test_accuracy", session.clean_accuracy()}};
    auto handle = new advcheck_network{net};
    if (out_summary) {
      try {
        *out_summary = dup_string(summary.dump(2));
      } catch (...) {
        delete handle;
        throw;
      }
    }
    *out = handle;
  });
}

advcheck_status advcheck_generate_adversarial(const char* config_json, const advcheck_network* net,
                                              size_t attack_index, advcheck_dataset** out, char** out_summary) {
  return guarded([&] {
    require(out, "out");
    auto session = make_session(config_json, net);
    const auto& attacks_cfg = session.config().attacks;
    if (attack_index >= attacks_cfg.size())
      throw InvalidArgument("attack index " + std::to_string(attack_index) + " but config lists " +
                            std::to_string(attacks_cfg.size()) + " attacks");
    const auto& set = session.adversarial(attacks_cfg[attack_index]);
    dataio::LabeledDataset ds;
    ds.images = set.adversarial;
    for (auto idx : set.source_index) ds.labels.push_back(session.test_data().labels[idx]);
    ds.class_count = session.test_data().class_count;
    ds.split = dataio::Split::validation;
    double mean_l2 = 0.0;
    for (double v : set.perturbation_l2) mean_l2 += v;
    if (!set.perturbation_l2.empty()) mean_l2 /= double(set.perturbation_l2.size());
    const json summary{{"attack", set.config},
                       {"attempted", set.attempted},
                       {"succeeded", set.adversarial.size()},
                       {"asr", set.attempted ? double(set.adversarial.size()) / double(set.attempted) : 0.0},
                       {"mean_perturbation_l2", mean_l2}};
    auto handle = new advcheck_dataset{std::move(ds)};
    if (out_summary) {
      try {
        *out_summary = dup_string(summary.dump(2));
      } catch (...) {
        delete handle;
        throw;
      }
    }
    *out = handle;
  });
}

advcheck_status advcheck_train_detector(const char* config_json, const advcheck_network* net,
                                        advcheck_detector** out, char** out_summary) {
  return guarded([&] {
    require(out, "out");
    auto session = make_session(config_json, net);
    const auto& det = session.detector();
    const auto& inputs = session.noisy_inputs();
    const auto layer = det.layer_index();
    const json summary{{"layer_index", layer},
                       {"layer_name", session.model().layers()[layer].name(layer)},
                       {"feature_length", det.feature_length()},
                       {"records", inputs.benign.size() + inputs.misclassified.size()},
                       {"train_accuracy", det.train_accuracy()},
                       {"noise_bound_l2", inputs.final_bound_l2},
                       {"noise_sources_tried", inputs.sources_tried},
                       {"base_fingerprint", det.base_fingerprint()}};
    auto handle = new advcheck_detector{det};
    if (out_summary) {
      try {
        *out_summary = dup_string(summary.dump(2));
      } catch (...) {
        delete handle;
        throw;
      }
    }
    *out = handle;
  });
}

advcheck_status advcheck_run_experiment(const char* config_json, char** out_report, char** out_distributions_csv) {
  std::optional<evalkit::StageError> stage_error;
  const auto status = guarded([&] {
    require(out_report, "out_report");
    auto session = make_session(config_json, nullptr);
    const auto report = session.evaluate();
    std::string csv;
    if (out_distributions_csv && !report.error) csv = session.distributions();
    *out_report = dup_string(report.to_json().dump(2) + "\n");
    if (out_distributions_csv) *out_distributions_csv = report.error ? nullptr : dup_string(csv);
    stage_error = report.error;
  });
  if (status != ADVCHECK_OK || !stage_error) return status;
  last_error = stage_error->stage + ": " + stage_error->message;
  return advcheck_status(stage_error->code);
}

advcheck_status advcheck_sweep(const char* config_json, const char* which, char** out_json) {
  return guarded([&] {
    require(which, "which");
    require(out_json, "out_json");
    const std::string mode = which;
    if (mode != "layers" && mode != "sources" && mode != "all")
      throw InvalidArgument("sweep must be \"layers\", \"sources\" or \"all\"");
    auto session = make_session(config_json, nullptr);
    json out{{"model_fingerprint", session.model_fingerprint()}, {"seed", session.config().seed}};
    if (mode != "sources") out["layers"] = evalkit::to_json(evalkit::sweep_layers(session));
    if (mode != "layers") out["training_sources"] = evalkit::to_json(evalkit::sweep_training_source(session));
    *out_json = dup_string(out.dump(2) + "\n");
  });
}

advcheck_status advcheck_export_distributions(const char* config_json, char** out_csv) {
  return guarded([&] {
    require(out_csv, "out_csv");
    auto session = make_session(config_json, nullptr);
    *out_csv = dup_string(session.distributions());
  });
}

}  // extern "C"
