// advcheck command-line tool. Progress goes to stderr, machine output to stdout.
#include <advcheck/advcheck.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Owns a char* returned by the library.
struct CString {
  char* p = nullptr;
  ~CString() { advcheck_string_free(p); }
  std::string str() const { return p ? std::string(p) : std::string(); }
};

void check(advcheck_status s, const std::string& what) {
  if (s != ADVCHECK_OK)
    throw RuntimeError(what + ": " + advcheck_status_name(s) + ": " + advcheck_last_error());
}

std::string sha256(const fs::path& path) {
  CString hex;
  check(advcheck_sha256_file(path.string().c_str(), &hex.p), "hashing " + path.string());
  return hex.str();
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<unsigned> workers;
  std::string model;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t class_count = 10;
  std::size_t attack_index = 0;
  std::string which = "all";
  std::string detector;
  std::string image;
  std::size_t image_index = 0;
};

std::uint64_t resolve_seed(const Options& o, const json& config) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("ADVCHECK_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::strlen(env)) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw UsageError(std::string("ADVCHECK_SEED is not an unsigned integer: ") + env);
    }
  }
  if (config.contains("seed")) return config.at("seed").get<std::uint64_t>();
  return 42;
}

/// Reads the config file and applies command-line overrides. Fails before anything is written.
json load_config(const Options& o) {
  if (o.config_path.empty()) throw UsageError("--config is required");
  std::ifstream in(o.config_path);
  if (!in) throw UsageError("cannot read config file " + o.config_path);
  json config;
  try {
    config = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + o.config_path + " is not valid JSON: " + e.what());
  }
  if (!config.is_object()) throw UsageError("config " + o.config_path + " must be a JSON object");
  config["seed"] = resolve_seed(o, config);
  if (o.workers) config["workers"] = *o.workers;
  if (!o.model.empty()) config["model"]["checkpoint"] = o.model;
  const bool any_idx =
      !o.train_images.empty() || !o.train_labels.empty() || !o.test_images.empty() || !o.test_labels.empty();
  if (any_idx) {
    if (o.train_images.empty() || o.train_labels.empty() || o.test_images.empty() || o.test_labels.empty())
      throw UsageError("--train-images, --train-labels, --test-images and --test-labels go together");
    config["dataset"] = {{"kind", "idx"},
                         {"train_images", o.train_images},
                         {"train_labels", o.train_labels},
                         {"test_images", o.test_images},
                         {"test_labels", o.test_labels},
                         {"class_count", o.class_count}};
  }
  return config;
}

std::vector<std::string> input_paths(const json& config) {
  std::vector<std::string> paths;
  if (config.contains("model") && config["model"].contains("checkpoint"))
    paths.push_back(config["model"]["checkpoint"].get<std::string>());
  if (config.contains("dataset") && config["dataset"].value("kind", "") == "idx")
    for (const char* k : {"train_images", "train_labels", "test_images", "test_labels"})
      paths.push_back(config["dataset"][k].get<std::string>());
  return paths;
}

class Run {
 public:
  Run(std::string subcommand, const Options& o) : subcommand_(std::move(subcommand)), out_(o.out) {}

  void begin() {
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw RuntimeError("cannot create output directory " + out_.string() + ": " + ec.message());
  }

  fs::path path(const std::string& name) const { return out_ / name; }

  void write(const std::string& name, const std::string& contents) {
    const auto p = path(name);
    std::ofstream f(p, std::ios::binary);
    f << contents;
    if (!f.flush()) throw RuntimeError("cannot write " + p.string());
    artifact(name);
  }

  /// Registers a file the library wrote into the output directory.
  void artifact(const std::string& name) { artifacts_[name] = sha256(path(name)); }

  void input(const std::string& p) { inputs_[p] = sha256(p); }

  void finish(const json& config, std::optional<std::uint64_t> seed) {
    json manifest{{"tool", "advcheck"},
                  {"version", advcheck_version()},
                  {"subcommand", subcommand_},
                  {"seed", seed ? json(*seed) : json(nullptr)},
                  {"config", config},
                  {"inputs", inputs_},
                  {"artifacts", artifacts_}};
    std::ofstream f(path("run-manifest.json"), std::ios::binary);
    f << manifest.dump(2) << '\n';
    if (!f.flush()) throw RuntimeError("cannot write run-manifest.json");
    std::cout << path("run-manifest.json").string() << '\n';
  }

 private:
  std::string subcommand_;
  fs::path out_;
  std::map<std::string, std::string> inputs_, artifacts_;
};

void emit(const Run& run, const std::string& name) { std::cout << run.path(name).string() << '\n'; }

int train_model(const Options& o) {
  const auto config = load_config(o);
  Run run("train-model", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  advcheck_network* net = nullptr;
  CString summary;
  check(advcheck_train_model(config.dump().c_str(), &net, &summary.p), "train-model");
  const auto status = advcheck_network_save(net, run.path("model.ckpt").string().c_str());
  advcheck_network_free(net);
  check(status, "saving model");
  run.artifact("model.ckpt");
  run.write("train-summary.json", summary.str() + "\n");
  emit(run, "model.ckpt");
  emit(run, "train-summary.json");
  run.finish(config, config["seed"].get<std::uint64_t>());
  return kOk;
}

int gen_adv(const Options& o) {
  const auto config = load_config(o);
  Run run("gen-adv", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  advcheck_dataset* ds = nullptr;
  CString summary;
  check(advcheck_generate_adversarial(config.dump().c_str(), nullptr, o.attack_index, &ds, &summary.p), "gen-adv");
  const auto status = advcheck_dataset_save_idx(ds, run.path("adversarial-images.idx").string().c_str(),
                                                run.path("adversarial-labels.idx").string().c_str());
  advcheck_dataset_free(ds);
  check(status, "saving adversarial set");
  run.artifact("adversarial-images.idx");
  run.artifact("adversarial-labels.idx");
  run.write("gen-adv-summary.json", summary.str() + "\n");
  for (const char* n : {"adversarial-images.idx", "adversarial-labels.idx", "gen-adv-summary.json"}) emit(run, n);
  run.finish(config, config["seed"].get<std::uint64_t>());
  return kOk;
}

int train_detector(const Options& o) {
  const auto config = load_config(o);
  Run run("train-detector", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  advcheck_detector* det = nullptr;
  CString summary;
  check(advcheck_train_detector(config.dump().c_str(), nullptr, &det, &summary.p), "train-detector");
  const auto status = advcheck_detector_save(det, run.path("detector.ckpt").string().c_str());
  advcheck_detector_free(det);
  check(status, "saving detector");
  run.artifact("detector.ckpt");
  run.write("detector-summary.json", summary.str() + "\n");
  emit(run, "detector.ckpt");
  emit(run, "detector-summary.json");
  run.finish(config, config["seed"].get<std::uint64_t>());
  return kOk;
}

struct Handles {
  advcheck_network* net = nullptr;
  advcheck_detector* det = nullptr;
  advcheck_dataset* images = nullptr;
  ~Handles() {
    advcheck_network_free(net);
    advcheck_detector_free(det);
    advcheck_dataset_free(images);
  }
};

int detect(const Options& o) {
  if (o.model.empty() || o.detector.empty() || o.image.empty())
    throw UsageError("detect needs --model, --detector and --image");
  for (const auto& p : {o.model, o.detector, o.image})
    if (!fs::exists(p)) throw UsageError("no such file: " + p);
  Run run("detect", o);
  for (const auto& p : {o.model, o.detector, o.image}) run.input(p);
  Handles h;
  check(advcheck_network_load(o.model.c_str(), &h.net), "loading model");
  check(advcheck_detector_load(o.detector.c_str(), &h.det), "loading detector");
  check(advcheck_dataset_load_images(o.image.c_str(), &h.images), "loading image");
  std::size_t count = 0, len = 0;
  check(advcheck_dataset_size(h.images, &count), "image count");
  if (o.image_index >= count)
    throw UsageError("--index " + std::to_string(o.image_index) + " but the file holds " + std::to_string(count) +
                     " images");
  check(advcheck_dataset_image_size(h.images, &len), "image size");
  std::vector<float> x(len);
  check(advcheck_dataset_image(h.images, o.image_index, x.data(), len, nullptr), "reading image");
  advcheck_verdict verdict = ADVCHECK_BENIGN;
  float score = 0.0f;
  std::size_t predicted = 0;
  check(advcheck_network_predict(h.net, x.data(), len, &predicted, nullptr, 0), "predict");
  check(advcheck_detect(h.net, h.det, x.data(), len, &verdict, &score), "detect");
  const char* name = verdict == ADVCHECK_MISCLASSIFIED ? "misclassified" : "benign";
  char line[128];
  std::snprintf(line, sizeof line, "%s %.6f", name, double(score));
  std::cout << line << '\n';
  run.begin();
  const json result{{"image", o.image},
                    {"index", o.image_index},
                    {"predicted_class", predicted},
                    {"verdict", name},
                    {"score", score}};
  run.write("detect.json", result.dump(2) + "\n");
  emit(run, "detect.json");
  run.finish(nullptr, std::nullopt);
  return kOk;
}

int eval(const Options& o) {
  const auto config = load_config(o);
  Run run("eval", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  CString report, csv;
  const auto status = advcheck_run_experiment(config.dump().c_str(), &report.p, &csv.p);
  const std::string error = status == ADVCHECK_OK ? "" : advcheck_last_error();
  if (report.p) {
    run.write("report.json", report.str());
    emit(run, "report.json");
  }
  if (csv.p) {
    run.write("distributions.csv", csv.str());
    emit(run, "distributions.csv");
  }
  run.finish(config, config["seed"].get<std::uint64_t>());
  if (status != ADVCHECK_OK) throw RuntimeError(std::string("eval: ") + advcheck_status_name(status) + ": " + error);
  return kOk;
}

int sweep(const Options& o) {
  if (o.which != "layers" && o.which != "sources" && o.which != "all")
    throw UsageError("--which must be layers, sources or all");
  const auto config = load_config(o);
  Run run("sweep", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  CString out;
  check(advcheck_sweep(config.dump().c_str(), o.which.c_str(), &out.p), "sweep");
  run.write("sweep.json", out.str());
  emit(run, "sweep.json");
  run.finish(config, config["seed"].get<std::uint64_t>());
  return kOk;
}

int export_dist(const Options& o) {
  const auto config = load_config(o);
  Run run("export-dist", o);
  for (const auto& p : input_paths(config)) run.input(p);
  run.begin();
  CString csv;
  check(advcheck_export_distributions(config.dump().c_str(), &csv.p), "export-dist");
  run.write("distributions.csv", csv.str());
  emit(run, "distributions.csv");
  run.finish(config, config["seed"].get<std::uint64_t>());
  return kOk;
}

void log_to_stderr(const char* line, void*) { std::cerr << line << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advcheck: local-gradient detection of adversarial and misclassified inputs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", advcheck_version());
  Options o;
  bool quiet = false;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* cfg = sub->add_option("--config", o.config_path, "Experiment configuration (JSON)");
    if (needs_config) cfg->required();
    sub->add_option("--seed", o.seed, "Master seed; falls back to $ADVCHECK_SEED, then the config, then 42");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--workers", o.workers, "Worker threads (default: config value, else 1)")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "Suppress progress lines on stderr");
  };
  auto idx_flags = [&](CLI::App* sub) {
    sub->add_option("--train-images", o.train_images, "IDX3 training images (replaces the synthetic dataset)");
    sub->add_option("--train-labels", o.train_labels, "IDX1 training labels");
    sub->add_option("--test-images", o.test_images, "IDX3 test images");
    sub->add_option("--test-labels", o.test_labels, "IDX1 test labels");
    sub->add_option("--classes", o.class_count, "Class count for IDX data")->capture_default_str();
  };
  auto model_flag = [&](CLI::App* sub) {
    sub->add_option("--model", o.model, "Base model checkpoint (default: train per config)");
  };

  std::map<CLI::App*, int (*)(const Options&)> handlers;

  auto* tm = app.add_subcommand("train-model", "Train the base classifier; writes model.ckpt");
  common(tm, true);
  idx_flags(tm);
  handlers[tm] = train_model;

  auto* ga = app.add_subcommand("gen-adv", "Run one configured attack; writes adversarial IDX files");
  common(ga, true);
  idx_flags(ga);
  model_flag(ga);
  ga->add_option("--attack", o.attack_index, "Index into the config's attacks list")->capture_default_str();
  handlers[ga] = gen_adv;

  auto* td = app.add_subcommand("train-detector", "Train the local-gradient detector; writes detector.ckpt");
  common(td, true);
  idx_flags(td);
  model_flag(td);
  handlers[td] = train_detector;

  auto* dt = app.add_subcommand("detect", "Classify one image as benign or misclassified");
  common(dt, false);
  dt->add_option("--model", o.model, "Base model checkpoint")->required();
  dt->add_option("--detector", o.detector, "Detector checkpoint")->required();
  dt->add_option("--image", o.image, "IDX3 image file")->required();
  dt->add_option("--index", o.image_index, "Image index within the file")->capture_default_str();
  handlers[dt] = detect;

  auto* ev = app.add_subcommand("eval", "Run the full evaluation; writes report.json and distributions.csv");
  common(ev, true);
  idx_flags(ev);
  model_flag(ev);
  handlers[ev] = eval;

  auto* sw = app.add_subcommand("sweep", "Layer and training-source sensitivity sweeps; writes sweep.json");
  common(sw, true);
  idx_flags(sw);
  model_flag(sw);
  sw->add_option("--which", o.which, "layers, sources or all")->capture_default_str();
  handlers[sw] = sweep;

  auto* ed = app.add_subcommand("export-dist", "Per-example local-gradient statistics; writes distributions.csv");
  common(ed, true);
  idx_flags(ed);
  model_flag(ed);
  handlers[ed] = export_dist;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (!quiet) advcheck_set_log_callback(log_to_stderr, nullptr);
  for (auto& [sub, fn] : handlers) {
    if (!sub->parsed()) continue;
    try {
      return fn(o);
    } catch (const UsageError& e) {
      std::cerr << "advcheck " << sub->get_name() << ": " << e.what() << '\n';
      return kUsage;
    } catch (const std::exception& e) {
      std::cerr << "advcheck " << sub->get_name() << ": " << e.what() << '\n';
      return kRuntime;
    }
  }
  return kUsage;
}
