// Drives the advcheck binary as a subprocess.
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "advcheck/advcheck.h"
#include "doctest.h"

#ifndef ADVCHECK_CLI
#error "ADVCHECK_CLI must name the advcheck binary"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " ADVCHECK_CLI " " + args + " 2>/dev/null";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), int(buf.size()), p)) r.out += buf.data();
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Workspace {
  fs::path dir;
  std::string config;
  Workspace() : dir(fs::temp_directory_path() / ("advcheck_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "small.json").string();
    std::ofstream(config) << R"({"seed": 3,
      "dataset": {"classes": 3, "image_side": 8, "train_size": 300, "test_size": 150},
      "model": {"training": {"epochs": 3}},
      "detector": {"n_misclassified": 40, "epochs": 3, "structure": [64, 2]},
      "attacks": [{"kind": "fgsm", "epsilon": 0.3}],
      "evaluation": {"adversarial_per_attack": 20, "benign_count": 20, "max_attack_inputs": 100}})";
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const char* name) const { return (dir / name).string(); }
};

void write_idx(const char* kind, std::size_t n, std::uint64_t seed, const std::string& images,
               const std::string& labels) {
  advcheck_dataset* ds = nullptr;
  REQUIRE(advcheck_dataset_synth(kind, n, 3, 8, seed, &ds) == ADVCHECK_OK);
  REQUIRE(advcheck_dataset_save_idx(ds, images.c_str(), labels.c_str()) == ADVCHECK_OK);
  advcheck_dataset_free(ds);
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  Workspace w;
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("eval").code == 2);
  CHECK(run("eval --config " + w.config + " --bogus").code == 2);
  CHECK(run("eval --config " + w.config + " --workers 0").code == 2);
  std::ofstream(w.path("bad.json")) << "{nope";
  CHECK(run("eval --config " + w.path("bad.json") + " --out " + w.path("o")).code == 2);
  CHECK_FALSE(fs::exists(w.path("o")));
}

TEST_CASE("missing config exits 2 and writes nothing") {
  Workspace w;
  const auto r = run("eval --config " + w.path("absent.json") + " --out " + w.path("out"));
  CHECK(r.code == 2);
  CHECK(r.out.empty());
  CHECK_FALSE(fs::exists(w.path("out")));
}

TEST_CASE("help on every subcommand lists flags and defaults") {
  for (const char* sub : {"train-model", "gen-adv", "train-detector", "detect", "eval", "sweep", "export-dist"}) {
    const auto r = run(std::string(sub) + " --help");
    INFO(sub);
    CHECK(r.code == 0);
    CHECK(r.out.find("--seed") != std::string::npos);
    CHECK(r.out.find("--out TEXT [out]") != std::string::npos);
    CHECK(r.out.find("--workers") != std::string::npos);
  }
  CHECK(run("gen-adv --help").out.find("--attack UINT [0]") != std::string::npos);
  CHECK(run("sweep --help").out.find("--which") != std::string::npos);
}

TEST_CASE("eval with one seed twice is byte-identical") {
  Workspace w;
  const auto a = run("eval --config " + w.config + " --seed 7 --out " + w.path("a"));
  const auto b = run("eval --config " + w.config + " --seed 7 --out " + w.path("b"));
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(a.out.find("report.json") != std::string::npos);
  const auto ra = slurp(w.path("a") + "/report.json");
  CHECK_FALSE(ra.empty());
  CHECK(ra == slurp(w.path("b") + "/report.json"));
  CHECK(slurp(w.path("a") + "/distributions.csv") == slurp(w.path("b") + "/distributions.csv"));
  CHECK(ra.find("\"seed\": 7") != std::string::npos);

  const auto manifest = slurp(w.path("a") + "/run-manifest.json");
  CHECK(manifest.find("\"subcommand\": \"eval\"") != std::string::npos);
  CHECK(manifest.find("\"seed\": 7") != std::string::npos);
  CHECK(manifest.find("report.json") != std::string::npos);
  CHECK(manifest == slurp(w.path("b") + "/run-manifest.json"));
}

TEST_CASE("seed falls back to the environment") {
  Workspace w;
  REQUIRE(run("eval --config " + w.config + " --out " + w.path("e"), "ADVCHECK_SEED=7").code == 0);
  REQUIRE(run("eval --config " + w.config + " --seed 7 --out " + w.path("s")).code == 0);
  CHECK(slurp(w.path("e") + "/report.json") == slurp(w.path("s") + "/report.json"));
}

TEST_CASE("runtime failures exit 1") {
  Workspace w;
  const auto r = run("train-model --config " + w.config + " --train-images " + w.path("none") + " --train-labels " +
                     w.path("none") + " --test-images " + w.path("none") + " --test-labels " + w.path("none") +
                     " --classes 3 --out " + w.path("o"));
  CHECK(r.code == 1);
  std::ofstream(w.path("junk.ckpt")) << "not a checkpoint";
  CHECK(run("detect --model " + w.path("junk.ckpt") + " --detector " + w.path("junk.ckpt") + " --image " +
            w.path("junk.ckpt") + " --out " + w.path("o"))
            .code == 1);
  // a missing input path is a usage error
  CHECK(run("detect --model " + w.path("none") + " --detector " + w.path("none") + " --image " + w.path("none") +
            " --out " + w.path("o"))
            .code == 2);
}

TEST_CASE("pipeline: train, detect a clean training image, inputs untouched") {
  Workspace w;
  write_idx("gaussian_blobs", 300, 31, w.path("train-images"), w.path("train-labels"));
  write_idx("gaussian_blobs", 150, 32, w.path("test-images"), w.path("test-labels"));
  const std::string data = " --train-images " + w.path("train-images") + " --train-labels " +
                           w.path("train-labels") + " --test-images " + w.path("test-images") +
                           " --test-labels " + w.path("test-labels") + " --classes 3";
  const auto before_img = slurp(w.path("train-images"));

  // detector settings left at their defaults so the detector is trained well enough to pass a clean image
  const std::string config = w.path("pipeline.json");
  std::ofstream(config) << R"({"seed": 3, "model": {"training": {"epochs": 5}}, "detector": {"n_misclassified": 40},
      "attacks": [{"kind": "fgsm", "epsilon": 0.3}],
      "evaluation": {"adversarial_per_attack": 20, "benign_count": 20, "max_attack_inputs": 100}})";
  const auto before_cfg = slurp(config);
  REQUIRE(run("train-model --config " + config + data + " --out " + w.path("m")).code == 0);
  const std::string model = w.path("m") + "/model.ckpt";
  REQUIRE(fs::exists(model));
  const auto before_model = slurp(model);
  REQUIRE(run("train-detector --config " + config + data + " --model " + model + " --out " + w.path("d")).code == 0);
  const std::string det = w.path("d") + "/detector.ckpt";
  REQUIRE(fs::exists(det));
  REQUIRE(run("gen-adv --config " + config + data + " --model " + model + " --out " + w.path("g")).code == 0);

  const auto r = run("detect --model " + model + " --detector " + det + " --image " + w.path("train-images") +
                     " --index 0 --out " + w.path("x"));
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("benign ", 0) == 0);
  CHECK(fs::exists(w.path("x") + "/detect.json"));
  CHECK(fs::exists(w.path("x") + "/run-manifest.json"));
  CHECK(run("detect --model " + model + " --detector " + det + " --image " + w.path("train-images") +
            " --index 300 --out " + w.path("x"))
            .code == 2);

  CHECK(r.out.find("detect.json") != std::string::npos);
  CHECK(slurp(config) == before_cfg);
  CHECK(slurp(w.path("train-images")) == before_img);
  CHECK(slurp(model) == before_model);
}
