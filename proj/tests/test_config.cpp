#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "gaternet/config.hpp"
#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

using namespace gaternet;
using json = nlohmann::json;
namespace fs = std::filesystem;

#ifndef GATERNET_SOURCE_DIR
#error "GATERNET_SOURCE_DIR must point at the repository root"
#endif

namespace {

const fs::path kConfigs = fs::path(GATERNET_SOURCE_DIR) / "configs";

json synthetic_json() { return json::parse(read_file(kConfigs / "synthetic.json")); }

RunConfig parse(const json& j, const fs::path& base = {}) { return parse_run_config(j.dump(), base); }

std::string config_error(const json& j) {
  try {
    parse(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Restores an environment variable on scope exit.
struct EnvGuard {
  std::string name;
  std::optional<std::string> old;
  explicit EnvGuard(std::string n) : name(std::move(n)) {
    if (const char* v = std::getenv(name.c_str())) old = v;
  }
  ~EnvGuard() {
    if (old) setenv(name.c_str(), old->c_str(), 1);
    else unsetenv(name.c_str());
  }
};

}  // namespace

TEST_SUITE("config") {

TEST_CASE("shipped synthetic config") {
  EnvGuard env("GATERNET_OUT_DIR");
  unsetenv("GATERNET_OUT_DIR");
  const RunConfig cfg = load_run_config(kConfigs / "synthetic.json");
  CHECK(cfg.seed == 1);
  CHECK(cfg.dataset.kind == DatasetKind::synthetic);
  CHECK(cfg.dataset.train_size == 2000);
  CHECK(cfg.model.gated_filter_total() == 112);
  CHECK(cfg.model.bottleneck == 8);
  CHECK(cfg.lambda == 0.1);
  CHECK(cfg.phases.at(Phase::joint).epochs == 60);
  CHECK(cfg.output_dir == kConfigs / "../runs/synthetic");
  const TrainConfig tc = cfg.train_config(Phase::pretrain_backbone);
  CHECK(tc.epochs == 20);
  CHECK(tc.lr_schedule == std::vector<LrPoint>{{0, 0.05}, {15, 0.005}});
  CHECK(tc.dropout.end_rate == 0.05);
  const DatasetSplit d = load_datasets(cfg);
  CHECK(d.train.size() == 2000);
  CHECK(d.eval.size() == 1000);
}

TEST_CASE("shipped cifar config parses once its files exist") {
  const fs::path root = fs::temp_directory_path() / "gaternet_test_cfg";
  fs::remove_all(root);
  fs::create_directories(root / "configs");
  fs::create_directories(root / "data/cifar-10-batches-bin");
  for (const char* f : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                        "data_batch_5.bin", "test_batch.bin"}) {
    std::ofstream(root / "data/cifar-10-batches-bin" / f);
  }
  const std::string text = read_file(kConfigs / "cifar10.json");
  const RunConfig cfg = parse_run_config(text, root / "configs");
  CHECK(cfg.dataset.kind == DatasetKind::cifar10_binary);
  CHECK(cfg.dataset.train_files.size() == 5);
  CHECK(cfg.dataset.augment.random_crop);
  CHECK(cfg.dataset.augment.pad == 4);
  REQUIRE(cfg.dataset.normalization);
  CHECK(cfg.dataset.normalization->std.size() == 3);

  fs::remove(root / "data/cifar-10-batches-bin/test_batch.bin");
  try {
    parse_run_config(text, root / "configs");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("test_batch.bin") != std::string::npos);
  }
}

TEST_CASE("unknown keys are rejected with their path") {
  json j = synthetic_json();
  j["train"]["lamda"] = 0.2;
  CHECK(config_error(j).find("train.lamda") != std::string::npos);
  j = synthetic_json();
  j["model"]["backbone"][2]["window"] = 3;
  CHECK(config_error(j).find("model.backbone[2].window") != std::string::npos);
  j = synthetic_json();
  j["model"]["backbone"][9]["batchnorm"] = true;
  CHECK_FALSE(config_error(j).empty());
  j = synthetic_json();
  j["extra"] = 1;
  CHECK(config_error(j).find("extra") != std::string::npos);
}

TEST_CASE("type and consistency errors") {
  json j = synthetic_json();
  j["train"]["batch_size"] = "32";
  CHECK_FALSE(config_error(j).empty());
  j = synthetic_json();
  j["model"]["input"] = json::array({3, 32, 32});
  CHECK(config_error(j).find("model.input") != std::string::npos);
  j = synthetic_json();
  j["train"]["reduction"] = "median";
  CHECK_FALSE(config_error(j).empty());
  j = synthetic_json();
  j["model"]["backbone"][0]["type"] = "deconv";
  CHECK(config_error(j).find("deconv") != std::string::npos);
  CHECK_THROWS_AS(parse_run_config("{not json", {}), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("layer defaults") {
  const RunConfig cfg = parse(synthetic_json());
  const LayerDesc& conv = cfg.model.backbone[0];
  CHECK(conv.kernel == 3);
  CHECK(conv.stride == 1);
  CHECK(conv.padding == 1);
  CHECK(conv.batchnorm);
  CHECK(conv.relu);
  const LayerDesc& pool = cfg.model.backbone[2];
  CHECK(pool.kernel == 2);
  CHECK(pool.stride == 2);
  const LayerDesc& fc = cfg.model.backbone.back();
  CHECK_FALSE(fc.relu);
  CHECK_FALSE(fc.batchnorm);
  CHECK(cfg.reduction == Reduction::batch_mean);
}

TEST_CASE("output directory override from the environment") {
  EnvGuard env("GATERNET_OUT_DIR");
  setenv("GATERNET_OUT_DIR", "/tmp/gaternet_override", 1);
  CHECK(parse(synthetic_json()).output_dir == "/tmp/gaternet_override");
  unsetenv("GATERNET_OUT_DIR");
  CHECK(parse(synthetic_json(), "/base").output_dir == "/base/../runs/synthetic");
}

}  // TEST_SUITE
