#include "gaternet/config.hpp"

#include <cstdlib>
#include <set>

#include <json.hpp>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

namespace gaternet {

namespace {

using json = nlohmann::json;

// A JSON object with its key path; rejects keys outside `allowed`.
class Obj {
 public:
  Obj(const json& j, std::string path, std::set<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    for (const auto& [key, value] : j_.items()) {
      if (!allowed.count(key)) throw ConfigError("unknown key '" + child(key) + "'");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing key '" + child(key) + "'");
    return j_.at(key);
  }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename V>
  V get(const std::string& key) const {
    return convert<V>(at(key), child(key));
  }
  template <typename V>
  V get(const std::string& key, V fallback) const {
    return has(key) ? get<V>(key) : fallback;
  }

  template <typename V>
  static V convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError("'" + path + "' must be a boolean");
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.get<long long>() < 0)) {
        throw ConfigError("'" + path + "' must be a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError("'" + path + "' must be a number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError("'" + path + "' must be a string");
    }
    return v.get<V>();
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  const json& j_;
  std::string path_;
};

std::vector<float> float_list(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("'" + path + "' must be an array of numbers");
  std::vector<float> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(static_cast<float>(Obj::convert<double>(v[i], path + "[" + std::to_string(i) + "]")));
  return out;
}

std::vector<std::filesystem::path> path_list(const json& v, const std::string& path,
                                             const std::filesystem::path& base) {
  if (!v.is_array()) throw ConfigError("'" + path + "' must be an array of paths");
  std::vector<std::filesystem::path> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::filesystem::path p = Obj::convert<std::string>(v[i], path + "[" + std::to_string(i) + "]");
    if (p.is_relative() && !base.empty()) p = base / p;
    if (!std::filesystem::exists(p)) throw ConfigError("'" + path + "': file not found: " + p.string());
    out.push_back(p);
  }
  return out;
}

LayerDesc parse_layer(const json& j, const std::string& path, bool allow_gated) {
  if (!j.is_object() || !j.contains("type")) throw ConfigError("'" + path + "' must be an object with a 'type'");
  const std::string type = Obj::convert<std::string>(j.at("type"), path + ".type");
  LayerDesc d;
  try {
    d.kind = layer_kind_from_string(type);
  } catch (const std::exception&) {
    throw ConfigError("'" + path + ".type': unknown layer type '" + type + "'");
  }
  std::set<std::string> keys{"type"};
  switch (d.kind) {
    case LayerKind::conv:
      keys.insert({"filters", "kernel", "stride", "padding", "batchnorm", "relu"});
      if (allow_gated) keys.insert("gated");
      break;
    case LayerKind::maxpool:
      d.kernel = 2;
      d.stride = 2;
      d.padding = 0;
      keys.insert({"kernel", "stride"});
      break;
    case LayerKind::global_avg_pool:
      break;
    case LayerKind::fc:
      keys.insert({"filters", "relu"});
      break;
  }
  d.batchnorm = d.kind == LayerKind::conv;
  Obj o(j, path, keys);
  d.filters = o.get<std::size_t>("filters", d.filters);
  d.kernel = o.get<std::size_t>("kernel", d.kernel);
  d.stride = o.get<std::size_t>("stride", d.stride);
  d.padding = o.get<std::size_t>("padding", d.padding);
  d.batchnorm = o.get<bool>("batchnorm", d.batchnorm);
  d.relu = o.get<bool>("relu", d.kind == LayerKind::conv);
  d.gated = o.get<bool>("gated", false);
  if ((d.kind == LayerKind::conv || d.kind == LayerKind::fc) && !o.has("filters")) {
    throw ConfigError("missing key '" + path + ".filters'");
  }
  return d;
}

std::vector<LayerDesc> parse_layers(const json& j, const std::string& path, bool allow_gated) {
  if (!j.is_array()) throw ConfigError("'" + path + "' must be an array of layers");
  std::vector<LayerDesc> out;
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(parse_layer(j[i], path + "[" + std::to_string(i) + "]", allow_gated));
  return out;
}

std::vector<LrPoint> parse_lr_schedule(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError("'" + path + "' must be a non-empty array of [epoch, lr]");
  std::vector<LrPoint> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    if (!j[i].is_array() || j[i].size() != 2) throw ConfigError("'" + p + "' must be [epoch, lr]");
    out.push_back({Obj::convert<std::size_t>(j[i][0], p + "[0]"), Obj::convert<double>(j[i][1], p + "[1]")});
  }
  return out;
}

DatasetConfig parse_dataset(const json& j, const std::filesystem::path& base) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("'dataset' must be an object with a 'kind'");
  const std::string kind = Obj::convert<std::string>(j.at("kind"), "dataset.kind");
  DatasetConfig d;
  std::set<std::string> keys{"kind", "normalization", "augment"};
  if (kind == "synthetic") {
    d.kind = DatasetKind::synthetic;
    keys.insert({"train_size", "eval_size", "num_classes", "channels", "image_size", "noise"});
  } else if (kind == "cifar10-binary") {
    d.kind = DatasetKind::cifar10_binary;
    keys.insert({"train_files", "eval_files", "train_limit", "eval_limit"});
  } else {
    throw ConfigError("'dataset.kind': unknown dataset kind '" + kind + "' (expected synthetic or cifar10-binary)");
  }
  Obj o(j, "dataset", keys);
  if (d.kind == DatasetKind::synthetic) {
    d.train_size = o.get<std::size_t>("train_size", d.train_size);
    d.eval_size = o.get<std::size_t>("eval_size", d.eval_size);
    d.synthetic.num_classes = o.get<std::size_t>("num_classes", d.synthetic.num_classes);
    d.synthetic.channels = o.get<std::size_t>("channels", d.synthetic.channels);
    d.synthetic.image_size = o.get<std::size_t>("image_size", d.synthetic.image_size);
    d.synthetic.noise = o.get<double>("noise", d.synthetic.noise);
  } else {
    d.train_files = path_list(o.at("train_files"), "dataset.train_files", base);
    d.eval_files = path_list(o.at("eval_files"), "dataset.eval_files", base);
    d.train_limit = o.get<std::size_t>("train_limit", 0);
    d.eval_limit = o.get<std::size_t>("eval_limit", 0);
  }
  if (o.has("normalization")) {
    Obj n(o.at("normalization"), "dataset.normalization", {"mean", "std"});
    Normalization norm{float_list(n.at("mean"), "dataset.normalization.mean"),
                       float_list(n.at("std"), "dataset.normalization.std")};
    norm.validate(d.kind == DatasetKind::synthetic ? d.synthetic.channels : 3);
    d.normalization = std::move(norm);
  }
  if (o.has("augment")) {
    Obj a(o.at("augment"), "dataset.augment", {"random_crop", "mirror", "pad"});
    d.augment.random_crop = a.get<bool>("random_crop", false);
    d.augment.mirror = a.get<bool>("mirror", false);
    d.augment.pad = a.get<std::size_t>("pad", 4);
  }
  return d;
}

}  // namespace

TrainConfig RunConfig::train_config(Phase phase) const {
  auto it = phases.find(phase);
  if (it == phases.end()) throw ConfigError(std::string("config has no schedule for phase ") + to_string(phase));
  TrainConfig t;
  t.phase = phase;
  t.lambda = lambda;
  t.epochs = it->second.epochs;
  t.batch_size = batch_size;
  t.lr_schedule = it->second.lr_schedule;
  t.momentum = momentum;
  t.weight_decay = weight_decay;
  t.seed = seed;
  t.dropout = dropout;
  t.reduction = reduction;
  t.augment = dataset.augment;
  t.validate();
  return t;
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Obj o(root, "", {"seed", "output_dir", "dataset", "model", "train"});
  cfg.seed = o.get<std::uint64_t>("seed", 0);
  cfg.output_dir = o.get<std::string>("output_dir", "runs");
  if (cfg.output_dir.is_relative() && !base_dir.empty()) cfg.output_dir = base_dir / cfg.output_dir;
  if (const char* env = std::getenv("GATERNET_OUT_DIR"); env && *env) cfg.output_dir = env;

  cfg.dataset = parse_dataset(o.at("dataset"), base_dir);

  Obj m(o.at("model"), "model", {"input", "backbone", "gater", "bottleneck", "num_classes"});
  const json& input = m.at("input");
  if (!input.is_array() || input.size() != 3) throw ConfigError("'model.input' must be [channels, height, width]");
  cfg.model.input_channels = Obj::convert<std::size_t>(input[0], "model.input[0]");
  cfg.model.input_height = Obj::convert<std::size_t>(input[1], "model.input[1]");
  cfg.model.input_width = Obj::convert<std::size_t>(input[2], "model.input[2]");
  cfg.model.backbone = parse_layers(m.at("backbone"), "model.backbone", true);
  if (m.has("gater")) cfg.model.gater = parse_layers(m.at("gater"), "model.gater", false);
  cfg.model.bottleneck = m.get<std::size_t>("bottleneck", 8);
  cfg.model.num_classes = m.get<std::size_t>("num_classes", 10);
  cfg.model.validate();

  const auto& ds = cfg.dataset;
  const std::size_t want_c = ds.kind == DatasetKind::synthetic ? ds.synthetic.channels : 3;
  const std::size_t want_hw = ds.kind == DatasetKind::synthetic ? ds.synthetic.image_size : 32;
  if (cfg.model.input_channels != want_c || cfg.model.input_height != want_hw || cfg.model.input_width != want_hw) {
    throw ConfigError("'model.input' does not match the dataset image shape " + std::to_string(want_c) + "x" +
                      std::to_string(want_hw) + "x" + std::to_string(want_hw));
  }
  const std::size_t classes = ds.kind == DatasetKind::synthetic ? ds.synthetic.num_classes : 10;
  if (cfg.model.num_classes != classes) {
    throw ConfigError("'model.num_classes' does not match the dataset's " + std::to_string(classes) + " classes");
  }

  Obj t(o.at("train"), "train",
        {"lambda", "batch_size", "momentum", "weight_decay", "reduction", "dropout", "phases"});
  cfg.lambda = t.get<double>("lambda", cfg.lambda);
  cfg.batch_size = t.get<std::size_t>("batch_size", cfg.batch_size);
  cfg.momentum = t.get<double>("momentum", cfg.momentum);
  cfg.weight_decay = t.get<double>("weight_decay", cfg.weight_decay);
  const std::string reduction = t.get<std::string>("reduction", "batch_mean");
  if (reduction == "batch_mean") cfg.reduction = Reduction::batch_mean;
  else if (reduction == "batch_sum") cfg.reduction = Reduction::batch_sum;
  else throw ConfigError("'train.reduction' must be batch_mean or batch_sum");
  if (t.has("dropout")) {
    Obj d(t.at("dropout"), "train.dropout", {"start_rate", "end_rate"});
    cfg.dropout.start_rate = d.get<double>("start_rate", cfg.dropout.start_rate);
    cfg.dropout.end_rate = d.get<double>("end_rate", cfg.dropout.end_rate);
  }
  Obj phases(t.at("phases"), "train.phases", {"pretrain_backbone", "pretrain_gater", "joint"});
  for (Phase p : {Phase::pretrain_backbone, Phase::pretrain_gater, Phase::joint}) {
    const std::string name = to_string(p);
    if (!phases.has(name)) continue;
    const std::string path = "train.phases." + name;
    Obj ph(phases.at(name), path, {"epochs", "lr_schedule"});
    PhaseSchedule s;
    s.epochs = ph.get<std::size_t>("epochs");
    s.lr_schedule = parse_lr_schedule(ph.at("lr_schedule"), path + ".lr_schedule");
    cfg.phases[p] = s;
  }
  for (const auto& [phase, schedule] : cfg.phases) cfg.train_config(phase);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_run_config(read_file(path), path.parent_path());
}

DatasetSplit load_datasets(const RunConfig& config) {
  const DatasetConfig& d = config.dataset;
  DatasetSplit split;
  if (d.kind == DatasetKind::synthetic) {
    auto s = synthetic_split(config.seed, d.train_size, d.eval_size, d.synthetic);
    split.train = std::move(s.train);
    split.eval = std::move(s.eval);
  } else {
    auto load = [](const std::vector<std::filesystem::path>& files, std::size_t limit) {
      Dataset out;
      for (const auto& f : files) out.append(load_cifar10_binary(f));
      if (limit && limit < out.size()) {
        out.labels.resize(limit);
        out.images.resize(limit * out.image_size());
      }
      return out;
    };
    split.train = load(d.train_files, d.train_limit);
    split.eval = load(d.eval_files, d.eval_limit);
  }
  if (d.normalization) {
    normalize(split.train, *d.normalization);
    normalize(split.eval, *d.normalization);
  }
  return split;
}

}  // namespace gaternet
