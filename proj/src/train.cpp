#include "gaternet/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"
#include "gaternet/layers.hpp"

namespace gaternet {

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::pretrain_backbone: return "pretrain_backbone";
    case Phase::pretrain_gater: return "pretrain_gater";
    case Phase::joint: return "joint";
  }
  return "?";
}

Phase phase_from_string(const std::string& name) {
  std::string s = name;
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "pretrain_backbone") return Phase::pretrain_backbone;
  if (s == "pretrain_gater") return Phase::pretrain_gater;
  if (s == "joint") return Phase::joint;
  throw ConfigError("unknown phase '" + name + "' (expected pretrain-backbone, pretrain-gater or joint)");
}

double lr_at(const std::vector<LrPoint>& schedule, std::size_t epoch) {
  if (schedule.empty()) throw ConfigError("learning-rate schedule is empty");
  if (epoch < schedule.front().epoch) {
    throw ConfigError("epoch " + std::to_string(epoch) + " precedes the first lr breakpoint (epoch " +
                      std::to_string(schedule.front().epoch) + ")");
  }
  double lr = schedule.front().lr;
  for (const auto& p : schedule) {
    if (p.epoch > epoch) break;
    lr = p.lr;
  }
  return lr;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (lr_schedule.empty()) throw ConfigError("learning-rate schedule is empty");
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].lr > 0.0)) throw ConfigError("learning rates must be > 0");
    if (i > 0 && lr_schedule[i].epoch <= lr_schedule[i - 1].epoch) {
      throw ConfigError("lr schedule epochs must be strictly ascending");
    }
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  try {
    GateDropoutSchedule d = dropout;
    d.total_steps = std::max<std::size_t>(d.total_steps, 1);
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::uint64_t TrainConfig::hash() const {
  std::ostringstream out;
  out << std::setprecision(17) << "phase=" << to_string(phase) << ";lambda=" << lambda
      << ";batch=" << batch_size << ";lr=";
  for (const auto& p : lr_schedule) out << p.epoch << ':' << p.lr << ',';
  out << ";momentum=" << momentum << ";wd=" << weight_decay << ";seed=" << seed
      << ";dropout=" << dropout.start_rate << ':' << dropout.end_rate
      << ";reduction=" << (reduction == Reduction::batch_mean ? "mean" : "sum")
      << ";augment=" << augment.random_crop << augment.mirror << augment.pad;
  return fnv1a64(out.str());
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
LossParts<T> total_loss(const BasicTensor<T>& logits, std::span<const int> labels,
                        const BasicTensor<T>& selected_gates, double lambda, Reduction reduction) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  LossParts<T> parts;
  parts.ce = softmax_cross_entropy(logits, labels);
  const std::size_t c = selected_gates.defined() && selected_gates.rank() == 2 ? selected_gates.size(1) : 0;
  if (c == 0) {
    parts.reg = BasicTensor<T>::scalar(T(0));
  } else {
    if (selected_gates.size(0) != logits.size(0)) {
      throw ShapeError("total_loss: gates " + shape_str(selected_gates.shape()) + " vs logits " +
                       shape_str(logits.shape()));
    }
    // mean() divides the double-accumulated sum once, so all-ones gates give
    // exactly 1.
    parts.reg = mean(selected_gates);
    if (reduction == Reduction::batch_sum) parts.reg = scale(parts.reg, static_cast<T>(selected_gates.size(0)));
  }
  parts.total = add(parts.ce, scale(parts.reg, static_cast<T>(lambda)));
  return parts;
}

template LossParts<float> total_loss<float>(const Tensor&, std::span<const int>, const Tensor&, double,
                                            Reduction);
template LossParts<double> total_loss<double>(const Tensor64&, std::span<const int>, const Tensor64&,
                                              double, Reduction);

// ---------------------------------------------------------------------------
// Gradient routing

namespace {

void zero_all(const std::vector<NamedTensor<float>>& params) {
  for (const auto& p : params) p.tensor.zero_grad();
}

std::vector<float> grad_or_zero(const Tensor& t) {
  if (!t.has_grad()) return std::vector<float>(t.numel(), 0.0f);
  return {t.grad().begin(), t.grad().end()};
}

}  // namespace

RoutingReport gradient_routing_check(const GaterNet<float>& model, const Tensor& x,
                                     std::span<const int> labels, std::uint64_t noise_seed,
                                     double lambda_probe) {
  // Work on a copy: training-mode forwards move batchnorm running stats.
  Rng init(0);
  GaterNet<float> net(model.spec(), init);
  copy_state(model, net);
  const auto params = net.parameters();
  const ForwardOptions opts{BranchPolicy::force_alpha, 0.0};

  RoutingReport report;
  std::unordered_map<const Node<float>*, std::string> backbone_nodes;
  for (const auto& p : params) {
    if (p.group == ParamGroup::backbone) {
      backbone_nodes[p.tensor.node().get()] = p.name;
      ++report.backbone_params_checked;
    }
  }

  // Symbolic and numeric check of the regularizer alone.
  {
    Rng noise(noise_seed);
    const auto out = net.forward(x, Mode::train, noise, opts);
    const auto parts = total_loss(out.logits, labels, out.bundle.selected, lambda_probe);
    for (const Node<float>* leaf : reachable_leaves(parts.reg)) {
      auto it = backbone_nodes.find(leaf);
      if (it != backbone_nodes.end()) report.reachable_backbone.push_back(it->second);
    }
    zero_all(params);
    backward(parts.reg);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      const auto g = p.tensor.grad();
      if (p.group == ParamGroup::backbone) {
        if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) {
          report.nonzero_backbone.push_back(p.name);
        }
      } else if (p.name == "head.fc2.weight") {
        double sq = 0.0;
        for (float v : g) sq += double(v) * double(v);
        report.head_w2_reg_grad_norm = std::sqrt(sq);
      }
    }
  }

  // Total-loss backbone gradients at lambda = 0 and lambda = lambda_probe
  // under the same noise draw, hence the same gates.
  auto backbone_grads = [&](double lambda) {
    Rng noise(noise_seed);
    const auto out = net.forward(x, Mode::train, noise, opts);
    zero_all(params);
    backward(total_loss(out.logits, labels, out.bundle.selected, lambda).total);
    std::vector<std::vector<float>> grads;
    for (const auto& p : params)
      if (p.group == ParamGroup::backbone) grads.push_back(grad_or_zero(p.tensor));
    return grads;
  };
  const auto g0 = backbone_grads(0.0);
  const auto g1 = backbone_grads(lambda_probe);
  std::size_t k = 0;
  for (const auto& p : params) {
    if (p.group != ParamGroup::backbone) continue;
    if (g0[k] != g1[k]) report.lambda_dependent_backbone.push_back(p.name);
    ++k;
  }
  zero_all(params);
  return report;
}

// ---------------------------------------------------------------------------
// Optimizer

Sgd::Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

void Sgd::step(const std::vector<NamedTensor<float>>& params, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be > 0");
  const float mu = static_cast<float>(momentum_);
  const float rate = static_cast<float>(lr);
  for (const auto& p : params) {
    auto data = p.tensor.mutable_data();
    auto& v = velocity_[p.name];
    if (v.size() != data.size()) v.assign(data.size(), 0.0f);
    const float wd = p.decay ? static_cast<float>(weight_decay_) : 0.0f;
    const bool has = p.tensor.has_grad();
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float gi = has ? g[i] : 0.0f;
      v[i] = mu * v[i] + gi + wd * data[i];
      data[i] -= rate * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.size(1);
  const auto d = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = d.subspan(i * k, k);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  return correct;
}

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

EvalResult evaluate(const GaterNet<float>& model, Phase phase, const Dataset& data,
                    std::size_t batch_size, bool collect_gates) {
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be >= 1");
  if (collect_gates && phase != Phase::joint) {
    throw std::invalid_argument("gate logs are only collected from a jointly trained model");
  }
  const std::size_t c = model.gate_map().size();
  EvalResult result;
  if (collect_gates) {
    GateLog log;
    log.num_samples = data.size();
    log.num_gates = c;
    log.labels = data.labels;
    log.layer_map = model.gate_map().slots();
    log.gates.reserve(data.size() * c);
    result.gate_log = std::move(log);
  }
  std::size_t correct = 0;
  double gate_sum = 0.0;
  Rng unused(0);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = range_indices(start, std::min(data.size(), start + batch_size));
    const Tensor x = data.batch(idx);
    const auto labels = data.batch_labels(idx);
    Tensor logits;
    switch (phase) {
      case Phase::pretrain_backbone: logits = model.forward_ungated(x, Mode::eval); break;
      case Phase::pretrain_gater: logits = model.gater_classifier_logits(x, Mode::eval); break;
      case Phase::joint: {
        auto out = model.forward(x, Mode::eval, unused);
        logits = out.logits;
        for (float g : out.bundle.selected.data()) {
          gate_sum += g;
          if (result.gate_log) result.gate_log->gates.push_back(g > 0.5f ? 1 : 0);
        }
        break;
      }
    }
    correct += count_correct(logits, labels);
  }
  const double n = static_cast<double>(data.size());
  result.accuracy = data.size() ? double(correct) / n : 0.0;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  switch (phase) {
    case Phase::pretrain_backbone: result.mean_gate_activation = c ? 1.0 : nan; break;
    case Phase::pretrain_gater: result.mean_gate_activation = nan; break;
    case Phase::joint:
      result.mean_gate_activation = (c && data.size()) ? gate_sum / (n * double(c)) : nan;
      break;
  }
  return result;
}

std::string metrics_csv_header() {
  return "epoch,phase,train_loss,eval_acc,mean_gate_activation,lr,dropout_rate";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream out;
  out << std::setprecision(9) << m.epoch << ',' << to_string(m.phase) << ',' << m.train_loss << ','
      << m.eval_acc << ',';
  if (std::isnan(m.mean_gate_activation)) out << "nan";
  else out << m.mean_gate_activation;
  out << ',' << m.lr << ',' << m.dropout_rate;
  return out.str();
}

// ---------------------------------------------------------------------------
// Phases

namespace {

bool in_phase(Phase phase, ParamGroup group) {
  switch (phase) {
    case Phase::pretrain_backbone: return group == ParamGroup::backbone;
    case Phase::pretrain_gater: return group == ParamGroup::gater || group == ParamGroup::gater_classifier;
    case Phase::joint: return group != ParamGroup::gater_classifier;
  }
  return false;
}

void check_init(const Checkpoint& ckpt, Phase expected, const ModelSpec& spec, const std::string& what) {
  check_spec_hash(ckpt, spec, what);
  if (ckpt.meta.phase != to_string(expected)) {
    throw CheckpointError(what + " checkpoint is from phase '" + ckpt.meta.phase + "', expected '" +
                          to_string(expected) + "'");
  }
}

Tensor training_batch(const Dataset& data, std::span<const std::size_t> idx, const AugmentFlags& flags,
                      Rng& rng) {
  if (!flags.random_crop && !flags.mirror) return data.batch(idx);
  const std::size_t sz = data.image_size();
  std::vector<float> out(idx.size() * sz);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto img = augment(data.image(idx[i]), data.channels, data.height, data.width, rng, flags);
    std::copy(img.begin(), img.end(), out.begin() + i * sz);
  }
  return Tensor({idx.size(), data.channels, data.height, data.width}, std::move(out));
}

}  // namespace

PhaseResult run_phase(GaterNet<float>& model, const TrainConfig& config, const PhaseInputs& inputs) {
  config.validate();
  if (!inputs.train || !inputs.eval) throw std::invalid_argument("run_phase needs train and eval data");
  const Dataset& train = *inputs.train;
  if (train.size() == 0) throw ConfigError("training set is empty");
  const ModelSpec& spec = model.spec();
  const Phase phase = config.phase;
  if (phase == Phase::pretrain_gater && spec.gater.empty()) {
    throw ConfigError("pretrain_gater needs a model with a gater network");
  }

  const std::size_t batches = (train.size() + config.batch_size - 1) / config.batch_size;
  GateDropoutSchedule dropout = config.dropout;
  // Steps are numbered 0 .. T-1; the ramp ends on the last one.
  const std::size_t steps = config.epochs * batches;
  dropout.total_steps = steps > 1 ? steps - 1 : 1;

  Rng rng = Rng(config.seed).split(static_cast<std::uint64_t>(phase) + 1);
  Sgd opt(config.momentum, config.weight_decay);
  std::size_t start_epoch = 0;
  std::size_t step = 0;

  if (inputs.resume) {
    const Checkpoint& ck = *inputs.resume;
    check_init(ck, phase, spec, "resume");
    if (ck.meta.config_hash != config.hash()) {
      throw CheckpointError("resume: training config hash mismatch (checkpoint " + hex64(ck.meta.config_hash) +
                            ", config " + hex64(config.hash()) + ")");
    }
    restore_model(ck, model);
    for (const auto& t : ck.tensors) {
      if (t.name.rfind("momentum/", 0) == 0) opt.velocity()[t.name.substr(9)] = t.data;
    }
    rng.set_state(ck.meta.rng_state);
    start_epoch = ck.meta.epoch;
    step = ck.meta.step;
  } else if (phase == Phase::joint) {
    if (inputs.backbone_init && inputs.gater_init) {
      check_init(*inputs.backbone_init, Phase::pretrain_backbone, spec, "backbone");
      check_init(*inputs.gater_init, Phase::pretrain_gater, spec, "gater");
      restore_model(*inputs.backbone_init, model,
                    [](const std::string& n) { return n.rfind("backbone.", 0) == 0; });
      restore_model(*inputs.gater_init, model, [](const std::string& n) { return n.rfind("gater.", 0) == 0; });
    } else if (!config.from_scratch) {
      throw CheckpointError(
          "joint phase needs both pretrain_backbone and pretrain_gater checkpoints; "
          "run those phases first or pass --from-scratch");
    }
    model.reset_head(rng);
  }

  std::vector<NamedTensor<float>> all_params = model.parameters();
  std::vector<NamedTensor<float>> trainable;
  for (const auto& p : all_params)
    if (in_phase(phase, p.group)) trainable.push_back(p);

  PhaseResult result;
  auto snapshot = [&](std::size_t epochs_done) {
    Checkpoint ck;
    ck.meta = {to_string(phase), epochs_done, step, spec.hash(), config.hash(), rng.state()};
    store_model(model, ck);
    for (const auto& p : trainable) {
      auto it = opt.velocity().find(p.name);
      std::vector<float> v = it != opt.velocity().end() ? it->second : std::vector<float>(p.tensor.numel(), 0.0f);
      ck.put("momentum/" + p.name, p.tensor.shape(), std::move(v));
    }
    return ck;
  };

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.lr_schedule, epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double rate = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(train.size(), lo + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Tensor x = training_batch(train, idx, config.augment, rng);
      const auto labels = train.batch_labels(idx);
      Tensor logits, loss;
      switch (phase) {
        case Phase::pretrain_backbone:
          logits = model.forward_ungated(x, Mode::train);
          loss = softmax_cross_entropy(logits, std::span<const int>(labels));
          break;
        case Phase::pretrain_gater:
          logits = model.gater_classifier_logits(x, Mode::train);
          loss = softmax_cross_entropy(logits, std::span<const int>(labels));
          break;
        case Phase::joint: {
          rate = dropout_rate_at(dropout, step);
          auto out = model.forward(x, Mode::train, rng, {BranchPolicy::random, rate});
          logits = out.logits;
          loss = total_loss(logits, std::span<const int>(labels), out.bundle.selected, config.lambda,
                            config.reduction)
                     .total;
          break;
        }
      }
      zero_all(all_params);
      backward(loss);
      opt.step(trainable, lr);
      ++step;
      loss_sum += double(loss.item()) * double(idx.size());
      correct += count_correct(logits, labels);
    }
    zero_all(all_params);

    const EvalResult ev = evaluate(model, phase, *inputs.eval, std::max<std::size_t>(config.batch_size, 128));
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.phase = phase;
    m.train_loss = loss_sum / double(train.size());
    m.train_acc = double(correct) / double(train.size());
    m.eval_acc = ev.accuracy;
    m.mean_gate_activation = ev.mean_gate_activation;
    m.lr = lr;
    m.dropout_rate = rate;
    result.metrics.push_back(m);
    result.checkpoint = snapshot(epoch + 1);
    if (inputs.on_epoch) inputs.on_epoch(m, result.checkpoint);
  }
  if (result.metrics.empty()) result.checkpoint = snapshot(start_epoch);
  return result;
}

}  // namespace gaternet
