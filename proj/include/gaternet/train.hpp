#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gaternet/analyze.hpp"
#include "gaternet/checkpoint.hpp"
#include "gaternet/data.hpp"
#include "gaternet/model.hpp"
#include "gaternet/semhash.hpp"

namespace gaternet {

enum class Phase { pretrain_backbone, pretrain_gater, joint };
const char* to_string(Phase phase);
// Accepts "pretrain_backbone" and "pretrain-backbone" spellings.
Phase phase_from_string(const std::string& name);

// How the sparsity term is reduced over the batch.
enum class Reduction { batch_mean, batch_sum };

struct LrPoint {
  std::size_t epoch = 0;
  double lr = 0.05;

  bool operator==(const LrPoint&) const = default;
};

// Piecewise constant: the lr of the last breakpoint at or before `epoch`.
double lr_at(const std::vector<LrPoint>& schedule, std::size_t epoch);

struct TrainConfig {
  Phase phase = Phase::joint;
  double lambda = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::vector<LrPoint> lr_schedule{{0, 0.05}};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  // total_steps is filled in from epochs x batches at the start of a phase.
  GateDropoutSchedule dropout{};
  Reduction reduction = Reduction::batch_mean;
  AugmentFlags augment{};
  bool from_scratch = false;  // joint without pretrained checkpoints

  void validate() const;
  // Hash over the settings that shape a run. The epoch count is left out
  // so a finished run can be resumed with a longer budget.
  std::uint64_t hash() const;
};

template <typename T>
struct LossParts {
  BasicTensor<T> total;
  BasicTensor<T> ce;
  BasicTensor<T> reg;  // ||g||_1 / c reduced over the batch, before lambda
};

// CE + lambda * ||g||_1 / c. With c = 0 the regularizer is the constant 0.
template <typename T>
LossParts<T> total_loss(const BasicTensor<T>& logits, std::span<const int> labels,
                        const BasicTensor<T>& selected_gates, double lambda,
                        Reduction reduction = Reduction::batch_mean);

struct RoutingReport {
  // Backbone leaves reachable from the regularizer node in the graph.
  std::vector<std::string> reachable_backbone;
  // Backbone parameters whose gradient from the regularizer alone is nonzero.
  std::vector<std::string> nonzero_backbone;
  // Backbone parameters whose total-loss gradient differs between lambda = 0
  // and lambda = lambda_probe under identical gates.
  std::vector<std::string> lambda_dependent_backbone;
  double head_w2_reg_grad_norm = 0.0;
  std::size_t backbone_params_checked = 0;

  bool ok() const {
    return reachable_backbone.empty() && nonzero_backbone.empty() && lambda_dependent_backbone.empty();
  }
};

// Training-mode forward with the alpha branch forced and a fixed noise seed.
RoutingReport gradient_routing_check(const GaterNet<float>& model, const Tensor& x,
                                     std::span<const int> labels, std::uint64_t noise_seed,
                                     double lambda_probe = 0.1);

// v <- momentum * v + g + wd * p; p <- p - lr * v. Decay only where the
// parameter's `decay` flag is set. A parameter without a gradient is
// treated as having a zero gradient.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay);
  void step(const std::vector<NamedTensor<float>>& params, double lr);

  std::map<std::string, std::vector<float>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<float>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<float>> velocity_;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_gate_activation = 0.0;  // NaN when the phase has no gates
  std::optional<GateLog> gate_log;
};

// Evaluates the network a phase trains: the ungated backbone, the gater's
// temporary classifier, or the full gated model.
EvalResult evaluate(const GaterNet<float>& model, Phase phase, const Dataset& data,
                    std::size_t batch_size, bool collect_gates = false);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  Phase phase = Phase::joint;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double mean_gate_activation = 0.0;
  double lr = 0.0;
  double dropout_rate = 0.0;
};

// CSV header and row for the per-epoch metrics log.
std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct PhaseInputs {
  const Dataset* train = nullptr;
  const Dataset* eval = nullptr;
  const Checkpoint* resume = nullptr;         // continue this phase
  const Checkpoint* backbone_init = nullptr;  // joint: pretrain_backbone result
  const Checkpoint* gater_init = nullptr;     // joint: pretrain_gater result
  std::function<void(const EpochMetrics&, const Checkpoint&)> on_epoch;
};

struct PhaseResult {
  std::vector<EpochMetrics> metrics;
  Checkpoint checkpoint;
};

// Runs config.phase on `model`, which must have been built from the spec
// the checkpoints were written for.
PhaseResult run_phase(GaterNet<float>& model, const TrainConfig& config, const PhaseInputs& inputs);

}  // namespace gaternet
