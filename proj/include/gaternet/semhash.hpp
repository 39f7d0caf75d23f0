#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gaternet/rng.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

// sigma'(x) = max(0, min(1, 1.2 * sigmoid(x) - 0.1))
template <typename T>
BasicTensor<T> saturating_sigmoid(const BasicTensor<T>& x);

double saturating_sigmoid_value(double x);
// Derivative of 1.2 * sigmoid(x) - 0.1 inside the unclipped region, 0 where
// the output is clipped to 0 or 1.
double saturating_sigmoid_slope(double x);

enum class GateBranch : std::uint8_t { alpha = 0, beta = 1 };

// Which branch each training sample takes. `random` is an independent fair
// coin per sample; the forced policies exist for tests and gradient checks.
enum class BranchPolicy { random, force_alpha, force_beta };

// Everything one forward pass produced on the way from g' to g.
template <typename T>
struct GateBundle {
  BasicTensor<T> g_pre;     // g'
  BasicTensor<T> g_noisy;   // g' + eps (eps = 0 in eval)
  BasicTensor<T> g_alpha;   // saturating sigmoid of g_noisy, in [0, 1]
  BasicTensor<T> g_beta;    // 1(g_noisy > 0)
  BasicTensor<T> selected;  // the gates actually applied
  std::vector<GateBranch> branch;  // per sample
  Mode mode = Mode::eval;

  std::size_t samples() const { return g_pre.size(0); }
  std::size_t width() const { return g_pre.size(1); }
};

// Improved SemHash. Train: Gaussian noise on g', per-sample choice of the
// relaxed or the binary gates, straight-through backward for the binary
// branch. Eval: no noise, always binary, no graph.
template <typename T>
GateBundle<T> semhash_forward(const BasicTensor<T>& g_pre, Mode mode, Rng& rng,
                              BranchPolicy policy = BranchPolicy::random);

// Gradient of the loss w.r.t. g' given the gradient w.r.t. the selected
// gates. Both branches use the saturating-sigmoid slope at g_noisy.
template <typename T>
BasicTensor<T> semhash_backward(const BasicTensor<T>& upstream, const GateBundle<T>& bundle);

// Zeroes each entry with probability `rate`. No rescaling, so binary gates
// stay binary.
template <typename T>
BasicTensor<T> gate_dropout(const BasicTensor<T>& selected, double rate, Rng& rng);

struct GateDropoutSchedule {
  double start_rate = 0.0;
  double end_rate = 0.05;
  std::size_t total_steps = 1;

  void validate() const;
};

// Linear ramp from start_rate to end_rate over total_steps; clamps past
// the end.
double dropout_rate_at(const GateDropoutSchedule& schedule, std::size_t step);

}  // namespace gaternet
