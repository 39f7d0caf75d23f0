#include "gaternet/semhash.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "gaternet/errors.hpp"

namespace gaternet {

double saturating_sigmoid_value(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return std::clamp(1.2 * s - 0.1, 0.0, 1.0);
}

double saturating_sigmoid_slope(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  const double raw = 1.2 * s - 0.1;
  if (raw <= 0.0 || raw >= 1.0) return 0.0;
  return 1.2 * s * (1.0 - s);
}

namespace {

template <typename T>
T sat_value(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return std::clamp(T(1.2) * s - T(0.1), T(0), T(1));
}

template <typename T>
T sat_slope(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  const T raw = T(1.2) * s - T(0.1);
  if (raw <= T(0) || raw >= T(1)) return T(0);
  return T(1.2) * s * (T(1) - s);
}

}  // namespace

template <typename T>
BasicTensor<T> saturating_sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sat_value(in[i]);
  return make_result<T>("saturating_sigmoid", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const auto& in = self.inputs[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sat_slope(in[i]);
  });
}

template <typename T>
GateBundle<T> semhash_forward(const BasicTensor<T>& g_pre, Mode mode, Rng& rng,
                              BranchPolicy policy) {
  if (g_pre.rank() != 2) throw ShapeError("semhash: g_pre must be N x c, got " + shape_str(g_pre.shape()));
  const std::size_t n = g_pre.size(0), c = g_pre.size(1);
  GateBundle<T> bundle;
  bundle.mode = mode;
  bundle.g_pre = g_pre;

  if (mode == Mode::train) {
    std::vector<T> noise(n * c);
    for (auto& v : noise) v = static_cast<T>(rng.normal());
    bundle.g_noisy = add(g_pre, BasicTensor<T>({n, c}, std::move(noise)));
  } else {
    bundle.g_noisy = g_pre.detach();
  }

  const auto noisy = bundle.g_noisy.data();
  std::vector<T> alpha(n * c), beta(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    alpha[i] = sat_value(noisy[i]);
    beta[i] = noisy[i] > T(0) ? T(1) : T(0);
  }

  bundle.branch.assign(n, GateBranch::beta);
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < n; ++r) {
      switch (policy) {
        case BranchPolicy::random:
          bundle.branch[r] = rng.bernoulli(0.5) ? GateBranch::beta : GateBranch::alpha;
          break;
        case BranchPolicy::force_alpha:
          bundle.branch[r] = GateBranch::alpha;
          break;
        case BranchPolicy::force_beta:
          bundle.branch[r] = GateBranch::beta;
          break;
      }
    }
  }

  std::vector<T> selected(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& src = bundle.branch[r] == GateBranch::alpha ? alpha : beta;
    std::copy_n(src.begin() + r * c, c, selected.begin() + r * c);
  }
  bundle.g_alpha = BasicTensor<T>({n, c}, std::move(alpha));
  bundle.g_beta = BasicTensor<T>({n, c}, std::move(beta));

  if (mode == Mode::train) {
    // Both branches share the slope of the relaxation w.r.t. g_noisy.
    bundle.selected = make_result<T>("semhash_select", {n, c}, std::move(selected),
                                     {bundle.g_noisy}, [](Node<T>& self) {
                                       auto& g = self.inputs[0]->ensure_grad();
                                       const auto& in = self.inputs[0]->data;
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                         g[i] += self.grad[i] * sat_slope(in[i]);
                                     });
  } else {
    bundle.selected = BasicTensor<T>({n, c}, std::move(selected));
  }
  return bundle;
}

template <typename T>
BasicTensor<T> semhash_backward(const BasicTensor<T>& upstream, const GateBundle<T>& bundle) {
  if (bundle.mode != Mode::train) {
    throw std::logic_error("semhash_backward: bundle comes from an eval-mode forward");
  }
  if (upstream.shape() != bundle.g_noisy.shape()) {
    throw ShapeError("semhash_backward: upstream " + shape_str(upstream.shape()) +
                     " does not match gates " + shape_str(bundle.g_noisy.shape()));
  }
  std::vector<T> grad(upstream.numel());
  const auto up = upstream.data();
  const auto noisy = bundle.g_noisy.data();
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = up[i] * sat_slope(noisy[i]);
  return BasicTensor<T>(upstream.shape(), std::move(grad));
}

template <typename T>
BasicTensor<T> gate_dropout(const BasicTensor<T>& selected, double rate, Rng& rng) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw std::invalid_argument("gate_dropout: rate " + std::to_string(rate) +
                                " outside [0, 1)");
  }
  if (rate == 0.0) return selected;
  std::vector<T> keep(selected.numel());
  for (auto& v : keep) v = rng.uniform() < rate ? T(0) : T(1);
  return mul(selected, BasicTensor<T>(selected.shape(), std::move(keep)));
}

void GateDropoutSchedule::validate() const {
  if (!(start_rate >= 0.0) || start_rate > end_rate || !(end_rate < 1.0)) {
    throw std::invalid_argument("dropout schedule needs 0 <= start_rate <= end_rate < 1");
  }
  if (total_steps == 0) throw std::invalid_argument("dropout schedule needs total_steps >= 1");
}

double dropout_rate_at(const GateDropoutSchedule& schedule, std::size_t step) {
  schedule.validate();
  if (step >= schedule.total_steps) return schedule.end_rate;
  const double t = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.start_rate + (schedule.end_rate - schedule.start_rate) * t;
}

#define GATERNET_INSTANTIATE(T)                                                               \
  template struct GateBundle<T>;                                                              \
  template BasicTensor<T> saturating_sigmoid<T>(const BasicTensor<T>&);                       \
  template GateBundle<T> semhash_forward<T>(const BasicTensor<T>&, Mode, Rng&, BranchPolicy); \
  template BasicTensor<T> semhash_backward<T>(const BasicTensor<T>&, const GateBundle<T>&);   \
  template BasicTensor<T> gate_dropout<T>(const BasicTensor<T>&, double, Rng&);

GATERNET_INSTANTIATE(float)
GATERNET_INSTANTIATE(double)

#undef GATERNET_INSTANTIATE

}  // namespace gaternet
