#pragma once

// Shared oracles and fixtures for the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "gaternet/analyze.hpp"
#include "gaternet/grad_check.hpp"
#include "gaternet/layers.hpp"
#include "gaternet/model.hpp"
#include "gaternet/rng.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet::testing {

template <typename T = float>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

template <typename T>
std::vector<T> to_vec(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// Gradient check of a float implementation against a 64-bit oracle.
//
// `op` is a generic callable mapping a vector of BasicTensor<T> to a
// BasicTensor<T>, for T in {float, double}. Inputs are drawn in float and
// widened, so both precisions see the same point. The float analytic
// gradient and the double analytic gradient are both compared with 64-bit
// central differences; the returned error is the larger of the two.
struct MixedCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

template <typename Op>
MixedCheck mixed_grad_check(Op&& op, const std::vector<Tensor>& inputs, std::uint64_t seed,
                            GradCheckOptions opt = default_grad_check_options<double>()) {
  std::vector<Tensor> in32;
  std::vector<Tensor64> in64;
  for (const auto& t : inputs) {
    in32.push_back(Tensor(t.shape(), to_vec(t), true));
    in64.push_back(t.cast<double>().set_requires_grad(true));
  }
  const Tensor probe = op(in32);
  Rng wrng(seed ^ 0xabcdefULL);
  std::vector<float> w(probe.numel());
  for (auto& v : w) v = static_cast<float>(wrng.uniform() * 2.0 - 1.0);
  const Tensor w32(probe.shape(), w);
  const Tensor64 w64 = w32.cast<double>();

  auto loss32 = [&] { return sum(mul(op(in32), w32)); };
  auto loss64 = [&] { return sum(mul(op(in64), w64)); };

  for (auto& t : in32) t.zero_grad();
  backward(loss32());
  const auto g32 = collect_grads(in32);
  for (auto& t : in64) t.zero_grad();
  backward(loss64());
  const auto g64 = collect_grads(in64);
  for (auto& t : in64) t.zero_grad();

  opt.subset_seed = seed;
  const FiniteDifference fd = finite_difference<double>(loss64, in64, opt);
  const GradCheckResult r32 = compare_gradients(g32, fd);
  const GradCheckResult r64 = compare_gradients(g64, fd);
  return {std::max(r32.max_rel_error, r64.max_rel_error), r32.checked, r32.skipped};
}

// Direct six-loop cross-correlation with symmetric zero padding.
template <typename T>
std::vector<T> naive_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* bias,
                            std::size_t stride, std::size_t pad) {
  const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), wd = x.size(3);
  const std::size_t o = w.size(0), kh = w.size(2), kw = w.size(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<T> out(n * o * oh * ow, T(0));
  const auto xd = x.data();
  const auto wdat = w.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T acc = T(0);
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long yy = long(i * stride + u) - long(pad);
                const long xx = long(j * stride + v) - long(pad);
                if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
                acc += xd[((s * c + ch) * h + yy) * wd + xx] * wdat[((f * c + ch) * kh + u) * kw + v];
              }
          if (bias) acc += bias->data()[f];
          out[((s * o + f) * oh + i) * ow + j] = acc;
        }
  return out;
}

inline GateLog random_gate_log(std::size_t n, std::size_t c, Rng& rng, double p_on = 0.5) {
  GateLog log;
  log.num_samples = n;
  log.num_gates = c;
  log.gates.resize(n * c);
  // Mix in some constant columns so every category shows up.
  for (std::size_t j = 0; j < c; ++j) {
    const double u = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      std::uint8_t g;
      if (u < 0.15) g = 1;
      else if (u < 0.3) g = 0;
      else g = rng.bernoulli(p_on) ? 1 : 0;
      log.gates[i * c + j] = g;
    }
  }
  for (std::size_t i = 0; i < n; ++i) log.labels.push_back(static_cast<int>(rng.index(10)));
  const std::size_t layers = std::max<std::size_t>(1, std::min<std::size_t>(4, c));
  std::size_t per = (c + layers - 1) / layers;
  for (std::size_t j = 0; j < c; ++j) log.layer_map.push_back({j / per, j % per});
  return log;
}

// Small gated spec used by gradient and equivalence tests.
inline ModelSpec tiny_spec() {
  ModelSpec s;
  s.input_channels = 2;
  s.input_height = 6;
  s.input_width = 6;
  s.backbone = {
      {LayerKind::conv, 4, 3, 1, 1, true, true, true},
      {LayerKind::maxpool, 0, 2, 2, 0, false, false, false},
      {LayerKind::conv, 5, 3, 1, 1, true, true, true},
      {LayerKind::global_avg_pool, 0, 1, 1, 0, false, false, false},
      {LayerKind::fc, 3, 1, 1, 0, false, false, false},
  };
  s.gater = {
      {LayerKind::conv, 4, 3, 2, 1, true, true, false},
      {LayerKind::global_avg_pool, 0, 1, 1, 0, false, false, false},
  };
  s.bottleneck = 3;
  s.num_classes = 3;
  return s;
}

// Desk-scale spec mirroring configs/synthetic.json.
inline ModelSpec desk_spec() {
  ModelSpec s;
  s.input_channels = 3;
  s.input_height = 16;
  s.input_width = 16;
  const LayerDesc pool{LayerKind::maxpool, 0, 2, 2, 0, false, false, false};
  const LayerDesc gap{LayerKind::global_avg_pool, 0, 1, 1, 0, false, false, false};
  auto conv = [](std::size_t f, bool gated, std::size_t stride = 1) {
    return LayerDesc{LayerKind::conv, f, 3, stride, 1, true, true, gated};
  };
  s.backbone = {conv(8, true), conv(8, true), pool, conv(16, true), conv(16, true), pool,
                conv(32, true), conv(32, true), gap, {LayerKind::fc, 10, 1, 1, 0, false, false, false}};
  s.gater = {conv(8, false, 2), conv(16, false, 2), conv(16, false), gap};
  s.bottleneck = 8;
  s.num_classes = 10;
  return s;
}

// Angle in degrees between two directions, ignoring sign.
inline double axis_angle_deg(double ax, double ay, double bx, double by) {
  const double dot = std::abs(ax * bx + ay * by) / (std::hypot(ax, ay) * std::hypot(bx, by));
  return std::acos(std::min(1.0, dot)) * 180.0 / 3.14159265358979323846;
}

}  // namespace gaternet::testing
