#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gaternet/rng.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

// Finite-difference gradient checking.
//
// Kink policy: a coordinate is excluded when the forward and backward
// one-sided differences disagree by more than `kink_threshold` (relative to
// max(1, |central|)). Near a breakpoint of relu, max-pool or the saturating
// sigmoid the central difference is meaningless; for a pure slope change the
// central-difference error is exactly half that disagreement, so anything
// left in the checked set is bounded by kink_threshold / 2.

struct GradCheckOptions {
  double eps = 1e-3;
  double kink_threshold = 1e-3;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t subset_seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct FiniteDifference {
  // Per tensor, per checked coordinate.
  std::vector<std::vector<std::size_t>> coords;
  std::vector<std::vector<double>> central;
  std::vector<std::vector<bool>> kink;
};

template <typename T>
GradCheckOptions default_grad_check_options() {
  GradCheckOptions opt;
  opt.eps = sizeof(T) >= 8 ? 1e-6 : 1e-3;
  return opt;
}

// Central differences of a scalar-valued `loss_fn()` with respect to the
// given leaves. The leaves' data is perturbed in place and restored.
template <typename T, typename F>
FiniteDifference finite_difference(F&& loss_fn, const std::vector<BasicTensor<T>>& leaves,
                                   const GradCheckOptions& opt) {
  if (!(opt.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  const double base = static_cast<double>(loss_fn().item());
  if (static_cast<double>(loss_fn().item()) != base) {
    throw std::invalid_argument("grad_check: function is not deterministic");
  }
  FiniteDifference fd;
  Rng rng(opt.subset_seed);
  for (const auto& leaf : leaves) {
    std::vector<std::size_t> coords(leaf.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<double> central(coords.size());
    std::vector<bool> kink(coords.size());
    auto data = leaf.mutable_data();
    for (std::size_t k = 0; k < coords.size(); ++k) {
      const std::size_t i = coords[k];
      const T saved = data[i];
      data[i] = static_cast<T>(saved + opt.eps);
      const double plus = static_cast<double>(loss_fn().item());
      data[i] = static_cast<T>(saved - opt.eps);
      const double minus = static_cast<double>(loss_fn().item());
      data[i] = saved;
      central[k] = (plus - minus) / (2.0 * opt.eps);
      const double forward = (plus - base) / opt.eps;
      const double backward_diff = (base - minus) / opt.eps;
      kink[k] = std::abs(forward - backward_diff) >
                opt.kink_threshold * std::max(1.0, std::abs(central[k]));
    }
    fd.coords.push_back(std::move(coords));
    fd.central.push_back(std::move(central));
    fd.kink.push_back(std::move(kink));
  }
  return fd;
}

// max |analytic - central| / max(1, |central|) over non-kink coordinates.
template <typename G>
GradCheckResult compare_gradients(const std::vector<G>& analytic, const FiniteDifference& fd) {
  GradCheckResult result;
  for (std::size_t t = 0; t < fd.coords.size(); ++t) {
    for (std::size_t k = 0; k < fd.coords[t].size(); ++k) {
      if (fd.kink[t][k]) {
        ++result.skipped;
        continue;
      }
      const std::size_t i = fd.coords[t][k];
      const double a = analytic[t].empty() ? 0.0 : static_cast<double>(analytic[t][i]);
      const double c = fd.central[t][k];
      result.max_rel_error =
          std::max(result.max_rel_error, std::abs(a - c) / std::max(1.0, std::abs(c)));
      ++result.checked;
    }
  }
  return result;
}

template <typename T>
std::vector<std::vector<T>> collect_grads(const std::vector<BasicTensor<T>>& leaves) {
  std::vector<std::vector<T>> grads;
  for (const auto& leaf : leaves) grads.emplace_back(leaf.grad().begin(), leaf.grad().end());
  return grads;
}

// Checks backward() of `loss_fn()` against central differences for every
// leaf in `leaves`.
template <typename T, typename F>
GradCheckResult grad_check_leaves(F&& loss_fn, const std::vector<BasicTensor<T>>& leaves,
                                  const GradCheckOptions& opt = default_grad_check_options<T>()) {
  for (const auto& leaf : leaves) leaf.zero_grad();
  backward(loss_fn());
  const auto analytic = collect_grads(leaves);
  for (const auto& leaf : leaves) leaf.zero_grad();
  return compare_gradients(analytic, finite_difference<T>(loss_fn, leaves, opt));
}

// Single-input form. A non-scalar output is contracted with fixed random
// weights, sum(w * f(x)), which checks the full vector-Jacobian product.
template <typename T, typename F>
GradCheckResult grad_check(F&& f, const BasicTensor<T>& x,
                           const GradCheckOptions& opt = default_grad_check_options<T>()) {
  BasicTensor<T> leaf = x.detach();
  leaf.set_requires_grad(true);
  const BasicTensor<T> probe = f(leaf);
  BasicTensor<T> weights;
  if (probe.numel() != 1) {
    Rng rng(opt.subset_seed ^ 0x5eedULL);
    std::vector<T> w(probe.numel());
    for (auto& v : w) v = static_cast<T>(rng.uniform() * 2.0 - 1.0);
    weights = BasicTensor<T>(probe.shape(), std::move(w));
  }
  auto loss_fn = [&] {
    BasicTensor<T> out = f(leaf);
    return weights.defined() ? sum(mul(out, weights)) : out;
  };
  return grad_check_leaves<T>(loss_fn, std::vector<BasicTensor<T>>{leaf}, opt);
}

}  // namespace gaternet
