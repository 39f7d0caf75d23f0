#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gaternet/errors.hpp"
#include "gaternet/layers.hpp"
#include "support.hpp"

using namespace gaternet;
using namespace gaternet::testing;

namespace {

template <typename T>
Conv2dParams<T> conv_from(const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* b, std::size_t stride, std::size_t pad) {
  Conv2dParams<T> p;
  p.filters = w;
  if (b) p.bias = *b;
  p.stride = stride;
  p.padding = pad;
  return p;
}

template <typename T>
BatchNormParams<T> bn_from(const BasicTensor<T>& gamma, const BasicTensor<T>& beta) {
  auto p = BatchNormParams<T>::init(gamma.numel());
  p.gamma = gamma;
  p.beta = beta;
  return p;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("1x1 identity filter and zero filters") {
  Rng rng(1);
  const Tensor x = random_tensor({2, 1, 4, 5}, rng);
  const Tensor one({1, 1, 1, 1}, {1.0f});
  CHECK(to_vec(conv2d(x, conv_from(one, nullptr, 1, 0))) == to_vec(x));

  const Tensor zeros({3, 1, 3, 3}, 0.0f);
  const Tensor y = conv2d(x, conv_from(zeros, nullptr, 1, 1));
  CHECK(y.shape() == Shape{2, 3, 4, 5});
  CHECK(std::all_of(y.data().begin(), y.data().end(), [](float v) { return v == 0.0f; }));
}

TEST_CASE("conv2d matches the naive six-loop oracle exactly") {
  Rng rng(7);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor y = conv2d(x, conv_from(w, nullptr, 1, 0));
  CHECK(y.shape() == Shape{2, 4, 3, 3});
  CHECK(to_vec(y) == naive_conv2d(x, w, nullptr, 1, 0));

  // Random small cases: up to 4x4 channels, up to 7x7 spatial, with bias,
  // stride and padding.
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t c = 1 + rng.index(4), o = 1 + rng.index(4);
    const std::size_t h = 3 + rng.index(5), wd = 3 + rng.index(5);
    const std::size_t k = 1 + rng.index(3), s = 1 + rng.index(2), p = rng.index(2);
    if (h + 2 * p < k || wd + 2 * p < k) continue;
    const Tensor xi = random_tensor({1 + rng.index(3), c, h, wd}, rng);
    const Tensor wi = random_tensor({o, c, k, k}, rng);
    const Tensor bi = random_tensor({o}, rng);
    const Tensor yi = conv2d(xi, conv_from(wi, &bi, s, p));
    CHECK(to_vec(yi) == naive_conv2d(xi, wi, &bi, s, p));
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  const Tensor x({1, 2, 4, 4}, 1.0f);
  CHECK_THROWS_AS(conv2d(x, conv_from(Tensor({1, 3, 3, 3}), nullptr, 1, 0)), ShapeError);
  CHECK_THROWS_AS(conv2d(x, conv_from(Tensor({1, 2, 5, 5}), nullptr, 1, 0)), ShapeError);
}

TEST_CASE("conv_output_size") {
  CHECK(conv_output_size(32, 3, 1, 1) == 32);
  CHECK(conv_output_size(16, 3, 2, 1) == 8);
  CHECK(conv_output_size(2, 5, 1, 0) == 0);
}

TEST_CASE("batchnorm train mode normalizes per channel") {
  Rng rng(3);
  const Tensor x = random_tensor({8, 2, 3, 3}, rng, -2, 5);
  auto p = BatchNormParams<float>::init(2);
  const Tensor y = batchnorm(x, p, Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < 8; ++s)
      for (std::size_t k = 0; k < 9; ++k) {
        m += y.data()[(s * 2 + c) * 9 + k];
        ++n;
      }
    m /= double(n);
    for (std::size_t s = 0; s < 8; ++s)
      for (std::size_t k = 0; k < 9; ++k) v += std::pow(y.data()[(s * 2 + c) * 9 + k] - m, 2);
    v /= double(n);
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm with gamma 0 outputs beta") {
  Rng rng(4);
  const Tensor x = random_tensor({4, 2, 2, 2}, rng);
  auto p = bn_from(Tensor({2}, {0, 0}, true), Tensor({2}, {0.5f, -1.5f}, true));
  for (Mode mode : {Mode::train, Mode::eval}) {
    const Tensor y = batchnorm(x, p, mode);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == ((i / 4) % 2 == 0 ? 0.5f : -1.5f));
  }
}

TEST_CASE("batchnorm eval mode matches the direct formula") {
  const Tensor x({2, 2}, {1.0f, 2.0f, 3.0f, -4.0f});
  auto p = bn_from(Tensor({2}, {1.5f, 0.5f}, true), Tensor({2}, {0.1f, -0.2f}, true));
  p.running_mean = Tensor({2}, {2.0f, -1.0f});
  p.running_var = Tensor({2}, {4.0f, 0.25f});
  const Tensor y = batchnorm(x, p, Mode::eval);
  const double eps = 1e-5;
  const double expect[4] = {
      (1.0 - 2.0) / std::sqrt(4.0 + eps) * 1.5 + 0.1, (2.0 + 1.0) / std::sqrt(0.25 + eps) * 0.5 - 0.2,
      (3.0 - 2.0) / std::sqrt(4.0 + eps) * 1.5 + 0.1, (-4.0 + 1.0) / std::sqrt(0.25 + eps) * 0.5 - 0.2};
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("batchnorm updates running statistics by momentum") {
  const Tensor x({2, 1}, {1.0f, 3.0f});
  auto p = BatchNormParams<float>::init(1);
  batchnorm(x, p, Mode::train);
  CHECK(p.running_mean.data()[0] == doctest::Approx(0.9 * 0 + 0.1 * 2.0));
  CHECK(p.running_var.data()[0] == doctest::Approx(0.9 * 1 + 0.1 * 1.0));
}

TEST_CASE("batchnorm on a single zero-variance sample is stabilized by epsilon") {
  const Tensor x({1, 2, 1, 1}, {3.0f, -1.0f});
  auto p = BatchNormParams<float>::init(2);
  const Tensor y = batchnorm(x, p, Mode::train);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
}

TEST_CASE("batchnorm train to eval consistency") {
  Rng rng(8);
  const Tensor x = random_tensor({16, 3, 2, 2}, rng, -1, 3);
  auto p = bn_from(random_tensor({3}, rng, 0.5, 1.5, true), random_tensor({3}, rng, -1, 1, true));
  Tensor train_out;
  for (int it = 0; it < 300; ++it) train_out = batchnorm(x, p, Mode::train);
  const Tensor eval_out = batchnorm(x, p, Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(train_out.data()[i] - eval_out.data()[i]) < 1e-2);
}

TEST_CASE("activations and pooling") {
  CHECK(to_vec(relu(Tensor({3}, {-1, 0, 2}))) == std::vector<float>{0, 0, 2});
  CHECK(sigmoid(Tensor({1}, {0})).data()[0] == 0.5f);
  const Tensor constant({2, 3, 4, 4}, 2.5f);
  const Tensor g = global_avg_pool(constant);
  CHECK(g.shape() == Shape{2, 3});
  for (float v : g.data()) CHECK(v == 2.5f);

  const Tensor m({1, 1, 2, 4}, {1, 5, 2, 0, -1, 3, 7, 4});
  CHECK(to_vec(max_pool2d(m, 2, 2)) == std::vector<float>{5, 7});
}

TEST_CASE("fully_connected") {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor w({3, 2}, {1, 0, 0, 1, 1, 1});
  const Tensor b({2}, {0.5f, -0.5f});
  CHECK(to_vec(fully_connected(x, w, b)) == std::vector<float>{4.5f, 4.5f, 10.5f, 10.5f});
  CHECK_THROWS_AS(fully_connected(x, Tensor({2, 2}), b), ShapeError);
}

TEST_CASE("softmax cross-entropy") {
  const Tensor uniform({1, 10}, 0.0f);
  const std::vector<int> label{3};
  CHECK(softmax_cross_entropy(uniform, std::span<const int>(label)).item() == doctest::Approx(std::log(10.0)));

  std::vector<float> favored(10, 0.0f);
  favored[3] = 50.0f;
  const Tensor fav({1, 10}, favored);
  CHECK(softmax_cross_entropy(fav, std::span<const int>(label)).item() < 1e-12 + 1e-7);

  Rng rng(5);
  const Tensor logits = random_tensor({4, 6}, rng, -3, 3);
  const std::vector<int> labels{0, 5, 2, 2};
  double expect = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 6; ++k) z += std::exp(double(logits.data()[i * 6 + k]));
    expect += -(double(logits.data()[i * 6 + labels[i]]) - std::log(z));
  }
  expect /= 4.0;
  CHECK(std::abs(softmax_cross_entropy(logits.cast<double>(), std::span<const int>(labels)).item() - expect) < 1e-6);
  CHECK(std::abs(softmax_cross_entropy(logits, std::span<const int>(labels)).item() - expect) < 1e-6);

  const std::vector<int> bad{0, 6, 1, 1};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, std::span<const int>(bad)), std::out_of_range);
  const std::vector<int> negative{0, -1, 1, 1};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, std::span<const int>(negative)), std::out_of_range);
}

TEST_CASE("layer gradients pass 32-bit checks over 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    auto in = [&](Shape s) { return random_tensor(s, rng); };
    auto tol = [](const MixedCheck& r) { return r.max_rel_error < 1e-3; };

    CHECK(tol(mixed_grad_check(
        [](const auto& v) {
          auto p = conv_from(v[1], &v[2], 2, 1);
          return conv2d(v[0], p);
        },
        {in({2, 2, 5, 5}), in({3, 2, 3, 3}), in({3})}, seed)));
    CHECK(tol(mixed_grad_check(
        [](const auto& v) {
          auto p = bn_from(v[1], v[2]);
          return batchnorm(v[0], p, Mode::train);
        },
        {in({4, 3, 2, 2}), in({3}), in({3})}, seed)));
    CHECK(tol(mixed_grad_check(
        [](const auto& v) {
          auto p = bn_from(v[1], v[2]);
          return batchnorm(v[0], p, Mode::train);
        },
        {in({5, 3}), in({3}), in({3})}, seed)));
    CHECK(tol(mixed_grad_check(
        [](const auto& v) {
          using T = typename std::decay_t<decltype(v[0])>::value_type;
          auto p = bn_from(v[1], v[2]);
          p.running_mean = BasicTensor<T>({3}, {T(0.1), T(-0.2), T(0.3)});
          p.running_var = BasicTensor<T>({3}, {T(0.5), T(1.5), T(2.0)});
          return batchnorm(v[0], p, Mode::eval);
        },
        {in({4, 3, 2, 2}), in({3}), in({3})}, seed)));
    CHECK(tol(mixed_grad_check([](const auto& v) { return relu(v[0]); }, {in({20})}, seed)));
    CHECK(tol(mixed_grad_check([](const auto& v) { return sigmoid(v[0]); }, {in({20})}, seed)));
    CHECK(tol(mixed_grad_check([](const auto& v) { return global_avg_pool(v[0]); }, {in({2, 3, 3, 3})}, seed)));
    CHECK(tol(mixed_grad_check([](const auto& v) { return max_pool2d(v[0], 2, 2); }, {in({2, 2, 4, 4})}, seed)));
    CHECK(tol(mixed_grad_check([](const auto& v) { return fully_connected(v[0], v[1], v[2]); },
                               {in({3, 4}), in({4, 5}), in({5})}, seed)));
    const std::vector<int> labels{0, 2, 4, 1};
    CHECK(tol(mixed_grad_check(
        [&labels](const auto& v) { return softmax_cross_entropy(v[0], std::span<const int>(labels)); },
        {in({4, 5})}, seed)));
  }
}

}  // TEST_SUITE
