#include <doctest.h>

#include <cmath>

#include "gaternet/errors.hpp"
#include "gaternet/grad_check.hpp"
#include "gaternet/semhash.hpp"
#include "support.hpp"

using namespace gaternet;
using namespace gaternet::testing;

TEST_SUITE("semhash") {

TEST_CASE("saturating sigmoid values") {
  CHECK(saturating_sigmoid_value(0.0) == doctest::Approx(0.5).epsilon(1e-12));
  // 1.2 s - 0.1 reaches 1 where s = 11/12, i.e. x = ln 11.
  const double sat = std::log(11.0);
  CHECK(saturating_sigmoid_value(sat + 1e-9) == 1.0);
  CHECK(saturating_sigmoid_value(sat - 1e-3) < 1.0);
  CHECK(saturating_sigmoid_value(-sat - 1e-9) == 0.0);
  CHECK(saturating_sigmoid_value(-sat + 1e-3) > 0.0);
  CHECK(saturating_sigmoid_value(2.197) < 1.0);
  CHECK(saturating_sigmoid_value(10.0) == 1.0);
  CHECK(saturating_sigmoid_value(-10.0) == 0.0);
  for (double x : {0.1, 0.7, 1.3, 2.0, 2.3}) {
    CHECK(saturating_sigmoid_value(x) + saturating_sigmoid_value(-x) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Tensor t({3}, {0.0f, 5.0f, -5.0f});
  CHECK(to_vec(saturating_sigmoid(t)) == std::vector<float>{0.5f, 1.0f, 0.0f});
}

TEST_CASE("saturating sigmoid slope") {
  CHECK(saturating_sigmoid_slope(0.0) == doctest::Approx(0.3));
  CHECK(saturating_sigmoid_slope(3.0) == 0.0);
  CHECK(saturating_sigmoid_slope(-3.0) == 0.0);
  const double h = 1e-6;
  for (double x : {-2.0, -0.4, 0.0, 0.8, 1.9}) {
    const double fd = (saturating_sigmoid_value(x + h) - saturating_sigmoid_value(x - h)) / (2 * h);
    CHECK(saturating_sigmoid_slope(x) == doctest::Approx(fd).epsilon(1e-6));
  }
  const auto r = grad_check<double>([](const Tensor64& v) { return saturating_sigmoid(v); },
                                    Tensor64({6}, {-2.2, -1.0, -0.1, 0.3, 1.4, 2.2}));
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("eval mode is deterministic and binary") {
  Rng rng(0);
  const Tensor g({1, 3}, {0.3f, -0.2f, 0.0f});
  const auto b = semhash_forward(g, Mode::eval, rng);
  CHECK(to_vec(b.selected) == std::vector<float>{1, 0, 0});
  CHECK(b.branch == std::vector<GateBranch>{GateBranch::beta});
  CHECK_FALSE(b.selected.requires_grad());
  Rng other(99);
  CHECK(bit_equal(semhash_forward(g, Mode::eval, other).selected, b.selected));
}

TEST_CASE("training picks each branch about half the time") {
  Rng rng(17);
  const Tensor g({10000, 1}, 0.0f);
  const auto b = semhash_forward(g, Mode::train, rng);
  std::size_t alpha = 0;
  for (auto br : b.branch) alpha += br == GateBranch::alpha;
  const double frac = double(alpha) / 10000.0;
  CHECK(std::abs(frac - 0.5) < 0.02);
  for (std::size_t i = 0; i < 10000; ++i) {
    const float s = b.selected.data()[i];
    if (b.branch[i] == GateBranch::beta) CHECK((s == 0.0f || s == 1.0f));
    else CHECK(s == b.g_alpha.data()[i]);
  }
}

TEST_CASE("large pre-activations saturate both branches") {
  Rng rng(3);
  std::vector<float> v(200);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? 40.0f : -40.0f;
  const auto b = semhash_forward(Tensor({100, 2}, v), Mode::train, rng);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float want = i % 2 ? 1.0f : 0.0f;
    CHECK(b.g_alpha.data()[i] == want);
    CHECK(b.g_beta.data()[i] == want);
    CHECK(b.selected.data()[i] == want);
  }
}

TEST_CASE("backward uses the relaxed slope for both branches") {
  Rng rng(5);
  const Tensor g = random_tensor({6, 4}, rng, -2, 2, true);
  Rng r1(8), r2(8);
  const auto a = semhash_forward(g, Mode::train, r1, BranchPolicy::force_alpha);
  const auto b = semhash_forward(g, Mode::train, r2, BranchPolicy::force_beta);
  CHECK(bit_equal(a.g_noisy, b.g_noisy));
  const Tensor up = random_tensor({6, 4}, rng);
  CHECK(bit_equal(semhash_backward(up, a), semhash_backward(up, b)));

  // Autograd through `selected` agrees with the explicit backward.
  Tensor gg = g;
  gg.zero_grad();
  backward(sum(mul(b.selected, up)));
  const Tensor expect = semhash_backward(up, b);
  for (std::size_t i = 0; i < g.numel(); ++i) CHECK(gg.grad()[i] == expect.data()[i]);

  // Alpha-branch gradient matches finite differences of the relaxation at
  // fixed noise.
  std::vector<double> noise(24);
  for (std::size_t i = 0; i < 24; ++i) noise[i] = double(a.g_noisy.data()[i]) - double(g.data()[i]);
  const Tensor64 noise64({6, 4}, noise);
  const auto r = grad_check<double>(
      [&](const Tensor64& x) { return saturating_sigmoid(add(x, noise64)); }, g.cast<double>());
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("backward is zero where the relaxation is clipped") {
  Rng rng(1);
  const Tensor g({1, 2}, {30.0f, -30.0f}, true);
  const auto b = semhash_forward(g, Mode::train, rng, BranchPolicy::force_beta);
  const Tensor up({1, 2}, {1.0f, 1.0f});
  CHECK(to_vec(semhash_backward(up, b)) == std::vector<float>{0, 0});
}

TEST_CASE("backward rejects eval bundles and shape mismatches") {
  Rng rng(1);
  const Tensor g({2, 3}, 0.5f);
  const auto ev = semhash_forward(g, Mode::eval, rng);
  CHECK_THROWS_AS(semhash_backward(Tensor({2, 3}, 1.0f), ev), std::logic_error);
  const auto tr = semhash_forward(g, Mode::train, rng);
  CHECK_THROWS_AS(semhash_backward(Tensor({3, 2}, 1.0f), tr), ShapeError);
  CHECK_THROWS_AS(semhash_forward(Tensor({6}, 0.0f), Mode::eval, rng), ShapeError);
}

TEST_CASE("gate dropout") {
  Rng rng(4);
  const Tensor ones({200, 500}, 1.0f);
  CHECK(bit_equal(gate_dropout(ones, 0.0, rng), ones));

  const Tensor d = gate_dropout(ones, 0.05, rng);
  double kept = 0;
  for (float v : d.data()) {
    CHECK((v == 0.0f || v == 1.0f));
    kept += v;
  }
  CHECK(std::abs(kept / double(ones.numel()) - 0.95) < 0.005);

  CHECK_THROWS_AS(gate_dropout(ones, 1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(gate_dropout(ones, -0.1, rng), std::invalid_argument);
}

TEST_CASE("dropout schedule") {
  GateDropoutSchedule s;
  s.start_rate = 0.0;
  s.end_rate = 0.05;
  s.total_steps = 1000;
  CHECK(dropout_rate_at(s, 0) == 0.0);
  CHECK(dropout_rate_at(s, 500) == doctest::Approx(0.025));
  CHECK(dropout_rate_at(s, 1000) == doctest::Approx(0.05));
  CHECK(dropout_rate_at(s, 5000) == doctest::Approx(0.05));
  s.start_rate = 0.1;
  CHECK_THROWS_AS(dropout_rate_at(s, 0), std::invalid_argument);
  s.start_rate = 0.0;
  s.total_steps = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

}  // TEST_SUITE
