#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "shiftq/quant.hpp"
#include "shiftq/rng.hpp"
#include "shiftq/student.hpp"
#include "shiftq/tdist.hpp"

using namespace shiftq;

namespace {

// Exhaustive minimum of sum (w_i - level)^2 over all 4^n code assignments.
double brute_force_error(const Tensor& w, const QuantDictionary& d) {
  const auto lv = d.levels();
  const std::size_t n = w.size();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= 4;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t code = 0; code < total; ++code) {
    double err = 0.0;
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i, c /= 4) err += (w[i] - lv[c % 4]) * (w[i] - lv[c % 4]);
    best = std::min(best, err);
  }
  return best;
}

}  // namespace

TEST_CASE("feasible grid") {
  std::set<int> s;
  for (int a = -3; a <= -1; ++a)
    for (int b = -3; b <= a; ++b) {
      const double q = std::ldexp(1.0, a) + std::ldexp(1.0, b);
      if (q < 1.0) s.insert(static_cast<int>(q * 8));
    }
  const auto grid = feasible_levels();
  REQUIRE(grid.size() == s.size());
  std::size_t i = 0;
  for (int v : s) {
    CHECK(grid[i].s == v);
    CHECK(std::ldexp(1.0, grid[i].shifts.a) + std::ldexp(1.0, grid[i].shifts.b) == v / 8.0);
    CHECK(grid[i].shifts.a >= grid[i].shifts.b);
    ++i;
  }
  CHECK_THROWS(make_dictionary(7, 3.0));
  CHECK_THROWS(make_dictionary(1, 3.0));
}

TEST_CASE("dictionary snapping") {
  auto oracle = [](double n) {
    const double x = std::sqrt(n / (n + 2));
    int best = 0;
    for (int s : {2, 3, 4, 5, 6}) {
      if (best == 0 || std::abs(x - s / 8.0) <= std::abs(x - best / 8.0)) best = s;
    }
    return best;
  };
  for (double n : {0.2, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 12.0, 40.0, 100.0}) {
    CHECK(build_dictionary(n).s == oracle(n));
    CHECK(build_dictionary(n).n == n);
  }
  CHECK(build_dictionary(1.0).q() == 0.625);
  CHECK(build_dictionary(3.0).q() == 0.75);
  CHECK(build_dictionary(12.0).q() == 0.75);
  CHECK(build_dictionary(3.0).shifts == ShiftPair{-1, -2});
  CHECK(build_dictionary(1.0).shifts == ShiftPair{-1, -3});
}

TEST_CASE("levels and codes") {
  const auto d = build_dictionary(3.0);
  CHECK(d.levels() == std::array<double, 4>{-1, -0.75, 0.75, 1});
  for (Code c : kAllCodes) {
    CHECK(d.code_for_level(d.level(c)) == c);
    if (c != Code::neg_one) CHECK(d.code_for_activation(d.activation_level(c)) == c);
  }
  CHECK(d.activation_level(Code::neg_q) == 0.0);
  CHECK_THROWS(d.code_for_level(0.5));
  CHECK(static_cast<int>(Code::neg_q) == 0b01);
  CHECK(static_cast<int>(Code::pos_q) == 0b10);
}

TEST_CASE("nearest-level quantization with ties toward the positive side") {
  const auto d = build_dictionary(3.0);
  CHECK(quantize_value(0.875, d, 0.0) == Code::pos_one);
  CHECK(quantize_value(0.874, d, 0.0) == Code::pos_q);
  CHECK(quantize_value(-0.875, d, 0.0) == Code::neg_q);
  CHECK(quantize_value(-0.876, d, 0.0) == Code::neg_one);
  CHECK(quantize_value(0.0, d, 0.0) == Code::pos_q);
  CHECK(quantize_value(-1e-9, d, 0.0) == Code::neg_q);
  CHECK(quantize_value(5.0, d, 0.0) == Code::pos_one);
  CHECK(quantize_value(-5.0, d, 0.0) == Code::neg_one);
  CHECK(quantize_value(-0.1, d, 0.2) == Code::pos_q);
}

TEST_CASE("plain quantizer reaches the exhaustive minimum") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    Tensor w({n});
    for (double& v : w.data()) v = rng.uniform(-1.6, 1.6);
    for (double dof : {1.0, 3.0, 12.0}) {
      const auto d = build_dictionary(dof);
      CHECK(entropy_objective(w, d, 0.0) == doctest::Approx(brute_force_error(w, d)).epsilon(1e-12));
    }
  }
}

TEST_CASE("entropy objective subtracts the scaled sign entropy") {
  const auto d = build_dictionary(3.0);
  const Tensor w({4}, std::vector<double>{0.7, -0.8, 0.9, -0.1});
  CHECK(entropy_objective(w, d, 2.0) == doctest::Approx(entropy_objective(w, d, 0.0) - 2.0 * std::log(2.0)));
}

TEST_CASE("binary entropy") {
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  CHECK(binary_entropy(0.5) == doctest::Approx(std::log(2.0)));
  const std::vector<Code> c{Code::pos_q, Code::neg_one, Code::pos_one, Code::pos_q};
  CHECK(sign_balance(c).p == 0.75);
  CHECK_THROWS(sign_balance(std::vector<Code>{}));
}

TEST_CASE("balance bias evens out skewed tensors") {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w({1001});
    const double skew = rng.uniform(-0.5, 0.5);
    for (double& v : w.data()) v = rng.normal() + skew;
    const auto st = standardize_weights(w);
    const auto d = build_dictionary(3.0);
    const double bias = select_balance_bias(st.values);
    const auto qt = quantize_tensor(st.values, d, bias);
    CHECK(std::abs(sign_balance(qt.codes).p - 0.5) <= 0.5 / 1001 + 1e-12);
  }
  const Tensor sym({4}, std::vector<double>{-2, -1, 1, 2});
  CHECK(select_balance_bias(sym) == 0.0);
}

TEST_CASE("activation quantization") {
  const auto d = build_dictionary(3.0);
  CHECK(quantize_activation(-1.0, d) == 0.0);
  CHECK(quantize_activation(0.374, d) == 0.0);
  CHECK(quantize_activation(0.375, d) == 0.75);
  CHECK(quantize_activation(0.874, d) == 0.75);
  CHECK(quantize_activation(0.875, d) == 1.0);
  CHECK(quantize_activation(9.0, d) == 1.0);
}

TEST_CASE("cutoff schedule") {
  const CutoffSchedule s{3.0, 10, 0.75};
  CHECK(cutoff_schedule_value(0, s) == 3.0);
  CHECK(cutoff_schedule_value(5, s) == 2.0);
  CHECK(cutoff_schedule_value(10, s) == 1.0);
  CHECK(cutoff_schedule_value(15, s) == 0.875);
  CHECK(cutoff_schedule_value(20, s) == 0.75);
  CHECK(cutoff_schedule_value(1000, s) == 0.75);
  double prev = 10.0;
  for (std::size_t k = 0; k < 40; ++k) {
    const double v = cutoff_schedule_value(k, s);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS(cutoff_schedule_value(0, CutoffSchedule{0.5, 10, 0.75}));
  CHECK_THROWS(cutoff_schedule_value(0, CutoffSchedule{3.0, 0, 0.75}));
}

TEST_CASE("straight-through window is inclusive at the cutoff") {
  const Tensor up({5}, std::vector<double>{1, 2, 3, 4, 5});
  const Tensor lat({5}, std::vector<double>{-0.75, 0.75, std::nextafter(0.75, 1.0), -0.76, 0.0});
  const Tensor g = ste_backward(up, lat, 0.75);
  CHECK(g.values() == std::vector<double>{1, 2, 0, 0, 5});
  CHECK_THROWS(ste_backward(up, Tensor({4}), 0.75));
}

TEST_CASE("uniform baseline quantizer") {
  CHECK(uniform_quantize(0.4, 2) == 0.0);
  CHECK(uniform_quantize(0.6, 2) == 1.0);
  CHECK(uniform_quantize(0.5, 3) == doctest::Approx(2.0 / 3.0));
  CHECK(uniform_quantize(-7.0, 4) == -1.0);
  CHECK_THROWS(uniform_quantize(0.0, 1));
}

TEST_CASE("student effective weights are scaled levels") {
  Rng rng(33);
  std::vector<Layer> layers{make_dense({16}, 12), make_relu({12}), make_dense({12}, 3)};
  Network net(std::move(layers), 2);
  init_parameters(net, rng);
  StudentQuantOptions opt;
  opt.dof = 3.0;
  QuantizedStudent st(net, opt);
  CHECK(st.layer_dofs() == std::vector<double>{3.0, 3.0});
  CHECK(st.activation_dict().q() == 0.75);
  for (std::size_t i : {0u, 2u}) {
    const auto& s = *st.layer_state(i);
    for (std::size_t k = 0; k < s.codes.size(); ++k) {
      CHECK(st.effective_weights()[i][k] == s.stats.std * s.dict.level(s.codes[k]));
    }
  }
  opt.layer_dof = {1.0, 12.0};
  QuantizedStudent mixed(net, opt);
  CHECK(mixed.layer_state(0)->dict.q() == 0.625);
  CHECK(mixed.layer_state(2)->dict.q() == 0.75);
  opt.layer_dof = {1.0};
  CHECK_THROWS(QuantizedStudent(net, opt));
}

TEST_CASE("student surrogate gradient matches finite differences") {
  Rng rng(34);
  std::vector<Layer> layers{make_dense({6}, 5), make_relu({5}), make_dense({5}, 3)};
  Network net(std::move(layers), 2);
  init_parameters(net, rng, 2.0);
  StudentQuantOptions opt;
  opt.dof = 3.0;
  opt.quantize_activations = false;
  QuantizedStudent st(net, opt);
  st.set_cutoff(2.5);
  Batch b{Tensor({4, 6}), {0, 1, 2, 1}};
  for (double& v : b.inputs.data()) v = rng.uniform();
  ForwardCache cache;
  const auto fr = st.forward(b.inputs, &cache, StudentMode::surrogate);
  Tensor dl;
  cross_entropy(fr.logits, b.labels, &dl);
  const Gradients g = st.backward(cache, dl);
  // Standardization statistics are frozen at their current values.
  auto loss = [&] { return cross_entropy(st.forward(b.inputs, nullptr, StudentMode::surrogate).logits, b.labels); };
  std::vector<GradCheckTarget> targets;
  for (std::size_t i : {0u, 2u}) {
    targets.push_back({st.latent().layer(i).weights.data(), g.weights[i].data()});
    targets.push_back({st.latent().layer(i).bias.data(), g.biases[i].data()});
  }
  CHECK(grad_check(loss, targets, 1e-6) <= 1e-4);
}
