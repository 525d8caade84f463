#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "shiftq/robustness.hpp"
#include "shiftq/student.hpp"

using namespace shiftq;

namespace {

double svd_oracle(const Tensor& w) {
  const std::size_t m = matrix_rows(w), n = matrix_cols(w);
  Eigen::MatrixXd a(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = w[i * n + j];
  return Eigen::JacobiSVD<Eigen::MatrixXd>(a).singularValues()(0);
}

Tensor random_matrix(Rng& rng, std::size_t m, std::size_t n) {
  Tensor t({m, n});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("power iteration converges to the largest singular value") {
  Rng rng(51);
  for (int trial = 0; trial < 40; ++trial) {
    const Tensor w = random_matrix(rng, 1 + rng.below(64), 1 + rng.below(64));
    SpectralState st;
    st.iters = 20000;
    st.tolerance = 1e-13;
    CHECK(spectral_norm(w, st).sigma == doctest::Approx(svd_oracle(w)).epsilon(1e-9));
  }
}

TEST_CASE("conv kernels are flattened per output channel") {
  Rng rng(52);
  Tensor w({3, 2, 3, 3});
  for (double& v : w.data()) v = rng.normal();
  CHECK(matrix_rows(w) == 3);
  CHECK(matrix_cols(w) == 18);
  SpectralState st{{}, 5000, 1e-13};
  CHECK(spectral_norm(w, st).sigma == doctest::Approx(svd_oracle(w)).epsilon(1e-9));
  CHECK_THROWS_AS(matrix_rows(Tensor({3})), ShapeError);
}

TEST_CASE("warm start keeps improving one iteration at a time") {
  Rng rng(53);
  const Tensor w = random_matrix(rng, 20, 30);
  const double truth = svd_oracle(w);
  SpectralState st;
  double last_err = std::numeric_limits<double>::infinity();
  for (int call = 0; call < 300; ++call) {
    const double err = truth - spectral_norm(w, st).sigma;
    CHECK(err >= -1e-9);
    CHECK(err <= last_err + 1e-9);
    last_err = err;
  }
  CHECK(last_err < 1e-6 * truth);
}

TEST_CASE("zero and rank-one matrices") {
  SpectralState st;
  CHECK(spectral_norm(Tensor({4, 5}), st).sigma == 0.0);
  Tensor r({3, 2}, std::vector<double>{1, 2, 2, 4, 3, 6});
  SpectralState st2;
  CHECK(spectral_norm(r, st2).sigma == doctest::Approx(std::sqrt(14.0 * 5.0)));
}

TEST_CASE("penalty gradient matches finite differences of the exact norm") {
  Rng rng(54);
  Tensor w = random_matrix(rng, 6, 5);
  std::vector<SpectralState> states(1);
  states[0].iters = 5000;
  states[0].tolerance = 1e-14;
  const double lambda = 0.3;
  const NsLoss l = ns_perturbation_loss(1.25, {&w}, lambda, states);
  const double s = svd_oracle(w);
  CHECK(l.penalty == doctest::Approx(s * s).epsilon(1e-10));
  CHECK(l.value == doctest::Approx(1.25 + lambda * s * s).epsilon(1e-12));
  auto loss = [&] {
    const double sv = svd_oracle(w);
    return lambda * sv * sv;
  };
  CHECK(grad_check(loss, {{w.data(), l.grads[0].data()}}, 1e-6) <= 1e-5);
}

TEST_CASE("lambda zero returns the task loss untouched") {
  Rng rng(55);
  const Tensor w = random_matrix(rng, 4, 4);
  std::vector<SpectralState> states(1);
  for (double task : {0.6931471805599453, 1e-300, 123.456}) {
    const NsLoss l = ns_perturbation_loss(task, {&w}, 0.0, states);
    CHECK(l.value == task);
    CHECK(l.penalty == 0.0);
  }
  CHECK_THROWS(ns_perturbation_loss(std::nan(""), {&w}, 0.1, states));
  CHECK_THROWS(ns_perturbation_loss(1.0, {&w}, -0.1, states));
  std::vector<SpectralState> none;
  CHECK_THROWS(ns_perturbation_loss(1.0, {&w}, 0.1, none));
}

TEST_CASE("fgsm contract") {
  Rng rng(56);
  std::vector<Layer> layers{make_dense({1, 4, 4}, 8), make_relu({8}), make_dense({8}, 3)};
  Network net(std::move(layers), 2);
  init_parameters(net, rng);
  Batch b{Tensor({10, 1, 4, 4}), {}};
  for (double& v : b.inputs.data()) v = rng.below(4) == 0 ? static_cast<double>(rng.below(2)) : rng.uniform();
  for (int i = 0; i < 10; ++i) b.labels.push_back(rng.below(3));
  CHECK(fgsm_attack(net, b, {0.0, 0.0, 1.0}) == b.inputs);
  for (double eps : {1.0 / 255, 4.0 / 255, 0.1, 0.5}) {
    const Tensor adv = fgsm_attack(net, b, {eps, 0.0, 1.0});
    for (std::size_t i = 0; i < adv.size(); ++i) {
      CHECK(std::abs(adv[i] - b.inputs[i]) <= eps + 1e-15);
      CHECK(adv[i] >= 0.0);
      CHECK(adv[i] <= 1.0);
    }
  }
  // Direction follows the gradient sign.
  const Tensor sign_probe = fgsm_attack([](const Batch& bb) { return Tensor(bb.inputs.shape(), -1.0); }, b,
                                        {0.1, 0.0, 1.0});
  for (std::size_t i = 0; i < b.inputs.size(); ++i) CHECK(sign_probe[i] == std::max(0.0, b.inputs[i] - 0.1));
  CHECK_THROWS(fgsm_attack(net, b, {-0.1, 0.0, 1.0}));
  CHECK_THROWS(fgsm_attack(net, b, {0.1, 1.0, 0.0}));
  Batch out = b;
  out.inputs[0] = 1.5;
  CHECK_THROWS(fgsm_attack(net, out, {0.1, 0.0, 1.0}));
}

TEST_CASE("student attack stays inside the budget") {
  Rng rng(57);
  std::vector<Layer> layers{make_dense({12}, 8), make_relu({8}), make_dense({8}, 2)};
  Network net(std::move(layers), 2);
  init_parameters(net, rng, 2.0);
  StudentQuantOptions opt;
  opt.dof = 3.0;
  QuantizedStudent st(net, opt);
  Batch b{Tensor({6, 12}), {0, 1, 0, 1, 1, 0}};
  for (double& v : b.inputs.data()) v = rng.uniform();
  CHECK(fgsm_attack(st, b, {0.0, 0.0, 1.0}) == b.inputs);
  const Tensor adv = fgsm_attack(st, b, {8.0 / 255, 0.0, 1.0});
  for (std::size_t i = 0; i < adv.size(); ++i) CHECK(std::abs(adv[i] - b.inputs[i]) <= 8.0 / 255 + 1e-15);
}
