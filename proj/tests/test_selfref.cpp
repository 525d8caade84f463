#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "shiftq/checkpoint.hpp"
#include "shiftq/selfref.hpp"

using namespace shiftq;

namespace {

FeatureMap random_features(Rng& rng, std::size_t b, std::size_t f, FeatureSource src) {
  FeatureMap m{Tensor({b, f}), src};
  for (double& v : m.values.data()) v = rng.normal();
  return m;
}

Network tiny_classifier(Rng& rng) {
  std::vector<Layer> layers{make_dense({10}, 12), make_relu({12}), make_dense({12}, 6), make_relu({6}),
                            make_dense({6}, 2)};
  Network net(std::move(layers), 4);
  init_parameters(net, rng, 2.0);
  return net;
}

// Central differences with an absolute floor, since some entries cancel to
// an exact zero analytically while the difference quotient sees roundoff.
bool gradients_close(const std::function<double()>& loss, const std::vector<GradCheckTarget>& targets, double eps) {
  for (const auto& t : targets) {
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      const double saved = t.values[k];
      t.values[k] = saved + eps;
      const double up = loss();
      t.values[k] = saved - eps;
      const double down = loss();
      t.values[k] = saved;
      const double numeric = (up - down) / (2 * eps);
      if (std::abs(numeric - t.analytic[k]) > 1e-4 * std::max(std::abs(numeric), std::abs(t.analytic[k])) + 1e-7) {
        return false;
      }
    }
  }
  return true;
}

Batch tiny_batch(Rng& rng, std::size_t n) {
  Batch b{Tensor({n, 10}), {}};
  for (double& v : b.inputs.data()) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(2));
  return b;
}

}  // namespace

TEST_CASE("hinge vanishes exactly when every margin constraint holds") {
  Rng rng(61);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t b = 1 + rng.below(6);
    std::vector<double> lt(b), ls(b), delta(b);
    bool all_hold = true;
    for (std::size_t i = 0; i < b; ++i) {
      lt[i] = rng.uniform(0, 2);
      delta[i] = rng.uniform(0, 1);
      // Some items sit exactly on the constraint boundary.
      ls[i] = rng.below(4) == 0 ? lt[i] + delta[i] : rng.uniform(0, 3);
      all_hold = all_hold && lt[i] + delta[i] - ls[i] <= 0.0;
    }
    const auto l = discriminator_loss_from_scores(lt, ls, delta, rng.uniform(0.1, 2));
    CHECK((l.hinge_term == 0.0) == all_hold);
    CHECK(l.hinge_term >= 0.0);
  }
  CHECK_THROWS(discriminator_loss_from_scores({}, {}, {}, 1.0));
  CHECK_THROWS(discriminator_loss_from_scores({1.0}, {1.0}, {0.0}, -1.0));
}

TEST_CASE("discriminator loss decomposition") {
  const auto l = discriminator_loss_from_scores({1.0, 0.5}, {1.5, 0.2}, {0.25, 0.1}, 2.0);
  CHECK(l.teacher_term == 0.75);
  CHECK(l.hinge_term == doctest::Approx(0.2));
  CHECK(l.value == doctest::Approx(0.75 + 0.4));
}

TEST_CASE("margin and scores") {
  Rng rng(62);
  const auto ft = random_features(rng, 3, 5, FeatureSource::teacher);
  const auto d = margin_delta(ft, ft, 1.0);
  for (double v : d) CHECK(v == 0.0);
  FeatureMap shifted = ft;
  for (double& v : shifted.values.data()) v += 0.5;
  for (double v : margin_delta(ft, shifted, 2.0)) CHECK(v == doctest::Approx(1.0));
  CHECK_THROWS_AS(margin_delta(ft, random_features(rng, 3, 4, FeatureSource::student), 1.0), ShapeError);
  Discriminator disc(5, rng);
  for (double s : discriminator_score(disc, ft)) CHECK(s >= 0.0);
  CHECK(disc.hidden() == 16);
  CHECK(Discriminator::default_hidden(400) == 100);
  Discriminator zero(5);
  for (double s : discriminator_score(zero, ft)) CHECK(s == 0.0);
}

TEST_CASE("loss gradients agree with central differences") {
  Rng rng(63);
  for (int trial = 0; trial < 10; ++trial) {
    Discriminator d(7, rng, 9);
    const auto ft = random_features(rng, 4, 7, FeatureSource::teacher);
    auto fs = random_features(rng, 4, 7, FeatureSource::student);

    Gradients g;
    discriminator_loss(d, ft, fs, 1.5, 0.7, &g);
    std::vector<GradCheckTarget> targets;
    for (std::size_t i : {0u, 2u}) {
      targets.push_back({d.net().layer(i).weights.data(), g.weights[i].data()});
      targets.push_back({d.net().layer(i).bias.data(), g.biases[i].data()});
    }
    CHECK(gradients_close([&] { return discriminator_loss(d, ft, fs, 1.5, 0.7).value; }, targets, 1e-7));

    Gradients gp;
    plain_gan_discriminator_loss(d, ft, fs, &gp);
    targets.clear();
    for (std::size_t i : {0u, 2u}) targets.push_back({d.net().layer(i).weights.data(), gp.weights[i].data()});
    CHECK(gradients_close([&] { return plain_gan_discriminator_loss(d, ft, fs); }, targets, 1e-6));

    Tensor df;
    generator_loss(d, fs, &df);
    CHECK(gradients_close([&] { return generator_loss(d, fs); }, {{fs.values.data(), df.data()}}, 1e-7));
    plain_gan_generator_loss(d, fs, &df);
    CHECK(gradients_close([&] { return plain_gan_generator_loss(d, fs); }, {{fs.values.data(), df.data()}}, 1e-6));
    feature_match_loss(ft, fs, &df);
    CHECK(gradients_close([&] { return feature_match_loss(ft, fs); }, {{fs.values.data(), df.data()}}, 1e-6));
  }
}

TEST_CASE("total loss mixing") {
  Rng rng(64);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.normal() * 10, b = rng.normal() * 10;
    CHECK(total_loss(a, b, 0.0) == a);
    CHECK(total_loss(a, b, 1.0) == b);
    CHECK(total_loss(a, b, 0.25) == doctest::Approx(0.75 * a + 0.25 * b));
  }
  CHECK_THROWS(total_loss(1, 1, -0.1));
  CHECK_THROWS(total_loss(1, 1, 1.1));
  CHECK_THROWS(total_loss(1, 1, std::nan("")));
}

TEST_CASE("gan config validation") {
  GanConfig g;
  CHECK_NOTHROW(g.validate());
  g.beta = 1.5;
  CHECK_THROWS(g.validate());
  g = GanConfig{};
  g.d_steps = 0;
  CHECK_THROWS(g.validate());
}

TEST_CASE("training steps never touch the teacher") {
  Rng rng(65);
  const Network teacher = tiny_classifier(rng);
  const std::string before = network_to_json(teacher).dump();
  StudentQuantOptions opt;
  opt.dof = 3.0;
  QuantizedStudent student(tiny_classifier(rng), opt);
  Discriminator d(6, rng);
  auto states = make_spectral_states(student.latent());
  TrainStepConfig cfg;
  cfg.lambda_sn = 0.01;
  cfg.structural = {true, true, true};
  for (int step = 0; step < 100; ++step) {
    const StepMetrics m = selfref_train_step(teacher, student, d, tiny_batch(rng, 8), cfg, states);
    CHECK(!m.aborted);
  }
  CHECK(network_to_json(teacher).dump() == before);
}

TEST_CASE("beta zero ignores the structural gradient") {
  Rng rng(66);
  const Network teacher = tiny_classifier(rng);
  StudentQuantOptions opt;
  opt.dof = 3.0;
  const Network init = tiny_classifier(rng);
  const Batch b = tiny_batch(rng, 8);
  QuantizedStudent plain(init, opt), mixed(init, opt);
  auto s1 = make_spectral_states(init), s2 = make_spectral_states(init);
  Rng r1(9), r2(9);
  Discriminator d(6, r1);
  ste_train_step(plain, b, 0.05, 0.02, s1);
  TrainStepConfig cfg;
  cfg.lr = 0.05;
  cfg.lambda_sn = 0.02;
  cfg.structural = {true, false, false};
  cfg.gan.beta = 0.0;
  const StepMetrics m = selfref_train_step(teacher, mixed, d, b, cfg, s2);
  CHECK(m.structural > 0.0);
  for (std::size_t i = 0; i < init.size(); ++i) {
    CHECK(bitwise_equal(plain.latent().layer(i).weights, mixed.latent().layer(i).weights));
  }
}

TEST_CASE("non-finite structural loss aborts before any update") {
  Rng rng(67);
  Network teacher = tiny_classifier(rng);
  for (double& v : teacher.layer(2).bias.data()) v = std::numeric_limits<double>::infinity();
  StudentQuantOptions opt;
  opt.dof = 3.0;
  QuantizedStudent student(tiny_classifier(rng), opt);
  const std::string before = network_to_json(student.latent()).dump();
  Discriminator d(6, rng);
  auto states = make_spectral_states(student.latent());
  TrainStepConfig cfg;
  cfg.structural = {true, false, false};
  const StepMetrics m = selfref_train_step(teacher, student, d, tiny_batch(rng, 4), cfg, states);
  CHECK(m.aborted);
  CHECK(!m.error.empty());
  CHECK(network_to_json(student.latent()).dump() == before);
}
