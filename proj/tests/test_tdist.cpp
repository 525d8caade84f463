#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/tools/roots.hpp>
#include <cmath>
#include <limits>

#include "shiftq/rng.hpp"
#include "shiftq/tdist.hpp"

using namespace shiftq;

namespace {

// Second derivative of the Boost density by Richardson-extrapolated central
// differences in long double.
long double boost_pdf2(long double x, double n) {
  const boost::math::students_t_distribution<long double> dist(n);
  auto c2 = [&](long double h) {
    return (boost::math::pdf(dist, x + h) - 2 * boost::math::pdf(dist, x) + boost::math::pdf(dist, x - h)) / (h * h);
  };
  const long double h = 1e-3L;
  return (4 * c2(h / 2) - c2(h)) / 3;
}

double numeric_inflection(double n) {
  auto f = [n](double x) { return static_cast<double>(boost_pdf2(x, n)); };
  boost::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(f, 0.3, 0.999, boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (r.first + r.second);
}

}  // namespace

TEST_CASE("t density agrees with Boost") {
  for (double n : {0.5, 1.0, 2.0, 3.0, 7.5, 12.0, 30.0, 100.0}) {
    const boost::math::students_t_distribution<double> dist(n);
    for (double x = -8.0; x <= 8.0; x += 0.37) {
      CHECK(t_pdf(x, n) == doctest::Approx(boost::math::pdf(dist, x)).epsilon(1e-12));
    }
  }
}

TEST_CASE("t density limits and domain") {
  CHECK(t_pdf(0.0, 1.0) == doctest::Approx(1.0 / M_PI).epsilon(1e-15));
  CHECK(t_pdf(0.4, std::numeric_limits<double>::infinity()) ==
        doctest::Approx(std::exp(-0.08) / std::sqrt(2 * M_PI)).epsilon(1e-15));
  CHECK(std::abs(t_pdf(1.3, 1e7) - t_pdf(1.3, std::numeric_limits<double>::infinity())) < 1e-6);
  CHECK_THROWS_AS(t_pdf(0.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(t_pdf(0.0, -2.0), std::domain_error);
  CHECK_THROWS_AS(t_pdf(0.0, std::nan("")), std::domain_error);
}

TEST_CASE("t density is symmetric and integrates to the analytic mass") {
  for (double n : {1.0, 3.0, 12.0}) {
    const boost::math::students_t_distribution<double> dist(n);
    const double expected = boost::math::cdf(dist, 50.0) - boost::math::cdf(dist, -50.0);
    const int steps = 200000;
    const double h = 100.0 / steps;
    double sum = t_pdf(-50.0, n) + t_pdf(50.0, n);
    for (int i = 1; i < steps; ++i) sum += (i % 2 ? 4.0 : 2.0) * t_pdf(-50.0 + i * h, n);
    CHECK(sum * h / 3.0 == doctest::Approx(expected).epsilon(1e-6));
    CHECK(t_pdf(1.7, n) == t_pdf(-1.7, n));
  }
}

TEST_CASE("inflection points are roots of the numeric second derivative") {
  for (double n : {1.0, 2.0, 3.0, 5.0, 12.0, 50.0}) {
    const auto ip = inflection_points(n);
    CHECK(std::abs(ip.x2 - numeric_inflection(n)) < 1e-9);
    CHECK(ip.x1 == -ip.x2);
    CHECK(ip.y == t_pdf(ip.x2, n));
  }
  CHECK(inflection_points(std::numeric_limits<double>::infinity()).x2 == 1.0);
  CHECK_THROWS(inflection_points(0.0));
}

TEST_CASE("dof from kurtosis") {
  CHECK(dof_from_kurtosis(1.0) == 10.0);
  CHECK(dof_from_kurtosis(6.0) == 5.0);
  CHECK(dof_from_kurtosis(0.04) == kDefaultMaxDof);
  CHECK(dof_from_kurtosis(-1.0) == kDefaultMaxDof);
  CHECK(dof_from_kurtosis(0.06) == kDefaultMaxDof);
  CHECK(dof_from_kurtosis(0.5, 8.0) == 8.0);
  CHECK(dof_from_kurtosis(1000.0) == doctest::Approx(4.006));
}

TEST_CASE("kurtosis estimate recovers heavy tails") {
  Rng rng(21);
  const boost::math::students_t_distribution<double> dist(8.0);
  Tensor t({200000});
  for (double& v : t.data()) v = boost::math::quantile(dist, 1e-12 + (1 - 2e-12) * rng.uniform());
  // 6 / (8 - 4) = 1.5
  CHECK(excess_kurtosis(t) == doctest::Approx(1.5).epsilon(0.15));
  const auto st = standardize_weights(t);
  CHECK(st.stats.dof == doctest::Approx(8.0).epsilon(0.1));
  Tensor g({200000});
  for (double& v : g.data()) v = rng.normal();
  CHECK(standardize_weights(g).stats.dof == kDefaultMaxDof);
}

TEST_CASE("standardization") {
  const Tensor w({4}, std::vector<double>{1, 2, 3, 4});
  const auto st = standardize_weights(w);
  CHECK(st.stats.mean == 2.5);
  CHECK(st.stats.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(st.stats.dof == kDefaultMaxDof);
  double s = 0;
  for (double v : st.values.data()) s += v;
  CHECK(std::abs(s) < 1e-12);
  CHECK_THROWS(standardize_weights(Tensor({3}, 2.0)));
  CHECK_THROWS(standardize_weights(Tensor({1}, 2.0)));
  CHECK_THROWS(estimate_dof(Tensor({99}, 1.0)));
}
