#include "shiftq/tdist.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace shiftq {

double t_pdf(double x, double n) {
  if (!(n > 0.0)) throw std::domain_error("t_pdf: degrees of freedom must be positive");
  if (std::isinf(n)) return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  const double log_norm =
      std::lgamma(0.5 * (n + 1.0)) - std::lgamma(0.5 * n) - 0.5 * std::log(n * std::numbers::pi);
  return std::exp(log_norm - 0.5 * (n + 1.0) * std::log1p(x * x / n));
}

double excess_kurtosis(const Tensor& x) {
  const auto d = x.data();
  const double n = static_cast<double>(d.size());
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double v : d) {
    const double c = (v - mean) * (v - mean);
    m2 += c;
    m4 += c * c;
  }
  m2 /= n;
  m4 /= n;
  if (m2 == 0.0) throw std::domain_error("excess_kurtosis: zero variance");
  return m4 / (m2 * m2) - 3.0;
}

double dof_from_kurtosis(double kurt, double max_dof) {
  if (!(kurt > 0.05)) return max_dof;
  return std::clamp(4.0 + 6.0 / kurt, 1.0, max_dof);
}

double estimate_dof(const Tensor& standardized, double max_dof) {
  if (standardized.size() < 100) throw std::invalid_argument("estimate_dof: needs at least 100 samples");
  return dof_from_kurtosis(excess_kurtosis(standardized), max_dof);
}

Standardized standardize_weights(const Tensor& w, double max_dof) {
  if (w.size() < 2) throw std::invalid_argument("standardize_weights: needs at least two elements");
  const auto d = w.data();
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double std = std::sqrt(ss / static_cast<double>(d.size() - 1));
  if (!(std > 0.0)) throw std::domain_error("standardize_weights: constant tensor has zero variance");

  Standardized out{Tensor(w.shape()), {}};
  auto o = out.values.data();
  for (std::size_t i = 0; i < d.size(); ++i) o[i] = (d[i] - mean) / std;
  out.stats.mean = mean;
  out.stats.std = std;
  out.stats.excess_kurtosis = excess_kurtosis(out.values);
  out.stats.dof = d.size() >= 100 ? estimate_dof(out.values, max_dof) : max_dof;
  return out;
}

InflectionPoints inflection_points(double n) {
  if (!(n > 0.0)) throw std::domain_error("inflection_points: degrees of freedom must be positive");
  const double x2 = std::isinf(n) ? 1.0 : std::sqrt(n / (n + 2.0));
  return {-x2, x2, t_pdf(x2, n)};
}

}  // namespace shiftq
