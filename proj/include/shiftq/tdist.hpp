#pragma once

#include "shiftq/tensor.hpp"

namespace shiftq {

struct WeightStats {
  double mean = 0.0;
  double std = 1.0;  // (N-1)-divisor sample standard deviation
  double excess_kurtosis = 0.0;
  double dof = 100.0;
};

inline constexpr double kDefaultMaxDof = 100.0;

// Student-t density with n degrees of freedom, evaluated through lgamma.
// Throws std::domain_error for n <= 0. n = +inf gives the standard normal.
double t_pdf(double x, double n);

struct Standardized {
  Tensor values;
  WeightStats stats;
};

// (w - mean) / std. Requires at least two elements and nonzero variance.
Standardized standardize_weights(const Tensor& w, double max_dof = kDefaultMaxDof);

// Population excess kurtosis m4 / m2^2 - 3.
double excess_kurtosis(const Tensor& x);

// Moment matching: a t variate with n > 4 has excess kurtosis 6 / (n - 4).
double dof_from_kurtosis(double excess_kurtosis, double max_dof = kDefaultMaxDof);
double estimate_dof(const Tensor& standardized, double max_dof = kDefaultMaxDof);

// Roots of the density's second derivative, x = +-sqrt(n / (n + 2)), and the
// density at those points.
struct InflectionPoints {
  double x1;
  double x2;
  double y;
};
InflectionPoints inflection_points(double n);

}  // namespace shiftq
