#include "shiftq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "shiftq/tdist.hpp"

namespace shiftq {

double QuantDictionary::level(Code c) const {
  switch (c) {
    case Code::neg_one: return -1.0;
    case Code::neg_q: return -q();
    case Code::pos_q: return q();
    case Code::pos_one: return 1.0;
  }
  return 0.0;
}

double QuantDictionary::activation_level(Code c) const {
  return c == Code::neg_q ? 0.0 : level(c);
}

Code QuantDictionary::code_for_level(double value) const {
  for (Code c : kAllCodes) {
    if (level(c) == value) return c;
  }
  throw std::invalid_argument("value " + std::to_string(value) + " is not a dictionary level");
}

Code QuantDictionary::code_for_activation(double value) const {
  if (value == 0.0) return Code::neg_q;
  if (value == q()) return Code::pos_q;
  if (value == 1.0) return Code::pos_one;
  throw std::invalid_argument("value " + std::to_string(value) + " is not an activation level");
}

std::vector<FeasibleLevel> feasible_levels() {
  std::vector<FeasibleLevel> out;
  for (int s = 1; s <= 7; ++s) {
    for (int a = -1; a >= -3; --a) {
      bool found = false;
      for (int b = a; b >= -3; --b) {
        if (std::ldexp(1.0, a) + std::ldexp(1.0, b) == s / 8.0) {
          out.push_back({s, {a, b}});
          found = true;
          break;
        }
      }
      if (found) break;
    }
  }
  return out;
}

QuantDictionary make_dictionary(int s, double n) {
  for (const auto& f : feasible_levels()) {
    if (f.s == s) return QuantDictionary{n, s, f.shifts};
  }
  throw std::invalid_argument("q = " + std::to_string(s) + "/8 has no shift-add decomposition");
}

QuantDictionary build_dictionary(double n) {
  const double target = inflection_points(n).x2;
  const auto grid = feasible_levels();
  FeasibleLevel best = grid.front();
  double best_dist = std::abs(target - best.s / 8.0);
  for (const auto& f : grid) {
    const double d = std::abs(target - f.s / 8.0);
    if (d <= best_dist) {  // ascending grid, so <= prefers the larger q on ties
      best = f;
      best_dist = d;
    }
  }
  return QuantDictionary{n, best.s, best.shifts};
}

double binary_entropy(double p) {
  auto term = [](double v) { return v > 0.0 ? -v * std::log(v) : 0.0; };
  return term(p) + term(1.0 - p);
}

SignBalance sign_balance(std::span<const Code> codes) {
  if (codes.empty()) throw std::invalid_argument("sign_balance: empty code sequence");
  const auto pos = std::count_if(codes.begin(), codes.end(), is_positive);
  const double p = static_cast<double>(pos) / static_cast<double>(codes.size());
  return {p, binary_entropy(p)};
}

Code quantize_value(double x, const QuantDictionary& dict, double balance_bias) {
  const double v = std::clamp(x, -1.0, 1.0);
  const double mid = 0.5 * (1.0 + dict.q());
  if (v + balance_bias >= 0.0) return v >= mid ? Code::pos_one : Code::pos_q;
  return v < -mid ? Code::neg_one : Code::neg_q;
}

QuantizedTensor quantize_tensor(const Tensor& w, const QuantDictionary& dict, double balance_bias) {
  QuantizedTensor out{std::vector<Code>(w.size()), Tensor(w.shape())};
  const auto in = w.data();
  auto deq = out.dequantized.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    out.codes[i] = quantize_value(in[i], dict, balance_bias);
    deq[i] = dict.level(out.codes[i]);
  }
  return out;
}

double select_balance_bias(const Tensor& standardized) {
  std::vector<double> v(standardized.data().begin(), standardized.data().end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  // A threshold t (bias = -t) makes count(x >= t) positive. Candidate
  // thresholds sit between distinct sorted values; k values fall below.
  double best_bias = 0.0;
  double best_err = 2.0;
  auto consider = [&](std::size_t below, double threshold) {
    const double p = static_cast<double>(n - below) / static_cast<double>(n);
    const double err = std::abs(p - 0.5);
    const double bias = -threshold;
    if (err < best_err - 1e-15 || (std::abs(err - best_err) <= 1e-15 && std::abs(bias) < std::abs(best_bias))) {
      best_err = err;
      best_bias = bias;
    }
  };
  // Zero threshold first so it wins exact ties with other splits of equal quality.
  consider(static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), 0.0) - v.begin()), 0.0);
  for (std::size_t k = 1; k < n; ++k) {
    if (v[k] == v[k - 1]) continue;
    consider(k, 0.5 * (v[k - 1] + v[k]));
  }
  return best_bias;
}

double entropy_objective(const Tensor& w, const QuantDictionary& dict, double lambda_h) {
  const QuantizedTensor qt = quantize_tensor(w, dict, 0.0);
  double err = 0.0;
  const auto a = w.data();
  const auto b = qt.dequantized.data();
  for (std::size_t i = 0; i < a.size(); ++i) err += (a[i] - b[i]) * (a[i] - b[i]);
  return err - lambda_h * sign_balance(qt.codes).entropy;
}

Code activation_code(double a, const QuantDictionary& dict) {
  const double v = std::clamp(a, 0.0, 1.0);
  const double q = dict.q();
  if (v >= 0.5 * (1.0 + q)) return Code::pos_one;
  if (v >= 0.5 * q) return Code::pos_q;
  return Code::neg_q;
}

double quantize_activation(double a, const QuantDictionary& dict) {
  return dict.activation_level(activation_code(a, dict));
}

void CutoffSchedule::validate() const {
  if (!(c0 >= 1.0) || !(terminal > 0.0) || !(terminal <= 1.0) || warmup_steps == 0) {
    throw std::invalid_argument("cutoff schedule requires c0 >= 1 >= terminal > 0 and warmup_steps > 0");
  }
}

double cutoff_schedule_value(std::size_t step, const CutoffSchedule& sched) {
  sched.validate();
  const auto w = static_cast<double>(sched.warmup_steps);
  if (step <= sched.warmup_steps) return sched.c0 + (1.0 - sched.c0) * (static_cast<double>(step) / w);
  if (step <= 2 * sched.warmup_steps) {
    const double t = static_cast<double>(step - sched.warmup_steps) / w;
    return 1.0 + (sched.terminal - 1.0) * t;
  }
  return sched.terminal;
}

Tensor ste_backward(const Tensor& upstream, const Tensor& latent, double cutoff) {
  if (upstream.shape() != latent.shape()) throw std::invalid_argument("ste_backward: shape mismatch");
  if (!(cutoff > 0.0)) throw std::invalid_argument("ste_backward: cutoff must be positive");
  Tensor out(latent.shape());
  const auto g = upstream.data();
  const auto x = latent.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(x[i]) <= cutoff ? g[i] : 0.0;
  return out;
}

double uniform_quantize(double x, int bits) {
  if (bits < 2 || bits > 16) throw std::invalid_argument("uniform_quantize: bits must be in [2, 16]");
  const double half_levels = std::ldexp(1.0, bits - 1) - 1.0;
  return std::floor(std::clamp(x, -1.0, 1.0) * half_levels + 0.5) / half_levels;
}

}  // namespace shiftq
