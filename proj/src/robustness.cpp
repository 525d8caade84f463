#include "shiftq/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "shiftq/student.hpp"

namespace shiftq {

std::size_t matrix_rows(const Tensor& w) {
  if (w.rank() != 2 && w.rank() != 4) throw ShapeError("spectral norm needs a rank-2 or rank-4 weight tensor");
  return w.dim(0);
}

std::size_t matrix_cols(const Tensor& w) { return w.size() / matrix_rows(w); }

namespace {

double normalize(std::vector<double>& x) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double norm = std::sqrt(ss);
  if (norm > 0.0) {
    for (double& v : x) v /= norm;
  }
  return norm;
}

void initial_vector(std::vector<double>& u, std::size_t rows, std::size_t cols) {
  Rng rng(0x5eed0000ULL + rows * 1315423911ULL + cols);
  u.resize(rows);
  for (double& v : u) v = rng.normal();
  normalize(u);
}

}  // namespace

SpectralResult spectral_norm(const Tensor& w, SpectralState& state) {
  const std::size_t m = matrix_rows(w), n = matrix_cols(w);
  if (state.iters < 1) throw std::invalid_argument("spectral_norm: iters must be at least 1");
  const auto a = w.data();
  SpectralResult r;
  r.v.assign(n, 0.0);
  r.u.assign(m, 0.0);
  bool zero = true;
  for (double x : a) zero = zero && x == 0.0;
  if (zero) {
    if (state.u.size() != m) initial_vector(state.u, m, n);
    r.u = state.u;
    return r;
  }
  if (state.u.size() != m) initial_vector(state.u, m, n);

  std::vector<double>& u = state.u;
  std::vector<double> v(n), wv(m), wtwv(n);
  for (std::size_t it = 0; it < state.iters; ++it) {
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) v[j] += a[i * n + j] * u[i];
    }
    if (normalize(v) == 0.0) {
      // u is orthogonal to the row space; restart from a fresh direction.
      initial_vector(u, m, n + it + 1);
      continue;
    }
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * v[j];
      wv[i] = s;
    }
    u = wv;
    const double sigma = normalize(u);
    r.sigma = sigma;
    r.v = v;
    if (state.tolerance > 0.0) {
      std::fill(wtwv.begin(), wtwv.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) wtwv[j] += a[i * n + j] * wv[i];
      }
      double res = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = wtwv[j] - sigma * sigma * v[j];
        res += d * d;
      }
      if (std::sqrt(res) <= state.tolerance * sigma * sigma) break;
    }
  }
  r.u = u;
  return r;
}

NsLoss ns_perturbation_loss(double task_loss, const std::vector<const Tensor*>& weights, double lambda_sn,
                            std::vector<SpectralState>& states) {
  if (!std::isfinite(task_loss)) throw std::invalid_argument("ns_perturbation_loss: task loss is not finite");
  if (!(lambda_sn >= 0.0)) throw std::invalid_argument("ns_perturbation_loss: lambda_sn must be >= 0");
  if (states.size() != weights.size()) throw std::invalid_argument("ns_perturbation_loss: one state per matrix");
  NsLoss out;
  out.value = task_loss;
  out.sigmas.assign(weights.size(), 0.0);
  out.grads.resize(weights.size());
  if (lambda_sn == 0.0) return out;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const Tensor& w = *weights[k];
    const SpectralResult r = spectral_norm(w, states[k]);
    out.sigmas[k] = r.sigma;
    out.penalty += r.sigma * r.sigma;
    Tensor g(w.shape());
    auto gd = g.data();
    const std::size_t n = r.v.size();
    const double scale = lambda_sn * 2.0 * r.sigma;
    for (std::size_t i = 0; i < r.u.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) gd[i * n + j] = scale * r.u[i] * r.v[j];
    }
    out.grads[k] = std::move(g);
  }
  out.value = task_loss + lambda_sn * out.penalty;
  return out;
}

void AttackConfig::validate() const {
  if (!(lo < hi)) throw std::invalid_argument("attack: input range needs lo < hi");
  if (!(epsilon >= 0.0) || epsilon > hi - lo) {
    throw std::invalid_argument("attack: epsilon must lie in [0, hi - lo], got " + std::to_string(epsilon));
  }
}

Tensor fgsm_attack(const InputGradient& input_grad, const Batch& batch, const AttackConfig& cfg) {
  cfg.validate();
  const auto x = batch.inputs.data();
  for (double v : x) {
    if (!(v >= cfg.lo && v <= cfg.hi)) throw std::invalid_argument("fgsm_attack: input outside the attack range");
  }
  const Tensor g = input_grad(batch);
  if (g.shape() != batch.inputs.shape()) throw ShapeError("fgsm_attack: input gradient has the wrong shape");
  Tensor adv = batch.inputs;
  auto a = adv.data();
  const auto gd = g.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double s = gd[i] > 0.0 ? 1.0 : (gd[i] < 0.0 ? -1.0 : 0.0);
    a[i] = std::clamp(x[i] + cfg.epsilon * s, cfg.lo, cfg.hi);
  }
  return adv;
}

Tensor fgsm_attack(const Network& net, const Batch& batch, const AttackConfig& cfg) {
  return fgsm_attack(
      [&net](const Batch& b) {
        ForwardCache cache;
        forward_pass(net, b, &cache);
        return backward_pass(net, cache, b.labels).input;
      },
      batch, cfg);
}

Tensor fgsm_attack(const QuantizedStudent& student, const Batch& batch, const AttackConfig& cfg) {
  return fgsm_attack(
      [&student](const Batch& b) {
        ForwardCache cache;
        const ForwardResult r = student.forward(b.inputs, &cache, StudentMode::surrogate);
        Tensor dlogits;
        cross_entropy(r.logits, b.labels, &dlogits);
        return student.backward(cache, dlogits).input;
      },
      batch, cfg);
}

}  // namespace shiftq
