#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "shiftq/nn.hpp"

namespace shiftq {

class QuantizedStudent;

// Warm-start vector for power iteration on one weight matrix.
struct SpectralState {
  std::vector<double> u;   // unit left vector; empty until first use
  std::size_t iters = 1;   // iterations per call
  double tolerance = 0.0;  // > 0: stop early once ||W^T W v - sigma^2 v|| <= tolerance * sigma^2
};

struct SpectralResult {
  double sigma = 0.0;
  std::vector<double> u;  // rows
  std::vector<double> v;  // columns
};

// Rank-4 conv kernels are viewed as [out_channels, in_channels * k * k].
std::size_t matrix_rows(const Tensor& w);
std::size_t matrix_cols(const Tensor& w);

// Largest singular value by power iteration from state.u; updates state.u.
SpectralResult spectral_norm(const Tensor& w, SpectralState& state);

struct NsLoss {
  double value = 0.0;    // task_loss + lambda_sn * sum sigma^2
  double penalty = 0.0;  // sum sigma^2
  std::vector<double> sigmas;
  std::vector<Tensor> grads;  // d(lambda_sn * sigma^2)/dW per matrix, shaped like W
};

// One state per matrix; states.size() must equal weights.size().
NsLoss ns_perturbation_loss(double task_loss, const std::vector<const Tensor*>& weights, double lambda_sn,
                            std::vector<SpectralState>& states);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const;
};

// Returns d(task loss)/d(inputs) for a batch.
using InputGradient = std::function<Tensor(const Batch&)>;

// clip(x + epsilon * sign(grad), lo, hi); inputs must already lie in [lo, hi].
Tensor fgsm_attack(const InputGradient& input_grad, const Batch& batch, const AttackConfig& cfg);
Tensor fgsm_attack(const Network& net, const Batch& batch, const AttackConfig& cfg);
// Input gradient of the straight-through surrogate forward.
Tensor fgsm_attack(const QuantizedStudent& student, const Batch& batch, const AttackConfig& cfg);

}  // namespace shiftq
