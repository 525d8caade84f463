#pragma once

#include <optional>
#include <vector>

#include "shiftq/nn.hpp"
#include "shiftq/quant.hpp"
#include "shiftq/tdist.hpp"

namespace shiftq {

// Quantized activations forward, derivative 1 inside [0, 1].
class ActivationQuantizer final : public ActivationTransform {
 public:
  ActivationQuantizer() = default;
  explicit ActivationQuantizer(QuantDictionary dict) : dict_(dict) {}
  double forward(double a) const override { return quantize_activation(a, dict_); }
  double derivative(double a) const override { return a >= 0.0 && a <= 1.0 ? 1.0 : 0.0; }

 private:
  QuantDictionary dict_;
};

// clip(a, 0, 1) forward; the smooth counterpart of ActivationQuantizer.
class ActivationClip final : public ActivationTransform {
 public:
  double forward(double a) const override { return a < 0.0 ? 0.0 : (a > 1.0 ? 1.0 : a); }
  double derivative(double a) const override { return a >= 0.0 && a <= 1.0 ? 1.0 : 0.0; }
};

// Per parametric layer quantization state, derived from the latent weights.
struct LayerQuantState {
  QuantDictionary dict;
  WeightStats stats;
  double balance_bias = 0.0;
  std::vector<Code> codes;
  Tensor effective;  // stats.std * level, the weights the quantized forward uses
};

enum class StudentMode {
  quantized,  // dictionary levels forward, straight-through backward
  surrogate,  // clip(z, +-cutoff) forward whose exact derivative is the STE
};

// Weight dictionaries are chosen per layer (auto dof) or shared (fixed dof).
struct StudentQuantOptions {
  std::optional<double> dof;  // nullopt: estimate per layer from the weights
  // When non-empty, one dof per parametric layer; overrides `dof`.
  std::vector<double> layer_dof;
  double max_dof = kDefaultMaxDof;
  bool balance_signs = true;  // threshold biasing toward p = 0.5
  bool quantize_activations = true;
};

// A network trained through its latent full-precision weights while every
// forward pass sees 2-bit weights and activations.
class QuantizedStudent {
 public:
  QuantizedStudent(Network latent, const StudentQuantOptions& options);

  const Network& latent() const { return latent_; }
  Network& latent() { return latent_; }
  const StudentQuantOptions& options() const { return options_; }

  const std::optional<LayerQuantState>& layer_state(std::size_t i) const { return states_.at(i); }
  // The dof each parametric layer's dictionary was built from, in layer order.
  std::vector<double> layer_dofs() const;
  const QuantDictionary& activation_dict() const { return act_dict_; }
  const std::vector<Tensor>& effective_weights() const { return effective_; }

  double cutoff() const { return cutoff_; }
  void set_cutoff(double c);

  // Recomputes standardization, balance bias, codes and effective weights
  // from the current latent weights. Dictionaries stay fixed.
  void requantize();

  ForwardResult forward(const Tensor& inputs, ForwardCache* cache = nullptr,
                        StudentMode mode = StudentMode::quantized) const;

  // Gradients w.r.t. the latent parameters (STE window applied to weights)
  // and the inputs, for a cache filled by forward() of this student.
  Gradients backward(const ForwardCache& cache, const Tensor& dlogits, const Tensor* dfeatures = nullptr) const;

  // The weights a surrogate-mode forward uses for the current latents with
  // frozen standardization statistics.
  std::vector<Tensor> surrogate_weights() const;

 private:
  Network latent_;
  StudentQuantOptions options_;
  std::vector<std::optional<LayerQuantState>> states_;
  std::vector<Tensor> effective_;
  QuantDictionary act_dict_;
  ActivationQuantizer act_quant_;
  ActivationClip act_clip_;
  double cutoff_ = 1.0;
};

}  // namespace shiftq
