#include "shiftq/student.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace shiftq {

QuantizedStudent::QuantizedStudent(Network latent, const StudentQuantOptions& options)
    : latent_(std::move(latent)), options_(options), states_(latent_.size()), effective_(latent_.size()) {
  bool first = true;
  std::size_t param_index = 0;
  for (std::size_t i = 0; i < latent_.size(); ++i) {
    const Layer& l = latent_.layer(i);
    if (!l.has_params()) continue;
    double n = 0.0;
    if (!options_.layer_dof.empty()) {
      if (param_index >= options_.layer_dof.size()) throw std::invalid_argument("layer_dof has too few entries");
      n = options_.layer_dof[param_index];
    } else if (options_.dof) {
      n = *options_.dof;
    } else {
      n = standardize_weights(l.weights, options_.max_dof).stats.dof;
    }
    ++param_index;
    LayerQuantState s;
    s.dict = build_dictionary(n);
    states_[i] = std::move(s);
    if (first) {
      act_dict_ = states_[i]->dict;
      act_quant_ = ActivationQuantizer(act_dict_);
      first = false;
    }
  }
  if (first) throw std::invalid_argument("student network has no parametric layers");
  if (!options_.layer_dof.empty() && param_index != options_.layer_dof.size()) {
    throw std::invalid_argument("layer_dof has too many entries");
  }
  requantize();
}

std::vector<double> QuantizedStudent::layer_dofs() const {
  std::vector<double> out;
  for (const auto& s : states_) {
    if (s) out.push_back(s->dict.n);
  }
  return out;
}

void QuantizedStudent::set_cutoff(double c) {
  if (!(c > 0.0)) throw std::invalid_argument("cutoff must be positive");
  cutoff_ = c;
}

void QuantizedStudent::requantize() {
  for (std::size_t i = 0; i < latent_.size(); ++i) {
    if (!states_[i]) continue;
    LayerQuantState& s = *states_[i];
    const Standardized st = standardize_weights(latent_.layer(i).weights, options_.max_dof);
    s.stats = st.stats;
    s.balance_bias = options_.balance_signs ? select_balance_bias(st.values) : 0.0;
    QuantizedTensor qt = quantize_tensor(st.values, s.dict, s.balance_bias);
    s.codes = std::move(qt.codes);
    s.effective = std::move(qt.dequantized);
    for (double& v : s.effective.data()) v *= s.stats.std;
    effective_[i] = s.effective;
  }
}

std::vector<Tensor> QuantizedStudent::surrogate_weights() const {
  std::vector<Tensor> out(latent_.size());
  for (std::size_t i = 0; i < latent_.size(); ++i) {
    if (!states_[i]) continue;
    const auto& stats = states_[i]->stats;
    const auto w = latent_.layer(i).weights.data();
    out[i] = Tensor(latent_.layer(i).weights.shape());
    auto o = out[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double z = (w[k] - stats.mean) / stats.std;
      o[k] = stats.std * std::clamp(z, -cutoff_, cutoff_);
    }
  }
  return out;
}

ForwardResult QuantizedStudent::forward(const Tensor& inputs, ForwardCache* cache, StudentMode mode) const {
  if (mode == StudentMode::quantized) {
    const ForwardHooks hooks{&effective_, options_.quantize_activations ? &act_quant_ : nullptr};
    return forward_pass(latent_, inputs, cache, hooks);
  }
  const std::vector<Tensor> w = surrogate_weights();
  const ForwardHooks hooks{&w, options_.quantize_activations ? &act_clip_ : nullptr};
  return forward_pass(latent_, inputs, cache, hooks);
}

Gradients QuantizedStudent::backward(const ForwardCache& cache, const Tensor& dlogits, const Tensor* dfeatures) const {
  Gradients g = backward_from(latent_, cache, dlogits, dfeatures);
  for (std::size_t i = 0; i < latent_.size(); ++i) {
    if (!states_[i]) continue;
    const auto& stats = states_[i]->stats;
    const auto w = latent_.layer(i).weights.data();
    auto gw = g.weights[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (std::abs((w[k] - stats.mean) / stats.std) > cutoff_) gw[k] = 0.0;
    }
  }
  return g;
}

}  // namespace shiftq
