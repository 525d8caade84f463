#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "shiftq/rng.hpp"
#include "shiftq/tensor.hpp"

namespace shiftq {

enum class LayerKind { dense, conv2d, relu };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

// One stage of a feed-forward network. Shapes are per sample (no batch axis).
// dense weights are [out, in] and accept any input shape (flattened);
// conv2d weights are [out_ch, in_ch, k, k], stride 1, valid padding, k odd.
struct Layer {
  LayerKind kind = LayerKind::relu;
  Tensor weights;
  Tensor bias;  // empty when the layer has no bias
  Shape in_shape;
  Shape out_shape;
  double negative_slope = 0.0;  // relu only; nonzero gives a leaky rectifier

  bool has_params() const { return kind != LayerKind::relu; }
  bool has_bias() const { return !bias.empty(); }
  std::size_t kernel() const { return kind == LayerKind::conv2d ? weights.dim(2) : 0; }
  std::size_t fan_in() const;
};

Layer make_dense(const Shape& in_shape, std::size_t out_features, bool with_bias = true);
Layer make_conv2d(const Shape& in_shape, std::size_t out_channels, std::size_t kernel, bool with_bias = true);
Layer make_relu(const Shape& shape, double negative_slope = 0.0);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Ordered layers split into a feature extractor [0, feature_cut) and a
// classifier head [feature_cut, size).
class Network {
 public:
  Network() = default;
  Network(std::vector<Layer> layers, std::size_t feature_cut);

  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  // Parameter values may be edited in place; shapes must not change.
  Layer& layer(std::size_t i) { return layers_.at(i); }
  std::size_t size() const { return layers_.size(); }
  std::size_t feature_cut() const { return feature_cut_; }

  const Shape& input_shape() const { return layers_.front().in_shape; }
  std::size_t num_classes() const { return shape_size(layers_.back().out_shape); }
  std::size_t feature_size() const { return shape_size(layers_[feature_cut_ - 1].out_shape); }
  std::size_t parameter_count() const;

  // Weights then bias of every parametric layer, in layer order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

 private:
  std::vector<Layer> layers_;
  std::size_t feature_cut_ = 0;
};

// Symmetric uniform in +-gain/sqrt(fan_in) for weights, zero bias.
void init_parameters(Network& net, Rng& rng, double gain = 1.0);

struct Batch {
  Tensor inputs;  // [B, ...]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  void validate(std::size_t num_classes) const;
};

// Elementwise map applied to the output of every relu layer, with the
// derivative used on the backward pass (which may be a surrogate).
class ActivationTransform {
 public:
  virtual ~ActivationTransform() = default;
  virtual double forward(double a) const = 0;
  virtual double derivative(double a) const = 0;
};

struct ForwardHooks {
  // Replacement weights per layer (entries for relu layers are ignored).
  const std::vector<Tensor>* weights = nullptr;
  const ActivationTransform* activation = nullptr;
};

struct ForwardCache {
  Tensor input;
  std::vector<Tensor> weights;  // snapshot of replacement weights, if any
  std::vector<Tensor> outputs;  // outputs[i] is the output of layer i
  std::vector<Tensor> raw;      // relu outputs before the activation transform
  ForwardHooks hooks;
  bool valid = false;
};

struct ForwardResult {
  Tensor logits;    // [B, num_classes]
  Tensor features;  // [B, F], output of layer feature_cut - 1 flattened
};

ForwardResult forward_pass(const Network& net, const Tensor& inputs, ForwardCache* cache = nullptr,
                           const ForwardHooks& hooks = {});
inline ForwardResult forward_pass(const Network& net, const Batch& batch, ForwardCache* cache = nullptr,
                                  const ForwardHooks& hooks = {}) {
  return forward_pass(net, batch.inputs, cache, hooks);
}

struct Gradients {
  std::vector<Tensor> weights;  // per layer; empty for relu layers
  std::vector<Tensor> biases;   // per layer; empty when absent
  Tensor input;                 // gradient w.r.t. the batch inputs
};

// Mean cross-entropy over the batch. Writes d(loss)/d(logits) when requested.
double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels, Tensor* dlogits = nullptr);

// Backpropagates an upstream gradient on the logits, plus an optional extra
// gradient injected at the feature-extractor output.
Gradients backward_from(const Network& net, const ForwardCache& cache, const Tensor& dlogits,
                        const Tensor* dfeatures = nullptr);

// Cross-entropy backward for the batch whose forward state is in `cache`.
Gradients backward_pass(const Network& net, const ForwardCache& cache, const std::vector<std::size_t>& labels);

// p -= lr * g for every parameter. A non-finite gradient rejects the whole
// step before anything is modified.
void sgd_update(std::span<double> params, std::span<const double> grads, double lr);
void sgd_update(Network& net, const Gradients& grads, double lr);
bool all_finite(const Gradients& grads);

// Max relative error between analytic gradients and central differences of
// `loss` over the given parameters.
struct GradCheckTarget {
  std::span<double> values;
  std::span<const double> analytic;
};
double grad_check(const std::function<double()>& loss, const std::vector<GradCheckTarget>& targets, double eps);

double grad_check(Network& net, const Batch& batch, double eps);

std::vector<std::size_t> argmax_rows(const Tensor& logits);
double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace shiftq
