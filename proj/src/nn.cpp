#include "shiftq/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace shiftq {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "dense") return LayerKind::dense;
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "relu") return LayerKind::relu;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

std::size_t Layer::fan_in() const {
  switch (kind) {
    case LayerKind::dense: return weights.dim(1);
    case LayerKind::conv2d: return weights.dim(1) * weights.dim(2) * weights.dim(3);
    case LayerKind::relu: return 0;
  }
  return 0;
}

Layer make_dense(const Shape& in_shape, std::size_t out_features, bool with_bias) {
  Layer l;
  l.kind = LayerKind::dense;
  l.in_shape = in_shape;
  l.out_shape = {out_features};
  l.weights = Tensor({out_features, shape_size(in_shape)});
  if (with_bias) l.bias = Tensor({out_features});
  return l;
}

Layer make_conv2d(const Shape& in_shape, std::size_t out_channels, std::size_t kernel, bool with_bias) {
  if (in_shape.size() != 3) throw ShapeError("conv2d expects a [C, H, W] input, got " + shape_string(in_shape));
  if (kernel % 2 == 0) throw ShapeError("conv2d kernel size must be odd");
  if (kernel > in_shape[1] || kernel > in_shape[2]) throw ShapeError("conv2d kernel larger than input");
  Layer l;
  l.kind = LayerKind::conv2d;
  l.in_shape = in_shape;
  l.out_shape = {out_channels, in_shape[1] - kernel + 1, in_shape[2] - kernel + 1};
  l.weights = Tensor({out_channels, in_shape[0], kernel, kernel});
  if (with_bias) l.bias = Tensor({out_channels});
  return l;
}

Layer make_relu(const Shape& shape, double negative_slope) {
  Layer l;
  l.kind = LayerKind::relu;
  l.in_shape = shape;
  l.out_shape = shape;
  l.negative_slope = negative_slope;
  return l;
}

namespace {

std::string layer_name(const Network& net, std::size_t i) {
  return "layer " + std::to_string(i) + " (" + to_string(net.layer(i).kind) + ")";
}

void validate_layer(const Layer& l, std::size_t index) {
  const std::string where = "layer " + std::to_string(index) + " (" + to_string(l.kind) + "): ";
  switch (l.kind) {
    case LayerKind::dense:
      if (l.weights.rank() != 2 || l.weights.dim(1) != shape_size(l.in_shape) ||
          l.out_shape != Shape{l.weights.dim(0)}) {
        throw ShapeError(where + "weights " + shape_string(l.weights.shape()) + " inconsistent with input " +
                         shape_string(l.in_shape));
      }
      break;
    case LayerKind::conv2d: {
      const auto& w = l.weights.shape();
      if (w.size() != 4 || w[2] != w[3] || w[2] % 2 == 0 || l.in_shape.size() != 3 || w[1] != l.in_shape[0] ||
          l.out_shape != Shape{w[0], l.in_shape[1] - w[2] + 1, l.in_shape[2] - w[2] + 1}) {
        throw ShapeError(where + "weights " + shape_string(w) + " inconsistent with input " +
                         shape_string(l.in_shape));
      }
      break;
    }
    case LayerKind::relu:
      if (l.in_shape != l.out_shape) throw ShapeError(where + "relu must preserve shape");
      break;
  }
  if (l.has_bias() && l.bias.size() != l.weights.dim(0)) {
    throw ShapeError(where + "bias length does not match output channels");
  }
}

}  // namespace

Network::Network(std::vector<Layer> layers, std::size_t feature_cut)
    : layers_(std::move(layers)), feature_cut_(feature_cut) {
  if (layers_.empty()) throw ShapeError("network has no layers");
  if (feature_cut_ == 0 || feature_cut_ >= layers_.size()) {
    throw ShapeError("feature_cut must satisfy 0 < cut < " + std::to_string(layers_.size()));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    validate_layer(layers_[i], i);
    if (i > 0 && shape_size(layers_[i - 1].out_shape) != shape_size(layers_[i].in_shape)) {
      throw ShapeError("layer " + std::to_string(i) + " (" + to_string(layers_[i].kind) + "): input " +
                       shape_string(layers_[i].in_shape) + " incompatible with previous output " +
                       shape_string(layers_[i - 1].out_shape));
    }
  }
  if (layers_.back().out_shape.size() != 1) throw ShapeError("network output must be a flat logit vector");
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_) {
    if (!l.has_params()) continue;
    out.push_back(&l.weights);
    if (l.has_bias()) out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_) {
    if (!l.has_params()) continue;
    out.push_back(&l.weights);
    if (l.has_bias()) out.push_back(&l.bias);
  }
  return out;
}

void init_parameters(Network& net, Rng& rng, double gain) {
  if (!(gain > 0.0)) throw std::invalid_argument("init gain must be positive");
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    if (!l.has_params()) continue;
    const double bound = gain / std::sqrt(static_cast<double>(l.fan_in()));
    for (double& w : l.weights.data()) w = rng.uniform(-bound, bound);
    if (l.has_bias()) std::fill(l.bias.data().begin(), l.bias.data().end(), 0.0);
  }
}

void Batch::validate(std::size_t num_classes) const {
  if (inputs.empty() || inputs.dim(0) != labels.size()) {
    throw ShapeError("batch has " + std::to_string(labels.size()) + " labels for inputs " +
                     shape_string(inputs.shape()));
  }
  for (std::size_t y : labels) {
    if (y >= num_classes) throw std::out_of_range("label " + std::to_string(y) + " >= num_classes");
  }
}

namespace {

void dense_forward(const Tensor& w, const Tensor& bias, std::span<const double> in, std::span<double> out,
                   std::size_t batch) {
  const std::size_t n_out = w.dim(0), n_in = w.dim(1);
  const auto wd = w.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* x = in.data() + b * n_in;
    double* y = out.data() + b * n_out;
    for (std::size_t o = 0; o < n_out; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      const double* row = wd.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }
}

void conv_forward(const Layer& l, const Tensor& w, std::span<const double> in, std::span<double> out,
                  std::size_t batch) {
  const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
  const std::size_t O = l.out_shape[0], OH = l.out_shape[1], OW = l.out_shape[2];
  const std::size_t K = w.dim(2);
  const auto wd = w.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* x = in.data() + b * C * H * W;
    double* y = out.data() + b * O * OH * OW;
    for (std::size_t o = 0; o < O; ++o) {
      const double b0 = l.has_bias() ? l.bias[o] : 0.0;
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double acc = b0;
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
              const double* xr = x + (c * H + oy + ky) * W + ox;
              const double* wr = wd.data() + ((o * C + c) * K + ky) * K;
              for (std::size_t kx = 0; kx < K; ++kx) acc += wr[kx] * xr[kx];
            }
          }
          y[(o * OH + oy) * OW + ox] = acc;
        }
      }
    }
  }
}

const Tensor& effective_weights(const Network& net, const std::vector<Tensor>* replacement, std::size_t i) {
  if (replacement && !replacement->empty()) {
    const Tensor& w = replacement->at(i);
    if (w.shape() != net.layer(i).weights.shape()) {
      throw ShapeError("layer " + std::to_string(i) + ": replacement weights " + shape_string(w.shape()) +
                       " do not match " + shape_string(net.layer(i).weights.shape()));
    }
    return w;
  }
  return net.layer(i).weights;
}

Shape with_batch(std::size_t batch, const Shape& s) {
  Shape out{batch};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

ForwardResult forward_pass(const Network& net, const Tensor& inputs, ForwardCache* cache, const ForwardHooks& hooks) {
  if (net.size() == 0) throw ShapeError("forward on an empty network");
  if (inputs.rank() < 2 || inputs.size() != inputs.dim(0) * shape_size(net.input_shape())) {
    throw ShapeError(layer_name(net, 0) + ": input " + shape_string(inputs.shape()) + " does not match expected " +
                     shape_string(net.input_shape()) + " per sample");
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!std::isfinite(inputs[k])) throw NonFiniteError("forward: non-finite input at element " + std::to_string(k));
  }
  const std::size_t batch = inputs.dim(0);
  if (cache) {
    cache->input = inputs;
    cache->outputs.assign(net.size(), Tensor());
    cache->raw.assign(net.size(), Tensor());
    cache->weights = hooks.weights ? *hooks.weights : std::vector<Tensor>();
    cache->hooks = {nullptr, hooks.activation};
    cache->valid = false;
  }

  Tensor current = inputs;
  Tensor features;
  for (std::size_t i = 0; i < net.size(); ++i) {
    const Layer& l = net.layer(i);
    Tensor next(with_batch(batch, l.out_shape));
    switch (l.kind) {
      case LayerKind::dense:
        dense_forward(effective_weights(net, hooks.weights, i), l.bias, current.data(), next.data(), batch);
        break;
      case LayerKind::conv2d:
        conv_forward(l, effective_weights(net, hooks.weights, i), current.data(), next.data(), batch);
        break;
      case LayerKind::relu: {
        auto in = current.data();
        auto out = next.data();
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : l.negative_slope * in[k];
        if (hooks.activation) {
          if (cache) cache->raw[i] = next;
          for (double& v : out) v = hooks.activation->forward(v);
        }
        break;
      }
    }
    if (i + 1 == net.feature_cut()) features = next.reshaped({batch, shape_size(l.out_shape)});
    current = std::move(next);
    if (cache) cache->outputs[i] = current;
  }
  if (cache) cache->valid = true;
  return {std::move(current), std::move(features)};
}

double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels, Tensor* dlogits) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (dlogits) *dlogits = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
    const double log_norm = zmax + std::log(sum);
    if (labels[b] >= classes) throw std::out_of_range("cross_entropy: label out of range");
    total += log_norm - z[labels[b]];
    if (dlogits) {
      double* g = dlogits->data().data() + b * classes;
      for (std::size_t c = 0; c < classes; ++c) {
        g[c] = (std::exp(z[c] - log_norm) - (c == labels[b] ? 1.0 : 0.0)) / static_cast<double>(batch);
      }
    }
  }
  return total / static_cast<double>(batch);
}

Gradients backward_from(const Network& net, const ForwardCache& cache, const Tensor& dlogits, const Tensor* dfeatures) {
  if (!cache.valid || cache.outputs.size() != net.size()) {
    throw std::logic_error("backward requested without a forward pass for this network");
  }
  const std::size_t batch = cache.input.dim(0);
  if (dlogits.size() != cache.outputs.back().size()) {
    throw ShapeError("backward: upstream gradient " + shape_string(dlogits.shape()) + " does not match logits " +
                     shape_string(cache.outputs.back().shape()));
  }
  if (dfeatures && dfeatures->size() != batch * net.feature_size()) {
    throw ShapeError("backward: feature gradient " + shape_string(dfeatures->shape()) + " has wrong size");
  }

  Gradients g;
  g.weights.resize(net.size());
  g.biases.resize(net.size());
  std::vector<double> grad(dlogits.data().begin(), dlogits.data().end());

  for (std::size_t idx = net.size(); idx-- > 0;) {
    const Layer& l = net.layer(idx);
    if (dfeatures && idx + 1 == net.feature_cut()) {
      const auto df = dfeatures->data();
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += df[k];
    }
    const Tensor& in = idx == 0 ? cache.input : cache.outputs[idx - 1];
    const auto x = in.data();
    std::vector<double> gin(x.size(), 0.0);

    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = effective_weights(net, &cache.weights, idx);
        const std::size_t n_out = w.dim(0), n_in = w.dim(1);
        Tensor dw(w.shape());
        Tensor db = l.has_bias() ? Tensor(l.bias.shape()) : Tensor();
        auto dwd = dw.data();
        const auto wd = w.data();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xb = x.data() + b * n_in;
          const double* gb = grad.data() + b * n_out;
          double* gi = gin.data() + b * n_in;
          for (std::size_t o = 0; o < n_out; ++o) {
            const double go = gb[o];
            if (l.has_bias()) db[o] += go;
            double* dwr = dwd.data() + o * n_in;
            const double* wr = wd.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) {
              dwr[i] += go * xb[i];
              gi[i] += wr[i] * go;
            }
          }
        }
        g.weights[idx] = std::move(dw);
        g.biases[idx] = std::move(db);
        break;
      }
      case LayerKind::conv2d: {
        const Tensor& w = effective_weights(net, &cache.weights, idx);
        const std::size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2];
        const std::size_t O = l.out_shape[0], OH = l.out_shape[1], OW = l.out_shape[2];
        const std::size_t K = w.dim(2);
        Tensor dw(w.shape());
        Tensor db = l.has_bias() ? Tensor(l.bias.shape()) : Tensor();
        auto dwd = dw.data();
        const auto wd = w.data();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xb = x.data() + b * C * H * W;
          double* gi = gin.data() + b * C * H * W;
          const double* gb = grad.data() + b * O * OH * OW;
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const double go = gb[(o * OH + oy) * OW + ox];
                if (go == 0.0) continue;
                if (l.has_bias()) db[o] += go;
                for (std::size_t c = 0; c < C; ++c) {
                  for (std::size_t ky = 0; ky < K; ++ky) {
                    const std::size_t xoff = (c * H + oy + ky) * W + ox;
                    const std::size_t woff = ((o * C + c) * K + ky) * K;
                    for (std::size_t kx = 0; kx < K; ++kx) {
                      dwd[woff + kx] += go * xb[xoff + kx];
                      gi[xoff + kx] += wd[woff + kx] * go;
                    }
                  }
                }
              }
            }
          }
        }
        g.weights[idx] = std::move(dw);
        g.biases[idx] = std::move(db);
        break;
      }
      case LayerKind::relu: {
        const ActivationTransform* act = cache.hooks.activation;
        const auto raw = act ? cache.raw[idx].data() : std::span<const double>();
        for (std::size_t k = 0; k < x.size(); ++k) {
          double d = grad[k] * (x[k] > 0.0 ? 1.0 : l.negative_slope);
          if (act) d *= act->derivative(raw[k]);
          gin[k] = d;
        }
        break;
      }
    }
    grad = std::move(gin);
  }
  g.input = Tensor(cache.input.shape(), std::move(grad));
  return g;
}

Gradients backward_pass(const Network& net, const ForwardCache& cache, const std::vector<std::size_t>& labels) {
  if (!cache.valid) throw std::logic_error("backward requested without a forward pass for this network");
  Tensor dlogits;
  cross_entropy(cache.outputs.back(), labels, &dlogits);
  return backward_from(net, cache, dlogits);
}

void sgd_update(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd_update: parameter/gradient length mismatch");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("sgd_update: learning rate must be >= 0");
  for (double g : grads) {
    if (!std::isfinite(g)) throw NonFiniteError("sgd_update: non-finite gradient, step rejected");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

bool all_finite(const Gradients& grads) {
  auto ok = [](const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
  };
  return std::all_of(grads.weights.begin(), grads.weights.end(), ok) &&
         std::all_of(grads.biases.begin(), grads.biases.end(), ok);
}

void sgd_update(Network& net, const Gradients& grads, double lr) {
  if (grads.weights.size() != net.size()) throw ShapeError("sgd_update: gradients do not match network");
  if (!all_finite(grads)) throw NonFiniteError("sgd_update: non-finite gradient, step rejected");
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    if (!l.has_params()) continue;
    sgd_update(l.weights.data(), grads.weights[i].data(), lr);
    if (l.has_bias()) sgd_update(l.bias.data(), grads.biases[i].data(), lr);
  }
}

double grad_check(const std::function<double()>& loss, const std::vector<GradCheckTarget>& targets, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2]");
  double worst = 0.0;
  for (const auto& t : targets) {
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      const double saved = t.values[k];
      t.values[k] = saved + eps;
      const double up = loss();
      t.values[k] = saved - eps;
      const double down = loss();
      t.values[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = t.analytic[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

double grad_check(Network& net, const Batch& batch, double eps) {
  ForwardCache cache;
  forward_pass(net, batch, &cache);
  const Gradients g = backward_pass(net, cache, batch.labels);
  std::vector<GradCheckTarget> targets;
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    if (!l.has_params()) continue;
    targets.push_back({l.weights.data(), g.weights[i].data()});
    if (l.has_bias()) targets.push_back({l.bias.data(), g.biases[i].data()});
  }
  auto loss = [&] { return cross_entropy(forward_pass(net, batch).logits, batch.labels); };
  return grad_check(loss, targets, eps);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.size() / rows;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(z, z + cols) - z);
  }
  return out;
}

double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace shiftq
