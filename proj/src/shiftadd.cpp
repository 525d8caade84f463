#include "shiftq/shiftadd.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "shiftq/checkpoint.hpp"
#include "shiftq/student.hpp"

namespace shiftq {

using nlohmann::json;

double FixedPointTensor::real(std::size_t i) const { return std::ldexp(static_cast<double>(data[i]), -frac_bits); }

Tensor FixedPointTensor::to_real() const {
  Tensor t(shape);
  auto d = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) d[i] = real(i);
  return t;
}

std::int64_t to_fixed(double value, int frac_bits) {
  const double scaled = std::floor(std::ldexp(value, frac_bits) + 0.5);
  if (!std::isfinite(scaled) || std::abs(scaled) >= 0x1.0p62) {
    throw OverflowError("value " + std::to_string(value) + " does not fit the fixed-point range");
  }
  return static_cast<std::int64_t>(scaled);
}

FixedPointTensor to_fixed_point(const Tensor& t, int frac_bits) {
  FixedPointTensor out{t.shape(), std::vector<std::int64_t>(t.size()), frac_bits};
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) out.data[i] = to_fixed(d[i], frac_bits);
  return out;
}

std::vector<std::uint8_t> pack_codes(std::span<const Code> codes) {
  std::vector<std::uint8_t> out((codes.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    out[i / 4] |= static_cast<std::uint8_t>(static_cast<std::uint8_t>(codes[i]) << (2 * (i % 4)));
  }
  return out;
}

std::vector<Code> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count) {
  if (packed.size() != (count + 3) / 4) throw std::invalid_argument("packed code array has the wrong length");
  std::vector<Code> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<Code>((packed[i / 4] >> (2 * (i % 4))) & 0b11);
  return out;
}

QuantizedLayer encode_layer(const Tensor& w, const QuantDictionary& dict, double scale, const Shape& in_shape,
                            std::vector<double> bias) {
  QuantizedLayer l;
  l.weight_shape = w.shape();
  l.dict = dict;
  l.out_scale = scale;
  if (w.rank() == 2) {
    l.kind = LayerKind::dense;
    l.in_shape = in_shape.empty() ? Shape{w.dim(1)} : in_shape;
    if (shape_size(l.in_shape) != w.dim(1)) throw ShapeError("encode_layer: dense input shape mismatch");
    l.out_shape = {w.dim(0)};
  } else if (w.rank() == 4) {
    l.kind = LayerKind::conv2d;
    if (in_shape.size() != 3 || in_shape[0] != w.dim(1) || w.dim(2) != w.dim(3) || w.dim(2) > in_shape[1] ||
        w.dim(3) > in_shape[2]) {
      throw ShapeError("encode_layer: conv2d weights " + shape_string(w.shape()) + " need a matching [C, H, W] input");
    }
    l.in_shape = in_shape;
    l.out_shape = {w.dim(0), in_shape[1] - w.dim(2) + 1, in_shape[2] - w.dim(3) + 1};
  } else {
    throw ShapeError("encode_layer: weights must be rank 2 (dense) or rank 4 (conv2d)");
  }
  if (!bias.empty() && bias.size() != l.out_shape[0]) throw ShapeError("encode_layer: bias length mismatch");
  l.bias = std::move(bias);

  std::vector<Code> codes(w.size());
  const auto d = w.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    try {
      codes[i] = dict.code_for_level(d[i]);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("encode_layer: weight " + std::to_string(i) + " = " + std::to_string(d[i]) +
                                  " is not a dictionary level");
    }
  }
  l.packed = pack_codes(codes);
  return l;
}

Tensor decode_layer(const QuantizedLayer& layer) {
  Tensor t(layer.weight_shape);
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = layer.dict.level(layer.code(i));
  return t;
}

std::int64_t shiftadd_multiply(Code code, std::int64_t act, const QuantDictionary& dict) {
  if (act == std::numeric_limits<std::int64_t>::min()) throw OverflowError("shiftadd_multiply: operand out of range");
  switch (code) {
    case Code::pos_one: return act;
    case Code::neg_one: return -act;
    case Code::pos_q:
    case Code::neg_q: {
      const std::int64_t mag = act < 0 ? -act : act;
      const std::int64_t prod = (mag >> -dict.shifts.a) + (mag >> -dict.shifts.b);
      const bool negative = (act < 0) != (code == Code::neg_q);
      return negative ? -prod : prod;
    }
  }
  return 0;
}

namespace {

constexpr std::int64_t kMaxWideOperand = std::int64_t{1} << 59;
constexpr std::int64_t kMaxExactAccumulator = std::int64_t{1} << 53;

void check_input(const QuantizedLayer& layer, const FixedPointTensor& input) {
  if (input.frac_bits < kLevelFracBits) throw std::invalid_argument("shift-add input needs frac_bits >= 3");
  const std::size_t per = shape_size(layer.in_shape);
  if (input.shape.size() < 2 || input.data.size() != input.shape[0] * per) {
    throw ShapeError("shift-add " + to_string(layer.kind) + " layer expects " + shape_string(layer.in_shape) +
                     " per sample, got " + shape_string(input.shape));
  }
}

void add_checked(std::int64_t& acc, std::int64_t term) {
  if (__builtin_add_overflow(acc, term, &acc)) throw OverflowError("shift-add accumulator overflow");
}

std::int64_t widen(std::int64_t x) {
  if (x >= kMaxWideOperand || x <= -kMaxWideOperand) throw OverflowError("shift-add operand too large");
  return x * (std::int64_t{1} << kLevelFracBits);
}

// Shared epilogue: scale the exact accumulator, add bias, round once.
std::int64_t finish(double acc_real, const QuantizedLayer& layer, std::size_t channel, int frac_bits) {
  double v = acc_real * layer.out_scale;
  if (!layer.bias.empty()) v += layer.bias[channel];
  return to_fixed(v, frac_bits);
}

std::size_t output_channel(const QuantizedLayer& layer, std::size_t flat_index_in_sample) {
  if (layer.kind == LayerKind::dense) return flat_index_in_sample;
  return flat_index_in_sample / (layer.out_shape[1] * layer.out_shape[2]);
}

template <typename Term, typename Acc>
void run_layer(const QuantizedLayer& layer, std::size_t batch, std::span<Acc> out, Term&& term) {
  const std::size_t per_out = shape_size(layer.out_shape);
  if (layer.kind == LayerKind::dense) {
    const std::size_t n_out = layer.weight_shape[0], n_in = layer.weight_shape[1];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < n_out; ++o) {
        Acc acc{};
        for (std::size_t i = 0; i < n_in; ++i) term(acc, o * n_in + i, b * n_in + i);
        out[b * per_out + o] = acc;
      }
    }
    return;
  }
  const std::size_t C = layer.in_shape[0], H = layer.in_shape[1], W = layer.in_shape[2];
  const std::size_t O = layer.out_shape[0], OH = layer.out_shape[1], OW = layer.out_shape[2];
  const std::size_t K = layer.weight_shape[2];
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          Acc acc{};
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
              for (std::size_t kx = 0; kx < K; ++kx) {
                term(acc, ((o * C + c) * K + ky) * K + kx, b * C * H * W + (c * H + oy + ky) * W + ox + kx);
              }
            }
          }
          out[b * per_out + (o * OH + oy) * OW + ox] = acc;
        }
      }
    }
  }
}

Shape batched(std::size_t batch, const Shape& s) {
  Shape out{batch};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

std::vector<std::int64_t> shiftadd_accumulate(const QuantizedLayer& layer, const FixedPointTensor& input) {
  check_input(layer, input);
  const std::size_t batch = input.shape[0];
  std::vector<std::int64_t> acc(batch * shape_size(layer.out_shape));
  const std::vector<Code> codes = unpack_codes(layer.packed, layer.weight_count());
  run_layer<>(layer, batch, std::span<std::int64_t>(acc), [&](std::int64_t& a, std::size_t wi, std::size_t xi) {
    add_checked(a, shiftadd_multiply(codes[wi], widen(input.data[xi]), layer.dict));
  });
  for (std::int64_t a : acc) {
    if (a > kMaxExactAccumulator || a < -kMaxExactAccumulator) {
      throw OverflowError("shift-add accumulator exceeds the exactly representable range");
    }
  }
  return acc;
}

FixedPointTensor shiftadd_forward(const QuantizedLayer& layer, const FixedPointTensor& input) {
  const std::vector<std::int64_t> acc = shiftadd_accumulate(layer, input);
  const std::size_t batch = input.shape[0], per_out = shape_size(layer.out_shape);
  FixedPointTensor out{batched(batch, layer.out_shape), std::vector<std::int64_t>(acc.size()), input.frac_bits};
  for (std::size_t k = 0; k < acc.size(); ++k) {
    const double acc_real = std::ldexp(static_cast<double>(acc[k]), -(input.frac_bits + kLevelFracBits));
    out.data[k] = finish(acc_real, layer, output_channel(layer, k % per_out), input.frac_bits);
  }
  return out;
}

FixedPointTensor reference_forward(const QuantizedLayer& layer, const FixedPointTensor& input) {
  check_input(layer, input);
  const std::size_t batch = input.shape[0], per_out = shape_size(layer.out_shape);
  const Tensor w = decode_layer(layer);
  const Tensor x = input.to_real();
  std::vector<double> acc(batch * per_out);
  run_layer<>(layer, batch, std::span<double>(acc),
              [&](double& a, std::size_t wi, std::size_t xi) { a += w[wi] * x[xi]; });
  FixedPointTensor out{batched(batch, layer.out_shape), std::vector<std::int64_t>(acc.size()), input.frac_bits};
  for (std::size_t k = 0; k < acc.size(); ++k) {
    out.data[k] = finish(acc[k], layer, output_channel(layer, k % per_out), input.frac_bits);
  }
  return out;
}

QuantizedNetwork compile_student(const QuantizedStudent& student, int frac_bits) {
  QuantizedNetwork net;
  net.act_dict = student.activation_dict();
  net.quantize_activations = student.options().quantize_activations;
  net.frac_bits = frac_bits;
  const Network& latent = student.latent();
  net.input_shape = latent.input_shape();
  for (std::size_t i = 0; i < latent.size(); ++i) {
    const Layer& l = latent.layer(i);
    if (l.kind == LayerKind::relu) {
      if (l.negative_slope != 0.0) throw std::invalid_argument("compile_student: leaky rectifiers are not supported");
      net.stages.emplace_back(ReluStage{});
      continue;
    }
    const auto& state = student.layer_state(i);
    QuantizedLayer q;
    q.kind = l.kind;
    q.weight_shape = l.weights.shape();
    q.in_shape = l.in_shape;
    q.out_shape = l.out_shape;
    q.packed = pack_codes(state->codes);
    q.dict = state->dict;
    q.out_scale = state->stats.std;
    if (l.has_bias()) q.bias.assign(l.bias.data().begin(), l.bias.data().end());
    net.stages.emplace_back(std::move(q));
  }
  return net;
}

namespace {

void relu_fixed(FixedPointTensor& x, const QuantizedNetwork& net) {
  const std::int64_t one = std::int64_t{1} << x.frac_bits;
  const std::int64_t s = net.act_dict.s;
  const std::int64_t q_level = s << (x.frac_bits - kLevelFracBits);
  for (std::int64_t& v : x.data) {
    if (v < 0) v = 0;
    if (!net.quantize_activations) continue;
    // Compare 16 v against the midpoints (8 + s) / 16 and s / 16 in exact integers.
    if (16 * v >= (8 + s) * one) {
      v = one;
    } else if (16 * v >= s * one) {
      v = q_level;
    } else {
      v = 0;
    }
  }
}

void relu_reference(FixedPointTensor& x, const QuantizedNetwork& net) {
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    double a = x.real(i);
    if (a < 0.0) a = 0.0;
    if (net.quantize_activations) a = quantize_activation(a, net.act_dict);
    x.data[i] = to_fixed(a, x.frac_bits);
  }
}

template <typename LayerFn, typename ReluFn>
Tensor run_network(const QuantizedNetwork& net, const Tensor& inputs, LayerFn&& layer_fn, ReluFn&& relu_fn) {
  if (inputs.rank() < 2 || inputs.size() != inputs.dim(0) * shape_size(net.input_shape)) {
    throw ShapeError("quantized network expects " + shape_string(net.input_shape) + " per sample, got " +
                     shape_string(inputs.shape()));
  }
  FixedPointTensor x = to_fixed_point(inputs, net.frac_bits);
  for (const auto& stage : net.stages) {
    if (const auto* l = std::get_if<QuantizedLayer>(&stage)) {
      x = layer_fn(*l, x);
    } else {
      relu_fn(x, net);
    }
  }
  return x.to_real();
}

}  // namespace

Tensor infer_shiftadd(const QuantizedNetwork& net, const Tensor& inputs) {
  return run_network(net, inputs, shiftadd_forward, relu_fixed);
}

Tensor infer_reference(const QuantizedNetwork& net, const Tensor& inputs) {
  return run_network(net, inputs, reference_forward, relu_reference);
}

namespace {

std::uint64_t layer_macs(LayerKind kind, const Shape& weight_shape, const Shape& out_shape) {
  if (kind == LayerKind::dense) return weight_shape[0] * weight_shape[1];
  if (kind == LayerKind::conv2d) {
    return static_cast<std::uint64_t>(shape_size(weight_shape)) * out_shape[1] * out_shape[2];
  }
  return 0;
}

CostReport finish_report(CostReport r) {
  const double cost = kShiftAddCost * static_cast<double>(r.shiftadd_ops) + static_cast<double>(r.residual_macs);
  r.modeled_speedup = cost > 0.0 ? static_cast<double>(r.macs_fp) / cost : 1.0;
  return r;
}

}  // namespace

CostReport cost_report(std::span<const CostLayer> layers, const Shape& input_shape) {
  CostReport r;
  std::size_t expected = shape_size(input_shape);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto [kind, in_shape, out_shape, weight_shape, quantized] = std::visit(
        [](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, QuantizedLayer>) {
            return std::make_tuple(l.kind, l.in_shape, l.out_shape, l.weight_shape, true);
          } else {
            return std::make_tuple(l.kind, l.in_shape, l.out_shape, l.weights.shape(), false);
          }
        },
        layers[i]);
    if (shape_size(in_shape) != expected) {
      throw ShapeError("cost_report: layer " + std::to_string(i) + " input " + shape_string(in_shape) +
                       " does not follow the previous output");
    }
    expected = shape_size(out_shape);
    const std::uint64_t macs = layer_macs(kind, weight_shape, out_shape);
    r.macs_fp += macs;
    (quantized ? r.shiftadd_ops : r.residual_macs) += macs;
  }
  return finish_report(r);
}

CostReport cost_report(const QuantizedNetwork& net) {
  std::vector<CostLayer> layers;
  Shape shape = net.input_shape;
  for (const auto& stage : net.stages) {
    if (const auto* l = std::get_if<QuantizedLayer>(&stage)) {
      layers.emplace_back(*l);
      shape = l->out_shape;
    } else {
      layers.emplace_back(make_relu(shape));
    }
  }
  return cost_report(layers, net.input_shape);
}

CostReport cost_report(const Network& net) {
  std::vector<CostLayer> layers(net.layers().begin(), net.layers().end());
  return cost_report(layers, net.input_shape());
}

namespace {

json dict_to_json(const QuantDictionary& d) {
  return json{{"n", encode_f64_hex(std::span<const double>(&d.n, 1))}, {"s", d.s}, {"a", d.shifts.a},
              {"b", d.shifts.b}};
}

QuantDictionary dict_from_json(const json& j) {
  QuantDictionary d = make_dictionary(j.at("s").get<int>(), decode_f64_hex(j.at("n").get<std::string>(), 1)[0]);
  if (d.shifts != ShiftPair{j.at("a").get<int>(), j.at("b").get<int>()}) {
    throw std::invalid_argument("dictionary shift exponents do not decompose q");
  }
  return d;
}

}  // namespace

json quantized_network_to_json(const QuantizedNetwork& net) {
  json stages = json::array();
  for (const auto& stage : net.stages) {
    if (const auto* l = std::get_if<QuantizedLayer>(&stage)) {
      stages.push_back(json{{"kind", to_string(l->kind)},
                            {"weight_shape", l->weight_shape},
                            {"in_shape", l->in_shape},
                            {"out_shape", l->out_shape},
                            {"codes", encode_bytes_hex(l->packed)},
                            {"code_packing", "2bit-lsb-first"},
                            {"dict", dict_to_json(l->dict)},
                            {"scale", encode_f64_hex(std::span<const double>(&l->out_scale, 1))},
                            {"bias", encode_f64_hex(l->bias)},
                            {"bias_count", l->bias.size()}});
    } else {
      stages.push_back(json{{"kind", "relu"}});
    }
  }
  return json{{"format", "shiftq-quantized"},
              {"version", 1},
              {"frac_bits", net.frac_bits},
              {"quantize_activations", net.quantize_activations},
              {"activation_dict", dict_to_json(net.act_dict)},
              {"input_shape", net.input_shape},
              {"stages", std::move(stages)}};
}

QuantizedNetwork quantized_network_from_json(const json& j) {
  if (j.at("format").get<std::string>() != "shiftq-quantized" || j.at("version").get<int>() != 1) {
    throw std::invalid_argument("not a version-1 quantized checkpoint");
  }
  QuantizedNetwork net;
  net.frac_bits = j.at("frac_bits").get<int>();
  net.quantize_activations = j.at("quantize_activations").get<bool>();
  net.act_dict = dict_from_json(j.at("activation_dict"));
  net.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& js : j.at("stages")) {
    const std::string kind = js.at("kind").get<std::string>();
    if (kind == "relu") {
      net.stages.emplace_back(ReluStage{});
      continue;
    }
    QuantizedLayer l;
    l.kind = layer_kind_from_string(kind);
    l.weight_shape = js.at("weight_shape").get<Shape>();
    l.in_shape = js.at("in_shape").get<Shape>();
    l.out_shape = js.at("out_shape").get<Shape>();
    l.packed = decode_bytes_hex(js.at("codes").get<std::string>());
    if (l.packed.size() != (l.weight_count() + 3) / 4) throw std::invalid_argument("packed codes have wrong length");
    l.dict = dict_from_json(js.at("dict"));
    l.out_scale = decode_f64_hex(js.at("scale").get<std::string>(), 1)[0];
    l.bias = decode_f64_hex(js.at("bias").get<std::string>(), js.at("bias_count").get<std::size_t>());
    net.stages.emplace_back(std::move(l));
  }
  return net;
}

void save_quantized_network(const QuantizedNetwork& net, const std::filesystem::path& path) {
  write_text_file(path, quantized_network_to_json(net).dump(1) + "\n");
}

QuantizedNetwork load_quantized_network(const std::filesystem::path& path) {
  return quantized_network_from_json(json::parse(read_text_file(path)));
}

}  // namespace shiftq
