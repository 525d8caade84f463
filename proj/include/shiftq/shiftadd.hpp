#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include <json.hpp>

#include "shiftq/nn.hpp"
#include "shiftq/quant.hpp"

namespace shiftq {

class QuantizedStudent;

inline constexpr int kDefaultFracBits = 8;
// Every level is a multiple of 2^-3, so operands are widened by this many
// bits before the shifts and no product term is ever truncated.
inline constexpr int kLevelFracBits = 3;

class OverflowError : public std::overflow_error {
 public:
  using std::overflow_error::overflow_error;
};

// Real value of element i is data[i] * 2^-frac_bits.
struct FixedPointTensor {
  Shape shape;
  std::vector<std::int64_t> data;
  int frac_bits = kDefaultFracBits;

  std::size_t size() const { return data.size(); }
  double real(std::size_t i) const;
  Tensor to_real() const;
};

// Round half up onto the 2^-frac_bits grid.
std::int64_t to_fixed(double value, int frac_bits);
FixedPointTensor to_fixed_point(const Tensor& t, int frac_bits = kDefaultFracBits);

// Four codes per byte; code i occupies bits [2*(i%4), 2*(i%4)+1].
std::vector<std::uint8_t> pack_codes(std::span<const Code> codes);
std::vector<Code> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count);

struct QuantizedLayer {
  LayerKind kind = LayerKind::dense;
  Shape weight_shape;
  Shape in_shape;  // per sample
  Shape out_shape;
  std::vector<std::uint8_t> packed;
  QuantDictionary dict;
  double out_scale = 1.0;
  std::vector<double> bias;  // empty when absent

  std::size_t weight_count() const { return shape_size(weight_shape); }
  Code code(std::size_t i) const { return static_cast<Code>((packed[i / 4] >> (2 * (i % 4))) & 0b11); }
};

// `w` must hold dictionary levels only; anything else is rejected.
// Dense weights [out, in] infer their input shape; conv2d needs `in_shape`.
QuantizedLayer encode_layer(const Tensor& w, const QuantDictionary& dict, double scale, const Shape& in_shape = {},
                            std::vector<double> bias = {});
Tensor decode_layer(const QuantizedLayer& layer);

// level(code) * act using shifts and adds only. Exact when act is a multiple
// of 8; otherwise each shift truncates the magnitude.
std::int64_t shiftadd_multiply(Code code, std::int64_t act, const QuantDictionary& dict);

// Integer accumulators in units of 2^-(frac_bits + 3), one per output element.
std::vector<std::int64_t> shiftadd_accumulate(const QuantizedLayer& layer, const FixedPointTensor& input);

// Accumulate, then out_scale * acc + bias rounded back to input.frac_bits.
FixedPointTensor shiftadd_forward(const QuantizedLayer& layer, const FixedPointTensor& input);

// Same contract computed with floating-point products of decoded levels.
FixedPointTensor reference_forward(const QuantizedLayer& layer, const FixedPointTensor& input);

struct ReluStage {};
using QuantizedStage = std::variant<QuantizedLayer, ReluStage>;

// A compiled student: quantized layers interleaved with rectifiers whose
// outputs are mapped onto the activation levels {0, q, 1}.
struct QuantizedNetwork {
  std::vector<QuantizedStage> stages;
  QuantDictionary act_dict;
  bool quantize_activations = true;
  int frac_bits = kDefaultFracBits;
  Shape input_shape;
};

QuantizedNetwork compile_student(const QuantizedStudent& student, int frac_bits = kDefaultFracBits);

// Logits (as reals) for a batch of real inputs, which are first rounded onto
// the fixed-point grid.
Tensor infer_shiftadd(const QuantizedNetwork& net, const Tensor& inputs);
Tensor infer_reference(const QuantizedNetwork& net, const Tensor& inputs);

struct CostReport {
  std::uint64_t macs_fp = 0;         // multiply-accumulates of the full-precision network
  std::uint64_t shiftadd_ops = 0;    // weight applications done by shifts and adds
  std::uint64_t residual_macs = 0;   // MACs left in full precision
  double modeled_speedup = 1.0;
};

inline constexpr double kShiftAddCost = 0.25;

using CostLayer = std::variant<QuantizedLayer, Layer>;

// speedup = macs_fp / (0.25 * shiftadd_ops + residual_macs); 1 for no work.
CostReport cost_report(std::span<const CostLayer> layers, const Shape& input_shape);
CostReport cost_report(const QuantizedNetwork& net);
CostReport cost_report(const Network& net);

nlohmann::json quantized_network_to_json(const QuantizedNetwork& net);
QuantizedNetwork quantized_network_from_json(const nlohmann::json& j);
void save_quantized_network(const QuantizedNetwork& net, const std::filesystem::path& path);
QuantizedNetwork load_quantized_network(const std::filesystem::path& path);

}  // namespace shiftq
