#pragma once

#include <cstdint>

#include "shiftq/nn.hpp"
#include "shiftq/quant.hpp"
#include "shiftq/rng.hpp"
#include "shiftq/shiftadd.hpp"

namespace shiftq::testing {

struct RandomLayerCase {
  QuantizedLayer layer;
  FixedPointTensor input;
};

// Random dense or conv layer with every dimension <= 32 and a random fixed
// point input batch whose values stay well inside the exact range.
inline RandomLayerCase random_layer_case(Rng& rng, int frac_bits = kDefaultFracBits) {
  const int s_choices[] = {2, 3, 4, 5, 6};
  const QuantDictionary dict = make_dictionary(s_choices[rng.below(5)], 3.0);
  const bool conv = rng.below(2) == 0;
  Shape in_shape, w_shape;
  if (conv) {
    const std::size_t k = 1 + 2 * rng.below(3);
    const std::size_t c = 1 + rng.below(4), h = k + rng.below(33 - k), w = k + rng.below(33 - k);
    in_shape = {c, h, w};
    w_shape = {1 + rng.below(8), c, k, k};
  } else {
    in_shape = {1 + rng.below(32)};
    w_shape = {1 + rng.below(32), in_shape[0]};
  }
  Tensor w(w_shape);
  for (double& v : w.data()) v = dict.levels()[rng.below(4)];
  std::vector<double> bias;
  if (rng.below(2) == 0) {
    bias.resize(w_shape[0]);
    for (double& b : bias) b = rng.uniform(-2.0, 2.0);
  }
  const double scale = rng.uniform(0.01, 2.0);
  RandomLayerCase out{encode_layer(w, dict, scale, conv ? in_shape : Shape{}, std::move(bias)), {}};
  const std::size_t batch = 1 + rng.below(3);
  out.input.shape = {batch};
  out.input.shape.insert(out.input.shape.end(), in_shape.begin(), in_shape.end());
  out.input.frac_bits = frac_bits;
  out.input.data.resize(shape_size(out.input.shape));
  const std::int64_t range = std::int64_t{4} << frac_bits;
  for (auto& v : out.input.data) v = static_cast<std::int64_t>(rng.below(2 * range + 1)) - range;
  return out;
}

}  // namespace shiftq::testing
