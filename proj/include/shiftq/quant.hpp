#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "shiftq/tensor.hpp"

namespace shiftq {

// 2-bit code. The numeric values are the bit patterns stored in packed form.
enum class Code : std::uint8_t { neg_one = 0b00, neg_q = 0b01, pos_q = 0b10, pos_one = 0b11 };

inline constexpr std::array<Code, 4> kAllCodes = {Code::neg_one, Code::neg_q, Code::pos_q, Code::pos_one};

inline bool is_positive(Code c) { return c == Code::pos_q || c == Code::pos_one; }

// q = s/8 = 2^a + 2^b with a >= b, both in {-3, -2, -1}.
struct ShiftPair {
  int a = -1;
  int b = -2;
  friend bool operator==(const ShiftPair&, const ShiftPair&) = default;
};

// Symmetric 4-level set [-1, -q, +q, +1] with the shift decomposition of q.
struct QuantDictionary {
  double n = 3.0;  // degrees of freedom the dictionary was derived from
  int s = 6;       // q = s / 8
  ShiftPair shifts{-1, -2};

  double q() const { return s / 8.0; }
  std::array<double, 4> levels() const { return {-1.0, -q(), q(), 1.0}; }
  double level(Code c) const;
  // Activation view: the -q slot stands for 0, giving levels {0, q, 1}.
  double activation_level(Code c) const;
  // Throws std::invalid_argument when `value` is not exactly a level.
  Code code_for_level(double value) const;
  Code code_for_activation(double value) const;

  friend bool operator==(const QuantDictionary&, const QuantDictionary&) = default;
};

struct FeasibleLevel {
  int s;
  ShiftPair shifts;
};

// Every q < 1 expressible as 2^a + 2^b with a, b in {-3, -2, -1}, ascending.
std::vector<FeasibleLevel> feasible_levels();

// Dictionary with the given numerator; throws if s/8 is not feasible.
QuantDictionary make_dictionary(int s, double n);

// Snaps the positive inflection point of the t density to the nearest
// feasible q (ties toward the larger q).
QuantDictionary build_dictionary(double n);

struct SignBalance {
  double p = 0.0;        // fraction of positive codes
  double entropy = 0.0;  // -p ln p - (1-p) ln(1-p), with 0 ln 0 = 0
};

double binary_entropy(double p);
SignBalance sign_balance(std::span<const Code> codes);

struct QuantizedTensor {
  std::vector<Code> codes;
  Tensor dequantized;
};

// Saturates to [-1, 1], then picks the nearest level. The boundary between the
// negative and positive halves sits at -balance_bias instead of 0; midpoint
// ties go to the more positive level.
Code quantize_value(double x, const QuantDictionary& dict, double balance_bias);
QuantizedTensor quantize_tensor(const Tensor& w, const QuantDictionary& dict, double balance_bias);

// Bias whose sign split puts the positive fraction as close to 0.5 as the
// data allows; among equally good splits the one with smallest |bias| wins.
double select_balance_bias(const Tensor& standardized);

// ||w - Q(w)||^2 - lambda_h * H(Q(w)) with Q the plain nearest-level map.
double entropy_objective(const Tensor& w, const QuantDictionary& dict, double lambda_h);

// Clip to [0, 1] then nearest of {0, q, 1}, ties upward.
double quantize_activation(double a, const QuantDictionary& dict);
Code activation_code(double a, const QuantDictionary& dict);

struct CutoffSchedule {
  double c0 = 3.0;
  std::size_t warmup_steps = 100;
  double terminal = 0.75;

  void validate() const;
};

// Linear c0 -> 1 over the first window, 1 -> terminal over the second, then
// constant.
double cutoff_schedule_value(std::size_t step, const CutoffSchedule& sched);

// Hard straight-through window: passes the upstream gradient where
// |latent| <= cutoff, zero elsewhere.
Tensor ste_backward(const Tensor& upstream, const Tensor& latent, double cutoff);

// Uniform symmetric nearest-level quantizer with 2^bits - 1 levels on
// [-1, 1]; the comparison baseline for 3- and 4-bit points.
double uniform_quantize(double x, int bits);

}  // namespace shiftq
