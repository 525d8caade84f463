#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shiftq/selfref.hpp"

namespace shiftq {

struct OptimizerConfig {
  double lr = 0.05;
  double finetune_lr = 0.01;  // self-reference fine-tune phase
  std::size_t teacher_epochs = 30;
  std::size_t quant_epochs = 30;
  std::size_t gan_epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// Each flag adds one loss term on top of plain straight-through training.
struct AblationFlags {
  bool use_sil = false;        // feature matching against the teacher
  bool use_gan_plain = false;  // cross-entropy GAN structural term
  bool use_lsgan = false;      // margin (loss-sensitive) GAN structural term
  bool use_npl = false;        // spectral-norm penalty, weight lambda_sn

  StructuralTerms structural() const { return {use_sil, use_gan_plain, use_lsgan}; }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct ModelConfig {
  std::size_t conv_channels = 4;
  std::size_t kernel = 3;
  std::size_t hidden = 32;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttackSettings {
  std::vector<double> epsilons{0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
  double lo = 0.0;
  double hi = 1.0;

  friend bool operator==(const AttackSettings&, const AttackSettings&) = default;
};

enum class StudentInit { random, teacher };

struct QuantConfig {
  std::optional<double> dof_n = 3.0;  // nullopt = "auto"
  double lambda_h = 1.0;        // > 0 enables sign balancing; the objective is reported
  double cutoff_c0 = 3.0;
  std::size_t cutoff_warmup_steps = 200;
  double lambda_sn = 0.03;
  std::size_t spectral_iters = 1;
  GanConfig gan;
  OptimizerConfig optimizer;
  AblationFlags ablation;
  ModelConfig model;
  AttackSettings attack;
  StudentInit student_init = StudentInit::random;
  double student_init_gain = 2.449489742783178;  // sqrt(6): variance-preserving for rectifiers
  bool quantize_activations = true;
  int frac_bits = 8;

  void validate() const;
  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

// Missing keys take their defaults; unknown keys are rejected.
nlohmann::json config_to_json(const QuantConfig& cfg);
QuantConfig config_from_json(const nlohmann::json& j);
QuantConfig load_config(const std::filesystem::path& path);
void save_config(const QuantConfig& cfg, const std::filesystem::path& path);

}  // namespace shiftq
