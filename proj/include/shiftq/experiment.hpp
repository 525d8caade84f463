#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "shiftq/config.hpp"
#include "shiftq/dataset.hpp"
#include "shiftq/shiftadd.hpp"
#include "shiftq/student.hpp"

namespace shiftq {

// A pipeline phase failed; the message names the phase and its last metrics.
class PhaseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpsilonAccuracy {
  double epsilon = 0.0;
  double accuracy = 0.0;
  friend bool operator==(const EpsilonAccuracy&, const EpsilonAccuracy&) = default;
};

struct ModelEvaluation {
  double clean = 0.0;
  std::vector<EpsilonAccuracy> adversarial;
  friend bool operator==(const ModelEvaluation&, const ModelEvaluation&) = default;
};

inline constexpr std::size_t kHistogramBins = 16;
inline constexpr double kHistogramRange = 4.0;
inline constexpr std::size_t kEvalSpectralIters = 50;

struct LayerQuantSummary {
  std::size_t layer = 0;
  double dof = 0.0;
  double q = 0.0;
  int a = 0;
  int b = 0;
  double p = 0.0;
  double entropy = 0.0;
  double objective = 0.0;  // entropy objective of the standardized latents
  double sigma = 0.0;      // spectral norm of the latent weights
  // Standardized latent weights in kHistogramBins equal bins over
  // [-kHistogramRange, kHistogramRange); outliers land in the end bins.
  std::vector<std::size_t> histogram;
  friend bool operator==(const LayerQuantSummary&, const LayerQuantSummary&) = default;
};

// Per-epoch means. teacher_task has one entry per teacher epoch; the student
// curves cover the straight-through epochs followed by the fine-tune epochs.
struct LossCurves {
  std::vector<double> teacher_task;
  std::vector<double> task;
  std::vector<double> penalty;
  std::vector<double> discriminator;
  std::vector<double> structural;
  std::vector<double> total;
  friend bool operator==(const LossCurves&, const LossCurves&) = default;
};

struct ExperimentReport {
  QuantConfig config;
  std::string dataset;
  std::uint64_t seed = 0;
  ModelEvaluation teacher;
  ModelEvaluation student;          // shift-add inference
  double student_reference_clean = 0.0;  // dictionary-float inference
  LossCurves curves;
  CostReport cost;
  std::vector<LayerQuantSummary> layers;
  std::string student_digest;  // FNV-1a of the quantized checkpoint
  double wall_time_seconds = 0.0;  // not serialized
};

Network build_network(const Shape& input_shape, std::size_t num_classes, const ModelConfig& model);

// Each phase draws from its own stream derived from the configured seed, so
// running the phases one at a time reproduces run_experiment.
Network train_teacher(const QuantConfig& cfg, const Dataset& data, LossCurves* curves = nullptr);
StudentQuantOptions student_options(const QuantConfig& cfg);
QuantizedStudent quantize_student(const QuantConfig& cfg, const Dataset& data, const Network& teacher,
                                  LossCurves* curves = nullptr);
void selfref_finetune(const QuantConfig& cfg, const Dataset& data, const Network& teacher, QuantizedStudent& student,
                      LossCurves* curves = nullptr);

ModelEvaluation evaluate_network(const Network& net, const Batch& test, const AttackSettings& attack);
// Attacks use the student's straight-through gradients; accuracy uses
// shift-add inference on the compiled network.
ModelEvaluation evaluate_student(const QuantizedStudent& student, const QuantizedNetwork& compiled, const Batch& test,
                                 const AttackSettings& attack);
std::vector<LayerQuantSummary> summarize_layers(const QuantizedStudent& student, double lambda_h);

ExperimentReport run_experiment(const QuantConfig& cfg, const Dataset& data);
// One run per beta with everything else, seed included, held fixed.
std::vector<ExperimentReport> beta_sweep(const QuantConfig& cfg, const Dataset& data, const std::vector<double>& grid);

nlohmann::json report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);

enum class ReportFormat { json, csv };
// json writes one file at `out`; csv writes `out`/<curve>.csv per curve with
// an `epoch,value` header.
void emit_report(const ExperimentReport& r, const std::filesystem::path& out, ReportFormat format);
// `beta,accuracy` rows using shift-add clean accuracy, or the adversarial
// accuracy at `epsilon` when given.
std::string sweep_table(const std::vector<ExperimentReport>& reports, std::optional<double> epsilon = std::nullopt);

// Latent weights plus the per-layer dof and cutoff needed to rebuild the
// same student.
nlohmann::json student_to_json(const QuantizedStudent& student);
QuantizedStudent student_from_json(const nlohmann::json& j);

std::string fnv1a_hex(const std::string& bytes);

// Directory for CLI outputs: $SHIFTQ_OUT_DIR when set, else "out".
std::filesystem::path default_output_dir();

}  // namespace shiftq
