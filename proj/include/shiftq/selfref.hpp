#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "shiftq/nn.hpp"
#include "shiftq/robustness.hpp"
#include "shiftq/student.hpp"

namespace shiftq {

enum class FeatureSource { teacher, student };

struct FeatureMap {
  Tensor values;  // [B, F]
  FeatureSource source = FeatureSource::teacher;

  std::size_t batch() const { return values.dim(0); }
  std::size_t features() const { return values.dim(1); }
};

void check_same_shape(const FeatureMap& a, const FeatureMap& b);

// F -> H dense, leaky rectifier, H -> 1 dense. The score of an item is the
// absolute value of the output, so every score is a nonnegative loss.
class Discriminator {
 public:
  static constexpr double kSlope = 0.2;
  static std::size_t default_hidden(std::size_t features);

  // All parameters zero.
  explicit Discriminator(std::size_t features, std::size_t hidden = 0);
  Discriminator(std::size_t features, Rng& rng, std::size_t hidden = 0);

  const Network& net() const { return net_; }
  Network& net() { return net_; }
  std::size_t features() const { return net_.input_shape()[0]; }
  std::size_t hidden() const { return net_.layer(0).out_shape[0]; }
  std::size_t parameter_count() const { return net_.parameter_count(); }

  // Raw output per item, before the absolute value.
  std::vector<double> raw(const FeatureMap& f, ForwardCache* cache = nullptr) const;

 private:
  Network net_;
};

std::vector<double> discriminator_score(const Discriminator& d, const FeatureMap& f);

// margin_scale * mean_j |t_ij - s_ij| per item.
std::vector<double> margin_delta(const FeatureMap& f_teacher, const FeatureMap& f_student, double margin_scale);

struct DiscriminatorLoss {
  double value = 0.0;         // teacher_term + lambda_ls * hinge_term
  double teacher_term = 0.0;  // mean L(t)
  double hinge_term = 0.0;    // mean max(0, delta + L(t) - L(s))
};

// Hinge form of the margin constraint L(t) <= L(s) - delta.
DiscriminatorLoss discriminator_loss_from_scores(const std::vector<double>& teacher_scores,
                                                 const std::vector<double>& student_scores,
                                                 const std::vector<double>& delta, double lambda_ls);

DiscriminatorLoss discriminator_loss(const Discriminator& d, const FeatureMap& f_teacher, const FeatureMap& f_student,
                                     double lambda_ls, double margin_scale, Gradients* grads = nullptr);

// mean L(s); optionally d/d(student features).
double generator_loss(const Discriminator& d, const FeatureMap& f_student, Tensor* dfeatures = nullptr);

// Non-saturating binary cross-entropy GAN on the raw outputs, teacher = real.
double plain_gan_discriminator_loss(const Discriminator& d, const FeatureMap& f_teacher, const FeatureMap& f_student,
                                    Gradients* grads = nullptr);
double plain_gan_generator_loss(const Discriminator& d, const FeatureMap& f_student, Tensor* dfeatures = nullptr);

// mean over all elements of (s - t)^2.
double feature_match_loss(const FeatureMap& f_teacher, const FeatureMap& f_student, Tensor* dfeatures = nullptr);

// (1 - beta) * l_s + beta * l_struct; beta outside [0, 1] is rejected.
double total_loss(double l_s, double l_struct, double beta);

struct GanConfig {
  double lambda_ls = 1.0;
  double margin_scale = 1.0;
  double beta = 0.1;
  std::size_t d_steps = 1;
  std::size_t g_steps = 1;
  double d_lr = 0.01;

  void validate() const;
  friend bool operator==(const GanConfig&, const GanConfig&) = default;
};

// Which structural terms are summed into L_struct.
struct StructuralTerms {
  bool feature_match = false;
  bool gan_plain = false;
  bool lsgan = false;

  bool any() const { return feature_match || gan_plain || lsgan; }
  bool needs_discriminator() const { return gan_plain || lsgan; }
};

struct TrainStepConfig {
  double lr = 0.05;
  double lambda_sn = 0.0;
  StructuralTerms structural;
  GanConfig gan;
};

struct StepMetrics {
  double task = 0.0;
  double penalty = 0.0;  // sum of squared spectral norms (0 when lambda_sn = 0)
  double ns_loss = 0.0;
  double structural = 0.0;
  double discriminator = 0.0;
  double total = 0.0;
  bool aborted = false;
  std::string error;
};

// One straight-through step on cross-entropy plus the spectral penalty over
// the latent weights, then requantization. `states` has one entry per
// parametric layer.
StepMetrics ste_train_step(QuantizedStudent& student, const Batch& batch, double lr, double lambda_sn,
                           std::vector<SpectralState>& states);

// Discriminator updates against frozen teacher features, then student
// updates on the total loss. A non-finite loss aborts the step before the
// parameters it would have touched are modified.
StepMetrics selfref_train_step(const Network& teacher, QuantizedStudent& student, Discriminator& d, const Batch& batch,
                               const TrainStepConfig& cfg, std::vector<SpectralState>& states);

// Spectral states for every parametric layer of `net`.
std::vector<SpectralState> make_spectral_states(const Network& net, std::size_t iters = 1);

}  // namespace shiftq
