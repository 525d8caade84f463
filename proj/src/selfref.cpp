#include "shiftq/selfref.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace shiftq {

void check_same_shape(const FeatureMap& a, const FeatureMap& b) {
  if (a.values.shape() != b.values.shape()) {
    throw ShapeError("feature maps differ in shape: " + shape_string(a.values.shape()) + " vs " +
                     shape_string(b.values.shape()));
  }
}

std::size_t Discriminator::default_hidden(std::size_t features) { return std::max<std::size_t>(16, features / 4); }

namespace {

Network discriminator_network(std::size_t features, std::size_t hidden) {
  if (features == 0) throw ShapeError("discriminator needs at least one feature");
  if (hidden == 0) hidden = Discriminator::default_hidden(features);
  std::vector<Layer> layers;
  layers.push_back(make_dense({features}, hidden));
  layers.push_back(make_relu({hidden}, Discriminator::kSlope));
  layers.push_back(make_dense({hidden}, 1));
  return Network(std::move(layers), 2);
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void add_into(Gradients& acc, const Gradients& g) {
  if (acc.weights.empty()) {
    acc = g;
    return;
  }
  auto add = [](Tensor& a, const Tensor& b) {
    if (b.empty()) return;
    auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
  };
  for (std::size_t i = 0; i < acc.weights.size(); ++i) {
    add(acc.weights[i], g.weights[i]);
    add(acc.biases[i], g.biases[i]);
  }
}

// Backpropagates per-item upstream gradients on the raw outputs.
Gradients raw_backward(const Discriminator& d, const ForwardCache& cache, const std::vector<double>& draw) {
  return backward_from(d.net(), cache, Tensor({draw.size(), 1}, draw));
}

void check_input(const Discriminator& d, const FeatureMap& f) {
  if (f.values.rank() != 2 || f.values.dim(1) != d.features()) {
    throw ShapeError("discriminator expects [B, " + std::to_string(d.features()) + "] features, got " +
                     shape_string(f.values.shape()));
  }
}

}  // namespace

Discriminator::Discriminator(std::size_t features, std::size_t hidden) : net_(discriminator_network(features, hidden)) {}

Discriminator::Discriminator(std::size_t features, Rng& rng, std::size_t hidden)
    : net_(discriminator_network(features, hidden)) {
  init_parameters(net_, rng);
}

std::vector<double> Discriminator::raw(const FeatureMap& f, ForwardCache* cache) const {
  check_input(*this, f);
  const ForwardResult r = forward_pass(net_, f.values, cache);
  return r.logits.values();
}

std::vector<double> discriminator_score(const Discriminator& d, const FeatureMap& f) {
  std::vector<double> s = d.raw(f);
  for (double& v : s) v = std::abs(v);
  return s;
}

std::vector<double> margin_delta(const FeatureMap& f_teacher, const FeatureMap& f_student, double margin_scale) {
  check_same_shape(f_teacher, f_student);
  if (!(margin_scale >= 0.0)) throw std::invalid_argument("margin_scale must be >= 0");
  const std::size_t b = f_teacher.batch(), n = f_teacher.features();
  const auto t = f_teacher.values.data();
  const auto s = f_student.values.data();
  std::vector<double> delta(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::abs(t[i * n + j] - s[i * n + j]);
    delta[i] = margin_scale * (sum / static_cast<double>(n));
  }
  return delta;
}

DiscriminatorLoss discriminator_loss_from_scores(const std::vector<double>& teacher_scores,
                                                 const std::vector<double>& student_scores,
                                                 const std::vector<double>& delta, double lambda_ls) {
  const std::size_t b = teacher_scores.size();
  if (b == 0 || student_scores.size() != b || delta.size() != b) {
    throw std::invalid_argument("discriminator loss needs matched, non-empty score batches");
  }
  if (!(lambda_ls >= 0.0)) throw std::invalid_argument("lambda_ls must be >= 0");
  double t_sum = 0.0, h_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    t_sum += teacher_scores[i];
    h_sum += std::max(0.0, delta[i] + teacher_scores[i] - student_scores[i]);
  }
  DiscriminatorLoss out;
  out.teacher_term = t_sum / static_cast<double>(b);
  out.hinge_term = h_sum / static_cast<double>(b);
  out.value = out.teacher_term + lambda_ls * out.hinge_term;
  return out;
}

DiscriminatorLoss discriminator_loss(const Discriminator& d, const FeatureMap& f_teacher, const FeatureMap& f_student,
                                     double lambda_ls, double margin_scale, Gradients* grads) {
  check_same_shape(f_teacher, f_student);
  ForwardCache ct, cs;
  const std::vector<double> rt = d.raw(f_teacher, grads ? &ct : nullptr);
  const std::vector<double> rs = d.raw(f_student, grads ? &cs : nullptr);
  std::vector<double> lt(rt.size()), ls(rs.size());
  std::transform(rt.begin(), rt.end(), lt.begin(), [](double v) { return std::abs(v); });
  std::transform(rs.begin(), rs.end(), ls.begin(), [](double v) { return std::abs(v); });
  const std::vector<double> delta = margin_delta(f_teacher, f_student, margin_scale);
  const DiscriminatorLoss out = discriminator_loss_from_scores(lt, ls, delta, lambda_ls);
  if (grads) {
    const double inv_b = 1.0 / static_cast<double>(lt.size());
    std::vector<double> dt(lt.size()), ds(ls.size());
    for (std::size_t i = 0; i < lt.size(); ++i) {
      const double active = delta[i] + lt[i] - ls[i] > 0.0 ? lambda_ls : 0.0;
      dt[i] = (1.0 + active) * inv_b * sign_of(rt[i]);
      ds[i] = -active * inv_b * sign_of(rs[i]);
    }
    Gradients g = raw_backward(d, ct, dt);
    add_into(g, raw_backward(d, cs, ds));
    *grads = std::move(g);
  }
  return out;
}

double generator_loss(const Discriminator& d, const FeatureMap& f_student, Tensor* dfeatures) {
  ForwardCache cache;
  const std::vector<double> r = d.raw(f_student, dfeatures ? &cache : nullptr);
  double sum = 0.0;
  for (double v : r) sum += std::abs(v);
  const double inv_b = 1.0 / static_cast<double>(r.size());
  if (dfeatures) {
    std::vector<double> dr(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) dr[i] = inv_b * sign_of(r[i]);
    *dfeatures = raw_backward(d, cache, dr).input.reshaped(f_student.values.shape());
  }
  return sum * inv_b;
}

double plain_gan_discriminator_loss(const Discriminator& d, const FeatureMap& f_teacher, const FeatureMap& f_student,
                                    Gradients* grads) {
  check_same_shape(f_teacher, f_student);
  ForwardCache ct, cs;
  const std::vector<double> rt = d.raw(f_teacher, grads ? &ct : nullptr);
  const std::vector<double> rs = d.raw(f_student, grads ? &cs : nullptr);
  const double inv_b = 1.0 / static_cast<double>(rt.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < rt.size(); ++i) sum += softplus(-rt[i]) + softplus(rs[i]);
  if (grads) {
    std::vector<double> dt(rt.size()), ds(rs.size());
    for (std::size_t i = 0; i < rt.size(); ++i) {
      dt[i] = -sigmoid(-rt[i]) * inv_b;
      ds[i] = sigmoid(rs[i]) * inv_b;
    }
    Gradients g = raw_backward(d, ct, dt);
    add_into(g, raw_backward(d, cs, ds));
    *grads = std::move(g);
  }
  return sum * inv_b;
}

double plain_gan_generator_loss(const Discriminator& d, const FeatureMap& f_student, Tensor* dfeatures) {
  ForwardCache cache;
  const std::vector<double> r = d.raw(f_student, dfeatures ? &cache : nullptr);
  const double inv_b = 1.0 / static_cast<double>(r.size());
  double sum = 0.0;
  for (double v : r) sum += softplus(-v);
  if (dfeatures) {
    std::vector<double> dr(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) dr[i] = -sigmoid(-r[i]) * inv_b;
    *dfeatures = raw_backward(d, cache, dr).input.reshaped(f_student.values.shape());
  }
  return sum * inv_b;
}

double feature_match_loss(const FeatureMap& f_teacher, const FeatureMap& f_student, Tensor* dfeatures) {
  check_same_shape(f_teacher, f_student);
  const auto t = f_teacher.values.data();
  const auto s = f_student.values.data();
  const double inv_n = 1.0 / static_cast<double>(t.size());
  double sum = 0.0;
  if (dfeatures) *dfeatures = Tensor(f_student.values.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double diff = s[i] - t[i];
    sum += diff * diff;
    if (dfeatures) dfeatures->data()[i] = 2.0 * diff * inv_n;
  }
  return sum * inv_n;
}

double total_loss(double l_s, double l_struct, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
  if (beta == 0.0) return l_s;
  if (beta == 1.0) return l_struct;
  return (1.0 - beta) * l_s + beta * l_struct;
}

void GanConfig::validate() const {
  if (!(lambda_ls >= 0.0)) throw std::invalid_argument("gan.lambda_ls must be >= 0");
  if (!(margin_scale >= 0.0)) throw std::invalid_argument("gan.margin_scale must be >= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("gan.beta must lie in [0, 1]");
  if (d_steps == 0 || g_steps == 0) throw std::invalid_argument("gan.d_steps and gan.g_steps must be positive");
  if (!(d_lr >= 0.0)) throw std::invalid_argument("gan.d_lr must be >= 0");
}

std::vector<SpectralState> make_spectral_states(const Network& net, std::size_t iters) {
  std::vector<SpectralState> states;
  for (const Layer& l : net.layers()) {
    if (l.has_params()) states.push_back(SpectralState{{}, iters, 0.0});
  }
  return states;
}

namespace {

using StructuralFn = std::function<double(const FeatureMap&, Tensor*)>;

bool finite(double v) { return std::isfinite(v); }

StepMetrics aborted(StepMetrics m, const std::string& why) {
  m.aborted = true;
  m.error = why;
  return m;
}

StepMetrics student_update(QuantizedStudent& student, const Batch& batch, double lr, double lambda_sn,
                           std::vector<SpectralState>& states, double beta, const StructuralFn* structural) {
  StepMetrics m;
  ForwardCache cache;
  const ForwardResult r = student.forward(batch.inputs, &cache, StudentMode::quantized);
  Tensor dlogits;
  m.task = cross_entropy(r.logits, batch.labels, &dlogits);
  if (!finite(m.task)) return aborted(m, "task loss is not finite");

  std::vector<const Tensor*> weights;
  std::vector<std::size_t> owners;
  for (std::size_t i = 0; i < student.latent().size(); ++i) {
    if (!student.latent().layer(i).has_params()) continue;
    weights.push_back(&student.latent().layer(i).weights);
    owners.push_back(i);
  }
  const NsLoss ns = ns_perturbation_loss(m.task, weights, lambda_sn, states);
  m.penalty = ns.penalty;
  m.ns_loss = ns.value;

  const bool mixed = structural != nullptr && beta != 0.0;
  Tensor dfeatures;
  if (structural) {
    m.structural = (*structural)(FeatureMap{r.features, FeatureSource::student}, mixed ? &dfeatures : nullptr);
    m.total = total_loss(m.ns_loss, m.structural, beta);
  } else {
    m.total = m.ns_loss;
  }
  if (!finite(m.total)) return aborted(m, "total loss is not finite");

  const double task_weight = mixed ? 1.0 - beta : 1.0;
  if (mixed) {
    for (double& v : dlogits.data()) v *= task_weight;
    for (double& v : dfeatures.data()) v *= beta;
  }
  Gradients g = student.backward(cache, dlogits, mixed ? &dfeatures : nullptr);
  if (lambda_sn != 0.0) {
    for (std::size_t k = 0; k < owners.size(); ++k) {
      auto gw = g.weights[owners[k]].data();
      const auto pg = ns.grads[k].data();
      for (std::size_t e = 0; e < gw.size(); ++e) gw[e] += task_weight * pg[e];
    }
  }
  if (!all_finite(g)) return aborted(m, "gradient is not finite");
  sgd_update(student.latent(), g, lr);
  student.requantize();
  return m;
}

}  // namespace

StepMetrics ste_train_step(QuantizedStudent& student, const Batch& batch, double lr, double lambda_sn,
                           std::vector<SpectralState>& states) {
  return student_update(student, batch, lr, lambda_sn, states, 0.0, nullptr);
}

StepMetrics selfref_train_step(const Network& teacher, QuantizedStudent& student, Discriminator& d, const Batch& batch,
                               const TrainStepConfig& cfg, std::vector<SpectralState>& states) {
  cfg.gan.validate();
  const StructuralTerms& terms = cfg.structural;
  const FeatureMap ft{forward_pass(teacher, batch.inputs).features, FeatureSource::teacher};
  const FeatureMap fs{student.forward(batch.inputs).features, FeatureSource::student};
  check_same_shape(ft, fs);

  StepMetrics first_d;
  if (terms.needs_discriminator()) {
    for (std::size_t step = 0; step < cfg.gan.d_steps; ++step) {
      Gradients total;
      double value = 0.0;
      if (terms.lsgan) {
        Gradients g;
        value += discriminator_loss(d, ft, fs, cfg.gan.lambda_ls, cfg.gan.margin_scale, &g).value;
        add_into(total, g);
      }
      if (terms.gan_plain) {
        Gradients g;
        value += plain_gan_discriminator_loss(d, ft, fs, &g);
        add_into(total, g);
      }
      if (step == 0) first_d.discriminator = value;
      if (!finite(value) || !all_finite(total)) return aborted(first_d, "discriminator loss is not finite");
      sgd_update(d.net(), total, cfg.gan.d_lr);
    }
  }

  const StructuralFn structural = [&](const FeatureMap& f, Tensor* grad) {
    double value = 0.0;
    Tensor part;
    auto accumulate = [&](double v) {
      value += v;
      if (!grad) return;
      if (grad->empty()) {
        *grad = part;
      } else {
        auto gd = grad->data();
        const auto pd = part.data();
        for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += pd[i];
      }
    };
    if (grad) *grad = Tensor();
    if (terms.feature_match) accumulate(feature_match_loss(ft, f, grad ? &part : nullptr));
    if (terms.gan_plain) accumulate(plain_gan_generator_loss(d, f, grad ? &part : nullptr));
    if (terms.lsgan) accumulate(generator_loss(d, f, grad ? &part : nullptr));
    return value;
  };

  StepMetrics first;
  for (std::size_t step = 0; step < cfg.gan.g_steps; ++step) {
    StepMetrics m = student_update(student, batch, cfg.lr, cfg.lambda_sn, states, cfg.gan.beta,
                                   terms.any() ? &structural : nullptr);
    m.discriminator = first_d.discriminator;
    if (m.aborted) return m;
    if (step == 0) first = m;
  }
  return first;
}

}  // namespace shiftq
