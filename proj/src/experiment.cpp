#include "shiftq/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "shiftq/checkpoint.hpp"
#include "shiftq/robustness.hpp"

namespace shiftq {

using nlohmann::json;

namespace {

enum PhaseSalt : std::uint64_t { kTeacherSalt = 1, kStudentInitSalt = 2, kSteSalt = 3, kFinetuneSalt = 4, kDiscSalt = 5 };

Rng phase_rng(const QuantConfig& cfg, PhaseSalt salt) { return Rng(cfg.optimizer.seed).fork(salt); }

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

Batch gather(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  const Shape img = data.image_shape();
  const std::size_t per = shape_size(img);
  std::vector<double> px((end - begin) * per);
  std::vector<std::size_t> labels(end - begin);
  const auto src = data.images.data();
  for (std::size_t k = begin; k < end; ++k) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(order[k] * per), per,
                px.begin() + static_cast<std::ptrdiff_t>((k - begin) * per));
    labels[k - begin] = data.labels[order[k]];
  }
  return Batch{Tensor({end - begin, img[0], img[1], img[2]}, std::move(px)), std::move(labels)};
}

// Calls fn(batch) for each minibatch of one shuffled pass over the train split.
template <typename Fn>
void for_each_minibatch(const Dataset& data, std::size_t batch_size, Rng& rng, Fn&& fn) {
  const std::vector<std::size_t> order = shuffled(data.train_count, rng);
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    fn(gather(data, order, b, std::min(order.size(), b + batch_size)));
  }
}

std::string metrics_string(const StepMetrics& m) {
  std::ostringstream os;
  os << "task=" << m.task << " penalty=" << m.penalty << " structural=" << m.structural
     << " discriminator=" << m.discriminator << " total=" << m.total;
  return os.str();
}

[[noreturn]] void phase_failure(const std::string& phase, std::size_t epoch, const std::string& why,
                                const std::string& last) {
  throw PhaseError("phase '" + phase + "' failed at epoch " + std::to_string(epoch) + ": " + why +
                   (last.empty() ? "" : " (last metrics: " + last + ")"));
}

struct EpochMeans {
  double task = 0, penalty = 0, discriminator = 0, structural = 0, total = 0;
  std::size_t n = 0;
  void add(const StepMetrics& m) {
    task += m.task;
    penalty += m.penalty;
    discriminator += m.discriminator;
    structural += m.structural;
    total += m.total;
    ++n;
  }
  void append_to(LossCurves& c) const {
    const double d = n ? static_cast<double>(n) : 1.0;
    c.task.push_back(task / d);
    c.penalty.push_back(penalty / d);
    c.discriminator.push_back(discriminator / d);
    c.structural.push_back(structural / d);
    c.total.push_back(total / d);
  }
};

double effective_lambda_sn(const QuantConfig& cfg) { return cfg.ablation.use_npl ? cfg.lambda_sn : 0.0; }

}  // namespace

Network build_network(const Shape& input_shape, std::size_t num_classes, const ModelConfig& model) {
  if (input_shape.size() != 3) throw ShapeError("build_network expects a [C, H, W] input");
  std::vector<Layer> layers;
  const std::size_t kernel = model.kernel <= std::min(input_shape[1], input_shape[2]) ? model.kernel : 1;
  Layer conv = make_conv2d(input_shape, model.conv_channels, kernel);
  const Shape conv_out = conv.out_shape;
  layers.push_back(std::move(conv));
  layers.push_back(make_relu(conv_out));
  layers.push_back(make_dense(conv_out, model.hidden));
  layers.push_back(make_relu({model.hidden}));
  layers.push_back(make_dense({model.hidden}, num_classes));
  return Network(std::move(layers), 4);
}

Network train_teacher(const QuantConfig& cfg, const Dataset& data, LossCurves* curves) {
  cfg.validate();
  Rng rng = phase_rng(cfg, kTeacherSalt);
  Network net = build_network(data.image_shape(), data.num_classes, cfg.model);
  init_parameters(net, rng);
  std::string last;
  for (std::size_t epoch = 0; epoch < cfg.optimizer.teacher_epochs; ++epoch) {
    double sum = 0.0;
    std::size_t n = 0;
    for_each_minibatch(data, cfg.optimizer.batch_size, rng, [&](const Batch& b) {
      ForwardCache cache;
      const ForwardResult r = forward_pass(net, b, &cache);
      const double loss = cross_entropy(r.logits, b.labels);
      if (!std::isfinite(loss)) phase_failure("train-teacher", epoch, "task loss is not finite", last);
      const Gradients g = backward_pass(net, cache, b.labels);
      try {
        sgd_update(net, g, cfg.optimizer.lr);
      } catch (const NonFiniteError& e) {
        phase_failure("train-teacher", epoch, e.what(), last);
      }
      sum += loss;
      ++n;
      last = "task=" + std::to_string(loss);
    });
    if (curves) curves->teacher_task.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  return net;
}

StudentQuantOptions student_options(const QuantConfig& cfg) {
  StudentQuantOptions o;
  o.dof = cfg.dof_n;
  o.balance_signs = cfg.lambda_h > 0.0;
  o.quantize_activations = cfg.quantize_activations;
  return o;
}

QuantizedStudent quantize_student(const QuantConfig& cfg, const Dataset& data, const Network& teacher,
                                  LossCurves* curves) {
  cfg.validate();
  Network latent = teacher;
  if (cfg.student_init == StudentInit::random) {
    Rng init = phase_rng(cfg, kStudentInitSalt);
    init_parameters(latent, init, cfg.student_init_gain);
  }
  QuantizedStudent student(std::move(latent), student_options(cfg));
  const CutoffSchedule sched{cfg.cutoff_c0, cfg.cutoff_warmup_steps, student.activation_dict().q()};
  sched.validate();

  Rng rng = phase_rng(cfg, kSteSalt);
  std::vector<SpectralState> states = make_spectral_states(student.latent(), cfg.spectral_iters);
  std::size_t step = 0;
  std::string last;
  const std::size_t per_epoch = (data.train_count + cfg.optimizer.batch_size - 1) / cfg.optimizer.batch_size;
  const double total_steps = static_cast<double>(per_epoch * cfg.optimizer.quant_epochs);
  for (std::size_t epoch = 0; epoch < cfg.optimizer.quant_epochs; ++epoch) {
    EpochMeans means;
    for_each_minibatch(data, cfg.optimizer.batch_size, rng, [&](const Batch& b) {
      // Linear decay from lr to finetune_lr across the phase.
      const double t = static_cast<double>(step) / total_steps;
      const double lr = cfg.optimizer.lr + t * (cfg.optimizer.finetune_lr - cfg.optimizer.lr);
      student.set_cutoff(cutoff_schedule_value(step++, sched));
      const StepMetrics m = ste_train_step(student, b, lr, 0.0, states);
      if (m.aborted) phase_failure("quantize", epoch, m.error, last);
      means.add(m);
      last = metrics_string(m);
    });
    if (curves) means.append_to(*curves);
  }
  student.set_cutoff(sched.terminal);
  return student;
}

void selfref_finetune(const QuantConfig& cfg, const Dataset& data, const Network& teacher, QuantizedStudent& student,
                      LossCurves* curves) {
  cfg.validate();
  Rng rng = phase_rng(cfg, kFinetuneSalt);
  const StructuralTerms terms = cfg.ablation.structural();
  Rng disc_rng = phase_rng(cfg, kDiscSalt);
  Discriminator d = terms.needs_discriminator() ? Discriminator(teacher.feature_size(), disc_rng)
                                                : Discriminator(teacher.feature_size());
  TrainStepConfig step_cfg;
  step_cfg.lr = cfg.optimizer.finetune_lr;
  step_cfg.lambda_sn = effective_lambda_sn(cfg);
  step_cfg.structural = terms;
  step_cfg.gan = cfg.gan;
  std::vector<SpectralState> states = make_spectral_states(student.latent(), cfg.spectral_iters);
  std::string last;
  for (std::size_t epoch = 0; epoch < cfg.optimizer.gan_epochs; ++epoch) {
    EpochMeans means;
    for_each_minibatch(data, cfg.optimizer.batch_size, rng, [&](const Batch& b) {
      const StepMetrics m = selfref_train_step(teacher, student, d, b, step_cfg, states);
      if (m.aborted) phase_failure("selfref-finetune", epoch, m.error, last);
      means.add(m);
      last = metrics_string(m);
    });
    if (curves) means.append_to(*curves);
  }
}

ModelEvaluation evaluate_network(const Network& net, const Batch& test, const AttackSettings& attack) {
  ModelEvaluation e;
  e.clean = accuracy(forward_pass(net, test).logits, test.labels);
  for (double eps : attack.epsilons) {
    const Tensor adv = fgsm_attack(net, test, AttackConfig{eps, attack.lo, attack.hi});
    e.adversarial.push_back({eps, accuracy(forward_pass(net, adv).logits, test.labels)});
  }
  return e;
}

ModelEvaluation evaluate_student(const QuantizedStudent& student, const QuantizedNetwork& compiled, const Batch& test,
                                 const AttackSettings& attack) {
  ModelEvaluation e;
  e.clean = accuracy(infer_shiftadd(compiled, test.inputs), test.labels);
  for (double eps : attack.epsilons) {
    const Tensor adv = fgsm_attack(student, test, AttackConfig{eps, attack.lo, attack.hi});
    e.adversarial.push_back({eps, accuracy(infer_shiftadd(compiled, adv), test.labels)});
  }
  return e;
}

std::vector<LayerQuantSummary> summarize_layers(const QuantizedStudent& student, double lambda_h) {
  std::vector<LayerQuantSummary> out;
  for (std::size_t i = 0; i < student.latent().size(); ++i) {
    const auto& s = student.layer_state(i);
    if (!s) continue;
    const SignBalance sb = sign_balance(s->codes);
    const Tensor& w = student.latent().layer(i).weights;
    const Standardized st = standardize_weights(w);
    SpectralState state{{}, kEvalSpectralIters, 0.0};
    std::vector<std::size_t> hist(kHistogramBins, 0);
    const double width = 2.0 * kHistogramRange / static_cast<double>(kHistogramBins);
    for (double z : st.values.data()) {
      const double bin = std::floor((z + kHistogramRange) / width);
      hist[static_cast<std::size_t>(std::clamp(bin, 0.0, static_cast<double>(kHistogramBins - 1)))]++;
    }
    out.push_back({i, s->dict.n, s->dict.q(), s->dict.shifts.a, s->dict.shifts.b, sb.p, sb.entropy,
                   entropy_objective(st.values, s->dict, lambda_h), spectral_norm(w, state).sigma, std::move(hist)});
  }
  return out;
}

ExperimentReport run_experiment(const QuantConfig& cfg, const Dataset& data) {
  cfg.validate();
  data.validate();
  const auto start = std::chrono::steady_clock::now();
  ExperimentReport r;
  r.config = cfg;
  r.dataset = data.source;
  r.seed = cfg.optimizer.seed;

  const Network teacher = train_teacher(cfg, data, &r.curves);
  QuantizedStudent student = quantize_student(cfg, data, teacher, &r.curves);
  selfref_finetune(cfg, data, teacher, student, &r.curves);

  const Batch test = data.test();
  const QuantizedNetwork compiled = compile_student(student, cfg.frac_bits);
  r.teacher = evaluate_network(teacher, test, cfg.attack);
  r.student = evaluate_student(student, compiled, test, cfg.attack);
  r.student_reference_clean = accuracy(infer_reference(compiled, test.inputs), test.labels);
  r.cost = cost_report(compiled);
  r.layers = summarize_layers(student, cfg.lambda_h);
  r.student_digest = fnv1a_hex(quantized_network_to_json(compiled).dump());
  r.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<ExperimentReport> beta_sweep(const QuantConfig& cfg, const Dataset& data, const std::vector<double>& grid) {
  for (double b : grid) {
    if (!(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("beta grid value outside [0, 1]: " + std::to_string(b));
  }
  std::vector<ExperimentReport> out;
  for (double b : grid) {
    QuantConfig c = cfg;
    c.gan.beta = b;
    out.push_back(run_experiment(c, data));
  }
  return out;
}

namespace {

json eval_to_json(const ModelEvaluation& e) {
  json adv = json::array();
  for (const auto& a : e.adversarial) adv.push_back({{"epsilon", a.epsilon}, {"accuracy", a.accuracy}});
  return {{"clean_accuracy", e.clean}, {"adversarial_accuracy", adv}};
}

ModelEvaluation eval_from_json(const json& j) {
  ModelEvaluation e;
  e.clean = j.at("clean_accuracy").get<double>();
  for (const auto& a : j.at("adversarial_accuracy")) {
    e.adversarial.push_back({a.at("epsilon").get<double>(), a.at("accuracy").get<double>()});
  }
  return e;
}

const std::vector<std::pair<const char*, std::vector<double> LossCurves::*>> kCurves = {
    {"teacher_task", &LossCurves::teacher_task}, {"task", &LossCurves::task},
    {"penalty", &LossCurves::penalty},           {"discriminator", &LossCurves::discriminator},
    {"structural", &LossCurves::structural},     {"total", &LossCurves::total},
};

}  // namespace

json report_to_json(const ExperimentReport& r) {
  json curves = json::object();
  for (const auto& [name, member] : kCurves) curves[name] = r.curves.*member;
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"dof", l.dof},
                      {"q", l.q},
                      {"a", l.a},
                      {"b", l.b},
                      {"p", l.p},
                      {"entropy", l.entropy},
                      {"objective", l.objective},
                      {"sigma", l.sigma},
                      {"histogram", l.histogram}});
  }
  return json{{"format", "shiftq-report"},
              {"version", 1},
              {"config", config_to_json(r.config)},
              {"dataset", r.dataset},
              {"seed", r.seed},
              {"teacher", eval_to_json(r.teacher)},
              {"student", eval_to_json(r.student)},
              {"student_reference_clean_accuracy", r.student_reference_clean},
              {"loss_curves", curves},
              {"cost",
               {{"macs_fp", r.cost.macs_fp},
                {"shiftadd_ops", r.cost.shiftadd_ops},
                {"residual_macs", r.cost.residual_macs},
                {"modeled_speedup", r.cost.modeled_speedup}}},
              {"layers", layers},
              {"student_digest", r.student_digest}};
}

ExperimentReport report_from_json(const json& j) {
  if (j.at("format").get<std::string>() != "shiftq-report" || j.at("version").get<int>() != 1) {
    throw std::invalid_argument("not a version-1 experiment report");
  }
  ExperimentReport r;
  r.config = config_from_json(j.at("config"));
  r.dataset = j.at("dataset").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.teacher = eval_from_json(j.at("teacher"));
  r.student = eval_from_json(j.at("student"));
  r.student_reference_clean = j.at("student_reference_clean_accuracy").get<double>();
  for (const auto& [name, member] : kCurves) r.curves.*member = j.at("loss_curves").at(name).get<std::vector<double>>();
  const json& c = j.at("cost");
  r.cost = {c.at("macs_fp").get<std::uint64_t>(), c.at("shiftadd_ops").get<std::uint64_t>(),
            c.at("residual_macs").get<std::uint64_t>(), c.at("modeled_speedup").get<double>()};
  for (const auto& l : j.at("layers")) {
    r.layers.push_back({l.at("layer").get<std::size_t>(), l.at("dof").get<double>(), l.at("q").get<double>(),
                        l.at("a").get<int>(), l.at("b").get<int>(), l.at("p").get<double>(),
                        l.at("entropy").get<double>(), l.at("objective").get<double>(),
                        l.at("sigma").get<double>(), l.at("histogram").get<std::vector<std::size_t>>()});
  }
  r.student_digest = j.at("student_digest").get<std::string>();
  return r;
}

void emit_report(const ExperimentReport& r, const std::filesystem::path& out, ReportFormat format) {
  if (format == ReportFormat::json) {
    write_text_file(out, report_to_json(r).dump(2) + "\n");
    return;
  }
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw std::runtime_error("cannot create " + out.string() + ": " + ec.message());
  for (const auto& [name, member] : kCurves) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,value\n";
    const auto& curve = r.curves.*member;
    for (std::size_t e = 0; e < curve.size(); ++e) os << e << ',' << curve[e] << '\n';
    write_text_file(out / (std::string(name) + ".csv"), os.str());
  }
}

std::string sweep_table(const std::vector<ExperimentReport>& reports, std::optional<double> epsilon) {
  std::ostringstream os;
  os.precision(17);
  os << "beta,accuracy\n";
  for (const auto& r : reports) {
    double acc = r.student.clean;
    if (epsilon) {
      const auto it = std::find_if(r.student.adversarial.begin(), r.student.adversarial.end(),
                                   [&](const EpsilonAccuracy& a) { return a.epsilon == *epsilon; });
      if (it == r.student.adversarial.end()) throw std::invalid_argument("epsilon not present in the report");
      acc = it->accuracy;
    }
    os << r.config.gan.beta << ',' << acc << '\n';
  }
  return os.str();
}

json student_to_json(const QuantizedStudent& student) {
  const StudentQuantOptions& o = student.options();
  const std::vector<double> dofs = student.layer_dofs();
  const double cutoff = student.cutoff();
  return json{{"format", "shiftq-student"},
              {"version", 1},
              {"latent", network_to_json(student.latent())},
              {"layer_dof", encode_f64_hex(dofs)},
              {"layer_count", dofs.size()},
              {"cutoff", encode_f64_hex(std::span<const double>(&cutoff, 1))},
              {"balance_signs", o.balance_signs},
              {"quantize_activations", o.quantize_activations}};
}

QuantizedStudent student_from_json(const json& j) {
  if (j.at("format").get<std::string>() != "shiftq-student" || j.at("version").get<int>() != 1) {
    throw std::invalid_argument("not a version-1 student checkpoint");
  }
  StudentQuantOptions o;
  o.layer_dof = decode_f64_hex(j.at("layer_dof").get<std::string>(), j.at("layer_count").get<std::size_t>());
  o.balance_signs = j.at("balance_signs").get<bool>();
  o.quantize_activations = j.at("quantize_activations").get<bool>();
  QuantizedStudent s(network_from_json(j.at("latent")), o);
  s.set_cutoff(decode_f64_hex(j.at("cutoff").get<std::string>(), 1)[0]);
  return s;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path default_output_dir() {
  const char* env = std::getenv("SHIFTQ_OUT_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("out");
}

}  // namespace shiftq
