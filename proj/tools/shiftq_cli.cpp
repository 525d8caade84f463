#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "shiftq/checkpoint.hpp"
#include "shiftq/config.hpp"
#include "shiftq/dataset.hpp"
#include "shiftq/experiment.hpp"
#include "shiftq/robustness.hpp"
#include "shiftq/shiftadd.hpp"

using namespace shiftq;
namespace fs = std::filesystem;

namespace {

struct DataOptions {
  std::string format = "synthetic";
  std::string path;
  std::string labels;
  std::size_t num_classes = 10;
  double test_fraction = 0.25;
  SyntheticSpec synthetic;
};

// Command-line values that override the config file when given.
struct Overrides {
  std::optional<std::string> dof;
  std::optional<double> init_gain, finetune_lr, lr, lambda_h, lambda_sn, lambda_ls, margin_scale, beta, d_lr, c0;
  std::optional<std::size_t> teacher_epochs, quant_epochs, gan_epochs, batch_size, warmup;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> student_init;
  bool use_sil = false, use_gan_plain = false, use_lsgan = false, use_npl = false;
};

struct Common {
  std::string config;
  std::string out;
  DataOptions data;
  Overrides over;
};

void add_common(CLI::App* app, Common& c, bool with_data = true) {
  app->add_option("--config", c.config, "JSON config file (missing keys take defaults)");
  app->add_option("--out", c.out, "Output directory (default $SHIFTQ_OUT_DIR or ./out)");
  if (with_data) {
    app->add_option("--data-format", c.data.format, "synthetic, idx or csv")
        ->check(CLI::IsMember({"synthetic", "idx", "csv"}));
    app->add_option("--data", c.data.path, "IDX image file or CSV file");
    app->add_option("--labels", c.data.labels, "IDX label file");
    app->add_option("--num-classes", c.data.num_classes, "Class count for idx/csv labels");
    app->add_option("--test-fraction", c.data.test_fraction, "Trailing fraction held out for testing");
    app->add_option("--synthetic-seed", c.data.synthetic.seed, "Seed of the synthetic dataset");
    app->add_option("--synthetic-train", c.data.synthetic.train, "Synthetic training items");
    app->add_option("--synthetic-test", c.data.synthetic.test, "Synthetic test items");
    app->add_option("--block-shift", c.data.synthetic.block_shift, "Synthetic block class shift");
    app->add_option("--block-noise", c.data.synthetic.block_noise, "Synthetic block noise");
    app->add_option("--pixel-shift", c.data.synthetic.pixel_shift, "Synthetic per-pixel class shift");
    app->add_option("--pixel-noise", c.data.synthetic.pixel_noise, "Synthetic per-pixel noise");
  }
  Overrides& o = c.over;
  app->add_option("--dof", o.dof, "Degrees of freedom, a number or 'auto'");
  app->add_option("--lr", o.lr, "Learning rate");
  app->add_option("--finetune-lr", o.finetune_lr, "Fine-tune learning rate");
  app->add_option("--lambda-h", o.lambda_h, "Entropy weight (0 disables sign balancing)");
  app->add_option("--lambda-sn", o.lambda_sn, "Spectral penalty weight");
  app->add_option("--lambda-ls", o.lambda_ls, "Discriminator hinge weight");
  app->add_option("--margin-scale", o.margin_scale, "Margin scale");
  app->add_option("--beta", o.beta, "Structural loss weight in [0, 1]");
  app->add_option("--d-lr", o.d_lr, "Discriminator learning rate");
  app->add_option("--cutoff-c0", o.c0, "Initial straight-through cutoff");
  app->add_option("--cutoff-warmup", o.warmup, "Cutoff warmup steps");
  app->add_option("--teacher-epochs", o.teacher_epochs, "Teacher epochs");
  app->add_option("--quant-epochs", o.quant_epochs, "Straight-through epochs");
  app->add_option("--gan-epochs", o.gan_epochs, "Fine-tune epochs");
  app->add_option("--batch-size", o.batch_size, "Minibatch size");
  app->add_option("--seed", o.seed, "Training seed");
  app->add_option("--init-gain", o.init_gain, "Random student init gain");
  app->add_option("--student-init", o.student_init, "random or teacher")->check(CLI::IsMember({"random", "teacher"}));
  app->add_flag("--use-sil", o.use_sil, "Enable the feature matching term");
  app->add_flag("--use-gan-plain", o.use_gan_plain, "Enable the cross-entropy GAN term");
  app->add_flag("--use-lsgan", o.use_lsgan, "Enable the margin GAN term");
  app->add_flag("--use-npl", o.use_npl, "Enable the spectral penalty");
}

QuantConfig resolve_config(const Common& c) {
  nlohmann::json j = c.config.empty() ? nlohmann::json::object() : nlohmann::json::parse(read_text_file(c.config));
  QuantConfig cfg = config_from_json(j);
  const Overrides& o = c.over;
  if (o.dof) {
    if (*o.dof == "auto") {
      cfg.dof_n.reset();
    } else {
      cfg.dof_n = std::stod(*o.dof);
    }
  }
  if (o.lr) cfg.optimizer.lr = *o.lr;
  if (o.finetune_lr) cfg.optimizer.finetune_lr = *o.finetune_lr;
  if (o.lambda_h) cfg.lambda_h = *o.lambda_h;
  if (o.lambda_sn) cfg.lambda_sn = *o.lambda_sn;
  if (o.lambda_ls) cfg.gan.lambda_ls = *o.lambda_ls;
  if (o.margin_scale) cfg.gan.margin_scale = *o.margin_scale;
  if (o.beta) cfg.gan.beta = *o.beta;
  if (o.d_lr) cfg.gan.d_lr = *o.d_lr;
  if (o.c0) cfg.cutoff_c0 = *o.c0;
  if (o.warmup) cfg.cutoff_warmup_steps = *o.warmup;
  if (o.teacher_epochs) cfg.optimizer.teacher_epochs = *o.teacher_epochs;
  if (o.quant_epochs) cfg.optimizer.quant_epochs = *o.quant_epochs;
  if (o.gan_epochs) cfg.optimizer.gan_epochs = *o.gan_epochs;
  if (o.batch_size) cfg.optimizer.batch_size = *o.batch_size;
  if (o.seed) cfg.optimizer.seed = *o.seed;
  if (o.init_gain) cfg.student_init_gain = *o.init_gain;
  if (o.student_init) cfg.student_init = *o.student_init == "teacher" ? StudentInit::teacher : StudentInit::random;
  cfg.ablation.use_sil = cfg.ablation.use_sil || o.use_sil;
  cfg.ablation.use_gan_plain = cfg.ablation.use_gan_plain || o.use_gan_plain;
  cfg.ablation.use_lsgan = cfg.ablation.use_lsgan || o.use_lsgan;
  cfg.ablation.use_npl = cfg.ablation.use_npl || o.use_npl;
  cfg.validate();
  return cfg;
}

Dataset resolve_data(const DataOptions& d) {
  DatasetSource src;
  src.format = dataset_format_from_string(d.format);
  src.path = d.path;
  src.labels_path = d.labels;
  src.num_classes = d.num_classes;
  src.test_fraction = d.test_fraction;
  src.synthetic = d.synthetic;
  return load_dataset(src);
}

fs::path out_dir(const Common& c) {
  const fs::path dir = c.out.empty() ? default_output_dir() : fs::path(c.out);
  fs::create_directories(dir);
  return dir;
}

void print_eval(const std::string& name, const ModelEvaluation& e) {
  std::printf("%s clean accuracy %.4f\n", name.c_str(), e.clean);
  for (const auto& a : e.adversarial) {
    std::printf("%s fgsm eps=%.6f accuracy %.4f\n", name.c_str(), a.epsilon, a.accuracy);
  }
}

nlohmann::json read_json(const std::string& path) { return nlohmann::json::parse(read_text_file(path)); }

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> grid;
  if (spec.find(':') != std::string::npos) {
    double lo = 0, hi = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::istringstream is(spec);
    if (!(is >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0)) {
      throw std::invalid_argument("grid must be lo:hi:step or a comma list");
    }
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    for (long k = 0; k <= n; ++k) grid.push_back(std::round((lo + static_cast<double>(k) * step) * 1e12) / 1e12);
    return grid;
  }
  std::istringstream is(spec);
  std::string cell;
  while (std::getline(is, cell, ',')) grid.push_back(std::stod(cell));
  return grid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"2-bit shift-add quantization experiments"};
  app.require_subcommand(1);

  Common teacher_c;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train the full-precision network");
  add_common(teacher_cmd, teacher_c);

  Common quant_c;
  std::string quant_teacher;
  auto* quant_cmd = app.add_subcommand("quantize", "Build and train the 2-bit student");
  add_common(quant_cmd, quant_c);
  quant_cmd->add_option("--teacher", quant_teacher, "Teacher checkpoint")->required();

  Common fine_c;
  std::string fine_teacher, fine_student;
  auto* fine_cmd = app.add_subcommand("selfref-finetune", "Fine-tune the student against the teacher");
  add_common(fine_cmd, fine_c);
  fine_cmd->add_option("--teacher", fine_teacher, "Teacher checkpoint")->required();
  fine_cmd->add_option("--student", fine_student, "Student checkpoint")->required();

  Common eval_c;
  std::string eval_model;
  auto* eval_cmd = app.add_subcommand("eval", "Clean accuracy and cost of a checkpoint");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--model", eval_model, "Network, student or quantized checkpoint")->required();

  Common attack_c;
  std::string attack_model;
  std::vector<double> attack_eps;
  auto* attack_cmd = app.add_subcommand("attack", "FGSM accuracy of a checkpoint");
  add_common(attack_cmd, attack_c);
  attack_cmd->add_option("--model", attack_model, "Network or student checkpoint")->required();
  attack_cmd->add_option("--epsilon", attack_eps, "Budgets (default: config epsilons)");

  Common sweep_c;
  std::string sweep_grid = "0:1:0.1";
  auto* sweep_cmd = app.add_subcommand("sweep-beta", "One full run per beta");
  add_common(sweep_cmd, sweep_c);
  sweep_cmd->add_option("--grid", sweep_grid, "lo:hi:step or comma list")->capture_default_str();

  Common report_c;
  auto* report_cmd = app.add_subcommand("report", "Full pipeline with report and curve CSVs");
  add_common(report_cmd, report_c);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*teacher_cmd) {
      const QuantConfig cfg = resolve_config(teacher_c);
      const Dataset data = resolve_data(teacher_c.data);
      LossCurves curves;
      const Network net = train_teacher(cfg, data, &curves);
      const fs::path path = out_dir(teacher_c) / "teacher.json";
      save_network(net, path);
      print_eval("teacher", evaluate_network(net, data.test(), cfg.attack));
      std::printf("wrote %s\n", path.c_str());
    } else if (*quant_cmd) {
      const QuantConfig cfg = resolve_config(quant_c);
      const Dataset data = resolve_data(quant_c.data);
      const Network teacher = load_network(quant_teacher);
      const QuantizedStudent student = quantize_student(cfg, data, teacher);
      const fs::path dir = out_dir(quant_c);
      write_text_file(dir / "student.json", student_to_json(student).dump(1) + "\n");
      const QuantizedNetwork compiled = compile_student(student, cfg.frac_bits);
      save_quantized_network(compiled, dir / "student.quantized.json");
      print_eval("student", evaluate_student(student, compiled, data.test(), cfg.attack));
      std::printf("wrote %s and %s\n", (dir / "student.json").c_str(), (dir / "student.quantized.json").c_str());
    } else if (*fine_cmd) {
      const QuantConfig cfg = resolve_config(fine_c);
      const Dataset data = resolve_data(fine_c.data);
      const Network teacher = load_network(fine_teacher);
      QuantizedStudent student = student_from_json(read_json(fine_student));
      selfref_finetune(cfg, data, teacher, student);
      const fs::path dir = out_dir(fine_c);
      write_text_file(dir / "student_finetuned.json", student_to_json(student).dump(1) + "\n");
      const QuantizedNetwork compiled = compile_student(student, cfg.frac_bits);
      save_quantized_network(compiled, dir / "student_finetuned.quantized.json");
      print_eval("student", evaluate_student(student, compiled, data.test(), cfg.attack));
    } else if (*eval_cmd) {
      const Dataset data = resolve_data(eval_c.data);
      const Batch test = data.test();
      const nlohmann::json j = read_json(eval_model);
      const std::string format = j.at("format").get<std::string>();
      CostReport cost;
      double acc = 0.0;
      if (format == "shiftq-network") {
        const Network net = network_from_json(j);
        acc = accuracy(forward_pass(net, test).logits, test.labels);
        cost = cost_report(net);
      } else {
        const QuantizedNetwork q = format == "shiftq-student"
                                       ? compile_student(student_from_json(j), resolve_config(eval_c).frac_bits)
                                       : quantized_network_from_json(j);
        acc = accuracy(infer_shiftadd(q, test.inputs), test.labels);
        cost = cost_report(q);
      }
      std::printf("clean accuracy %.4f\n", acc);
      std::printf("macs_fp %llu shiftadd_ops %llu residual_macs %llu modeled_speedup %.4f\n",
                  static_cast<unsigned long long>(cost.macs_fp), static_cast<unsigned long long>(cost.shiftadd_ops),
                  static_cast<unsigned long long>(cost.residual_macs), cost.modeled_speedup);
    } else if (*attack_cmd) {
      QuantConfig cfg = resolve_config(attack_c);
      if (!attack_eps.empty()) cfg.attack.epsilons = attack_eps;
      const Dataset data = resolve_data(attack_c.data);
      const nlohmann::json j = read_json(attack_model);
      if (j.at("format").get<std::string>() == "shiftq-student") {
        const QuantizedStudent s = student_from_json(j);
        print_eval("student", evaluate_student(s, compile_student(s, cfg.frac_bits), data.test(), cfg.attack));
      } else {
        print_eval("network", evaluate_network(network_from_json(j), data.test(), cfg.attack));
      }
    } else if (*sweep_cmd) {
      const QuantConfig cfg = resolve_config(sweep_c);
      const Dataset data = resolve_data(sweep_c.data);
      const std::vector<ExperimentReport> reports = beta_sweep(cfg, data, parse_grid(sweep_grid));
      const fs::path dir = out_dir(sweep_c);
      const std::string table = sweep_table(reports);
      write_text_file(dir / "sweep_beta.csv", table);
      if (!cfg.attack.epsilons.empty()) {
        write_text_file(dir / "sweep_beta_adversarial.csv", sweep_table(reports, cfg.attack.epsilons.back()));
      }
      std::fputs(table.c_str(), stdout);
    } else if (*report_cmd) {
      const QuantConfig cfg = resolve_config(report_c);
      const Dataset data = resolve_data(report_c.data);
      const ExperimentReport r = run_experiment(cfg, data);
      const fs::path dir = out_dir(report_c);
      emit_report(r, dir / "report.json", ReportFormat::json);
      emit_report(r, dir / "curves", ReportFormat::csv);
      print_eval("teacher", r.teacher);
      print_eval("student", r.student);
      std::printf("modeled speedup %.4f, wall time %.2f s\n", r.cost.modeled_speedup, r.wall_time_seconds);
      std::printf("wrote %s\n", (dir / "report.json").c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
