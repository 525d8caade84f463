#include "shiftq/config.hpp"

#include <set>
#include <stdexcept>

#include "shiftq/checkpoint.hpp"

namespace shiftq {

using nlohmann::json;

void QuantConfig::validate() const {
  if (dof_n && !(*dof_n > 0.0)) throw std::invalid_argument("dof_n must be positive or \"auto\"");
  if (!(lambda_h >= 0.0)) throw std::invalid_argument("lambda_h must be >= 0");
  if (!(cutoff_c0 >= 1.0)) throw std::invalid_argument("cutoff.c0 must be >= 1");
  if (cutoff_warmup_steps == 0) throw std::invalid_argument("cutoff.warmup_steps must be positive");
  if (!(lambda_sn >= 0.0)) throw std::invalid_argument("lambda_sn must be >= 0");
  if (!(student_init_gain > 0.0)) throw std::invalid_argument("student_init_gain must be positive");
  if (spectral_iters == 0) throw std::invalid_argument("spectral_iters must be positive");
  gan.validate();
  if (!(optimizer.lr >= 0.0) || !(optimizer.finetune_lr >= 0.0)) {
    throw std::invalid_argument("optimizer learning rates must be >= 0");
  }
  if (optimizer.batch_size == 0) throw std::invalid_argument("optimizer.batch_size must be positive");
  if (model.conv_channels == 0 || model.hidden == 0 || model.kernel % 2 == 0) {
    throw std::invalid_argument("model needs positive widths and an odd kernel");
  }
  for (double e : attack.epsilons) AttackConfig{e, attack.lo, attack.hi}.validate();
  if (frac_bits < 4 || frac_bits > 30) throw std::invalid_argument("frac_bits must lie in [4, 30]");
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw std::invalid_argument("unknown config key " + where + "." + k);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json config_to_json(const QuantConfig& c) {
  return json{
      {"dof_n", c.dof_n ? json(*c.dof_n) : json("auto")},
      {"lambda_h", c.lambda_h},
      {"cutoff", {{"c0", c.cutoff_c0}, {"warmup_steps", c.cutoff_warmup_steps}}},
      {"lambda_sn", c.lambda_sn},
      {"spectral_iters", c.spectral_iters},
      {"gan",
       {{"lambda_ls", c.gan.lambda_ls},
        {"margin_scale", c.gan.margin_scale},
        {"beta", c.gan.beta},
        {"d_steps", c.gan.d_steps},
        {"g_steps", c.gan.g_steps},
        {"d_lr", c.gan.d_lr}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"finetune_lr", c.optimizer.finetune_lr},
        {"teacher_epochs", c.optimizer.teacher_epochs},
        {"quant_epochs", c.optimizer.quant_epochs},
        {"gan_epochs", c.optimizer.gan_epochs},
        {"batch_size", c.optimizer.batch_size},
        {"seed", c.optimizer.seed}}},
      {"ablation",
       {{"use_sil", c.ablation.use_sil},
        {"use_gan_plain", c.ablation.use_gan_plain},
        {"use_lsgan", c.ablation.use_lsgan},
        {"use_npl", c.ablation.use_npl}}},
      {"model", {{"conv_channels", c.model.conv_channels}, {"kernel", c.model.kernel}, {"hidden", c.model.hidden}}},
      {"attack", {{"epsilons", c.attack.epsilons}, {"lo", c.attack.lo}, {"hi", c.attack.hi}}},
      {"student_init", c.student_init == StudentInit::random ? "random" : "teacher"},
      {"student_init_gain", c.student_init_gain},
      {"quantize_activations", c.quantize_activations},
      {"frac_bits", c.frac_bits},
  };
}

QuantConfig config_from_json(const json& j) {
  reject_unknown(j,
                 {"dof_n", "lambda_h", "cutoff", "lambda_sn", "spectral_iters", "gan", "optimizer", "ablation", "model",
                  "attack", "student_init", "student_init_gain", "quantize_activations", "frac_bits"},
                 "config");
  QuantConfig c;
  if (j.contains("dof_n")) {
    const json& d = j.at("dof_n");
    if (d.is_string()) {
      if (d.get<std::string>() != "auto") throw std::invalid_argument("dof_n must be a number or \"auto\"");
      c.dof_n.reset();
    } else {
      c.dof_n = d.get<double>();
    }
  }
  read(j, "lambda_h", c.lambda_h);
  if (j.contains("cutoff")) {
    const json& s = j.at("cutoff");
    reject_unknown(s, {"c0", "warmup_steps"}, "cutoff");
    read(s, "c0", c.cutoff_c0);
    read(s, "warmup_steps", c.cutoff_warmup_steps);
  }
  read(j, "lambda_sn", c.lambda_sn);
  read(j, "spectral_iters", c.spectral_iters);
  if (j.contains("gan")) {
    const json& s = j.at("gan");
    reject_unknown(s, {"lambda_ls", "margin_scale", "beta", "d_steps", "g_steps", "d_lr"}, "gan");
    read(s, "lambda_ls", c.gan.lambda_ls);
    read(s, "margin_scale", c.gan.margin_scale);
    read(s, "beta", c.gan.beta);
    read(s, "d_steps", c.gan.d_steps);
    read(s, "g_steps", c.gan.g_steps);
    read(s, "d_lr", c.gan.d_lr);
  }
  if (j.contains("optimizer")) {
    const json& s = j.at("optimizer");
    reject_unknown(s, {"lr", "finetune_lr", "teacher_epochs", "quant_epochs", "gan_epochs", "batch_size", "seed"}, "optimizer");
    read(s, "lr", c.optimizer.lr);
    read(s, "finetune_lr", c.optimizer.finetune_lr);
    read(s, "teacher_epochs", c.optimizer.teacher_epochs);
    read(s, "quant_epochs", c.optimizer.quant_epochs);
    read(s, "gan_epochs", c.optimizer.gan_epochs);
    read(s, "batch_size", c.optimizer.batch_size);
    read(s, "seed", c.optimizer.seed);
  }
  if (j.contains("ablation")) {
    const json& s = j.at("ablation");
    reject_unknown(s, {"use_sil", "use_gan_plain", "use_lsgan", "use_npl"}, "ablation");
    read(s, "use_sil", c.ablation.use_sil);
    read(s, "use_gan_plain", c.ablation.use_gan_plain);
    read(s, "use_lsgan", c.ablation.use_lsgan);
    read(s, "use_npl", c.ablation.use_npl);
  }
  if (j.contains("model")) {
    const json& s = j.at("model");
    reject_unknown(s, {"conv_channels", "kernel", "hidden"}, "model");
    read(s, "conv_channels", c.model.conv_channels);
    read(s, "kernel", c.model.kernel);
    read(s, "hidden", c.model.hidden);
  }
  if (j.contains("attack")) {
    const json& s = j.at("attack");
    reject_unknown(s, {"epsilons", "lo", "hi"}, "attack");
    read(s, "epsilons", c.attack.epsilons);
    read(s, "lo", c.attack.lo);
    read(s, "hi", c.attack.hi);
  }
  if (j.contains("student_init")) {
    const std::string s = j.at("student_init").get<std::string>();
    if (s == "random") {
      c.student_init = StudentInit::random;
    } else if (s == "teacher") {
      c.student_init = StudentInit::teacher;
    } else {
      throw std::invalid_argument("student_init must be \"random\" or \"teacher\"");
    }
  }
  read(j, "student_init_gain", c.student_init_gain);
  read(j, "quantize_activations", c.quantize_activations);
  read(j, "frac_bits", c.frac_bits);
  c.validate();
  return c;
}

QuantConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(json::parse(read_text_file(path)));
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void save_config(const QuantConfig& cfg, const std::filesystem::path& path) {
  write_text_file(path, config_to_json(cfg).dump(2) + "\n");
}

}  // namespace shiftq
