#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "shiftq/checkpoint.hpp"
#include "shiftq/experiment.hpp"

using namespace shiftq;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("shiftq_test_" + name); }

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

QuantConfig quick_config() {
  QuantConfig c;
  c.optimizer.teacher_epochs = 2;
  c.optimizer.quant_epochs = 2;
  c.optimizer.gan_epochs = 1;
  c.cutoff_warmup_steps = 4;
  c.ablation = {true, false, true, true};
  return c;
}

Dataset quick_data() {
  SyntheticSpec s;
  s.train = 128;
  s.test = 64;
  return synthetic_dataset(s);
}

}  // namespace

TEST_CASE("config json round trip") {
  QuantConfig c;
  c.dof_n = 5.5;
  c.gan.beta = 0.3;
  c.ablation.use_lsgan = true;
  c.attack.epsilons = {0.0, 0.01};
  c.student_init = StudentInit::teacher;
  c.optimizer.seed = 12345678901234ULL;
  CHECK(config_from_json(config_to_json(c)) == c);
  QuantConfig a;
  a.dof_n.reset();
  const auto j = config_to_json(a);
  CHECK(j.at("dof_n") == "auto");
  CHECK(config_from_json(j) == a);
  const auto path = temp_path("cfg.json");
  save_config(c, path);
  CHECK(load_config(path) == c);
  fs::remove(path);
}

TEST_CASE("config parsing is strict about keys and values") {
  CHECK(config_from_json(nlohmann::json::object()) == QuantConfig{});
  CHECK_THROWS_WITH(config_from_json({{"lambda_x", 1}}), doctest::Contains("lambda_x"));
  CHECK_THROWS_WITH(config_from_json({{"gan", {{"betaa", 0.2}}}}), doctest::Contains("gan.betaa"));
  CHECK_THROWS(config_from_json({{"gan", {{"beta", 2.0}}}}));
  CHECK_THROWS(config_from_json({{"dof_n", "many"}}));
  CHECK_THROWS(config_from_json({{"dof_n", -1.0}}));
  CHECK_THROWS(config_from_json({{"student_init", "zeros"}}));
  CHECK_THROWS(load_config("/nonexistent/cfg.json"));
}

TEST_CASE("synthetic dataset is seeded and well formed") {
  const Dataset a = quick_data(), b = quick_data();
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.train_count == 128);
  CHECK(a.size() == 192);
  CHECK(a.image_shape() == Shape{1, 8, 8});
  CHECK_NOTHROW(a.validate());
  SyntheticSpec s;
  s.train = 128;
  s.test = 64;
  s.seed = 8;
  CHECK(!(synthetic_dataset(s).images == a.images));
  CHECK(a.train().size() == 128);
  CHECK(a.test().size() == 64);
}

TEST_CASE("csv loader") {
  const auto p = temp_path("data.csv");
  {
    std::ofstream out(p);
    out << "label,p0,p1,p2,p3\n1,0,255,51,102\n0,255,255,0,0\n\n2,0,0,0,0\n1,1,2,3,4\n";
  }
  const Dataset d = load_csv(p, 3, 0.25);
  CHECK(d.size() == 4);
  CHECK(d.train_count == 3);
  CHECK(d.image_shape() == Shape{1, 2, 2});
  CHECK(d.images[1] == 1.0);
  CHECK(d.images[2] == doctest::Approx(0.2));
  CHECK(d.labels == std::vector<std::size_t>{1, 0, 2, 1});
  {
    std::ofstream out(p);
    out << "label,p0,p1,p2\n1,0,255\n";
  }
  CHECK_THROWS_WITH(load_csv(p, 3, 0.25), doctest::Contains(":2:"));
  {
    std::ofstream out(p);
    out << "label,p0,p1,p2\n1,0,255,3\n0,x,1,1\n";
  }
  CHECK_THROWS_WITH(load_csv(p, 3, 0.25), doctest::Contains(":3: not a number"));
  {
    std::ofstream out(p);
    out << "label,p0,p1,p2\n1,0,255,3\n5,1,1,1\n";
  }
  CHECK_THROWS_AS(load_csv(p, 3, 0.25), DatasetError);
  {
    std::ofstream out(p);
    out << "label,p0,p1,p2\n1,0,256,3\n0,1,1,1\n";
  }
  CHECK_THROWS_AS(load_csv(p, 3, 0.25), DatasetError);
  fs::remove(p);
  CHECK_THROWS_AS(load_csv(p, 3, 0.25), DatasetError);
}

TEST_CASE("idx loader") {
  const auto img = temp_path("img.idx"), lab = temp_path("lab.idx");
  std::vector<unsigned char> ib = be32(0x803);
  for (auto v : {be32(4), be32(2), be32(3)}) ib.insert(ib.end(), v.begin(), v.end());
  for (int i = 0; i < 24; ++i) ib.push_back(static_cast<unsigned char>(i * 10));
  std::vector<unsigned char> lb = be32(0x801);
  auto n = be32(4);
  lb.insert(lb.end(), n.begin(), n.end());
  for (unsigned char y : {0, 1, 1, 0}) lb.push_back(y);
  write_bytes(img, ib);
  write_bytes(lab, lb);
  const Dataset d = load_idx(img, lab, 2, 0.5);
  CHECK(d.image_shape() == Shape{1, 2, 3});
  CHECK(d.train_count == 2);
  CHECK(d.images[5] == doctest::Approx(50.0 / 255));
  CHECK(d.labels == std::vector<std::size_t>{0, 1, 1, 0});
  CHECK_THROWS_AS(load_idx(img, lab, 1, 0.5), DatasetError);
  std::vector<unsigned char> bad = ib;
  bad[3] = 0x01;
  write_bytes(img, bad);
  CHECK_THROWS_WITH(load_idx(img, lab, 2, 0.5), doctest::Contains("magic"));
  ib.pop_back();
  write_bytes(img, ib);
  CHECK_THROWS_WITH(load_idx(img, lab, 2, 0.5), doctest::Contains("payload"));
  fs::remove(img);
  fs::remove(lab);
}

TEST_CASE("pipeline determinism and report round trip") {
  const QuantConfig cfg = quick_config();
  const Dataset data = quick_data();
  const ExperimentReport a = run_experiment(cfg, data);
  const ExperimentReport b = run_experiment(cfg, data);
  const std::string ja = report_to_json(a).dump(2);
  CHECK(ja == report_to_json(b).dump(2));
  CHECK(report_to_json(report_from_json(nlohmann::json::parse(ja))).dump(2) == ja);
  CHECK(a.curves.teacher_task.size() == 2);
  CHECK(a.curves.task.size() == 3);
  CHECK(a.cost.modeled_speedup == 4.0);
  CHECK(a.student.adversarial.size() == 4);
  CHECK(a.student.adversarial[0].accuracy == a.student.clean);
  REQUIRE(a.layers.size() == 3);
  for (const auto& l : a.layers) {
    CHECK(l.dof == 3.0);
    CHECK(l.q == 0.75);
    CHECK(l.sigma > 0.0);
    REQUIRE(l.histogram.size() == kHistogramBins);
  }
  const auto& h = a.layers[0].histogram;
  CHECK(std::accumulate(h.begin(), h.end(), std::size_t{0}) == cfg.model.conv_channels * 9);

  QuantConfig other = cfg;
  other.optimizer.seed = 2;
  CHECK(run_experiment(other, data).student_digest != a.student_digest);
}

TEST_CASE("phases run one at a time reproduce the full run") {
  const QuantConfig cfg = quick_config();
  const Dataset data = quick_data();
  const ExperimentReport full = run_experiment(cfg, data);
  const auto tpath = temp_path("teacher.json"), spath = temp_path("student.json");
  save_network(train_teacher(cfg, data), tpath);
  const Network teacher = load_network(tpath);
  write_text_file(spath, student_to_json(quantize_student(cfg, data, teacher)).dump());
  QuantizedStudent student = student_from_json(nlohmann::json::parse(read_text_file(spath)));
  selfref_finetune(cfg, data, teacher, student);
  CHECK(fnv1a_hex(quantized_network_to_json(compile_student(student, cfg.frac_bits)).dump()) == full.student_digest);
  fs::remove(tpath);
  fs::remove(spath);
}

TEST_CASE("student checkpoint round trip") {
  const QuantConfig cfg = quick_config();
  const Dataset data = quick_data();
  const Network teacher = train_teacher(cfg, data);
  const QuantizedStudent st = quantize_student(cfg, data, teacher);
  const QuantizedStudent back = student_from_json(student_to_json(st));
  CHECK(back.cutoff() == st.cutoff());
  CHECK(back.layer_dofs() == st.layer_dofs());
  CHECK(student_to_json(back) == student_to_json(st));
  CHECK(bitwise_equal(back.forward(data.test().inputs).logits, st.forward(data.test().inputs).logits));
}

TEST_CASE("report emission and sweep table") {
  QuantConfig cfg = quick_config();
  cfg.optimizer.teacher_epochs = 1;
  cfg.optimizer.quant_epochs = 1;
  const Dataset data = quick_data();
  const auto reports = beta_sweep(cfg, data, {0.0, 0.5});
  REQUIRE(reports.size() == 2);
  const std::string table = sweep_table(reports);
  CHECK(table.rfind("beta,accuracy\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);
  const auto dir = temp_path("curves");
  emit_report(reports[0], dir, ReportFormat::csv);
  const std::string task = read_text_file(dir / "task.csv");
  CHECK(task.rfind("epoch,value\n", 0) == 0);
  CHECK(std::count(task.begin(), task.end(), '\n') == 1 + static_cast<long>(reports[0].curves.task.size()));
  fs::remove_all(dir);
  const auto json_path = temp_path("report.json");
  emit_report(reports[1], json_path, ReportFormat::json);
  CHECK(report_from_json(nlohmann::json::parse(read_text_file(json_path))).config.gan.beta == 0.5);
  fs::remove(json_path);
}

TEST_CASE("output directory override") {
  setenv("SHIFTQ_OUT_DIR", "/tmp/shiftq_elsewhere", 1);
  CHECK(default_output_dir() == fs::path("/tmp/shiftq_elsewhere"));
  unsetenv("SHIFTQ_OUT_DIR");
  CHECK(default_output_dir() == fs::path("out"));
}
