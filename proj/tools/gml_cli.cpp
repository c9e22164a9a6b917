// gml: dataset building, teacher/student training, evaluation and the
// verification suites.
//
// Exit status: 0 success, 1 validation error (bad input, config, or files),
// 2 runtime failure (numerical divergence, failed verification, I/O mid-run).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gml/checkpoint.hpp"
#include "gml/config.hpp"
#include "gml/data.hpp"
#include "gml/error.hpp"
#include "gml/metrics.hpp"
#include "gml/trainer.hpp"
#include "gml/verify.hpp"

namespace fs = std::filesystem;
using namespace gml;

namespace {

// Parsed and validated so a bad value is reported; the engine runs one thread.
std::size_t threads_from_env() {
  const char* raw = std::getenv("GML_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1) throw ValidationError(std::string("GML_THREADS must be a positive integer, got '") + raw + "'");
  return static_cast<std::size_t>(v);
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

int cmd_make_longtail(const fs::path& config_path, const fs::path& out) {
  const ExperimentConfig config = load_config(config_path);
  std::vector<std::string> warnings;
  const DatasetManifest m = make_longtail(config, out, &warnings);
  print_warnings(warnings);

  std::printf("config_hash %s\n", m.config_hash.c_str());
  std::printf("%-6s %8s\n", "class", "count");
  for (std::size_t c = 0; c < m.counts.size(); ++c) std::printf("%-6zu %8zu\n", c, m.counts[c]);
  std::printf("total  %8zu\n", std::accumulate(m.counts.begin(), m.counts.end(), std::size_t{0}));
  std::printf("manifest %s\n", (out / "train.manifest.json").string().c_str());
  return 0;
}

void print_result(const TrainResult& r) {
  print_warnings(r.warnings);
  if (r.final_report) std::cout << r.final_report->to_table();
  if (!r.final_checkpoint.empty()) std::cout << "checkpoint " << r.final_checkpoint.string() << '\n';
  std::cout << "config_hash " << r.config_hash << '\n';
}

int cmd_train(const std::string& config_path, const std::string& stage, const std::string& teacher_path,
              const std::string& resume_path, const fs::path& out) {
  if (stage != "teacher" && stage != "student") throw ValidationError("--stage must be teacher or student");

  // Every input is checked before any data is built or a model is trained.
  std::optional<Checkpoint> resume;
  ExperimentConfig config;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    const CheckpointInfo info = checkpoint_info(*resume);
    if (stage_name(info.stage) != stage) {
      throw ValidationError("--resume checkpoint is a " + std::string(stage_name(info.stage)) + " checkpoint");
    }
    config = info.config;
  } else {
    if (config_path.empty()) throw ValidationError("--config is required unless --resume is given");
    config = load_config(config_path);
  }
  std::optional<TeacherArtifact> teacher;
  if (stage == "student" && config.train.use_teacher) {
    if (teacher_path.empty()) throw ValidationError("student stage requires --teacher-ckpt");
    teacher = teacher_from_checkpoint(load_checkpoint(teacher_path));
  }

  std::vector<std::string> warnings;
  const DataSplits data = load_data(config.dataset, &warnings);
  print_warnings(warnings);

  TrainOptions options;
  options.out_dir = out;
  options.on_epoch = [](const LogRow& row) { std::cout << format_log_row(row) << std::flush; };
  std::cout << "epoch,step,loss_cls,loss_gml,loss_kd,tau_g,lr,acc_all,acc_many,acc_med,acc_few\n";
  const TeacherArtifact* t = teacher ? &*teacher : nullptr;
  TrainResult r = resume ? resume_training(*resume, t, data, options)
                         : (stage == "teacher" ? train_teacher(config, data, options)
                                               : train_student(config, t, data, options));
  print_result(r);
  return 0;
}

int cmd_eval(const fs::path& ckpt_path, const std::string& data_path, std::optional<double> alpha) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const CheckpointEval result = evaluate_checkpoint(ckpt, data_path, alpha);
  const EvalReport& report = result.report;
  nlohmann::json j = report.to_json();
  j["alpha"] = result.alpha;
  j["config_hash"] = result.config_hash;
  j["checkpoint"] = ckpt_path.string();
  std::cout << j.dump(2) << '\n' << report.to_table();
  return 0;
}

int cmd_verify(const std::string& suite, const std::string& fault) {
  VerifyOptions opts;
  if (fault == "eta-sign") {
    opts.eta_sign = -1.0;
  } else if (!fault.empty()) {
    throw ValidationError("unknown fault '" + fault + "' (eta-sign)");
  }
  bool ok = true;
  for (const auto& report : run_suites(suite, opts)) {
    std::cout << report.to_text() << std::flush;
    ok = ok && report.passed();
  }
  std::cout << (ok ? "verify: PASS\n" : "verify: FAIL\n");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-tailed classification with Gaussian-mixture-likelihood losses"};
  app.require_subcommand(1);

  std::string config_path, out_dir, stage = "teacher", teacher_ckpt, resume, ckpt, data, suite = "all", fault;
  std::optional<double> alpha;

  auto* make = app.add_subcommand("make-longtail", "Build a long-tailed dataset and its manifest");
  make->add_option("--config", config_path, "Experiment config (JSON)")->required();
  make->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a teacher or student model");
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--stage", stage, "teacher | student")->check(CLI::IsMember({"teacher", "student"}));
  train->add_option("--teacher-ckpt", teacher_ckpt, "Frozen teacher checkpoint (student stage)");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--out", out_dir, "Output directory for log.csv and checkpoints")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data, "Dataset file (manifest .json, CIFAR .bin, or CSV); default: config test split");
  eval->add_option("--alpha", alpha, "Prediction-time logit adjustment scale");

  auto* verify = app.add_subcommand("verify", "Run property suites");
  verify->add_option("--suite", suite, "identities | gradients | queues | bounds | all")
      ->check(CLI::IsMember({"identities", "gradients", "queues", "bounds", "all"}));
  verify->add_option("--fault", fault, "Inject a known defect (eta-sign) to check the suite catches it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    threads_from_env();
    if (*make) return cmd_make_longtail(config_path, out_dir);
    if (*train) return cmd_train(config_path, stage, teacher_ckpt, resume, out_dir);
    if (*eval) return cmd_eval(ckpt, data, alpha);
    return cmd_verify(suite, fault);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
