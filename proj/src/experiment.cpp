#include "gml/experiment.hpp"

#include <chrono>

#include "gml/trainer.hpp"

namespace gml {

ExperimentConfig desk_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.dataset.source = "synthetic";
  c.dataset.num_classes = 10;
  c.dataset.imbalance_factor = 100.0;
  c.dataset.seed = seed;
  c.dataset.synthetic.n_max = 500;
  c.dataset.synthetic.test_per_class = 1000;
  c.model.hidden = {64};
  c.model.feature_dim = 32;
  c.queues.k = 1024;
  c.queues.k_m = 2;
  c.loss.train_tau_g = true;
  c.train.epochs = 30;
  c.train.batch_size = 64;
  c.train.base_lr = 0.05;
  c.train.seed = seed;
  c.train.classifier_view = {"gaussian_noise", 0.05, 0};
  c.train.contrast_view = {"gaussian_noise", 0.05, 0};
  c.eval.every = 1000000;
  return c;
}

ExperimentConfig desk_teacher_config(const ExperimentConfig& base) {
  ExperimentConfig t = base;
  t.model.hidden = {128, 128};
  t.train.seed = base.train.seed + 1000;
  return t;
}

namespace {

VariantOutcome outcome(const TrainResult& r) {
  return VariantOutcome{*r.final_report, r.model.tau_g(), r.smoothed_loss};
}

}  // namespace

DeskSeedResult run_desk_seed(std::uint64_t seed, const std::filesystem::path& out_dir) {
  const ExperimentConfig base = desk_config(seed);
  return run_desk_variants(base, desk_teacher_config(base), out_dir);
}

DeskSeedResult run_desk_variants(const ExperimentConfig& base, const ExperimentConfig& teacher_config,
                                 const std::filesystem::path& out_dir) {
  const auto started = std::chrono::steady_clock::now();
  const DataSplits data = load_data(base.dataset);
  auto options = [&out_dir](const char* name) {
    TrainOptions o;
    if (!out_dir.empty()) o.out_dir = out_dir / name;
    return o;
  };

  DeskSeedResult result;
  result.seed = base.train.seed;

  ExperimentConfig plain = base;
  plain.loss.alpha = 0.0;
  result.variants["plain_ce"] = outcome(train_teacher(plain, data, options("plain_ce")));
  result.variants["cls_only"] = outcome(train_teacher(base, data, options("cls_only")));

  ExperimentConfig alone = base;
  alone.train.use_teacher = false;
  alone.loss.alpha_kd = 0.0;
  result.variants["gml_no_teacher"] = outcome(train_student(alone, nullptr, data, options("gml_no_teacher")));

  const TrainResult t = train_teacher(teacher_config, data, options("teacher"));
  const TeacherArtifact teacher{t.model, teacher_config, t.config_hash, t.final_report->to_json()};
  result.variants["gml_teacher"] = outcome(train_student(base, &teacher, data, options("gml_teacher")));
  result.teacher = outcome(t);

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace gml
