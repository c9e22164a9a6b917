#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gml/checkpoint.hpp"
#include "gml/config.hpp"
#include "gml/metrics.hpp"
#include "gml/model.hpp"

namespace gml {

struct Schedule {
  std::string kind = "cosine";          // cosine | step
  double base_lr = 0.05;
  std::vector<std::size_t> milestones;  // same unit as `step`
  double factor = 0.1;
};

// cosine: base * (1 + cos(pi * step / total)) / 2; step: base * factor^(milestones passed).
double lr_at(const Schedule& schedule, std::size_t step, std::size_t total_steps);

struct OptimizerState {
  std::vector<std::vector<double>> buffers;  // one per parameter, zeros until the first step
};

// v <- momentum * v + grad + wd * param; param <- param - lr * v. Parameters
// whose `decay` flag is 0 skip the weight-decay term. Every gradient is checked
// before anything changes; a non-finite entry throws NumericalError.
void sgd_step(std::span<const NamedTensor> params, OptimizerState& state, double lr, double momentum,
              double weight_decay, std::span<const std::uint8_t> decay = {});

// Batch-level view generation for [n, ...] inputs; one draw per sample in
// row order. flip_crop needs [n, C, H, W] images.
Tensor augment(const AugmentSpec& spec, const Tensor& batch, std::mt19937_64& rng);

struct LogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_cls = 0.0, loss_gml = 0.0, loss_kd = 0.0;
  double tau_g = 0.0;
  double lr = 0.0;
  std::optional<double> acc_all, acc_many, acc_med, acc_few;
};

std::string log_header(const std::string& config_hash);
std::string format_log_row(const LogRow& row);

enum class Stage { teacher, student };
const char* stage_name(Stage s);

struct TeacherArtifact {
  ModelBundle model;
  ExperimentConfig config;
  std::string config_hash;
  nlohmann::json metrics;
};

struct TrainOptions {
  std::filesystem::path out_dir;         // empty: nothing is written
  std::optional<std::size_t> stop_after; // end the run after this epoch (its checkpoint is written)
  std::function<void(const LogRow&)> on_epoch;
};

struct TrainResult {
  ModelBundle model;
  std::vector<LogRow> rows;
  std::vector<double> smoothed_loss;  // exponentially smoothed total loss at each epoch end
  std::optional<EvalReport> final_report;
  std::vector<std::string> warnings;
  std::string config_hash;
  std::filesystem::path final_checkpoint;
};

TrainResult train_teacher(const ExperimentConfig& config, const DataSplits& data, const TrainOptions& options = {});

// `teacher` may be null only when config.train.use_teacher is false.
TrainResult train_student(const ExperimentConfig& config, const TeacherArtifact* teacher, const DataSplits& data,
                          const TrainOptions& options = {});

// Continues the run saved in `ckpt`; rows already logged are carried over.
TrainResult resume_training(const Checkpoint& ckpt, const TeacherArtifact* teacher, const DataSplits& data,
                            const TrainOptions& options = {});

struct CheckpointInfo {
  Stage stage = Stage::teacher;
  ExperimentConfig config;
  std::string config_hash;
  std::size_t epoch = 0;
  Shape input_shape;
  std::vector<std::size_t> train_counts;
  std::string teacher_hash;
  nlohmann::json metrics;
};

CheckpointInfo checkpoint_info(const Checkpoint& ckpt);
ModelBundle model_from_checkpoint(const Checkpoint& ckpt);
TeacherArtifact teacher_from_checkpoint(const Checkpoint& ckpt);

struct CheckpointEval {
  EvalReport report;
  double alpha = 0.0;
  std::string config_hash;
};

// Evaluates on `data_path` (manifest, CIFAR batch or CSV), or on the config's
// test split when empty. Groups and eta come from the stored training counts;
// alpha defaults to the config's eval.alpha.
CheckpointEval evaluate_checkpoint(const Checkpoint& ckpt, const std::string& data_path = {},
                                   std::optional<double> alpha = std::nullopt);

// Independent streams derived from one seed.
struct RngStreams {
  std::mt19937_64 init_core, init_heads, shuffle, aug, contrast;

  explicit RngStreams(std::uint64_t seed);
  std::string save() const;  // shuffle, aug and contrast; init streams are spent at construction
  void load(const std::string& text);
};

}  // namespace gml
