#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gml/data.hpp"
#include "gml/losses.hpp"
#include "gml/model.hpp"

namespace gml {

struct SyntheticConfig {
  std::size_t dim = 2;
  double radius = 1.0;
  double sigma = 0.3;
  std::size_t n_max = 500;          // per-class count before the long-tail profile
  std::size_t test_per_class = 200; // balanced test split
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | csv | cifar | manifest
  std::string train_path;            // csv file, cifar directory, or manifest
  std::string test_path;             // optional; cifar defaults to <dir>/test_batch.bin
  std::size_t num_classes = 10;
  std::string profile = "exponential";  // exponential | pareto | none
  double imbalance_factor = 100.0;
  double pareto_alpha = 6.0;
  std::uint64_t seed = 0;
  std::size_t many_threshold = 100;
  std::size_t few_threshold = 20;
  SyntheticConfig synthetic;
};

struct ModelConfig {
  std::string encoder = "mlp";  // mlp | small_cnn
  std::vector<std::size_t> hidden{64};
  std::size_t feature_dim = 32;
  std::vector<std::size_t> conv_channels{16, 32};
  std::size_t projection_hidden = 0;  // 0: feature_dim
  std::size_t projection_dim = 0;     // 0: feature_dim / 2
};

struct QueueConfig {
  std::size_t k = 1024;
  std::size_t k_m = 2;
  std::size_t max_per_class = 0;  // per-step sub-sampling of each class set; 0 keeps all
  std::size_t prefill_batch = 256;
};

struct AugmentSpec {
  std::string kind = "none";  // none | gaussian_noise | flip_crop
  double sigma = 0.0;
  std::size_t pad = 4;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 0.05;
  std::string schedule = "cosine";  // cosine | step
  std::vector<std::size_t> milestones;  // epochs
  double factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  AugmentSpec classifier_view;
  AugmentSpec contrast_view;
  bool separate_views = true;  // L_GML reads a second draw of the batch; false reuses the classifier view
  bool use_teacher = true;     // false: queues hold the student's own features
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
};

struct EvalConfig {
  double alpha = 0.0;  // adjustment applied at prediction time; 0 targets a balanced test prior
  std::size_t every = 1;  // epochs between logged evaluations
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  QueueConfig queues;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;

  // Throws ValidationError for the first broken field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys take defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// 16 hex digits of FNV-1a over the canonical (sorted, compact) JSON dump.
std::string config_hash(const ExperimentConfig& config);
std::string fnv1a_hex(const std::string& bytes);

// Model layout for a stage: teacher models carry no heads; student models
// size their contrast head to `contrast_input_dim`.
ModelSpec model_spec(const ExperimentConfig& config, const Shape& input_shape, bool with_heads,
                     std::size_t contrast_input_dim = 0);

struct DataSplits {
  Dataset train;
  Dataset test;  // size 0 when unavailable
};

// Reads a manifest (.json), CIFAR batch (.bin) or CSV file by extension.
Dataset load_dataset_file(const std::filesystem::path& path, std::size_t num_classes = 0);

// Builds the long-tailed training split (and a test split when one exists)
// described by `config.dataset`.
DataSplits load_data(const DatasetConfig& config, std::vector<std::string>* warnings = nullptr);

// Builds the splits and writes <out>/train.{csv,bin} with train.manifest.json
// (and test.* when a test split exists). Returns the train manifest.
DatasetManifest make_longtail(const ExperimentConfig& config, const std::filesystem::path& out,
                              std::vector<std::string>* warnings = nullptr);

}  // namespace gml
