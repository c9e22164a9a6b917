#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gml {

// Labeled samples with a fixed per-sample shape. Inputs are stored as float;
// models widen to double when they build tensors.
struct Dataset {
  std::vector<std::size_t> input_shape;  // e.g. {2} or {3, 32, 32}
  std::vector<float> inputs;             // size() * sample_size(), row-major per sample
  std::vector<int> labels;
  std::vector<std::uint64_t> sample_ids;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const;
  std::span<const float> input(std::size_t i) const;

  std::vector<std::size_t> class_counts() const;

  // Throws ValidationError naming the first broken invariant.
  void validate() const;

  // Rows `indices` in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct ClassPrior {
  std::vector<std::size_t> counts;
  std::vector<double> p;
  std::vector<double> eta;  // log p

  std::size_t num_classes() const { return counts.size(); }
};

ClassPrior estimate_prior(std::span<const int> labels, std::size_t num_classes);
ClassPrior prior_from_counts(std::span<const std::size_t> counts);

enum class Group { many, medium, few };
const char* group_name(Group g);

struct GroupSpec {
  std::size_t many_threshold = 100;
  std::size_t few_threshold = 20;
  std::vector<Group> assignment;
};

// many iff count > many_threshold, few iff count < few_threshold, else medium.
GroupSpec assign_groups(std::span<const std::size_t> counts, std::size_t many_threshold = 100,
                        std::size_t few_threshold = 20);

// Per-class keep counts, class index == frequency rank (0 is the head class).
// round(n_max * IF^(-c/(C-1))), zeros clamped to 1.
std::vector<std::size_t> exponential_profile(std::size_t num_classes, std::size_t n_max, double imbalance_factor);
// round(n_max * (1 + c/(C-1))^-(alpha+1)): a Pareto(alpha) density read over
// x in [1, 2] and scaled so the head keeps n_max. Zeros clamped to 1.
std::vector<std::size_t> pareto_profile(std::size_t num_classes, std::size_t n_max, double alpha);

// Keeps min(target[c], available[c]) samples per class, chosen uniformly without
// replacement with `seed`; kept rows stay in source order. Clamps and shortfalls
// are reported through `warnings`.
Dataset subsample_to_counts(const Dataset& source, std::span<const std::size_t> targets, std::uint64_t seed,
                            std::vector<std::string>* warnings = nullptr);

// n_max is the largest class count of `source`.
Dataset make_exponential_longtail(const Dataset& source, double imbalance_factor, std::uint64_t seed,
                                  std::vector<std::string>* warnings = nullptr);
Dataset make_pareto_longtail(const Dataset& source, double alpha, std::uint64_t seed,
                             std::vector<std::string>* warnings = nullptr);

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t dim = 2;
  double means_radius = 1.0;
  double sigma = 0.3;
  std::vector<std::size_t> counts;  // per class
  std::uint64_t seed = 0;
  std::uint64_t first_sample_id = 0;
};

// Class c ~ N(mu_c, sigma^2 I) with mu_c on a circle of `means_radius` in the
// first two coordinates at angle 2*pi*c/C. Samples are emitted class by class.
Dataset synth_gaussian_dataset(const SyntheticSpec& spec);

// CSV: header row, feature columns, final integer label column.
Dataset read_csv_dataset(const std::filesystem::path& path, std::size_t num_classes = 0);
void write_csv_dataset(const Dataset& ds, const std::filesystem::path& path);

// CIFAR binary batch: 3073-byte records (label byte + 3072 pixel bytes, R/G/B
// planes). Pixels load as value/255.
inline constexpr std::size_t kCifarRecordBytes = 3073;
Dataset read_cifar_batches(std::span<const std::filesystem::path> paths, std::size_t num_classes = 10);
void write_cifar_batch(const Dataset& ds, const std::filesystem::path& path);

struct DatasetManifest {
  std::string format;  // "csv" | "cifar"
  std::string path;    // relative paths resolve against the manifest directory
  std::size_t num_classes = 0;
  double imbalance_factor = 0.0;  // 0: not recorded
  bool has_seed = false;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::size_t> counts;
};

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);
Dataset load_manifest_dataset(const std::filesystem::path& manifest_path);

}  // namespace gml
