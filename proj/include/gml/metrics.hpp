#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gml/data.hpp"

namespace gml {

struct ModelBundle;

struct EvalReport {
  double overall = 0.0;
  std::vector<std::optional<double>> per_class;  // empty when a class has no test samples
  std::vector<std::size_t> test_counts;          // test samples per class
  std::vector<std::size_t> train_counts;         // used to form the groups
  std::vector<Group> groups;
  std::optional<double> many, medium, few;       // unweighted means over member classes
  std::size_t num_samples = 0;

  std::optional<double> group_accuracy(Group g) const;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Predictions and labels over the same items. `groups` assigns every class.
EvalReport report_from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   const GroupSpec& groups, std::span<const std::size_t> train_counts);

// argmax of cosine logits (+ alpha * eta) over ds. Runs without a tape.
std::vector<int> predict(const ModelBundle& model, const Dataset& ds, std::span<const double> eta, double alpha,
                         std::size_t batch_size = 512);

EvalReport evaluate(const ModelBundle& model, const Dataset& ds, const GroupSpec& groups,
                    std::span<const std::size_t> train_counts, std::span<const double> eta, double alpha);

struct ConfusionCounts {
  std::vector<std::size_t> tp, fn, fp;

  static ConfusionCounts from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                          std::size_t num_classes);
};

struct IouAcc {
  std::vector<std::optional<double>> iou, acc;  // nullopt for skipped classes
  double miou = 0.0, macc = 0.0;
  std::vector<std::string> skipped;             // one record per skipped (class, metric)
};

IouAcc iou_and_acc(const ConfusionCounts& counts);

// Mutual information in nats of a joint table given row-major [rows, cols].
// Throws when an entry is negative or the table does not sum to 1 within 1e-12.
double exact_mi(std::span<const double> joint, std::size_t rows, std::size_t cols);

}  // namespace gml
