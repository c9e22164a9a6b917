#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "gml/autodiff.hpp"
#include "gml/data.hpp"

namespace gml {

struct QueuePlan {
  std::size_t total = 0;
  std::size_t min_per_class = 0;
  std::vector<std::size_t> capacities;
};

// Rounds non-negative real targets to integers summing exactly to `total`:
// floor, then hand out the remainder by largest fractional part, ties to the
// lower index.
std::vector<std::size_t> largest_remainder(std::span<const double> targets, std::size_t total);

// Capacity of class c targets k_m + (k - k_m*C) * p(c), apportioned so the
// capacities sum to k and each stays >= k_m. Requires k_m >= 1.
QueuePlan plan_capacities(const ClassPrior& prior, std::size_t k, std::size_t k_m);
// Same apportionment without the k_m >= 1 requirement.
QueuePlan apportion_capacities(const ClassPrior& prior, std::size_t k, std::size_t k_m);

struct QueueEntry {
  std::vector<float> feature;
  std::uint64_t sample_id = 0;
};

// All queued entries laid out class by class, oldest first within a class.
struct ContrastBank {
  std::vector<double> features;        // rows x feature_dim
  std::vector<std::size_t> offsets;    // num_classes + 1
  std::vector<std::uint64_t> sample_ids;
  std::size_t feature_dim = 0;

  std::size_t rows() const { return sample_ids.size(); }
  Tensor as_tensor() const;
};

// One fixed-capacity FIFO per class. Features are held at float precision.
class ClassQueueSet {
 public:
  ClassQueueSet(const QueuePlan& plan, std::size_t feature_dim);

  void push(std::size_t cls, std::span<const double> feature, std::uint64_t sample_id);
  std::vector<QueueEntry> snapshot(std::size_t cls) const;

  std::size_t num_classes() const { return rings_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t capacity(std::size_t cls) const { return rings_.at(cls).capacity; }
  std::size_t fill(std::size_t cls) const { return rings_.at(cls).fill; }

  // Every class contributes at most `max_per_class` entries (0 keeps all),
  // picked uniformly without replacement by `rng` when it has more.
  ContrastBank gather(std::size_t max_per_class = 0, std::mt19937_64* rng = nullptr) const;

  bool operator==(const ClassQueueSet& other) const;

 private:
  struct Ring {
    std::size_t capacity = 0;
    std::size_t next = 0;  // slot the next push writes
    std::size_t fill = 0;
    std::vector<float> features;
    std::vector<std::uint64_t> ids;

    std::size_t slot(std::size_t age) const;  // age 0 = oldest
  };
  std::vector<Ring> rings_;
  std::size_t feature_dim_;
};

// Maps a [n, ...] input batch to [n, feature_dim] features.
using FeatureFn = std::function<Tensor(const Tensor& batch)>;

// Packs rows of `ds` into an input tensor of shape [n, input_shape...].
Tensor batch_inputs(const Dataset& ds, std::span<const std::size_t> rows);

// One pass over `ds` in order, pushing every sample's feature under its label.
// Runs with recording disabled. Throws if some class received no entry.
void prefill(ClassQueueSet& queues, const FeatureFn& teacher, const Dataset& ds, std::size_t batch_size = 256);

}  // namespace gml
