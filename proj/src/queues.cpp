#include "gml/queues.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gml/error.hpp"

namespace gml {

std::vector<std::size_t> largest_remainder(std::span<const double> targets, std::size_t total) {
  std::vector<std::size_t> out(targets.size());
  std::vector<double> frac(targets.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(targets[i] >= 0.0)) throw ValidationError("apportionment: negative target");
    const double fl = std::floor(targets[i]);
    out[i] = static_cast<std::size_t>(fl);
    frac[i] = targets[i] - fl;
    assigned += out[i];
  }
  if (assigned > total) throw ValidationError("apportionment: targets exceed the total");
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  std::size_t remaining = total - assigned;
  for (std::size_t i = 0; remaining > 0; i = (i + 1) % order.size(), --remaining) ++out[order[i]];
  return out;
}

QueuePlan apportion_capacities(const ClassPrior& prior, std::size_t k, std::size_t k_m) {
  const std::size_t classes = prior.num_classes();
  if (classes == 0) throw ValidationError("queue plan: no classes");
  if (k < k_m * classes) throw ValidationError("insufficient budget");
  const double spare = static_cast<double>(k - k_m * classes);
  std::vector<double> targets(classes);
  for (std::size_t c = 0; c < classes; ++c) targets[c] = static_cast<double>(k_m) + spare * prior.p[c];
  QueuePlan plan{k, k_m, largest_remainder(targets, k)};
  return plan;
}

QueuePlan plan_capacities(const ClassPrior& prior, std::size_t k, std::size_t k_m) {
  if (k_m < 1) throw ValidationError("queue plan: k_m must be >= 1");
  return apportion_capacities(prior, k, k_m);
}

// ---- ContrastBank ---------------------------------------------------------

Tensor ContrastBank::as_tensor() const {
  if (rows() == 0) throw ValidationError("contrast bank is empty");
  return Tensor({rows(), feature_dim}, features);
}

// ---- ClassQueueSet --------------------------------------------------------

std::size_t ClassQueueSet::Ring::slot(std::size_t age) const {
  // oldest entry sits at `next` once the ring has wrapped
  const std::size_t start = fill < capacity ? 0 : next;
  return (start + age) % capacity;
}

ClassQueueSet::ClassQueueSet(const QueuePlan& plan, std::size_t feature_dim) : feature_dim_(feature_dim) {
  if (feature_dim == 0) throw ValidationError("queues: feature_dim must be positive");
  for (auto cap : plan.capacities) {
    if (cap == 0) throw ValidationError("queues: every class needs a positive capacity");
    Ring r;
    r.capacity = cap;
    r.features.assign(cap * feature_dim, 0.0f);
    r.ids.assign(cap, 0);
    rings_.push_back(std::move(r));
  }
}

void ClassQueueSet::push(std::size_t cls, std::span<const double> feature, std::uint64_t sample_id) {
  if (cls >= rings_.size()) throw ValidationError("queues: class " + std::to_string(cls) + " out of range");
  if (feature.size() != feature_dim_) {
    throw ValidationError("queues: feature shape mismatch [" + std::to_string(feature.size()) + "] vs [" +
                          std::to_string(feature_dim_) + "]");
  }
  Ring& r = rings_[cls];
  float* dst = r.features.data() + r.next * feature_dim_;
  for (std::size_t d = 0; d < feature_dim_; ++d) dst[d] = static_cast<float>(feature[d]);
  r.ids[r.next] = sample_id;
  r.next = (r.next + 1) % r.capacity;
  r.fill = std::min(r.fill + 1, r.capacity);
}

std::vector<QueueEntry> ClassQueueSet::snapshot(std::size_t cls) const {
  const Ring& r = rings_.at(cls);
  std::vector<QueueEntry> out;
  out.reserve(r.fill);
  for (std::size_t age = 0; age < r.fill; ++age) {
    const std::size_t s = r.slot(age);
    const float* f = r.features.data() + s * feature_dim_;
    out.push_back(QueueEntry{std::vector<float>(f, f + feature_dim_), r.ids[s]});
  }
  return out;
}

ContrastBank ClassQueueSet::gather(std::size_t max_per_class, std::mt19937_64* rng) const {
  ContrastBank bank;
  bank.feature_dim = feature_dim_;
  bank.offsets.push_back(0);
  for (const Ring& r : rings_) {
    std::vector<std::size_t> ages(r.fill);
    std::iota(ages.begin(), ages.end(), std::size_t{0});
    if (max_per_class > 0 && r.fill > max_per_class) {
      if (rng == nullptr) throw ValidationError("queues: sub-sampling needs a generator");
      for (std::size_t i = 0; i < max_per_class; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, ages.size() - 1);
        std::swap(ages[i], ages[pick(*rng)]);
      }
      ages.resize(max_per_class);
      std::sort(ages.begin(), ages.end());
    }
    for (auto age : ages) {
      const std::size_t s = r.slot(age);
      const float* f = r.features.data() + s * feature_dim_;
      bank.features.insert(bank.features.end(), f, f + feature_dim_);
      bank.sample_ids.push_back(r.ids[s]);
    }
    bank.offsets.push_back(bank.sample_ids.size());
  }
  return bank;
}

bool ClassQueueSet::operator==(const ClassQueueSet& other) const {
  if (feature_dim_ != other.feature_dim_ || rings_.size() != other.rings_.size()) return false;
  for (std::size_t c = 0; c < rings_.size(); ++c) {
    if (capacity(c) != other.capacity(c) || fill(c) != other.fill(c)) return false;
    auto a = snapshot(c), b = other.snapshot(c);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].feature != b[i].feature || a[i].sample_id != b[i].sample_id) return false;
  }
  return true;
}

// ---- prefill --------------------------------------------------------------

Tensor batch_inputs(const Dataset& ds, std::span<const std::size_t> rows) {
  Shape shape{rows.size()};
  shape.insert(shape.end(), ds.input_shape.begin(), ds.input_shape.end());
  std::vector<double> values;
  values.reserve(rows.size() * ds.sample_size());
  for (auto r : rows) {
    auto x = ds.input(r);
    values.insert(values.end(), x.begin(), x.end());
  }
  return Tensor(std::move(shape), std::move(values));
}

void prefill(ClassQueueSet& queues, const FeatureFn& teacher, const Dataset& ds, std::size_t batch_size) {
  if (ds.num_classes != queues.num_classes()) throw ValidationError("prefill: dataset and queues disagree on class count");
  if (batch_size == 0) throw ValidationError("prefill: batch_size must be positive");
  TapeScope no_tape(nullptr);
  std::vector<std::size_t> pushed(queues.num_classes(), 0);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tensor features = teacher(batch_inputs(ds, rows));
    if (features.rank() != 2 || features.dim(0) != rows.size() || features.dim(1) != queues.feature_dim()) {
      throw ValidationError("prefill: teacher returned " + shape_str(features.shape()));
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto cls = static_cast<std::size_t>(ds.labels[rows[i]]);
      queues.push(cls, features.data().subspan(i * queues.feature_dim(), queues.feature_dim()), ds.sample_ids[rows[i]]);
      ++pushed[cls];
    }
  }
  for (std::size_t c = 0; c < pushed.size(); ++c) {
    if (pushed[c] == 0) throw ValidationError("prefill: class " + std::to_string(c) + " received no contrast entries");
  }
}

}  // namespace gml
