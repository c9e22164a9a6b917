#include "gml/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "gml/error.hpp"
#include "gml/model.hpp"
#include "gml/queues.hpp"

namespace gml {

namespace {

std::optional<double> class_mean(const std::vector<std::optional<double>>& per_class, std::span<const Group> groups,
                                 Group g) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (groups[c] != g || !per_class[c]) continue;
    total += *per_class[c];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

std::optional<double> EvalReport::group_accuracy(Group g) const {
  switch (g) {
    case Group::many: return many;
    case Group::medium: return medium;
    case Group::few: return few;
  }
  return std::nullopt;
}

EvalReport report_from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   const GroupSpec& groups, std::span<const std::size_t> train_counts) {
  if (labels.empty()) throw ValidationError("evaluate: empty dataset");
  if (predictions.size() != labels.size()) throw ValidationError("evaluate: prediction and label counts differ");
  const std::size_t classes = groups.assignment.size();
  if (train_counts.size() != classes) throw ValidationError("evaluate: train counts do not match the group assignment");

  EvalReport r;
  r.test_counts.assign(classes, 0);
  std::vector<std::size_t> correct(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ValidationError("evaluate: label " + std::to_string(y) + " out of range");
    ++r.test_counts[y];
    if (predictions[i] == y) ++correct[y];
  }
  r.num_samples = labels.size();
  r.overall = static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) /
              static_cast<double>(labels.size());
  r.per_class.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.test_counts[c] > 0) r.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(r.test_counts[c]);
  }
  r.train_counts.assign(train_counts.begin(), train_counts.end());
  r.groups = groups.assignment;
  r.many = class_mean(r.per_class, r.groups, Group::many);
  r.medium = class_mean(r.per_class, r.groups, Group::medium);
  r.few = class_mean(r.per_class, r.groups, Group::few);
  return r;
}

std::vector<int> predict(const ModelBundle& model, const Dataset& ds, std::span<const double> eta, double alpha,
                         std::size_t batch_size) {
  TapeScope no_tape(nullptr);
  std::vector<int> out;
  out.reserve(ds.size());
  const std::size_t classes = model.classifier.num_classes();
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tensor logits = model.classifier.logits(model.encoder.encode(batch_inputs(ds, rows)), eta, alpha);
    auto v = logits.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto row = v.subspan(i * classes, classes);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

EvalReport evaluate(const ModelBundle& model, const Dataset& ds, const GroupSpec& groups,
                    std::span<const std::size_t> train_counts, std::span<const double> eta, double alpha) {
  if (ds.size() == 0) throw ValidationError("evaluate: empty dataset");
  if (ds.num_classes != model.classifier.num_classes()) {
    throw ValidationError("evaluate: dataset has " + std::to_string(ds.num_classes) + " classes, classifier.weight has " +
                          std::to_string(model.classifier.num_classes()));
  }
  auto predictions = predict(model, ds, eta, alpha);
  return report_from_predictions(predictions, ds.labels, groups, train_counts);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["num_samples"] = num_samples;
  j["acc_all"] = overall;
  j["acc_many"] = opt_json(many);
  j["acc_med"] = opt_json(medium);
  j["acc_few"] = opt_json(few);
  auto classes = nlohmann::json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    classes.push_back({{"class", c},
                       {"group", group_name(groups[c])},
                       {"train_count", train_counts[c]},
                       {"test_count", test_counts[c]},
                       {"accuracy", opt_json(per_class[c])}});
  }
  j["per_class"] = std::move(classes);
  return j;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-8s %-7s %11s %10s %9s\n", "class", "group", "train_count", "test_count", "accuracy");
  os << line;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    std::snprintf(line, sizeof line, "%-8zu %-7s %11zu %10zu %9s\n", c, group_name(groups[c]), train_counts[c],
                  test_counts[c], opt_str(per_class[c]).c_str());
    os << line;
  }
  os << '\n';
  std::snprintf(line, sizeof line, "%-8s %9s\n", "group", "accuracy");
  os << line;
  const std::pair<const char*, std::optional<double>> rows[] = {
      {"all", overall}, {"many", many}, {"medium", medium}, {"few", few}};
  for (const auto& [name, v] : rows) {
    std::snprintf(line, sizeof line, "%-8s %9s\n", name, opt_str(v).c_str());
    os << line;
  }
  return os.str();
}

ConfusionCounts ConfusionCounts::from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                                  std::size_t num_classes) {
  if (predictions.size() != labels.size()) throw ValidationError("confusion: prediction and label counts differ");
  ConfusionCounts cc{std::vector<std::size_t>(num_classes, 0), std::vector<std::size_t>(num_classes, 0),
                     std::vector<std::size_t>(num_classes, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto p = static_cast<std::size_t>(predictions[i]);
    if (y >= num_classes || p >= num_classes) throw ValidationError("confusion: class index out of range");
    if (y == p) {
      ++cc.tp[y];
    } else {
      ++cc.fn[y];
      ++cc.fp[p];
    }
  }
  return cc;
}

IouAcc iou_and_acc(const ConfusionCounts& counts) {
  const std::size_t classes = counts.tp.size();
  if (counts.fn.size() != classes || counts.fp.size() != classes) throw ValidationError("confusion: ragged counts");
  IouAcc out;
  out.iou.resize(classes);
  out.acc.resize(classes);
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double tp = static_cast<double>(counts.tp[c]);
    const std::size_t union_n = counts.tp[c] + counts.fn[c] + counts.fp[c];
    const std::size_t truth_n = counts.tp[c] + counts.fn[c];
    if (union_n > 0) {
      out.iou[c] = tp / static_cast<double>(union_n);
      iou_sum += *out.iou[c];
      ++iou_n;
    } else {
      out.skipped.push_back("class " + std::to_string(c) + ": IoU skipped, TP+FN+FP = 0");
    }
    if (truth_n > 0) {
      out.acc[c] = tp / static_cast<double>(truth_n);
      acc_sum += *out.acc[c];
      ++acc_n;
    } else {
      out.skipped.push_back("class " + std::to_string(c) + ": Acc skipped, TP+FN = 0");
    }
  }
  out.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  out.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
  return out;
}

double exact_mi(std::span<const double> joint, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0 || joint.size() != rows * cols) throw ValidationError("exact_mi: table shape mismatch");
  double total = 0.0;
  for (double v : joint) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("exact_mi: negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("exact_mi: table is not normalized");
  std::vector<double> px(rows, 0.0), py(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      px[i] += joint[i * cols + j];
      py[j] += joint[i * cols + j];
    }
  double mi = 0.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = joint[i * cols + j];
      if (p > 0.0) mi += p * std::log(p / (px[i] * py[j]));
    }
  return mi;
}

}  // namespace gml
