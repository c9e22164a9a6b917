#include "gml/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gml/error.hpp"
#include "gml/model.hpp"

namespace gml {

void LossConfig::validate() const {
  if (!(tau_g > 0.0)) throw ValidationError("loss: tau_g must be > 0");
  if (!(tau_s > 0.0)) throw ValidationError("loss: tau_s must be > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("loss: alpha must lie in [0, 1]");
  if (!(gamma >= 0.0) || !(beta >= 0.0) || !(alpha_kd >= 0.0)) throw ValidationError("loss: weights must be >= 0");
  if (!(kd_temperature > 0.0)) throw ValidationError("loss: kd_temperature must be > 0");
}

namespace {

Tensor as_matrix(const Tensor& t) {
  if (t.rank() == 1) return reshape(t, {1, t.dim(0)});
  if (t.rank() != 2) throw ValidationError("expected a vector or matrix, got " + shape_str(t.shape()));
  return t;
}

Tensor reciprocal(const Tensor& s) { return exp(scale(log(s), -1.0)); }

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw ValidationError("labels: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ValidationError("label " + std::to_string(y) + " out of range");
  }
}

void check_contrast(const ContrastSet& contrast, std::size_t query_dim) {
  if (contrast.offsets.size() < 2 || contrast.offsets.front() != 0 ||
      contrast.offsets.back() != contrast.features.dim(0)) {
    throw ValidationError("contrast set: offsets do not cover " + shape_str(contrast.features.shape()));
  }
  if (contrast.features.rank() != 2 || contrast.features.dim(1) != query_dim) {
    throw ValidationError("contrast set: shape mismatch " + shape_str(contrast.features.shape()) + " vs query width " +
                          std::to_string(query_dim));
  }
  for (std::size_t c = 0; c + 1 < contrast.offsets.size(); ++c) {
    if (contrast.offsets[c + 1] <= contrast.offsets[c]) {
      throw ValidationError("class without contrast samples: " + std::to_string(c));
    }
  }
}

}  // namespace

Tensor adjusted_nll(const Tensor& scores, std::span<const int> labels, std::span<const double> eta, double alpha) {
  Tensor s = as_matrix(scores);
  if (eta.size() != s.dim(1)) {
    throw ValidationError("adjusted_nll: eta has " + std::to_string(eta.size()) + " entries for " +
                          shape_str(s.shape()));
  }
  check_labels(labels, s.dim(0), s.dim(1));
  if (alpha != 0.0) {
    std::vector<double> shift(eta.size());
    for (std::size_t c = 0; c < eta.size(); ++c) shift[c] = alpha * eta[c];
    s = add_rowwise(s, Tensor({eta.size()}, std::move(shift)));
  }
  return cls_loss(s, labels);
}

Tensor cls_loss(const Tensor& logits, std::span<const int> labels) {
  Tensor s = as_matrix(logits);
  check_labels(labels, s.dim(0), s.dim(1));
  return mean(sub(log_sum_exp_rows(s), pick(s, labels)));
}

Tensor gml_scores(const Tensor& zx, const ContrastSet& contrast, const Tensor& tau_g,
                  std::span<const std::uint8_t> excluded) {
  Tensor q = as_matrix(zx);
  check_contrast(contrast, q.dim(1));
  if (tau_g.numel() != 1 || !(tau_g.item() > 0.0)) throw ValidationError("gml: tau_g must be a positive scalar");
  const std::size_t rows = q.dim(0), n = contrast.features.dim(0), classes = contrast.num_classes();

  Tensor sim = mul_scalar(matmul(q, transpose(contrast.features)), reciprocal(tau_g));
  Tensor lse = segment_log_sum_exp(sim, contrast.offsets, excluded);

  std::vector<double> log_counts(rows * classes);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < classes; ++c) {
      std::size_t kept = contrast.size(c);
      if (!excluded.empty()) {
        for (std::size_t j = contrast.offsets[c]; j < contrast.offsets[c + 1]; ++j) kept -= excluded[r * n + j] ? 1 : 0;
      }
      log_counts[r * classes + c] = std::log(static_cast<double>(kept));
    }
  return sub(lse, Tensor({rows, classes}, std::move(log_counts)));
}

Tensor gml_log_likelihood(const Tensor& zx, const Tensor& contrast, const Tensor& tau_g) {
  if (zx.rank() != 1) throw ValidationError("gml_log_likelihood: z_x must be a vector, got " + shape_str(zx.shape()));
  Tensor z = as_matrix(contrast);
  ContrastSet set{z, {0, z.dim(0)}, {}};
  return reshape(gml_scores(zx, set, tau_g), {});
}

Tensor gml_loss(const Tensor& zx, std::span<const int> labels, const ContrastSet& contrast,
                std::span<const double> eta, const Tensor& tau_g, double alpha) {
  return adjusted_nll(gml_scores(zx, contrast, tau_g), labels, eta, alpha);
}

BalancedReduction balanced_gml_and_supcon(const Tensor& zx, int label, const ContrastSet& contrast, double tau_g) {
  Tensor q = as_matrix(zx);
  check_contrast(contrast, q.dim(1));
  if (q.dim(0) != 1) throw ValidationError("balanced reduction: one query at a time");
  const std::size_t classes = contrast.num_classes();
  for (std::size_t c = 1; c < classes; ++c) {
    if (contrast.size(c) != contrast.size(0)) throw ValidationError("balanced reduction requires equal sets");
  }
  check_labels(std::span<const int>(&label, 1), 1, classes);

  TapeScope no_tape(nullptr);
  const Tensor tau = Tensor::scalar(tau_g);
  std::vector<double> flat_eta(classes, -std::log(static_cast<double>(classes)));
  const double balanced = -gml_loss(q, std::span<const int>(&label, 1), contrast, flat_eta, tau, 1.0).item();

  Tensor sim = scale(matmul(q, transpose(contrast.features)), 1.0 / tau_g);
  const double all = log_sum_exp_rows(sim).item();
  double bound = 0.0;
  const auto y = static_cast<std::size_t>(label);
  for (std::size_t j = contrast.offsets[y]; j < contrast.offsets[y + 1]; ++j) bound += sim.at(0, j) - all;
  return {balanced, bound};
}

ReductionProbs isotropic_reduction_check(const Tensor& x, const Tensor& classifier_weight, double sigma,
                                         std::span<const double> eta) {
  if (!(sigma > 0.0)) throw ValidationError("isotropic reduction: sigma must be > 0");
  TapeScope no_tape(nullptr);
  const double variance = sigma * sigma;
  const std::size_t classes = classifier_weight.dim(0);
  std::vector<std::size_t> offsets(classes + 1);
  for (std::size_t c = 0; c <= classes; ++c) offsets[c] = c;
  ContrastSet centres{l2_normalize(classifier_weight), offsets, {}};

  Tensor mixture = gml_scores(l2_normalize(as_matrix(x)), centres, Tensor::scalar(variance));
  std::vector<double> shift(eta.begin(), eta.end());
  mixture = add_rowwise(mixture, Tensor({classes}, shift));

  CosineClassifier cls(classifier_weight, variance);
  Tensor logits = cls.logits(as_matrix(x), eta, 1.0);
  return {softmax_values(mixture), softmax_values(logits)};
}

Tensor infonce_bound(const Tensor& critic) {
  if (critic.rank() != 2 || critic.dim(0) != critic.dim(1) || critic.dim(0) < 2) {
    throw ValidationError("infonce_bound: critic must be [K, K] with K >= 2, got " + shape_str(critic.shape()));
  }
  const std::size_t k = critic.dim(0);
  std::vector<int> diag(k);
  for (std::size_t i = 0; i < k; ++i) diag[i] = static_cast<int>(i);
  Tensor per_row = sub(pick(critic, diag), log_sum_exp_rows(critic));
  return add_constant(mean(per_row), std::log(static_cast<double>(k)));
}

Tensor moco_reference_loss(const Tensor& q, const Tensor& k_plus, const Tensor& negatives, double tau) {
  if (!(tau > 0.0)) throw ValidationError("moco: tau must be > 0");
  Tensor keys_parts[] = {as_matrix(k_plus), as_matrix(negatives)};
  Tensor keys = concat(keys_parts);
  Tensor logits = scale(matmul(as_matrix(q), transpose(keys)), 1.0 / tau);
  const int positive = 0;
  return cls_loss(logits, std::span<const int>(&positive, 1));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("kd: temperature must be > 0");
  Tensor s = as_matrix(student_logits);
  Tensor t = as_matrix(teacher_logits.detach());
  if (s.shape() != t.shape()) {
    throw ValidationError("kd: shape mismatch " + shape_str(s.shape()) + " vs " + shape_str(t.shape()));
  }
  Tensor log_pt = log_softmax_rows(scale(t, 1.0 / temperature));
  std::vector<double> pt(log_pt.numel());
  for (std::size_t i = 0; i < pt.size(); ++i) pt[i] = std::exp(log_pt.data()[i]);
  Tensor teacher_probs(t.shape(), std::move(pt));
  Tensor log_ps = log_softmax_rows(scale(s, 1.0 / temperature));
  Tensor kl = sum(mul(teacher_probs, sub(log_pt, log_ps)));
  return scale(kl, temperature * temperature / static_cast<double>(s.dim(0)));
}

Tensor tau_g_objective(const Tensor& zx, std::span<const int> labels, std::span<const std::uint64_t> query_ids,
                       const ContrastSet& contrast, std::span<const double> eta, const Tensor& tau_g, double alpha,
                       std::vector<std::string>* warnings) {
  Tensor q = as_matrix(zx).detach();
  check_contrast(contrast, q.dim(1));
  if (contrast.sample_ids.size() != contrast.features.dim(0)) {
    throw ValidationError("tau_g objective: contrast entries need sample ids");
  }
  if (query_ids.size() != q.dim(0)) throw ValidationError("tau_g objective: one sample id per query required");
  ContrastSet fixed{contrast.features.detach(), contrast.offsets, contrast.sample_ids};

  const std::size_t rows = q.dim(0), n = fixed.features.dim(0), classes = fixed.num_classes();
  std::vector<std::uint8_t> excluded(rows * n, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < classes; ++c) {
      std::size_t dropped = 0;
      for (std::size_t j = fixed.offsets[c]; j < fixed.offsets[c + 1]; ++j) {
        if (fixed.sample_ids[j] == query_ids[r]) {
          excluded[r * n + j] = 1;
          ++dropped;
        }
      }
      if (dropped == fixed.size(c)) {
        for (std::size_t j = fixed.offsets[c]; j < fixed.offsets[c + 1]; ++j) excluded[r * n + j] = 0;
        if (warnings) {
          warnings->push_back("tau_g objective: class " + std::to_string(c) + " holds only sample " +
                              std::to_string(query_ids[r]) + "; using the unexcluded set");
        }
      }
    }
  }
  return adjusted_nll(gml_scores(q, fixed, tau_g, excluded), labels, eta, alpha);
}

Tensor total_loss(const LossParts& parts, const LossConfig& config) {
  if (!(config.gamma >= 0.0) || !(config.beta >= 0.0) || !(config.alpha_kd >= 0.0)) {
    throw ValidationError("loss: weights must be >= 0");
  }
  std::optional<Tensor> acc;
  auto add_term = [&acc](const std::optional<Tensor>& term, double weight) {
    if (!term || weight == 0.0) return;
    Tensor weighted = weight == 1.0 ? *term : scale(*term, weight);
    acc = acc ? add(*acc, weighted) : weighted;
  };
  add_term(parts.cls, config.gamma);
  add_term(parts.gml, config.beta);
  add_term(parts.kd, config.alpha_kd);
  add_term(parts.tau, 1.0);
  return acc ? *acc : Tensor::scalar(0.0);
}

std::vector<double> softmax_values(const Tensor& scores) {
  Tensor s = as_matrix(scores);
  const std::size_t rows = s.dim(0), cols = s.dim(1);
  std::vector<double> out(s.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = s.data().data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += out[r * cols + c] = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return out;
}

}  // namespace gml
