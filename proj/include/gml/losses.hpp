#pragma once

// Gaussian-mixture-likelihood (GML) loss family and its reference losses.
//
// Every class score here has the form f(x, c) = log mean_{z in Z_c} exp(z_x.z / tau_g):
// the log of an equal-weight isotropic Gaussian mixture centred on the class's
// contrast features. Scores are turned into a loss by a softmax over classes
// after adding alpha * eta_c, eta_c = log p(c), which is what maximizing the
// InfoNCE bound between features and labels over the whole training set
// reduces to.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gml/autodiff.hpp"

namespace gml {

struct LossConfig {
  double tau_g = 0.1;          // initial value when trainable
  bool train_tau_g = false;
  double tau_s = 1.0 / 30.0;   // fixed
  double alpha = 1.0;          // logit-adjustment scale in [0, 1]
  double gamma = 1.0;          // weight of L_cls
  double beta = 1.0;           // weight of L_GML
  double alpha_kd = 0.0;       // weight of L_KD
  double kd_temperature = 4.0;

  void validate() const;
};

// Contrast features grouped by class: rows [offsets[c], offsets[c+1]) of
// `features` belong to class c.
struct ContrastSet {
  Tensor features;                       // [N, P], unit rows
  std::vector<std::size_t> offsets;      // num_classes + 1
  std::vector<std::uint64_t> sample_ids; // N, or empty when exclusion is not used

  std::size_t num_classes() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t size(std::size_t cls) const { return offsets.at(cls + 1) - offsets.at(cls); }
};

// -mean_i log softmax(scores_i + alpha * eta)[labels_i]; scores [B, C].
Tensor adjusted_nll(const Tensor& scores, std::span<const int> labels, std::span<const double> eta, double alpha);

// log[(1/|Z_y|) sum_{z in Z_y} exp(z_x . z / tau_g)] for z_x [P] and Z_y [n, P].
Tensor gml_log_likelihood(const Tensor& zx, const Tensor& contrast, const Tensor& tau_g);

// f(x_i, c) for every query row of zx [B, P] and class c -> [B, C]. `excluded`
// (B*N, optional) drops entries from the mixtures; means use the kept counts.
Tensor gml_scores(const Tensor& zx, const ContrastSet& contrast, const Tensor& tau_g,
                  std::span<const std::uint8_t> excluded = {});

// Mean over the batch of L_GML with adjustment scale alpha (alpha = 1 is the
// plain logit-adjusted form).
Tensor gml_loss(const Tensor& zx, std::span<const int> labels, const ContrastSet& contrast,
                std::span<const double> eta, const Tensor& tau_g, double alpha);

// -mean_i log softmax(logits_i)[labels_i]; logits already carry alpha * eta.
Tensor cls_loss(const Tensor& logits, std::span<const int> labels);

struct BalancedReduction {
  double balanced_gml;  // log [sum_{Z_y} e^s / sum_{Z} e^s], i.e. -L_GML for a balanced set
  double supcon_bound;  // sum_{z in Z_y} log [e^{s_z} / sum_{Z} e^s]
};

// Requires every class set to have the same size; throws otherwise.
BalancedReduction balanced_gml_and_supcon(const Tensor& zx, int label, const ContrastSet& contrast, double tau_g);

struct ReductionProbs {
  std::vector<double> gml;  // softmax of single-centre mixture scores + eta, tau_g = sigma^2
  std::vector<double> cls;  // softmax of cosine logits + eta, tau_s = sigma^2
};

// Class c's mixture is the single normalized classifier row m_c; both paths
// should give identical class probabilities.
ReductionProbs isotropic_reduction_check(const Tensor& x, const Tensor& classifier_weight, double sigma,
                                         std::span<const double> eta);

// critic [K, K] with critic(i, j) = f(x_i, y_j):
// (1/K) sum_i log[ exp f(x_i,y_i) / ((1/K) sum_j exp f(x_i,y_j)) ].
Tensor infonce_bound(const Tensor& critic);

// -log[exp(q.k+/tau) / (exp(q.k+/tau) + sum_neg exp(q.k/tau))]; negatives [n, P].
Tensor moco_reference_loss(const Tensor& q, const Tensor& k_plus, const Tensor& negatives, double tau);

// T^2 * mean_i KL(softmax(teacher_i / T) || softmax(student_i / T)). Teacher is treated as constant.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

// gml_loss with every contrast entry sharing the query's sample id removed, and
// with queries and contrast features detached so only tau_g receives gradient.
// A class left empty by the exclusion falls back to its full set; each
// fallback is reported through `warnings`.
Tensor tau_g_objective(const Tensor& zx, std::span<const int> labels, std::span<const std::uint64_t> query_ids,
                       const ContrastSet& contrast, std::span<const double> eta, const Tensor& tau_g, double alpha,
                       std::vector<std::string>* warnings = nullptr);

struct LossParts {
  std::optional<Tensor> cls;
  std::optional<Tensor> gml;
  std::optional<Tensor> kd;
  std::optional<Tensor> tau;  // tau_g objective, unweighted
};

// gamma * cls + beta * gml + alpha_kd * kd + tau.
Tensor total_loss(const LossParts& parts, const LossConfig& config);

// Row-wise softmax of a [B, C] or [C] tensor's values.
std::vector<double> softmax_values(const Tensor& scores);

}  // namespace gml
