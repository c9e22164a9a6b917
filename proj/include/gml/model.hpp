#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gml/autodiff.hpp"

namespace gml {

using NamedTensor = std::pair<std::string, Tensor>;

// Rounds values to the nearest float, the precision parameters are stored at.
void round_to_storage(std::span<double> values);

enum class EncoderKind { mlp, small_cnn };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::mlp;
  Shape input_shape{2};
  std::vector<std::size_t> hidden{64};  // fully connected widths before the feature layer
  std::size_t feature_dim = 32;
  std::vector<std::size_t> conv_channels{16, 32};  // small_cnn only: one 3x3 conv + 2x2 pool per entry
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const { return add_rowwise(matmul(x, weight), bias); }
};

struct Conv {
  Tensor weight;  // [out, in, 3, 3]
  Tensor bias;    // [out]
};

// MLP: Linear+ReLU per hidden width, then a linear feature layer.
// small_cnn: (conv3x3 + ReLU + maxpool2) per channel entry, flatten, then the MLP part.
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderSpec spec, std::mt19937_64& rng);

  const EncoderSpec& spec() const { return spec_; }
  std::size_t feature_dim() const { return spec_.feature_dim; }

  // [n, input_shape...] -> [n, feature_dim]
  Tensor encode(const Tensor& batch) const;

  std::vector<NamedTensor> parameters(const std::string& prefix) const;

 private:
  EncoderSpec spec_;
  std::vector<Conv> convs_;
  std::vector<Linear> layers_;
};

// One hidden ReLU layer followed by L2 normalization of each output row.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);

  Tensor project(const Tensor& x) const;
  std::size_t input_dim() const { return hidden_.weight.dim(0); }
  std::size_t output_dim() const { return out_.weight.dim(1); }
  std::vector<NamedTensor> parameters(const std::string& prefix) const;

 private:
  Linear hidden_;
  Linear out_;
};

class CosineClassifier {
 public:
  CosineClassifier() = default;
  CosineClassifier(std::size_t num_classes, std::size_t feature_dim, double tau_s, std::mt19937_64& rng);
  CosineClassifier(Tensor weight, double tau_s);

  // m_x . m_c / tau_s + alpha * eta_c for every row of x[B,d] -> [B,C].
  Tensor logits(const Tensor& x, std::span<const double> eta, double alpha) const;

  const Tensor& weight() const { return weight_; }
  double tau_s() const { return tau_s_; }
  std::size_t num_classes() const { return weight_.dim(0); }

 private:
  Tensor weight_;  // [C, d], rows are m_c before normalization
  double tau_s_ = 1.0 / 30.0;
};

// Free-function form of CosineClassifier::logits.
Tensor cosine_logits(const CosineClassifier& cls, const Tensor& x, std::span<const double> eta, double alpha);

struct ModelSpec {
  EncoderSpec encoder;
  std::size_t num_classes = 10;
  double tau_s = 1.0 / 30.0;
  bool with_heads = false;            // projection + contrast heads for the GML path
  std::size_t contrast_input_dim = 0; // raw feature width of whoever fills the queues
  std::size_t projection_hidden = 0;  // 0: feature_dim
  std::size_t projection_dim = 0;     // 0: feature_dim / 2
  double tau_g_init = 0.1;
};

struct ModelBundle {
  ModelSpec spec;
  Encoder encoder;
  CosineClassifier classifier;
  std::optional<ProjectionHead> projection;     // student features -> z_x
  std::optional<ProjectionHead> contrast_head;  // queued raw features -> z_y
  Tensor log_tau_g;                             // tau_g = exp(log_tau_g)

  double tau_g() const;
  // Stable order and names; checkpoints and the optimizer key on these.
  std::vector<NamedTensor> parameters() const;
};

// Encoder and classifier draw from `core_rng`; heads from `head_rng`, so a
// bundle with and without heads shares its core initialization.
ModelBundle make_model(const ModelSpec& spec, std::mt19937_64& core_rng, std::mt19937_64& head_rng);

}  // namespace gml
