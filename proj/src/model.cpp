#include "gml/model.hpp"

#include <cmath>
#include <numeric>

#include "gml/error.hpp"

namespace gml {

void round_to_storage(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

namespace {

Tensor gaussian_param(Shape shape, double stddev, std::mt19937_64& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (auto& v : values) {
    std::normal_distribution<double> dist(0.0, stddev);
    v = dist(rng);
  }
  round_to_storage(values);
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor zero_param(Shape shape) { return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 0.0)); }

Linear make_linear(std::size_t in, std::size_t out, double gain, std::mt19937_64& rng) {
  return Linear{gaussian_param({in, out}, std::sqrt(gain / static_cast<double>(in)), rng), zero_param({out})};
}

}  // namespace

// ---- Encoder --------------------------------------------------------------

Encoder::Encoder(EncoderSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
  if (spec_.feature_dim == 0) throw ValidationError("encoder: feature_dim must be positive");
  std::size_t flat = 0;
  if (spec_.kind == EncoderKind::mlp) {
    if (spec_.input_shape.size() != 1) throw ValidationError("encoder: mlp expects a flat input shape");
    flat = spec_.input_shape[0];
  } else {
    if (spec_.input_shape.size() != 3) throw ValidationError("encoder: small_cnn expects a [C,H,W] input shape");
    std::size_t ch = spec_.input_shape[0], h = spec_.input_shape[1], w = spec_.input_shape[2];
    for (auto out : spec_.conv_channels) {
      if (h % 2 || w % 2) throw ValidationError("encoder: spatial size must stay even through pooling");
      convs_.push_back(Conv{gaussian_param({out, ch, 3, 3}, std::sqrt(2.0 / static_cast<double>(ch * 9)), rng),
                            zero_param({out})});
      ch = out;
      h /= 2;
      w /= 2;
    }
    flat = ch * h * w;
  }
  std::size_t in = flat;
  for (auto width : spec_.hidden) {
    layers_.push_back(make_linear(in, width, 2.0, rng));
    in = width;
  }
  layers_.push_back(make_linear(in, spec_.feature_dim, 2.0, rng));
}

Tensor Encoder::encode(const Tensor& input) const {
  Tensor batch = input;
  const std::size_t per_sample = shape_numel(spec_.input_shape);
  if (input.rank() >= 1 && input.dim(0) > 0 && input.numel() == input.dim(0) * per_sample &&
      input.rank() != spec_.input_shape.size() + 1) {
    Shape flat{input.dim(0)};
    flat.insert(flat.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    batch = reshape(input, flat);
  }
  if (batch.rank() != spec_.input_shape.size() + 1 ||
      !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape().begin() + 1)) {
    Shape expected{0};
    expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
    throw ValidationError("encode: shape mismatch " + shape_str(batch.shape()) + " vs " + shape_str(expected));
  }
  const std::size_t n = batch.dim(0);
  Tensor h = batch;
  if (spec_.kind == EncoderKind::small_cnn) {
    for (const auto& conv : convs_) h = max_pool2(relu(conv2d(h, conv.weight, conv.bias, 1)));
    h = reshape(h, {n, h.numel() / n});
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

std::vector<NamedTensor> Encoder::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    out.emplace_back(prefix + "conv" + std::to_string(i) + ".weight", convs_[i].weight);
    out.emplace_back(prefix + "conv" + std::to_string(i) + ".bias", convs_[i].bias);
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.emplace_back(prefix + "fc" + std::to_string(i) + ".weight", layers_[i].weight);
    out.emplace_back(prefix + "fc" + std::to_string(i) + ".bias", layers_[i].bias);
  }
  return out;
}

// ---- ProjectionHead -------------------------------------------------------

ProjectionHead::ProjectionHead(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng)
    : hidden_(make_linear(in, hidden, 2.0, rng)), out_(make_linear(hidden, out, 1.0, rng)) {}

Tensor ProjectionHead::project(const Tensor& x) const {
  if (x.rank() == 1) return reshape(project(reshape(x, {1, x.dim(0)})), {output_dim()});
  return l2_normalize(out_.forward(relu(hidden_.forward(x))));
}

std::vector<NamedTensor> ProjectionHead::parameters(const std::string& prefix) const {
  return {{prefix + "fc0.weight", hidden_.weight},
          {prefix + "fc0.bias", hidden_.bias},
          {prefix + "fc1.weight", out_.weight},
          {prefix + "fc1.bias", out_.bias}};
}

// ---- CosineClassifier -----------------------------------------------------

CosineClassifier::CosineClassifier(std::size_t num_classes, std::size_t feature_dim, double tau_s,
                                   std::mt19937_64& rng)
    : tau_s_(tau_s) {
  if (!(tau_s > 0.0)) throw ValidationError("cosine classifier: tau_s must be > 0");
  std::vector<double> w(num_classes * feature_dim);
  for (auto& v : w) {
    std::normal_distribution<double> dist(0.0, 1.0);
    v = dist(rng);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    double sq = 0.0;
    for (std::size_t d = 0; d < feature_dim; ++d) sq += w[c * feature_dim + d] * w[c * feature_dim + d];
    const double n = std::sqrt(sq);
    for (std::size_t d = 0; d < feature_dim; ++d) w[c * feature_dim + d] /= n;
  }
  round_to_storage(w);
  weight_ = Tensor::parameter({num_classes, feature_dim}, std::move(w));
}

CosineClassifier::CosineClassifier(Tensor weight, double tau_s) : weight_(std::move(weight)), tau_s_(tau_s) {
  if (weight_.rank() != 2) throw ValidationError("cosine classifier: weight must be [C, d]");
  if (!(tau_s > 0.0)) throw ValidationError("cosine classifier: tau_s must be > 0");
}

Tensor CosineClassifier::logits(const Tensor& x, std::span<const double> eta, double alpha) const {
  if (!(tau_s_ > 0.0)) throw ValidationError("cosine classifier: tau_s must be > 0");
  if (eta.size() != num_classes()) {
    throw ValidationError("cosine logits: eta has " + std::to_string(eta.size()) + " entries for " +
                          std::to_string(num_classes()) + " classes");
  }
  if (x.rank() == 1) return reshape(logits(reshape(x, {1, x.dim(0)}), eta, alpha), {num_classes()});
  Tensor cos = matmul(l2_normalize(x), transpose(l2_normalize(weight_)));
  Tensor out = scale(cos, 1.0 / tau_s_);
  if (alpha == 0.0) return out;
  std::vector<double> shift(eta.size());
  for (std::size_t c = 0; c < eta.size(); ++c) shift[c] = alpha * eta[c];
  return add_rowwise(out, Tensor({eta.size()}, std::move(shift)));
}

Tensor cosine_logits(const CosineClassifier& cls, const Tensor& x, std::span<const double> eta, double alpha) {
  return cls.logits(x, eta, alpha);
}

// ---- ModelBundle ----------------------------------------------------------

double ModelBundle::tau_g() const { return std::exp(log_tau_g.item()); }

std::vector<NamedTensor> ModelBundle::parameters() const {
  auto out = encoder.parameters("encoder.");
  out.emplace_back("classifier.weight", classifier.weight());
  if (projection) {
    auto p = projection->parameters("projection.");
    out.insert(out.end(), p.begin(), p.end());
  }
  if (contrast_head) {
    auto p = contrast_head->parameters("contrast_head.");
    out.insert(out.end(), p.begin(), p.end());
  }
  out.emplace_back("log_tau_g", log_tau_g);
  return out;
}

ModelBundle make_model(const ModelSpec& spec, std::mt19937_64& core_rng, std::mt19937_64& head_rng) {
  if (!(spec.tau_g_init > 0.0)) throw ValidationError("model: tau_g must be > 0");
  ModelBundle m;
  m.spec = spec;
  m.encoder = Encoder(spec.encoder, core_rng);
  m.classifier = CosineClassifier(spec.num_classes, spec.encoder.feature_dim, spec.tau_s, core_rng);
  if (spec.with_heads) {
    const std::size_t d = spec.encoder.feature_dim;
    const std::size_t hidden = spec.projection_hidden ? spec.projection_hidden : d;
    const std::size_t out = spec.projection_dim ? spec.projection_dim : std::max<std::size_t>(1, d / 2);
    const std::size_t contrast_in = spec.contrast_input_dim ? spec.contrast_input_dim : d;
    m.projection = ProjectionHead(d, hidden, out, head_rng);
    m.contrast_head = ProjectionHead(contrast_in, hidden, out, head_rng);
  }
  std::vector<double> u{std::log(spec.tau_g_init)};
  round_to_storage(u);
  m.log_tau_g = Tensor::parameter({}, std::move(u));
  return m;
}

}  // namespace gml
