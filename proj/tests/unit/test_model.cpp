#include <doctest.h>

#include <cmath>

#include "gml/error.hpp"
#include "gml/losses.hpp"
#include "gml/model.hpp"
#include "helpers.hpp"

using namespace gml;
using testutil::random_tensor;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Central differences on a parameter captured by `loss`.
double param_error(const std::function<Tensor()>& loss, Tensor p) {
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    p.zero_grad();
    tape.backward(loss());
    analytic = p.grad();
    p.zero_grad();
  }
  TapeScope none(nullptr);
  auto d = p.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double keep = d[i];
    d[i] = keep + 1e-5;
    const double up = loss().item();
    d[i] = keep - 1e-5;
    const double down = loss().item();
    d[i] = keep;
    worst = std::max(worst, std::abs(analytic[i] - (up - down) / 2e-5) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace

TEST_CASE("identity linear encoder") {
  std::mt19937_64 rng(1);
  EncoderSpec spec;
  spec.input_shape = {3};
  spec.hidden = {};
  spec.feature_dim = 3;
  const Encoder enc(spec, rng);
  auto params = enc.parameters("enc.");
  REQUIRE(params.size() == 2);
  auto w = params[0].second.mutable_data();
  for (std::size_t i = 0; i < 9; ++i) w[i] = (i % 4 == 0) ? 1.0 : 0.0;
  const Tensor x = random_tensor(rng, {4, 3});
  CHECK(enc.encode(x).data().size() == 12);
  CHECK(testutil::max_abs_diff(enc.encode(x).data(), x.data()) == 0.0);
}

TEST_CASE("mlp encoder") {
  std::mt19937_64 rng(2);
  EncoderSpec spec;
  spec.input_shape = {5};
  spec.hidden = {8};
  spec.feature_dim = 4;
  const Encoder enc(spec, rng);
  const Tensor probe = random_tensor(rng, {3, 4});
  CHECK(gradcheck([&](const Tensor& x) { return sum(mul(enc.encode(x), probe)); }, random_tensor(rng, {3, 5})) < 1e-4);
  const Tensor x = random_tensor(rng, {3, 5});
  for (const auto& [name, p] : enc.parameters("enc.")) {
    INFO(name);
    CHECK(param_error([&] { return sum(mul(enc.encode(x), probe)); }, p) < 1e-4);
  }
  // Rows are encoded independently and in order.
  const Tensor all = enc.encode(x);
  for (std::size_t r = 0; r < 3; ++r) {
    const Tensor one = enc.encode(slice(x, r, r + 1));
    for (std::size_t d = 0; d < 4; ++d) CHECK(one.at(0, d) == all.at(r, d));
  }
  CHECK_THROWS_AS(enc.encode(random_tensor(rng, {3, 6})), ValidationError);
}

TEST_CASE("small cnn encoder") {
  std::mt19937_64 rng(3);
  EncoderSpec spec;
  spec.kind = EncoderKind::small_cnn;
  spec.input_shape = {3, 8, 8};
  spec.conv_channels = {4};
  spec.hidden = {6};
  spec.feature_dim = 5;
  const Encoder enc(spec, rng);
  const Tensor x = random_tensor(rng, {2, 3, 8, 8});
  CHECK(enc.encode(x).shape() == Shape{2, 5});
  const Tensor probe = random_tensor(rng, {2, 5});
  CHECK(gradcheck([&](const Tensor& in) { return sum(mul(enc.encode(in), probe)); }, x) < 1e-4);
}

TEST_CASE("projection head") {
  std::mt19937_64 rng(4);
  const ProjectionHead head(6, 6, 3, rng);
  const Tensor x = random_tensor(rng, {5, 6});
  const Tensor z = head.project(x);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(std::abs(norm(slice(z, r, r + 1).data()) - 1.0) < 1e-12);
  }
  // Scaling the last layer (weights and bias) leaves the normalized output unchanged.
  auto params = head.parameters("p.");
  std::vector<std::vector<double>> saved;
  for (std::size_t i = 2; i < 4; ++i) {
    auto d = params[i].second.mutable_data();
    saved.emplace_back(d.begin(), d.end());
    for (auto& v : d) v *= 3.7;
  }
  CHECK(testutil::max_abs_diff(head.project(x).data(), z.data()) < 1e-12);
  const Tensor probe = random_tensor(rng, {5, 3});
  CHECK(gradcheck([&](const Tensor& in) { return sum(mul(head.project(in), probe)); }, x) < 1e-4);
  CHECK(head.project(random_tensor(rng, {6})).shape() == Shape{3});
}

TEST_CASE("cosine classifier") {
  const std::vector<double> balanced(3, std::log(1.0 / 3.0));
  CosineClassifier ortho(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), 1.0);
  const Tensor x({3}, {0, 2.5, 0});
  const Tensor logits = cosine_logits(ortho, x, balanced, 0.0);
  CHECK(logits.shape() == Shape{3});
  CHECK(logits.data()[0] == 0.0);
  CHECK(logits.data()[1] == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(5);
  const CosineClassifier cls(4, 6, 1.0 / 30.0, rng);
  CHECK(cls.tau_s() == 1.0 / 30.0);
  const std::vector<double> flat(4, std::log(0.25));
  for (int t = 0; t < 20; ++t) {
    const Tensor v = random_tensor(rng, {2, 6});
    const auto p0 = softmax_values(cosine_logits(cls, v, flat, 0.0));
    const auto p1 = softmax_values(cosine_logits(cls, v, flat, 1.0));
    CHECK(testutil::max_abs_diff(p0, p1) < 1e-12);
    // Direction only: scaling x or any classifier row changes nothing.
    const auto base = cosine_logits(cls, v, flat, 0.0);
    CHECK(testutil::max_abs_diff(cosine_logits(cls, scale(v, 4.2), flat, 0.0).data(), base.data()) < 1e-10);
    std::vector<double> w(cls.weight().data().begin(), cls.weight().data().end());
    for (std::size_t d = 0; d < 6; ++d) w[6 + d] *= 0.3;
    const CosineClassifier rescaled(Tensor({4, 6}, w), 1.0 / 30.0);
    CHECK(testutil::max_abs_diff(cosine_logits(rescaled, v, flat, 0.0).data(), base.data()) < 1e-10);
  }
  CHECK_THROWS_AS(CosineClassifier(Tensor({2, 2}, {1, 0, 0, 1}), 0.0), ValidationError);
  CHECK_THROWS_AS(cosine_logits(cls, random_tensor(rng, {6}), balanced, 1.0), ValidationError);
}

TEST_CASE("encode, project and classify compose under gradcheck") {
  std::mt19937_64 core(6), heads(7);
  ModelSpec spec;
  spec.encoder.input_shape = {4};
  spec.encoder.hidden = {8};
  spec.encoder.feature_dim = 6;
  spec.num_classes = 3;
  spec.with_heads = true;
  spec.contrast_input_dim = 6;
  const ModelBundle m = make_model(spec, core, heads);
  const std::vector<double> eta{std::log(0.7), std::log(0.2), std::log(0.1)};
  const std::vector<int> labels{0, 2};
  std::mt19937_64 rng(8);
  const Tensor probe = random_tensor(rng, {2, 3});
  CHECK(gradcheck(
            [&](const Tensor& x) {
              const Tensor f = m.encoder.encode(x);
              return add(cls_loss(m.classifier.logits(f, eta, 1.0), labels), sum(mul(m.projection->project(f), probe)));
            },
            random_tensor(rng, {2, 4})) < 1e-4);
}

TEST_CASE("model bundle layout") {
  ModelSpec spec;
  spec.encoder.input_shape = {2};
  spec.num_classes = 5;
  std::mt19937_64 c1(1), h1(2), c2(1), h2(3);
  const ModelBundle plain = make_model(spec, c1, h1);
  spec.with_heads = true;
  spec.contrast_input_dim = 16;
  const ModelBundle full = make_model(spec, c2, h2);
  // log tau_g is stored at float precision.
  CHECK(std::abs(full.tau_g() - 0.1) < 1e-7);
  const auto pp = plain.parameters(), fp = full.parameters();
  CHECK(fp.back().first == "log_tau_g");
  CHECK(full.contrast_head->input_dim() == 16);
  CHECK(full.projection->output_dim() == 16);
  // Heads come from their own stream; the core is identical.
  for (const auto& [name, t] : pp) {
    if (name == "log_tau_g") continue;
    const auto it = std::find_if(fp.begin(), fp.end(), [&](const NamedTensor& n) { return n.first == name; });
    REQUIRE(it != fp.end());
    CHECK(testutil::max_abs_diff(it->second.data(), t.data()) == 0.0);
  }
}

TEST_CASE("storage rounding") {
  std::vector<double> v{0.1, 1.0 / 3.0, 1e-40};
  round_to_storage(v);
  CHECK(v[0] == static_cast<double>(0.1f));
  CHECK(v[1] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}
