#include <doctest.h>

#include <cmath>
#include <random>

#include "gml/autodiff.hpp"
#include "gml/error.hpp"
#include "gml/losses.hpp"
#include "helpers.hpp"

using namespace gml;
using testutil::random_tensor;

TEST_CASE("forward op examples") {
  const Tensor a({1, 2}, {1, 2}), b({2, 1}, {3, 4});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == 11.0);
  CHECK(exp(Tensor::zeros({3})).data()[2] == 1.0);
  CHECK(reduce_max(Tensor({4}, {1, 7, -2, 3})).item() == 7.0);
  const Tensor parts[] = {Tensor({1, 2}, {1, 2}), Tensor({2, 2}, {3, 4, 5, 6})};
  const Tensor cat = concat(parts);
  CHECK(cat.shape() == Shape{3, 2});
  CHECK(slice(cat, 1, 2).data()[1] == 4.0);
}

TEST_CASE("shape mismatch names both shapes") {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL("expected a shape error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(shape_str({2, 3})) != std::string::npos);
    CHECK(msg.find(shape_str({3, 2})) != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ValidationError);
}

TEST_CASE("sum gradient is all ones") {
  Tape tape;
  TapeScope scope(&tape);
  const Tensor x = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  tape.backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("l2_normalize") {
  const Tensor v = l2_normalize(Tensor({2}, {3, 4}));
  CHECK(v.at(0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(v.at(1) == doctest::Approx(0.8).epsilon(1e-15));
  const Tensor u({3}, {0.0, 1.0, 0.0});
  CHECK(testutil::max_abs_diff(l2_normalize(u).data(), u.data()) == 0.0);
  try {
    l2_normalize(Tensor::zeros({4}));
    FAIL("expected degenerate feature");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("degenerate feature") != std::string::npos);
  }

  std::mt19937_64 rng(1);
  const Tensor w = random_tensor(rng, {5});
  const double err = gradcheck([&](const Tensor& x) { return sum(mul(l2_normalize(x), w)); }, random_tensor(rng, {5}));
  CHECK(err < 1e-6);

  const Tensor rows = l2_normalize(random_tensor(rng, {4, 7}));
  for (std::size_t r = 0; r < 4; ++r) {
    double sq = 0.0;
    for (std::size_t d = 0; d < 7; ++d) sq += rows.at(r, d) * rows.at(r, d);
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-12);
  }
}

TEST_CASE("log_sum_exp") {
  CHECK(log_sum_exp(Tensor({2}, {0, 0})).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double big = log_sum_exp(Tensor({2}, {1000, 1000})).item();
  CHECK(std::isfinite(big));
  CHECK(std::abs(big - (1000.0 + std::log(2.0))) < 1e-12);
  CHECK(log_sum_exp(Tensor({1}, {-3.25})).item() == -3.25);
  CHECK_THROWS(log_sum_exp(Tensor({0}, {})));
  CHECK(std::isfinite(log_sum_exp(Tensor({3}, {-700, 700, 699})).item()));

  // Shift invariance: lse(v + c) == lse(v) + c.
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const Tensor v = random_tensor(rng, {6}, 5.0);
    const double c = testutil::normals(rng, 1, 50.0)[0];
    CHECK(std::abs(log_sum_exp(add_constant(v, c)).item() - (log_sum_exp(v).item() + c)) < 1e-10);
  }
}

TEST_CASE("backward examples") {
  SUBCASE("y = x^2 at 3") {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = Tensor::parameter({}, {3.0});
    tape.backward(mul(x, x));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("sum(A B) against finite differences") {
    std::mt19937_64 rng(3);
    const Tensor b = random_tensor(rng, {4, 2});
    CHECK(gradcheck([&](const Tensor& a) { return sum(matmul(a, b)); }, random_tensor(rng, {3, 4})) < 1e-6);
  }
  SUBCASE("constant loss gives zero gradients") {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = Tensor::parameter({3}, {1, 2, 3});
    tape.backward(sub(sum(x), sum(x)));
    for (double g : x.grad()) CHECK(g == 0.0);
  }
  SUBCASE("non-scalar loss rejected") {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = Tensor::parameter({3}, {1, 2, 3});
    CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ValidationError);
  }
}

TEST_CASE("a tensor used twice accumulates both paths") {
  std::mt19937_64 rng(4);
  const std::vector<double> values = testutil::normals(rng, 5);
  const Tensor w = random_tensor(rng, {5});
  std::vector<double> twice, split_a, split_b;
  {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = Tensor::parameter({5}, values);
    tape.backward(sum(mul(mul(x, x), w)));
    twice = x.grad();
  }
  {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor a = Tensor::parameter({5}, values), b = Tensor::parameter({5}, values);
    tape.backward(sum(mul(mul(a, b), w)));
    split_a = a.grad();
    split_b = b.grad();
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(twice[i] - (split_a[i] + split_b[i])) < 1e-14);
}

TEST_CASE("tape is topologically ordered and walked once") {
  Tape tape;
  TapeScope scope(&tape);
  const Tensor x = Tensor::parameter({2, 2}, {1, 2, 3, 4});
  const Tensor y = log_sum_exp_rows(matmul(x, transpose(x)));
  const Tensor loss = mean(add(y, y));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (std::size_t p : tape.parent_nodes(i)) CHECK(p < i);
  }
  tape.backward(loss);
  CHECK_THROWS(tape.backward(loss));
}

TEST_CASE("no tape means no recording") {
  TapeScope none(nullptr);
  const Tensor x = Tensor::parameter({2}, {1, 2});
  const Tensor y = exp(x);
  CHECK(active_tape() == nullptr);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradcheck examples") {
  std::mt19937_64 rng(5);
  const Tensor w = random_tensor(rng, {6});
  CHECK(gradcheck([&](const Tensor& x) { return sum(mul(x, w)); }, random_tensor(rng, {6})) < 1e-10);
  CHECK(gradcheck([&](const Tensor& x) { return sum(mul(l2_normalize(x), w)); }, random_tensor(rng, {6})) < 1e-4);

  std::vector<double> bank = testutil::normals(rng, 6 * 4);
  const ContrastSet contrast{l2_normalize(Tensor({6, 4}, bank)), {0, 2, 3, 6}, {}};
  const std::vector<int> labels{2, 0};
  const std::vector<double> eta{std::log(0.6), std::log(0.3), std::log(0.1)};
  CHECK(gradcheck([&](const Tensor& q) { return gml_loss(l2_normalize(q), labels, contrast, eta, Tensor::scalar(0.2), 1.0); },
                  random_tensor(rng, {2, 4})) < 1e-4);

  CHECK_THROWS_AS(gradcheck([](const Tensor& x) { return sum(x); }, Tensor({1}, {1.0}), 1e-2), ValidationError);
  CHECK_THROWS_AS(gradcheck([](const Tensor& x) { return sum(log(x)); }, Tensor({1}, {-1.0})), NumericalError);
}

TEST_CASE("every op passes gradcheck at 10 random points") {
  std::mt19937_64 rng(6);
  const std::vector<std::size_t> offsets{0, 2, 5, 6};
  const std::vector<int> index{1, 0, 3};
  std::vector<std::uint8_t> excluded(3 * 6, 0);
  excluded[0] = excluded[8] = excluded[16] = 1;

  for (int point = 0; point < 10; ++point) {
    const Tensor other = random_tensor(rng, {3, 4});
    const Tensor probe = random_tensor(rng, {3, 4});
    const Tensor row = random_tensor(rng, {4}), col = random_tensor(rng, {3});
    const Tensor right = random_tensor(rng, {4, 2});
    auto probed = [&](const Tensor& y) { return sum(mul(y, probe)); };

    const std::vector<std::pair<const char*, ScalarFn>> unary{
        {"add", [&](const Tensor& x) { return probed(add(x, other)); }},
        {"sub", [&](const Tensor& x) { return probed(sub(other, x)); }},
        {"mul", [&](const Tensor& x) { return probed(mul(x, other)); }},
        {"scale", [&](const Tensor& x) { return probed(scale(x, -1.7)); }},
        {"add_constant", [&](const Tensor& x) { return probed(mul(add_constant(x, 0.3), x)); }},
        {"mul_scalar", [&](const Tensor& x) { return probed(mul_scalar(other, reshape(slice(reshape(x, {12}), 3, 4), {}))); }},
        {"add_rowwise", [&](const Tensor& x) { return probed(mul(add_rowwise(x, row), x)); }},
        {"add_colwise", [&](const Tensor& x) { return probed(mul(add_colwise(x, col), x)); }},
        {"exp", [&](const Tensor& x) { return probed(exp(x)); }},
        {"log", [&](const Tensor& x) { return probed(log(add_constant(mul(x, x), 0.5))); }},
        {"relu", [&](const Tensor& x) { return probed(mul(relu(x), x)); }},
        {"matmul", [&](const Tensor& x) { return sum(mul(matmul(x, right), matmul(other, right))); }},
        {"transpose", [&](const Tensor& x) { return sum(matmul(transpose(x), other)); }},
        {"reshape", [&](const Tensor& x) { return probed(reshape(exp(reshape(x, {4, 3})), {3, 4})); }},
        {"mean", [&](const Tensor& x) { return mean(mul(x, x)); }},
        {"reduce_max", [&](const Tensor& x) { return reduce_max(mul(x, probe)); }},
        {"concat", [&](const Tensor& x) {
           const Tensor parts[] = {x, mul(x, other)};
           return sum(mul(concat(parts), concat(std::span<const Tensor>(std::vector<Tensor>{probe, probe}))));
         }},
        {"slice", [&](const Tensor& x) { return sum(mul(slice(x, 1, 3), slice(probe, 0, 2))); }},
        {"pick", [&](const Tensor& x) { return sum(mul(pick(x, index), col)); }},
        {"log_sum_exp", [&](const Tensor& x) { return log_sum_exp(reshape(x, {12})); }},
        {"log_sum_exp_rows", [&](const Tensor& x) { return sum(mul(log_sum_exp_rows(x), col)); }},
        {"log_softmax_rows", [&](const Tensor& x) { return probed(log_softmax_rows(x)); }},
        {"l2_normalize", [&](const Tensor& x) { return probed(l2_normalize(x)); }},
    };
    for (const auto& [name, f] : unary) {
      INFO(name);
      CHECK(gradcheck(f, random_tensor(rng, {3, 4})) < 1e-4);
    }

    const Tensor seg_probe = random_tensor(rng, {3, 3});
    CHECK(gradcheck([&](const Tensor& x) { return sum(mul(segment_log_sum_exp(x, offsets), seg_probe)); },
                    random_tensor(rng, {3, 6})) < 1e-4);
    CHECK(gradcheck([&](const Tensor& x) { return sum(mul(segment_log_sum_exp(x, offsets, excluded), seg_probe)); },
                    random_tensor(rng, {3, 6})) < 1e-4);

    const Tensor kernel = random_tensor(rng, {2, 1, 3, 3}), bias = random_tensor(rng, {2});
    const Tensor img_probe = random_tensor(rng, {1, 2, 2, 2});
    CHECK(gradcheck([&](const Tensor& x) { return sum(mul(max_pool2(conv2d(x, kernel, bias, 1)), img_probe)); },
                    random_tensor(rng, {1, 1, 4, 4})) < 1e-4);
    const Tensor image = random_tensor(rng, {1, 1, 4, 4});
    CHECK(gradcheck([&](const Tensor& k) { return sum(mul(max_pool2(conv2d(image, k, bias, 1)), img_probe)); },
                    kernel) < 1e-4);
  }
}
