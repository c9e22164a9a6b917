#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "gml/error.hpp"
#include "gml/trainer.hpp"
#include "helpers.hpp"

using namespace gml;

namespace {

ExperimentConfig tiny_config(std::uint64_t seed = 3) {
  ExperimentConfig c;
  c.dataset.num_classes = 4;
  c.dataset.imbalance_factor = 10.0;
  c.dataset.seed = seed;
  c.dataset.synthetic.n_max = 80;
  c.dataset.synthetic.test_per_class = 50;
  c.model.hidden = {16};
  c.model.feature_dim = 8;
  c.queues.k = 64;
  c.queues.k_m = 2;
  c.queues.prefill_batch = 32;
  c.train.epochs = 4;
  c.train.batch_size = 32;
  c.train.seed = seed;
  c.train.classifier_view = {"gaussian_noise", 0.05, 0};
  c.train.contrast_view = {"gaussian_noise", 0.05, 0};
  c.eval.every = 2;
  return c;
}

TeacherArtifact as_teacher(const TrainResult& r, const ExperimentConfig& c) {
  return TeacherArtifact{r.model, c, r.config_hash, nlohmann::json::object()};
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<double> flat_params(const ModelBundle& m, bool core_only) {
  std::vector<double> out;
  for (const auto& [name, t] : m.parameters()) {
    if (core_only && !(name.starts_with("encoder.") || name.starts_with("classifier."))) continue;
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

}  // namespace

TEST_CASE("sgd_step") {
  std::mt19937_64 rng(1);
  SUBCASE("momentum 0 is plain gradient descent") {
    const Tensor p = Tensor::parameter({3}, {1.0, -2.0, 0.5});
    const std::vector<NamedTensor> params{{"p", p}};
    {
      Tape tape;
      TapeScope s(&tape);
      tape.backward(sum(mul(p, p)));
    }
    OptimizerState st;
    sgd_step(params, st, 0.1, 0.0, 0.0);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 * 2.0));
    CHECK(p.data()[1] == doctest::Approx(-2.0 + 0.1 * 4.0));
  }
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    const Tensor p = Tensor::parameter({2}, {0.3, 0.4});
    const std::vector<NamedTensor> params{{"p", p}};
    OptimizerState st;
    sgd_step(params, st, 0.5, 0.9, 0.0);
    CHECK(p.data()[0] == 0.3);
    CHECK(p.data()[1] == 0.4);
  }
  SUBCASE("two steps on a quadratic follow the recurrence") {
    // f = 0.5 * a * x^2, grad = a x.
    const double a = 3.0, lr = 0.05, mu = 0.9, wd = 0.01;
    Tensor x = Tensor::parameter({1}, {2.0});
    const std::vector<NamedTensor> params{{"x", x}};
    OptimizerState st;
    double xr = 2.0, v = 0.0;
    for (int step = 0; step < 2; ++step) {
      {
        Tape tape;
        TapeScope s(&tape);
        x.zero_grad();
        tape.backward(scale(sum(mul(x, x)), 0.5 * a));
      }
      sgd_step(params, st, lr, mu, wd);
      v = mu * v + a * xr + wd * xr;
      xr -= lr * v;
      CHECK(std::abs(x.data()[0] - xr) < 1e-14);
      x.zero_grad();
    }
  }
  SUBCASE("decay mask skips weight decay") {
    const Tensor p = Tensor::parameter({1}, {1.0});
    const std::vector<NamedTensor> params{{"log_tau_g", p}};
    const std::vector<std::uint8_t> mask{0};
    OptimizerState st;
    sgd_step(params, st, 0.1, 0.9, 0.5, mask);
    CHECK(p.data()[0] == 1.0);
  }
  SUBCASE("non-finite gradient throws before any update") {
    const Tensor a = Tensor::parameter({1}, {1.0});
    const Tensor b = Tensor::parameter({1}, {1.0});
    {
      Tape tape;
      TapeScope s(&tape);
      tape.backward(add(sum(mul(a, a)), scale(sum(b), std::numeric_limits<double>::infinity())));
    }
    const std::vector<NamedTensor> params{{"a", a}, {"b", b}};
    OptimizerState st;
    CHECK_THROWS_AS(sgd_step(params, st, 0.1, 0.0, 0.0), NumericalError);
    CHECK(a.data()[0] == 1.0);
    CHECK(b.data()[0] == 1.0);
  }
}

TEST_CASE("lr_at") {
  Schedule cos;
  cos.base_lr = 0.1;
  CHECK(lr_at(cos, 0, 100) == 0.1);
  CHECK(std::abs(lr_at(cos, 100, 100)) < 1e-17);
  CHECK(lr_at(cos, 50, 100) == doctest::Approx(0.05));
  Schedule step;
  step.kind = "step";
  step.base_lr = 0.05;
  step.milestones = {160, 180};
  CHECK(lr_at(step, 100, 200) == 0.05);
  CHECK(lr_at(step, 170, 200) == doctest::Approx(0.005));
  CHECK(lr_at(step, 190, 200) == doctest::Approx(0.0005));
  CHECK_THROWS_AS(lr_at(cos, 101, 100), ValidationError);
}

TEST_CASE("augment") {
  std::mt19937_64 rng(2);
  const Tensor x = testutil::random_tensor(rng, {3, 2});
  CHECK(augment({"none", 0.0, 0}, x, rng).data().data() == x.data().data());
  CHECK(testutil::max_abs_diff(augment({"gaussian_noise", 0.0, 0}, x, rng).data(), x.data()) == 0.0);
  const Tensor noisy = augment({"gaussian_noise", 0.1, 0}, x, rng);
  CHECK(testutil::max_abs_diff(noisy.data(), x.data()) > 0.0);

  const Tensor img = testutil::random_tensor(rng, {2, 3, 8, 8});
  const Tensor crop = augment({"flip_crop", 0.0, 2}, img, rng);
  CHECK(crop.shape() == img.shape());
  // pad 0: only flips, so each image is itself or its mirror.
  const Tensor flipped = augment({"flip_crop", 0.0, 0}, img, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    bool same = true, mirror = true;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t xx = 0; xx < 8; ++xx) {
          const std::size_t base = ((i * 3 + c) * 8 + y) * 8;
          same = same && flipped.data()[base + xx] == img.data()[base + xx];
          mirror = mirror && flipped.data()[base + xx] == img.data()[base + 7 - xx];
        }
    CHECK((same || mirror));
  }
  CHECK_THROWS_AS(augment({"flip_crop", 0.0, 2}, x, rng), ValidationError);
  CHECK_THROWS_AS(augment({"rotate", 0.0, 0}, x, rng), ValidationError);
}

TEST_CASE("log rows") {
  LogRow r;
  r.epoch = 3;
  r.step = 30;
  r.loss_cls = 0.5;
  r.tau_g = 0.1;
  r.lr = 0.01;
  r.acc_all = 0.75;
  CHECK(format_log_row(r) == "3,30,0.5,0,0,0.1,0.01,0.75,,,\n");
  CHECK(log_header("abc").starts_with("# config_hash: abc\nepoch,step,"));
}

TEST_CASE("teacher learns separable data") {
  ExperimentConfig c = tiny_config();
  c.dataset.synthetic.sigma = 0.01;
  c.train.epochs = 6;
  c.train.classifier_view = {"none", 0.0, 0};
  const DataSplits data = load_data(c.dataset);
  const TrainResult r = train_teacher(c, data);
  REQUIRE(r.final_report.has_value());
  CHECK(r.final_report->overall > 0.99);
  const auto p = prior_from_counts(data.train.class_counts());
  const EvalReport on_train = evaluate(r.model, data.train, assign_groups(p.counts), p.counts, p.eta, 0.0);
  CHECK(on_train.overall > 0.99);
  // Smoothed loss goes down.
  CHECK(r.smoothed_loss.back() < r.smoothed_loss.front());
}

TEST_CASE("training is deterministic and resumable") {
  const ExperimentConfig tc = tiny_config();
  const DataSplits data = load_data(tc.dataset);
  const TrainResult teacher = train_teacher(tc, data);
  const TeacherArtifact art = as_teacher(teacher, tc);

  ExperimentConfig sc = tc;
  sc.loss.train_tau_g = true;
  sc.train.checkpoint_every = 2;
  testutil::TempDir dir("train");
  const TrainResult a = train_student(sc, &art, data, {dir.path() / "a", {}, {}});
  const TrainResult b = train_student(sc, &art, data, {dir.path() / "b", {}, {}});
  CHECK(file_bytes(dir.path() / "a" / "final.gmlc") == file_bytes(dir.path() / "b" / "final.gmlc"));
  CHECK(file_bytes(dir.path() / "a" / "log.csv") == file_bytes(dir.path() / "b" / "log.csv"));
  CHECK(a.rows.back().tau_g != a.rows.front().tau_g);

  // Stop after epoch 1, resume, and land on the same bytes.
  TrainOptions stop{dir.path() / "c", 1, {}};
  train_student(sc, &art, data, stop);
  const Checkpoint mid = load_checkpoint(dir.path() / "c" / "epoch_0001.gmlc");
  CHECK(checkpoint_info(mid).epoch == 1);
  const TrainResult resumed = resume_training(mid, &art, data, {dir.path() / "d", {}, {}});
  REQUIRE(resumed.rows.size() == a.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(format_log_row(resumed.rows[i]) == format_log_row(a.rows[i]));
  CHECK(file_bytes(dir.path() / "d" / "final.gmlc") == file_bytes(dir.path() / "a" / "final.gmlc"));

  // The periodic checkpoint and the model restored from final.gmlc agree.
  const ModelBundle restored = model_from_checkpoint(load_checkpoint(dir.path() / "a" / "final.gmlc"));
  CHECK(flat_params(restored, false) == flat_params(a.model, false));
  CHECK(std::filesystem::exists(dir.path() / "a" / "epoch_0002.gmlc"));
}

TEST_CASE("student with beta 0 and no distillation reproduces the teacher") {
  const ExperimentConfig tc = tiny_config(5);
  const DataSplits data = load_data(tc.dataset);
  const TrainResult teacher = train_teacher(tc, data);
  const TeacherArtifact art = as_teacher(teacher, tc);
  ExperimentConfig sc = tc;
  sc.loss.beta = 0.0;
  sc.loss.alpha_kd = 0.0;
  sc.loss.train_tau_g = false;
  const TrainResult s = train_student(sc, &art, data);
  CHECK(flat_params(s.model, true) == flat_params(teacher.model, true));
  for (const auto& row : s.rows) {
    CHECK(row.tau_g == s.rows.front().tau_g);
    CHECK(row.loss_gml == 0.0);
  }
}

TEST_CASE("student-stage details") {
  const ExperimentConfig tc = tiny_config(7);
  const DataSplits data = load_data(tc.dataset);
  ExperimentConfig sc = tc;
  CHECK_THROWS_AS(train_student(sc, nullptr, data), ValidationError);

  const TrainResult teacher = train_teacher(tc, data);
  const TeacherArtifact art = as_teacher(teacher, tc);
  const TrainResult s = train_student(sc, &art, data);
  // Fixed tau_g stays at its initial value; tau_s is not a parameter.
  for (const auto& row : s.rows) CHECK(row.tau_g == s.rows.front().tau_g);
  CHECK(s.model.classifier.tau_s() == sc.loss.tau_s);
  for (const auto& [name, _] : s.model.parameters()) CHECK(name.find("tau_s") == std::string::npos);
  CHECK(s.rows.back().loss_gml > 0.0);

  // Teacher stage ignores queue settings.
  ExperimentConfig other = tc;
  other.queues.k = 4096;
  other.queues.max_per_class = 3;
  const TrainResult t2 = train_teacher(other, data);
  CHECK(flat_params(t2.model, true) == flat_params(teacher.model, true));

  // No-teacher student: queues fed by its own features.
  ExperimentConfig self = tc;
  self.train.use_teacher = false;
  const TrainResult own = train_student(self, nullptr, data);
  CHECK(own.rows.back().loss_gml > 0.0);
}
