#include "gml/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gml/error.hpp"
#include "gml/losses.hpp"
#include "gml/queues.hpp"

namespace gml {

namespace fs = std::filesystem;
using nlohmann::json;

double lr_at(const Schedule& schedule, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0 || step > total_steps) throw ValidationError("lr_at: step outside [0, total_steps]");
  if (schedule.kind == "cosine") {
    const double pi = std::acos(-1.0);
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return schedule.base_lr * (1.0 + std::cos(pi * t)) / 2.0;
  }
  if (schedule.kind == "step") {
    const auto passed = std::count_if(schedule.milestones.begin(), schedule.milestones.end(),
                                      [step](std::size_t m) { return step >= m; });
    return schedule.base_lr * std::pow(schedule.factor, static_cast<double>(passed));
  }
  throw ValidationError("lr_at: unknown schedule '" + schedule.kind + "'");
}

void sgd_step(std::span<const NamedTensor> params, OptimizerState& state, double lr, double momentum,
              double weight_decay, std::span<const std::uint8_t> decay) {
  if (!decay.empty() && decay.size() != params.size()) throw ValidationError("sgd: decay mask length mismatch");
  if (state.buffers.empty()) {
    for (const auto& [_, p] : params) state.buffers.emplace_back(p.numel(), 0.0);
  }
  if (state.buffers.size() != params.size()) throw ValidationError("sgd: optimizer state does not match parameters");
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.buffers[i].size() != p.numel()) {
      throw ValidationError("sgd: momentum buffer for '" + name + "' has the wrong size");
    }
    grads.push_back(p.grad());
    for (double g : grads.back()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in '" + name + "'; step aborted");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto values = p.mutable_data();
    auto& v = state.buffers[i];
    const double wd = decay.empty() || decay[i] ? weight_decay : 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      v[k] = momentum * v[k] + grads[i][k] + wd * values[k];
      values[k] -= lr * v[k];
    }
  }
}

Tensor augment(const AugmentSpec& spec, const Tensor& batch, std::mt19937_64& rng) {
  if (spec.kind == "none") return batch;
  if (spec.kind == "gaussian_noise") {
    if (spec.sigma == 0.0) return batch;
    if (!(spec.sigma > 0.0)) throw ValidationError("augment: sigma must be >= 0");
    std::vector<double> out(batch.data().begin(), batch.data().end());
    std::normal_distribution<double> noise(0.0, spec.sigma);
    for (double& v : out) v += noise(rng);
    return Tensor(batch.shape(), std::move(out));
  }
  if (spec.kind == "flip_crop") {
    if (batch.rank() != 4) throw ValidationError("augment: flip_crop needs [n, C, H, W] images, got " + shape_str(batch.shape()));
    const std::size_t n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const int pad = static_cast<int>(spec.pad);
    std::vector<double> out(batch.numel(), 0.0);
    auto src = batch.data();
    std::bernoulli_distribution flip_draw(0.5);
    std::uniform_int_distribution<int> shift(-pad, pad);
    for (std::size_t i = 0; i < n; ++i) {
      const bool flip = flip_draw(rng);
      const int dy = shift(rng), dx = shift(rng);
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t plane = (i * ch + c) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const int sy = static_cast<int>(y) + dy;
          if (sy < 0 || sy >= static_cast<int>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            int sx = static_cast<int>(x) + dx;
            if (sx < 0 || sx >= static_cast<int>(w)) continue;
            if (flip) sx = static_cast<int>(w) - 1 - sx;
            out[plane + y * w + x] = src[plane + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
          }
        }
      }
    }
    return Tensor(batch.shape(), std::move(out));
  }
  throw ValidationError("augment: unknown view '" + spec.kind + "'");
}

// ---- log rows -------------------------------------------------------------

std::string log_header(const std::string& hash) {
  return "# config_hash: " + hash +
         "\nepoch,step,loss_cls,loss_gml,loss_kd,tau_g,lr,acc_all,acc_many,acc_med,acc_few\n";
}

std::string format_log_row(const LogRow& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  auto opt = [&num](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  return std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' + num(r.loss_cls) + ',' + num(r.loss_gml) + ',' +
         num(r.loss_kd) + ',' + num(r.tau_g) + ',' + num(r.lr) + ',' + opt(r.acc_all) + ',' + opt(r.acc_many) + ',' +
         opt(r.acc_med) + ',' + opt(r.acc_few) + '\n';
}

const char* stage_name(Stage s) { return s == Stage::teacher ? "teacher" : "student"; }

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

json row_json(const LogRow& r) {
  return {{"epoch", r.epoch},       {"step", r.step},
          {"loss_cls", r.loss_cls}, {"loss_gml", r.loss_gml},
          {"loss_kd", r.loss_kd},   {"tau_g", r.tau_g},
          {"lr", r.lr},             {"acc_all", opt_json(r.acc_all)},
          {"acc_many", opt_json(r.acc_many)}, {"acc_med", opt_json(r.acc_med)},
          {"acc_few", opt_json(r.acc_few)}};
}

LogRow row_from_json(const json& j) {
  LogRow r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.step = j.at("step").get<std::size_t>();
  r.loss_cls = j.at("loss_cls").get<double>();
  r.loss_gml = j.at("loss_gml").get<double>();
  r.loss_kd = j.at("loss_kd").get<double>();
  r.tau_g = j.at("tau_g").get<double>();
  r.lr = j.at("lr").get<double>();
  r.acc_all = opt_from(j.at("acc_all"));
  r.acc_many = opt_from(j.at("acc_many"));
  r.acc_med = opt_from(j.at("acc_med"));
  r.acc_few = opt_from(j.at("acc_few"));
  return r;
}

std::mt19937_64 derive(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace

RngStreams::RngStreams(std::uint64_t seed)
    : init_core(derive(seed, 1)),
      init_heads(derive(seed, 2)),
      shuffle(derive(seed, 3)),
      aug(derive(seed, 4)),
      contrast(derive(seed, 5)) {}

std::string RngStreams::save() const {
  std::ostringstream os;
  os << "shuffle " << shuffle << "\naug " << aug << "\ncontrast " << contrast << '\n';
  return os.str();
}

void RngStreams::load(const std::string& text) {
  std::istringstream is(text);
  std::string tag;
  for (auto [name, engine] : {std::pair<const char*, std::mt19937_64*>{"shuffle", &shuffle},
                              {"aug", &aug},
                              {"contrast", &contrast}}) {
    if (!(is >> tag) || tag != name || !(is >> *engine)) {
      throw ValidationError(std::string("checkpoint: malformed rng state for '") + name + "'");
    }
  }
}

// ---- checkpoint metadata ----------------------------------------------------

CheckpointInfo checkpoint_info(const Checkpoint& ckpt) {
  CheckpointInfo info;
  try {
    const json meta = json::parse(ckpt.meta);
    const auto stage = meta.at("stage").get<std::string>();
    if (stage != "teacher" && stage != "student") throw ValidationError("checkpoint: unknown stage '" + stage + "'");
    info.stage = stage == "teacher" ? Stage::teacher : Stage::student;
    info.config = config_from_json(meta.at("config"));
    info.config_hash = meta.at("config_hash").get<std::string>();
    info.epoch = meta.at("epoch").get<std::size_t>();
    info.input_shape = meta.at("input_shape").get<Shape>();
    info.train_counts = meta.at("train_counts").get<std::vector<std::size_t>>();
    info.teacher_hash = meta.value("teacher_hash", std::string());
    info.metrics = meta.value("metrics", json(nullptr));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint metadata: ") + e.what());
  }
  if (parse_hash(info.config_hash) != ckpt.config_hash) {
    throw ValidationError("checkpoint: header hash does not match metadata hash");
  }
  return info;
}

namespace {

std::size_t meta_contrast_dim(const Checkpoint& ckpt) {
  return json::parse(ckpt.meta).value("contrast_input_dim", std::size_t{0});
}

}  // namespace

ModelBundle model_from_checkpoint(const Checkpoint& ckpt) {
  const auto info = checkpoint_info(ckpt);
  const bool heads = info.stage == Stage::student;
  std::mt19937_64 a(0), b(0);
  ModelBundle model =
      make_model(model_spec(info.config, info.input_shape, heads, heads ? meta_contrast_dim(ckpt) : 0), a, b);
  restore_arrays(ckpt, model.parameters());
  return model;
}

TeacherArtifact teacher_from_checkpoint(const Checkpoint& ckpt) {
  const auto info = checkpoint_info(ckpt);
  if (info.stage != Stage::teacher) throw ValidationError("checkpoint is not a teacher checkpoint");
  return TeacherArtifact{model_from_checkpoint(ckpt), info.config, info.config_hash, info.metrics};
}

// ---- training run -----------------------------------------------------------

namespace {

class Run {
 public:
  Run(const ExperimentConfig& config, Stage stage, const TeacherArtifact* teacher, const DataSplits& data,
      const TrainOptions& options)
      : cfg_(config), stage_(stage), teacher_(teacher), data_(data), opts_(options), rng_(config.train.seed) {
    setup();
    const bool heads = stage_ == Stage::student;
    model_ = make_model(model_spec(cfg_, data_.train.input_shape, heads, contrast_dim_), rng_.init_core,
                        rng_.init_heads);
    bind_parameters();
    if (stage_ == Stage::student) {
      queues_.emplace(plan_capacities(prior_, cfg_.queues.k, cfg_.queues.k_m), contrast_dim_);
      prefill(*queues_, queue_source(), data_.train, cfg_.queues.prefill_batch);
    }
  }

  Run(const Checkpoint& ckpt, const TeacherArtifact* teacher, const DataSplits& data, const TrainOptions& options)
      : Run(checkpoint_info(ckpt), ckpt, teacher, data, options) {}

  TrainResult execute();

 private:
  Run(const CheckpointInfo& info, const Checkpoint& ckpt, const TeacherArtifact* teacher, const DataSplits& data,
      const TrainOptions& options)
      : cfg_(info.config), stage_(info.stage), teacher_(teacher), data_(data), opts_(options), rng_(info.config.train.seed) {
    setup();
    if (info.train_counts != prior_.counts) throw ValidationError("resume: training data differs from the checkpoint's");
    if (stage_ == Stage::student && teacher_ && info.teacher_hash != teacher_->config_hash) {
      throw ValidationError("resume: teacher checkpoint differs from the one the run started with");
    }
    model_ = model_from_checkpoint(ckpt);
    bind_parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const ArrayRecord* a = ckpt.find("momentum/" + params_[i].first);
      if (!a || a->values.size() != params_[i].second.numel()) {
        throw ValidationError("checkpoint: missing or malformed array 'momentum/" + params_[i].first + "'");
      }
      opt_.buffers[i].assign(a->values.begin(), a->values.end());
    }
    if (stage_ == Stage::student) {
      if (!ckpt.queues) throw ValidationError("checkpoint: student checkpoint without queue state");
      queues_.emplace(rebuild_queues(*ckpt.queues));
    }
    rng_.load(ckpt.rng_state);
    const json meta = json::parse(ckpt.meta);
    epoch_ = info.epoch;
    step_ = meta.at("step").get<std::size_t>();
    for (const auto& r : meta.at("log_rows")) rows_.push_back(row_from_json(r));
    smoothed_ = meta.at("smoothed_loss").get<std::vector<double>>();
    if (!meta.at("ema").is_null()) ema_ = meta.at("ema").get<double>();
    last_metrics_ = info.metrics;
  }

  void setup();
  void bind_parameters();
  FeatureFn queue_source() const;
  void run_epoch();
  void train_step(std::span<const std::size_t> rows, double lr, double sums[3]);
  std::optional<EvalReport> maybe_evaluate(bool force);
  Checkpoint snapshot() const;
  void write_log() const;

  ExperimentConfig cfg_;
  Stage stage_;
  const TeacherArtifact* teacher_;
  const DataSplits& data_;
  TrainOptions opts_;
  RngStreams rng_;
  LossConfig loss_;
  std::string hash_;
  ClassPrior prior_;
  GroupSpec groups_;
  std::size_t contrast_dim_ = 0;
  ModelBundle model_;
  std::vector<NamedTensor> params_;
  std::vector<std::uint8_t> decay_;
  OptimizerState opt_;
  std::optional<ClassQueueSet> queues_;
  Schedule schedule_;
  std::size_t steps_per_epoch_ = 0, total_steps_ = 0;
  std::size_t epoch_ = 0, step_ = 0;
  std::vector<LogRow> rows_;
  std::vector<double> smoothed_;
  std::optional<double> ema_;
  json last_metrics_ = nullptr;
  std::optional<EvalReport> last_report_;
  std::vector<std::string> warnings_;
  std::size_t suppressed_warnings_ = 0;
};

void Run::setup() {
  cfg_.validate();
  hash_ = config_hash(cfg_);
  const Dataset& train = data_.train;
  train.validate();
  if (train.size() == 0) throw ValidationError("training set is empty");
  if (train.num_classes != cfg_.dataset.num_classes) throw ValidationError("training set class count differs from config");
  prior_ = estimate_prior(train.labels, train.num_classes);
  groups_ = assign_groups(prior_.counts, cfg_.dataset.many_threshold, cfg_.dataset.few_threshold);

  loss_ = cfg_.loss;
  if (stage_ == Stage::teacher) {
    loss_.beta = 0.0;
    loss_.alpha_kd = 0.0;
    loss_.train_tau_g = false;
  } else {
    if (cfg_.train.use_teacher) {
      if (!teacher_) throw ValidationError("student stage requires a teacher checkpoint");
      if (teacher_->model.classifier.num_classes() != train.num_classes) {
        throw ValidationError("teacher has " + std::to_string(teacher_->model.classifier.num_classes()) +
                              " classes, data has " + std::to_string(train.num_classes));
      }
      contrast_dim_ = teacher_->model.encoder.feature_dim();
    } else {
      if (loss_.alpha_kd > 0.0) throw ValidationError("loss.alpha_kd > 0 needs a teacher (train.use_teacher)");
      contrast_dim_ = cfg_.model.feature_dim;
    }
  }

  steps_per_epoch_ = (train.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
  total_steps_ = steps_per_epoch_ * cfg_.train.epochs;
  schedule_.kind = cfg_.train.schedule;
  schedule_.base_lr = cfg_.train.base_lr;
  schedule_.factor = cfg_.train.factor;
  for (auto m : cfg_.train.milestones) schedule_.milestones.push_back(m * steps_per_epoch_);
}

void Run::bind_parameters() {
  params_ = model_.parameters();
  decay_.clear();
  for (const auto& [name, _] : params_) decay_.push_back(name == "log_tau_g" ? 0 : 1);
  opt_.buffers.clear();
  for (const auto& [_, p] : params_) opt_.buffers.emplace_back(p.numel(), 0.0);
}

FeatureFn Run::queue_source() const {
  if (teacher_ && cfg_.train.use_teacher) {
    const ModelBundle* t = &teacher_->model;
    return [t](const Tensor& x) { return t->encoder.encode(x); };
  }
  const ModelBundle* self = &model_;
  return [self](const Tensor& x) { return self->encoder.encode(x); };
}

void Run::train_step(std::span<const std::size_t> rows, double lr, double sums[3]) {
  const Dataset& train = data_.train;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  for (auto r : rows) {
    labels.push_back(train.labels[r]);
    ids.push_back(train.sample_ids[r]);
  }
  const Tensor x = batch_inputs(train, rows);
  const Tensor x_cls = augment(cfg_.train.classifier_view, x, rng_.aug);
  const bool contrast_path = stage_ == Stage::student && (loss_.beta > 0.0 || loss_.train_tau_g);
  Tensor x_con;
  if (contrast_path) x_con = cfg_.train.separate_views ? augment(cfg_.train.contrast_view, x, rng_.aug) : x_cls;

  const bool with_teacher = teacher_ && cfg_.train.use_teacher && stage_ == Stage::student;
  Tensor teacher_logits;
  const bool distill = with_teacher && loss_.alpha_kd > 0.0;
  if (distill) {
    TapeScope off(nullptr);
    teacher_logits = teacher_->model.classifier.logits(teacher_->model.encoder.encode(x_cls), prior_.eta, loss_.alpha);
  }

  Tape tape;
  LossParts parts;
  Tensor raw_con;
  {
    TapeScope on(&tape);
    const Tensor feats = model_.encoder.encode(x_cls);
    const Tensor logits = model_.classifier.logits(feats, prior_.eta, loss_.alpha);
    parts.cls = cls_loss(logits, labels);
    if (contrast_path) {
      raw_con = cfg_.train.separate_views ? model_.encoder.encode(x_con) : feats;
      const Tensor zx = model_.projection->project(raw_con);
      const ContrastBank bank = queues_->gather(cfg_.queues.max_per_class, &rng_.contrast);
      ContrastSet set{model_.contrast_head->project(bank.as_tensor()), bank.offsets, bank.sample_ids};
      if (loss_.beta > 0.0) {
        parts.gml = gml_loss(zx, labels, set, prior_.eta, Tensor::scalar(model_.tau_g()), loss_.alpha);
      }
      if (loss_.train_tau_g) {
        std::vector<std::string> notes;
        parts.tau = tau_g_objective(zx, labels, ids, set, prior_.eta, exp(model_.log_tau_g), loss_.alpha, &notes);
        for (auto& n : notes) {
          if (warnings_.size() < 20) warnings_.push_back(std::move(n));
          else ++suppressed_warnings_;
        }
      }
    }
    if (distill) parts.kd = kd_loss(logits, teacher_logits, loss_.kd_temperature);
    const Tensor total = total_loss(parts, loss_);
    if (!std::isfinite(total.item())) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch_ + 1) + ", step " +
                           std::to_string(step_) + "; training aborted, last checkpoint kept in " +
                           (opts_.out_dir.empty() ? std::string("(none)") : opts_.out_dir.string()));
    }
    ema_ = ema_ ? 0.9 * *ema_ + 0.1 * total.item() : total.item();
    tape.backward(total);
  }
  sums[0] += parts.cls->item();
  if (parts.gml) sums[1] += parts.gml->item();
  if (parts.kd) sums[2] += parts.kd->item();

  sgd_step(params_, opt_, lr, cfg_.train.momentum, cfg_.train.weight_decay, decay_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    round_to_storage(p.mutable_data());
    round_to_storage(opt_.buffers[i]);
    p.zero_grad();
  }

  if (contrast_path) {
    Tensor source;
    if (with_teacher) {
      TapeScope off(nullptr);
      source = teacher_->model.encoder.encode(x_con);
    } else {
      source = raw_con.detach();
    }
    const std::size_t d = queues_->feature_dim();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      queues_->push(static_cast<std::size_t>(labels[i]), source.data().subspan(i * d, d), ids[i]);
    }
  }
  ++step_;
}

std::optional<EvalReport> Run::maybe_evaluate(bool force) {
  if (!force && epoch_ % cfg_.eval.every != 0) return std::nullopt;
  const Dataset& ds = data_.test.size() > 0 ? data_.test : data_.train;
  return evaluate(model_, ds, groups_, prior_.counts, prior_.eta, cfg_.eval.alpha);
}

void Run::run_epoch() {
  const std::size_t n = data_.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng_.shuffle)]);
  }
  double sums[3] = {0.0, 0.0, 0.0};
  double lr = 0.0;
  const std::size_t bs = cfg_.train.batch_size;
  for (std::size_t start = 0; start < n; start += bs) {
    lr = lr_at(schedule_, step_, total_steps_);
    train_step(std::span<const std::size_t>(order).subspan(start, std::min(bs, n - start)), lr, sums);
  }
  ++epoch_;
  LogRow row;
  row.epoch = epoch_;
  row.step = step_;
  const double steps = static_cast<double>(steps_per_epoch_);
  row.loss_cls = sums[0] / steps;
  row.loss_gml = sums[1] / steps;
  row.loss_kd = sums[2] / steps;
  row.tau_g = model_.tau_g();
  row.lr = lr;
  if (auto report = maybe_evaluate(epoch_ == cfg_.train.epochs)) {
    row.acc_all = report->overall;
    row.acc_many = report->many;
    row.acc_med = report->medium;
    row.acc_few = report->few;
    last_metrics_ = report->to_json();
    last_report_ = std::move(report);
  }
  rows_.push_back(row);
  smoothed_.push_back(ema_.value_or(0.0));
}

Checkpoint Run::snapshot() const {
  Checkpoint ckpt;
  ckpt.config_hash = parse_hash(hash_);
  store_arrays(ckpt, params_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ArrayRecord a;
    a.name = "momentum/" + params_[i].first;
    for (auto d : params_[i].second.shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
    a.values.assign(opt_.buffers[i].begin(), opt_.buffers[i].end());
    ckpt.arrays.push_back(std::move(a));
  }
  if (queues_) ckpt.queues = capture_queues(*queues_);
  ckpt.rng_state = rng_.save();
  json meta;
  meta["stage"] = stage_name(stage_);
  meta["epoch"] = epoch_;
  meta["step"] = step_;
  meta["config"] = to_json(cfg_);
  meta["config_hash"] = hash_;
  meta["input_shape"] = data_.train.input_shape;
  meta["train_counts"] = prior_.counts;
  meta["contrast_input_dim"] = contrast_dim_;
  if (stage_ == Stage::student && teacher_) meta["teacher_hash"] = teacher_->config_hash;
  meta["metrics"] = last_metrics_;
  json rows = json::array();
  for (const auto& r : rows_) rows.push_back(row_json(r));
  meta["log_rows"] = std::move(rows);
  meta["smoothed_loss"] = smoothed_;
  meta["ema"] = ema_ ? json(*ema_) : json(nullptr);
  ckpt.meta = meta.dump();
  return ckpt;
}

void Run::write_log() const {
  std::ofstream out(opts_.out_dir / "log.csv", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (opts_.out_dir / "log.csv").string());
  out << log_header(hash_);
  for (const auto& r : rows_) out << format_log_row(r);
}

TrainResult Run::execute() {
  const bool files = !opts_.out_dir.empty();
  if (files) fs::create_directories(opts_.out_dir);
  TrainResult result;
  while (epoch_ < cfg_.train.epochs) {
    run_epoch();
    if (opts_.on_epoch) opts_.on_epoch(rows_.back());
    const bool last = epoch_ == cfg_.train.epochs;
    const bool stop = opts_.stop_after && *opts_.stop_after == epoch_;
    if (files) {
      write_log();
      const bool periodic = cfg_.train.checkpoint_every > 0 && epoch_ % cfg_.train.checkpoint_every == 0;
      if (periodic || stop) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04zu.gmlc", epoch_);
        save_checkpoint(snapshot(), opts_.out_dir / name);
      }
      if (last) {
        result.final_checkpoint = opts_.out_dir / "final.gmlc";
        save_checkpoint(snapshot(), result.final_checkpoint);
      }
    }
    if (stop) break;
  }
  if (suppressed_warnings_ > 0) {
    warnings_.push_back(std::to_string(suppressed_warnings_) + " further tau_g fallback warnings suppressed");
  }
  result.model = model_;
  result.rows = rows_;
  result.smoothed_loss = smoothed_;
  result.final_report = last_report_;
  result.warnings = warnings_;
  result.config_hash = hash_;
  return result;
}

}  // namespace

TrainResult train_teacher(const ExperimentConfig& config, const DataSplits& data, const TrainOptions& options) {
  return Run(config, Stage::teacher, nullptr, data, options).execute();
}

TrainResult train_student(const ExperimentConfig& config, const TeacherArtifact* teacher, const DataSplits& data,
                          const TrainOptions& options) {
  return Run(config, Stage::student, teacher, data, options).execute();
}

TrainResult resume_training(const Checkpoint& ckpt, const TeacherArtifact* teacher, const DataSplits& data,
                            const TrainOptions& options) {
  return Run(ckpt, teacher, data, options).execute();
}

CheckpointEval evaluate_checkpoint(const Checkpoint& ckpt, const std::string& data_path, std::optional<double> alpha) {
  const CheckpointInfo info = checkpoint_info(ckpt);
  const ModelBundle model = model_from_checkpoint(ckpt);
  Dataset ds;
  if (data_path.empty()) {
    ds = load_data(info.config.dataset).test;
    if (ds.size() == 0) throw ValidationError("the checkpoint's dataset has no test split; give a dataset path");
  } else {
    ds = load_dataset_file(data_path, info.config.dataset.num_classes);
  }
  if (ds.input_shape != model.spec.encoder.input_shape) {
    throw ValidationError("dataset input shape " + shape_str(ds.input_shape) + " does not match encoder input " +
                          shape_str(model.spec.encoder.input_shape));
  }
  const ClassPrior prior = prior_from_counts(info.train_counts);
  const GroupSpec groups =
      assign_groups(info.train_counts, info.config.dataset.many_threshold, info.config.dataset.few_threshold);
  const double a = alpha.value_or(info.config.eval.alpha);
  return CheckpointEval{evaluate(model, ds, groups, info.train_counts, prior.eta, a), a, info.config_hash};
}

}  // namespace gml
