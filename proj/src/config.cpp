#include "gml/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <type_traits>

#include "gml/error.hpp"

namespace gml {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::is_same_v<std::uint64_t, unsigned long> && std::is_same_v<std::size_t, unsigned long>);

namespace {

// Pulls typed fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ValidationError("config: '" + name_ + "' must be an object");
  }

  void field(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void field(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void field(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void field(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void field(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  // Nested object; absent means defaults.
  const json* object(const char* key) { return find(key); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ValidationError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ValidationError("config: '" + name_ + "." + key + "' must be " + what);
  }

  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json augment_json(const AugmentSpec& a) { return {{"kind", a.kind}, {"sigma", a.sigma}, {"pad", a.pad}}; }

void read_augment(const json* j, const std::string& name, AugmentSpec& a) {
  if (!j) return;
  Section s(*j, name);
  s.field("kind", a.kind);
  s.field("sigma", a.sigma);
  s.field("pad", a.pad);
  s.finish();
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ValidationError("config: " + message);
}

void check_augment(const AugmentSpec& a, const std::string& name) {
  check(a.kind == "none" || a.kind == "gaussian_noise" || a.kind == "flip_crop",
        name + ".kind must be none, gaussian_noise or flip_crop");
  check(a.sigma >= 0.0, name + ".sigma must be >= 0");
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  check(d.source == "synthetic" || d.source == "csv" || d.source == "cifar" || d.source == "manifest",
        "dataset.source must be synthetic, csv, cifar or manifest");
  check(d.source == "synthetic" || !d.train_path.empty(), "dataset.train_path is required for source " + d.source);
  check(d.profile == "exponential" || d.profile == "pareto" || d.profile == "none",
        "dataset.profile must be exponential, pareto or none");
  check(d.num_classes >= 1, "dataset.num_classes must be >= 1");
  check(d.imbalance_factor >= 1.0, "dataset.imbalance_factor must be >= 1");
  check(d.pareto_alpha > 0.0, "dataset.pareto_alpha must be > 0");
  check(d.few_threshold <= d.many_threshold, "dataset.few_threshold must not exceed many_threshold");
  check(d.synthetic.dim >= 2, "dataset.synthetic.dim must be >= 2");
  check(d.synthetic.sigma > 0.0, "dataset.synthetic.sigma must be > 0");
  check(d.synthetic.n_max >= 1, "dataset.synthetic.n_max must be >= 1");

  check(model.encoder == "mlp" || model.encoder == "small_cnn", "model.encoder must be mlp or small_cnn");
  check(model.feature_dim >= 1, "model.feature_dim must be >= 1");
  for (auto w : model.hidden) check(w >= 1, "model.hidden widths must be >= 1");
  for (auto w : model.conv_channels) check(w >= 1, "model.conv_channels must be >= 1");

  check(queues.k_m >= 1, "queues.k_m must be >= 1");
  check(queues.k >= queues.k_m * d.num_classes, "queues.k must be >= k_m * num_classes");
  check(queues.prefill_batch >= 1, "queues.prefill_batch must be >= 1");

  loss.validate();

  const auto& t = train;
  check(t.epochs >= 1, "train.epochs must be >= 1");
  check(t.batch_size >= 1, "train.batch_size must be >= 1");
  check(t.base_lr > 0.0, "train.base_lr must be > 0");
  check(t.schedule == "cosine" || t.schedule == "step", "train.schedule must be cosine or step");
  for (std::size_t i = 0; i < t.milestones.size(); ++i) {
    check(t.milestones[i] < t.epochs, "train.milestones must be < epochs");
    check(i == 0 || t.milestones[i] > t.milestones[i - 1], "train.milestones must be strictly increasing");
  }
  check(t.factor > 0.0, "train.factor must be > 0");
  check(t.momentum >= 0.0 && t.momentum < 1.0, "train.momentum must lie in [0, 1)");
  check(t.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check_augment(t.classifier_view, "train.classifier_view");
  check_augment(t.contrast_view, "train.contrast_view");

  check(eval.alpha >= 0.0 && eval.alpha <= 1.0, "eval.alpha must lie in [0, 1]");
  check(eval.every >= 1, "eval.every must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json j;
  j["dataset"] = {{"source", d.source},
                  {"train_path", d.train_path},
                  {"test_path", d.test_path},
                  {"num_classes", d.num_classes},
                  {"profile", d.profile},
                  {"imbalance_factor", d.imbalance_factor},
                  {"pareto_alpha", d.pareto_alpha},
                  {"seed", d.seed},
                  {"many_threshold", d.many_threshold},
                  {"few_threshold", d.few_threshold},
                  {"synthetic",
                   {{"dim", d.synthetic.dim},
                    {"radius", d.synthetic.radius},
                    {"sigma", d.synthetic.sigma},
                    {"n_max", d.synthetic.n_max},
                    {"test_per_class", d.synthetic.test_per_class}}}};
  j["model"] = {{"encoder", c.model.encoder},
                {"hidden", c.model.hidden},
                {"feature_dim", c.model.feature_dim},
                {"conv_channels", c.model.conv_channels},
                {"projection_hidden", c.model.projection_hidden},
                {"projection_dim", c.model.projection_dim}};
  j["queues"] = {{"k", c.queues.k},
                 {"k_m", c.queues.k_m},
                 {"max_per_class", c.queues.max_per_class},
                 {"prefill_batch", c.queues.prefill_batch}};
  j["loss"] = {{"tau_g", c.loss.tau_g},
               {"train_tau_g", c.loss.train_tau_g},
               {"tau_s", c.loss.tau_s},
               {"alpha", c.loss.alpha},
               {"gamma", c.loss.gamma},
               {"beta", c.loss.beta},
               {"alpha_kd", c.loss.alpha_kd},
               {"kd_temperature", c.loss.kd_temperature}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"base_lr", t.base_lr},
                {"schedule", t.schedule},
                {"milestones", t.milestones},
                {"factor", t.factor},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"seed", t.seed},
                {"classifier_view", augment_json(t.classifier_view)},
                {"contrast_view", augment_json(t.contrast_view)},
                {"separate_views", t.separate_views},
                {"use_teacher", t.use_teacher},
                {"checkpoint_every", t.checkpoint_every}};
  j["eval"] = {{"alpha", c.eval.alpha}, {"every", c.eval.every}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "config");
  if (const json* v = root.object("dataset")) {
    auto& d = c.dataset;
    Section s(*v, "dataset");
    s.field("source", d.source);
    s.field("train_path", d.train_path);
    s.field("test_path", d.test_path);
    s.field("num_classes", d.num_classes);
    s.field("profile", d.profile);
    s.field("imbalance_factor", d.imbalance_factor);
    s.field("pareto_alpha", d.pareto_alpha);
    s.field("seed", d.seed);
    s.field("many_threshold", d.many_threshold);
    s.field("few_threshold", d.few_threshold);
    if (const json* syn = s.object("synthetic")) {
      Section ss(*syn, "dataset.synthetic");
      ss.field("dim", d.synthetic.dim);
      ss.field("radius", d.synthetic.radius);
      ss.field("sigma", d.synthetic.sigma);
      ss.field("n_max", d.synthetic.n_max);
      ss.field("test_per_class", d.synthetic.test_per_class);
      ss.finish();
    }
    s.finish();
  }
  if (const json* v = root.object("model")) {
    Section s(*v, "model");
    s.field("encoder", c.model.encoder);
    s.field("hidden", c.model.hidden);
    s.field("feature_dim", c.model.feature_dim);
    s.field("conv_channels", c.model.conv_channels);
    s.field("projection_hidden", c.model.projection_hidden);
    s.field("projection_dim", c.model.projection_dim);
    s.finish();
  }
  if (const json* v = root.object("queues")) {
    Section s(*v, "queues");
    s.field("k", c.queues.k);
    s.field("k_m", c.queues.k_m);
    s.field("max_per_class", c.queues.max_per_class);
    s.field("prefill_batch", c.queues.prefill_batch);
    s.finish();
  }
  if (const json* v = root.object("loss")) {
    Section s(*v, "loss");
    s.field("tau_g", c.loss.tau_g);
    s.field("train_tau_g", c.loss.train_tau_g);
    s.field("tau_s", c.loss.tau_s);
    s.field("alpha", c.loss.alpha);
    s.field("gamma", c.loss.gamma);
    s.field("beta", c.loss.beta);
    s.field("alpha_kd", c.loss.alpha_kd);
    s.field("kd_temperature", c.loss.kd_temperature);
    s.finish();
  }
  if (const json* v = root.object("train")) {
    auto& t = c.train;
    Section s(*v, "train");
    s.field("epochs", t.epochs);
    s.field("batch_size", t.batch_size);
    s.field("base_lr", t.base_lr);
    s.field("schedule", t.schedule);
    s.field("milestones", t.milestones);
    s.field("factor", t.factor);
    s.field("momentum", t.momentum);
    s.field("weight_decay", t.weight_decay);
    s.field("seed", t.seed);
    read_augment(s.object("classifier_view"), "train.classifier_view", t.classifier_view);
    read_augment(s.object("contrast_view"), "train.contrast_view", t.contrast_view);
    s.field("separate_views", t.separate_views);
    s.field("use_teacher", t.use_teacher);
    s.field("checkpoint_every", t.checkpoint_every);
    s.finish();
  }
  if (const json* v = root.object("eval")) {
    Section s(*v, "eval");
    s.field("alpha", c.eval.alpha);
    s.field("every", c.eval.every);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& config) { return fnv1a_hex(to_json(config).dump()); }

ModelSpec model_spec(const ExperimentConfig& config, const Shape& input_shape, bool with_heads,
                     std::size_t contrast_input_dim) {
  ModelSpec spec;
  spec.encoder.kind = config.model.encoder == "small_cnn" ? EncoderKind::small_cnn : EncoderKind::mlp;
  spec.encoder.input_shape = input_shape;
  if (spec.encoder.kind == EncoderKind::mlp && input_shape.size() != 1) {
    spec.encoder.input_shape = {shape_numel(input_shape)};
  }
  spec.encoder.hidden = config.model.hidden;
  spec.encoder.feature_dim = config.model.feature_dim;
  spec.encoder.conv_channels = config.model.conv_channels;
  spec.num_classes = config.dataset.num_classes;
  spec.tau_s = config.loss.tau_s;
  spec.with_heads = with_heads;
  spec.contrast_input_dim = contrast_input_dim;
  spec.projection_hidden = config.model.projection_hidden;
  spec.projection_dim = config.model.projection_dim;
  spec.tau_g_init = config.loss.tau_g;
  return spec;
}

namespace {

Dataset apply_profile(const DatasetConfig& d, const Dataset& source, std::vector<std::string>* warnings) {
  if (d.profile == "none") return source;
  if (d.profile == "pareto") return make_pareto_longtail(source, d.pareto_alpha, d.seed, warnings);
  return make_exponential_longtail(source, d.imbalance_factor, d.seed, warnings);
}

}  // namespace

Dataset load_dataset_file(const fs::path& path, std::size_t num_classes) {
  const auto ext = path.extension().string();
  if (ext == ".json") return load_manifest_dataset(path);
  if (ext == ".bin") {
    std::vector<fs::path> batches{path};
    return read_cifar_batches(batches, num_classes);
  }
  return read_csv_dataset(path, num_classes);
}

DataSplits load_data(const DatasetConfig& d, std::vector<std::string>* warnings) {
  DataSplits out;
  if (d.source == "synthetic") {
    SyntheticSpec spec;
    spec.num_classes = d.num_classes;
    spec.dim = d.synthetic.dim;
    spec.means_radius = d.synthetic.radius;
    spec.sigma = d.synthetic.sigma;
    spec.counts.assign(d.num_classes, d.synthetic.n_max);
    spec.seed = d.seed;
    out.train = apply_profile(d, synth_gaussian_dataset(spec), warnings);
    if (d.synthetic.test_per_class > 0) {
      spec.counts.assign(d.num_classes, d.synthetic.test_per_class);
      spec.seed = d.seed ^ 0x9e3779b97f4a7c15ULL;
      spec.first_sample_id = std::uint64_t{1} << 40;
      out.test = synth_gaussian_dataset(spec);
    }
  } else if (d.source == "cifar") {
    fs::path dir = d.train_path;
    std::vector<fs::path> batches;
    if (fs::is_directory(dir)) {
      for (int i = 1; i <= 5; ++i) batches.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      batches.push_back(dir);
    }
    out.train = apply_profile(d, read_cifar_batches(batches, d.num_classes), warnings);
    fs::path test = d.test_path;
    if (test.empty() && fs::is_directory(dir) && fs::exists(dir / "test_batch.bin")) test = dir / "test_batch.bin";
    if (!test.empty()) {
      std::vector<fs::path> tb{test};
      out.test = read_cifar_batches(tb, d.num_classes);
    }
  } else if (d.source == "csv") {
    out.train = apply_profile(d, read_csv_dataset(d.train_path, d.num_classes), warnings);
    if (!d.test_path.empty()) out.test = load_dataset_file(d.test_path, d.num_classes);
  } else {
    out.train = load_manifest_dataset(d.train_path);
    if (!d.test_path.empty()) out.test = load_dataset_file(d.test_path, d.num_classes);
  }
  if (out.train.num_classes != d.num_classes) {
    throw ValidationError("dataset has " + std::to_string(out.train.num_classes) + " classes, config says " +
                          std::to_string(d.num_classes));
  }
  out.train.validate();
  if (out.test.size() > 0) out.test.validate();
  return out;
}

namespace {

bool looks_like_cifar(const Dataset& ds) {
  return ds.input_shape == std::vector<std::size_t>{3, 32, 32};
}

// Writes `ds` next to its manifest and returns the manifest.
DatasetManifest write_split(const Dataset& ds, const fs::path& dir, const std::string& stem,
                            const ExperimentConfig& config, const std::string& hash, bool with_profile) {
  DatasetManifest m;
  m.format = looks_like_cifar(ds) ? "cifar" : "csv";
  m.path = stem + (m.format == "cifar" ? ".bin" : ".csv");
  m.num_classes = ds.num_classes;
  if (with_profile && config.dataset.profile == "exponential") m.imbalance_factor = config.dataset.imbalance_factor;
  m.has_seed = true;
  m.seed = config.dataset.seed;
  m.config_hash = hash;
  m.counts = ds.class_counts();
  if (m.format == "cifar") {
    write_cifar_batch(ds, dir / m.path);
  } else {
    write_csv_dataset(ds, dir / m.path);
  }
  write_manifest(m, dir / (stem + ".manifest.json"));
  return m;
}

}  // namespace

DatasetManifest make_longtail(const ExperimentConfig& config, const fs::path& out, std::vector<std::string>* warnings) {
  const std::string hash = config_hash(config);
  const DataSplits data = load_data(config.dataset, warnings);
  fs::create_directories(out);
  DatasetManifest m = write_split(data.train, out, "train", config, hash, true);
  if (data.test.size() > 0) write_split(data.test, out, "test", config, hash, false);
  return m;
}

}  // namespace gml
