#include "gml/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "gml/error.hpp"

namespace gml {

namespace fs = std::filesystem;

// ---- Dataset --------------------------------------------------------------

std::size_t Dataset::sample_size() const {
  return std::accumulate(input_shape.begin(), input_shape.end(), std::size_t{1}, std::multiplies<>());
}

std::span<const float> Dataset::input(std::size_t i) const {
  const std::size_t n = sample_size();
  return std::span<const float>(inputs).subspan(i * n, n);
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) {
    if (y >= 0 && static_cast<std::size_t>(y) < num_classes) ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

void Dataset::validate() const {
  if (num_classes == 0) throw ValidationError("dataset: num_classes must be positive");
  if (input_shape.empty()) throw ValidationError("dataset: empty input shape");
  if (inputs.size() != labels.size() * sample_size())
    throw ValidationError("dataset: input storage does not match " + std::to_string(labels.size()) + " samples");
  if (sample_ids.size() != labels.size()) throw ValidationError("dataset: sample_ids and labels differ in length");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ValidationError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  }
  std::set<std::uint64_t> seen(sample_ids.begin(), sample_ids.end());
  if (seen.size() != sample_ids.size()) throw ValidationError("dataset: sample_ids are not unique");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.input_shape = input_shape;
  out.num_classes = num_classes;
  const std::size_t n = sample_size();
  out.inputs.reserve(indices.size() * n);
  for (auto i : indices) {
    auto row = input(i);
    out.inputs.insert(out.inputs.end(), row.begin(), row.end());
    out.labels.push_back(labels.at(i));
    out.sample_ids.push_back(sample_ids.at(i));
  }
  return out;
}

// ---- prior and groups -----------------------------------------------------

ClassPrior prior_from_counts(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ValidationError("prior: no classes");
  ClassPrior prior;
  prior.counts.assign(counts.begin(), counts.end());
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ValidationError("empty class " + std::to_string(c));
    const double p = static_cast<double>(counts[c]) / total;
    prior.p.push_back(p);
    prior.eta.push_back(std::log(p));
  }
  return prior;
}

ClassPrior estimate_prior(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ValidationError("prior: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    ++counts[static_cast<std::size_t>(y)];
  }
  return prior_from_counts(counts);
}

const char* group_name(Group g) {
  switch (g) {
    case Group::many: return "many";
    case Group::medium: return "medium";
    case Group::few: return "few";
  }
  return "?";
}

GroupSpec assign_groups(std::span<const std::size_t> counts, std::size_t many_threshold, std::size_t few_threshold) {
  GroupSpec spec{many_threshold, few_threshold, {}};
  for (auto n : counts) {
    if (n > many_threshold)
      spec.assignment.push_back(Group::many);
    else if (n < few_threshold)
      spec.assignment.push_back(Group::few);
    else
      spec.assignment.push_back(Group::medium);
  }
  return spec;
}

// ---- long-tail profiles ---------------------------------------------------

namespace {

std::size_t clamp_count(double v) {
  const double r = std::round(v);
  return r < 1.0 ? std::size_t{1} : static_cast<std::size_t>(r);
}

}  // namespace

std::vector<std::size_t> exponential_profile(std::size_t num_classes, std::size_t n_max, double imbalance_factor) {
  if (num_classes == 0) throw ValidationError("longtail: num_classes must be positive");
  if (!(imbalance_factor >= 1.0)) throw ValidationError("longtail: imbalance factor must be >= 1");
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double frac = num_classes == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(num_classes - 1);
    counts[c] = clamp_count(static_cast<double>(n_max) * std::pow(imbalance_factor, -frac));
  }
  return counts;
}

std::vector<std::size_t> pareto_profile(std::size_t num_classes, std::size_t n_max, double alpha) {
  if (num_classes == 0) throw ValidationError("longtail: num_classes must be positive");
  if (!(alpha > 0.0)) throw ValidationError("longtail: pareto alpha must be > 0");
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double x = 1.0 + (num_classes == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(num_classes - 1));
    counts[c] = clamp_count(static_cast<double>(n_max) * std::pow(x, -(alpha + 1.0)));
  }
  return counts;
}

Dataset subsample_to_counts(const Dataset& source, std::span<const std::size_t> targets, std::uint64_t seed,
                            std::vector<std::string>* warnings) {
  source.validate();
  if (targets.size() != source.num_classes) throw ValidationError("longtail: one target count per class required");
  std::vector<std::vector<std::size_t>> by_class(source.num_classes);
  for (std::size_t i = 0; i < source.size(); ++i) by_class[static_cast<std::size_t>(source.labels[i])].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < source.num_classes; ++c) {
    auto& idx = by_class[c];
    const std::size_t want = targets[c];
    if (idx.size() < want && warnings) {
      warnings->push_back("class " + std::to_string(c) + ": wanted " + std::to_string(want) + " samples, source has " +
                          std::to_string(idx.size()));
    }
    const std::size_t take = std::min(want, idx.size());
    // partial Fisher-Yates over the class's rows
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());
  return source.subset(keep);
}

namespace {

void note_clamps(std::span<const std::size_t> counts, const std::vector<double>& raw, std::vector<std::string>* warnings) {
  if (!warnings) return;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (std::round(raw[c]) < 1.0)
      warnings->push_back("class " + std::to_string(c) + ": computed count 0 clamped to 1");
  }
}

}  // namespace

Dataset make_exponential_longtail(const Dataset& source, double imbalance_factor, std::uint64_t seed,
                                  std::vector<std::string>* warnings) {
  if (!(imbalance_factor >= 1.0)) throw ValidationError("longtail: imbalance factor must be >= 1");
  const auto available = source.class_counts();
  const std::size_t n_max = *std::max_element(available.begin(), available.end());
  const auto targets = exponential_profile(source.num_classes, n_max, imbalance_factor);
  std::vector<double> raw(source.num_classes);
  for (std::size_t c = 0; c < raw.size(); ++c) {
    const double frac = raw.size() == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(raw.size() - 1);
    raw[c] = static_cast<double>(n_max) * std::pow(imbalance_factor, -frac);
  }
  note_clamps(targets, raw, warnings);
  return subsample_to_counts(source, targets, seed, warnings);
}

Dataset make_pareto_longtail(const Dataset& source, double alpha, std::uint64_t seed, std::vector<std::string>* warnings) {
  const auto available = source.class_counts();
  const std::size_t n_max = *std::max_element(available.begin(), available.end());
  const auto targets = pareto_profile(source.num_classes, n_max, alpha);
  std::vector<double> raw(source.num_classes);
  for (std::size_t c = 0; c < raw.size(); ++c) {
    const double x = 1.0 + (raw.size() == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(raw.size() - 1));
    raw[c] = static_cast<double>(n_max) * std::pow(x, -(alpha + 1.0));
  }
  note_clamps(targets, raw, warnings);
  return subsample_to_counts(source, targets, seed, warnings);
}

// ---- synthetic ------------------------------------------------------------

Dataset synth_gaussian_dataset(const SyntheticSpec& spec) {
  if (!(spec.sigma > 0.0)) throw ValidationError("synthetic: sigma must be > 0");
  if (spec.num_classes == 0) throw ValidationError("synthetic: num_classes must be positive");
  if (spec.dim < 2) throw ValidationError("synthetic: dim must be >= 2");
  if (spec.counts.size() != spec.num_classes) throw ValidationError("synthetic: counts length must equal num_classes");

  Dataset ds;
  ds.input_shape = {spec.dim};
  ds.num_classes = spec.num_classes;
  std::mt19937_64 rng(spec.seed);
  std::uint64_t next_id = spec.first_sample_id;
  const double two_pi = 2.0 * std::acos(-1.0);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const double angle = two_pi * static_cast<double>(c) / static_cast<double>(spec.num_classes);
    std::vector<double> mu(spec.dim, 0.0);
    mu[0] = spec.means_radius * std::cos(angle);
    mu[1] = spec.means_radius * std::sin(angle);
    for (std::size_t i = 0; i < spec.counts[c]; ++i) {
      for (std::size_t d = 0; d < spec.dim; ++d) {
        std::normal_distribution<double> noise(mu[d], spec.sigma);
        ds.inputs.push_back(static_cast<float>(noise(rng)));
      }
      ds.labels.push_back(static_cast<int>(c));
      ds.sample_ids.push_back(next_id++);
    }
  }
  return ds;
}

// ---- CSV ------------------------------------------------------------------

Dataset read_csv_dataset(const fs::path& path, std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("CSV dataset " + path.string() + " has no header");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw ValidationError("CSV dataset needs at least one feature and a label column");

  Dataset ds;
  ds.input_shape = {columns - 1};
  int max_label = -1;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col + 1 < columns) {
          ds.inputs.push_back(std::stof(cell));
        } else if (col + 1 == columns) {
          std::size_t used = 0;
          const int y = std::stoi(cell, &used);
          ds.labels.push_back(y);
          max_label = std::max(max_label, y);
        }
      } catch (const std::exception&) {
        throw ValidationError("CSV row " + std::to_string(row + 2) + ": cannot parse '" + cell + "'");
      }
      ++col;
    }
    if (col != columns) throw ValidationError("CSV row " + std::to_string(row + 2) + ": expected " + std::to_string(columns) + " cells");
    ds.sample_ids.push_back(row++);
  }
  ds.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label + 1);
  ds.validate();
  return ds;
}

void write_csv_dataset(const Dataset& ds, const fs::path& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write CSV dataset " + path.string());
  const std::size_t n = ds.sample_size();
  for (std::size_t d = 0; d < n; ++d) out << 'x' << d << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (float v : ds.input(i)) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

// ---- CIFAR ----------------------------------------------------------------

Dataset read_cifar_batches(std::span<const fs::path> paths, std::size_t num_classes) {
  Dataset ds;
  ds.input_shape = {3, 32, 32};
  ds.num_classes = num_classes;
  std::vector<unsigned char> record(kCifarRecordBytes);
  std::uint64_t next_id = 0;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open CIFAR batch " + path.string());
    const auto bytes = fs::file_size(path);
    if (bytes % kCifarRecordBytes != 0)
      throw ValidationError("CIFAR batch " + path.string() + " is not a whole number of 3073-byte records");
    while (in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()))) {
      ds.labels.push_back(record[0]);
      for (std::size_t i = 1; i < kCifarRecordBytes; ++i) ds.inputs.push_back(static_cast<float>(record[i]) / 255.0f);
      ds.sample_ids.push_back(next_id++);
    }
  }
  ds.validate();
  return ds;
}

void write_cifar_batch(const Dataset& ds, const fs::path& path) {
  ds.validate();
  if (ds.sample_size() != kCifarRecordBytes - 1) throw ValidationError("CIFAR output needs 3x32x32 samples");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write CIFAR batch " + path.string());
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    record[0] = static_cast<unsigned char>(ds.labels[i]);
    auto px = ds.input(i);
    for (std::size_t j = 0; j < px.size(); ++j)
      record[j + 1] = static_cast<unsigned char>(std::lround(std::clamp(px[j], 0.0f, 1.0f) * 255.0f));
    out.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
  }
}

// ---- manifest -------------------------------------------------------------

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  nlohmann::json j;
  j["format"] = m.format;
  j["path"] = m.path;
  j["num_classes"] = m.num_classes;
  if (m.imbalance_factor > 0.0) j["imbalance_factor"] = m.imbalance_factor;
  if (m.has_seed) j["seed"] = m.seed;
  if (!m.config_hash.empty()) j["config_hash"] = m.config_hash;
  if (!m.counts.empty()) j["counts"] = m.counts;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  static const std::set<std::string> known{"format", "path", "num_classes", "imbalance_factor", "seed", "config_hash", "counts"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ValidationError("manifest: unknown key '" + key + "'");
  }
  DatasetManifest m;
  try {
    m.format = j.at("format").get<std::string>();
    m.path = j.at("path").get<std::string>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("imbalance_factor")) m.imbalance_factor = j["imbalance_factor"].get<double>();
    if (j.contains("seed")) {
      m.has_seed = true;
      m.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("config_hash")) m.config_hash = j["config_hash"].get<std::string>();
    if (j.contains("counts")) m.counts = j["counts"].get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  if (m.format != "csv" && m.format != "cifar") throw ValidationError("manifest: unsupported format '" + m.format + "'");
  return m;
}

Dataset load_manifest_dataset(const fs::path& manifest_path) {
  const auto m = read_manifest(manifest_path);
  fs::path data = m.path;
  if (data.is_relative()) data = manifest_path.parent_path() / data;
  if (m.format == "csv") return read_csv_dataset(data, m.num_classes);
  std::vector<fs::path> batches{data};
  return read_cifar_batches(batches, m.num_classes);
}

}  // namespace gml
