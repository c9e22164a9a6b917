// Python bindings: gml_longtail._core

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "gml/checkpoint.hpp"
#include "gml/config.hpp"
#include "gml/data.hpp"
#include "gml/error.hpp"
#include "gml/experiment.hpp"
#include "gml/losses.hpp"
#include "gml/metrics.hpp"
#include "gml/queues.hpp"
#include "gml/trainer.hpp"
#include "gml/verify.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace gml;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

// JSON goes through Python's json module so nested structures come back as
// plain dicts and lists.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ExperimentConfig config_arg(const py::object& o) {
  if (py::isinstance<py::dict>(o)) return config_from_json(from_py(o));
  return load_config(o.cast<std::string>());
}

py::dict row_dict(const LogRow& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["step"] = r.step;
  d["loss_cls"] = r.loss_cls;
  d["loss_gml"] = r.loss_gml;
  d["loss_kd"] = r.loss_kd;
  d["tau_g"] = r.tau_g;
  d["lr"] = r.lr;
  d["acc_all"] = r.acc_all;
  d["acc_many"] = r.acc_many;
  d["acc_med"] = r.acc_med;
  d["acc_few"] = r.acc_few;
  return d;
}

py::dict result_dict(const TrainResult& r) {
  py::dict d;
  py::list rows;
  for (const auto& row : r.rows) rows.append(row_dict(row));
  d["rows"] = rows;
  d["report"] = r.final_report ? to_py(r.final_report->to_json()) : py::object(py::none());
  d["checkpoint"] = r.final_checkpoint.string();
  d["config_hash"] = r.config_hash;
  d["warnings"] = r.warnings;
  d["tau_g"] = r.model.tau_g();
  return d;
}

py::dict train(const py::object& config, const std::string& stage, const std::string& teacher_ckpt,
               const std::string& out_dir) {
  const ExperimentConfig c = config_arg(config);
  if (stage != "teacher" && stage != "student") throw ValidationError("stage must be teacher or student");
  std::optional<TeacherArtifact> teacher;
  if (stage == "student" && c.train.use_teacher) {
    if (teacher_ckpt.empty()) throw ValidationError("student stage requires teacher_ckpt");
    teacher = teacher_from_checkpoint(load_checkpoint(teacher_ckpt));
  }
  TrainResult r;
  {
    py::gil_scoped_release release;
    const DataSplits data = load_data(c.dataset);
    TrainOptions opts;
    opts.out_dir = out_dir;
    r = stage == "teacher" ? train_teacher(c, data, opts) : train_student(c, teacher ? &*teacher : nullptr, data, opts);
  }
  return result_dict(r);
}

py::object evaluate_ckpt(const std::string& ckpt, const std::string& data, std::optional<double> alpha) {
  const CheckpointEval e = evaluate_checkpoint(load_checkpoint(ckpt), data, alpha);
  nlohmann::json j = e.report.to_json();
  j["alpha"] = e.alpha;
  j["config_hash"] = e.config_hash;
  return to_py(j);
}

py::list verify(const std::string& suite, double eta_sign) {
  VerifyOptions opts;
  opts.eta_sign = eta_sign;
  std::vector<SuiteReport> reports;
  {
    py::gil_scoped_release release;
    reports = run_suites(suite, opts);
  }
  py::list out;
  for (const auto& rep : reports) {
    for (const auto& p : rep.properties) {
      py::dict d;
      d["suite"] = rep.suite;
      d["name"] = p.name;
      d["passed"] = p.passed;
      d["detail"] = p.detail;
      d["seconds"] = p.seconds;
      out.append(d);
    }
  }
  return out;
}

py::dict make_longtail_py(const py::object& config, const std::string& out_dir) {
  std::vector<std::string> warnings;
  const DatasetManifest m = make_longtail(config_arg(config), out_dir, &warnings);
  py::dict d;
  d["counts"] = m.counts;
  d["config_hash"] = m.config_hash;
  d["manifest"] = (fs::path(out_dir) / "train.manifest.json").string();
  d["warnings"] = warnings;
  return d;
}

double gml_loss_py(const Array& zx, const std::vector<int>& labels, const Array& contrast,
                   const std::vector<std::size_t>& offsets, const std::vector<double>& eta, double tau_g, double alpha) {
  TapeScope none(nullptr);
  const ContrastSet set{to_tensor(contrast), offsets, {}};
  return gml_loss(to_tensor(zx), labels, set, eta, Tensor::scalar(tau_g), alpha).item();
}

double adjusted_nll_py(const Array& scores, const std::vector<int>& labels, const std::vector<double>& eta,
                       double alpha) {
  TapeScope none(nullptr);
  return adjusted_nll(to_tensor(scores), labels, eta, alpha).item();
}

double exact_mi_py(const Array& joint) {
  if (joint.ndim() != 2) throw ValidationError("exact_mi: joint must be a 2-D table");
  return exact_mi(std::span<const double>(joint.data(), static_cast<std::size_t>(joint.size())),
                  static_cast<std::size_t>(joint.shape(0)), static_cast<std::size_t>(joint.shape(1)));
}

py::dict desk_seed(std::uint64_t seed, const std::string& out_dir) {
  DeskSeedResult r;
  {
    py::gil_scoped_release release;
    r = run_desk_seed(seed, out_dir);
  }
  py::dict d;
  for (const auto& [name, v] : r.variants) {
    py::dict x;
    x["acc_all"] = v.report.overall;
    x["acc_many"] = v.report.many;
    x["acc_med"] = v.report.medium;
    x["acc_few"] = v.report.few;
    x["tau_g"] = v.final_tau_g;
    d[py::str(name)] = x;
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Long-tailed classification with Gaussian-mixture-likelihood losses";

  m.def("verify", &verify, py::arg("suite") = "all", py::arg("eta_sign") = 1.0,
        "Run property suites (identities, gradients, queues, bounds or all); one dict per property.");
  m.def("make_longtail", &make_longtail_py, py::arg("config"), py::arg("out_dir"),
        "Build and write the long-tailed splits described by a config (path or dict).");
  m.def("train", &train, py::arg("config"), py::arg("stage") = "teacher", py::arg("teacher_ckpt") = "",
        py::arg("out_dir") = "", "Train a teacher or student; returns log rows, final report and checkpoint path.");
  m.def("evaluate", &evaluate_ckpt, py::arg("ckpt"), py::arg("data") = "", py::arg("alpha") = py::none(),
        "Evaluate a checkpoint; returns the report dict.");
  m.def("run_desk_seed", &desk_seed, py::arg("seed"), py::arg("out_dir") = "",
        "Train the four desk variants for one seed; returns per-variant accuracies and tau_g.");

  m.def("load_config", [](const std::string& path) { return to_py(to_json(load_config(path))); }, py::arg("path"));
  m.def("config_hash", [](const py::object& config) { return config_hash(config_arg(config)); }, py::arg("config"));

  m.def("gml_loss", &gml_loss_py, py::arg("zx"), py::arg("labels"), py::arg("contrast"), py::arg("offsets"),
        py::arg("eta"), py::arg("tau_g"), py::arg("alpha") = 1.0,
        "Mean GML loss of unit queries against per-class contrast sets laid out by offsets.");
  m.def("adjusted_nll", &adjusted_nll_py, py::arg("scores"), py::arg("labels"), py::arg("eta"), py::arg("alpha") = 1.0);
  m.def("exact_mi", &exact_mi_py, py::arg("joint"));
  m.def("plan_capacities",
        [](const std::vector<std::size_t>& counts, std::size_t k, std::size_t k_m) {
          return plan_capacities(prior_from_counts(counts), k, k_m).capacities;
        },
        py::arg("counts"), py::arg("k"), py::arg("k_m"));
  m.def("exponential_profile", &exponential_profile, py::arg("num_classes"), py::arg("n_max"),
        py::arg("imbalance_factor"));
  m.def("pareto_profile", &pareto_profile, py::arg("num_classes"), py::arg("n_max"), py::arg("alpha"));
}
