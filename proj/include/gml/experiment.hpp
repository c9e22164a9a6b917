#pragma once

// Desk-scale ordering experiment: a 10-class 2-D Gaussian long-tail task
// trained four ways from one seed.
//
//   plain_ce        teacher stage, alpha = 0 (no logit adjustment)
//   cls_only        teacher stage, alpha = 1
//   gml_no_teacher  student stage, queues fed by the student's own features
//   gml_teacher     student stage, queues fed by a frozen, wider teacher
//                   trained with L_cls only

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gml/config.hpp"
#include "gml/metrics.hpp"

namespace gml {

inline const std::vector<std::string> kDeskVariants{"plain_ce", "cls_only", "gml_no_teacher", "gml_teacher"};

ExperimentConfig desk_config(std::uint64_t seed);
// The wider L_cls-only model that feeds gml_teacher's queues.
ExperimentConfig desk_teacher_config(const ExperimentConfig& base);

struct VariantOutcome {
  EvalReport report;
  double final_tau_g = 0.0;
  std::vector<double> smoothed_loss;
};

struct DeskSeedResult {
  std::uint64_t seed = 0;
  std::map<std::string, VariantOutcome> variants;
  VariantOutcome teacher;
  double seconds = 0.0;
};

// Writes <out_dir>/<run>/{log.csv, final.gmlc} for each variant and the
// teacher when out_dir is non-empty.
DeskSeedResult run_desk_seed(std::uint64_t seed, const std::filesystem::path& out_dir = {});
// Same four variants from an arbitrary base configuration.
DeskSeedResult run_desk_variants(const ExperimentConfig& base, const ExperimentConfig& teacher,
                                 const std::filesystem::path& out_dir = {});

}  // namespace gml
