#pragma once

// Property suites run by `gml verify` and the acceptance binary. Each property
// compares the library against an independently coded oracle on seeded random
// instances.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gml {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;  // worst observed error or the first failing instance
  double seconds = 0.0;
};

struct SuiteReport {
  std::string suite;
  std::vector<PropertyResult> properties;

  bool passed() const;
  double seconds() const;
  std::string to_text() const;
};

struct VerifyOptions {
  std::uint64_t seed = 20240607;
  // -1 feeds -eta to the library while the oracles keep +eta. Mutation check
  // for the identity suite.
  double eta_sign = 1.0;
};

inline const std::vector<std::string> kVerifySuites{"identities", "gradients", "queues", "bounds"};

// Logit-adjustment identity (plain and alpha-scaled, through adjusted_nll and
// gml_loss), isotropic reduction, and the duplication / prior-permutation
// invariances of gml_loss.
std::vector<PropertyResult> check_identities(const VerifyOptions& opts);
// Balanced GML >= supervised-contrastive bound, equality with one entry per class.
std::vector<PropertyResult> check_jensen(const VerifyOptions& opts);
std::vector<PropertyResult> check_gradients(const VerifyOptions& opts);
std::vector<PropertyResult> check_queues(const VerifyOptions& opts);
std::vector<PropertyResult> check_bounds(const VerifyOptions& opts);

// "identities" covers check_identities and check_jensen. "all" runs every suite.
std::vector<SuiteReport> run_suites(const std::string& name, const VerifyOptions& opts = {});

namespace oracle {

// E over iid batches of K pairs from `joint` of the InfoNCE estimate with critic
// log p(y|x) - log p(y). Uses
//   log s = int_0^inf (e^-t - e^-st) dt / t
// with the batch sum's Laplace transform, integrated on t = e^u by the
// trapezoid rule. Entries must be strictly positive.
double infonce_expectation(std::span<const double> joint, std::size_t rows, std::size_t cols, std::size_t k);

// Same expectation by enumerating all (rows*cols)^K batches through
// infonce_bound. Only feasible for tiny tables and K.
double infonce_expectation_enumerated(std::span<const double> joint, std::size_t rows, std::size_t cols,
                                      std::size_t k);

// Largest-remainder rounding by sorting fractional parts, ties to the lower index.
std::vector<std::size_t> apportion(std::span<const double> targets, std::size_t total);

}  // namespace oracle

}  // namespace gml
