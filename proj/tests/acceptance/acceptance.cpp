// Acceptance report: one PASS / FAIL / SKIP line per criterion.
//
//   gml_acceptance [--only N] [--report-only] [--report-file PATH] [--work-dir DIR] [--cifar-dir DIR]
//
// Exit status is 1 when any criterion fails, unless --report-only is given, in
// which case only a harness error (exception) gives a non-zero status.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gml/config.hpp"
#include "gml/experiment.hpp"
#include "gml/trainer.hpp"
#include "gml/verify.hpp"

#include <unistd.h>

namespace fs = std::filesystem;
using namespace gml;

namespace {

// Tolerances and budgets.
constexpr double kIdentityBudgetSeconds = 10.0;
constexpr double kGradientBudgetSeconds = 60.0;
constexpr double kBoundBudgetSeconds = 60.0;
constexpr double kDeskBudgetSeconds = 300.0;
constexpr double kCifarBudgetSeconds = 1800.0;
constexpr int kSeeds = 5;
constexpr int kRequiredWins = 4;
constexpr double kTauInit = 0.1;
constexpr double kTauUpper = 0.2;

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::pass: return "PASS";
    case Verdict::fail: return "FAIL";
    case Verdict::skip: return "SKIP";
  }
  return "?";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Runs a property suite; `keep` selects which properties count.
Outcome suite_outcome(const std::vector<PropertyResult>& props, double seconds, double budget,
                      const std::function<bool(const std::string&)>& keep = {}) {
  Outcome o{Verdict::pass, ""};
  std::size_t counted = 0;
  for (const auto& p : props) {
    if (keep && !keep(p.name)) continue;
    ++counted;
    if (!p.passed) {
      o.verdict = Verdict::fail;
      o.detail += p.name + " failed (" + p.detail + "); ";
    }
  }
  if (counted == 0) return {Verdict::fail, "no properties ran"};
  if (budget > 0.0 && seconds >= budget) {
    o.verdict = Verdict::fail;
    o.detail += "runtime " + fmt("%.2f", seconds) + " s over " + fmt("%.0f", budget) + " s; ";
  }
  o.detail += std::to_string(counted) + " properties, " + fmt("%.2f", seconds) + " s";
  return o;
}

template <class F>
std::pair<std::vector<PropertyResult>, double> timed(F f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto props = f(VerifyOptions{});
  return {props, seconds_since(t0)};
}

// Desk runs are shared by criteria 6, 8 and 9.
struct DeskRuns {
  std::vector<DeskSeedResult> results;
  double seconds = 0.0;
};

DeskRuns run_desk(const fs::path& dir) {
  DeskRuns runs;
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < kSeeds; ++s) {
    runs.results.push_back(run_desk_seed(static_cast<std::uint64_t>(s), dir / ("seed_" + std::to_string(s))));
  }
  runs.seconds = seconds_since(t0);
  return runs;
}

double few(const DeskSeedResult& r, const std::string& variant) {
  const auto& rep = r.variants.at(variant).report;
  return rep.few.value_or(-1.0);
}

Outcome desk_ordering(const DeskRuns& runs) {
  struct Pair {
    const char* better;
    const char* worse;
  };
  const Pair pairs[] = {{"gml_teacher", "gml_no_teacher"}, {"gml_teacher", "cls_only"}, {"cls_only", "plain_ce"}};
  Outcome o{Verdict::pass, ""};
  for (const auto& p : pairs) {
    int wins = 0;
    std::string margins;
    for (const auto& r : runs.results) {
      const double d = few(r, p.better) - few(r, p.worse);
      if (d > 0.0) ++wins;
      margins += (margins.empty() ? "" : " ") + fmt("%+.4f", d);
    }
    if (wins < kRequiredWins) o.verdict = Verdict::fail;
    o.detail += std::string(p.better) + " > " + p.worse + ": " + std::to_string(wins) + "/" + std::to_string(kSeeds) +
                " [" + margins + "]; ";
  }
  if (runs.seconds > kDeskBudgetSeconds) o.verdict = Verdict::fail;
  o.detail += "few-group accuracy per seed:";
  for (const auto& r : runs.results) {
    o.detail += " s" + std::to_string(r.seed) + "(";
    bool first = true;
    for (const auto& v : kDeskVariants) {
      o.detail += (first ? "" : ",") + v + "=" + fmt("%.4f", few(r, v));
      first = false;
    }
    o.detail += ")";
  }
  o.detail += "; " + fmt("%.1f", runs.seconds) + " s";
  return o;
}

Outcome tau_dynamics(const DeskRuns& runs) {
  Outcome o{Verdict::pass, "final tau_g:"};
  for (const auto& r : runs.results) {
    for (const char* v : {"gml_no_teacher", "gml_teacher"}) {
      const double tau = r.variants.at(v).final_tau_g;
      if (!(tau < kTauInit && tau > 0.0 && tau < kTauUpper)) o.verdict = Verdict::fail;
      o.detail += " s" + std::to_string(r.seed) + "/" + v + "=" + fmt("%.4f", tau);
    }
  }
  return o;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  const auto ta = tree_bytes(a), tb = tree_bytes(b);
  std::size_t logs = 0, ckpts = 0;
  std::vector<std::string> diffs;
  for (const auto& [name, bytes] : ta) {
    const auto it = tb.find(name);
    if (it == tb.end() || it->second != bytes) diffs.push_back(name);
    if (name.ends_with("log.csv")) ++logs;
    if (name.ends_with(".gmlc")) ++ckpts;
  }
  for (const auto& [name, _] : tb) {
    if (!ta.count(name)) diffs.push_back(name);
  }
  if (logs == 0 || ckpts == 0) return {Verdict::fail, "no logs or checkpoints were written"};
  if (!diffs.empty()) return {Verdict::fail, std::to_string(diffs.size()) + " files differ, first: " + diffs.front()};
  return {Verdict::pass, std::to_string(logs) + " log.csv and " + std::to_string(ckpts) + " checkpoints byte-identical"};
}

Outcome cifar_smoke(const fs::path& source_dir, const fs::path& cifar_dir, const fs::path& work) {
  if (!fs::exists(cifar_dir / "data_batch_1.bin")) {
    return {Verdict::skip, "CIFAR-10 binary batches not found at " + cifar_dir.string()};
  }
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig base = load_config(source_dir / "configs" / "cifar10lt.json");
  base.dataset.train_path = cifar_dir.string();
  int wins = 0;
  std::string detail;
  for (int s = 0; s < kSeeds; ++s) {
    ExperimentConfig c = base;
    c.dataset.seed = static_cast<std::uint64_t>(s);
    c.train.seed = static_cast<std::uint64_t>(s);
    const DataSplits data = load_data(c.dataset);
    const fs::path dir = work / ("seed_" + std::to_string(s));

    ExperimentConfig plain = c;
    plain.loss.alpha = 0.0;
    const TrainResult ce = train_teacher(plain, data, {dir / "plain_ce", {}, {}});

    ExperimentConfig tc = c;
    tc.train.seed = c.train.seed + 1000;
    const TrainResult teacher = train_teacher(tc, data, {dir / "teacher", {}, {}});
    const TeacherArtifact art{teacher.model, tc, teacher.config_hash, nlohmann::json::object()};
    const TrainResult gml = train_student(c, &art, data, {dir / "gml", {}, {}});

    const double a = gml.final_report->overall, b = ce.final_report->overall;
    if (a > b) ++wins;
    detail += " s" + std::to_string(s) + "(gml=" + fmt("%.4f", a) + ",ce=" + fmt("%.4f", b) + ")";
  }
  const double secs = seconds_since(t0);
  const bool ok = wins >= kRequiredWins && secs <= kCifarBudgetSeconds;
  return {ok ? Verdict::pass : Verdict::fail,
          "gml > plain_ce balanced accuracy " + std::to_string(wins) + "/" + std::to_string(kSeeds) + ":" + detail + "; " +
              fmt("%.0f", secs) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  bool report_only = false;
  fs::path report_file, work_dir, cifar_dir;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::fprintf(stderr, "%s needs a value\n", a.c_str());
        std::exit(1);
      }
      return argv[++i];
    };
    if (a == "--only") only = std::stoi(next());
    else if (a == "--report-only") report_only = true;
    else if (a == "--report-file") report_file = next();
    else if (a == "--work-dir") work_dir = next();
    else if (a == "--cifar-dir") cifar_dir = next();
    else {
      std::fprintf(stderr, "unknown argument %s\n", a.c_str());
      return 1;
    }
  }
  const fs::path source_dir = GML_SOURCE_DIR;
  if (cifar_dir.empty()) {
    const char* env = std::getenv("GML_CIFAR_DIR");
    cifar_dir = env ? fs::path(env) : source_dir / "data" / "cifar-10-batches-bin";
  }
  const bool own_work = work_dir.empty();
  if (own_work) work_dir = fs::temp_directory_path() / ("gml_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work_dir);

  auto wanted = [&](int n) { return only == 0 || only == n; };
  std::vector<std::pair<int, Outcome>> lines;
  int failures = 0;
  auto emit = [&](int n, Outcome o) {
    std::printf("CRITERION %d %s %s\n", n, verdict_name(o.verdict), o.detail.c_str());
    std::fflush(stdout);
    if (o.verdict == Verdict::fail) ++failures;
    lines.emplace_back(n, std::move(o));
  };

  try {
    if (wanted(1)) {
      auto [props, secs] = timed(check_identities);
      emit(1, suite_outcome(props, secs, kIdentityBudgetSeconds));
    }
    if (wanted(2)) {
      auto [props, secs] = timed(check_jensen);
      emit(2, suite_outcome(props, secs, 0.0));
    }
    if (wanted(3)) {
      auto [props, secs] = timed(check_gradients);
      emit(3, suite_outcome(props, secs, kGradientBudgetSeconds));
    }
    if (wanted(4)) {
      auto [props, secs] = timed(check_queues);
      emit(4, suite_outcome(props, secs, 0.0));
    }
    if (wanted(5)) {
      auto [props, secs] = timed(check_bounds);
      emit(5, suite_outcome(props, secs, kBoundBudgetSeconds));
    }
    std::optional<DeskRuns> first;
    if (wanted(6) || wanted(8) || wanted(9)) first = run_desk(work_dir / "desk_a");
    if (wanted(6)) emit(6, desk_ordering(*first));
    if (wanted(7)) emit(7, cifar_smoke(source_dir, cifar_dir, work_dir / "cifar"));
    if (wanted(8)) emit(8, tau_dynamics(*first));
    if (wanted(9)) {
      run_desk(work_dir / "desk_b");
      emit(9, determinism(work_dir / "desk_a", work_dir / "desk_b"));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance harness error: %s\n", e.what());
    if (own_work) fs::remove_all(work_dir);
    return 2;
  }

  if (!report_file.empty()) {
    std::ofstream out(report_file);
    for (const auto& [n, o] : lines) out << "CRITERION " << n << ' ' << verdict_name(o.verdict) << ' ' << o.detail << '\n';
  }
  std::printf("%d of %zu criteria failed\n", failures, lines.size());
  if (own_work) fs::remove_all(work_dir);
  return failures > 0 && !report_only ? 1 : 0;
}
