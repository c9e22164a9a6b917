#include "gml/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

#include "gml/autodiff.hpp"
#include "gml/data.hpp"
#include "gml/error.hpp"
#include "gml/losses.hpp"
#include "gml/metrics.hpp"
#include "gml/model.hpp"
#include "gml/queues.hpp"

namespace gml {

bool SuiteReport::passed() const {
  return std::all_of(properties.begin(), properties.end(), [](const PropertyResult& p) { return p.passed; });
}

double SuiteReport::seconds() const {
  double s = 0.0;
  for (const auto& p : properties) s += p.seconds;
  return s;
}

std::string SuiteReport::to_text() const {
  std::ostringstream out;
  char line[512];
  for (const auto& p : properties) {
    std::snprintf(line, sizeof line, "  %-4s %-48s %8.3fs  %s\n", p.passed ? "ok" : "FAIL", p.name.c_str(),
                  p.seconds, p.detail.c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, "%s: %s (%zu properties, %.3fs)\n", suite.c_str(), passed() ? "PASS" : "FAIL",
                properties.size(), seconds());
  out << line;
  return out.str();
}

namespace {

using Clock = std::chrono::steady_clock;
using Outcome = std::pair<bool, std::string>;

PropertyResult timed(const std::string& name, const std::function<Outcome()>& body) {
  PropertyResult r;
  r.name = name;
  const auto start = Clock::now();
  try {
    auto [ok, detail] = body();
    r.passed = ok;
    r.detail = std::move(detail);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

std::string fmt(const char* format, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

std::mt19937_64 stream(const VerifyOptions& opts, std::uint64_t property) {
  std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32),
                    static_cast<std::uint32_t>(property)};
  return std::mt19937_64(seq);
}

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::vector<double> normals(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Dirichlet(1) draw, floored away from zero so log p stays moderate.
std::vector<double> random_prior(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& x : p) total += (x = g(rng) + 1e-3);
  for (auto& x : p) x /= total;
  return p;
}

std::vector<double> logs(const std::vector<double>& p) {
  std::vector<double> out(p.size());
  std::transform(p.begin(), p.end(), out.begin(), [](double x) { return std::log(x); });
  return out;
}

std::vector<double> scaled(std::vector<double> v, double s) {
  for (auto& x : v) x *= s;
  return v;
}

void normalize_rows(std::vector<double>& v, std::size_t dim) {
  for (std::size_t r = 0; r * dim < v.size(); ++r) {
    double sq = 0.0;
    for (std::size_t d = 0; d < dim; ++d) sq += v[r * dim + d] * v[r * dim + d];
    const double n = std::sqrt(sq);
    for (std::size_t d = 0; d < dim; ++d) v[r * dim + d] /= n;
  }
}

// log sum exp in extended precision.
long double lse(const std::vector<long double>& v) {
  long double m = -std::numeric_limits<long double>::infinity();
  for (auto x : v) m = std::max(m, x);
  long double s = 0.0L;
  for (auto x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Naive class score log mean exp(z_x.z / tau) over rows [begin, end).
long double naive_score(const std::vector<double>& zx, const std::vector<double>& bank, std::size_t dim,
                        std::size_t begin, std::size_t end, double tau) {
  std::vector<long double> terms;
  for (std::size_t r = begin; r < end; ++r) {
    long double dot = 0.0L;
    for (std::size_t d = 0; d < dim; ++d) dot += static_cast<long double>(zx[d]) * bank[r * dim + d];
    terms.push_back(dot / tau);
  }
  return lse(terms) - std::log(static_cast<long double>(end - begin));
}

// Left-hand side of the logit-adjustment identity:
// log[exp f_y / sum_c exp(f_c) p_c^alpha] + alpha * log p_y.
long double adjusted_log_prob(const std::vector<long double>& f, const std::vector<double>& p, std::size_t y,
                              double alpha) {
  std::vector<long double> denom(f.size());
  for (std::size_t c = 0; c < f.size(); ++c) denom[c] = f[c] + alpha * std::log(static_cast<long double>(p[c]));
  return f[y] - lse(denom) + alpha * std::log(static_cast<long double>(p[y]));
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct RandomContrast {
  ContrastSet set;
  std::vector<double> bank;
  std::size_t dim = 0;
};

RandomContrast random_contrast(std::mt19937_64& rng, std::size_t classes, std::size_t dim, std::size_t max_per_class) {
  RandomContrast rc;
  rc.dim = dim;
  std::vector<std::size_t> offsets{0};
  for (std::size_t c = 0; c < classes; ++c) offsets.push_back(offsets.back() + uniform_int(rng, 1, max_per_class));
  rc.bank = normals(rng, offsets.back() * dim);
  normalize_rows(rc.bank, dim);
  rc.set.features = Tensor({offsets.back(), dim}, rc.bank);
  rc.set.offsets = offsets;
  return rc;
}

// Finite-difference check of d loss / d param for a tensor captured inside
// `loss` (parameters that are not the function argument).
double param_gradcheck(const std::function<Tensor()>& loss, Tensor param, double eps = 1e-5) {
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    param.zero_grad();
    tape.backward(loss());
    analytic = param.grad();
    param.zero_grad();
  }
  TapeScope no_tape(nullptr);
  auto data = param.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + eps;
    const double up = loss().item();
    data[i] = keep - eps;
    const double down = loss().item();
    data[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

constexpr double kIdentityTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kJensenSlack = -1e-12;

}  // namespace

// ---- identities -------------------------------------------------------------

std::vector<PropertyResult> check_identities(const VerifyOptions& opts) {
  std::vector<PropertyResult> out;

  out.push_back(timed("logit adjustment identity (1000 instances)", [&]() -> Outcome {
    auto rng = stream(opts, 1);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 20);
      const std::vector<double> f = normals(rng, classes, 3.0);
      const std::vector<double> p = random_prior(rng, classes);
      const std::size_t y = uniform_int(rng, 0, classes - 1);
      const double alpha = t % 2 == 0 ? 1.0 : uniform(rng, 0.0, 1.0);
      const int label = static_cast<int>(y);
      const double lib = -adjusted_nll(Tensor({1, classes}, f), std::span<const int>(&label, 1),
                                       scaled(logs(p), opts.eta_sign), alpha)
                              .item();
      const std::vector<long double> fl(f.begin(), f.end());
      const double err = std::abs(lib - static_cast<double>(adjusted_log_prob(fl, p, y, alpha)));
      worst = std::max(worst, err);
      if (!(err <= kIdentityTol)) return {false, "instance " + std::to_string(t) + fmt(": error %.3e", err)};
    }
    return {true, fmt("max error %.3e", worst)};
  }));

  out.push_back(timed("logit adjustment identity through gml_loss", [&]() -> Outcome {
    auto rng = stream(opts, 2);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 8), dim = uniform_int(rng, 2, 8);
      RandomContrast rc = random_contrast(rng, classes, dim, 5);
      std::vector<double> zx = normals(rng, dim);
      normalize_rows(zx, dim);
      const double tau = uniform(rng, 0.05, 1.0);
      const std::vector<double> p = random_prior(rng, classes);
      const double alpha = t % 2 == 0 ? 1.0 : uniform(rng, 0.0, 1.0);
      const int label = static_cast<int>(uniform_int(rng, 0, classes - 1));
      const double lib = -gml_loss(Tensor({1, dim}, zx), std::span<const int>(&label, 1), rc.set,
                                   scaled(logs(p), opts.eta_sign), Tensor::scalar(tau), alpha)
                              .item();
      std::vector<long double> f(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        f[c] = naive_score(zx, rc.bank, dim, rc.set.offsets[c], rc.set.offsets[c + 1], tau);
      }
      const double err = std::abs(lib - static_cast<double>(adjusted_log_prob(f, p, label, alpha)));
      worst = std::max(worst, err);
      if (!(err <= kIdentityTol)) return {false, "instance " + std::to_string(t) + fmt(": error %.3e", err)};
    }
    return {true, fmt("max error %.3e", worst)};
  }));

  out.push_back(timed("isotropic reduction (1000 draws)", [&]() -> Outcome {
    auto rng = stream(opts, 3);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 12), dim = uniform_int(rng, 2, 16);
      const double sigma = std::sqrt(t == 0 ? 1.0 / 30.0 : uniform(rng, 1.0 / 30.0, 1.0));
      const std::vector<double> x = normals(rng, dim), w = normals(rng, classes * dim);
      const std::vector<double> p = random_prior(rng, classes);
      const ReductionProbs lib =
          isotropic_reduction_check(Tensor({dim}, x), Tensor({classes, dim}, w), sigma, scaled(logs(p), opts.eta_sign));
      // Gaussian densities around the unit class centres, exp(-|m_x - m_c|^2 / (2 sigma^2)) p_c.
      std::vector<double> mx = x, mc = w;
      normalize_rows(mx, dim);
      normalize_rows(mc, dim);
      std::vector<long double> logit(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        long double sq = 0.0L;
        for (std::size_t d = 0; d < dim; ++d) {
          const long double diff = static_cast<long double>(mx[d]) - mc[c * dim + d];
          sq += diff * diff;
        }
        logit[c] = -sq / (2.0L * sigma * sigma) + std::log(static_cast<long double>(p[c]));
      }
      const long double z = lse(logit);
      std::vector<double> ref(classes);
      for (std::size_t c = 0; c < classes; ++c) ref[c] = static_cast<double>(std::exp(logit[c] - z));
      for (std::size_t c = 0; c < classes; ++c) {
        worst = std::max({worst, std::abs(lib.gml[c] - ref[c]), std::abs(lib.cls[c] - ref[c])});
      }
      if (!(worst <= kIdentityTol)) return {false, "draw " + std::to_string(t) + fmt(": error %.3e", worst)};
      if (argmax(lib.gml) != argmax(ref) || argmax(lib.cls) != argmax(ref)) {
        return {false, "draw " + std::to_string(t) + ": argmax disagrees"};
      }
    }
    return {true, fmt("max error %.3e, argmax agreement 1000/1000", worst)};
  }));

  out.push_back(timed("gml_loss invariant to duplicating contrast sets", [&]() -> Outcome {
    auto rng = stream(opts, 4);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 6), dim = uniform_int(rng, 2, 6), copies = uniform_int(rng, 2, 4);
      RandomContrast rc = random_contrast(rng, classes, dim, 4);
      std::vector<double> bank;
      std::vector<std::size_t> offsets{0};
      for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < copies; ++k) {
          bank.insert(bank.end(), rc.bank.begin() + rc.set.offsets[c] * dim, rc.bank.begin() + rc.set.offsets[c + 1] * dim);
        }
        offsets.push_back(offsets.back() + copies * rc.set.size(c));
      }
      const ContrastSet dup{Tensor({offsets.back(), dim}, bank), offsets, {}};
      std::vector<double> zx = normals(rng, dim);
      normalize_rows(zx, dim);
      const std::vector<double> eta = scaled(logs(random_prior(rng, classes)), opts.eta_sign);
      const int label = static_cast<int>(uniform_int(rng, 0, classes - 1));
      const Tensor q({1, dim}, zx), tau = Tensor::scalar(uniform(rng, 0.05, 1.0));
      const double a = gml_loss(q, std::span<const int>(&label, 1), rc.set, eta, tau, 1.0).item();
      const double b = gml_loss(q, std::span<const int>(&label, 1), dup, eta, tau, 1.0).item();
      worst = std::max(worst, std::abs(a - b));
    }
    return {worst <= kIdentityTol, fmt("max difference %.3e", worst)};
  }));

  out.push_back(timed("alpha = 0 gml_loss ignores the prior", [&]() -> Outcome {
    auto rng = stream(opts, 5);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 8), dim = uniform_int(rng, 2, 6);
      RandomContrast rc = random_contrast(rng, classes, dim, 4);
      std::vector<double> zx = normals(rng, dim);
      normalize_rows(zx, dim);
      std::vector<double> eta = logs(random_prior(rng, classes));
      std::vector<double> permuted = eta;
      std::shuffle(permuted.begin(), permuted.end(), rng);
      const int label = static_cast<int>(uniform_int(rng, 0, classes - 1));
      const Tensor q({1, dim}, zx), tau = Tensor::scalar(0.2);
      const double a = gml_loss(q, std::span<const int>(&label, 1), rc.set, eta, tau, 0.0).item();
      const double b = gml_loss(q, std::span<const int>(&label, 1), rc.set, permuted, tau, 0.0).item();
      worst = std::max(worst, std::abs(a - b));
    }
    return {worst <= kIdentityTol, fmt("max difference %.3e", worst)};
  }));

  return out;
}

// ---- Jensen -------------------------------------------------------------------

std::vector<PropertyResult> check_jensen(const VerifyOptions& opts) {
  std::vector<PropertyResult> out;

  // Independent evaluation of both sides in extended precision.
  auto naive_sides = [](const std::vector<double>& zx, const RandomContrast& rc, int label, double tau) {
    const std::size_t dim = rc.dim, rows = rc.set.offsets.back();
    std::vector<long double> all(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      long double dot = 0.0L;
      for (std::size_t d = 0; d < dim; ++d) dot += static_cast<long double>(zx[d]) * rc.bank[r * dim + d];
      all[r] = dot / tau;
    }
    const long double z = lse(all);
    const std::size_t b = rc.set.offsets[label], e = rc.set.offsets[label + 1];
    std::vector<long double> pos(all.begin() + b, all.begin() + e);
    long double bound = 0.0L;
    for (auto s : pos) bound += s - z;
    return std::pair<long double, long double>{lse(pos) - z, bound};
  };

  auto instance = [&](std::mt19937_64& rng, std::size_t per_class) {
    const std::size_t classes = uniform_int(rng, 2, 8), dim = uniform_int(rng, 2, 8);
    RandomContrast rc;
    rc.dim = dim;
    rc.bank = normals(rng, classes * per_class * dim);
    normalize_rows(rc.bank, dim);
    for (std::size_t c = 0; c <= classes; ++c) rc.set.offsets.push_back(c * per_class);
    rc.set.features = Tensor({classes * per_class, dim}, rc.bank);
    return rc;
  };

  out.push_back(timed("balanced GML >= contrastive bound (100 instances)", [&]() -> Outcome {
    auto rng = stream(opts, 11);
    double min_slack = std::numeric_limits<double>::infinity(), worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      RandomContrast rc = instance(rng, uniform_int(rng, 2, 6));
      std::vector<double> zx = normals(rng, rc.dim);
      normalize_rows(zx, rc.dim);
      const int label = static_cast<int>(uniform_int(rng, 0, rc.set.num_classes() - 1));
      const double tau = uniform(rng, 0.05, 1.0);
      const BalancedReduction lib = balanced_gml_and_supcon(Tensor({rc.dim}, zx), label, rc.set, tau);
      const auto [gml_ref, bound_ref] = naive_sides(zx, rc, label, tau);
      worst = std::max({worst, std::abs(lib.balanced_gml - static_cast<double>(gml_ref)),
                        std::abs(lib.supcon_bound - static_cast<double>(bound_ref))});
      min_slack = std::min(min_slack, lib.balanced_gml - lib.supcon_bound);
    }
    const bool ok = min_slack >= kJensenSlack && worst <= 1e-10;
    return {ok, fmt("min slack %.3e", min_slack) + fmt(", oracle error %.3e", worst)};
  }));

  out.push_back(timed("Jensen step is tight with one entry per class", [&]() -> Outcome {
    auto rng = stream(opts, 12);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      RandomContrast rc = instance(rng, 1);
      std::vector<double> zx = normals(rng, rc.dim);
      normalize_rows(zx, rc.dim);
      const int label = static_cast<int>(uniform_int(rng, 0, rc.set.num_classes() - 1));
      const BalancedReduction lib = balanced_gml_and_supcon(Tensor({rc.dim}, zx), label, rc.set, uniform(rng, 0.05, 1.0));
      worst = std::max(worst, std::abs(lib.balanced_gml - lib.supcon_bound));
    }
    return {worst <= 1e-12, fmt("max gap %.3e", worst)};
  }));

  return out;
}

// ---- gradients ------------------------------------------------------------------

std::vector<PropertyResult> check_gradients(const VerifyOptions& opts) {
  std::vector<PropertyResult> out;
  auto rng = stream(opts, 21);
  auto check = [&](const std::string& name, const std::function<double()>& err) {
    out.push_back(timed(name, [&]() -> Outcome {
      const double e = err();
      return {e < kGradTol, fmt("rel. error %.3e", e)};
    }));
  };

  const std::size_t batch = 4, dim = 6, classes = 5;
  const std::vector<int> labels{0, 3, 1, 4};
  const std::vector<double> eta = logs(random_prior(rng, classes));

  check("l2_normalize", [&] {
    const Tensor weights({batch, dim}, normals(rng, batch * dim));
    return gradcheck([&](const Tensor& v) { return sum(mul(l2_normalize(v), weights)); },
                     Tensor({batch, dim}, normals(rng, batch * dim)));
  });

  std::mt19937_64 head_rng = stream(opts, 22);
  const ProjectionHead head(dim, 8, 4, head_rng);
  const Tensor head_probe({batch, 4}, normals(rng, batch * 4));
  check("projection head (input)", [&] {
    return gradcheck([&](const Tensor& x) { return sum(mul(head.project(x), head_probe)); },
                     Tensor({batch, dim}, normals(rng, batch * dim)));
  });
  check("projection head (parameters)", [&] {
    const Tensor x({batch, dim}, normals(rng, batch * dim));
    double worst = 0.0;
    for (const auto& [name, p] : head.parameters("proj.")) {
      worst = std::max(worst, param_gradcheck([&] { return sum(mul(head.project(x), head_probe)); }, p));
    }
    return worst;
  });

  const CosineClassifier cls(Tensor::parameter({classes, dim}, normals(rng, classes * dim)), 1.0 / 30.0);
  const Tensor logit_probe({batch, classes}, normals(rng, batch * classes, 0.1));
  check("cosine logits (features)", [&] {
    return gradcheck([&](const Tensor& x) { return sum(mul(cosine_logits(cls, x, eta, 1.0), logit_probe)); },
                     Tensor({batch, dim}, normals(rng, batch * dim)));
  });
  check("cosine logits (classifier weight)", [&] {
    const Tensor x({batch, dim}, normals(rng, batch * dim));
    return param_gradcheck([&] { return sum(mul(cosine_logits(cls, x, eta, 1.0), logit_probe)); }, cls.weight());
  });

  check("L_cls", [&] {
    return gradcheck([&](const Tensor& z) { return cls_loss(z, labels); },
                     Tensor({batch, classes}, normals(rng, batch * classes, 2.0)));
  });

  RandomContrast rc = random_contrast(rng, classes, dim, 4);
  std::vector<double> zx0 = normals(rng, batch * dim);
  normalize_rows(zx0, dim);
  const Tensor tau = Tensor::scalar(0.3);
  check("L_GML (queries)", [&] {
    return gradcheck([&](const Tensor& q) { return gml_loss(q, labels, rc.set, eta, tau, 1.0); },
                     Tensor({batch, dim}, zx0));
  });
  check("L_GML (contrast features)", [&] {
    return gradcheck(
        [&](const Tensor& z) {
          const ContrastSet set{z, rc.set.offsets, {}};
          return gml_loss(Tensor({batch, dim}, zx0), labels, set, eta, tau, 1.0);
        },
        Tensor(rc.set.features.shape(), rc.bank));
  });
  check("L_GML through normalized projections", [&] {
    return gradcheck(
        [&](const Tensor& raw) { return gml_loss(l2_normalize(raw), labels, rc.set, eta, tau, 0.5); },
        Tensor({batch, dim}, normals(rng, batch * dim)));
  });

  check("tau_g exclusion objective (log tau_g)", [&] {
    ContrastSet set = rc.set;
    // Every other entry carries a query's id, so exclusion is exercised.
    for (std::size_t r = 0; r < set.offsets.back(); ++r) set.sample_ids.push_back(r % 2 == 0 ? r / 2 % batch : 1000 + r);
    const std::vector<std::uint64_t> ids{0, 1, 2, 3};
    return gradcheck(
        [&](const Tensor& u) {
          return tau_g_objective(Tensor({batch, dim}, zx0), labels, ids, set, eta, exp(u), 1.0);
        },
        Tensor::scalar(std::log(0.1)));
  });

  check("L_KD (student logits)", [&] {
    const Tensor teacher({batch, classes}, normals(rng, batch * classes, 2.0));
    return gradcheck([&](const Tensor& s) { return kd_loss(s, teacher, 4.0); },
                     Tensor({batch, classes}, normals(rng, batch * classes, 2.0)));
  });

  out.push_back(timed("total_loss is linear in beta", [&]() -> Outcome {
    const Tensor w = Tensor::parameter({batch, dim}, zx0);
    auto grad_for = [&](double beta) {
      Tape tape;
      TapeScope scope(&tape);
      LossConfig config;
      config.beta = beta;
      config.gamma = 0.0;
      LossParts parts;
      parts.gml = gml_loss(w, labels, rc.set, eta, tau, 1.0);
      w.impl()->grad.clear();
      tape.backward(total_loss(parts, config));
      std::vector<double> g = w.grad();
      w.impl()->grad.clear();
      return g;
    };
    const auto g1 = grad_for(1.0), g2 = grad_for(2.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < g1.size(); ++i) worst = std::max(worst, std::abs(g2[i] - 2.0 * g1[i]));
    return {worst <= 1e-12, fmt("max deviation %.3e", worst)};
  }));

  return out;
}

// ---- queues -----------------------------------------------------------------------

namespace oracle {

std::vector<std::size_t> apportion(std::span<const double> targets, std::size_t total) {
  std::vector<std::size_t> out(targets.size());
  std::vector<std::pair<double, std::size_t>> frac;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double fl = std::floor(targets[i]);
    out[i] = static_cast<std::size_t>(fl);
    assigned += out[i];
    frac.emplace_back(targets[i] - fl, i);
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < total && j < frac.size(); ++j, ++assigned) ++out[frac[j].second];
  return out;
}

}  // namespace oracle

std::vector<PropertyResult> check_queues(const VerifyOptions& opts) {
  std::vector<PropertyResult> out;

  out.push_back(timed("capacity plan over 100 random priors", [&]() -> Outcome {
    auto rng = stream(opts, 31);
    for (int t = 0; t < 100; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 200), k_m = uniform_int(rng, 1, 4);
      // Every tenth prior gets the degenerate budget k = k_m * C.
      const std::size_t k = t % 10 == 0 ? k_m * classes : k_m * classes + uniform_int(rng, 1, 20000);
      std::vector<std::size_t> counts(classes);
      std::gamma_distribution<double> g(0.5, 1.0);
      for (auto& c : counts) c = 1 + static_cast<std::size_t>(std::floor(g(rng) * 500.0));
      const ClassPrior prior = prior_from_counts(counts);
      const QueuePlan plan = plan_capacities(prior, k, k_m);
      const std::string where = "prior " + std::to_string(t);
      if (std::accumulate(plan.capacities.begin(), plan.capacities.end(), std::size_t{0}) != k) {
        return {false, where + ": capacities do not sum to k"};
      }
      std::vector<double> targets(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        if (plan.capacities[c] < k_m) return {false, where + ": capacity below k_m"};
        targets[c] = static_cast<double>(k_m) + static_cast<double>(k - k_m * classes) * prior.p[c];
        if (std::abs(static_cast<double>(plan.capacities[c]) - targets[c]) >= 1.0) {
          return {false, where + ": capacity more than one from its target"};
        }
        for (std::size_t d = 0; d < classes; ++d) {
          if (prior.p[c] > prior.p[d] && plan.capacities[c] < plan.capacities[d]) {
            return {false, where + ": capacities not monotone in p(c)"};
          }
        }
      }
      if (plan.capacities != oracle::apportion(targets, k)) return {false, where + ": differs from apportionment oracle"};
      // Without the floor the plan is plain largest-remainder rounding of k p(c).
      std::vector<double> plain(classes);
      for (std::size_t c = 0; c < classes; ++c) plain[c] = static_cast<double>(k) * prior.p[c];
      if (apportion_capacities(prior, k, 0).capacities != oracle::apportion(plain, k)) {
        return {false, where + ": floor-free plan differs from rounding k p(c)"};
      }
      if (t % 10 == 0 && std::any_of(plan.capacities.begin(), plan.capacities.end(), [&](auto c) { return c != k_m; })) {
        return {false, where + ": k = k_m C must give k_m everywhere"};
      }
    }
    return {true, "100/100 priors"};
  }));

  out.push_back(timed("ImageNet-LT head-class capacity", [&]() -> Outcome {
    // 1000 classes, 115,846 images, 1280 down to 5 per class: Pareto-shaped
    // counts with the tail adjusted so the total matches.
    std::vector<std::size_t> counts = pareto_profile(1000, 1280, 6.0);
    std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    for (std::size_t c = 1; total != 115846; c = c % 999 + 1) {
      if (total < 115846) {
        ++counts[c];
        ++total;
      } else if (counts[c] > 5) {
        --counts[c];
        --total;
      }
    }
    counts.back() = std::max<std::size_t>(5, counts.back());
    total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (total != 115846 || counts.front() != 1280) return {false, "could not build the reference counts"};
    const ClassPrior prior = prior_from_counts(counts);
    std::vector<double> targets(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
      targets[c] = 2.0 + (16384.0 - 2000.0) * static_cast<double>(counts[c]) / 115846.0;
    }
    const auto ref = oracle::apportion(targets, 16384);
    const QueuePlan plan = plan_capacities(prior, 16384, 2);
    const bool ok = plan.capacities[0] == ref[0] && ref[0] == 161 && std::abs(targets[0] - 160.93) < 0.01;
    return {ok, fmt("target %.3f", targets[0]) + ", oracle " + std::to_string(ref[0]) + ", plan " +
                    std::to_string(plan.capacities[0])};
  }));

  out.push_back(timed("FIFO eviction", [&]() -> Outcome {
    auto rng = stream(opts, 33);
    for (int t = 0; t < 50; ++t) {
      const std::size_t cap = uniform_int(rng, 1, 9), pushes = uniform_int(rng, 0, 30);
      QueuePlan plan;
      plan.total = cap + 1;
      plan.capacities = {cap, 1};
      ClassQueueSet q(plan, 2);
      for (std::size_t i = 0; i < pushes; ++i) {
        const std::vector<double> f{static_cast<double>(i), -static_cast<double>(i)};
        q.push(0, f, i);
        if (q.fill(0) != std::min(i + 1, cap)) return {false, "fill count wrong after push " + std::to_string(i)};
      }
      const auto snap = q.snapshot(0);
      const std::size_t first = pushes > cap ? pushes - cap : 0;
      if (snap.size() != pushes - first) return {false, "snapshot length wrong"};
      for (std::size_t j = 0; j < snap.size(); ++j) {
        if (snap[j].sample_id != first + j || snap[j].feature[0] != static_cast<float>(first + j)) {
          return {false, "entries out of FIFO order"};
        }
      }
      if (q.fill(1) != 0) return {false, "push leaked into another class"};
    }
    return {true, "50 sequences"};
  }));

  out.push_back(timed("prefill fill counts", [&]() -> Outcome {
    auto rng = stream(opts, 34);
    for (int t = 0; t < 20; ++t) {
      const std::size_t classes = uniform_int(rng, 2, 6);
      SyntheticSpec spec;
      spec.num_classes = classes;
      spec.seed = rng();
      for (std::size_t c = 0; c < classes; ++c) spec.counts.push_back(uniform_int(rng, 1, 40));
      Dataset ds = synth_gaussian_dataset(spec);
      std::vector<std::size_t> order(ds.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      ds = ds.subset(order);
      QueuePlan plan;
      for (std::size_t c = 0; c < classes; ++c) plan.capacities.push_back(uniform_int(rng, 1, 30));
      plan.total = std::accumulate(plan.capacities.begin(), plan.capacities.end(), std::size_t{0});
      ClassQueueSet q(plan, 2);
      prefill(q, [](const Tensor& x) { return x; }, ds, uniform_int(rng, 1, 17));
      for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::uint64_t> visited;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          if (ds.labels[i] == static_cast<int>(c)) visited.push_back(ds.sample_ids[i]);
        }
        const std::size_t expect = std::min(plan.capacities[c], visited.size());
        if (q.fill(c) != expect) return {false, "class " + std::to_string(c) + ": fill count wrong"};
        const auto snap = q.snapshot(c);
        for (std::size_t j = 0; j < expect; ++j) {
          if (snap[j].sample_id != visited[visited.size() - expect + j]) {
            return {false, "class " + std::to_string(c) + ": not the last samples visited"};
          }
        }
      }
    }
    return {true, "20 datasets"};
  }));

  return out;
}

// ---- bounds -------------------------------------------------------------------------

namespace oracle {

double infonce_expectation(std::span<const double> joint, std::size_t rows, std::size_t cols, std::size_t k) {
  if (k < 2) throw ValidationError("infonce expectation: K >= 2 required");
  std::vector<double> px(rows, 0.0), py(cols, 0.0);
  for (std::size_t x = 0; x < rows; ++x) {
    for (std::size_t y = 0; y < cols; ++y) {
      const double p = joint[x * cols + y];
      if (!(p > 0.0)) throw ValidationError("infonce expectation: entries must be positive");
      px[x] += p;
      py[y] += p;
    }
  }
  const double kd = static_cast<double>(k);
  // E[bound] = E log r(x1, y1) - E log S, S = (1/K) sum_j r(x1, y_j),
  // r = p(x, y) / (p(x) p(y)), y_2..y_K ~ p(y) independent of x1.
  double mean_log_r = 0.0, mean_log_s = 0.0;
  for (std::size_t x = 0; x < rows; ++x) {
    std::vector<double> r(cols);
    double r_min = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < cols; ++y) {
      r[y] = joint[x * cols + y] / (px[x] * py[y]);
      r_min = std::min(r_min, r[y]);
    }
    const double u_lo = -40.0, u_hi = std::log(800.0 / std::min(1.0, r_min)), h = 0.01;
    const std::size_t steps = static_cast<std::size_t>(std::ceil((u_hi - u_lo) / h));
    for (std::size_t y1 = 0; y1 < cols; ++y1) {
      const double w = joint[x * cols + y1];
      mean_log_r += w * std::log(r[y1]);
      // log s = int (e^-t - e^-st) du with t = e^u; for S the second term is
      // exp(-t r1 / K) * M(t / K)^(K-1), M(v) = sum_y p(y) exp(-v r_y).
      double integral = 0.0;
      for (std::size_t i = 0; i <= steps; ++i) {
        const double t = std::exp(u_lo + static_cast<double>(i) * h);
        double m1 = 0.0;  // M - 1, accurate while M is near 1
        for (std::size_t y = 0; y < cols; ++y) m1 += py[y] * std::expm1(-t * r[y] / kd);
        double log_m;
        if (m1 > -0.5) {
          log_m = std::log1p(m1);
        } else {
          std::vector<long double> terms(cols);
          for (std::size_t y = 0; y < cols; ++y) terms[y] = std::log(py[y]) - t * r[y] / kd;
          log_m = static_cast<double>(lse(terms));
        }
        const double log_e = -t * r[y1] / kd + (kd - 1.0) * log_m;
        const double f = std::expm1(-t) - std::expm1(log_e);
        integral += (i == 0 || i == steps ? 0.5 : 1.0) * f;
      }
      mean_log_s += w * integral * h;
    }
  }
  return mean_log_r - mean_log_s;
}

double infonce_expectation_enumerated(std::span<const double> joint, std::size_t rows, std::size_t cols,
                                      std::size_t k) {
  std::vector<double> px(rows, 0.0), py(cols, 0.0);
  for (std::size_t x = 0; x < rows; ++x) {
    for (std::size_t y = 0; y < cols; ++y) {
      px[x] += joint[x * cols + y];
      py[y] += joint[x * cols + y];
    }
  }
  const std::size_t cells = rows * cols;
  std::vector<std::size_t> pick(k, 0);
  std::vector<double> critic(k * k);
  double expectation = 0.0;
  while (true) {
    double weight = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      weight *= joint[pick[i]];
      const std::size_t xi = pick[i] / cols;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t yj = pick[j] % cols;
        critic[i * k + j] = std::log(joint[xi * cols + yj] / px[xi]) - std::log(py[yj]);
      }
    }
    expectation += weight * infonce_bound(Tensor({k, k}, critic)).item();
    std::size_t pos = 0;
    while (pos < k && ++pick[pos] == cells) pick[pos++] = 0;
    if (pos == k) break;
  }
  return expectation;
}

}  // namespace oracle

namespace {

std::vector<double> random_joint(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(1.0, 1.0);
  const double boost = uniform(rng, 0.0, 3.0);
  std::vector<double> p(n * n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) total += (p[i * n + j] = g(rng) + 1e-3 + (i == j ? boost : 0.0));
  }
  for (auto& v : p) v /= total;
  return p;
}

}  // namespace

std::vector<PropertyResult> check_bounds(const VerifyOptions& opts) {
  std::vector<PropertyResult> out;

  out.push_back(timed("InfoNCE expectation oracle vs enumeration", [&]() -> Outcome {
    auto rng = stream(opts, 41);
    double worst = 0.0;
    const std::pair<std::size_t, std::size_t> cases[] = {{2, 2}, {2, 3}, {3, 2}, {4, 2}, {4, 3}};
    for (const auto& [n, k] : cases) {
      const auto joint = random_joint(rng, n);
      worst = std::max(worst, std::abs(oracle::infonce_expectation(joint, n, n, k) -
                                       oracle::infonce_expectation_enumerated(joint, n, n, k)));
    }
    return {worst <= 1e-10, fmt("max difference %.3e", worst)};
  }));

  struct Table {
    std::size_t n;
    std::vector<double> joint;
    double mi;
  };
  std::vector<Table> tables;
  {
    auto rng = stream(opts, 42);
    for (std::size_t n : {4u, 8u}) {
      for (int t = 0; t < 20; ++t) {
        Table tb{n, random_joint(rng, n), 0.0};
        tb.mi = exact_mi(tb.joint, n, n);
        tables.push_back(std::move(tb));
      }
    }
  }
  const std::size_t ks[] = {4, 16, 64};

  out.push_back(timed("expected InfoNCE <= exact MI, K in {4,16,64}", [&]() -> Outcome {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < tables.size(); ++t) {
      double previous = -std::numeric_limits<double>::infinity();
      for (std::size_t k : ks) {
        const double e = oracle::infonce_expectation(tables[t].joint, tables[t].n, tables[t].n, k);
        worst = std::max(worst, e - tables[t].mi);
        if (!(e <= tables[t].mi + 1e-9)) return {false, "table " + std::to_string(t) + fmt(": excess %.3e", e - tables[t].mi)};
        if (e < previous - 1e-12) return {false, "table " + std::to_string(t) + ": expectation decreases in K"};
        previous = e;
      }
    }
    return {true, fmt("max (E - MI) %.3e over 40 tables", worst)};
  }));

  out.push_back(timed("batch means over 200 batches, monotone in K", [&]() -> Outcome {
    auto rng = stream(opts, 43);
    std::size_t checked = 0;
    double worst_z = 0.0;
    for (std::size_t t = 0; t < tables.size(); ++t) {
      const Table& tb = tables[t];
      std::vector<double> px(tb.n, 0.0), py(tb.n, 0.0);
      for (std::size_t i = 0; i < tb.n * tb.n; ++i) {
        px[i / tb.n] += tb.joint[i];
        py[i % tb.n] += tb.joint[i];
      }
      std::discrete_distribution<std::size_t> cell(tb.joint.begin(), tb.joint.end());
      double prev_mean = 0.0, prev_se = 0.0;
      for (std::size_t ki = 0; ki < 3; ++ki) {
        const std::size_t k = ks[ki];
        std::vector<double> values;
        std::vector<std::size_t> batch(k);
        std::vector<double> critic(k * k);
        for (int b = 0; b < 200; ++b) {
          for (auto& c : batch) c = cell(rng);
          for (std::size_t i = 0; i < k; ++i) {
            const std::size_t xi = batch[i] / tb.n;
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t yj = batch[j] % tb.n;
              critic[i * k + j] = std::log(tb.joint[xi * tb.n + yj] / px[xi]) - std::log(py[yj]);
            }
          }
          const double v = infonce_bound(Tensor({k, k}, critic)).item();
          if (!(v <= std::log(static_cast<double>(k)) + 1e-12)) return {false, "batch value above log K"};
          values.push_back(v);
        }
        const double m = std::accumulate(values.begin(), values.end(), 0.0) / 200.0;
        double ss = 0.0;
        for (double v : values) ss += (v - m) * (v - m);
        const double se = std::sqrt(ss / 199.0 / 200.0);
        // The batch mean should sit on the exact expectation.
        const double e = oracle::infonce_expectation(tb.joint, tb.n, tb.n, k);
        if (std::abs(m - e) > 5.0 * se + 1e-12) {
          return {false, "table " + std::to_string(t) + ", K " + std::to_string(k) + ": mean far from expectation"};
        }
        if (ki > 0) {
          const double band = 2.0 * std::sqrt(se * se + prev_se * prev_se);
          if (m < prev_mean - band) {
            return {false, "table " + std::to_string(t) + ", K " + std::to_string(k) + ": mean drops beyond 2 SE"};
          }
          if (band > 0.0) worst_z = std::max(worst_z, (prev_mean - m) / (band / 2.0));
          ++checked;
        }
        prev_mean = m;
        prev_se = se;
      }
    }
    return {true, std::to_string(checked) + " steps, largest drop " + fmt("%.2f SE", worst_z)};
  }));

  out.push_back(timed("exact MI oracle properties", [&]() -> Outcome {
    auto rng = stream(opts, 44);
    for (int t = 0; t < 50; ++t) {
      const std::size_t n = uniform_int(rng, 2, 8);
      const auto joint = random_joint(rng, n);
      std::vector<double> tr(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) tr[j * n + i] = joint[i * n + j];
      }
      const double a = exact_mi(joint, n, n), b = exact_mi(tr, n, n);
      if (a < 0.0 || std::abs(a - b) > 1e-12) return {false, "negative or asymmetric MI"};
      std::vector<double> prod(n * n);
      const auto px = random_prior(rng, n), py = random_prior(rng, n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) prod[i * n + j] = px[i] * py[j];
      }
      if (std::abs(exact_mi(prod, n, n)) > 1e-12) return {false, "product table has MI"};
    }
    const std::vector<double> diag{0.5, 0.0, 0.0, 0.5};
    const double ln2 = exact_mi(diag, 2, 2);
    return {std::abs(ln2 - std::log(2.0)) < 1e-15, "50 tables, diagonal 2x2 " + fmt("%.15f", ln2)};
  }));

  return out;
}

std::vector<SuiteReport> run_suites(const std::string& name, const VerifyOptions& opts) {
  std::vector<SuiteReport> reports;
  auto add = [&](const std::string& suite) {
    SuiteReport r{suite, {}};
    if (suite == "identities") {
      r.properties = check_identities(opts);
      auto jensen = check_jensen(opts);
      r.properties.insert(r.properties.end(), jensen.begin(), jensen.end());
    } else if (suite == "gradients") {
      r.properties = check_gradients(opts);
    } else if (suite == "queues") {
      r.properties = check_queues(opts);
    } else {
      r.properties = check_bounds(opts);
    }
    reports.push_back(std::move(r));
  };
  if (name == "all") {
    for (const auto& s : kVerifySuites) add(s);
  } else if (std::find(kVerifySuites.begin(), kVerifySuites.end(), name) != kVerifySuites.end()) {
    add(name);
  } else {
    throw ValidationError("unknown suite '" + name + "' (identities, gradients, queues, bounds, all)");
  }
  return reports;
}

}  // namespace gml
