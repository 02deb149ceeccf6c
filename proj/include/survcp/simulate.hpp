#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "survcp/changepoint.hpp"
#include "survcp/data.hpp"

namespace survcp {

// splitmix64 finalizer; decorrelates replication seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Drawing layer on top of std::mt19937_64 with fixed transforms, so streams
// are reproducible across standard-library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : g_(seed) {}

  // Strictly inside (0, 1).
  double uniform() { return ((g_() >> 11) + 0.5) * 0x1.0p-53; }

  double exponential() { return -std::log(uniform()); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double a = 2.0 * 3.141592653589793238462643383279502884 * uniform();
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Marsaglia-Tsang; mean = shape, any shape > 0.
  double gamma(double shape) {
    if (shape < 1.0)
      return gamma(shape + 1.0) * std::pow(uniform(), 1.0 / shape);
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

 private:
  std::mt19937_64 g_;
  bool have_spare_ = false;
  double spare_ = 0;
};

// One change point, one binary covariate, shared-frailty clusters: the
// hazard is rate1 = base * v1 * exp(b1 x) before tau and rate2 with (v2, b2)
// after; censoring hits with probability censor_prob uniformly inside (0, t),
// and everything truncates at follow-up.
struct ScenarioConfig {
  int n = 500;
  int n_clusters = 4;
  double tau_true = 250.0;
  double followup = 600.0;
  double beta1 = 0.0, beta2 = 0.5;
  double baseline_rate = 1.0 / 300.0;
  double theta = 0.0;  // frailty variance; 0 draws no frailty
  double censor_prob = 0.1;
};

inline ScenarioConfig scenario_config(int scenario) {
  ScenarioConfig c;
  switch (scenario) {
    case 1: c.theta = 0.0; break;
    case 2: c.theta = 0.1; break;
    case 3: c.theta = 0.2; break;
    default: throw error("unknown scenario " + std::to_string(scenario));
  }
  return c;
}

inline Dataset draw_dataset(const ScenarioConfig& c, Rng& rng) {
  const int M = c.n_clusters;
  // Fresh per-cluster, per-interval frailties with mean 1 and variance theta.
  std::vector<double> v1(M, 1.0), v2(M, 1.0);
  if (c.theta > 0) {
    const double a = 1.0 / c.theta;
    for (int m = 0; m < M; ++m) v1[m] = rng.gamma(a) / a;
    for (int m = 0; m < M; ++m) v2[m] = rng.gamma(a) / a;
  }
  std::vector<Subject> rows;
  rows.reserve(c.n);
  for (int i = 0; i < c.n; ++i) {
    const int m = std::min(static_cast<int>(rng.uniform() * M), M - 1);
    const double x = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const double r1 = c.baseline_rate * v1[m] * std::exp(c.beta1 * x);
    const double r2 = c.baseline_rate * v2[m] * std::exp(c.beta2 * x);
    const double e = rng.exponential();
    const double t =
        (e <= r1 * c.tau_true) ? e / r1 : c.tau_true + (e - r1 * c.tau_true) / r2;
    const double cen =
        (rng.uniform() > c.censor_prob) ? c.followup : rng.uniform() * t;
    Subject s;
    s.id = std::to_string(i + 1);
    s.time = std::min({t, cen, c.followup});
    s.event = t <= std::min(cen, c.followup);
    s.cluster = std::to_string(m + 1);
    s.x = Eigen::VectorXd::Constant(1, x);
    rows.push_back(std::move(s));
  }
  return make_dataset(rows, {"x"}, c.followup);
}

struct RepEstimates {
  bool ok = false;
  double tau = 0;
  double beta1 = 0, beta2 = 0;
  double theta1 = 0, theta2 = 0;  // zero for the no-frailty model
};

using Estimator = std::function<RepEstimates(const Dataset&, bool frailty)>;

// The study's estimator: change-point search with one change point.
inline Estimator default_estimator(SearchOptions base = {}) {
  base.n_changepoints = 1;
  base.threads = 1;
  return [base](const Dataset& ds, bool frailty) {
    RepEstimates e;
    SearchOptions o = base;
    o.frailty = frailty;
    try {
      const SearchResult r = search(ds, o);
      if (!r.converged) return e;
      e.tau = r.tau[0];
      if (frailty) {
        e.beta1 = r.frailty->beta[0][0];
        e.beta2 = r.frailty->beta[1][0];
        e.theta1 = r.frailty->theta[0];
        e.theta2 = r.frailty->theta[1];
      } else {
        e.beta1 = r.cox->beta[0][0];
        e.beta2 = r.cox->beta[1][0];
      }
      e.ok = true;
    } catch (const error&) {
    }
    return e;
  };
}

struct ParamSummary {
  std::string param;
  double truth = 0, bias = 0, mse = 0;
};

struct ModelSummary {
  std::string model;
  int reps_used = 0, failures = 0;
  std::vector<ParamSummary> params;
};

struct StudyConfig {
  ScenarioConfig scenario;
  int reps = 500;
  uint64_t seed = 1;
  int threads = 1;
  // Feasibility floor for the study's change-point searches: candidates
  // leaving an interval with fewer events are excluded. Boundary candidates
  // otherwise dominate by overfitting a near-empty interval, which scatters
  // tau-hat and inflates theta-hat there.
  int min_events = 40;
};

struct StudyResult {
  StudyConfig config;
  ModelSummary cox, frailty;
};

namespace detail {

struct RepOutcome {
  RepEstimates cox, frailty;
};

inline ModelSummary summarize(const std::string& model,
                              const std::vector<RepOutcome>& reps,
                              const StudyConfig& cfg, bool frailty) {
  const ScenarioConfig& s = cfg.scenario;
  std::vector<std::pair<std::string, double>> truth = {
      {"tau", s.tau_true}, {"beta1", s.beta1}, {"beta2", s.beta2}};
  if (frailty) {
    truth.push_back({"theta1", s.theta});
    truth.push_back({"theta2", s.theta});
  }
  ModelSummary out;
  out.model = model;
  std::vector<double> sum(truth.size(), 0.0), sumsq(truth.size(), 0.0);
  for (const RepOutcome& r : reps) {
    const RepEstimates& e = frailty ? r.frailty : r.cox;
    if (!e.ok) {
      ++out.failures;
      continue;
    }
    ++out.reps_used;
    const double est[5] = {e.tau, e.beta1, e.beta2, e.theta1, e.theta2};
    for (size_t j = 0; j < truth.size(); ++j) {
      const double d = est[j] - truth[j].second;
      sum[j] += d;
      sumsq[j] += d * d;
    }
  }
  for (size_t j = 0; j < truth.size(); ++j) {
    ParamSummary p;
    p.param = truth[j].first;
    p.truth = truth[j].second;
    if (out.reps_used > 0) {
      p.bias = sum[j] / out.reps_used;
      p.mse = sumsq[j] / out.reps_used;
    }
    out.params.push_back(p);
  }
  return out;
}

}  // namespace detail

// Both models are fitted to the same replication data; a replication counts
// toward a model only when that model's search converges. Replication streams
// are seeded independently, so the thread count cannot change any estimate.
inline StudyResult run_study(const StudyConfig& cfg,
                             const Estimator& estimate) {
  std::vector<detail::RepOutcome> reps(cfg.reps);
  auto run_rep = [&](int rep) {
    Rng rng(mix64(cfg.seed ^ mix64(static_cast<uint64_t>(rep))));
    const Dataset ds = draw_dataset(cfg.scenario, rng);
    reps[rep].cox = estimate(ds, false);
    reps[rep].frailty = estimate(ds, true);
  };
  const int threads = std::max(1, std::min(cfg.threads, cfg.reps));
  if (threads == 1) {
    for (int rep = 0; rep < cfg.reps; ++rep) run_rep(rep);
  } else {
    std::atomic<int> next{0};
    auto worker = [&] {
      for (int rep = next.fetch_add(1); rep < cfg.reps;
           rep = next.fetch_add(1))
        run_rep(rep);
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  StudyResult out;
  out.config = cfg;
  out.cox = detail::summarize("changepoint", reps, cfg, false);
  out.frailty = detail::summarize("changepoint_frailty", reps, cfg, true);
  return out;
}

inline StudyResult run_study(const StudyConfig& cfg) {
  SearchOptions o;
  o.min_events = cfg.min_events;
  return run_study(cfg, default_estimator(o));
}

inline std::string bias_mse_csv(const StudyResult& r) {
  std::ostringstream os;
  os << "model,parameter,truth,bias,mse,reps_used,failures\n";
  for (const ModelSummary* m : {&r.cox, &r.frailty})
    for (const ParamSummary& p : m->params)
      os << m->model << ',' << p.param << ',' << detail::fmt_double(p.truth)
         << ',' << detail::fmt_double(p.bias) << ',' << detail::fmt_double(p.mse)
         << ',' << m->reps_used << ',' << m->failures << '\n';
  return os.str();
}

}  // namespace survcp
