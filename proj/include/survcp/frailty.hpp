#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "survcp/brent.hpp"
#include "survcp/coxph.hpp"
#include "survcp/data.hpp"
#include "survcp/special.hpp"

namespace survcp {

struct FrailtyOptions {
  Ties ties = Ties::efron;
  // Use plain hazard-increment exposures in the E-step instead of the
  // tie-consistent expected counts (identical on tie-free data).
  bool breslow_exposure = false;
  double theta_init = 1.0;
  double theta_floor = 1e-8;
  double theta_max = 100.0;
  std::optional<double> pin_theta;  // hold every theta fixed at this value
  double tol = 1e-6;
  int max_iter = 500;
  bool record_trace = false;  // keep the per-iterate marginal log-likelihood
};

// log of E[v^D e^{-vC}] under v ~ Gamma(z, z):
// z log z + lgamma(z+D) - lgamma(z) - (z+D) log(z+C).
inline double gamma_term(double z, double D, double C) {
  if (z > 1e7) {
    // The lgamma difference collapses to a short series when D counts events;
    // this avoids cancellation between huge z log z magnitudes.
    if (D >= 0 && D == std::floor(D) && D <= 1e6) {
      double s = 0;
      for (double j = 1; j < D; ++j) s += std::log1p(j / z);
      return s - (z + D) * std::log1p(C / z);
    }
    return std::lgamma(z + D) - std::lgamma(z) - D * std::log(z) -
           (z + D) * std::log1p(C / z);
  }
  return (z * std::log(z) - (z + D) * std::log(z + C)) +
         (std::lgamma(z + D) - std::lgamma(z));
}

namespace detail {

inline void set_offsets(IntervalBlock& b, const Eigen::VectorXd& vhat) {
  for (int i = 0; i < b.rows(); ++i) b.offset[i] = std::log(vhat[b.cluster[i]]);
}

inline Ties exposure_ties(const FrailtyOptions& o) {
  return o.breslow_exposure ? Ties::breslow : o.ties;
}

// Cluster event counts and expected-count exposures at (beta, vhat); the
// division by vhat strips the offset factor so C is the unit-frailty exposure.
inline void cluster_moments(IntervalBlock& b, const Eigen::VectorXd& beta,
                            const Eigen::VectorXd& vhat, int M,
                            const FrailtyOptions& o, Eigen::VectorXd& D,
                            Eigen::VectorXd& C) {
  set_offsets(b, vhat);
  const Eigen::VectorXd E = expected_counts(b, beta, exposure_ties(o));
  D = Eigen::VectorXd::Zero(M);
  C = Eigen::VectorXd::Zero(M);
  for (int i = 0; i < b.rows(); ++i) {
    const int m = b.cluster[i];
    if (b.status[i]) D[m] += 1;
    C[m] += E[i] / vhat[m];
  }
}

}  // namespace detail

struct EStep {
  Eigen::VectorXd A, B;    // per-cluster posterior Gamma(A, B) parameters
  Eigen::VectorXd vhat;    // posterior means A/B
  Eigen::VectorXd D, C;    // per-cluster event counts and exposures
};

inline EStep e_step(IntervalBlock& b, const Eigen::VectorXd& beta, double theta,
                    const Eigen::VectorXd& vhat, int n_clusters,
                    const FrailtyOptions& o = {}) {
  EStep r;
  detail::cluster_moments(b, beta, vhat, n_clusters, o, r.D, r.C);
  const double z = 1.0 / theta;
  r.A = (r.D.array() + z).matrix();
  r.B = (r.C.array() + z).matrix();
  r.vhat = (r.A.array() / r.B.array()).matrix();
  return r;
}

// Expected complete-data gamma log-likelihood in theta, with the frailty
// posterior held at Gamma(A, B): E[log v] = digamma(A) - log B,
// E[v] = A / B.
inline double m_step_objective(double theta, const Eigen::VectorXd& A,
                               const Eigen::VectorXd& B) {
  const double z = 1.0 / theta;
  double s = 0;
  for (int m = 0; m < A.size(); ++m)
    s += -z * std::log(theta) - std::lgamma(z) +
         (z - 1.0) * (digamma(A[m]) - std::log(B[m])) - z * A[m] / B[m];
  return s;
}

inline double m_step(const Eigen::VectorXd& A, const Eigen::VectorXd& B,
                     const FrailtyOptions& o = {}) {
  auto obj = [&](double t) { return m_step_objective(t, A, B); };
  const double interior =
      brent_max(obj, o.theta_floor, o.theta_max, 1e-9).first;
  double best = interior, fbest = obj(interior);
  if (obj(o.theta_floor) >= fbest) {
    best = o.theta_floor;
    fbest = obj(o.theta_floor);
  }
  if (obj(o.theta_max) > fbest) best = o.theta_max;
  return best;
}

// One interval's marginal log-likelihood contribution: the offset partial
// likelihood with the event offsets removed, plus the per-cluster gamma
// integral terms at the expected-count exposures.
inline double interval_marginal(IntervalBlock& b, const Eigen::VectorXd& beta,
                                double theta, const Eigen::VectorXd& vhat,
                                int n_clusters, const FrailtyOptions& o = {}) {
  Eigen::VectorXd D, C;
  detail::cluster_moments(b, beta, vhat, n_clusters, o, D, C);
  const double pl = interval_pl(b, beta, o.ties).value;
  double sdo = 0;
  for (int i = 0; i < b.rows(); ++i)
    if (b.status[i]) sdo += b.offset[i];
  const double z = 1.0 / theta;
  double g = 0;
  for (int m = 0; m < n_clusters; ++m) g += gamma_term(z, D[m], C[m]);
  return pl - sdo + g;
}

struct IntervalEm {
  Eigen::VectorXd beta;
  double theta = 1.0;
  Eigen::VectorXd vhat;
  int iterations = 0;
  bool converged = false;
  double pl = 0;        // partial log-likelihood at the fit, offsets log vhat
  double marginal = 0;  // marginal log-likelihood contribution
  std::vector<double> trace;
  std::string failure;
};

namespace detail {

struct BetaRefit {
  Eigen::VectorXd beta;
  bool ok = false;
};

inline BetaRefit refit_beta(IntervalBlock& b, const Eigen::VectorXd& vhat,
                            const Eigen::VectorXd& warm, Ties ties) {
  set_offsets(b, vhat);
  const BlockFit f = fit_block(b, ties, warm, 200, 1e-11);
  return {f.beta, f.grad_norm < 1e-8};
}

}  // namespace detail

// EM for one interval: E-step exposures, theta update by bounded
// maximization, posterior means, then a warm-started coefficient refit.
// A collapse probe jumps theta to the floor once the update map keeps
// shrinking it geometrically, and Aitken extrapolation speeds slow interior
// approaches; both accept only states that do not lower the marginal.
inline IntervalEm interval_em(IntervalBlock& b, int n_clusters,
                              const Eigen::VectorXd& beta0,
                              const FrailtyOptions& o = {}) {
  const int M = n_clusters;
  IntervalEm r;
  r.beta = beta0;
  r.theta = o.pin_theta ? *o.pin_theta : o.theta_init;
  r.vhat = Eigen::VectorXd::Ones(M);

  Eigen::VectorXd D = Eigen::VectorXd::Zero(M), C(M);
  for (int i = 0; i < b.rows(); ++i)
    if (b.status[i]) D[b.cluster[i]] += 1;

  auto update_map = [&](double t) {
    const double z = 1.0 / t;
    const Eigen::VectorXd A = (D.array() + z).matrix();
    const Eigen::VectorXd B = (C.array() + z).matrix();
    return m_step(A, B, o);
  };
  auto posterior = [&](double t) {
    const double z = 1.0 / t;
    return Eigen::VectorXd(((D.array() + z) / (C.array() + z)).matrix());
  };

  std::vector<double> hist;
  int ndown = 0;
  for (int it = 0; it < o.max_iter; ++it) {
    detail::cluster_moments(b, r.beta, r.vhat, M, o, D, C);
    double nth;
    if (!o.pin_theta) {
      nth = update_map(r.theta);
      if (nth <= 1e-7) nth = o.theta_floor;
      ndown = (nth < r.theta) ? ndown + 1 : 0;
      if (nth > o.theta_floor && ndown >= 8 && nth < 0.05) {
        const double tp = std::max(o.theta_floor, nth / 1000.0);
        if (update_map(tp) <= tp * (1 + 1e-6)) {
          const Eigen::VectorXd vf = posterior(o.theta_floor);
          const Eigen::VectorXd vs = posterior(nth);
          const auto bf = detail::refit_beta(b, vf, r.beta, o.ties);
          const auto bs = detail::refit_beta(b, vs, r.beta, o.ties);
          if (bf.ok && bs.ok &&
              interval_marginal(b, bf.beta, o.theta_floor, vf, M, o) >=
                  interval_marginal(b, bs.beta, nth, vs, M, o) - 1e-9)
            nth = o.theta_floor;
        }
      }
      hist.push_back(nth);
      if (hist.size() >= 3 && it % 8 == 7 && nth > o.theta_floor) {
        const double t0 = hist[hist.size() - 3], t1 = hist[hist.size() - 2],
                     t2 = hist.back();
        const double d0 = t1 - t0, d1 = t2 - t1, den = d1 - d0;
        if (std::abs(den) > 1e-300) {
          const double ta = t2 - d1 * d1 / den;
          if (ta > o.theta_floor && ta <= o.theta_max &&
              std::abs(update_map(ta) - ta) < std::abs(update_map(nth) - nth)) {
            const Eigen::VectorXd va = posterior(ta);
            const Eigen::VectorXd v2 = posterior(nth);
            const auto ba = detail::refit_beta(b, va, r.beta, o.ties);
            const auto b2 = detail::refit_beta(b, v2, r.beta, o.ties);
            if (ba.ok && b2.ok &&
                interval_marginal(b, ba.beta, ta, va, M, o) >=
                    interval_marginal(b, b2.beta, nth, v2, M, o) - 1e-9) {
              nth = ta;
              hist.back() = ta;
            }
          }
        }
      }
    } else {
      nth = r.theta;
    }
    const Eigen::VectorXd nv = posterior(nth);
    const auto nb = detail::refit_beta(b, nv, r.beta, o.ties);
    if (!nb.ok) {
      r.failure = "coefficient update failed to converge";
      r.iterations = it + 1;
      break;
    }
    if (o.record_trace)
      r.trace.push_back(interval_marginal(b, nb.beta, nth, nv, M, o));
    double dd = std::abs(nth - r.theta) / (std::abs(r.theta) + 1e-4);
    for (int j = 0; j < r.beta.size(); ++j)
      dd = std::max(dd, std::abs(nb.beta[j] - r.beta[j]) /
                            (std::abs(r.beta[j]) + 1e-4));
    for (int m = 0; m < M; ++m)
      dd = std::max(dd,
                    std::abs(nv[m] - r.vhat[m]) / (std::abs(r.vhat[m]) + 1e-4));
    r.beta = nb.beta;
    r.theta = nth;
    r.vhat = nv;
    r.iterations = it + 1;
    if (dd < o.tol) {
      r.converged = true;
      break;
    }
  }
  detail::set_offsets(b, r.vhat);
  r.pl = interval_pl(b, r.beta, o.ties).value;
  r.marginal = interval_marginal(b, r.beta, r.theta, r.vhat, M, o);
  return r;
}

struct FrailtyFit {
  IntervalPartition partition;
  std::vector<Eigen::VectorXd> beta;  // per interval
  std::vector<double> theta;          // per interval
  Eigen::MatrixXd vhat;               // interval x cluster posterior means
  double loglik = 0;                  // marginal log-likelihood
  double partial_loglik = 0;          // sum of interval PLs at the fit
  std::vector<double> pl_by_interval, marginal_by_interval;
  int iterations = 0;
  bool converged = false;
  std::vector<std::vector<double>> traces;
  std::vector<std::string> warnings;
};

inline FrailtyFit em_fit(const Dataset& ds, const IntervalPartition& p,
                         const FrailtyOptions& o = {}) {
  if (ds.n_clusters() < 2) throw error("frailty requires at least 2 clusters");
  const auto episodes = split_episodes(ds, p);
  auto blocks = build_blocks(ds, episodes, p.n_intervals());
  const int M = ds.n_clusters();

  FrailtyFit fit;
  fit.partition = p;
  fit.converged = true;
  fit.vhat.resize(p.n_intervals(), M);
  for (IntervalBlock& b : blocks) {
    if (b.rows() == 0 || b.events() == 0)
      throw error("interval " + std::to_string(b.interval + 1) + " has no events");
    const BlockFit init = fit_block(b, o.ties);
    if (!init.converged && init.grad_norm >= 1e-8) {
      fit.converged = false;
      fit.warnings.push_back("interval " + std::to_string(b.interval + 1) +
                             ": initial coefficient fit did not converge");
    }
    IntervalEm r = interval_em(b, M, init.beta, o);
    if (!r.failure.empty()) {
      fit.converged = false;
      fit.warnings.push_back("interval " + std::to_string(b.interval + 1) +
                             ": " + r.failure);
    }
    if (r.theta >= o.theta_max - 1e-6 * o.theta_max)
      fit.warnings.push_back("interval " + std::to_string(b.interval + 1) +
                             ": frailty variance at upper bound " +
                             detail::fmt_double(o.theta_max));
    fit.beta.push_back(r.beta);
    fit.theta.push_back(r.theta);
    fit.vhat.row(b.interval) = r.vhat.transpose();
    fit.loglik += r.marginal;
    fit.partial_loglik += r.pl;
    fit.pl_by_interval.push_back(r.pl);
    fit.marginal_by_interval.push_back(r.marginal);
    fit.iterations = std::max(fit.iterations, r.iterations);
    fit.converged = fit.converged && r.converged;
    if (o.record_trace) fit.traces.push_back(std::move(r.trace));
  }
  return fit;
}

// Marginal log-likelihood at an arbitrary state (not necessarily a fit).
inline double full_loglik(const Dataset& ds, const IntervalPartition& p,
                          const std::vector<Eigen::VectorXd>& beta,
                          const std::vector<double>& theta,
                          const Eigen::MatrixXd& vhat,
                          const FrailtyOptions& o = {}) {
  const auto episodes = split_episodes(ds, p);
  auto blocks = build_blocks(ds, episodes, p.n_intervals());
  const int M = ds.n_clusters();
  double total = 0;
  for (IntervalBlock& b : blocks) {
    if (b.rows() == 0) continue;
    Eigen::VectorXd v = vhat.row(b.interval).transpose();
    total += interval_marginal(b, beta[b.interval], theta[b.interval], v, M, o);
  }
  return total;
}

}  // namespace survcp
