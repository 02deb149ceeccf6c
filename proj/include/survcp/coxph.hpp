#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "survcp/data.hpp"

namespace survcp {

enum class Ties { efron, breslow };

// Change points 0 < tau_1 < ... < tau_K < followup delimit K+1 intervals.
struct IntervalPartition {
  std::vector<double> taus;
  double followup = 0;
  int n_intervals() const { return static_cast<int>(taus.size()) + 1; }
};

inline void check_partition(const IntervalPartition& p, double followup) {
  if (p.followup != followup) throw error("partition/follow-up mismatch");
  double prev = 0;
  for (double t : p.taus) {
    if (!(t > prev) || !(t < p.followup))
      throw error("invalid partition: change points must be strictly increasing in (0, follow-up)");
    prev = t;
  }
}

// Risk episode (entry, exit]; a subject contributes one row per interval it
// survives into, with status true only in the interval containing its time.
struct EpisodeRow {
  int subject = -1;
  int interval = 0;
  double entry = 0, exit = 0;
  bool status = false;
  int cluster = 0;
  double offset = 0;
};

inline std::vector<EpisodeRow> split_episodes(const Dataset& ds,
                                              const IntervalPartition& p) {
  check_partition(p, ds.followup);
  const int K = static_cast<int>(p.taus.size());
  std::vector<EpisodeRow> rows;
  rows.reserve(ds.n() * (K + 1));
  for (int i = 0; i < ds.n(); ++i) {
    const double t = ds.time[i];
    for (int k = 0; k <= K; ++k) {
      const double lo = k ? p.taus[k - 1] : 0.0;
      if (!(lo < t)) break;
      EpisodeRow r;
      r.subject = i;
      r.interval = k;
      r.entry = lo;
      r.exit = (k < K) ? std::min(t, p.taus[k]) : t;
      r.status = ds.event[i] && (k == K || t <= p.taus[k]);
      r.cluster = ds.cluster[i];
      rows.push_back(r);
    }
  }
  return rows;
}

// One interval's episodes in canonical order (exit asc, events before
// censorings, then cluster/covariates) so results do not depend on subject
// order. All rows share the interval's entry time, which every event time in
// the interval exceeds, so risk sets reduce to suffixes by exit.
struct IntervalBlock {
  int interval = 0;
  double entry = 0;
  Eigen::VectorXd exit;
  std::vector<uint8_t> status;
  Eigen::MatrixXd X;
  Eigen::VectorXd offset;
  std::vector<int> cluster, subject;

  int rows() const { return static_cast<int>(status.size()); }
  int events() const {
    int c = 0;
    for (uint8_t s : status) c += s != 0;
    return c;
  }
};

inline std::vector<IntervalBlock> build_blocks(const Dataset& ds,
                                               const std::vector<EpisodeRow>& episodes,
                                               int n_intervals) {
  std::vector<std::vector<int>> per(n_intervals);
  for (int i = 0; i < static_cast<int>(episodes.size()); ++i) {
    if (episodes[i].interval < 0 || episodes[i].interval >= n_intervals)
      throw error("episode interval out of range");
    per[episodes[i].interval].push_back(i);
  }
  const int q = ds.n_covariates();
  std::vector<IntervalBlock> blocks(n_intervals);
  for (int k = 0; k < n_intervals; ++k) {
    auto& idx = per[k];
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      const EpisodeRow &ra = episodes[a], &rb = episodes[b];
      if (ra.exit != rb.exit) return ra.exit < rb.exit;
      if (ra.status != rb.status) return ra.status > rb.status;
      if (ra.cluster != rb.cluster) return ra.cluster < rb.cluster;
      for (int j = 0; j < q; ++j) {
        const double xa = ds.X(ra.subject, j), xb = ds.X(rb.subject, j);
        if (xa != xb) return xa < xb;
      }
      return false;
    });
    IntervalBlock& b = blocks[k];
    b.interval = k;
    const int r = static_cast<int>(idx.size());
    b.exit.resize(r);
    b.status.resize(r);
    b.X.resize(r, q);
    b.offset.resize(r);
    b.cluster.resize(r);
    b.subject.resize(r);
    for (int i = 0; i < r; ++i) {
      const EpisodeRow& e = episodes[idx[i]];
      if (i == 0) b.entry = e.entry;
      b.exit[i] = e.exit;
      b.status[i] = e.status ? 1 : 0;
      b.X.row(i) = ds.X.row(e.subject);
      b.offset[i] = e.offset;
      b.cluster[i] = e.cluster;
      b.subject[i] = e.subject;
    }
  }
  return blocks;
}

struct PLValue {
  double value = 0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

// Partial log-likelihood of one interval with per-row offsets. Linear
// predictors are recentered before exponentiation; the recentering cancels
// exactly between numerator and denominator terms.
inline PLValue interval_pl(const IntervalBlock& b, const Eigen::VectorXd& beta,
                           Ties ties) {
  const int r = b.rows(), q = static_cast<int>(beta.size());
  PLValue out;
  out.grad = Eigen::VectorXd::Zero(q);
  out.hess = Eigen::MatrixXd::Zero(q, q);
  if (r == 0) return out;

  Eigen::VectorXd eta = b.offset + b.X * beta;
  const double shift = eta.maxCoeff();
  Eigen::VectorXd w = (eta.array() - shift).exp();

  double s0 = 0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(q);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(q, q);
  Eigen::VectorXd a1(q), ratio(q), s1d(q);
  Eigen::MatrixXd a2(q, q), s2d(q, q), rr(q, q), htmp(q, q);

  int i = r - 1;
  while (i >= 0) {
    const double u = b.exit[i];
    int j = i;
    int d = 0;
    double s0d = 0;
    s1d.setZero();
    s2d.setZero();
    while (j >= 0 && b.exit[j] == u) {
      const double wj = w[j];
      s0 += wj;
      s1.noalias() += wj * b.X.row(j).transpose();
      s2.noalias() += wj * b.X.row(j).transpose() * b.X.row(j);
      if (b.status[j]) {
        ++d;
        s0d += wj;
        s1d.noalias() += wj * b.X.row(j).transpose();
        s2d.noalias() += wj * b.X.row(j).transpose() * b.X.row(j);
        out.value += eta[j] - shift;
        out.grad += b.X.row(j).transpose();
      }
      --j;
    }
    if (d > 0) {
      for (int l = 0; l < d; ++l) {
        const double f = (ties == Ties::efron) ? static_cast<double>(l) / d : 0.0;
        const double a0 = s0 - f * s0d;
        a1 = s1 - f * s1d;
        a2 = s2 - f * s2d;
        out.value -= std::log(a0);
        ratio = a1 / a0;
        out.grad -= ratio;
        rr.noalias() = ratio * ratio.transpose();
        htmp = a2 / a0;
        htmp -= rr;
        out.hess -= htmp;
      }
    }
    i = j;
  }
  return out;
}

struct BlockFit {
  Eigen::VectorXd beta;
  double value = -std::numeric_limits<double>::infinity();
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

// Newton with step halving; converged when the score max-norm < grad_tol.
inline BlockFit fit_block(const IntervalBlock& b, Ties ties,
                          Eigen::VectorXd beta0 = {}, int max_iter = 100,
                          double grad_tol = 1e-8) {
  const int q = static_cast<int>(b.X.cols());
  BlockFit fit;
  fit.beta = beta0.size() == q ? beta0 : Eigen::VectorXd::Zero(q);
  PLValue p = interval_pl(b, fit.beta, ties);
  if (!std::isfinite(p.value)) {
    fit.beta.setZero();
    p = interval_pl(b, fit.beta, ties);
    if (!std::isfinite(p.value)) return fit;
  }
  for (int it = 0; it < max_iter; ++it) {
    fit.value = p.value;
    fit.grad_norm = q ? p.grad.cwiseAbs().maxCoeff() : 0.0;
    fit.iterations = it;
    if (fit.grad_norm < grad_tol) {
      fit.converged = true;
      return fit;
    }
    Eigen::MatrixXd nh = -p.hess;
    Eigen::VectorXd step;
    double ridge = 0;
    for (int attempt = 0;; ++attempt) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(nh + ridge * Eigen::MatrixXd::Identity(q, q));
      step = ldlt.solve(p.grad);
      if (ldlt.info() == Eigen::Success && step.allFinite() &&
          p.grad.dot(step) > 0)
        break;
      if (attempt >= 3) return fit;
      ridge = (ridge == 0) ? 1e-8 * (1.0 + nh.diagonal().cwiseAbs().maxCoeff())
                           : ridge * 100;
    }
    bool accepted = false;
    for (int h = 0; h < 60; ++h) {
      const Eigen::VectorXd cand = fit.beta + step;
      const PLValue pc = interval_pl(b, cand, ties);
      if (std::isfinite(pc.value) &&
          pc.value >= p.value - 1e-12 * (1.0 + std::abs(p.value))) {
        fit.beta = cand;
        p = pc;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return fit;
  }
  fit.value = p.value;
  fit.grad_norm = q ? p.grad.cwiseAbs().maxCoeff() : 0.0;
  fit.iterations = max_iter;
  fit.converged = fit.grad_norm < grad_tol;
  return fit;
}

// Sum of per-interval partial log-likelihoods; errors on an interval with
// episodes but no events (its coefficients are inestimable).
inline double partial_loglik(const Dataset& ds,
                             const std::vector<EpisodeRow>& episodes,
                             const std::vector<Eigen::VectorXd>& beta,
                             Ties ties = Ties::efron) {
  int n_int = 0;
  for (const EpisodeRow& e : episodes) n_int = std::max(n_int, e.interval + 1);
  if (static_cast<int>(beta.size()) < n_int) throw error("beta/interval count mismatch");
  const std::vector<IntervalBlock> blocks = build_blocks(ds, episodes, n_int);
  double total = 0;
  for (const IntervalBlock& b : blocks) {
    if (b.rows() == 0) continue;
    if (b.events() == 0)
      throw error("interval " + std::to_string(b.interval + 1) + " has no events");
    total += interval_pl(b, beta[b.interval], ties).value;
  }
  return total;
}

struct CoxFit {
  std::vector<Eigen::VectorXd> beta;
  double loglik = 0;
  std::vector<double> loglik_by_interval;
  double grad_norm = 0;
  int iterations = 0;
  bool converged = false;
};

// Independent per-interval maximization.
inline CoxFit fit_interval_coefficients(const Dataset& ds,
                                        const std::vector<EpisodeRow>& episodes,
                                        Ties ties = Ties::efron) {
  int n_int = 0;
  for (const EpisodeRow& e : episodes) n_int = std::max(n_int, e.interval + 1);
  const std::vector<IntervalBlock> blocks = build_blocks(ds, episodes, n_int);
  CoxFit fit;
  fit.converged = true;
  for (const IntervalBlock& b : blocks) {
    if (b.rows() == 0 || b.events() == 0)
      throw error("interval " + std::to_string(b.interval + 1) + " has no events");
    const BlockFit bf = fit_block(b, ties);
    fit.beta.push_back(bf.beta);
    fit.loglik += bf.value;
    fit.loglik_by_interval.push_back(bf.value);
    fit.grad_norm = std::max(fit.grad_norm, bf.grad_norm);
    fit.iterations = std::max(fit.iterations, bf.iterations);
    fit.converged = fit.converged && bf.converged;
  }
  return fit;
}

// Right-continuous step function, non-decreasing from Lambda(0) = 0.
struct CumulativeHazard {
  std::vector<double> times, jumps;

  double eval(double t) const {
    double s = 0;
    for (size_t i = 0; i < times.size() && times[i] <= t; ++i) s += jumps[i];
    return s;
  }
  double increment(double a, double b) const {
    auto lo = std::upper_bound(times.begin(), times.end(), a);
    auto hi = std::upper_bound(times.begin(), times.end(), b);
    double s = 0;
    for (auto it = lo; it != hi; ++it) s += jumps[it - times.begin()];
    return s;
  }
};

// Baseline cumulative hazard pooled across clusters, offsets in denominators:
// a jump d(t) / sum_{at risk} exp(offset + beta' x) at each event time.
inline CumulativeHazard breslow_hazard(const std::vector<IntervalBlock>& blocks,
                                       const std::vector<Eigen::VectorXd>& beta) {
  std::vector<std::pair<double, double>> jumps;
  for (const IntervalBlock& b : blocks) {
    const int r = b.rows();
    if (r == 0) continue;
    Eigen::VectorXd eta = b.offset + b.X * beta[b.interval];
    const double shift = eta.maxCoeff();
    Eigen::VectorXd w = (eta.array() - shift).exp();
    double s0 = 0;
    int i = r - 1;
    while (i >= 0) {
      const double u = b.exit[i];
      int j = i, d = 0;
      while (j >= 0 && b.exit[j] == u) {
        s0 += w[j];
        d += b.status[j];
        --j;
      }
      if (d > 0) jumps.push_back({u, d / (s0 * std::exp(shift))});
      i = j;
    }
  }
  std::sort(jumps.begin(), jumps.end());
  CumulativeHazard h;
  for (auto& [t, j] : jumps) {
    h.times.push_back(t);
    h.jumps.push_back(j);
  }
  return h;
}

inline CumulativeHazard breslow_hazard(const Dataset& ds,
                                       const std::vector<EpisodeRow>& episodes,
                                       const std::vector<Eigen::VectorXd>& beta) {
  int n_int = 0;
  for (const EpisodeRow& e : episodes) n_int = std::max(n_int, e.interval + 1);
  return breslow_hazard(build_blocks(ds, episodes, n_int), beta);
}

// Per-episode expected event count under the fitted interval model. With
// Efron ties a subject in the tied set at its own event time accrues
// w * sum_l (1 - l/d) / A_l, everyone else at risk w * sum_l 1 / A_l,
// A_l = S0 - (l/d) * S0_tied; with Breslow ties this reduces to
// w * (hazard increment over the episode), matching breslow_hazard.
inline Eigen::VectorXd expected_counts(const IntervalBlock& b,
                                       const Eigen::VectorXd& beta, Ties ties) {
  const int r = b.rows();
  Eigen::VectorXd E = Eigen::VectorXd::Zero(r);
  if (r == 0) return E;
  Eigen::VectorXd eta = b.offset + b.X * beta;
  const double shift = eta.maxCoeff();
  Eigen::VectorXd w = (eta.array() - shift).exp();

  // Backward sweep: per distinct event time, the at-risk rate g and the
  // tied-set discount hh, both in the recentered scale.
  struct Group { double u, g, hh; int lo, hi; };
  std::vector<Group> groups;
  double s0 = 0;
  int i = r - 1;
  while (i >= 0) {
    const double u = b.exit[i];
    int j = i, d = 0;
    double s0d = 0;
    while (j >= 0 && b.exit[j] == u) {
      s0 += w[j];
      if (b.status[j]) {
        ++d;
        s0d += w[j];
      }
      --j;
    }
    if (d > 0) {
      double g = 0, hh = 0;
      for (int l = 0; l < d; ++l) {
        const double f = (ties == Ties::efron) ? static_cast<double>(l) / d : 0.0;
        const double a0 = s0 - f * s0d;
        g += 1.0 / a0;
        hh += f / a0;
      }
      groups.push_back({u, g, hh, j + 1, i});
    }
    i = j;
  }
  std::reverse(groups.begin(), groups.end());

  // Forward sweep: prefix of g over event times <= each row's exit, minus the
  // tied-set discount at the row's own event time.
  double G = 0;
  size_t gi = 0;
  for (int k = 0; k < r; ++k) {
    while (gi < groups.size() && groups[gi].u <= b.exit[k]) {
      G += groups[gi].g;
      ++gi;
    }
    E[k] = w[k] * G;
    if (b.status[k]) {
      // Row k's group is the last one consumed (its exit is an event time).
      const Group& grp = groups[gi - 1];
      E[k] -= w[k] * grp.hh;
    }
  }
  return E;
}

}  // namespace survcp
