#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "survcp/coxph.hpp"
#include "survcp/data.hpp"
#include "survcp/frailty.hpp"

namespace survcp {

struct no_candidates : error {
  using error::error;
};

struct SearchOptions {
  int n_changepoints = 1;
  int min_events = 1;  // per interval of the candidate partition
  bool frailty = false;
  FrailtyOptions em;  // ties and EM controls; em.ties also drives no-frailty fits
  int threads = 1;
};

// Candidate change points are the distinct uncensored event times strictly
// before follow-up; a K-subset is feasible when every interval it cuts holds
// at least min_events events, counting boundary events toward both sides.
inline std::vector<std::vector<double>> candidate_grid(const Dataset& ds, int k,
                                                       int min_events = 1) {
  if (k < 0) throw error("negative change-point count");
  std::vector<double> times;
  for (int i = 0; i < ds.n(); ++i)
    if (ds.event[i] && ds.time[i] < ds.followup) times.push_back(ds.time[i]);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  if (times.empty() && ds.n_events() == 0) throw no_candidates("no event times");

  auto feasible = [&](const std::vector<double>& labels) {
    for (int seg = 0; seg <= static_cast<int>(labels.size()); ++seg) {
      const double lo = seg ? labels[seg - 1] : 0.0;
      const double hi =
          seg < static_cast<int>(labels.size()) ? labels[seg] : ds.followup;
      int count = 0;
      for (int i = 0; i < ds.n(); ++i)
        if (ds.event[i] && ds.time[i] >= lo && ds.time[i] <= hi) ++count;
      if (count < min_events) return false;
    }
    return true;
  };

  std::vector<std::vector<double>> grid;
  if (k == 0) {
    if (feasible({})) grid.push_back({});
  } else if (static_cast<int>(times.size()) >= k) {
    std::vector<int> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = i;
    while (true) {
      std::vector<double> labels(k);
      for (int i = 0; i < k; ++i) labels[i] = times[idx[i]];
      if (feasible(labels)) grid.push_back(std::move(labels));
      int pos = k - 1;
      while (pos >= 0 &&
             idx[pos] == static_cast<int>(times.size()) - k + pos)
        --pos;
      if (pos < 0) break;
      ++idx[pos];
      for (int i = pos + 1; i < k; ++i) idx[i] = idx[i - 1] + 1;
    }
  }
  if (grid.empty()) throw no_candidates("no feasible change-point candidates");
  return grid;
}

// The fitted split runs at the last observed time before each candidate label,
// so the label's own events open the next interval; reported change points
// stay on the event-time grid. Returns nothing when a label has no
// predecessor (the candidate cannot carve a non-empty first interval).
inline std::optional<IntervalPartition> label_partition(
    const Dataset& ds, const std::vector<double>& labels) {
  std::vector<double> obs(ds.time.data(), ds.time.data() + ds.n());
  std::sort(obs.begin(), obs.end());
  IntervalPartition p;
  p.followup = ds.followup;
  for (double e : labels) {
    auto it = std::lower_bound(obs.begin(), obs.end(), e);
    if (it == obs.begin()) return std::nullopt;
    const double pred = *std::prev(it);
    if (!p.taus.empty() && pred <= p.taus.back()) return std::nullopt;
    p.taus.push_back(pred);
  }
  return p;
}

struct TraceRow {
  std::vector<double> labels;
  double criterion = -std::numeric_limits<double>::infinity();
  bool converged = false;
};

struct SearchResult {
  std::vector<double> tau;  // chosen change points (event-time labels)
  IntervalPartition partition;
  double criterion = -std::numeric_limits<double>::infinity();
  bool converged = false;  // true when some candidate converged
  std::optional<CoxFit> cox;
  std::optional<FrailtyFit> frailty;
  std::vector<TraceRow> trace;
};

namespace detail {

struct CandidateFit {
  TraceRow row;
  std::optional<IntervalPartition> partition;
  std::optional<CoxFit> cox;
  std::optional<FrailtyFit> frailty;
};

inline CandidateFit fit_candidate(const Dataset& ds,
                                  const std::vector<double>& labels,
                                  const SearchOptions& o) {
  CandidateFit c;
  c.row.labels = labels;
  c.partition = label_partition(ds, labels);
  if (!c.partition) return c;
  try {
    if (o.frailty) {
      FrailtyFit f = em_fit(ds, *c.partition, o.em);
      c.row.criterion = f.partial_loglik;
      c.row.converged = f.converged;
      c.frailty = std::move(f);
    } else {
      CoxFit f = fit_interval_coefficients(ds, split_episodes(ds, *c.partition),
                                           o.em.ties);
      c.row.criterion = f.loglik;
      c.row.converged = f.converged;
      c.cox = std::move(f);
    }
  } catch (const error&) {
    c.row.criterion = -std::numeric_limits<double>::infinity();
    c.row.converged = false;
  }
  return c;
}

}  // namespace detail

// Exhaustive grid search; the best converged candidate wins, ties broken by
// the smallest change points. The candidate list and per-candidate fits are
// deterministic, and parallel runs write into per-candidate slots, so results
// do not depend on the thread count.
inline SearchResult search(const Dataset& ds, const SearchOptions& o = {}) {
  const auto grid = candidate_grid(ds, o.n_changepoints, o.min_events);
  std::vector<detail::CandidateFit> fits(grid.size());

  const int threads =
      std::max(1, std::min<int>(o.threads, static_cast<int>(grid.size())));
  if (threads == 1) {
    for (size_t i = 0; i < grid.size(); ++i)
      fits[i] = detail::fit_candidate(ds, grid[i], o);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1))
        fits[i] = detail::fit_candidate(ds, grid[i], o);
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  SearchResult res;
  double cmax = -std::numeric_limits<double>::infinity();
  for (const auto& c : fits) {
    res.trace.push_back(c.row);
    if (c.row.converged) cmax = std::max(cmax, c.row.criterion);
  }
  if (!std::isfinite(cmax)) return res;  // nothing converged

  const double cutoff = cmax - 1e-9 * (1.0 + std::abs(cmax));
  for (auto& c : fits) {
    if (!c.row.converged || c.row.criterion < cutoff) continue;
    res.tau = c.row.labels;
    res.partition = *c.partition;
    res.criterion = c.row.criterion;
    res.converged = true;
    res.cox = std::move(c.cox);
    res.frailty = std::move(c.frailty);
    break;
  }
  return res;
}

}  // namespace survcp
