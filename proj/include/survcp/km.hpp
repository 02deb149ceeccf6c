#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "survcp/data.hpp"

namespace survcp {

// Product-limit curve for one group. `times` holds every distinct observed
// time ascending; `survival[i]` is S just after times[i]. Events are
// processed before censorings at tied times.
struct SurvivalCurve {
  std::string group;
  std::vector<double> times;
  std::vector<double> survival;
  std::vector<double> censor_marks;  // distinct times with >=1 censored obs
  std::vector<std::pair<double, std::string>> annotations;  // change points

  double eval(double t) const {
    double s = 1.0;
    for (size_t i = 0; i < times.size() && times[i] <= t; ++i) s = survival[i];
    return s;
  }
};

inline SurvivalCurve km_curve(std::vector<std::pair<double, bool>> obs,
                              std::string group) {
  if (obs.empty()) throw error("empty group: " + group);
  std::sort(obs.begin(), obs.end());
  SurvivalCurve c;
  c.group = std::move(group);
  const size_t n = obs.size();
  double s = 1.0;
  size_t i = 0;
  while (i < n) {
    const double t = obs[i].first;
    const size_t at_risk = n - i;
    int d = 0;
    bool censored = false;
    size_t j = i;
    while (j < n && obs[j].first == t) {
      if (obs[j].second) ++d; else censored = true;
      ++j;
    }
    if (d > 0) s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
    c.times.push_back(t);
    c.survival.push_back(s);
    if (censored) c.censor_marks.push_back(t);
    i = j;
  }
  return c;
}

// group_of[i] in 0..G-1 selects labels[group_of[i]]; every label must be used.
inline std::vector<SurvivalCurve> kaplan_meier(
    const Dataset& ds, const std::vector<int>& group_of,
    const std::vector<std::string>& labels) {
  if (static_cast<int>(group_of.size()) != ds.n())
    throw error("group assignment size mismatch");
  std::vector<std::vector<std::pair<double, bool>>> buckets(labels.size());
  for (int i = 0; i < ds.n(); ++i) {
    const int g = group_of[i];
    if (g < 0 || g >= static_cast<int>(labels.size()))
      throw error("group index out of range");
    buckets[g].push_back({ds.time[i], ds.event[i] != 0});
  }
  std::vector<SurvivalCurve> out;
  for (size_t g = 0; g < labels.size(); ++g)
    out.push_back(km_curve(std::move(buckets[g]), labels[g]));
  return out;
}

inline std::vector<SurvivalCurve> kaplan_meier_by_covariate(const Dataset& ds,
                                                            int j) {
  if (j < 0 || j >= ds.n_covariates()) throw error("covariate index out of range");
  std::map<double, int> values;
  for (int i = 0; i < ds.n(); ++i) values.emplace(ds.X(i, j), 0);
  std::vector<std::string> labels;
  for (auto& [v, idx] : values) {
    idx = static_cast<int>(labels.size());
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    labels.push_back(buf);
  }
  std::vector<int> group_of(ds.n());
  for (int i = 0; i < ds.n(); ++i) group_of[i] = values[ds.X(i, j)];
  return kaplan_meier(ds, group_of, labels);
}

inline std::vector<SurvivalCurve> kaplan_meier_by_cluster(const Dataset& ds) {
  return kaplan_meier(ds, ds.cluster, ds.cluster_labels);
}

inline std::vector<SurvivalCurve> kaplan_meier_all(const Dataset& ds) {
  return kaplan_meier(ds, std::vector<int>(ds.n(), 0), {"all"});
}

inline std::string export_curves_csv(const std::vector<SurvivalCurve>& curves) {
  std::ostringstream out;
  out << "group,time,survival,is_censor_mark\n";
  for (const SurvivalCurve& c : curves) {
    for (size_t i = 0; i < c.times.size(); ++i) {
      const bool mark = std::binary_search(c.censor_marks.begin(),
                                           c.censor_marks.end(), c.times[i]);
      out << c.group << "," << detail::fmt_double(c.times[i]) << ","
          << detail::fmt_double(c.survival[i]) << "," << (mark ? 1 : 0) << "\n";
    }
  }
  return out.str();
}

inline std::string export_curves_json(const std::vector<SurvivalCurve>& curves) {
  std::ostringstream out;
  auto esc = [](const std::string& s) {
    std::string r;
    for (char c : s) {
      if (c == '"' || c == '\\') r += '\\';
      r += c;
    }
    return r;
  };
  out << "{\"curves\":[";
  for (size_t k = 0; k < curves.size(); ++k) {
    const SurvivalCurve& c = curves[k];
    if (k) out << ",";
    out << "{\"group\":\"" << esc(c.group) << "\",\"points\":[";
    for (size_t i = 0; i < c.times.size(); ++i) {
      if (i) out << ",";
      const bool mark = std::binary_search(c.censor_marks.begin(),
                                           c.censor_marks.end(), c.times[i]);
      out << "{\"time\":" << detail::fmt_double(c.times[i])
          << ",\"survival\":" << detail::fmt_double(c.survival[i])
          << ",\"is_censor_mark\":" << (mark ? "true" : "false") << "}";
    }
    out << "],\"annotations\":[";
    for (size_t i = 0; i < c.annotations.size(); ++i) {
      if (i) out << ",";
      out << "{\"time\":" << detail::fmt_double(c.annotations[i].first)
          << ",\"label\":\"" << esc(c.annotations[i].second) << "\"}";
    }
    out << "]}";
  }
  out << "]}";
  return out.str();
}

inline std::string export_curves(const std::vector<SurvivalCurve>& curves,
                                 const std::string& format) {
  if (format == "csv") return export_curves_csv(curves);
  if (format == "json") return export_curves_json(curves);
  throw error("unknown format: " + format);
}

// Round-trip parser for the CSV emitted above ('#'-prefixed lines skipped).
inline std::vector<SurvivalCurve> import_curves_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<SurvivalCurve> curves;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != 4) throw error("bad curve row: " + line);
    if (curves.empty() || curves.back().group != f[0]) {
      curves.push_back({});
      curves.back().group = f[0];
    }
    SurvivalCurve& c = curves.back();
    double t, s;
    if (!detail::parse_double(f[1], t) || !detail::parse_double(f[2], s))
      throw error("bad curve row: " + line);
    c.times.push_back(t);
    c.survival.push_back(s);
    if (f[3] == "1") c.censor_marks.push_back(t);
  }
  return curves;
}

}  // namespace survcp
