#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace survcp {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One observation as ingested: raw cluster label, event indicator already in
// "event occurred" polarity.
struct Subject {
  std::string id;
  double time = 0;
  bool event = false;
  std::string cluster;
  Eigen::VectorXd x;
};

// Column-oriented, immutable after construction. Cluster labels are mapped to
// dense 0-based indices in first-appearance order.
struct Dataset {
  std::vector<std::string> ids;
  Eigen::VectorXd time;
  std::vector<uint8_t> event;
  std::vector<int> cluster;
  Eigen::MatrixXd X;  // n x q
  std::vector<std::string> cluster_labels;
  std::vector<std::string> covariate_names;
  double followup = 0;

  int n() const { return static_cast<int>(ids.size()); }
  int n_clusters() const { return static_cast<int>(cluster_labels.size()); }
  int n_covariates() const { return static_cast<int>(X.cols()); }
  int n_events() const {
    int c = 0;
    for (uint8_t e : event) c += e != 0;
    return c;
  }
};

namespace detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, out);
  return r.ec == std::errc{} && r.ptr == e;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// followup <= 0 means "use the largest observed time".
inline Dataset make_dataset(const std::vector<Subject>& rows,
                            std::vector<std::string> covariate_names,
                            double followup = 0) {
  if (rows.empty()) throw error("empty dataset");
  const int n = static_cast<int>(rows.size());
  const int q = static_cast<int>(covariate_names.size());
  Dataset ds;
  ds.ids.reserve(n);
  ds.time.resize(n);
  ds.event.resize(n);
  ds.cluster.resize(n);
  ds.X.resize(n, q);
  ds.covariate_names = std::move(covariate_names);
  std::unordered_map<std::string, int> cl;
  for (int i = 0; i < n; ++i) {
    const Subject& s = rows[i];
    if (!(s.time > 0) || !std::isfinite(s.time))
      throw error("row " + std::to_string(i + 1) + ": non-positive time");
    if (s.x.size() != q)
      throw error("row " + std::to_string(i + 1) + ": covariate length mismatch");
    ds.ids.push_back(s.id);
    ds.time[i] = s.time;
    ds.event[i] = s.event ? 1 : 0;
    auto it = cl.find(s.cluster);
    if (it == cl.end()) {
      it = cl.emplace(s.cluster, static_cast<int>(ds.cluster_labels.size())).first;
      ds.cluster_labels.push_back(s.cluster);
    }
    ds.cluster[i] = it->second;
    ds.X.row(i) = s.x;
  }
  ds.followup = followup > 0 ? followup : ds.time.maxCoeff();
  return ds;
}

struct CsvSchema {
  std::string id = "id";
  std::string time = "time";
  std::string event = "event";
  std::string cluster = "cluster";
  std::vector<std::string> covariates;  // empty: every remaining column
  // When true (or when the event column is literally named "censor",
  // any case), a truthy cell means censored and the indicator is inverted.
  bool event_is_censor = false;
};

inline Dataset load_csv(std::istream& in, const CsvSchema& schema = {},
                        double followup = 0) {
  std::string line;
  if (!std::getline(in, line)) throw error("empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_csv_line(line);

  auto find_col = [&](const std::string& name) {
    for (size_t j = 0; j < header.size(); ++j)
      if (detail::lower(header[j]) == detail::lower(name)) return static_cast<int>(j);
    throw error("missing column: " + name);
  };
  const int c_id = find_col(schema.id);
  const int c_time = find_col(schema.time);
  const int c_event = find_col(schema.event);
  const int c_cluster = find_col(schema.cluster);
  const bool invert =
      schema.event_is_censor || detail::lower(schema.event) == "censor";

  std::vector<int> c_cov;
  std::vector<std::string> cov_names;
  if (schema.covariates.empty()) {
    for (size_t j = 0; j < header.size(); ++j) {
      const int ji = static_cast<int>(j);
      if (ji != c_id && ji != c_time && ji != c_event && ji != c_cluster) {
        c_cov.push_back(ji);
        cov_names.push_back(header[j]);
      }
    }
  } else {
    for (const std::string& name : schema.covariates) {
      c_cov.push_back(find_col(name));
      cov_names.push_back(name);
    }
  }

  std::vector<Subject> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    auto cell = [&](int j) -> const std::string& {
      if (j >= static_cast<int>(f.size()))
        throw error("row " + std::to_string(lineno) + ": missing cell");
      return f[j];
    };
    Subject s;
    s.id = cell(c_id);
    if (!detail::parse_double(cell(c_time), s.time))
      throw error("row " + std::to_string(lineno) + ": bad time '" + cell(c_time) + "'");
    if (!(s.time > 0) || !std::isfinite(s.time))
      throw error("row " + std::to_string(lineno) + ": non-positive time");
    const std::string ev = detail::lower(cell(c_event));
    bool flag;
    if (ev == "1" || ev == "yes" || ev == "true") flag = true;
    else if (ev == "0" || ev == "no" || ev == "false") flag = false;
    else throw error("row " + std::to_string(lineno) + ": bad event value '" + cell(c_event) + "'");
    s.event = invert ? !flag : flag;
    s.cluster = cell(c_cluster);
    s.x.resize(c_cov.size());
    for (size_t j = 0; j < c_cov.size(); ++j) {
      double v;
      if (cell(c_cov[j]).empty() || !detail::parse_double(cell(c_cov[j]), v))
        throw error("row " + std::to_string(lineno) + ": bad covariate '" +
                    cov_names[j] + "'");
      s.x[j] = v;
    }
    rows.push_back(std::move(s));
  }
  if (rows.empty()) throw error("no data rows");
  return make_dataset(rows, cov_names, followup);
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema = {},
                        double followup = 0) {
  std::ifstream in(path);
  if (!in) throw error("cannot open file: " + path);
  return load_csv(in, schema, followup);
}

// Serialization partner of load_csv: identical Dataset after a round trip
// (followup re-derives as the max time unless it was explicit).
inline void save_csv(const Dataset& ds, std::ostream& out) {
  out << "id,time,event,cluster";
  for (const std::string& c : ds.covariate_names) out << "," << c;
  out << "\n";
  auto guard = [](const std::string& s) {
    if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
      throw error("field contains separator: " + s);
    return s;
  };
  for (int i = 0; i < ds.n(); ++i) {
    out << guard(ds.ids[i]) << "," << detail::fmt_double(ds.time[i]) << ","
        << (ds.event[i] ? 1 : 0) << "," << guard(ds.cluster_labels[ds.cluster[i]]);
    for (int j = 0; j < ds.n_covariates(); ++j)
      out << "," << detail::fmt_double(ds.X(i, j));
    out << "\n";
  }
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw error("cannot open file: " + path);
  save_csv(ds, out);
}

// Findings are data, not failures; empty means all invariants hold.
inline std::vector<std::string> validate(const Dataset& ds,
                                         bool frailty_requested = false) {
  std::vector<std::string> findings;
  if (ds.n() == 0) findings.push_back("empty dataset");
  if (ds.n_events() == 0) findings.push_back("no events");
  if (frailty_requested && ds.n_clusters() < 2)
    findings.push_back("frailty requires at least 2 clusters");
  for (int i = 0; i < ds.n(); ++i) {
    if (!(ds.time[i] > 0) || !std::isfinite(ds.time[i])) {
      findings.push_back("row " + std::to_string(i + 1) + ": non-positive time");
      break;
    }
  }
  if (ds.n() > 0 && ds.time.maxCoeff() > ds.followup)
    findings.push_back("subject time exceeds follow-up");
  return findings;
}

}  // namespace survcp
