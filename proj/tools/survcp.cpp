#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "survcp/survcp.hpp"

using json = nlohmann::ordered_json;

namespace {

struct DataFlags {
  std::string input;
  std::string id_col = "id", time_col = "time", event_col = "event",
              cluster_col = "cluster";
  std::string censor_col;
  std::vector<std::string> covariates;
  double followup = 0;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("-i,--input", f.input, "input CSV file")->required();
  cmd->add_option("--id-column", f.id_col, "subject id column (default: id)");
  cmd->add_option("--time-column", f.time_col,
                  "observed time column (default: time)");
  cmd->add_option("--event-column", f.event_col,
                  "event indicator column, truthy = event (default: event)");
  cmd->add_option("--censor-column", f.censor_col,
                  "censoring indicator column, truthy = censored; overrides "
                  "--event-column");
  cmd->add_option("--cluster-column", f.cluster_col,
                  "cluster label column (default: cluster)");
  cmd->add_option("--covariates", f.covariates,
                  "covariate columns, comma separated (default: every "
                  "remaining column)")
      ->delimiter(',');
  cmd->add_option("--followup", f.followup,
                  "administrative follow-up end (default: max observed time)");
}

survcp::CsvSchema make_schema(const DataFlags& f) {
  survcp::CsvSchema s;
  s.id = f.id_col;
  s.time = f.time_col;
  s.cluster = f.cluster_col;
  s.covariates = f.covariates;
  if (!f.censor_col.empty()) {
    s.event = f.censor_col;
    s.event_is_censor = true;
  } else {
    s.event = f.event_col;
  }
  return s;
}

json columns_config(const survcp::CsvSchema& s) {
  json j;
  j["id"] = s.id;
  j["time"] = s.time;
  j["event"] = s.event;
  j["event_is_censor"] = s.event_is_censor;
  j["cluster"] = s.cluster;
  j["covariates"] = s.covariates.empty()
                        ? json("auto")
                        : json(s.covariates);
  return j;
}

int write_output(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::fwrite(content.data(), 1, content.size(), stdout);
    return 0;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    std::cerr << "error: cannot open output file: " << path << "\n";
    return 2;
  }
  out << content;
  return out.good() ? 0 : 2;
}

json beta_json(const survcp::Dataset& ds, const Eigen::VectorXd& beta) {
  json j = json::object();
  for (int c = 0; c < ds.n_covariates(); ++c)
    j[ds.covariate_names[c]] = beta[c];
  return j;
}

// --- fit ---------------------------------------------------------------

struct FitFlags {
  DataFlags data;
  int k = 1;
  bool frailty = false;
  int min_events = 1;
  std::string ties = "efron";
  bool breslow_exposure = false;
  std::optional<double> pin_theta;
  int threads = 1;
  std::string out;
};

int cmd_fit(const FitFlags& f) {
  const survcp::CsvSchema schema = make_schema(f.data);
  const survcp::Dataset ds =
      survcp::load_csv(f.data.input, schema, f.data.followup);
  for (const std::string& finding : survcp::validate(ds, f.frailty))
    if (finding == "frailty requires at least 2 clusters")
      throw survcp::error(finding);

  survcp::SearchOptions o;
  o.n_changepoints = f.k;
  o.min_events = f.min_events;
  o.frailty = f.frailty;
  o.threads = f.threads;
  o.em.ties = f.ties == "breslow" ? survcp::Ties::breslow : survcp::Ties::efron;
  o.em.breslow_exposure = f.breslow_exposure;
  o.em.pin_theta = f.pin_theta;

  const survcp::SearchResult r = survcp::search(ds, o);

  json rep;
  {
    json cfg;
    cfg["subcommand"] = "fit";
    cfg["input"] = f.data.input;
    cfg["columns"] = columns_config(schema);
    cfg["followup"] = ds.followup;
    cfg["k"] = f.k;
    cfg["frailty"] = f.frailty;
    cfg["min_events"] = f.min_events;
    cfg["ties"] = f.ties;
    cfg["breslow_exposure"] = f.breslow_exposure;
    cfg["pin_theta"] = f.pin_theta ? json(*f.pin_theta) : json(nullptr);
    cfg["format"] = "json";
    rep["config"] = cfg;
  }
  {
    json d;
    d["n"] = ds.n();
    d["n_events"] = ds.n_events();
    d["n_clusters"] = ds.n_clusters();
    d["covariates"] = ds.covariate_names;
    rep["data"] = d;
  }
  rep["converged"] = r.converged;
  rep["tau"] = r.tau;
  rep["split_at"] = r.partition.taus;
  rep["criterion"] = r.criterion;

  json intervals = json::array();
  json loglik;
  int iterations = 0;
  json warnings = json::array();
  if (r.converged && !f.frailty) {
    const survcp::CoxFit& c = *r.cox;
    for (size_t k = 0; k < c.beta.size(); ++k) {
      json iv;
      iv["interval"] = k + 1;
      iv["beta"] = beta_json(ds, c.beta[k]);
      iv["loglik"] = c.loglik_by_interval[k];
      intervals.push_back(iv);
    }
    loglik["criterion"] = c.loglik;
    loglik["by_interval"] = c.loglik_by_interval;
    iterations = c.iterations;
  } else if (r.converged && f.frailty) {
    const survcp::FrailtyFit& fr = *r.frailty;
    for (size_t k = 0; k < fr.beta.size(); ++k) {
      json iv;
      iv["interval"] = k + 1;
      iv["beta"] = beta_json(ds, fr.beta[k]);
      iv["theta"] = fr.theta[k];
      json vh = json::object();
      for (int m = 0; m < ds.n_clusters(); ++m)
        vh[ds.cluster_labels[m]] = fr.vhat(static_cast<int>(k), m);
      iv["vhat"] = vh;
      iv["partial_loglik"] = fr.pl_by_interval[k];
      iv["marginal_loglik"] = fr.marginal_by_interval[k];
      intervals.push_back(iv);
    }
    loglik["criterion"] = fr.partial_loglik;
    loglik["marginal"] = fr.loglik;
    loglik["pl_by_interval"] = fr.pl_by_interval;
    loglik["marginal_by_interval"] = fr.marginal_by_interval;
    iterations = fr.iterations;
    for (const std::string& w : fr.warnings) warnings.push_back(w);
  }
  rep["intervals"] = intervals;
  rep["loglik"] = loglik;
  rep["iterations"] = iterations;
  rep["warnings"] = warnings;

  json trace = json::array();
  for (const survcp::TraceRow& row : r.trace) {
    json t;
    t["tau"] = row.labels;
    t["criterion"] = row.criterion;  // non-finite dumps as null
    t["converged"] = row.converged;
    trace.push_back(t);
  }
  rep["trace"] = trace;

  const int rc = write_output(f.out, rep.dump(2) + "\n");
  if (rc != 0) return rc;
  if (!r.converged) {
    std::cerr << "error: no candidate change point converged\n";
    return 4;
  }
  return 0;
}

// --- km ----------------------------------------------------------------

struct KmFlags {
  DataFlags data;
  std::string by;  // empty = pooled, "cluster", or a covariate name
  std::vector<std::string> annotate;
  std::string format = "csv";
  std::string out;
};

int cmd_km(const KmFlags& f) {
  const survcp::CsvSchema schema = make_schema(f.data);
  const survcp::Dataset ds =
      survcp::load_csv(f.data.input, schema, f.data.followup);

  std::vector<survcp::SurvivalCurve> curves;
  if (f.by.empty()) {
    curves = survcp::kaplan_meier_all(ds);
  } else {
    int cov = -1;
    for (int c = 0; c < ds.n_covariates(); ++c)
      if (ds.covariate_names[c] == f.by) cov = c;
    if (cov >= 0)
      curves = survcp::kaplan_meier_by_covariate(ds, cov);
    else if (f.by == "cluster")
      curves = survcp::kaplan_meier_by_cluster(ds);
    else
      throw survcp::error("unknown grouping: " + f.by);
  }

  for (const std::string& path : f.annotate) {
    std::ifstream in(path);
    if (!in) throw survcp::error("cannot read annotation file: " + path);
    json rep;
    try {
      in >> rep;
    } catch (const json::exception&) {
      throw survcp::error("bad annotation file: " + path);
    }
    if (!rep.contains("tau") || !rep.contains("config"))
      throw survcp::error("bad annotation file: " + path);
    const bool frail = rep["config"].value("frailty", false);
    const std::string label = frail ? "changepoint_frailty" : "changepoint";
    for (const auto& t : rep["tau"])
      for (survcp::SurvivalCurve& c : curves)
        c.annotations.emplace_back(t.get<double>(), label);
  }

  json cfg;
  cfg["subcommand"] = "km";
  cfg["input"] = f.data.input;
  cfg["columns"] = columns_config(schema);
  cfg["followup"] = ds.followup;
  cfg["by"] = f.by.empty() ? json(nullptr) : json(f.by);
  cfg["annotate"] = f.annotate;
  cfg["format"] = f.format;

  std::string payload;
  if (f.format == "csv") {
    payload = "# survcp km\n# config: " + cfg.dump() + "\n" +
              survcp::export_curves_csv(curves);
  } else {
    json out;
    out["config"] = cfg;
    json jcurves = json::array();
    for (const survcp::SurvivalCurve& c : curves) {
      json jc;
      jc["group"] = c.group;
      json pts = json::array();
      for (size_t i = 0; i < c.times.size(); ++i) {
        json p;
        p["time"] = c.times[i];
        p["survival"] = c.survival[i];
        p["censor_mark"] =
            std::find(c.censor_marks.begin(), c.censor_marks.end(),
                      c.times[i]) != c.censor_marks.end();
        pts.push_back(p);
      }
      jc["points"] = pts;
      json ann = json::array();
      for (const auto& [t, label] : c.annotations) {
        json a;
        a["time"] = t;
        a["label"] = label;
        ann.push_back(a);
      }
      jc["annotations"] = ann;
      jcurves.push_back(jc);
    }
    out["curves"] = jcurves;
    payload = out.dump(2) + "\n";
  }
  return write_output(f.out, payload);
}

// --- simulate ----------------------------------------------------------

struct SimFlags {
  std::string scenario = "custom";
  survcp::ScenarioConfig sc;
  int reps = 500;
  uint64_t seed = 1;
  int threads = 1;
  int min_events = survcp::StudyConfig{}.min_events;
  std::string out;
};

int cmd_simulate(SimFlags f, const CLI::App* cmd) {
  if (f.scenario != "custom") {
    const survcp::ScenarioConfig preset =
        survcp::scenario_config(std::stoi(f.scenario));
    // Explicit flags override the preset; start from it otherwise.
    survcp::ScenarioConfig merged = preset;
    if (cmd->count("--n")) merged.n = f.sc.n;
    if (cmd->count("--clusters")) merged.n_clusters = f.sc.n_clusters;
    if (cmd->count("--tau-true")) merged.tau_true = f.sc.tau_true;
    if (cmd->count("--sim-followup")) merged.followup = f.sc.followup;
    if (cmd->count("--beta1")) merged.beta1 = f.sc.beta1;
    if (cmd->count("--beta2")) merged.beta2 = f.sc.beta2;
    if (cmd->count("--baseline-rate")) merged.baseline_rate = f.sc.baseline_rate;
    if (cmd->count("--theta")) merged.theta = f.sc.theta;
    if (cmd->count("--censor-prob")) merged.censor_prob = f.sc.censor_prob;
    f.sc = merged;
  }
  const survcp::ScenarioConfig& s = f.sc;
  if (s.n < 1 || s.n_clusters < 2 || s.tau_true <= 0 ||
      s.followup <= s.tau_true || s.baseline_rate <= 0 || s.theta < 0 ||
      s.censor_prob < 0 || s.censor_prob >= 1 || f.reps < 1 ||
      f.min_events < 1)
    throw survcp::error("invalid simulation configuration");

  survcp::StudyConfig sc;
  sc.scenario = s;
  sc.reps = f.reps;
  sc.seed = f.seed;
  sc.threads = f.threads;
  sc.min_events = f.min_events;
  const survcp::StudyResult res = survcp::run_study(sc);

  json cfg;
  cfg["subcommand"] = "simulate";
  cfg["scenario"] = f.scenario;
  cfg["n"] = s.n;
  cfg["clusters"] = s.n_clusters;
  cfg["tau_true"] = s.tau_true;
  cfg["followup"] = s.followup;
  cfg["beta1"] = s.beta1;
  cfg["beta2"] = s.beta2;
  cfg["baseline_rate"] = s.baseline_rate;
  cfg["theta"] = s.theta;
  cfg["censor_prob"] = s.censor_prob;
  cfg["reps"] = f.reps;
  cfg["seed"] = f.seed;
  cfg["min_events"] = f.min_events;
  cfg["format"] = "csv";

  const std::string payload =
      "# survcp simulate\n# config: " + cfg.dump() + "\n" +
      survcp::bias_mse_csv(res);
  return write_output(f.out, payload);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hazard change-point models with clustered gamma frailty"};
  app.require_subcommand(1);

  FitFlags fit;
  CLI::App* cfit = app.add_subcommand(
      "fit", "fit a change-point hazard model, searching the change points");
  add_data_flags(cfit, fit.data);
  cfit->add_option("-k,--changepoints", fit.k, "number of change points")
      ->default_val(1);
  cfit->add_flag("--frailty", fit.frailty, "clustered gamma frailty model");
  cfit->add_option("--min-events", fit.min_events,
                   "minimum events per interval for a candidate")
      ->default_val(1);
  cfit->add_option("--ties", fit.ties, "tie handling")
      ->check(CLI::IsMember({"efron", "breslow"}))
      ->default_val("efron");
  cfit->add_flag("--breslow-exposure", fit.breslow_exposure,
                 "use plain hazard-increment exposures in the E-step");
  double pin_theta_val = 0;
  CLI::Option* pin_opt =
      cfit->add_option("--pin-theta", pin_theta_val,
                       "hold every frailty variance fixed at this value");
  cfit->add_option("--threads", fit.threads, "worker threads")->default_val(1);
  cfit->add_option("-o,--out", fit.out, "output path (default: stdout)");

  KmFlags km;
  CLI::App* ckm = app.add_subcommand(
      "km", "export product-limit survival curves");
  add_data_flags(ckm, km.data);
  ckm->add_option("--by", km.by,
                  "group curves by a covariate column or by 'cluster' "
                  "(default: pooled)");
  ckm->add_option("--annotate", km.annotate,
                  "fit report JSON whose change points annotate the curves "
                  "(repeatable)");
  ckm->add_option("--format", km.format, "output format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->default_val("csv");
  ckm->add_option("-o,--out", km.out, "output path (default: stdout)");

  SimFlags sim;
  CLI::App* csim = app.add_subcommand(
      "simulate", "Monte Carlo bias/MSE study of the change-point estimators");
  csim->add_option("--scenario", sim.scenario,
                   "preset scenario 1|2|3 (frailty variance 0, 0.1, 0.2) or "
                   "'custom'")
      ->check(CLI::IsMember({"1", "2", "3", "custom"}))
      ->default_val("custom");
  csim->add_option("--n", sim.sc.n, "subjects per replication");
  csim->add_option("--clusters", sim.sc.n_clusters, "number of clusters");
  csim->add_option("--tau-true", sim.sc.tau_true, "true change point");
  csim->add_option("--sim-followup", sim.sc.followup, "follow-up end");
  csim->add_option("--beta1", sim.sc.beta1, "covariate effect before the change point");
  csim->add_option("--beta2", sim.sc.beta2, "covariate effect after the change point");
  csim->add_option("--baseline-rate", sim.sc.baseline_rate, "baseline hazard rate");
  csim->add_option("--theta", sim.sc.theta, "frailty variance");
  csim->add_option("--censor-prob", sim.sc.censor_prob, "censoring probability");
  csim->add_option("--reps", sim.reps, "replications")->default_val(500);
  csim->add_option("--seed", sim.seed, "random seed")->default_val(1);
  csim->add_option("--min-events", sim.min_events,
                   "minimum events per interval for search candidates")
      ->default_val(survcp::StudyConfig{}.min_events);
  csim->add_option("--threads", sim.threads, "worker threads")->default_val(1);
  csim->add_option("-o,--out", sim.out, "output path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cfit->parsed()) {
      if (pin_opt->count()) fit.pin_theta = pin_theta_val;
      return cmd_fit(fit);
    }
    if (ckm->parsed()) return cmd_km(km);
    if (csim->parsed()) return cmd_simulate(sim, csim);
  } catch (const survcp::no_candidates& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const survcp::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
