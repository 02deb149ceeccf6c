#include <catch2/catch_amalgamated.hpp>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "survcp/data.hpp"
#include "survcp/km.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() /
                 ("survcp_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult run(const std::string& args) {
  const char* bin = std::getenv("SURVCP_BIN");
  REQUIRE(bin != nullptr);
  static int counter = 0;
  const fs::path out = scratch_dir() / ("out" + std::to_string(++counter));
  const fs::path err = scratch_dir() / ("err" + std::to_string(counter));
  const std::string cmd = std::string(bin) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string table1_args() {
  const char* dir = std::getenv("SURVCP_DATA");
  REQUIRE(dir != nullptr);
  return std::string("-i ") + dir +
         "/table1.csv --censor-column censor --cluster-column cluster "
         "--covariates treat";
}

double round2(double v) { return std::round(v * 100) / 100; }

}  // namespace

TEST_CASE("fit report on the two-arm study") {
  const RunResult r = run("fit " + table1_args());
  REQUIRE(r.code == 0);
  const json rep = json::parse(r.out);

  CHECK(rep["converged"] == true);
  REQUIRE(rep["tau"].size() == 1);
  CHECK(rep["tau"][0].get<double>() == 50.0);
  CHECK(rep["split_at"][0].get<double>() == 45.0);
  CHECK(rep["loglik"]["criterion"].get<double>() ==
        Catch::Approx(-44.6615).margin(1.5e-3));

  REQUIRE(rep["intervals"].size() == 2);
  CHECK(round2(rep["intervals"][0]["beta"]["treat"].get<double>()) == 0.07);
  CHECK(round2(rep["intervals"][1]["beta"]["treat"].get<double>()) == -0.76);

  // The effective configuration and data summary are echoed in full.
  CHECK(rep["config"]["k"] == 1);
  CHECK(rep["config"]["frailty"] == false);
  CHECK(rep["config"]["ties"] == "efron");
  CHECK(rep["config"]["pin_theta"].is_null());
  CHECK(rep["config"]["followup"].get<double>() == 100.0);
  CHECK(!rep["config"].contains("threads"));
  CHECK(rep["data"]["n"] == 30);
  CHECK(rep["data"]["n_events"] == 17);
  CHECK(rep["data"]["n_clusters"] == 3);

  // Candidate trace: one row per event-time label; the infeasible first
  // label serializes a null criterion.
  REQUIRE(rep["trace"].size() == 12);
  CHECK(rep["trace"][0]["criterion"].is_null());
  CHECK(rep["trace"][0]["converged"] == false);
  CHECK(rep["trace"][4]["tau"][0].get<double>() == 50.0);
}

TEST_CASE("frailty fit report on the two-arm study") {
  const RunResult r = run("fit --frailty " + table1_args());
  REQUIRE(r.code == 0);
  const json rep = json::parse(r.out);

  CHECK(rep["converged"] == true);
  CHECK(rep["tau"][0].get<double>() == 80.0);
  CHECK(rep["split_at"][0].get<double>() == 75.0);
  CHECK(rep["loglik"]["criterion"].get<double>() ==
        Catch::Approx(-40.4809).margin(1.5e-3));
  CHECK(rep["loglik"].contains("marginal"));

  REQUIRE(rep["intervals"].size() == 2);
  CHECK(rep["intervals"][0]["theta"].get<double>() <= 0.005);
  CHECK(rep["intervals"][1]["theta"].get<double>() ==
        Catch::Approx(1.7735).margin(2e-3));
  CHECK(rep["intervals"][0]["beta"]["treat"].get<double>() ==
        Catch::Approx(-0.3518).margin(1e-3));
  CHECK(rep["intervals"][1]["beta"]["treat"].get<double>() ==
        Catch::Approx(-1.5395).margin(1e-3));
  for (const char* m : {"1", "2", "3"})
    CHECK(rep["intervals"][1]["vhat"].contains(m));
}

TEST_CASE("identical invocations produce identical bytes") {
  const std::string cmd = "fit --frailty " + table1_args();
  const RunResult a = run(cmd);
  const RunResult b = run(cmd);
  const RunResult c = run(cmd + " --threads 4");
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out == c.out);

  const std::string sim =
      "simulate --n 30 --clusters 3 --tau-true 5 --sim-followup 12 "
      "--baseline-rate 0.3 --theta 0.1 --beta2 1 --reps 3 --seed 9 "
      "--min-events 4";
  const RunResult s1 = run(sim);
  const RunResult s3 = run(sim + " --threads 3");
  REQUIRE(s1.code == 0);
  CHECK(s1.out == s3.out);
  CHECK(s1.out.rfind("# survcp simulate", 0) == 0);
  CHECK(s1.out.find("# config:") != std::string::npos);
  CHECK(s1.out.find("model,parameter,truth,bias,mse,reps_used,failures") !=
        std::string::npos);
  CHECK(s1.out.find("changepoint_frailty,theta2") != std::string::npos);
}

TEST_CASE("survival curves by arm round-trip through the export") {
  const RunResult r = run("km --by treat --format csv " + table1_args());
  REQUIRE(r.code == 0);
  const auto curves = survcp::import_curves_csv(r.out);

  const char* dir = std::getenv("SURVCP_DATA");
  survcp::CsvSchema schema;
  schema.event = "censor";
  const survcp::Dataset ds =
      survcp::load_csv(std::string(dir) + "/table1.csv", schema);
  const auto want = survcp::kaplan_meier_by_covariate(ds, 0);

  REQUIRE(curves.size() == want.size());
  for (size_t k = 0; k < want.size(); ++k) {
    CHECK(curves[k].group == want[k].group);
    REQUIRE(curves[k].times.size() == want[k].times.size());
    for (size_t i = 0; i < want[k].times.size(); ++i) {
      CHECK(curves[k].times[i] == want[k].times[i]);
      CHECK(curves[k].survival[i] ==
            Catch::Approx(want[k].survival[i]).margin(1e-12));
    }
    CHECK(curves[k].censor_marks == want[k].censor_marks);
  }
}

TEST_CASE("fitted change points annotate the curves") {
  const fs::path fit_out = scratch_dir() / "frailty_fit.json";
  const RunResult f =
      run("fit --frailty " + table1_args() + " --out " + fit_out.string());
  REQUIRE(f.code == 0);

  const RunResult k = run("km --format json --annotate " + fit_out.string() +
                          " " + table1_args());
  REQUIRE(k.code == 0);
  const json rep = json::parse(k.out);
  REQUIRE(rep["curves"].size() == 1);  // pooled by default
  const json& ann = rep["curves"][0]["annotations"];
  REQUIRE(ann.size() == 1);
  CHECK(ann[0]["time"].get<double>() == 80.0);
  CHECK(ann[0]["label"] == "changepoint_frailty");
  CHECK(rep["config"]["by"].is_null());
}

TEST_CASE("ingestion and configuration failures exit with code two") {
  CHECK(run("fit -i /nonexistent.csv").code == 2);
  CHECK(run("km --by bogus " + table1_args()).code == 2);
  CHECK(run("simulate --tau-true 700").code == 2);
  CHECK(run("simulate --clusters 1").code == 2);
  CHECK(run("fit").code == 2);  // missing required input

  const RunResult r = run("fit -i /nonexistent.csv");
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("data without any events exits with code three") {
  const fs::path f = scratch_dir() / "censored.csv";
  {
    std::ofstream out(f);
    out << "id,time,event,cluster,x\n";
    for (int i = 1; i <= 6; ++i)
      out << i << "," << i * 10 << ",0," << 1 + i % 2 << ",0\n";
  }
  const RunResult r =
      run("fit -i " + f.string() + " --cluster-column cluster --covariates x");
  CHECK(r.code == 3);
  CHECK(r.err.find("no event times") != std::string::npos);
}
