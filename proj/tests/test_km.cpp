#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cstdlib>
#include <random>

#include "survcp/data.hpp"
#include "survcp/km.hpp"

using namespace survcp;

static Dataset table1() {
  const char* dir = std::getenv("SURVCP_DATA");
  REQUIRE(dir != nullptr);
  CsvSchema schema;
  schema.event = "censor";
  return load_csv(std::string(dir) + "/table1.csv", schema);
}

TEST_CASE("two-arm product-limit curves match hand-computed fractions") {
  const Dataset ds = table1();
  const auto curves = kaplan_meier_by_covariate(ds, 0);
  REQUIRE(curves.size() == 2);
  const SurvivalCurve& placebo = curves[0];    // treat = 0
  const SurvivalCurve& treatment = curves[1];  // treat = 1
  CHECK(placebo.group == "0");
  CHECK(treatment.group == "1");

  // One step point per distinct observed time in the group.
  REQUIRE(placebo.times.size() == 15);
  REQUIRE(treatment.times.size() == 14);

  const std::vector<double> p_times = {10, 25, 30, 45, 50, 55, 60, 65,
                                       70, 75, 80, 85, 90, 95, 100};
  const std::vector<double> p_surv = {
      1.0,        13.0 / 14, 6.0 / 7,   11.0 / 14, 5.0 / 7,
      5.0 / 7,    40.0 / 63, 5.0 / 9,   5.0 / 9,   25.0 / 54,
      10.0 / 27,  5.0 / 18,  5.0 / 18,  5.0 / 36,  5.0 / 36};
  for (size_t i = 0; i < p_times.size(); ++i) {
    CHECK(placebo.times[i] == p_times[i]);
    CHECK(placebo.survival[i] == Catch::Approx(p_surv[i]).margin(1e-12));
  }

  const std::vector<double> t_times = {10, 15, 25, 40, 45, 60, 65,
                                       70, 75, 80, 85, 90, 95, 100};
  const std::vector<double> t_surv = {
      1.0,       1.0,       12.0 / 13, 11.0 / 13, 10.0 / 13, 10.0 / 13,
      10.0 / 13, 35.0 / 52, 15.0 / 26, 15.0 / 26, 6.0 / 13,  6.0 / 13,
      4.0 / 13,  4.0 / 13};
  for (size_t i = 0; i < t_times.size(); ++i) {
    CHECK(treatment.times[i] == t_times[i]);
    CHECK(treatment.survival[i] == Catch::Approx(t_surv[i]).margin(1e-12));
  }

  // Censor marks sit exactly at the censored times of each arm.
  CHECK(placebo.censor_marks == std::vector<double>{10, 55, 70, 90, 100});
  CHECK(treatment.censor_marks ==
        std::vector<double>{10, 15, 60, 65, 80, 90, 100});

  // S(0) = 1 and the curve is a right-continuous step function.
  CHECK(placebo.eval(0.0) == 1.0);
  CHECK(placebo.eval(24.999) == 1.0);
  CHECK(placebo.eval(25.0) == Catch::Approx(13.0 / 14).margin(1e-12));
}

TEST_CASE("no censoring gives the empirical survival function") {
  std::vector<std::pair<double, bool>> obs = {
      {1, true}, {2, true}, {3, true}, {4, true}};
  const SurvivalCurve c = km_curve(obs, "g");
  for (size_t i = 0; i < 4; ++i)
    CHECK(c.survival[i] == Catch::Approx(1.0 - (i + 1) / 4.0).margin(1e-15));
  CHECK(c.censor_marks.empty());
}

TEST_CASE("events precede censorings at tied times") {
  // One event and one censoring at t=2: the event uses the full risk set,
  // and the censoring leaves afterwards.
  std::vector<std::pair<double, bool>> obs = {
      {1, true}, {2, true}, {2, false}, {3, true}};
  const SurvivalCurve c = km_curve(obs, "g");
  REQUIRE(c.times == std::vector<double>{1, 2, 3});
  CHECK(c.survival[0] == Catch::Approx(3.0 / 4).margin(1e-15));
  CHECK(c.survival[1] == Catch::Approx(3.0 / 4 * 2.0 / 3).margin(1e-15));
  CHECK(c.survival[2] == Catch::Approx(0.0).margin(1e-15));
  CHECK(c.censor_marks == std::vector<double>{2});
}

TEST_CASE("single subject curve") {
  const SurvivalCurve e = km_curve({{5.0, true}}, "g");
  REQUIRE(e.times == std::vector<double>{5.0});
  CHECK(e.survival[0] == 0.0);

  const SurvivalCurve c = km_curve({{5.0, false}}, "g");
  CHECK(c.survival[0] == 1.0);
  CHECK(c.censor_marks == std::vector<double>{5.0});
}

TEST_CASE("empty group is an error") {
  CHECK_THROWS_WITH(km_curve({}, "empty"),
                    Catch::Matchers::ContainsSubstring("empty group"));
}

TEST_CASE("fuzzed curves start at one, stay in [0,1], and never increase") {
  std::mt19937_64 g(42);
  std::uniform_real_distribution<double> ut(0.01, 10.0);
  std::bernoulli_distribution ue(0.6);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 1 + static_cast<int>(g() % 40);
    std::vector<std::pair<double, bool>> obs;
    for (int i = 0; i < n; ++i) obs.push_back({ut(g), ue(g)});
    const SurvivalCurve c = km_curve(obs, "f");
    CHECK(c.eval(0.0) == 1.0);
    double prev = 1.0;
    for (size_t i = 0; i < c.times.size(); ++i) {
      CHECK(c.survival[i] <= prev + 1e-15);
      CHECK(c.survival[i] >= 0.0);
      CHECK(c.survival[i] <= 1.0);
      prev = c.survival[i];
      if (i) CHECK(c.times[i] > c.times[i - 1]);
    }
    for (double m : c.censor_marks)
      CHECK(std::find(c.times.begin(), c.times.end(), m) != c.times.end());
  }
}

TEST_CASE("curve export/import round trip") {
  const Dataset ds = table1();
  auto curves = kaplan_meier_by_covariate(ds, 0);
  const std::string csv = export_curves_csv(curves);
  const auto back = import_curves_csv(csv);
  REQUIRE(back.size() == curves.size());
  for (size_t k = 0; k < curves.size(); ++k) {
    CHECK(back[k].group == curves[k].group);
    REQUIRE(back[k].times.size() == curves[k].times.size());
    for (size_t i = 0; i < curves[k].times.size(); ++i) {
      CHECK(back[k].times[i] == curves[k].times[i]);
      CHECK(back[k].survival[i] == curves[k].survival[i]);
    }
    CHECK(back[k].censor_marks == curves[k].censor_marks);
  }

  // Comment lines are ignored on import.
  const auto commented = import_curves_csv("# config: {}\n" + csv);
  CHECK(commented.size() == curves.size());
}

TEST_CASE("annotations appear in JSON export only") {
  const Dataset ds = table1();
  auto curves = kaplan_meier_all(ds);
  curves[0].annotations.emplace_back(50.0, "changepoint");
  const std::string js = export_curves_json(curves);
  CHECK(js.find("changepoint") != std::string::npos);
  CHECK(js.find("\"annotations\"") != std::string::npos);
  const std::string csv = export_curves_csv(curves);
  CHECK(csv.find("changepoint") == std::string::npos);

  CHECK_THROWS_WITH(export_curves(curves, "yaml"),
                    Catch::Matchers::ContainsSubstring("unknown format"));
}

TEST_CASE("pooled and cluster groupings cover every subject") {
  const Dataset ds = table1();
  const auto all = kaplan_meier_all(ds);
  REQUIRE(all.size() == 1);
  CHECK(all[0].group == "all");
  // 30 subjects, last survival = product over all 17 events.
  CHECK(all[0].eval(0.0) == 1.0);

  const auto by_cluster = kaplan_meier_by_cluster(ds);
  REQUIRE(by_cluster.size() == 3);
  CHECK(by_cluster[0].group == "1");
  CHECK(by_cluster[1].group == "2");
  CHECK(by_cluster[2].group == "3");
}
