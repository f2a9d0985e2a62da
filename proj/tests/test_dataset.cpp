#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "helpers.hpp"
#include "mipd/dataset.hpp"
#include "mipd/scenarios.hpp"

using namespace mipd;
using testutil::error_of;
using testutil::TempDir;
using testutil::write_file;

namespace {

const char* kExcerpt =
    "ID,Care_Date,Hb,EPO_dose,Previous_EPO_dose,delta_Hb\n"
    "0001,2013-12-20,9.5,4,4,0.3\n"
    "0001,2014-01-17,10.8,4,4,1.3\n"
    "5211,2020-04-30,11.2,2,3,-0.2\n"
    "5211,2020-05-28,11.0,2,2,-0.2\n";

VisitRecord visit(const std::string& id, Date date, std::vector<double> x, double y = 0.0) {
  VisitRecord r;
  r.patient_id = id;
  r.care_date = date;
  r.features = std::move(x);
  r.target = y;
  return r;
}

}  // namespace

TEST_CASE("four-row excerpt loads with two patients") {
  TempDir dir("ds");
  write_file(dir / "epo.csv", kExcerpt);
  const std::vector<std::string> schema{"Hb", "EPO_dose", "Previous_EPO_dose"};
  const Dataset d = load_csv(dir / "epo.csv", schema, "delta_Hb");
  CHECK(d.n_records() == 4);
  CHECK(d.n_patients() == 2);
  CHECK(d.schema() == schema);
  CHECK(d.records()[0].patient_id == "0001");
  CHECK(d.records()[3].care_date == Date::from_ymd(2020, 5, 28));
  CHECK(d.records()[1].features[0] == 10.8);
  CHECK(d.records()[2].target == -0.2);

  // Inferred schema: every non-reserved column except the target.
  const Dataset inferred = load_csv(dir / "epo.csv", "delta_Hb");
  CHECK(inferred == d);
}

TEST_CASE("header-only file gives an empty dataset") {
  TempDir dir("ds");
  write_file(dir / "empty.csv", "ID,Care_Date,Hb,delta_Hb\n");
  const Dataset d = load_csv(dir / "empty.csv", "delta_Hb");
  CHECK(d.n_records() == 0);
  CHECK(d.empty());
}

TEST_CASE("ingestion errors carry their kind and row numbers") {
  TempDir dir("ds");
  SUBCASE("duplicate visit names both rows") {
    write_file(dir / "dup.csv", "ID,Care_Date,Hb,delta_Hb\n0001,2013-12-20,9.5,0\n0001,2013-12-20,9.6,0\n");
    try {
      load_csv(dir / "dup.csv", "delta_Hb");
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::duplicate_key);
      CHECK(std::string(e.what()).find("rows 1 and 2") != std::string::npos);
    }
  }
  SUBCASE("malformed number") {
    write_file(dir / "bad.csv", "ID,Care_Date,Hb,delta_Hb\n0001,2013-12-20,9.5x,0\n");
    CHECK(error_of([&] { load_csv(dir / "bad.csv", "delta_Hb"); }) == Errc::malformed_numeric);
  }
  SUBCASE("bad date") {
    write_file(dir / "date.csv", "ID,Care_Date,Hb,delta_Hb\n0001,2013-02-30,9.5,0\n");
    CHECK(error_of([&] { load_csv(dir / "date.csv", "delta_Hb"); }) == Errc::invalid_date);
  }
  SUBCASE("missing schema column") {
    write_file(dir / "cols.csv", "ID,Care_Date,delta_Hb\n0001,2013-12-20,0\n");
    const std::vector<std::string> schema{"Hb"};
    CHECK(error_of([&] { load_csv(dir / "cols.csv", schema, "delta_Hb"); }) == Errc::missing_column);
  }
  SUBCASE("missing target column") {
    write_file(dir / "tgt.csv", "ID,Care_Date,Hb\n0001,2013-12-20,1\n");
    CHECK(error_of([&] { load_csv(dir / "tgt.csv", "delta_Hb"); }) == Errc::missing_column);
  }
}

TEST_CASE("empty cells load as missing and survive a write/read cycle") {
  TempDir dir("ds");
  write_file(dir / "m.csv", "ID,Care_Date,Hb,delta_Hb\n0001,2013-12-20,,\n0001,2014-01-03,9.1,0.25\n");
  const Dataset d = load_csv(dir / "m.csv", "delta_Hb");
  CHECK(is_missing(d.records()[0].features[0]));
  CHECK(is_missing(d.records()[0].target));
  CHECK(d.labeled().n_records() == 1);
  write_csv(d, dir / "out.csv", "delta_Hb");
  const Dataset back = load_csv(dir / "out.csv", "delta_Hb");
  CHECK(back.n_records() == 2);
  CHECK(is_missing(back.records()[0].features[0]));
  CHECK(back.records()[1].target == 0.25);
}

TEST_CASE("construction sorts records and rejects duplicate keys") {
  const Date a = Date::from_ymd(2020, 1, 1);
  const Dataset d({"x"}, {visit("b", a, {1}), visit("a", a.plus_days(7), {2}), visit("a", a, {3})});
  REQUIRE(d.n_records() == 3);
  CHECK(d.records()[0].patient_id == "a");
  CHECK(d.records()[0].features[0] == 3);
  CHECK(d.records()[1].features[0] == 2);
  CHECK(d.records()[2].patient_id == "b");
  CHECK(error_of([&] { Dataset({"x"}, {visit("a", a, {1}), visit("a", a, {2})}); }) == Errc::duplicate_key);
  CHECK(error_of([&] { Dataset({"x"}, {visit("a", a, {1, 2})}); }) == Errc::invalid_argument);
  CHECK(error_of([&] { Dataset({"ID"}, {}); }) == Errc::name_collision);
}

TEST_CASE("derive_lags") {
  const Date t0 = Date::from_ymd(2014, 1, 1);
  const Dataset d({"Hb", "dose"}, {visit("p", t0, {9.5, 1}), visit("p", t0.plus_days(14), {10.8, 2}),
                                   visit("p", t0.plus_days(28), {12.2, 3}), visit("q", t0, {10.0, 4})});

  SUBCASE("delta one visit before") {
    const Dataset out = derive_lags(d, {{{"Hb", LagKind::delta, 1, "dHb_1"}}});
    const auto col = out.feature_index("dHb_1");
    CHECK(is_missing(out.records()[0].features[col]));
    CHECK(is_missing(out.records()[1].features[col]));
    CHECK(out.records()[2].features[col] == doctest::Approx(10.8 - 9.5).epsilon(1e-15));
    CHECK(is_missing(out.records()[3].features[col]));
  }
  SUBCASE("plain lag, single-visit patient is missing") {
    const Dataset out = derive_lags(d, {{{"Hb", LagKind::lag, 1, "Hb_prev"}, {"dose", LagKind::lag, 2, "dose_2"}}});
    CHECK(out.records()[1].features[2] == 9.5);
    CHECK(out.records()[2].features[2] == 10.8);
    CHECK(out.records()[2].features[3] == 1.0);
    CHECK(is_missing(out.records()[3].features[2]));
  }
  SUBCASE("rolling rate: summed dose over elapsed weeks") {
    const Dataset out = derive_lags(d, {{{"dose", LagKind::rolling_rate, 2, "dose_rate"}}});
    // visit 3: doses 1 + 2 over 28 days = 4 weeks
    CHECK(out.records()[2].features[2] == doctest::Approx(3.0 / 4.0));
    CHECK(is_missing(out.records()[1].features[2]));
  }
  SUBCASE("existing columns and row order are untouched") {
    const Dataset out = derive_lags(d, {{{"Hb", LagKind::delta, 1, "dHb"}}});
    REQUIRE(out.n_records() == d.n_records());
    for (std::size_t i = 0; i < d.n_records(); ++i) {
      CHECK(out.records()[i].patient_id == d.records()[i].patient_id);
      CHECK(out.records()[i].care_date == d.records()[i].care_date);
      CHECK(out.records()[i].features[0] == d.records()[i].features[0]);
      CHECK(out.records()[i].features[1] == d.records()[i].features[1]);
    }
  }
  SUBCASE("spec violations") {
    CHECK(error_of([&] { derive_lags(d, {{{"Hb", LagKind::lag, 0, "bad"}}}); }) == Errc::invalid_argument);
    CHECK(error_of([&] { derive_lags(d, {{{"Hb", LagKind::lag, 1, "dose"}}}); }) == Errc::name_collision);
    CHECK(error_of([&] { derive_lags(d, {{{"nope", LagKind::lag, 1, "x"}}}); }) == Errc::unknown_feature);
  }
}

TEST_CASE("temporal_split") {
  const Date t0 = Date::from_ymd(2020, 1, 1);
  std::vector<VisitRecord> rows;
  for (int i = 0; i < 5; ++i) rows.push_back(visit("p", t0.plus_days(i), {double(i)}));
  const Dataset d({"x"}, rows);

  const TemporalSplit s = temporal_split(d, t0.plus_days(2));
  REQUIRE(s.train.n_records() == 3);
  REQUIRE(s.test.n_records() == 2);
  CHECK(s.train.records()[2].features[0] == 2);
  CHECK(s.test.records()[0].features[0] == 3);
  CHECK_FALSE(s.empty_side);

  const TemporalSplit early = temporal_split(d, t0.plus_days(-1));
  CHECK(early.train.empty());
  CHECK(early.test.n_records() == 5);
  CHECK(early.empty_side);
}

TEST_CASE("generate_synthetic") {
  SUBCASE("noise-free single rule lies on its line") {
    SyntheticTruth t = two_leaf_truth();
    t.rules = {t.rules[0]};
    t.rules[0].conditions.clear();
    t.rules[0].model = {-0.33, {0.226}};
    t.sigma_b = 0.0;
    t.sigma = 1e-9;
    t.n_clusters = 20;
    t.visits_per_cluster = 5;
    const auto [d, truth] = generate_synthetic(t, 3);
    const auto dose = d.feature_index("EPO_DOSE");
    for (const auto& r : d.records()) CHECK(std::abs(r.target - (-0.33 + 0.226 * r.features[dose])) < 4e-9);
  }
  SUBCASE("same seed, same data") {
    const auto a = generate_synthetic(three_leaf_truth(), 11);
    const auto b = generate_synthetic(three_leaf_truth(), 11);
    CHECK(a.first == b.first);
    CHECK(a.second.intercepts == b.second.intercepts);
    CHECK_FALSE(a.first == generate_synthetic(three_leaf_truth(), 12).first);
  }
  SUBCASE("cluster means recover the intercept variance") {
    const auto [d, truth] = generate_synthetic(three_leaf_truth(), 5);
    CHECK(d.n_patients() == 300);
    CHECK(d.n_records() == 9000);
    std::map<std::string, std::pair<double, int>> sums;
    for (const auto& r : d.records()) {
      auto& s = sums[r.patient_id];
      s.first += r.target - truth.mean_response(r.features);
      s.second += 1;
    }
    std::vector<double> means;
    for (const auto& [id, s] : sums) means.push_back(s.first / s.second);
    const double mu = std::accumulate(means.begin(), means.end(), 0.0) / means.size();
    double var = 0.0;
    for (double m : means) var += (m - mu) * (m - mu);
    var /= means.size() - 1;
    CHECK(std::abs(var - 0.09) < 0.2 * 0.09);
  }
  SUBCASE("overlapping planted rules are rejected") {
    SyntheticTruth t = two_leaf_truth();
    t.rules[1].conditions[0].op = CompareOp::le;  // both rules now claim z1 <= 0
    CHECK(error_of([&] { generate_synthetic(t, 1); }) == Errc::not_a_partition);
  }
  SUBCASE("running level column") {
    SyntheticTruth t = two_leaf_truth();
    t.level_feature = "Hb";
    t.n_clusters = 3;
    const auto [d, truth] = generate_synthetic(t, 2);
    const auto hb = d.feature_index("Hb");
    CHECK(d.records()[0].features[hb] == t.level_start);
    // Hb before a visit is the previous level plus the previous change.
    CHECK(d.records()[1].features[hb] == doctest::Approx(t.level_start + d.records()[0].target));
  }
}

TEST_CASE("temporal scenario splits each history at the training horizon") {
  const Scenario s = temporal_scenario(three_leaf_truth(), 4, 20);
  CHECK(s.train.n_records() == 300 * 20);
  CHECK(s.test.n_records() == 300 * 10);
  CHECK(s.train.n_patients() == 300);
}
