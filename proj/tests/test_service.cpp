#include <doctest.h>

#include <condition_variable>
#include <thread>

#include "helpers.hpp"
#include "mipd/scenarios.hpp"
#include "mipd/service.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

using namespace mipd;

namespace {

struct Fixture {
  Scenario s;
  LoopState state;
};

/// One model fit shared by every test case.
const Fixture& fixture() {
  static const Fixture f = [] {
    MisspecOptions o;
    o.n_clusters = 80;
    Fixture x{misspecified_scenario(5, o), {}};
    LoopConfig c;
    c.formula = {{"EPO_DOSE"}, {"z1", "z2", "z3"}};
    c.gate.replicates = 200;
    x.state = initialize(x.s.train, x.s.test, c);
    return x;
  }();
  return f;
}

Service make_service(ServiceOptions opts = {}) {
  const Fixture& f = fixture();
  return Service(f.state, f.s.train, f.s.test, std::move(opts));
}

Json annotation(const VisitRecord& r, const std::string& rater, double advice) {
  return Json{{"patient_id", r.patient_id},
              {"care_date", r.care_date.to_string()},
              {"advice", advice},
              {"kind", "target_correction"},
              {"rater_id", rater}};
}

/// Two raters agreeing closely on `n` training visits.
void annotate_agreeing(Service& svc, std::size_t n, std::size_t offset = 0) {
  const auto recs = fixture().s.train.records();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = recs[(offset + i) * 7];
    const double a = 0.02 * static_cast<double>(i % 50) - 0.5;
    REQUIRE(svc.handle("POST", "/api/v1/annotations", {}, annotation(r, "a", a).dump()).status == 201);
    REQUIRE(svc.handle("POST", "/api/v1/annotations", {}, annotation(r, "b", a + 0.001).dump()).status == 201);
  }
}

}  // namespace

TEST_CASE("rules endpoints") {
  Service svc = make_service();
  const ApiResponse all = svc.handle("GET", "/api/v1/rules");
  REQUIRE(all.status == 200);
  CHECK(all.body.at("model_version") == 0);
  Json without = all.body;
  without.erase("model_version");
  CHECK(rule_set_from_json(without) == fixture().state.rules);

  const Rule& first = fixture().state.rules.rules[0];
  const ApiResponse one = svc.handle("GET", "/api/v1/rules/" + std::to_string(first.id));
  REQUIRE(one.status == 200);
  CHECK(rule_from_json(one.body.at("rule")) == first);
  CHECK(one.body.at("text") == to_text(first, fixture().state.rules.regressors));
  CHECK(one.body.at("members").get<long>() > 0);

  CHECK(svc.handle("GET", "/api/v1/rules/999").status == 404);
  CHECK(svc.handle("GET", "/api/v1/rules/abc").status == 400);
  CHECK(svc.handle("GET", "/api/v1/nothing").status == 404);
  CHECK(svc.handle("GET", "/other").status == 404);
}

TEST_CASE("rule edits: dry run, staging, rejection") {
  Service svc = make_service();
  const Rule& r = fixture().state.rules.rules[0];
  REQUIRE_FALSE(r.conditions.empty());
  const Condition& c = r.conditions[0];
  const double moved = c.op == CompareOp::le ? c.threshold - 0.1 : c.threshold + 0.1;
  const Json body{{"operations", Json::array({Json{{"type", "modify_threshold"},
                                                   {"feature", c.feature},
                                                   {"threshold", moved}}})},
                  {"author", "dr-a"}};
  const std::string path = "/api/v1/rules/" + std::to_string(r.id) + "/edits";

  const ApiResponse dry = svc.handle("POST", path, {{"dry_run", "true"}}, body.dump());
  REQUIRE(dry.status == 200);
  CHECK(dry.body.at("preview").size() == 20);
  CHECK(dry.body.at("rule").at("conditions")[0].at("threshold") == moved);
  CHECK(dry.body.at("rule").at("provenance") == "edited");
  CHECK(svc.staged().edits.empty());
  // Narrowing a leaf leaves a gap in the partition.
  CHECK_FALSE(dry.body.at("report").at("gaps").empty());

  const ApiResponse staged = svc.handle("POST", path, {}, body.dump());
  CHECK(staged.status == 201);
  CHECK(staged.body.at("edit_index") == 0);
  CHECK(svc.staged().edits.size() == 1);
  CHECK(svc.staged().edited_rules[0] == rule_from_json(staged.body.at("rule")));

  Json impossible = body;
  impossible["operations"] = Json::array({Json{{"type", "add_condition"},
                                               {"condition", {{"feature", c.feature},
                                                              {"op", c.op == CompareOp::le ? "gt" : "le"},
                                                              {"threshold", c.op == CompareOp::le ? c.threshold + 1 : c.threshold - 1}}}}});
  const ApiResponse bad = svc.handle("POST", path, {}, impossible.dump());
  CHECK(bad.status == 422);
  CHECK(bad.body.at("error") == "unsatisfiable-rule");
  CHECK(svc.staged().edits.size() == 1);

  Json mismatch = body;
  mismatch["rule_id"] = r.id + 1;
  CHECK(svc.handle("POST", path, {}, mismatch.dump()).status == 400);
  CHECK(svc.handle("POST", path, {}, "{not json").status == 400);
}

TEST_CASE("patients, trajectories and dose response") {
  Service svc = make_service();
  const Fixture& f = fixture();
  const ApiResponse list = svc.handle("GET", "/api/v1/patients");
  REQUIRE(list.status == 200);
  CHECK(list.body.at("patients").size() == f.s.train.n_patients());

  const Rule& r = f.state.rules.rules[0];
  const ApiResponse in_rule = svc.handle("GET", "/api/v1/patients", {{"rule", std::to_string(r.id)}});
  REQUIRE(in_rule.status == 200);
  long total = 0;
  for (const auto& p : in_rule.body.at("patients")) total += p.at("n_in_rule").get<long>();
  CHECK(total == svc.handle("GET", "/api/v1/rules/" + std::to_string(r.id)).body.at("members").get<long>());

  const std::string patient = f.s.train.records()[0].patient_id;
  const ApiResponse traj = svc.handle("GET", "/api/v1/patients/" + patient + "/trajectory");
  REQUIRE(traj.status == 200);
  const auto& visits = traj.body.at("visits");
  CHECK(visits.size() == 30);
  CHECK(visits[0].at("split") == "train");
  CHECK(visits[29].at("split") == "test");
  CHECK(traj.body.at("b_hat") == f.state.model.b_hat.at(patient));

  // Same numbers as calling the model directly.
  const ApiResponse dr = svc.handle("GET", "/api/v1/patients/" + patient + "/dose-response",
                                    {{"grid", "0,1.5,3"}, {"current_hb", "10.5"}});
  REQUIRE(dr.status == 200);
  Dataset all_rows;
  {
    std::vector<VisitRecord> rows;
    for (const auto& v : f.s.test.records())
      if (v.patient_id == patient) rows.push_back(v);
    all_rows = Dataset(f.s.test.schema(), rows);
  }
  const std::vector<std::size_t> final_row{all_rows.n_records() - 1};
  const std::vector<double> grid{0, 1.5, 3};
  const auto direct = dose_response(f.state.model, all_rows.subset(final_row).features(), patient, grid, 10.5);
  const auto& pts = dr.body.at("points");
  REQUIRE(pts.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(pts[i].at("dose") == direct[i].dose);
    CHECK(pts[i].at("delta_hb") == direct[i].delta_hb);
    CHECK(pts[i].at("projected_hb") == direct[i].projected_hb);
  }
  CHECK(dr.body.at("care_date") == all_rows.records().back().care_date.to_string());

  const std::string first_date = f.s.train.records()[0].care_date.to_string();
  CHECK(svc.handle("GET", "/api/v1/patients/" + patient + "/dose-response", {{"visit", first_date}, {"current_hb", "10"}})
            .body.at("care_date") == first_date);
  CHECK(svc.handle("GET", "/api/v1/patients/" + patient + "/dose-response").status == 400);  // no Hb column
  CHECK(svc.handle("GET", "/api/v1/patients/nobody/trajectory").status == 404);
  CHECK(svc.handle("GET", "/api/v1/patients/" + patient + "/dose-response", {{"visit", "1999-01-01"}, {"current_hb", "10"}})
            .status == 404);
  CHECK(svc.handle("GET", "/api/v1/patients/" + patient + "/dose-response", {{"visit", "soon"}}).status == 400);

  // Reads are repeatable.
  CHECK(svc.handle("GET", "/api/v1/patients/" + patient + "/trajectory").body == traj.body);
  CHECK(svc.handle("GET", "/api/v1/rules").body == svc.handle("GET", "/api/v1/rules").body);
}

TEST_CASE("annotations") {
  Service svc = make_service();
  const VisitRecord& r = fixture().s.train.records()[3];

  const ApiResponse created = svc.handle("POST", "/api/v1/annotations", {}, annotation(r, "a", 0.4).dump());
  REQUIRE(created.status == 201);
  CHECK(created.body.at("index") == 0);
  const auto& echoed = created.body.at("annotation");
  CHECK(echoed.at("x_snapshot").size() == fixture().s.train.schema().size());
  CHECK(echoed.at("rule_id").get<int>() > 0);
  const std::vector<std::size_t> one{3};
  CHECK(echoed.at("y_hat") == predict_state(fixture().state, fixture().s.train.subset(one))[0]);

  const ApiResponse listed = svc.handle("GET", "/api/v1/annotations", {{"version", "current"}});
  REQUIRE(listed.body.at("annotations").size() == 1);
  CHECK(listed.body.at("annotations")[0].at("submitted_version") == 0);
  CHECK(svc.handle("GET", "/api/v1/annotations", {{"rater", "zzz"}}).body.at("annotations").empty());

  SUBCASE("duplicates conflict and leave the pool as it was") {
    const AdvicePool before = svc.staged();
    const ApiResponse dup = svc.handle("POST", "/api/v1/annotations", {}, annotation(r, "a", 0.9).dump());
    CHECK(dup.status == 409);
    CHECK(dup.body.at("error") == "conflict");
    CHECK(dup.body.at("model_version") == 0);
    CHECK(svc.staged() == before);
  }
  SUBCASE("failed submissions change nothing") {
    const AdvicePool before = svc.staged();
    Json unknown = annotation(r, "b", 0.1);
    unknown["patient_id"] = "ghost";
    CHECK(svc.handle("POST", "/api/v1/annotations", {}, unknown.dump()).status == 404);
    Json bad_kind = annotation(r, "b", 0.1);
    bad_kind["kind"] = "mood";
    CHECK(svc.handle("POST", "/api/v1/annotations", {}, bad_kind.dump()).status == 400);
    Json dangling = annotation(r, "b", 0.1);
    dangling["kind"] = "rule_edit_ref";
    dangling["edit_index"] = 4;
    CHECK(svc.handle("POST", "/api/v1/annotations", {}, dangling.dump()).status == 400);
    CHECK(svc.staged() == before);
    CHECK(svc.handle("GET", "/api/v1/annotations", {{"version", "all"}}).body.at("annotations").size() == 1);
  }
  SUBCASE("a second rater makes agreement computable") {
    const ApiResponse single = svc.handle("GET", "/api/v1/agreement");
    CHECK(single.body.at("kinds").at("target_correction").at("alpha").is_null());
    CHECK(svc.handle("POST", "/api/v1/annotations", {}, annotation(r, "b", 0.4).dump()).status == 201);
    const ApiResponse both = svc.handle("GET", "/api/v1/agreement");
    const auto& k = both.body.at("kinds").at("target_correction");
    CHECK(k.at("n_units") == 1);
    CHECK(k.at("n_raters") == 2);
  }
}

TEST_CASE("authorization") {
  ServiceOptions opts;
  opts.token = "s3cret";
  Service svc = make_service(opts);
  CHECK(svc.handle("GET", "/api/v1/rules").status == 401);
  CHECK(svc.handle("GET", "/api/v1/rules", {}, "", "Bearer nope").status == 401);
  CHECK(svc.handle("GET", "/api/v1/rules", {}, "", "Bearer s3cret").status == 200);
}

TEST_CASE("iterate") {
  testutil::TempDir dir("service");
  ServiceOptions opts;
  opts.snapshot_dir = dir.path();
  Service svc = make_service(opts);
  std::vector<int> seen;
  svc.on_iterate([&](int v) { seen.push_back(v); });

  SUBCASE("agreeing advice is merged and versioned") {
    annotate_agreeing(svc, 60);
    const ApiResponse agreement = svc.handle("GET", "/api/v1/agreement");
    CHECK(agreement.body.at("kinds").at("target_correction").at("pass") == true);
    const ApiResponse it = svc.handle("POST", "/api/v1/loop/iterate");
    REQUIRE(it.status == 200);
    CHECK(it.body.at("accepted") == true);
    CHECK(it.body.at("model_version") == 1);
    CHECK(svc.version() == 1);
    CHECK(svc.staged().empty());
    CHECK(seen == std::vector<int>{1});
    CHECK(svc.state().pool.records.size() == 120);
    CHECK(snapshot_versions(dir.path()) == std::vector<int>{1});
    CHECK(svc.handle("GET", "/api/v1/metrics").body.at("history").size() == 2);
    const auto versions = svc.handle("GET", "/api/v1/versions").body;
    CHECK(versions.at("versions").size() == 2);
    CHECK(versions.at("snapshots") == Json::array({1}));
    CHECK(svc.handle("GET", "/api/v1/annotations").body.at("annotations").empty());  // none at v1 yet
    CHECK(svc.handle("GET", "/api/v1/annotations", {{"version", "0"}}).body.at("annotations").size() == 120);
    CHECK(svc.handle("GET", "/api/v1/rules").body.at("model_version") == 1);
  }
  SUBCASE("disagreeing advice is quarantined") {
    const auto recs = fixture().s.train.records();
    Rng rng(3);
    for (std::size_t i = 0; i < 40; ++i)
      for (const char* r : {"a", "b"})
        REQUIRE(svc.handle("POST", "/api/v1/annotations", {}, annotation(recs[i * 5], r, rng.normal(0, 2)).dump())
                    .status == 201);
    const ApiResponse it = svc.handle("POST", "/api/v1/loop/iterate");
    CHECK(it.body.at("accepted") == false);
    CHECK(svc.version() == 0);
    CHECK(svc.staged().empty());
    CHECK(seen.empty());
    CHECK(snapshot_versions(dir.path()).empty());
    CHECK(svc.handle("GET", "/api/v1/annotations", {{"version", "quarantined"}}).body.at("annotations").size() == 80);
  }
  SUBCASE("a second iterate while one runs is refused") {
    annotate_agreeing(svc, 30);
    std::mutex mu;
    std::condition_variable cv;
    bool inside = false, release = false;
    svc.on_iterate([&](int) {
      std::unique_lock lock(mu);
      inside = true;
      cv.notify_all();
      cv.wait(lock, [&] { return release; });
    });
    ApiResponse first;
    std::thread t([&] { first = svc.handle("POST", "/api/v1/loop/iterate"); });
    {
      std::unique_lock lock(mu);
      cv.wait(lock, [&] { return inside; });
    }
    const ApiResponse second = svc.handle("POST", "/api/v1/loop/iterate");
    CHECK(second.status == 409);
    CHECK(svc.handle("GET", "/api/v1/rules").status == 200);  // reads still served
    {
      std::lock_guard lock(mu);
      release = true;
    }
    cv.notify_all();
    t.join();
    CHECK(first.status == 200);
    CHECK(first.body.at("accepted") == true);
  }
}

TEST_CASE("HTTP round trip") {
  ServiceOptions opts;
  opts.token = "t";
  Service svc = make_service(opts);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread t([&] { server.run(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  const httplib::Headers auth{{"Authorization", "Bearer t"}};
  auto rules = client.Get("/api/v1/rules", auth);
  REQUIRE(rules);
  CHECK(rules->status == 200);
  CHECK(Json::parse(rules->body) == svc.handle("GET", "/api/v1/rules", {}, "", "Bearer t").body);
  auto denied = client.Get("/api/v1/rules");
  REQUIRE(denied);
  CHECK(denied->status == 401);

  const VisitRecord& r = fixture().s.train.records()[0];
  auto posted = client.Post("/api/v1/annotations", auth, annotation(r, "x", 0.1).dump(), "application/json");
  REQUIRE(posted);
  CHECK(posted->status == 201);
  const std::string path = "/api/v1/patients/" + r.patient_id + "/dose-response?grid=0,2&current_hb=9.5";
  auto dr = client.Get(path, auth);
  REQUIRE(dr);
  CHECK(dr->status == 200);
  CHECK(Json::parse(dr->body).at("points").size() == 2);

  server.stop();
  t.join();
}
