#include "mipd/config.hpp"

#include <set>

#include "mipd/error.hpp"
#include "mipd/rules.hpp"
#include "mipd/scenarios.hpp"

namespace mipd {

namespace {

void only_keys(const Json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, std::string(what) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw Error(Errc::invalid_argument, std::string(what) + ": unknown key '" + it.key() + "'");
}

template <typename T>
void maybe(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = json_get<T>(j, key);
}

}  // namespace

Json to_json(const ScenarioConfig& s) {
  return Json{{"truth", s.truth},
              {"n_clusters", s.n_clusters},
              {"visits_per_cluster", s.visits_per_cluster},
              {"train_visits", s.train_visits},
              {"sigma_b", s.sigma_b},
              {"sigma", s.sigma},
              {"grid_cells", s.grid_cells},
              {"observed_slope", s.observed_slope},
              {"level_feature", s.level_feature}};
}

Json to_json(const OracleOptions& o) {
  return Json{{"raters", o.raters},
              {"visits_per_round", o.visits_per_round},
              {"noise_sd", o.noise_sd},
              {"rho", o.rho},
              {"seed", o.seed}};
}

Json to_json(const ApiConfig& a) {
  return Json{{"host", a.host},
              {"port", a.port},
              {"token", a.token.empty() ? "" : "***"},
              {"snapshot_dir", a.snapshot_dir.string()},
              {"train_csv", a.train_csv.string()},
              {"test_csv", a.test_csv.string()},
              {"dose_grid", a.dose_grid},
              {"level_feature", a.level_feature}};
}

Json to_json(const Config& c) {
  return Json{{"target", c.target},
              {"threads", c.threads},
              {"cart", to_json(c.cart)},
              {"forest", to_json(c.forest)},
              {"glmmtree", to_json(c.glmmtree)},
              {"bagging", to_json(c.bagging)},
              {"loop", to_json(c.loop)},
              {"oracle", to_json(c.oracle)},
              {"scenario", to_json(c.scenario)},
              {"api", to_json(c.api)}};
}

Json to_json(const SyntheticTruth& t) {
  Json rules = Json::array();
  for (const auto& r : t.rules) rules.push_back(to_json(r));
  Json ranges = Json::array();
  for (const auto& r : t.ranges) ranges.push_back(Json{{"feature", r.feature}, {"lo", r.lo}, {"hi", r.hi}});
  return Json{{"rules", std::move(rules)},
              {"regressors", t.regressors},
              {"sigma_b", t.sigma_b},
              {"sigma", t.sigma},
              {"ranges", std::move(ranges)},
              {"n_clusters", t.n_clusters},
              {"visits_per_cluster", t.visits_per_cluster},
              {"start_date", t.start_date.to_string()},
              {"visit_interval_days", t.visit_interval_days},
              {"level_feature", t.level_feature},
              {"level_start", t.level_start},
              {"intercepts", to_json(t.intercepts)}};
}

SyntheticTruth synthetic_truth_from_json(const Json& j) {
  SyntheticTruth t;
  for (const auto& r : json_get<Json>(j, "rules")) t.rules.push_back(rule_from_json(r));
  t.regressors = json_get<std::vector<std::string>>(j, "regressors");
  t.sigma_b = json_get<double>(j, "sigma_b");
  t.sigma = json_get<double>(j, "sigma");
  for (const auto& r : json_get<Json>(j, "ranges"))
    t.ranges.push_back({json_get<std::string>(r, "feature"), json_get<double>(r, "lo"), json_get<double>(r, "hi")});
  t.n_clusters = json_get<int>(j, "n_clusters");
  t.visits_per_cluster = json_get<int>(j, "visits_per_cluster");
  const auto start = Date::parse(json_get<std::string>(j, "start_date"));
  if (!start) throw Error(Errc::invalid_date, "truth start_date is not YYYY-MM-DD");
  t.start_date = *start;
  t.visit_interval_days = json_get<int>(j, "visit_interval_days");
  t.level_feature = json_get<std::string>(j, "level_feature");
  t.level_start = json_get<double>(j, "level_start");
  t.intercepts = json_get<std::map<std::string, double>>(j, "intercepts");
  return t;
}

Config config_from_json(const Json& j) {
  only_keys(j, {"target", "threads", "cart", "forest", "glmmtree", "bagging", "loop", "oracle", "scenario", "api"},
            "config");
  Config c;
  maybe(j, "target", c.target);
  maybe(j, "threads", c.threads);
  if (c.threads < 1) throw Error(Errc::invalid_argument, "threads must be at least 1");
  if (j.contains("cart")) c.cart = tree_params_from_json(j.at("cart"), c.cart);
  if (j.contains("forest")) c.forest = forest_params_from_json(j.at("forest"), c.forest);
  if (j.contains("glmmtree")) c.glmmtree = glmm_params_from_json(j.at("glmmtree"), c.glmmtree);
  if (j.contains("bagging")) c.bagging = bagging_params_from_json(j.at("bagging"), c.bagging);
  // The loop refits with the same tree parameters unless it overrides them.
  c.loop.params = c.glmmtree;
  if (j.contains("loop")) c.loop = loop_config_from_json(j.at("loop"), c.loop);
  if (j.contains("oracle")) {
    const Json& o = j.at("oracle");
    only_keys(o, {"raters", "visits_per_round", "noise_sd", "rho", "seed"}, "oracle");
    maybe(o, "raters", c.oracle.raters);
    maybe(o, "visits_per_round", c.oracle.visits_per_round);
    maybe(o, "noise_sd", c.oracle.noise_sd);
    maybe(o, "rho", c.oracle.rho);
    maybe(o, "seed", c.oracle.seed);
  }
  if (j.contains("scenario")) {
    const Json& s = j.at("scenario");
    only_keys(s, {"truth", "n_clusters", "visits_per_cluster", "train_visits", "sigma_b", "sigma", "grid_cells",
                  "observed_slope", "level_feature"},
              "scenario");
    maybe(s, "truth", c.scenario.truth);
    maybe(s, "n_clusters", c.scenario.n_clusters);
    maybe(s, "visits_per_cluster", c.scenario.visits_per_cluster);
    maybe(s, "train_visits", c.scenario.train_visits);
    maybe(s, "sigma_b", c.scenario.sigma_b);
    maybe(s, "sigma", c.scenario.sigma);
    maybe(s, "grid_cells", c.scenario.grid_cells);
    maybe(s, "observed_slope", c.scenario.observed_slope);
    maybe(s, "level_feature", c.scenario.level_feature);
  }
  if (j.contains("api")) {
    const Json& a = j.at("api");
    only_keys(a, {"host", "port", "token", "snapshot_dir", "train_csv", "test_csv", "dose_grid", "level_feature"},
              "api");
    maybe(a, "host", c.api.host);
    maybe(a, "port", c.api.port);
    maybe(a, "token", c.api.token);
    if (a.contains("snapshot_dir")) c.api.snapshot_dir = json_get<std::string>(a, "snapshot_dir");
    if (a.contains("train_csv")) c.api.train_csv = json_get<std::string>(a, "train_csv");
    if (a.contains("test_csv")) c.api.test_csv = json_get<std::string>(a, "test_csv");
    maybe(a, "dose_grid", c.api.dose_grid);
    maybe(a, "level_feature", c.api.level_feature);
    if (c.api.port < 0 || c.api.port > 65535) throw Error(Errc::invalid_argument, "api.port out of range");
  }
  return c;
}

Config load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

SyntheticTruth scenario_truth(const ScenarioConfig& s) {
  SyntheticTruth t;
  if (s.truth == "three-leaf" || s.truth == "misspecified")
    t = three_leaf_truth();
  else if (s.truth == "two-leaf")
    t = two_leaf_truth();
  else if (s.truth == "grid")
    t = grid_truth(s.grid_cells);
  else
    throw Error(Errc::invalid_argument, "unknown scenario truth '" + s.truth + "'");
  t.n_clusters = s.n_clusters;
  t.visits_per_cluster = s.visits_per_cluster;
  t.sigma_b = s.sigma_b;
  t.sigma = s.sigma;
  t.level_feature = s.level_feature;
  return t;
}

Scenario make_scenario(const ScenarioConfig& s, std::uint64_t seed) {
  Scenario sc = temporal_scenario(scenario_truth(s), seed, s.train_visits);
  if (s.truth == "misspecified") sc.train = attenuate_dose_effect(sc.train, sc.truth, s.observed_slope);
  return sc;
}

}  // namespace mipd
