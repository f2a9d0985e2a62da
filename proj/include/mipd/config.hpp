#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mipd/glmmtree.hpp"
#include "mipd/loop.hpp"
#include "mipd/model_io.hpp"
#include "mipd/scenarios.hpp"
#include "mipd/trees.hpp"

namespace mipd {

/// Which generator `generate-data` and the oracle loop use.
struct ScenarioConfig {
  std::string truth = "three-leaf";  // three-leaf, two-leaf, grid, misspecified
  int n_clusters = 300;
  int visits_per_cluster = 30;
  int train_visits = 20;
  double sigma_b = 0.3;
  double sigma = 0.2;
  int grid_cells = 6;
  double observed_slope = 0.10;  // misspecified only
  std::string level_feature;     // adds a running Hb column when set
};

struct ApiConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string token;  // static bearer token; empty disables auth
  std::filesystem::path snapshot_dir = "snapshots";
  std::filesystem::path train_csv;
  std::filesystem::path test_csv;
  std::vector<double> dose_grid{0, 1, 2, 3, 4, 6, 8};
  std::string level_feature = "Hb";
};

struct Config {
  std::string target = "delta_Hb";  // CSV target column
  int threads = 1;
  TreeParams cart;
  ForestParams forest;
  GlmmTreeParams glmmtree;
  BaggingParams bagging{25, true, 1, 1};
  LoopConfig loop;
  OracleOptions oracle;
  ScenarioConfig scenario;
  ApiConfig api;
};

/// Sections: target, threads, cart, forest, glmmtree, bagging, loop, oracle,
/// scenario, api. Missing keys keep their defaults; unknown keys throw.
Config config_from_json(const Json& j);
Json to_json(const Config& c);
Json to_json(const ScenarioConfig& s);
Json to_json(const OracleOptions& o);
Json to_json(const ApiConfig& a);
Config load_config(const std::filesystem::path& path);

/// The generator truth, written next to generated data so the oracle expert
/// can be replayed later.
Json to_json(const SyntheticTruth& t);
SyntheticTruth synthetic_truth_from_json(const Json& j);

/// Synthetic truth described by `s` (not yet generated).
SyntheticTruth scenario_truth(const ScenarioConfig& s);

/// Generated and temporally split data for `s`; "misspecified" attenuates
/// the training targets' dose effect.
Scenario make_scenario(const ScenarioConfig& s, std::uint64_t seed);

}  // namespace mipd
