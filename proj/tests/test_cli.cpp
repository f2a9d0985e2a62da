#include <doctest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "helpers.hpp"
#include "mipd/model_io.hpp"

using mipd::Json;

namespace {

struct Run {
  int code = -1;
  std::string out;
  Json json() const { return Json::parse(out); }
};

/// Runs the CLI inside `dir`, capturing stdout.
Run mipd_cli(const testutil::TempDir& dir, const std::string& args) {
  const std::string out = (dir / "stdout.txt").string();
  const std::string cmd = "cd '" + dir.path().string() + "' && '" MIPD_CLI "' " + args + " > '" + out + "' 2> '" +
                          (dir / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testutil::read_file(out);
  return r;
}

}  // namespace

TEST_CASE("generate, train, evaluate") {
  testutil::TempDir dir("cli");
  Run gen = mipd_cli(dir, "--json --seed 4 generate-data --out d --truth three-leaf");
  REQUIRE(gen.code == 0);
  CHECK(gen.json().at("n_train") == 6000);
  CHECK(std::filesystem::exists(dir / "d" / "truth.json"));

  // Same seed, same bytes.
  REQUIRE(mipd_cli(dir, "--seed 4 generate-data --out d2 --truth three-leaf").code == 0);
  CHECK(testutil::read_file(dir / "d" / "train.csv") == testutil::read_file(dir / "d2" / "train.csv"));

  for (const char* model : {"cart", "forest", "lmm", "glmmtree", "bagged-glmmtree"}) {
    CAPTURE(model);
    const std::string file = std::string(model) + ".json";
    const Run train = mipd_cli(dir, "--json train --model " + std::string(model) + " --train d/train.csv --out " + file);
    REQUIRE(train.code == 0);
    const Run eval = mipd_cli(dir, "--json evaluate --model " + file + " --data d/test.csv");
    REQUIRE(eval.code == 0);
    const Json m = eval.json();
    CHECK(m.at("n") == 3000);
    CHECK(m.at("mae").get<double>() <= m.at("rmse").get<double>());
    CHECK(m.at("mae").get<double>() > 0);
  }
  // Re-evaluating is deterministic.
  CHECK(mipd_cli(dir, "--json evaluate --model glmmtree.json --data d/test.csv").out ==
        mipd_cli(dir, "--json evaluate --model glmmtree.json --data d/test.csv").out);

  SUBCASE("rules") {
    const Run exported = mipd_cli(dir, "rules export --model glmmtree.json --out rules.json");
    REQUIRE(exported.code == 0);
    CHECK(exported.out.find("RULE #1:\nIF ") == 0);
    const Json rules = Json::parse(testutil::read_file(dir / "rules.json"));
    REQUIRE(rules.at("rules").size() == 3);

    const Run valid = mipd_cli(dir, "--json rules validate --rules rules.json --data d/train.csv");
    CHECK(valid.code == 0);
    CHECK(valid.json().at("ok") == true);

    // Widen rule 1 across its sibling: the validator must flag the overlap.
    const Json& c = rules.at("rules")[0].at("conditions")[0];
    Json edit{{"rule_id", 1},
              {"operations", Json::array({Json{{"type", "remove_condition"},
                                               {"feature", c.at("feature")},
                                               {"op", c.at("op")}}})}};
    testutil::write_file(dir / "edit.json", edit.dump());
    const Run edited = mipd_cli(dir, "--json rules edit --rules rules.json --edit edit.json --data d/train.csv --out e.json");
    CHECK(edited.code == 0);
    CHECK_FALSE(edited.json().at("report").at("overlaps").empty());
    CHECK(mipd_cli(dir, "--json rules validate --rules e.json --data d/train.csv").code == 2);

    const Run lmm = mipd_cli(dir, "rules export --model lmm.json");
    CHECK(lmm.code != 0);
  }
}

TEST_CASE("agreement compute") {
  testutil::TempDir dir("cli");
  testutil::write_file(dir / "perfect.csv", "unit_id,rater_id,value\nu1,a,1\nu1,b,1\nu2,a,3\nu2,b,3\nu3,a,2\nu3,b,2\n");
  const Run r = mipd_cli(dir, "--json agreement compute --ratings perfect.csv --replicates 200");
  REQUIRE(r.code == 0);
  const Json j = r.json();
  CHECK(j.at("alpha") == 1.0);
  CHECK(j.at("pass") == true);

  testutil::write_file(dir / "retest.csv",
                       "unit_id,rater_id,value,occasion\nu1,a,1,0\nu1,a,1.1,1\nu2,a,3,0\nu2,a,2.9,1\nu3,a,2,0\nu3,a,2,1\n");
  const Run intra = mipd_cli(dir, "--json agreement compute --ratings retest.csv --intra a --replicates 200");
  REQUIRE(intra.code == 0);
  CHECK(intra.json().at("alpha").get<double>() > 0.9);

  CHECK(mipd_cli(dir, "agreement compute --ratings missing.csv").code != 0);
}

TEST_CASE("loop run with the oracle expert") {
  testutil::TempDir dir("cli");
  const Run r = mipd_cli(dir, "--json --seed 2 loop run --expert oracle --iterations 2 --scenario misspecified --snapshots s");
  REQUIRE(r.code == 0);
  const Json j = r.json();
  const auto& h = j.at("history");
  REQUIRE(h.size() == 3);
  for (std::size_t i = 1; i < h.size(); ++i)
    CHECK(h[i].at("test").at("mae").get<double>() < h[i - 1].at("test").at("mae").get<double>());
  CHECK(std::filesystem::exists(dir / "s" / "v2" / "rules.json"));

  const Run replay = mipd_cli(dir, "--json --seed 2 loop replay --snapshots s --scenario misspecified");
  REQUIRE(replay.code == 0);
  CHECK(replay.json().at("replay_identical") == true);
  CHECK(replay.json().at("replay").size() == 2);
}

TEST_CASE("usage errors exit non-zero") {
  testutil::TempDir dir("cli");
  CHECK(mipd_cli(dir, "").code != 0);
  CHECK(mipd_cli(dir, "frobnicate").code != 0);
  CHECK(mipd_cli(dir, "train --model svm --train x.csv --out m.json").code != 0);
  testutil::write_file(dir / "bad.csv", "ID,Care_Date,x,delta_Hb\np1,2020-13-01,1,0\n");
  CHECK(mipd_cli(dir, "train --model cart --train bad.csv --out m.json").code != 0);
  CHECK(testutil::read_file(dir / "stderr.txt").find("invalid-date") != std::string::npos);
}
