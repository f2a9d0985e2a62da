// mipd: operator CLI for data generation, model fitting, rules, agreement and
// the expert loop.

#include <atomic>
#include <condition_variable>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "mipd/agreement.hpp"
#include "mipd/config.hpp"
#include "mipd/error.hpp"
#include "mipd/loop.hpp"
#include "mipd/model_io.hpp"
#include "mipd/rules.hpp"
#include "mipd/service.hpp"

namespace fs = std::filesystem;
using namespace mipd;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  bool seed_given = false;
  std::string config_path;
  bool json = false;
};

Config load(const Globals& g) {
  Config c = g.config_path.empty() ? Config{} : load_config(g.config_path);
  if (g.seed_given) {
    c.loop.seed = g.seed;
    c.forest.seed = g.seed;
    c.bagging.seed = g.seed;
  }
  return c;
}

void emit(const Globals& g, const Json& j, const std::string& text) {
  if (g.json)
    std::cout << j.dump(2) << '\n';
  else
    std::cout << text;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct Data {
  Dataset train;
  Dataset test;
  std::optional<SyntheticTruth> truth;
};

/// From <dir>/{train,test}.csv (+ truth.json when present), otherwise
/// generated from the scenario config.
Data load_data(const Config& c, const std::string& dir, std::uint64_t seed) {
  if (dir.empty()) {
    Scenario s = make_scenario(c.scenario, seed);
    return {std::move(s.train), std::move(s.test), std::move(s.truth)};
  }
  Data d{load_csv(fs::path(dir) / "train.csv", c.target), load_csv(fs::path(dir) / "test.csv", c.target), {}};
  if (fs::exists(fs::path(dir) / "truth.json"))
    d.truth = synthetic_truth_from_json(read_json_file(fs::path(dir) / "truth.json"));
  return d;
}

GlmmTreeFormula formula_for(const Config& c, const Dataset& d) {
  GlmmTreeFormula f = c.loop.formula;
  if (f.partitioners.empty()) {
    for (const auto& name : d.schema())
      if (std::find(f.regressors.begin(), f.regressors.end(), name) == f.regressors.end())
        f.partitioners.push_back(name);
  }
  return f;
}

RuleSet rules_of(const AnyModel& m) {
  if (const auto* g = std::get_if<GlmmTreeFit>(&m)) return extract_rules(*g);
  if (const auto* t = std::get_if<RegressionTree>(&m)) return extract_rules(*t);
  throw Error(Errc::invalid_argument, "model kind '" + std::string(model_kind(m)) + "' has no single rule set");
}

std::string rules_text(const RuleSet& rs) {
  std::string out;
  for (const auto& r : rs.rules) out += "RULE #" + std::to_string(r.id) + ":\n" + to_text(r, rs.regressors) + "\n\n";
  return out;
}

Json agreement_json(const GateResult& g) {
  const auto& a = g.agreement;
  return Json{{"alpha", a.alpha.alpha},
              {"degenerate", a.alpha.degenerate},
              {"ci", Json::array({a.ci.low, a.ci.high})},
              {"level", a.ci.level},
              {"threshold", g.threshold},
              {"pass", g.pass},
              {"n_units", a.n_units},
              {"n_raters", a.n_raters},
              {"n_pairable", a.alpha.n_pairable}};
}

Json history_json(const LoopState& s) {
  Json h = Json::array();
  for (const auto& m : s.history) h.push_back(to_json(m));
  return h;
}

std::string history_text(const LoopState& s) {
  std::string out = "version  train_mae  test_mae  test_rmse  n_advice  alpha\n";
  for (const auto& m : s.history)
    out += std::to_string(m.version) + "        " + fmt(m.train.mae) + "     " + fmt(m.test.mae) + "    " +
           fmt(m.test.rmse) + "     " + std::to_string(m.n_advice) + "      " + (m.alpha ? fmt(*m.alpha) : "-") +
           "\n";
  return out;
}

/// Latest stored version under `root`, or a fresh fit saved as v0.
LoopState resume_or_initialize(const fs::path& root, const Data& d, const LoopConfig& config) {
  const auto versions = snapshot_versions(root);
  if (!versions.empty()) return load_snapshot(root / ("v" + std::to_string(versions.back())));
  LoopState s = initialize(d.train, d.test, config);
  save_snapshot(s, root);
  return s;
}

std::atomic<bool> g_interrupted{false};
extern "C" void on_signal(int) { g_interrupted = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-effects rule learning with expert feedback"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_flag("--json", g.json, "Machine-readable JSON on stdout");

  std::function<int()> action;

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Write train.csv, test.csv and truth.json");
  std::string gen_out, gen_truth;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--truth", gen_truth, "three-leaf, two-leaf, grid or misspecified");
  gen->callback([&] {
    action = [&] {
      Config c = load(g);
      if (!gen_truth.empty()) c.scenario.truth = gen_truth;
      const Scenario s = make_scenario(c.scenario, g.seed);
      fs::create_directories(gen_out);
      const fs::path dir(gen_out);
      write_csv(s.train, dir / "train.csv", c.target);
      write_csv(s.test, dir / "test.csv", c.target);
      write_json_file(dir / "truth.json", to_json(s.truth));
      emit(g,
           Json{{"train", (dir / "train.csv").string()},
                {"test", (dir / "test.csv").string()},
                {"truth", (dir / "truth.json").string()},
                {"scenario", c.scenario.truth},
                {"n_patients", s.train.n_patients()},
                {"n_train", s.train.n_records()},
                {"n_test", s.test.n_records()}},
           "wrote " + std::to_string(s.train.n_records()) + " train and " + std::to_string(s.test.n_records()) +
               " test visits to " + gen_out + "\n");
      return 0;
    };
  });

  // train
  auto* train = app.add_subcommand("train", "Fit a model on a visits CSV");
  std::string model_kind_name = "glmmtree", train_csv, model_out;
  train->add_option("--model", model_kind_name, "Model kind")
      ->check(CLI::IsMember({"cart", "forest", "lmm", "glmmtree", "bagged-glmmtree"}));
  train->add_option("--train", train_csv, "Training CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--out", model_out, "Model JSON to write")->required();
  train->callback([&] {
    action = [&] {
      const Config c = load(g);
      const Dataset d = load_csv(train_csv, c.target).labeled();
      if (d.empty()) throw Error(Errc::empty_input, "no labelled rows in " + train_csv);
      const FeatureTable X = d.features();
      const Eigen::VectorXd y = d.targets(), w = d.weights();
      AnyModel m;
      if (model_kind_name == "cart") {
        m = fit_cart(X, y, w, c.cart);
      } else if (model_kind_name == "forest") {
        m = fit_forest(X, y, w, c.forest, c.threads);
      } else if (model_kind_name == "lmm") {
        const auto clusters = d.clusters();
        m = forward_select(X, y, clusters).fit;
      } else if (model_kind_name == "glmmtree") {
        m = fit_glmm_tree(d, formula_for(c, d), c.glmmtree);
      } else {
        BaggingParams b = c.bagging;
        b.threads = std::max(b.threads, c.threads);
        m = fit_bagged_glmm_tree(d, formula_for(c, d), c.glmmtree, b);
      }
      write_json_file(model_out, to_json(m));
      const Eigen::VectorXd pred = predict(m, d);
      const EvalMetrics fit = evaluate(pred, y, "train");
      emit(g, Json{{"model", model_kind_name}, {"out", model_out}, {"train", to_json(fit)}},
           model_kind_name + " written to " + model_out + " (train MAE " + fmt(fit.mae) + ", RMSE " + fmt(fit.rmse) +
               ")\n");
      return 0;
    };
  });

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "MAE and RMSE of a saved model on a CSV");
  std::string eval_model, eval_csv;
  eval->add_option("--model", eval_model, "Model JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_csv, "Visits CSV")->required()->check(CLI::ExistingFile);
  eval->callback([&] {
    action = [&] {
      const Config c = load(g);
      const AnyModel m = any_model_from_json(read_json_file(eval_model));
      const Dataset d = load_csv(eval_csv, c.target).labeled();
      const EvalMetrics r = evaluate(predict(m, d), d.targets(), fs::path(eval_csv).stem().string());
      emit(g, to_json(r), "MAE " + fmt(r.mae) + "  RMSE " + fmt(r.rmse) + "  n " + std::to_string(r.n) + "\n");
      return 0;
    };
  });

  // rules
  auto* rules = app.add_subcommand("rules", "Export, edit or validate rule sets");
  rules->require_subcommand(1);
  rules->fallthrough();

  auto* rexport = rules->add_subcommand("export", "Rules of a saved tree model");
  std::string rexport_model, rexport_out;
  rexport->add_option("--model", rexport_model, "Model JSON (cart or glmmtree)")->required()->check(CLI::ExistingFile);
  rexport->add_option("--out", rexport_out, "RuleSet JSON to write");
  rexport->callback([&] {
    action = [&] {
      const RuleSet rs = rules_of(any_model_from_json(read_json_file(rexport_model)));
      if (!rexport_out.empty()) write_json_file(rexport_out, to_json(rs));
      emit(g, to_json(rs), rules_text(rs));
      return 0;
    };
  });

  auto* redit = rules->add_subcommand("edit", "Apply a RuleEdit and report the result");
  std::string redit_rules, redit_edit, redit_data, redit_out;
  std::size_t redit_samples = 10000;
  redit->add_option("--rules", redit_rules, "RuleSet JSON")->required()->check(CLI::ExistingFile);
  redit->add_option("--edit", redit_edit, "RuleEdit JSON")->required()->check(CLI::ExistingFile);
  redit->add_option("--data", redit_data, "Visits CSV giving the schema and validation box")
      ->check(CLI::ExistingFile);
  redit->add_option("--samples", redit_samples, "Validation sample size");
  redit->add_option("--out", redit_out, "Edited RuleSet JSON to write");
  redit->callback([&] {
    action = [&] {
      const Config c = load(g);
      const RuleSet rs = rule_set_from_json(read_json_file(redit_rules));
      const RuleEdit e = rule_edit_from_json(read_json_file(redit_edit));
      std::optional<Dataset> d;
      std::optional<FeatureTable> sample;
      if (!redit_data.empty()) {
        d = load_csv(redit_data, c.target);
        sample = sample_domain(observed_ranges(*d), redit_samples, g.seed);
      }
      const EditResult r = apply_edit(rs, e, d ? d->schema() : std::vector<std::string>{}, sample ? &*sample : nullptr);
      if (!redit_out.empty()) write_json_file(redit_out, to_json(r.rules));
      const Rule& edited = *r.rules.find(e.rule_id);
      emit(g, Json{{"rules", to_json(r.rules)}, {"rule", to_json(edited)}, {"report", to_json(r.report)}},
           "RULE #" + std::to_string(edited.id) + ":\n" + to_text(edited, r.rules.regressors) + "\n");
      return 0;
    };
  });

  auto* rvalidate = rules->add_subcommand("validate", "Overlaps, gaps and unsatisfiable rules");
  std::string rval_rules, rval_data;
  std::size_t rval_samples = 10000;
  rvalidate->add_option("--rules", rval_rules, "RuleSet JSON")->required()->check(CLI::ExistingFile);
  rvalidate->add_option("--data", rval_data, "Visits CSV whose feature box is sampled")
      ->required()
      ->check(CLI::ExistingFile);
  rvalidate->add_option("--samples", rval_samples, "Sample size");
  rvalidate->callback([&] {
    action = [&] {
      const Config c = load(g);
      const RuleSet rs = rule_set_from_json(read_json_file(rval_rules));
      const Dataset d = load_csv(rval_data, c.target);
      const ValidationReport r = validate(rs, sample_domain(observed_ranges(d), rval_samples, g.seed));
      Json j = to_json(r);
      j["ok"] = r.ok();
      emit(g, j,
           r.ok() ? "ok\n"
                  : std::to_string(r.overlaps.size()) + " overlapping pairs, " + std::to_string(r.gaps.size()) +
                        " uncovered points, " + std::to_string(r.unsatisfiable.size()) + " unsatisfiable rules\n");
      return r.ok() ? 0 : 2;
    };
  });

  // agreement
  auto* agree = app.add_subcommand("agreement", "Inter-rater reliability");
  agree->require_subcommand(1);
  agree->fallthrough();
  auto* acompute = agree->add_subcommand("compute", "Krippendorff's alpha (interval) with a bootstrap interval");
  std::string ratings_csv, intra_rater;
  std::optional<double> a_threshold, a_level;
  std::optional<int> a_replicates;
  acompute->add_option("--ratings", ratings_csv, "CSV with unit_id, rater_id, value[, occasion]")
      ->required()
      ->check(CLI::ExistingFile);
  acompute->add_option("--threshold", a_threshold, "Gate threshold");
  acompute->add_option("--replicates", a_replicates, "Bootstrap replicates");
  acompute->add_option("--level", a_level, "Interval level");
  acompute->add_option("--intra", intra_rater, "Repeat-occasion agreement of one rater");
  acompute->callback([&] {
    action = [&] {
      const Config c = load(g);
      const auto ratings = load_ratings_csv(ratings_csv);
      const RatingsMatrix m = intra_rater.empty() ? ratings_matrix(ratings) : intra_rater_matrix(ratings, intra_rater);
      const GateResult r =
          reliability_gate(m, a_threshold.value_or(c.loop.gate.threshold), a_replicates.value_or(c.loop.gate.replicates),
                           a_level.value_or(c.loop.gate.level), g.seed, c.threads);
      emit(g, agreement_json(r),
           "alpha " + fmt(r.agreement.alpha.alpha) + "  CI [" + fmt(r.agreement.ci.low) + ", " +
               fmt(r.agreement.ci.high) + "]  " + (r.pass ? "PASS" : "FAIL") + "\n");
      return 0;
    };
  });

  // loop
  auto* loop = app.add_subcommand("loop", "Run or replay the expert loop");
  loop->require_subcommand(1);
  loop->fallthrough();
  auto* lrun = loop->add_subcommand("run", "Iterate with an oracle panel or through the HTTP service");
  std::string expert = "oracle", loop_data, loop_scenario, loop_snapshots;
  int iterations = 3;
  bool loop_replay = false;
  std::optional<int> loop_port;
  lrun->add_option("--expert", expert, "oracle or server")->check(CLI::IsMember({"oracle", "server"}));
  lrun->add_option("--iterations", iterations, "Accepted iterations to run")->check(CLI::PositiveNumber);
  lrun->add_option("--data", loop_data, "Directory with train.csv, test.csv and truth.json");
  lrun->add_option("--scenario", loop_scenario, "Generated scenario when --data is absent");
  lrun->add_option("--snapshots", loop_snapshots, "Snapshot root");
  lrun->add_option("--port", loop_port, "Port for --expert server (0 = any)");
  lrun->add_flag("--replay", loop_replay, "Re-run every stored step and compare snapshots");

  auto* lreplay = loop->add_subcommand("replay", "Re-run stored iterations and compare snapshots");
  std::string replay_root, replay_data, replay_scenario;
  lreplay->add_option("--snapshots", replay_root, "Snapshot root")->required()->check(CLI::ExistingDirectory);
  lreplay->add_option("--data", replay_data, "Directory with train.csv and test.csv");
  lreplay->add_option("--scenario", replay_scenario, "Generated scenario when --data is absent");

  auto replay_report = [&](const fs::path& root, const Data& d, Json& out, std::string& text) {
    const auto checks = replay_snapshots(root, d.train, d.test);
    Json arr = Json::array();
    bool all = true;
    for (const auto& ch : checks) {
      arr.push_back(Json{{"from", ch.from_version}, {"to", ch.to_version}, {"identical", ch.identical},
                         {"differing", ch.differing}});
      all = all && ch.identical;
      text += "replay v" + std::to_string(ch.from_version) + " -> v" + std::to_string(ch.to_version) + ": " +
              (ch.identical ? "identical" : "DIFFERS") + "\n";
    }
    out["replay"] = std::move(arr);
    out["replay_identical"] = all;
    return all;
  };

  lrun->callback([&] {
    action = [&] {
      Config c = load(g);
      if (!loop_scenario.empty()) c.scenario.truth = loop_scenario;
      const Data d = load_data(c, loop_data, g.seed);
      const std::optional<fs::path> root =
          loop_snapshots.empty() ? std::optional<fs::path>{} : std::optional<fs::path>{loop_snapshots};

      if (expert == "oracle") {
        if (!d.truth) throw Error(Errc::invalid_argument, "the oracle expert needs truth.json next to the data");
        LoopState s = root ? resume_or_initialize(*root, d, c.loop) : initialize(d.train, d.test, c.loop);
        int accepted = 0;
        for (int i = 0; i < iterations; ++i) {
          const AdvicePool batch = oracle_round(s, *d.truth, d.train, c.oracle);
          IterateOutcome o = iterate(s, batch, d.train, d.test);
          s = std::move(o.state);
          if (!g.json) std::cerr << s.log.back() << '\n';
          if (!o.accepted) continue;
          ++accepted;
          if (root) save_snapshot(s, *root);
        }
        Json out{{"expert", expert}, {"accepted", accepted}, {"version", s.version}, {"history", history_json(s)}};
        std::string text = history_text(s);
        bool ok = true;
        if (loop_replay) {
          if (!root) throw Error(Errc::invalid_argument, "--replay needs --snapshots");
          ok = replay_report(*root, d, out, text);
        }
        emit(g, out, text);
        return ok ? 0 : 4;
      }

      // Server: human raters drive the loop over HTTP until enough iterates land.
      const fs::path snap = root.value_or(c.api.snapshot_dir);
      LoopState s = resume_or_initialize(snap, d, c.loop);
      ServiceOptions opts;
      opts.token = c.api.token;
      opts.snapshot_dir = snap;
      opts.dose_grid = c.api.dose_grid;
      opts.level_feature = c.api.level_feature;
      opts.seed = g.seed;
      Service service(std::move(s), d.train, d.test, opts);
      std::mutex mu;
      std::condition_variable cv;
      int accepted = 0;
      service.on_iterate([&](int) {
        std::lock_guard lock(mu);
        ++accepted;
        cv.notify_all();
      });
      HttpServer server(service);
      const int port = server.bind(c.api.host, loop_port.value_or(c.api.port));
      std::cerr << "listening on " << c.api.host << ':' << port << '\n';
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread worker([&] { server.run(); });
      {
        std::unique_lock lock(mu);
        while (accepted < iterations && !g_interrupted)
          cv.wait_for(lock, std::chrono::milliseconds(200));
      }
      server.stop();
      worker.join();
      const LoopState final_state = service.state();
      emit(g, Json{{"expert", expert}, {"accepted", accepted}, {"version", final_state.version},
                   {"history", history_json(final_state)}},
           history_text(final_state));
      return accepted >= iterations ? 0 : 130;
    };
  });

  lreplay->callback([&] {
    action = [&] {
      Config c = load(g);
      if (!replay_scenario.empty()) c.scenario.truth = replay_scenario;
      const Data d = load_data(c, replay_data, g.seed);
      Json out = Json::object();
      std::string text;
      const bool ok = replay_report(replay_root, d, out, text);
      emit(g, out, text);
      return ok ? 0 : 4;
    };
  });

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the /api/v1 endpoints");
  std::string serve_data, serve_snapshots, serve_host, serve_token;
  std::optional<int> serve_port;
  serve->add_option("--data", serve_data, "Directory with train.csv and test.csv");
  serve->add_option("--snapshots", serve_snapshots, "Snapshot root");
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--port", serve_port, "Port (0 = any)");
  serve->add_option("--token", serve_token, "Static bearer token");
  serve->callback([&] {
    action = [&] {
      Config c = load(g);
      if (!serve_host.empty()) c.api.host = serve_host;
      if (!serve_token.empty()) c.api.token = serve_token;
      if (!serve_snapshots.empty()) c.api.snapshot_dir = serve_snapshots;
      Data d;
      if (!serve_data.empty()) {
        d = load_data(c, serve_data, g.seed);
      } else if (!c.api.train_csv.empty()) {
        d = {load_csv(c.api.train_csv, c.target), load_csv(c.api.test_csv, c.target), {}};
      } else {
        d = load_data(c, "", g.seed);
      }
      ServiceOptions opts;
      opts.token = c.api.token;
      opts.snapshot_dir = c.api.snapshot_dir;
      opts.dose_grid = c.api.dose_grid;
      opts.level_feature = c.api.level_feature;
      opts.seed = g.seed;
      Service service(resume_or_initialize(c.api.snapshot_dir, d, c.loop), d.train, d.test, opts);
      HttpServer server(service);
      const int port = server.bind(c.api.host, serve_port.value_or(c.api.port));
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread worker([&] { server.run(); });
      server.wait_until_ready();
      if (g.json)
        std::cout << Json{{"host", c.api.host}, {"port", port}, {"model_version", service.version()}}.dump() << std::endl;
      else
        std::cout << "listening on " << c.api.host << ':' << port << " (model v" << service.version() << ")"
                  << std::endl;
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      worker.join();
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  g.seed_given = seed_opt->count() > 0;
  try {
    return action ? action() : 0;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
