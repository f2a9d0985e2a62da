#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mipd/agreement.hpp"
#include "mipd/dataset.hpp"
#include "mipd/glmmtree.hpp"
#include "mipd/random.hpp"
#include "mipd/rules.hpp"

namespace mipd {

// ---------------------------------------------------------------------------
// Metrics

struct EvalMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t n = 0;
  std::string split;

  friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

/// Throws empty_input for no rows, invalid_argument for unequal lengths.
EvalMetrics evaluate(std::span<const double> predictions, std::span<const double> truths,
                     const std::string& split = "");
/// Weighted means of |e| and e^2.
EvalMetrics evaluate(std::span<const double> predictions, std::span<const double> truths,
                     std::span<const double> weights, const std::string& split = "");
EvalMetrics evaluate(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truths,
                     const std::string& split = "");

// ---------------------------------------------------------------------------
// Advice

enum class AdviceKind { dose_suggestion, target_correction, rule_edit_ref };

std::string_view to_string(AdviceKind k);
AdviceKind advice_kind_from_string(std::string_view s);

/// An expert's judgement on one displayed visit: the features and prediction
/// shown, the rule the visit fell in, and the suggested value.
struct AdviceRecord {
  std::string patient_id;
  Date care_date;
  std::map<std::string, double> x_snapshot;
  double y_hat = 0.0;
  int rule_id = 0;
  double advice = 0.0;
  AdviceKind kind = AdviceKind::target_correction;
  std::string rater_id;
  std::string timestamp;
  int edit_index = -1;  // rule_edit_ref: position in the pool's edit list

  friend bool operator==(const AdviceRecord&, const AdviceRecord&) = default;
};

struct AdvicePool {
  std::vector<AdviceRecord> records;
  std::vector<RuleEdit> edits;
  /// The edited rule each edit produced against the rules it was made on.
  /// Filled when an edit is accepted; an edit without one is resolved
  /// against the active rules at merge time.
  std::vector<Rule> edited_rules;

  bool empty() const { return records.empty() && edits.empty(); }
  friend bool operator==(const AdvicePool&, const AdvicePool&) = default;
};

/// Throws invalid_argument for non-finite numeric advice or dangling edit refs.
void check_advice(const AdvicePool& pool);

/// Ratings matrices (units = visits, raters = rater ids), one per numeric
/// advice kind present in the pool.
std::map<AdviceKind, RatingsMatrix> advice_ratings(const AdvicePool& pool);

struct GateOptions {
  double threshold = 0.667;
  int replicates = 1000;
  double level = 0.95;
  std::uint64_t seed = 1;
};

struct PoolGate {
  bool pass = true;
  std::map<AdviceKind, GateResult> results;
  std::string reason;
};

/// Each numeric advice kind must clear the threshold. Numeric advice with no
/// visit rated twice cannot be assessed and fails; edit-only pools pass.
PoolGate gate_pool(const AdvicePool& pool, const GateOptions& options);

// ---------------------------------------------------------------------------
// Merge

struct MergePolicy {
  double advice_weight = 1.0;
  int samples_per_rule = 50;
  bool rule_features = false;
  /// Residual SD for synthetic rows; negative means the current model's sigma.
  double synthetic_noise_sd = -1.0;
  std::string dose_feature = "EPO_DOSE";

  friend bool operator==(const MergePolicy&, const MergePolicy&) = default;
};

struct MergeContext {
  const RuleSet* active_rules = nullptr;  // needed for edits and rule features
  double noise_sd = 0.0;                  // used when policy.synthetic_noise_sd < 0
  std::uint64_t seed = 1;
  bool gate_passed = true;
};

struct MergeReport {
  std::size_t target_rows = 0;
  std::size_t dose_rows = 0;
  std::size_t synthetic_rows = 0;
  std::size_t display_only = 0;  // advice with no training row to attach to
};

struct MergeResult {
  Dataset data;
  MergeReport report;
};

/// Appends pseudo-observations to `train`; original rows are never changed.
///  - target corrections: one copy of the shown visit per visit, target = mean
///    advice across raters, weight = advice_weight;
///  - dose suggestions: copy with the dose replaced by the mean advised dose,
///    target kept; visits without an observed target are display-only;
///  - edits: samples_per_rule rows from sample_from_rule in the box spanned by
///    `train`, under patient id "edit-<k>";
///  - rule_features: one 0/1 column "rule_<id>" per active rule.
/// Throws gate_not_passed, infeasible_region, not_found.
MergeResult merge_advice(const Dataset& train, const AdvicePool& pool, const MergePolicy& policy,
                         const MergeContext& context);

/// Adds "rule_<id>" membership columns computed with encode().
Dataset append_rule_features(const Dataset& d, const RuleSet& rules);

/// Per-feature [min, max] over the finite values of `d`, in schema order.
std::vector<CovariateRange> observed_ranges(const Dataset& d);

// ---------------------------------------------------------------------------
// Loop state

struct LoopConfig {
  GlmmTreeFormula formula;
  GlmmTreeParams params;
  MergePolicy policy;
  GateOptions gate;
  std::uint64_t seed = 1;
  /// When true every refit uses `seed`; otherwise member_seed(seed, version).
  bool pin_refit_seed = false;
  bool bagged = false;
  BaggingParams bagging{25, true, 1, 1};
  int max_versions = 100;
};

struct VersionMetrics {
  int version = 0;
  EvalMetrics train;
  EvalMetrics test;
  /// Mean |y_hat - a| over target corrections in the pool; nullopt without any.
  std::optional<double> advice_loss;
  std::size_t n_advice = 0;
  std::size_t n_edits = 0;
  std::optional<double> alpha;  // lowest gate alpha of the accepted batch
  std::uint64_t refit_seed = 0;

  friend bool operator==(const VersionMetrics&, const VersionMetrics&) = default;
};

struct LoopState {
  int version = 0;
  GlmmTreeFit model;
  std::optional<BaggedGlmmTree> ensemble;
  RuleSet rules;
  /// Rules whose membership columns the model was fit on (rule_features).
  std::optional<RuleSet> feature_rules;
  AdvicePool pool;  // accepted advice, accumulated across versions
  std::vector<VersionMetrics> history;
  LoopConfig config;
  std::vector<std::string> log;
};

/// Version 0: fit on `train` alone.
LoopState initialize(const Dataset& train, const Dataset& test, const LoopConfig& config);

struct IterateOutcome {
  LoopState state;
  PoolGate gate;
  bool accepted = false;
};

/// Gate `batch`; on success merge the accumulated pool plus the batch into
/// `train`, refit, extract rules, evaluate and bump the version. A failed gate
/// returns the state unchanged except for a log line.
IterateOutcome iterate(const LoopState& state, const AdvicePool& batch, const Dataset& train,
                       const Dataset& test);

/// Predictions of the state's model (ensemble when present).
Eigen::VectorXd predict_state(const LoopState& state, const Dataset& d);

// ---------------------------------------------------------------------------
// Simulated expert

/// Target correction at `x` (schema order of `truth`): planted mean response
/// plus `intercept` plus N(0, noise_sd^2).
AdviceRecord oracle_expert(const SyntheticTruth& truth, std::span<const double> x, double y_hat,
                           int rule_id, double intercept = 0.0, double noise_sd = 0.0, Rng* rng = nullptr);

/// Moves each threshold of `shown` a fraction rho toward the nearest planted
/// threshold on the same feature; nullopt when nothing moves.
std::optional<RuleEdit> oracle_rule_edit(const SyntheticTruth& truth, const Rule& shown, double rho);

struct OracleOptions {
  int raters = 3;
  int visits_per_round = 1200;
  double noise_sd = 0.05;
  double rho = 0.0;  // > 0 adds threshold edits on every displayed rule
  std::uint64_t seed = 7;
};

/// A panel of simulated raters correcting the targets of training visits not
/// yet advised on. Visits are drawn with Rng(member_seed(seed, version)).
AdvicePool oracle_round(const LoopState& state, const SyntheticTruth& truth, const Dataset& train,
                        const OracleOptions& options);

// ---------------------------------------------------------------------------
// Serialization and snapshots

nlohmann::ordered_json to_json(const EvalMetrics& m);
nlohmann::ordered_json to_json(const AdviceRecord& r);
nlohmann::ordered_json to_json(const AdvicePool& p);
nlohmann::ordered_json to_json(const VersionMetrics& m);
nlohmann::ordered_json to_json(const LoopConfig& c);
nlohmann::ordered_json to_json(const MergePolicy& p);
nlohmann::ordered_json to_json(const GateOptions& g);
nlohmann::ordered_json to_json(const PoolGate& g);

EvalMetrics eval_metrics_from_json(const nlohmann::ordered_json& j);
AdviceRecord advice_record_from_json(const nlohmann::ordered_json& j);
AdvicePool advice_pool_from_json(const nlohmann::ordered_json& j);
VersionMetrics version_metrics_from_json(const nlohmann::ordered_json& j);
/// Starts from `defaults`; unknown keys throw invalid_argument.
LoopConfig loop_config_from_json(const nlohmann::ordered_json& j, LoopConfig defaults = {});
MergePolicy merge_policy_from_json(const nlohmann::ordered_json& j, MergePolicy defaults = {});
GateOptions gate_options_from_json(const nlohmann::ordered_json& j, GateOptions defaults = {});

/// File name -> contents of one snapshot directory.
std::map<std::string, nlohmann::ordered_json> snapshot_files(const LoopState& state);
/// Writes <root>/v<version>/{rules,variances,metrics,pool,config,model,log}.json.
std::filesystem::path save_snapshot(const LoopState& state, const std::filesystem::path& root);
LoopState load_snapshot(const std::filesystem::path& dir);
/// Versions present under `root`, ascending.
std::vector<int> snapshot_versions(const std::filesystem::path& root);

/// The batch that turned pool `before` into pool `after` (edit refs rebased).
AdvicePool pool_delta(const AdvicePool& before, const AdvicePool& after);

struct ReplayCheck {
  int from_version = 0;
  int to_version = 0;
  bool identical = true;
  std::vector<std::string> differing;  // snapshot files whose contents changed
};

/// Reloads each stored version, re-runs the iterate that produced the next
/// one and compares every snapshot file except the log byte for byte.
std::vector<ReplayCheck> replay_snapshots(const std::filesystem::path& root, const Dataset& train,
                                          const Dataset& test);

}  // namespace mipd
