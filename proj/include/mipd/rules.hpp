#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mipd/dataset.hpp"
#include "mipd/glmmtree.hpp"
#include "mipd/rule_types.hpp"
#include "mipd/trees.hpp"

namespace mipd {

/// One rule per leaf, ids 1..L in preorder. Path conditions on the same
/// feature and direction are collapsed to the tightest one, kept at the
/// position of its first occurrence.
RuleSet extract_rules(const ModelTree& tree);
RuleSet extract_rules(const GlmmTreeFit& fit);
RuleSet extract_rules(const RegressionTree& tree);

/// Rows x rules 0/1 matrix. A row with a missing value in a feature some rule
/// tests is listed in `incomplete`; conditions on a missing value are unmet.
struct Membership {
  Eigen::MatrixXi matrix;
  std::vector<std::size_t> incomplete;

  friend bool operator==(const Membership&, const Membership&) = default;
};

/// Throws unknown_feature if a tested feature is not a column of `rows`.
Membership encode(const RuleSet& rs, const FeatureTable& rows);

bool satisfies(const Rule& rule, const FeatureTable& rows, std::size_t row);

// ---------------------------------------------------------------------------
// Edits

struct ModifyThreshold {
  std::string feature;
  double threshold = 0.0;
  /// Needed only when the rule tests `feature` in both directions.
  std::optional<CompareOp> op;
  friend bool operator==(const ModifyThreshold&, const ModifyThreshold&) = default;
};
struct AddCondition {
  Condition condition;
  friend bool operator==(const AddCondition&, const AddCondition&) = default;
};
struct RemoveCondition {
  std::string feature;
  CompareOp op = CompareOp::le;
  friend bool operator==(const RemoveCondition&, const RemoveCondition&) = default;
};
struct SetModel {
  NodeModel model;
  friend bool operator==(const SetModel&, const SetModel&) = default;
};

using EditOperation = std::variant<ModifyThreshold, AddCondition, RemoveCondition, SetModel>;

struct RuleEdit {
  int rule_id = 0;
  std::vector<EditOperation> operations;
  std::string author;
  std::string timestamp;

  friend bool operator==(const RuleEdit&, const RuleEdit&) = default;
};

struct ValidationReport {
  std::vector<std::pair<int, int>> overlaps;  // rule-id pairs sharing a sample point
  std::vector<std::size_t> gaps;              // sample rows matched by no rule
  std::vector<int> unsatisfiable;             // rule ids with an empty region

  bool ok() const { return overlaps.empty() && gaps.empty() && unsatisfiable.empty(); }
  friend bool operator==(const ValidationReport&, const ValidationReport&) = default;
};

/// True when the conjunction admits some point (ignoring any bounding box).
bool is_satisfiable(const Rule& rule);

/// Monte-Carlo check of the partition property on `sample`. Rows with missing
/// tested values are skipped.
ValidationReport validate(const RuleSet& rs, const FeatureTable& sample);

/// Uniform points in the box spanned by `ranges`, columns in range order.
FeatureTable sample_domain(std::span<const CovariateRange> ranges, std::size_t n, std::uint64_t seed);

struct EditResult {
  RuleSet rules;
  ValidationReport report;
};

/// Applies `e` to a copy of `rs`. Operations run in order; the touched rule is
/// marked edited unless the operation list is empty. `known_features` bounds
/// the features an edit may name (empty = no check). The report is computed on
/// `sample` when given.
/// Throws not_found, unknown_feature, invalid_argument or unsatisfiable_rule.
EditResult apply_edit(const RuleSet& rs, const RuleEdit& e,
                      std::span<const std::string> known_features = {},
                      const FeatureTable* sample = nullptr);

struct SampleOptions {
  std::string patient_id = "synthetic";
  Date start_date = Date::from_ymd(2000, 1, 1);
  double weight = 1.0;
};

/// Rejection-samples covariates uniformly from `ranges` until `n` points
/// satisfy `rule`; targets follow the rule's model plus N(0, noise_sd^2).
/// Feature vectors are in range order and records are tagged synthetic, one
/// day apart. Throws infeasible_region when the acceptance rate drops below 1e-4.
std::vector<VisitRecord> sample_from_rule(const Rule& rule, std::span<const std::string> regressors,
                                          std::span<const CovariateRange> ranges, std::size_t n,
                                          double noise_sd, std::uint64_t seed,
                                          const SampleOptions& options = {});

// ---------------------------------------------------------------------------
// Text and JSON

/// "IF a ≤ 1 ∧ b > 0 THEN ΔĤb = -0.33 + 0.22 * EPO_DOSE"; numbers use %.15g.
std::string to_text(const Rule& rule, std::span<const std::string> regressors,
                    const std::string& target = "ΔĤb");
/// Inverse of to_text for rules whose regressors are `regressors`.
Rule parse_rule_text(const std::string& text, std::span<const std::string> regressors, int id = 0);

nlohmann::ordered_json to_json(const Condition& c);
nlohmann::ordered_json to_json(const NodeModel& m);
nlohmann::ordered_json to_json(const Rule& r);
nlohmann::ordered_json to_json(const RuleSet& rs);
nlohmann::ordered_json to_json(const RuleEdit& e);
nlohmann::ordered_json to_json(const ValidationReport& report);

Condition condition_from_json(const nlohmann::ordered_json& j);
NodeModel node_model_from_json(const nlohmann::ordered_json& j);
Rule rule_from_json(const nlohmann::ordered_json& j);
RuleSet rule_set_from_json(const nlohmann::ordered_json& j);
RuleEdit rule_edit_from_json(const nlohmann::ordered_json& j);

std::string_view to_string(CompareOp op);
CompareOp compare_op_from_string(std::string_view s);
std::string_view to_string(Provenance p);

}  // namespace mipd
