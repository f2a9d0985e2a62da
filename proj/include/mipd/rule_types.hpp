#pragma once

#include <span>
#include <string>
#include <vector>

namespace mipd {

/// Local linear model `beta0 + beta1 . regressors` held by a tree leaf or rule.
/// Constant models (CART leaves) have an empty `beta1`.
struct NodeModel {
  double beta0 = 0.0;
  std::vector<double> beta1;

  double evaluate(std::span<const double> regressors) const {
    double v = beta0;
    for (std::size_t j = 0; j < beta1.size(); ++j) v += beta1[j] * regressors[j];
    return v;
  }

  friend bool operator==(const NodeModel&, const NodeModel&) = default;
};

enum class CompareOp { le, gt };

/// `feature <= threshold` or `feature > threshold`. A value equal to the
/// threshold satisfies `le`, matching tree routing.
struct Condition {
  std::string feature;
  CompareOp op = CompareOp::le;
  double threshold = 0.0;

  bool satisfied_by(double value) const {
    return op == CompareOp::le ? value <= threshold : value > threshold;
  }

  friend bool operator==(const Condition&, const Condition&) = default;
};

enum class Provenance { learned, edited };

struct Rule {
  int id = 0;
  std::vector<Condition> conditions;  // conjunction; empty for the root rule
  NodeModel model;
  long support = 0;
  Provenance provenance = Provenance::learned;

  friend bool operator==(const Rule&, const Rule&) = default;
};

struct RuleSet {
  std::vector<Rule> rules;
  int version = 0;
  std::vector<std::string> regressors;

  const Rule* find(int id) const {
    for (const auto& r : rules)
      if (r.id == id) return &r;
    return nullptr;
  }

  friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

}  // namespace mipd
