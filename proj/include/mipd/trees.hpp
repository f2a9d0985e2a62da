#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mipd/random.hpp"
#include "mipd/table.hpp"

namespace mipd {

struct TreeParams {
  int min_node_size = 20;  // minimum rows in each child
  int max_depth = 10;
  double cp = 0.001;       // minimum split gain relative to the root SSE
  int mtry = 0;            // features tried per split; 0 = all

  friend bool operator==(const TreeParams&, const TreeParams&) = default;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  bool missing_left = true;  // child holding more training rows
  double value = 0.0;        // weighted mean of training targets reaching the node
  std::size_t n = 0;
  double weight = 0.0;

  bool is_leaf() const { return feature < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

/// Binary regression tree; nodes[0] is the root. Rows with x <= threshold go
/// left, missing values follow `missing_left`.
struct RegressionTree {
  std::vector<std::string> feature_names;
  std::vector<TreeNode> nodes;
  TreeParams params;

  std::size_t n_leaves() const;
  /// Node index of the leaf reached by `row` (values in feature_names order).
  int leaf_of(std::span<const double> row) const;

  friend bool operator==(const RegressionTree&, const RegressionTree&) = default;
};

/// Greedy CART growth on weighted SSE. Split candidates are midpoints of
/// consecutive distinct values; ties go to the lower feature index, then the
/// lower threshold. `rng` is only consulted when params.mtry < p.
RegressionTree fit_cart(const FeatureTable& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                        const TreeParams& params, Rng* rng = nullptr);

/// Columns of X are matched to the tree's features by name.
Eigen::VectorXd predict_tree(const RegressionTree& tree, const FeatureTable& X);
std::vector<int> leaf_assignments(const RegressionTree& tree, const FeatureTable& X);

struct ForestParams {
  int n_trees = 500;
  int mtry = 0;  // 0 = max(1, p / 3)
  int min_node_size = 5;
  int max_depth = 20;
  double cp = 0.0;
  bool bootstrap = true;
  std::uint64_t seed = 1;
};

struct Forest {
  std::vector<RegressionTree> trees;
  ForestParams params;
};

/// Member i is grown from Rng(member_seed(seed, i)); results do not depend on
/// `threads`.
Forest fit_forest(const FeatureTable& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                  const ForestParams& params, int threads = 1);
Forest fit_forest(const FeatureTable& X, const Eigen::VectorXd& y, const ForestParams& params,
                  int threads = 1);

Eigen::VectorXd predict_forest(const Forest& forest, const FeatureTable& X);

/// Runs body(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

}  // namespace mipd
