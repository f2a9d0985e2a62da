#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mipd/dataset.hpp"
#include "mipd/lmm.hpp"
#include "mipd/rule_types.hpp"
#include "mipd/table.hpp"

namespace mipd {

/// Which columns enter the leaf models and which may be split on.
struct GlmmTreeFormula {
  std::vector<std::string> regressors{"EPO_DOSE"};
  std::vector<std::string> partitioners;
};

/// Regressors = {dose}; partitioners = every other schema feature.
GlmmTreeFormula default_formula(const std::vector<std::string>& schema,
                                const std::string& dose = "EPO_DOSE");

struct GlmmTreeParams {
  int min_node_size = 50;  // minimum rows per child
  int max_depth = 6;
  double alpha = 0.05;     // split test level before the Bonferroni correction
  int max_iter = 10;
  Criterion criterion = Criterion::reml;
  /// Starting random intercepts (zero for clusters not listed).
  std::map<std::string, double> initial_offsets;
};

struct ModelTreeNode {
  int feature = -1;  // index into partitioners; -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  bool missing_left = true;
  NodeModel model;
  std::size_t n = 0;
  double weight = 0.0;
  double p_value = 1.0;  // adjusted p-value of the best split examined here

  bool is_leaf() const { return feature < 0; }
  friend bool operator==(const ModelTreeNode&, const ModelTreeNode&) = default;
};

/// Partitioning tree whose leaves carry linear models in the regressors.
struct ModelTree {
  std::vector<std::string> partitioners;
  std::vector<std::string> regressors;
  std::vector<ModelTreeNode> nodes;

  std::size_t n_leaves() const;
  std::vector<int> leaf_ids() const;  // preorder
  int leaf_of(std::span<const double> partition_values) const;
  /// Preorder listing of split features and thresholds; equal signatures
  /// mean equal structure.
  std::string signature() const;

  friend bool operator==(const ModelTree&, const ModelTree&) = default;
};

/// One alternation step: structure grown on the adjusted response and the
/// mixed-model log-likelihood refit on it.
struct IterationRecord {
  std::string signature;
  double loglik = 0.0;
  std::size_t n_leaves = 0;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct GlmmTreeFit {
  ModelTree tree;
  double sigma2 = 1.0;
  double sigma_b2 = 0.0;
  double theta = 0.0;
  std::map<std::string, double> b_hat;
  std::vector<IterationRecord> trace;
  bool converged = false;
  int n_iterations = 0;
  bool loglik_monotone = true;  // monitored, not enforced
};

/// Model-based recursive partitioning of `y` on `partitioners` with local
/// weighted least-squares models on (1, regressors). The best split by SSE
/// reduction is kept when its F-test p-value, Bonferroni-multiplied by the
/// number of admissible (partitioner, threshold) candidates examined at the
/// node, is below params.alpha.
ModelTree grow_model_tree(const FeatureTable& partitioners, const FeatureTable& regressors,
                          const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                          const GlmmTreeParams& params);

/// Alternates between growing the tree on y - b_hat and refitting a random
/// intercept mixed model with leaf-specific fixed effects, until two
/// successive trees have the same structure or max_iter is reached.
GlmmTreeFit fit_glmm_tree(const FeatureTable& partitioners, const FeatureTable& regressors,
                          const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                          std::span<const std::string> clusters, const GlmmTreeParams& params);

/// Fits on the labelled rows of `d`, clustering by patient.
GlmmTreeFit fit_glmm_tree(const Dataset& d, const GlmmTreeFormula& formula, const GlmmTreeParams& params);

/// `rows` must contain every partitioner and regressor column (by name).
Eigen::VectorXd predict_glmm_tree(const GlmmTreeFit& fit, const FeatureTable& rows,
                                  std::span<const std::string> clusters, PredictMode mode);
std::vector<int> leaf_assignments(const GlmmTreeFit& fit, const FeatureTable& rows);

struct BaggingParams {
  int n_trees = 100;
  bool resample = true;  // patient-level bootstrap
  std::uint64_t seed = 1;
  int threads = 1;
};

struct BaggedGlmmTree {
  std::vector<GlmmTreeFit> members;
};

/// Member i resamples patients with Rng(member_seed(seed, i)); duplicated
/// patients become distinct clusters during fitting. Each member then
/// re-estimates the intercept of every patient in `d`, in or out of its
/// resample, from that patient's original rows, so conditional predictions do
/// not fall back to the marginal for out-of-bag patients.
BaggedGlmmTree fit_bagged_glmm_tree(const Dataset& d, const GlmmTreeFormula& formula,
                                    const GlmmTreeParams& params, const BaggingParams& bagging);

Eigen::VectorXd predict_bagged(const BaggedGlmmTree& ensemble, const FeatureTable& rows,
                               std::span<const std::string> clusters, PredictMode mode);

struct DosePoint {
  double dose = 0.0;
  double delta_hb = 0.0;
  double projected_hb = 0.0;

  friend bool operator==(const DosePoint&, const DosePoint&) = default;
};

/// What-if curve for one visit: the first regressor is replaced by each grid
/// dose and the conditional prediction is added to `current_hb`.
std::vector<DosePoint> dose_response(const GlmmTreeFit& fit, const FeatureTable& row,
                                     const std::string& cluster, std::span<const double> grid,
                                     double current_hb);

/// As above, reading the current level from column `level_feature` of `row`.
std::vector<DosePoint> dose_response(const GlmmTreeFit& fit, const FeatureTable& row,
                                     const std::string& cluster, std::span<const double> grid,
                                     const std::string& level_feature = "Hb");

}  // namespace mipd
