#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mipd/table.hpp"

namespace mipd {

enum class Criterion { ml, reml };
enum class PredictMode { conditional, marginal };

/// Random-intercept linear mixed model
///   y = X beta + b[cluster] + e,  b ~ N(0, sigma_b2),  e ~ N(0, sigma2 / w).
struct LmmFit {
  std::vector<std::string> feature_names;
  Eigen::VectorXd beta;
  double sigma2 = 1.0;
  double sigma_b2 = 0.0;
  double theta = 0.0;  // sigma_b2 / sigma2
  double loglik = 0.0;
  Criterion criterion = Criterion::reml;
  std::map<std::string, double> b_hat;  // BLUPs for training clusters
  std::size_t n_obs = 0;

  bool single_cluster = false;  // fewer than two clusters: sigma_b2 pinned to 0
  bool boundary = false;        // optimum on theta's lower bound, truncated to 0
  bool exact_fit = false;       // zero residual: sigma2 held at the smallest positive double
};

/// Maximises the profiled (restricted) log-likelihood over
/// log theta in [log 1e-8, log 1e8] and returns the GLS/BLUP solution there.
LmmFit fit_lmm(const FeatureTable& X, const Eigen::VectorXd& y,
               std::span<const std::string> clusters, const Eigen::VectorXd& weights,
               Criterion criterion = Criterion::reml);

/// Unit-weight overload.
LmmFit fit_lmm(const FeatureTable& X, const Eigen::VectorXd& y,
               std::span<const std::string> clusters, Criterion criterion = Criterion::reml);

/// The profiled objective maximised by fit_lmm, at a fixed theta >= 0.
double profiled_loglik(const FeatureTable& X, const Eigen::VectorXd& y,
                       std::span<const std::string> clusters, const Eigen::VectorXd& weights,
                       Criterion criterion, double theta);

/// Conditional mode adds b_hat for clusters seen in training; unseen clusters
/// (and marginal mode) get X beta. Throws column_mismatch if X's columns
/// differ from the fit's feature names.
Eigen::VectorXd predict_lmm(const LmmFit& fit, const FeatureTable& X,
                            std::span<const std::string> clusters, PredictMode mode);

/// -2 loglik + (p + 2) log n; meaningful for ML fits.
double bic(const LmmFit& fit);

struct Selection {
  std::vector<std::string> selected;  // candidate names, in order of entry
  LmmFit fit;                         // REML fit on intercept + selected
  double bic = 0.0;                   // ML-based BIC of the selected model
};

inline constexpr const char* kInterceptName = "(Intercept)";

/// Greedy forward selection by BIC over the candidate columns. An intercept is
/// always included and is not a candidate.
Selection forward_select(const FeatureTable& candidates, const Eigen::VectorXd& y,
                         std::span<const std::string> clusters);

/// Prepends a `(Intercept)` column of ones.
FeatureTable with_intercept(const FeatureTable& X);

}  // namespace mipd
