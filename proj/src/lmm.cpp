#include "mipd/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_map>

#include "mipd/error.hpp"
#include "mipd/optimize.hpp"

namespace mipd {

namespace {

constexpr double kLogThetaLo = -18.420680743952367;  // log 1e-8
constexpr double kLogThetaHi = 18.420680743952367;   // log 1e8
constexpr double kLogThetaTol = 1e-8;

// Sufficient statistics for the random-intercept likelihood. With
// V0 = W^-1 + theta 11' per cluster, V0^-1 = W - kappa w w' where
// kappa = theta / (1 + theta W_c), so every theta-dependent quantity reduces
// to per-cluster sums.
struct Problem {
  const Eigen::MatrixXd* X = nullptr;
  const Eigen::VectorXd* y = nullptr;
  Eigen::VectorXd w;
  std::vector<int> cluster;                // per row
  std::vector<std::string> cluster_names;  // by index
  Eigen::VectorXd W;                       // per-cluster weight sums
  Eigen::MatrixXd SX;                      // p x K, per-cluster sum w x
  Eigen::VectorXd SY;                      // per-cluster sum w y
  Eigen::MatrixXd Sxx;                     // sum w x x'
  Eigen::VectorXd Sxy;                     // sum w x y
  double n_eff = 0.0;                      // rows with positive weight
  double sum_log_w = 0.0;
  Eigen::Index p = 0;
};

Problem make_problem(const FeatureTable& X, const Eigen::VectorXd& y,
                     std::span<const std::string> clusters, const Eigen::VectorXd& weights) {
  const auto n = static_cast<Eigen::Index>(y.size());
  if (X.values.rows() != n || static_cast<Eigen::Index>(clusters.size()) != n || weights.size() != n) {
    throw Error(Errc::invalid_argument, "fit_lmm: X, y, clusters and weights must have equal lengths");
  }
  if (X.cols() == 0) throw Error(Errc::invalid_argument, "fit_lmm: design has no columns");
  Problem pr;
  pr.X = &X.values;
  pr.y = &y;
  pr.w = weights;
  pr.p = X.values.cols();
  std::unordered_map<std::string, int> index;
  pr.cluster.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& name = clusters[static_cast<std::size_t>(i)];
    auto [it, inserted] = index.emplace(name, static_cast<int>(pr.cluster_names.size()));
    if (inserted) pr.cluster_names.push_back(name);
    pr.cluster[static_cast<std::size_t>(i)] = it->second;
    const double wi = weights(i);
    if (!(wi >= 0.0) || !std::isfinite(wi)) throw Error(Errc::invalid_argument, "fit_lmm: invalid weight");
    if (!std::isfinite(y(i)) || !X.values.row(i).allFinite()) {
      throw Error(Errc::invalid_argument, "fit_lmm: non-finite response or design value");
    }
    if (wi > 0.0) {
      pr.n_eff += 1.0;
      pr.sum_log_w += std::log(wi);
    }
  }
  const auto K = static_cast<Eigen::Index>(pr.cluster_names.size());
  pr.W = Eigen::VectorXd::Zero(K);
  pr.SX = Eigen::MatrixXd::Zero(pr.p, K);
  pr.SY = Eigen::VectorXd::Zero(K);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = pr.cluster[static_cast<std::size_t>(i)];
    pr.W(c) += pr.w(i);
    pr.SX.col(c) += pr.w(i) * X.values.row(i).transpose();
    pr.SY(c) += pr.w(i) * y(i);
  }
  pr.Sxx = X.values.transpose() * pr.w.asDiagonal() * X.values;
  pr.Sxy = X.values.transpose() * pr.w.cwiseProduct(y);

  if (pr.n_eff < static_cast<double>(pr.p) + 1.0) {
    throw Error(Errc::invalid_argument, "fit_lmm: need at least columns + 1 weighted rows");
  }
  Eigen::MatrixXd scaled = pr.w.cwiseSqrt().asDiagonal() * X.values;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  if (qr.rank() < pr.p) {
    throw Error(Errc::rank_deficient, "fit_lmm: design matrix is rank deficient (rank " +
                                          std::to_string(qr.rank()) + " < " + std::to_string(pr.p) + ")");
  }
  return pr;
}

struct Evaluation {
  double loglik = 0.0;
  double rss = 0.0;
  double sigma2 = 0.0;
  Eigen::VectorXd beta;
  Eigen::VectorXd residual;
  Eigen::VectorXd cluster_wr;  // per-cluster sum w r
};

Evaluation evaluate(const Problem& pr, Criterion criterion, double theta, bool allow_zero_rss = false) {
  const Eigen::VectorXd kappa = (theta / (1.0 + theta * pr.W.array())).matrix();
  Eigen::MatrixXd M = pr.Sxx - pr.SX * kappa.asDiagonal() * pr.SX.transpose();
  Eigen::VectorXd v = pr.Sxy - pr.SX * kappa.cwiseProduct(pr.SY);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
  Evaluation ev;
  ev.beta = ldlt.solve(v);
  ev.residual = *pr.y - *pr.X * ev.beta;
  ev.cluster_wr = Eigen::VectorXd::Zero(pr.W.size());
  for (Eigen::Index i = 0; i < ev.residual.size(); ++i) {
    ev.cluster_wr(pr.cluster[static_cast<std::size_t>(i)]) += pr.w(i) * ev.residual(i);
  }
  ev.rss = (pr.w.array() * ev.residual.array().square()).sum() -
           (kappa.array() * ev.cluster_wr.array().square()).sum();
  ev.rss = std::max(ev.rss, 0.0);

  const double n = pr.n_eff;
  const double p = static_cast<double>(pr.p);
  const double df = criterion == Criterion::ml ? n : n - p;
  ev.sigma2 = ev.rss / df;
  if (ev.sigma2 <= 0.0) {
    if (!allow_zero_rss) {
      ev.loglik = std::numeric_limits<double>::infinity();
      return ev;
    }
    ev.sigma2 = std::numeric_limits<double>::min();
  }
  double logdet_v = (1.0 + theta * pr.W.array()).log().sum() - pr.sum_log_w;
  double ll = df * std::log(2.0 * std::numbers::pi * ev.sigma2) + logdet_v + ev.rss / ev.sigma2;
  if (criterion == Criterion::reml) {
    ll += ldlt.vectorD().array().log().sum();
  }
  ev.loglik = -0.5 * ll;
  return ev;
}

LmmFit finish(const Problem& pr, const FeatureTable& X, Criterion criterion, double theta,
              const Evaluation& ev) {
  LmmFit fit;
  fit.feature_names = X.names;
  fit.beta = ev.beta;
  fit.criterion = criterion;
  fit.theta = theta;
  fit.sigma2 = ev.sigma2;
  fit.sigma_b2 = theta * ev.sigma2;
  fit.loglik = ev.loglik;
  fit.n_obs = static_cast<std::size_t>(pr.n_eff);
  for (Eigen::Index c = 0; c < pr.W.size(); ++c) {
    const double kappa = theta / (1.0 + theta * pr.W(c));
    fit.b_hat[pr.cluster_names[static_cast<std::size_t>(c)]] = kappa * ev.cluster_wr(c);
  }
  return fit;
}

}  // namespace

FeatureTable with_intercept(const FeatureTable& X) {
  FeatureTable out;
  out.names.push_back(kInterceptName);
  out.names.insert(out.names.end(), X.names.begin(), X.names.end());
  out.values.resize(X.values.rows(), X.values.cols() + 1);
  out.values.col(0).setOnes();
  out.values.rightCols(X.values.cols()) = X.values;
  return out;
}

double profiled_loglik(const FeatureTable& X, const Eigen::VectorXd& y,
                       std::span<const std::string> clusters, const Eigen::VectorXd& weights,
                       Criterion criterion, double theta) {
  if (!(theta >= 0.0)) throw Error(Errc::invalid_argument, "profiled_loglik: theta must be >= 0");
  Problem pr = make_problem(X, y, clusters, weights);
  return evaluate(pr, criterion, theta).loglik;
}

LmmFit fit_lmm(const FeatureTable& X, const Eigen::VectorXd& y, std::span<const std::string> clusters,
               Criterion criterion) {
  return fit_lmm(X, y, clusters, Eigen::VectorXd::Ones(y.size()), criterion);
}

LmmFit fit_lmm(const FeatureTable& X, const Eigen::VectorXd& y, std::span<const std::string> clusters,
               const Eigen::VectorXd& weights, Criterion criterion) {
  Problem pr = make_problem(X, y, clusters, weights);

  // Noise-free data: every theta gives zero residual and an unbounded likelihood.
  Evaluation ols = evaluate(pr, criterion, 0.0, true);
  const double scale = std::max((pr.w.array() * y.array().square()).sum(), 1e-300);
  if (ols.rss <= 1e-20 * scale) {
    LmmFit fit = finish(pr, X, criterion, 0.0, ols);
    fit.exact_fit = true;
    fit.boundary = true;
    fit.single_cluster = pr.W.size() < 2;
    return fit;
  }

  int positive_clusters = 0;
  for (Eigen::Index c = 0; c < pr.W.size(); ++c) positive_clusters += pr.W(c) > 0.0;
  if (positive_clusters < 2) {
    LmmFit fit = finish(pr, X, criterion, 0.0, ols);
    fit.single_cluster = true;
    return fit;
  }

  auto objective = [&](double log_theta) { return -evaluate(pr, criterion, std::exp(log_theta)).loglik; };

  // Half-decade grid to locate the basin, then Brent inside the neighbouring cells.
  constexpr int kGrid = 33;
  const double step = (kLogThetaHi - kLogThetaLo) / (kGrid - 1);
  int best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (int k = 0; k < kGrid; ++k) {
    const double value = objective(kLogThetaLo + k * step);
    if (value < best_value) {
      best_value = value;
      best = k;
    }
  }
  const double lo = kLogThetaLo + std::max(best - 1, 0) * step;
  const double hi = kLogThetaLo + std::min(best + 1, kGrid - 1) * step;
  auto [x, fx] = brent_minimize(objective, lo, hi, kLogThetaTol);
  double log_theta = kLogThetaLo + best * step;
  if (fx < best_value) {
    log_theta = x;
    best_value = fx;
  }
  double theta = std::exp(log_theta);
  bool boundary = false;
  if (log_theta - kLogThetaLo < 1e-6) {
    const double at_zero = -evaluate(pr, criterion, 0.0).loglik;
    if (at_zero <= best_value + 1e-9) {
      theta = 0.0;
      boundary = true;
    }
  }
  LmmFit fit = finish(pr, X, criterion, theta, evaluate(pr, criterion, theta));
  fit.boundary = boundary;
  return fit;
}

Eigen::VectorXd predict_lmm(const LmmFit& fit, const FeatureTable& X, std::span<const std::string> clusters,
                            PredictMode mode) {
  if (X.names != fit.feature_names) {
    throw Error(Errc::column_mismatch, "predict_lmm: design columns do not match the fitted features");
  }
  Eigen::VectorXd pred = X.values * fit.beta;
  if (mode == PredictMode::conditional) {
    if (clusters.size() != static_cast<std::size_t>(pred.size())) {
      throw Error(Errc::invalid_argument, "predict_lmm: one cluster id per row required");
    }
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      auto it = fit.b_hat.find(clusters[static_cast<std::size_t>(i)]);
      if (it != fit.b_hat.end()) pred(i) += it->second;
    }
  }
  return pred;
}

double bic(const LmmFit& fit) {
  const double k = static_cast<double>(fit.beta.size()) + 2.0;
  return -2.0 * fit.loglik + k * std::log(static_cast<double>(fit.n_obs));
}

Selection forward_select(const FeatureTable& candidates, const Eigen::VectorXd& y,
                         std::span<const std::string> clusters) {
  if (candidates.cols() == 0) throw Error(Errc::invalid_argument, "forward_select: no candidate features");
  const FeatureTable full = with_intercept(candidates);
  auto design = [&](const std::vector<std::string>& chosen) {
    std::vector<std::string> cols{kInterceptName};
    cols.insert(cols.end(), chosen.begin(), chosen.end());
    return full.select(cols);
  };

  std::vector<std::string> chosen;
  double current = bic(fit_lmm(design(chosen), y, clusters, Criterion::ml));
  for (;;) {
    double best = current;
    std::string best_name;
    for (const auto& name : candidates.names) {
      if (std::find(chosen.begin(), chosen.end(), name) != chosen.end()) continue;
      auto trial = chosen;
      trial.push_back(name);
      try {
        const double value = bic(fit_lmm(design(trial), y, clusters, Criterion::ml));
        if (value < best) {
          best = value;
          best_name = name;
        }
      } catch (const Error& e) {
        if (e.code() != Errc::rank_deficient) throw;
      }
    }
    if (best_name.empty()) break;
    chosen.push_back(best_name);
    current = best;
  }
  return Selection{chosen, fit_lmm(design(chosen), y, clusters, Criterion::reml), current};
}

}  // namespace mipd
