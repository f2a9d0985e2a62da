#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "mipd/glmmtree.hpp"
#include "mipd/scenarios.hpp"

using namespace mipd;

namespace {

constexpr double kB0 = -0.3306171, kB1 = 0.2261024;

/// One-leaf fit carrying the given model, for prediction arithmetic.
GlmmTreeFit single_leaf(double b0, double b1) {
  GlmmTreeFit f;
  f.tree.regressors = {"EPO_DOSE"};
  ModelTreeNode leaf;
  leaf.model = {b0, {b1}};
  f.tree.nodes = {leaf};
  f.b_hat["known"] = 0.25;
  return f;
}

FeatureTable dose_row(double dose, double hb = 10.0) {
  FeatureTable t{{"EPO_DOSE", "Hb"}, Eigen::MatrixXd(1, 2)};
  t.values << dose, hb;
  return t;
}

GlmmTreeFormula z_formula() { return {{"EPO_DOSE"}, {"z1", "z2", "z3"}}; }

}  // namespace

TEST_CASE("predictions use the routed leaf model") {
  const GlmmTreeFit f = single_leaf(kB0, kB1);
  const std::vector<std::string> unseen{"new"}, known{"known"};
  CHECK(predict_glmm_tree(f, dose_row(4), unseen, PredictMode::marginal)[0] ==
        doctest::Approx(0.5737925).epsilon(1e-12));
  CHECK(predict_glmm_tree(f, dose_row(0), unseen, PredictMode::marginal)[0] == kB0);
  CHECK(predict_glmm_tree(f, dose_row(3), unseen, PredictMode::conditional)[0] ==
        predict_glmm_tree(f, dose_row(3), unseen, PredictMode::marginal)[0]);
  CHECK(predict_glmm_tree(f, dose_row(3), known, PredictMode::conditional)[0] ==
        doctest::Approx(kB0 + 3 * kB1 + 0.25).epsilon(1e-14));
}

TEST_CASE("dose response") {
  const GlmmTreeFit f = single_leaf(kB0, kB1);
  const std::vector<double> grid{0.0, 4.0};
  const auto pts = dose_response(f, dose_row(1.0, 10.0), "new", grid, 10.0);
  REQUIRE(pts.size() == 2);
  CHECK(std::abs(pts[0].projected_hb - 9.669) < 5e-4);
  CHECK(std::abs(pts[1].projected_hb - 10.574) < 5e-4);
  CHECK(pts[1].delta_hb == predict_glmm_tree(f, dose_row(4.0), std::vector<std::string>{"new"},
                                             PredictMode::conditional)[0]);

  // The level can come from the row itself.
  CHECK(dose_response(f, dose_row(1.0, 10.0), "new", grid, "Hb") == pts);

  const std::vector<double> one{2.5};
  const auto single = dose_response(f, dose_row(1.0), "known", one, 10.0);
  REQUIRE(single.size() == 1);
  CHECK(single[0].delta_hb ==
        predict_glmm_tree(f, dose_row(2.5), std::vector<std::string>{"known"}, PredictMode::conditional)[0]);

  // Affine in dose within one leaf.
  const std::vector<double> many{0, 1, 2, 3, 4, 6, 8};
  const auto curve = dose_response(f, dose_row(1.0), "known", many, 10.0);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const double slope = (curve[i].projected_hb - curve[0].projected_hb) / (curve[i].dose - curve[0].dose);
    CHECK(slope == doctest::Approx(kB1).epsilon(1e-12));
  }
}

TEST_CASE("single regime gives one leaf matching least squares") {
  SyntheticTruth t = two_leaf_truth();
  t.rules = {t.rules[0]};
  t.rules[0].conditions.clear();
  t.sigma_b = 0.0;
  t.n_clusters = 100;
  t.visits_per_cluster = 10;
  const auto [d, truth] = generate_synthetic(t, 8);
  const GlmmTreeFit f = fit_glmm_tree(d, z_formula(), {});
  REQUIRE(f.tree.n_leaves() == 1);
  CHECK_FALSE(f.trace.empty());

  const FeatureTable X = with_intercept(d.features(std::vector<std::string>{"EPO_DOSE"}));
  const Eigen::VectorXd y = d.targets();
  const Eigen::VectorXd beta = X.values.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd resid = y - X.values * beta;
  const double s2 = resid.squaredNorm() / (y.size() - 2);
  const Eigen::MatrixXd cov = s2 * (X.values.transpose() * X.values).inverse();
  const auto& m = f.tree.nodes[0].model;
  CHECK(std::abs(m.beta0 - t.rules[0].model.beta0) < 3 * std::sqrt(cov(0, 0)));
  CHECK(std::abs(m.beta1[0] - t.rules[0].model.beta1[0]) < 3 * std::sqrt(cov(1, 1)));

  // Marginal predictions are the GLS fit at the estimated variance ratio,
  // which is ordinary least squares when that ratio is zero.
  const Eigen::VectorXd marg = predict_glmm_tree(f, d.features(), d.clusters(), PredictMode::marginal);
  const auto clusters = d.clusters();
  Eigen::MatrixXd XtVX = Eigen::MatrixXd::Zero(2, 2);
  Eigen::VectorXd XtVy = Eigen::VectorXd::Zero(2);
  for (std::size_t begin = 0; begin < clusters.size();) {
    std::size_t end = begin;
    while (end < clusters.size() && clusters[end] == clusters[begin]) ++end;
    const auto n = static_cast<Eigen::Index>(end - begin);
    const Eigen::MatrixXd Vinv = Eigen::MatrixXd::Identity(n, n) -
                                 f.theta / (1.0 + n * f.theta) * Eigen::MatrixXd::Ones(n, n);
    const auto Xi = X.values.middleRows(static_cast<Eigen::Index>(begin), n);
    XtVX += Xi.transpose() * Vinv * Xi;
    XtVy += Xi.transpose() * Vinv * y.segment(static_cast<Eigen::Index>(begin), n);
    begin = end;
  }
  const Eigen::VectorXd gls = XtVX.ldlt().solve(XtVy);
  CHECK((marg - X.values * gls).cwiseAbs().maxCoeff() < 1e-6);
  if (f.theta == 0.0) CHECK((marg - X.values * beta).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("two planted leaves are recovered") {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto [d, truth] = generate_synthetic(two_leaf_truth(), seed);
    const GlmmTreeFit f = fit_glmm_tree(d, z_formula(), {});
    REQUIRE(f.tree.n_leaves() == 2);
    const auto& root = f.tree.nodes[0];
    CHECK(f.tree.partitioners[static_cast<std::size_t>(root.feature)] == "z1");
    CHECK(std::abs(root.threshold) < 0.1);
    const auto& left = f.tree.nodes[static_cast<std::size_t>(root.left)].model;
    const auto& right = f.tree.nodes[static_cast<std::size_t>(root.right)].model;
    CHECK(std::abs(left.beta0 + 0.33) < 0.05);
    CHECK(std::abs(left.beta1[0] - 0.226) < 0.05);
    CHECK(std::abs(right.beta0 + 0.46) < 0.05);
    CHECK(std::abs(right.beta1[0] - 0.253) < 0.05);
    CHECK(f.converged);
  }
}

TEST_CASE("fit properties: partition, leaf least squares on the adjusted response, variances") {
  const auto [d, truth] = generate_synthetic(three_leaf_truth(), 3);
  const GlmmTreeFit f = fit_glmm_tree(d, z_formula(), {});
  const FeatureTable X = d.features();
  const auto clusters = d.clusters();
  const auto leaves = leaf_assignments(f, X);
  REQUIRE(leaves.size() == d.n_records());
  const auto ids = f.tree.leaf_ids();
  for (int leaf : leaves) CHECK(std::find(ids.begin(), ids.end(), leaf) != ids.end());

  CHECK(f.sigma2 > 0);
  CHECK(f.sigma_b2 >= 0);
  CHECK(std::abs(f.theta - f.sigma_b2 / f.sigma2) < 1e-10);
  CHECK(f.b_hat.size() == d.n_patients());

  const auto dose = X.index_of("EPO_DOSE");
  for (int leaf : ids) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < leaves.size(); ++i)
      if (leaves[i] == leaf) rows.push_back(i);
    Eigen::MatrixXd A(rows.size(), 2);
    Eigen::VectorXd yadj(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      A(k, 0) = 1.0;
      A(k, 1) = X.values(rows[k], dose);
      yadj[k] = d.records()[rows[k]].target - f.b_hat.at(clusters[rows[k]]);
    }
    const Eigen::VectorXd beta = A.colPivHouseholderQr().solve(yadj);
    const auto& m = f.tree.nodes[static_cast<std::size_t>(leaf)].model;
    CHECK(std::abs(m.beta0 - beta[0]) < 1e-8);
    CHECK(std::abs(m.beta1[0] - beta[1]) < 1e-8);
  }
}

TEST_CASE("one pass with exact intercepts grows the tree of the adjusted response") {
  const auto [d, truth] = generate_synthetic(three_leaf_truth(), 6);
  GlmmTreeParams p;
  p.max_iter = 1;
  p.initial_offsets = truth.intercepts;
  const GlmmTreeFit f = fit_glmm_tree(d, z_formula(), p);

  const auto clusters = d.clusters();
  Eigen::VectorXd yadj = d.targets();
  for (std::size_t i = 0; i < clusters.size(); ++i) yadj[i] -= truth.intercepts.at(clusters[i]);
  const ModelTree direct = grow_model_tree(d.features(std::vector<std::string>{"z1", "z2", "z3"}),
                                           d.features(std::vector<std::string>{"EPO_DOSE"}), yadj, d.weights(), p);
  CHECK(f.tree.signature() == direct.signature());
  CHECK(f.n_iterations == 1);
}

TEST_CASE("bagging") {
  const auto [d, truth] = generate_synthetic(three_leaf_truth(), 4);
  const GlmmTreeFormula form = z_formula();
  const GlmmTreeFit single = fit_glmm_tree(d, form, {});
  const FeatureTable X = d.features();
  const auto clusters = d.clusters();

  SUBCASE("one member without resampling equals the single fit") {
    const BaggedGlmmTree b = fit_bagged_glmm_tree(d, form, {}, {1, false, 1, 1});
    CHECK(b.members[0].tree == single.tree);
    CHECK(predict_bagged(b, X, clusters, PredictMode::conditional) ==
          predict_glmm_tree(single, X, clusters, PredictMode::conditional));
  }
  SUBCASE("ensemble prediction is the member mean, independent of threads") {
    const BaggedGlmmTree a = fit_bagged_glmm_tree(d, form, {}, {2, true, 9, 1});
    const BaggedGlmmTree b = fit_bagged_glmm_tree(d, form, {}, {2, true, 9, 2});
    for (std::size_t m = 0; m < 2; ++m) {
      CHECK(a.members[m].tree == b.members[m].tree);
      CHECK(a.members[m].b_hat == b.members[m].b_hat);
    }
    for (PredictMode mode : {PredictMode::conditional, PredictMode::marginal}) {
      const Eigen::VectorXd mean = 0.5 * (predict_glmm_tree(a.members[0], X, clusters, mode) +
                                          predict_glmm_tree(a.members[1], X, clusters, mode));
      CHECK((predict_bagged(a, X, clusters, mode) - mean).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("every member shrinks each patient's mean residual, in or out of bag") {
    const BaggedGlmmTree b = fit_bagged_glmm_tree(d, form, {}, {3, true, 5, 1});
    for (const auto& member : b.members) {
      const Eigen::VectorXd fixed = predict_glmm_tree(member, X, clusters, PredictMode::marginal);
      std::map<std::string, std::pair<double, int>> resid;
      for (std::size_t i = 0; i < d.n_records(); ++i) {
        auto& acc = resid[clusters[i]];
        acc.first += d.records()[i].target - fixed[static_cast<Eigen::Index>(i)];
        acc.second += 1;
      }
      REQUIRE(member.b_hat.size() == resid.size());
      for (const auto& [id, acc] : resid) {
        const double n = acc.second;
        const double expect = (acc.first / n) * n / (n + 1.0 / member.theta);
        CHECK(std::abs(member.b_hat.at(id) - expect) < 1e-12);
      }
    }
  }
}
