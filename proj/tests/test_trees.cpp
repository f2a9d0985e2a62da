#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "helpers.hpp"
#include "mipd/random.hpp"
#include "mipd/trees.hpp"

using namespace mipd;
using testutil::error_of;

namespace {

double sse(const Eigen::VectorXd& y) { return (y.array() - y.mean()).square().sum(); }

struct BestSplit {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

/// Exhaustive search over midpoints of consecutive distinct values.
BestSplit brute_force_split(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int min_node) {
  BestSplit best;
  const double total = sse(y);
  for (int f = 0; f < X.cols(); ++f) {
    std::set<double> values(X.col(f).data(), X.col(f).data() + X.rows());
    std::vector<double> v(values.begin(), values.end());
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
      const double t = 0.5 * (v[i] + v[i + 1]);
      std::vector<double> l, r;
      for (int k = 0; k < X.rows(); ++k) (X(k, f) <= t ? l : r).push_back(y[k]);
      if (static_cast<int>(l.size()) < min_node || static_cast<int>(r.size()) < min_node) continue;
      const double gain = total - sse(Eigen::Map<Eigen::VectorXd>(l.data(), l.size())) -
                          sse(Eigen::Map<Eigen::VectorXd>(r.data(), r.size()));
      if (gain > best.gain + 1e-12) best = {f, t, gain};
    }
  }
  return best;
}

FeatureTable table(std::vector<std::string> names, Eigen::MatrixXd values) { return {std::move(names), std::move(values)}; }

struct Planted {
  FeatureTable X;
  Eigen::VectorXd y;
};

Planted linear_step(int n, std::uint64_t seed) {
  Rng rng(seed);
  Planted p{table({"a", "b", "c"}, Eigen::MatrixXd(n, 3)), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) p.X.values(i, k) = rng.uniform(0, 1);
    p.y[i] = 2.0 * p.X.values(i, 0) + (p.X.values(i, 1) > 0.5 ? 1.5 : 0.0) + rng.normal(0.0, 0.5);
  }
  return p;
}

}  // namespace

TEST_CASE("constant target gives one leaf") {
  FeatureTable X = table({"x"}, Eigen::VectorXd::LinSpaced(50, 0, 1));
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(50, 2.5);
  const RegressionTree t = fit_cart(X, y, Eigen::VectorXd::Ones(50), {});
  CHECK(t.n_leaves() == 1);
  CHECK((predict_tree(t, X).array() == 2.5).all());
}

TEST_CASE("step function: one split that the brute-force search agrees with") {
  Rng rng(3);
  const int n = 200;
  FeatureTable X = table({"x"}, Eigen::MatrixXd(n, 1));
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X.values(i, 0) = rng.uniform(0, 1);
    y[i] = X.values(i, 0) > 0.5 ? 1.0 : 0.0;
  }
  TreeParams p;
  p.min_node_size = 1;
  const RegressionTree t = fit_cart(X, y, Eigen::VectorXd::Ones(n), p);
  REQUIRE(t.n_leaves() == 2);
  const BestSplit b = brute_force_split(X.values, y, 1);
  CHECK(t.nodes[0].feature == b.feature);
  CHECK(t.nodes[0].threshold == b.threshold);
  // Within one gap of 0.5: the two sample values around the step bracket it.
  double below = 0, above = 1;
  for (int i = 0; i < n; ++i) {
    if (X.values(i, 0) <= 0.5) below = std::max(below, X.values(i, 0));
    else above = std::min(above, X.values(i, 0));
  }
  CHECK(t.nodes[0].threshold >= below);
  CHECK(t.nodes[0].threshold <= above);
}

TEST_CASE("root split matches brute force on noisy multi-feature data") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Planted p = linear_step(120, seed);
    TreeParams params;
    params.min_node_size = 5;
    params.max_depth = 1;
    const RegressionTree t = fit_cart(p.X, p.y, Eigen::VectorXd::Ones(120), params);
    const BestSplit b = brute_force_split(p.X.values, p.y, 5);
    CHECK(t.nodes[0].feature == b.feature);
    CHECK(t.nodes[0].threshold == doctest::Approx(b.threshold).epsilon(1e-15));
  }
}

TEST_CASE("XOR on binary features") {
  auto xor_data = [](std::array<int, 4> counts) {
    std::vector<std::array<double, 3>> rows;
    int cell = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b, ++cell)
        for (int k = 0; k < counts[cell]; ++k) rows.push_back({double(a), double(b), double(a ^ b)});
    Planted p{table({"x1", "x2"}, Eigen::MatrixXd(rows.size(), 2)), Eigen::VectorXd(rows.size())};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p.X.values(i, 0) = rows[i][0];
      p.X.values(i, 1) = rows[i][1];
      p.y[i] = rows[i][2];
    }
    return p;
  };
  TreeParams params;
  params.min_node_size = 1;

  SUBCASE("balanced cells: no single split improves on the root") {
    const Planted p = xor_data({10, 10, 10, 10});
    CHECK(brute_force_split(p.X.values, p.y, 1).gain == doctest::Approx(0.0));
    params.max_depth = 1;
    CHECK(fit_cart(p.X, p.y, Eigen::VectorXd::Ones(p.y.size()), params).n_leaves() == 1);
  }
  SUBCASE("unbalanced cells: depth two fits exactly") {
    const Planted p = xor_data({10, 20, 30, 40});
    params.max_depth = 2;
    const RegressionTree t = fit_cart(p.X, p.y, Eigen::VectorXd::Ones(p.y.size()), params);
    CHECK(t.n_leaves() == 4);
    CHECK((predict_tree(t, p.X) - p.y).squaredNorm() < 1e-20);
  }
}

TEST_CASE("routing: ties go left, missing values follow the larger child") {
  FeatureTable X = table({"x"}, Eigen::VectorXd::LinSpaced(30, 0, 29));
  Eigen::VectorXd y(30);
  for (int i = 0; i < 30; ++i) y[i] = i < 20 ? 0.0 : 1.0;
  TreeParams p;
  p.min_node_size = 1;
  const RegressionTree t = fit_cart(X, y, Eigen::VectorXd::Ones(30), p);
  REQUIRE(t.n_leaves() == 2);
  const auto& root = t.nodes[0];
  CHECK(root.threshold == 19.5);

  FeatureTable probe = table({"x"}, Eigen::Vector3d(19.5, 19.6, kMissing));
  const Eigen::VectorXd pred = predict_tree(t, probe);
  CHECK(pred[0] == 0.0);
  CHECK(pred[1] == 1.0);
  const bool left_bigger = t.nodes[root.left].n > t.nodes[root.right].n;
  CHECK(root.missing_left == left_bigger);
  CHECK(pred[2] == (left_bigger ? 0.0 : 1.0));
}

TEST_CASE("leaf values are weighted means of their rows") {
  const Planted p = linear_step(300, 9);
  Rng rng(10);
  Eigen::VectorXd w(300);
  for (int i = 0; i < 300; ++i) w[i] = rng.uniform(0.2, 2.0);
  const RegressionTree t = fit_cart(p.X, p.y, w, {});
  const auto leaves = leaf_assignments(t, p.X);
  std::map<int, std::pair<double, double>> acc;
  for (int i = 0; i < 300; ++i) {
    acc[leaves[i]].first += w[i] * p.y[i];
    acc[leaves[i]].second += w[i];
  }
  CHECK(acc.size() == t.n_leaves());
  for (const auto& [leaf, s] : acc) CHECK(std::abs(t.nodes[leaf].value - s.first / s.second) < 1e-10);
}

TEST_CASE("training error does not rise with depth") {
  const Planted p = linear_step(400, 12);
  double previous = std::numeric_limits<double>::infinity();
  for (int depth = 0; depth <= 8; ++depth) {
    TreeParams params;
    params.max_depth = depth;
    params.cp = 0.0;
    params.min_node_size = 3;
    const RegressionTree t = fit_cart(p.X, p.y, Eigen::VectorXd::Ones(400), params);
    const double s = (predict_tree(t, p.X) - p.y).squaredNorm();
    CHECK(s <= previous + 1e-9);
    previous = s;
  }
}

TEST_CASE("empty data is rejected") {
  FeatureTable X = table({"x"}, Eigen::MatrixXd(0, 1));
  CHECK(error_of([&] { fit_cart(X, Eigen::VectorXd(0), Eigen::VectorXd(0), {}); }) == Errc::empty_input);
}

TEST_CASE("single unbootstrapped member with all features equals CART") {
  const Planted p = linear_step(200, 14);
  ForestParams fp;
  fp.n_trees = 1;
  fp.bootstrap = false;
  fp.mtry = 3;
  fp.min_node_size = 5;
  fp.max_depth = 6;
  fp.cp = 0.001;
  const Forest f = fit_forest(p.X, p.y, fp);
  TreeParams tp;
  tp.min_node_size = 5;
  tp.max_depth = 6;
  tp.cp = 0.001;
  const RegressionTree t = fit_cart(p.X, p.y, Eigen::VectorXd::Ones(200), tp);
  CHECK(f.trees[0].nodes == t.nodes);
  CHECK(predict_forest(f, p.X) == predict_tree(t, p.X));
}

TEST_CASE("forest prediction is the member mean and is scheduling independent") {
  const Planted p = linear_step(200, 15);
  ForestParams fp;
  fp.n_trees = 8;
  fp.seed = 4;
  const Forest a = fit_forest(p.X, p.y, fp, 1);
  const Forest b = fit_forest(p.X, p.y, fp, 4);
  REQUIRE(a.trees.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(a.trees[i] == b.trees[i]);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(200);
  for (const auto& t : a.trees) mean += predict_tree(t, p.X);
  mean /= 8.0;
  CHECK((predict_forest(a, p.X) - mean).cwiseAbs().maxCoeff() < 1e-12);
  fp.seed = 5;
  CHECK_FALSE(fit_forest(p.X, p.y, fp).trees[0] == a.trees[0]);
}

TEST_CASE("averaging lowers test error relative to the members") {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Planted train = linear_step(300, 1000 + seed), test = linear_step(300, 2000 + seed);
    ForestParams fp;
    fp.n_trees = 25;
    fp.seed = seed;
    const Forest f = fit_forest(train.X, train.y, fp);
    const double forest_mse = (predict_forest(f, test.X) - test.y).squaredNorm() / 300;
    double member_mse = 0.0;
    for (const auto& t : f.trees) member_mse += (predict_tree(t, test.X) - test.y).squaredNorm() / 300;
    member_mse /= f.trees.size();
    wins += forest_mse <= member_mse;
  }
  CHECK(wins >= 9);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(1000, 0);
  parallel_for(1000, 7, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}
