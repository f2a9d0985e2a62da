#include "mipd/trees.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "mipd/error.hpp"

namespace mipd {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::size_t RegressionTree::n_leaves() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

int RegressionTree::leaf_of(std::span<const double> row) const {
  int k = 0;
  while (!nodes[static_cast<std::size_t>(k)].is_leaf()) {
    const auto& node = nodes[static_cast<std::size_t>(k)];
    const double v = row[static_cast<std::size_t>(node.feature)];
    const bool left = is_missing(v) ? node.missing_left : v <= node.threshold;
    k = left ? node.left : node.right;
  }
  return k;
}

namespace {

struct Moments {
  double w = 0.0, wy = 0.0, wyy = 0.0;
  std::size_t n = 0;

  void add(double wi, double yi) {
    w += wi;
    wy += wi * yi;
    wyy += wi * yi * yi;
    ++n;
  }
  Moments& operator+=(const Moments& o) {
    w += o.w;
    wy += o.wy;
    wyy += o.wyy;
    n += o.n;
    return *this;
  }
  double sse() const { return w > 0.0 ? std::max(wyy - wy * wy / w, 0.0) : 0.0; }
};

Moments operator+(Moments a, const Moments& b) { return a += b; }
Moments operator-(const Moments& a, const Moments& b) {
  return Moments{a.w - b.w, a.wy - b.wy, a.wyy - b.wyy, a.n - b.n};
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  bool missing_left = true;
  double gain = 0.0;
};

class CartBuilder {
 public:
  CartBuilder(const FeatureTable& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
              const TreeParams& params, Rng* rng, RegressionTree& tree)
      : X_(X.values), y_(y), w_(w), params_(params), rng_(rng), tree_(tree) {
    shift_ = y.size() > 0 ? y.mean() : 0.0;
  }

  void build_root(std::vector<std::size_t> rows) {
    root_sse_ = moments(rows).sse();
    build(rows, 0);
  }

 private:
  Moments moments(const std::vector<std::size_t>& rows) const {
    Moments m;
    for (auto i : rows) m.add(w_(static_cast<Eigen::Index>(i)), y_(static_cast<Eigen::Index>(i)) - shift_);
    return m;
  }

  int build(std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    {
      TreeNode& node = tree_.nodes.back();
      double sw = 0.0, swy = 0.0;
      for (auto i : rows) {
        sw += w_(static_cast<Eigen::Index>(i));
        swy += w_(static_cast<Eigen::Index>(i)) * y_(static_cast<Eigen::Index>(i));
      }
      node.n = rows.size();
      node.weight = sw;
      node.value = sw > 0.0 ? swy / sw : 0.0;
    }
    const Moments total = moments(rows);
    const std::size_t min_size = static_cast<std::size_t>(std::max(params_.min_node_size, 1));
    if (depth >= params_.max_depth || rows.size() < 2 * min_size || total.sse() <= 0.0) return id;

    SplitChoice best = best_split(rows, total);
    if (best.feature < 0 || best.gain <= 0.0 || best.gain < params_.cp * root_sse_) return id;

    std::vector<std::size_t> left, right;
    for (auto i : rows) {
      const double v = X_(static_cast<Eigen::Index>(i), best.feature);
      const bool go_left = is_missing(v) ? best.missing_left : v <= best.threshold;
      (go_left ? left : right).push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();
    tree_.nodes[static_cast<std::size_t>(id)].feature = best.feature;
    tree_.nodes[static_cast<std::size_t>(id)].threshold = best.threshold;
    tree_.nodes[static_cast<std::size_t>(id)].missing_left = best.missing_left;
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    tree_.nodes[static_cast<std::size_t>(id)].left = l;
    tree_.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  std::vector<int> candidate_features() {
    const int p = static_cast<int>(X_.cols());
    std::vector<int> feats(static_cast<std::size_t>(p));
    std::iota(feats.begin(), feats.end(), 0);
    if (params_.mtry > 0 && params_.mtry < p && rng_ != nullptr) {
      for (int k = 0; k < params_.mtry; ++k) {
        const auto j = static_cast<std::size_t>(k) + rng_->index(static_cast<std::uint64_t>(p - k));
        std::swap(feats[static_cast<std::size_t>(k)], feats[j]);
      }
      feats.resize(static_cast<std::size_t>(params_.mtry));
      std::sort(feats.begin(), feats.end());
    }
    return feats;
  }

  SplitChoice best_split(const std::vector<std::size_t>& rows, const Moments& total) {
    const double parent_sse = total.sse();
    const double tie_tol = 1e-12 * std::max(parent_sse, 1e-300);
    const std::size_t min_size = static_cast<std::size_t>(std::max(params_.min_node_size, 1));
    SplitChoice best;
    std::vector<std::pair<double, std::size_t>> present;
    present.reserve(rows.size());
    for (int f : candidate_features()) {
      present.clear();
      Moments missing;
      for (auto i : rows) {
        const double v = X_(static_cast<Eigen::Index>(i), f);
        if (is_missing(v)) {
          missing.add(w_(static_cast<Eigen::Index>(i)), y_(static_cast<Eigen::Index>(i)) - shift_);
        } else {
          present.emplace_back(v, i);
        }
      }
      if (present.size() < 2) continue;
      std::sort(present.begin(), present.end());
      Moments all_present;
      for (const auto& [v, i] : present) {
        all_present.add(w_(static_cast<Eigen::Index>(i)), y_(static_cast<Eigen::Index>(i)) - shift_);
      }
      Moments left;
      for (std::size_t k = 0; k + 1 < present.size(); ++k) {
        const auto i = present[k].second;
        left.add(w_(static_cast<Eigen::Index>(i)), y_(static_cast<Eigen::Index>(i)) - shift_);
        const double a = present[k].first;
        const double b = present[k + 1].first;
        if (!(a < b)) continue;
        Moments right = all_present - left;
        const bool missing_left = left.n >= right.n;
        const Moments l = missing_left ? left + missing : left;
        const Moments r = missing_left ? right : right + missing;
        if (l.n < min_size || r.n < min_size) continue;
        const double gain = parent_sse - l.sse() - r.sse();
        if (gain > best.gain + tie_tol) {
          double t = 0.5 * (a + b);
          if (!(t < b)) t = a;
          best = SplitChoice{f, t, missing_left, gain};
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& X_;
  const Eigen::VectorXd& y_;
  const Eigen::VectorXd& w_;
  const TreeParams& params_;
  Rng* rng_;
  RegressionTree& tree_;
  double shift_ = 0.0;
  double root_sse_ = 0.0;
};

}  // namespace

RegressionTree fit_cart(const FeatureTable& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                        const TreeParams& params, Rng* rng) {
  if (y.size() == 0) throw Error(Errc::empty_input, "fit_cart: empty data");
  if (X.values.rows() != y.size() || weights.size() != y.size()) {
    throw Error(Errc::invalid_argument, "fit_cart: X, y and weights must have equal lengths");
  }
  if (!y.allFinite()) throw Error(Errc::invalid_argument, "fit_cart: non-finite target");
  RegressionTree tree;
  tree.feature_names = X.names;
  tree.params = params;
  std::vector<std::size_t> rows(static_cast<std::size_t>(y.size()));
  std::iota(rows.begin(), rows.end(), 0);
  CartBuilder(X, y, weights, params, rng, tree).build_root(std::move(rows));
  return tree;
}

std::vector<int> leaf_assignments(const RegressionTree& tree, const FeatureTable& X) {
  const auto cols = column_map(X, tree.feature_names);
  std::vector<int> out(X.rows());
  std::vector<double> row(cols.size());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      row[j] = X.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cols[j]));
    }
    out[i] = tree.leaf_of(row);
  }
  return out;
}

Eigen::VectorXd predict_tree(const RegressionTree& tree, const FeatureTable& X) {
  const auto leaves = leaf_assignments(tree, X);
  Eigen::VectorXd pred(static_cast<Eigen::Index>(leaves.size()));
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    pred(static_cast<Eigen::Index>(i)) = tree.nodes[static_cast<std::size_t>(leaves[i])].value;
  }
  return pred;
}

Forest fit_forest(const FeatureTable& X, const Eigen::VectorXd& y, const ForestParams& params, int threads) {
  return fit_forest(X, y, Eigen::VectorXd::Ones(y.size()), params, threads);
}

Forest fit_forest(const FeatureTable& X, const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                  const ForestParams& params, int threads) {
  const int p = static_cast<int>(X.cols());
  if (params.n_trees < 1) throw Error(Errc::invalid_argument, "fit_forest: n_trees must be >= 1");
  if (params.mtry < 0 || params.mtry > p) throw Error(Errc::invalid_argument, "fit_forest: mtry must be in [1, p]");
  if (y.size() == 0) throw Error(Errc::empty_input, "fit_forest: empty data");

  TreeParams tp;
  tp.min_node_size = params.min_node_size;
  tp.max_depth = params.max_depth;
  tp.cp = params.cp;
  tp.mtry = params.mtry == 0 ? std::max(1, p / 3) : params.mtry;

  Forest forest;
  forest.params = params;
  forest.trees.resize(static_cast<std::size_t>(params.n_trees));
  const auto n = static_cast<std::size_t>(y.size());
  parallel_for(forest.trees.size(), threads, [&](std::size_t t) {
    Rng rng(member_seed(params.seed, t));
    if (!params.bootstrap) {
      forest.trees[t] = fit_cart(X, y, weights, tp, &rng);
      return;
    }
    std::vector<std::size_t> sample(n);
    for (auto& s : sample) s = rng.index(n);
    FeatureTable Xb = X.rows_subset(sample);
    Eigen::VectorXd yb(static_cast<Eigen::Index>(n)), wb(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      yb(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(sample[i]));
      wb(static_cast<Eigen::Index>(i)) = weights(static_cast<Eigen::Index>(sample[i]));
    }
    forest.trees[t] = fit_cart(Xb, yb, wb, tp, &rng);
  });
  return forest;
}

Eigen::VectorXd predict_forest(const Forest& forest, const FeatureTable& X) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(X.rows()));
  for (const auto& tree : forest.trees) sum += predict_tree(tree, X);
  return sum / static_cast<double>(forest.trees.size());
}

}  // namespace mipd
