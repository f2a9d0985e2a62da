#include "mipd/glmmtree.hpp"

#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <cstdio>
#include <numeric>
#include <set>

#include "mipd/error.hpp"
#include "mipd/random.hpp"
#include "mipd/trees.hpp"

namespace mipd {

GlmmTreeFormula default_formula(const std::vector<std::string>& schema, const std::string& dose) {
  GlmmTreeFormula f;
  f.regressors = {dose};
  for (const auto& name : schema)
    if (name != dose) f.partitioners.push_back(name);
  return f;
}

// ---------------------------------------------------------------------------
// ModelTree

std::size_t ModelTree::n_leaves() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const auto& n) { return n.is_leaf(); }));
}

std::vector<int> ModelTree::leaf_ids() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].is_leaf()) out.push_back(static_cast<int>(i));
  return out;
}

int ModelTree::leaf_of(std::span<const double> partition_values) const {
  int k = 0;
  while (!nodes[static_cast<std::size_t>(k)].is_leaf()) {
    const auto& node = nodes[static_cast<std::size_t>(k)];
    const double v = partition_values[static_cast<std::size_t>(node.feature)];
    const bool left = is_missing(v) ? node.missing_left : v <= node.threshold;
    k = left ? node.left : node.right;
  }
  return k;
}

std::string ModelTree::signature() const {
  std::string out;
  char buf[64];
  for (const auto& node : nodes) {
    if (node.is_leaf()) {
      out += "L;";
    } else {
      std::snprintf(buf, sizeof buf, "%.17g", node.threshold);
      out += partitioners[static_cast<std::size_t>(node.feature)] + "<=" + buf +
             (node.missing_left ? "" : "|NA>") + ";";
    }
  }
  return out;
}

namespace {

// Weighted cross-products of z = (1, regressors) and y for one node.
struct NodeStats {
  std::size_t n = 0;
  double yy = 0.0;
  Eigen::MatrixXd S;  // sum w z z'
  Eigen::VectorXd b;  // sum w z y

  explicit NodeStats(Eigen::Index q = 0) : S(Eigen::MatrixXd::Zero(q, q)), b(Eigen::VectorXd::Zero(q)) {}

  void add(double w, const Eigen::Ref<const Eigen::RowVectorXd>& z, double y) {
    ++n;
    yy += w * y * y;
    S.noalias() += w * z.transpose() * z;
    b.noalias() += (w * y) * z.transpose();
  }
  NodeStats& operator+=(const NodeStats& o) {
    n += o.n;
    yy += o.yy;
    S += o.S;
    b += o.b;
    return *this;
  }
  NodeStats& operator-=(const NodeStats& o) {
    n -= o.n;
    yy -= o.yy;
    S -= o.S;
    b -= o.b;
    return *this;
  }
  double weight() const { return S(0, 0); }
};

struct LocalFit {
  NodeModel model;
  double sse = 0.0;
  std::vector<bool> active;  // regressors with non-zero spread in the node
};

// Weighted least squares from sufficient statistics. Regressors that are
// constant within the node get a zero slope.
LocalFit local_fit(const NodeStats& s) {
  const Eigen::Index r = s.S.rows() - 1;
  LocalFit out;
  out.model.beta1.assign(static_cast<std::size_t>(r), 0.0);
  out.active.assign(static_cast<std::size_t>(r), false);
  const double W = s.weight();
  if (!(W > 0.0)) return out;
  const double ybar = s.b(0) / W;
  const double syy = std::max(s.yy - W * ybar * ybar, 0.0);
  if (r == 0) {
    out.model.beta0 = ybar;
    out.sse = syy;
    return out;
  }
  Eigen::VectorXd m = s.S.block(1, 0, r, 1) / W;
  Eigen::MatrixXd C = s.S.bottomRightCorner(r, r) - W * m * m.transpose();
  Eigen::VectorXd c = s.b.tail(r) - W * ybar * m;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < r; ++j) {
    if (C(j, j) > 1e-10 * W * (1.0 + m(j) * m(j))) keep.push_back(j);
  }
  double fitted = 0.0;
  Eigen::VectorXd slope = Eigen::VectorXd::Zero(r);
  if (keep.size() == 1) {
    const auto j = keep[0];
    slope(j) = c(j) / C(j, j);
    fitted = c(j) * slope(j);
  } else if (!keep.empty()) {
    const auto k = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd Ck(k, k);
    Eigen::VectorXd ck(k);
    for (Eigen::Index a = 0; a < k; ++a) {
      ck(a) = c(keep[static_cast<std::size_t>(a)]);
      for (Eigen::Index bb = 0; bb < k; ++bb) Ck(a, bb) = C(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(bb)]);
    }
    Eigen::VectorXd sk = Ck.ldlt().solve(ck);
    for (Eigen::Index a = 0; a < k; ++a) slope(keep[static_cast<std::size_t>(a)]) = sk(a);
    fitted = ck.dot(sk);
  }
  for (auto j : keep) out.active[static_cast<std::size_t>(j)] = true;
  out.sse = std::max(syy - fitted, 0.0);
  out.model.beta0 = ybar - m.dot(slope);
  for (Eigen::Index j = 0; j < r; ++j) out.model.beta1[static_cast<std::size_t>(j)] = slope(j);
  return out;
}

struct Candidate {
  int feature = -1;
  double threshold = 0.0;
  bool missing_left = true;
  double gain = 0.0;
  double child_sse = 0.0;
  std::size_t n_candidates = 0;  // admissible splits examined across all partitioners
};

class ModelTreeBuilder {
 public:
  ModelTreeBuilder(const FeatureTable& P, const FeatureTable& R, const Eigen::VectorXd& y,
                   const Eigen::VectorXd& w, const GlmmTreeParams& params, ModelTree& tree)
      : P_(P.values), y_(y), w_(w), params_(params), tree_(tree) {
    const auto n = y.size();
    Z_.resize(n, R.values.cols() + 1);
    Z_.col(0).setOnes();
    Z_.rightCols(R.values.cols()) = R.values;
    q_ = Z_.cols();
    shift_ = n > 0 ? y.mean() : 0.0;
  }

  void build(std::vector<std::size_t> rows, int depth) { grow(rows, depth); }

 private:
  NodeStats stats(const std::vector<std::size_t>& rows) const {
    NodeStats s(q_);
    for (auto i : rows) add(s, i);
    return s;
  }

  void add(NodeStats& s, std::size_t i) const {
    const auto ii = static_cast<Eigen::Index>(i);
    s.add(w_(ii), Z_.row(ii), y_(ii) - shift_);
  }

  int grow(std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    const NodeStats total = stats(rows);
    LocalFit local = local_fit(total);
    local.model.beta0 += shift_;
    {
      auto& node = tree_.nodes.back();
      node.model = local.model;
      node.n = rows.size();
      node.weight = total.weight();
    }
    const std::size_t min_child = std::max<std::size_t>(static_cast<std::size_t>(std::max(params_.min_node_size, 1)),
                                                        static_cast<std::size_t>(q_ + 1));
    if (depth >= params_.max_depth || rows.size() < 2 * min_child || local.sse <= 0.0) return id;

    const Candidate best = best_split(rows, total, local.sse, min_child);
    if (best.feature < 0 || best.gain <= 0.0) return id;

    const double df1 = static_cast<double>(q_);
    const double df2 = static_cast<double>(rows.size()) - 2.0 * static_cast<double>(q_);
    if (df2 <= 0.0) return id;
    double p_value = 0.0;
    if (best.child_sse > 0.0) {
      const double F = (best.gain / df1) / (best.child_sse / df2);
      boost::math::fisher_f dist(df1, df2);
      p_value = boost::math::cdf(boost::math::complement(dist, F));
    }
    const double adjusted = std::min(1.0, p_value * static_cast<double>(best.n_candidates));
    tree_.nodes[static_cast<std::size_t>(id)].p_value = adjusted;
    if (!(adjusted < params_.alpha)) return id;

    std::vector<std::size_t> left, right;
    for (auto i : rows) {
      const double v = P_(static_cast<Eigen::Index>(i), best.feature);
      const bool go_left = is_missing(v) ? best.missing_left : v <= best.threshold;
      (go_left ? left : right).push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();
    tree_.nodes[static_cast<std::size_t>(id)].feature = best.feature;
    tree_.nodes[static_cast<std::size_t>(id)].threshold = best.threshold;
    tree_.nodes[static_cast<std::size_t>(id)].missing_left = best.missing_left;
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    tree_.nodes[static_cast<std::size_t>(id)].left = l;
    tree_.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  Candidate best_split(const std::vector<std::size_t>& rows, const NodeStats& total, double parent_sse,
                       std::size_t min_child) const {
    Candidate best;
    std::size_t examined = 0;
    const double tie_tol = 1e-12 * std::max(parent_sse, 1e-300);
    std::vector<std::pair<double, std::size_t>> present;
    present.reserve(rows.size());
    for (Eigen::Index f = 0; f < P_.cols(); ++f) {
      present.clear();
      NodeStats missing(q_);
      for (auto i : rows) {
        const double v = P_(static_cast<Eigen::Index>(i), f);
        if (is_missing(v)) add(missing, i); else present.emplace_back(v, i);
      }
      if (present.size() < 2) continue;
      std::sort(present.begin(), present.end());
      NodeStats all_present = total;
      all_present -= missing;
      NodeStats left(q_);
      for (std::size_t k = 0; k + 1 < present.size(); ++k) {
        add(left, present[k].second);
        const double a = present[k].first;
        const double b = present[k + 1].first;
        if (!(a < b)) continue;
        const std::size_t n_right_present = present.size() - (k + 1);
        const bool missing_left = left.n >= n_right_present;
        const std::size_t n_left = left.n + (missing_left ? missing.n : 0);
        const std::size_t n_right = n_right_present + (missing_left ? 0 : missing.n);
        if (n_left < min_child || n_right < min_child) continue;
        ++examined;
        NodeStats l = left;
        NodeStats r = all_present;
        r -= left;
        if (missing.n > 0) {
          if (missing_left) l += missing; else r += missing;
        }
        const double child_sse = local_fit(l).sse + local_fit(r).sse;
        const double gain = parent_sse - child_sse;
        if (gain > best.gain + tie_tol) {
          double t = 0.5 * (a + b);
          if (!(t < b)) t = a;
          best = Candidate{static_cast<int>(f), t, missing_left, gain, child_sse, 0};
        }
      }
    }
    best.n_candidates = examined;
    return best;
  }

  const Eigen::MatrixXd& P_;
  Eigen::MatrixXd Z_;
  const Eigen::VectorXd& y_;
  const Eigen::VectorXd& w_;
  const GlmmTreeParams& params_;
  ModelTree& tree_;
  Eigen::Index q_ = 1;
  double shift_ = 0.0;
};

void check_inputs(const FeatureTable& P, const FeatureTable& R, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  if (y.size() == 0) throw Error(Errc::empty_input, "glmm tree: empty data");
  if (P.values.rows() != y.size() || R.values.rows() != y.size() || w.size() != y.size()) {
    throw Error(Errc::invalid_argument, "glmm tree: inputs must have equal row counts");
  }
  for (const auto& name : R.names) {
    if (std::find(P.names.begin(), P.names.end(), name) != P.names.end()) {
      throw Error(Errc::invalid_argument, "glmm tree: '" + name + "' is both regressor and partitioner");
    }
  }
  if (!R.values.allFinite()) throw Error(Errc::invalid_argument, "glmm tree: regressors must not be missing");
  if (!y.allFinite()) throw Error(Errc::invalid_argument, "glmm tree: non-finite response");
}

// Leaf-specific intercept and slope columns for the mixed-model step. Slopes
// of regressors that are constant inside a leaf are left out (fixed at 0).
struct LeafDesign {
  FeatureTable X;
  std::vector<int> leaf_nodes;
  // (leaf position, regressor index or -1 for intercept) per column
  std::vector<std::pair<std::size_t, int>> columns;
};

LeafDesign leaf_design(const ModelTree& tree, const std::vector<int>& leaf_of_row, const FeatureTable& R,
                       const Eigen::VectorXd& w) {
  LeafDesign out;
  out.leaf_nodes = tree.leaf_ids();
  std::map<int, std::size_t> position;
  for (std::size_t k = 0; k < out.leaf_nodes.size(); ++k) position[out.leaf_nodes[k]] = k;
  const auto n = static_cast<Eigen::Index>(leaf_of_row.size());
  const auto r = R.values.cols();
  for (std::size_t k = 0; k < out.leaf_nodes.size(); ++k) {
    out.columns.emplace_back(k, -1);
    for (Eigen::Index j = 0; j < r; ++j) {
      double sw = 0.0, sx = 0.0, sxx = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (leaf_of_row[static_cast<std::size_t>(i)] != out.leaf_nodes[k]) continue;
        const double x = R.values(i, j);
        sw += w(i);
        sx += w(i) * x;
        sxx += w(i) * x * x;
      }
      if (sw > 0.0) {
        const double mean = sx / sw;
        if (sxx - sw * mean * mean > 1e-10 * sw * (1.0 + mean * mean)) out.columns.emplace_back(k, static_cast<int>(j));
      }
    }
  }
  out.X.values = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(out.columns.size()));
  for (std::size_t c = 0; c < out.columns.size(); ++c) {
    const auto [k, j] = out.columns[c];
    out.X.names.push_back("leaf" + std::to_string(out.leaf_nodes[k]) + ":" +
                          (j < 0 ? std::string(kInterceptName) : R.names[static_cast<std::size_t>(j)]));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t k = position.at(leaf_of_row[static_cast<std::size_t>(i)]);
    for (std::size_t c = 0; c < out.columns.size(); ++c) {
      if (out.columns[c].first != k) continue;
      const int j = out.columns[c].second;
      out.X.values(i, static_cast<Eigen::Index>(c)) = j < 0 ? 1.0 : R.values(i, j);
    }
  }
  return out;
}

std::vector<int> route(const ModelTree& tree, const Eigen::MatrixXd& P) {
  std::vector<int> out(static_cast<std::size_t>(P.rows()));
  std::vector<double> row(static_cast<std::size_t>(P.cols()));
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    for (Eigen::Index j = 0; j < P.cols(); ++j) row[static_cast<std::size_t>(j)] = P(i, j);
    out[static_cast<std::size_t>(i)] = tree.leaf_of(row);
  }
  return out;
}

}  // namespace

ModelTree grow_model_tree(const FeatureTable& partitioners, const FeatureTable& regressors, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& weights, const GlmmTreeParams& params) {
  check_inputs(partitioners, regressors, y, weights);
  ModelTree tree;
  tree.partitioners = partitioners.names;
  tree.regressors = regressors.names;
  std::vector<std::size_t> rows(static_cast<std::size_t>(y.size()));
  std::iota(rows.begin(), rows.end(), 0);
  ModelTreeBuilder(partitioners, regressors, y, weights, params, tree).build(std::move(rows), 0);
  return tree;
}

GlmmTreeFit fit_glmm_tree(const FeatureTable& partitioners, const FeatureTable& regressors, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& weights, std::span<const std::string> clusters,
                          const GlmmTreeParams& params) {
  check_inputs(partitioners, regressors, y, weights);
  if (clusters.size() != static_cast<std::size_t>(y.size())) {
    throw Error(Errc::invalid_argument, "glmm tree: one cluster id per row required");
  }
  if (params.max_iter < 1) throw Error(Errc::invalid_argument, "glmm tree: max_iter must be >= 1");
  const auto n = y.size();
  Eigen::VectorXd offset(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto it = params.initial_offsets.find(clusters[static_cast<std::size_t>(i)]);
    offset(i) = it == params.initial_offsets.end() ? 0.0 : it->second;
  }

  GlmmTreeFit fit;
  std::string previous;
  for (int iter = 1; iter <= params.max_iter; ++iter) {
    ModelTree tree = grow_model_tree(partitioners, regressors, y - offset, weights, params);
    const std::vector<int> leaves = route(tree, partitioners.values);
    LeafDesign design = leaf_design(tree, leaves, regressors, weights);
    LmmFit lmm = fit_lmm(design.X, y, clusters, weights, params.criterion);

    for (std::size_t k = 0; k < design.leaf_nodes.size(); ++k) {
      auto& model = tree.nodes[static_cast<std::size_t>(design.leaf_nodes[k])].model;
      model.beta0 = 0.0;
      std::fill(model.beta1.begin(), model.beta1.end(), 0.0);
    }
    for (std::size_t c = 0; c < design.columns.size(); ++c) {
      const auto [k, j] = design.columns[c];
      auto& model = tree.nodes[static_cast<std::size_t>(design.leaf_nodes[k])].model;
      const double coef = lmm.beta(static_cast<Eigen::Index>(c));
      if (j < 0) model.beta0 = coef; else model.beta1[static_cast<std::size_t>(j)] = coef;
    }
    for (Eigen::Index i = 0; i < n; ++i) offset(i) = lmm.b_hat.at(clusters[static_cast<std::size_t>(i)]);

    const std::string sig = tree.signature();
    fit.trace.push_back(IterationRecord{sig, lmm.loglik, tree.n_leaves()});
    if (fit.trace.size() > 1 && fit.trace.back().loglik < fit.trace[fit.trace.size() - 2].loglik - 1e-6) {
      fit.loglik_monotone = false;
    }
    fit.tree = std::move(tree);
    fit.sigma2 = lmm.sigma2;
    fit.sigma_b2 = lmm.sigma_b2;
    fit.theta = lmm.theta;
    fit.b_hat = std::move(lmm.b_hat);
    fit.n_iterations = iter;
    if (sig == previous) {
      fit.converged = true;
      break;
    }
    previous = sig;
  }
  return fit;
}

GlmmTreeFit fit_glmm_tree(const Dataset& d, const GlmmTreeFormula& formula, const GlmmTreeParams& params) {
  const Dataset data = d.labeled();
  const auto clusters = data.clusters();
  return fit_glmm_tree(data.features(formula.partitioners), data.features(formula.regressors), data.targets(),
                       data.weights(), clusters, params);
}

std::vector<int> leaf_assignments(const GlmmTreeFit& fit, const FeatureTable& rows) {
  return route(fit.tree, rows.select(fit.tree.partitioners).values);
}

Eigen::VectorXd predict_glmm_tree(const GlmmTreeFit& fit, const FeatureTable& rows,
                                  std::span<const std::string> clusters, PredictMode mode) {
  const FeatureTable R = rows.select(fit.tree.regressors);
  const std::vector<int> leaves = leaf_assignments(fit, rows);
  Eigen::VectorXd pred(static_cast<Eigen::Index>(rows.rows()));
  std::vector<double> reg(R.cols());
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    for (std::size_t j = 0; j < reg.size(); ++j) {
      reg[j] = R.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    double v = fit.tree.nodes[static_cast<std::size_t>(leaves[i])].model.evaluate(reg);
    if (mode == PredictMode::conditional) {
      if (clusters.size() != rows.rows()) {
        throw Error(Errc::invalid_argument, "predict_glmm_tree: one cluster id per row required");
      }
      auto it = fit.b_hat.find(clusters[i]);
      if (it != fit.b_hat.end()) v += it->second;
    }
    pred(static_cast<Eigen::Index>(i)) = v;
  }
  return pred;
}

// ---------------------------------------------------------------------------
// Bagging

namespace {
constexpr char kCopySeparator = '\x1f';
}

BaggedGlmmTree fit_bagged_glmm_tree(const Dataset& d, const GlmmTreeFormula& formula, const GlmmTreeParams& params,
                                    const BaggingParams& bagging) {
  if (bagging.n_trees < 1) throw Error(Errc::invalid_argument, "bagging: n_trees must be >= 1");
  const Dataset data = d.labeled();
  // Row ranges per patient; records are sorted by patient.
  std::vector<std::pair<std::size_t, std::size_t>> patients;
  for (std::size_t i = 0; i < data.n_records(); ++i) {
    if (i == 0 || data.records()[i].patient_id != data.records()[i - 1].patient_id) patients.emplace_back(i, i);
    patients.back().second = i + 1;
  }

  const FeatureTable X = data.features();
  const auto clusters = data.clusters();

  BaggedGlmmTree ensemble;
  ensemble.members.resize(static_cast<std::size_t>(bagging.n_trees));
  parallel_for(ensemble.members.size(), bagging.threads, [&](std::size_t m) {
    if (!bagging.resample) {
      ensemble.members[m] = fit_glmm_tree(data, formula, params);
      return;
    }
    Rng rng(member_seed(bagging.seed, m));
    std::vector<VisitRecord> records;
    records.reserve(data.n_records());
    for (std::size_t draw = 0; draw < patients.size(); ++draw) {
      const auto [begin, end] = patients[rng.index(patients.size())];
      for (std::size_t i = begin; i < end; ++i) {
        VisitRecord rec = data.records()[i];
        rec.patient_id += kCopySeparator + std::to_string(draw);
        records.push_back(std::move(rec));
      }
    }
    GlmmTreeFit fit = fit_glmm_tree(Dataset(data.schema(), std::move(records)), formula, params);
    // Intercepts for every patient from the original rows: BLUP under the
    // member's tree and variance ratio, theta * sum(w r) / (1 + theta * sum(w)).
    const Eigen::VectorXd fixed = predict_glmm_tree(fit, X, clusters, PredictMode::marginal);
    fit.b_hat.clear();
    for (const auto& [begin, end] : patients) {
      double sw = 0.0, swr = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& rec = data.records()[i];
        sw += rec.weight;
        swr += rec.weight * (rec.target - fixed[static_cast<Eigen::Index>(i)]);
      }
      fit.b_hat[data.records()[begin].patient_id] = fit.theta * swr / (1.0 + fit.theta * sw);
    }
    ensemble.members[m] = std::move(fit);
  });
  return ensemble;
}

Eigen::VectorXd predict_bagged(const BaggedGlmmTree& ensemble, const FeatureTable& rows,
                               std::span<const std::string> clusters, PredictMode mode) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows.rows()));
  for (const auto& member : ensemble.members) sum += predict_glmm_tree(member, rows, clusters, mode);
  return sum / static_cast<double>(ensemble.members.size());
}

// ---------------------------------------------------------------------------
// Dose response

std::vector<DosePoint> dose_response(const GlmmTreeFit& fit, const FeatureTable& row, const std::string& cluster,
                                     std::span<const double> grid, double current_hb) {
  if (grid.empty()) throw Error(Errc::invalid_argument, "dose_response: empty dose grid");
  if (row.rows() != 1) throw Error(Errc::invalid_argument, "dose_response: expected exactly one row");
  if (fit.tree.regressors.empty()) throw Error(Errc::invalid_argument, "dose_response: model has no dose regressor");
  const std::size_t dose_col = row.index_of(fit.tree.regressors.front());
  FeatureTable what_if = row;
  const std::string clusters[] = {cluster};
  std::vector<DosePoint> out;
  out.reserve(grid.size());
  for (double dose : grid) {
    if (!std::isfinite(dose)) throw Error(Errc::invalid_argument, "dose_response: non-finite dose");
    what_if.values(0, static_cast<Eigen::Index>(dose_col)) = dose;
    const double delta = predict_glmm_tree(fit, what_if, clusters, PredictMode::conditional)(0);
    out.push_back(DosePoint{dose, delta, current_hb + delta});
  }
  return out;
}

std::vector<DosePoint> dose_response(const GlmmTreeFit& fit, const FeatureTable& row, const std::string& cluster,
                                     std::span<const double> grid, const std::string& level_feature) {
  if (row.rows() != 1) throw Error(Errc::invalid_argument, "dose_response: expected exactly one row");
  const double hb = row.values(0, static_cast<Eigen::Index>(row.index_of(level_feature)));
  if (is_missing(hb)) throw Error(Errc::invalid_argument, "dose_response: current level is missing");
  return dose_response(fit, row, cluster, grid, hb);
}

}  // namespace mipd
