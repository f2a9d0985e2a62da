#include "mipd/model_io.hpp"

#include <fstream>
#include <set>

#include "mipd/rules.hpp"

namespace mipd {

namespace {

// Overrides fields present in `j` and rejects keys nobody asked for.
class Overrides {
 public:
  Overrides(const Json& j, const char* what) : j_(j), what_(what) {
    if (!j.is_object()) throw Error(Errc::invalid_argument, std::string(what) + ": expected an object");
  }
  template <typename T>
  Overrides& field(const char* key, T& out) {
    known_.insert(key);
    if (j_.contains(key)) out = json_get<T>(j_, key);
    return *this;
  }
  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.contains(it.key()))
        throw Error(Errc::invalid_argument, std::string(what_) + ": unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  const char* what_;
  std::set<std::string> known_;
};

std::string criterion_name(Criterion c) { return c == Criterion::ml ? "ml" : "reml"; }
Criterion criterion_from(const std::string& s) {
  if (s == "ml") return Criterion::ml;
  if (s == "reml") return Criterion::reml;
  throw Error(Errc::invalid_argument, "criterion must be \"ml\" or \"reml\"");
}

Json vector_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vector_from(const Json& j, const char* key) {
  const auto v = json_get<std::vector<double>>(j, key);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

Json to_json(const std::map<std::string, double>& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

Json to_json(const TreeParams& p) {
  return Json{{"min_node_size", p.min_node_size}, {"max_depth", p.max_depth}, {"cp", p.cp}, {"mtry", p.mtry}};
}

Json to_json(const ForestParams& p) {
  return Json{{"n_trees", p.n_trees},     {"mtry", p.mtry}, {"min_node_size", p.min_node_size},
              {"max_depth", p.max_depth}, {"cp", p.cp},     {"bootstrap", p.bootstrap},
              {"seed", p.seed}};
}

Json to_json(const GlmmTreeParams& p) {
  return Json{{"min_node_size", p.min_node_size}, {"max_depth", p.max_depth},
              {"alpha", p.alpha},                 {"max_iter", p.max_iter},
              {"criterion", criterion_name(p.criterion)}};
}

Json to_json(const GlmmTreeFormula& f) {
  return Json{{"regressors", f.regressors}, {"partitioners", f.partitioners}};
}

Json to_json(const BaggingParams& p) {
  return Json{{"n_trees", p.n_trees}, {"resample", p.resample}, {"seed", p.seed}, {"threads", p.threads}};
}

TreeParams tree_params_from_json(const Json& j, TreeParams p) {
  Overrides(j, "cart")
      .field("min_node_size", p.min_node_size)
      .field("max_depth", p.max_depth)
      .field("cp", p.cp)
      .field("mtry", p.mtry)
      .done();
  return p;
}

ForestParams forest_params_from_json(const Json& j, ForestParams p) {
  Overrides(j, "forest")
      .field("n_trees", p.n_trees)
      .field("mtry", p.mtry)
      .field("min_node_size", p.min_node_size)
      .field("max_depth", p.max_depth)
      .field("cp", p.cp)
      .field("bootstrap", p.bootstrap)
      .field("seed", p.seed)
      .done();
  return p;
}

GlmmTreeParams glmm_params_from_json(const Json& j, GlmmTreeParams p) {
  std::string crit = criterion_name(p.criterion);
  Overrides(j, "glmmtree")
      .field("min_node_size", p.min_node_size)
      .field("max_depth", p.max_depth)
      .field("alpha", p.alpha)
      .field("max_iter", p.max_iter)
      .field("criterion", crit)
      .done();
  p.criterion = criterion_from(crit);
  return p;
}

GlmmTreeFormula formula_from_json(const Json& j, GlmmTreeFormula f) {
  Overrides(j, "formula").field("regressors", f.regressors).field("partitioners", f.partitioners).done();
  return f;
}

BaggingParams bagging_params_from_json(const Json& j, BaggingParams p) {
  Overrides(j, "bagging")
      .field("n_trees", p.n_trees)
      .field("resample", p.resample)
      .field("seed", p.seed)
      .field("threads", p.threads)
      .done();
  return p;
}

// ---------------------------------------------------------------------------

Json to_json(const RegressionTree& t) {
  Json nodes = Json::array();
  for (const auto& n : t.nodes)
    nodes.push_back(Json{{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left},
                         {"right", n.right},     {"missing_left", n.missing_left}, {"value", n.value},
                         {"n", n.n},             {"weight", n.weight}});
  return Json{{"feature_names", t.feature_names}, {"params", to_json(t.params)}, {"nodes", std::move(nodes)}};
}

RegressionTree regression_tree_from_json(const Json& j) {
  RegressionTree t;
  t.feature_names = json_get<std::vector<std::string>>(j, "feature_names");
  if (j.contains("params")) t.params = tree_params_from_json(j.at("params"));
  for (const auto& n : json_get<Json>(j, "nodes")) {
    TreeNode node;
    node.feature = json_get<int>(n, "feature");
    node.threshold = json_get<double>(n, "threshold");
    node.left = json_get<int>(n, "left");
    node.right = json_get<int>(n, "right");
    node.missing_left = json_get<bool>(n, "missing_left");
    node.value = json_get<double>(n, "value");
    node.n = json_get<std::size_t>(n, "n");
    node.weight = json_get<double>(n, "weight");
    t.nodes.push_back(node);
  }
  return t;
}

Json to_json(const Forest& f) {
  Json trees = Json::array();
  for (const auto& t : f.trees) trees.push_back(to_json(t));
  return Json{{"params", to_json(f.params)}, {"trees", std::move(trees)}};
}

Forest forest_from_json(const Json& j) {
  Forest f;
  f.params = forest_params_from_json(json_get<Json>(j, "params"));
  for (const auto& t : json_get<Json>(j, "trees")) f.trees.push_back(regression_tree_from_json(t));
  return f;
}

Json to_json(const LmmFit& f) {
  return Json{{"feature_names", f.feature_names},
              {"beta", vector_json(f.beta)},
              {"sigma2", f.sigma2},
              {"sigma_b2", f.sigma_b2},
              {"theta", f.theta},
              {"loglik", f.loglik},
              {"criterion", criterion_name(f.criterion)},
              {"b_hat", to_json(f.b_hat)},
              {"n_obs", f.n_obs},
              {"single_cluster", f.single_cluster},
              {"boundary", f.boundary},
              {"exact_fit", f.exact_fit}};
}

LmmFit lmm_fit_from_json(const Json& j) {
  LmmFit f;
  f.feature_names = json_get<std::vector<std::string>>(j, "feature_names");
  f.beta = vector_from(j, "beta");
  f.sigma2 = json_get<double>(j, "sigma2");
  f.sigma_b2 = json_get<double>(j, "sigma_b2");
  f.theta = json_get<double>(j, "theta");
  f.loglik = json_get<double>(j, "loglik");
  f.criterion = criterion_from(json_get<std::string>(j, "criterion"));
  f.b_hat = json_get<std::map<std::string, double>>(j, "b_hat");
  f.n_obs = json_get<std::size_t>(j, "n_obs");
  f.single_cluster = json_get<bool>(j, "single_cluster");
  f.boundary = json_get<bool>(j, "boundary");
  f.exact_fit = json_get<bool>(j, "exact_fit");
  return f;
}

Json to_json(const ModelTree& t) {
  Json nodes = Json::array();
  for (const auto& n : t.nodes)
    nodes.push_back(Json{{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left},
                         {"right", n.right},     {"missing_left", n.missing_left}, {"model", to_json(n.model)},
                         {"n", n.n},             {"weight", n.weight},  {"p_value", n.p_value}});
  return Json{{"partitioners", t.partitioners}, {"regressors", t.regressors}, {"nodes", std::move(nodes)}};
}

ModelTree model_tree_from_json(const Json& j) {
  ModelTree t;
  t.partitioners = json_get<std::vector<std::string>>(j, "partitioners");
  t.regressors = json_get<std::vector<std::string>>(j, "regressors");
  for (const auto& n : json_get<Json>(j, "nodes")) {
    ModelTreeNode node;
    node.feature = json_get<int>(n, "feature");
    node.threshold = json_get<double>(n, "threshold");
    node.left = json_get<int>(n, "left");
    node.right = json_get<int>(n, "right");
    node.missing_left = json_get<bool>(n, "missing_left");
    node.model = node_model_from_json(json_get<Json>(n, "model"));
    node.n = json_get<std::size_t>(n, "n");
    node.weight = json_get<double>(n, "weight");
    node.p_value = json_get<double>(n, "p_value");
    t.nodes.push_back(std::move(node));
  }
  return t;
}

Json to_json(const GlmmTreeFit& f) {
  Json trace = Json::array();
  for (const auto& r : f.trace)
    trace.push_back(Json{{"signature", r.signature}, {"loglik", r.loglik}, {"n_leaves", r.n_leaves}});
  return Json{{"tree", to_json(f.tree)},
              {"sigma2", f.sigma2},
              {"sigma_b2", f.sigma_b2},
              {"theta", f.theta},
              {"b_hat", to_json(f.b_hat)},
              {"trace", std::move(trace)},
              {"converged", f.converged},
              {"n_iterations", f.n_iterations},
              {"loglik_monotone", f.loglik_monotone}};
}

GlmmTreeFit glmm_tree_fit_from_json(const Json& j) {
  GlmmTreeFit f;
  f.tree = model_tree_from_json(json_get<Json>(j, "tree"));
  f.sigma2 = json_get<double>(j, "sigma2");
  f.sigma_b2 = json_get<double>(j, "sigma_b2");
  f.theta = json_get<double>(j, "theta");
  f.b_hat = json_get<std::map<std::string, double>>(j, "b_hat");
  for (const auto& r : json_get<Json>(j, "trace"))
    f.trace.push_back({json_get<std::string>(r, "signature"), json_get<double>(r, "loglik"),
                       json_get<std::size_t>(r, "n_leaves")});
  f.converged = json_get<bool>(j, "converged");
  f.n_iterations = json_get<int>(j, "n_iterations");
  f.loglik_monotone = json_get<bool>(j, "loglik_monotone");
  return f;
}

Json to_json(const BaggedGlmmTree& b) {
  Json members = Json::array();
  for (const auto& m : b.members) members.push_back(to_json(m));
  return Json{{"members", std::move(members)}};
}

BaggedGlmmTree bagged_from_json(const Json& j) {
  BaggedGlmmTree b;
  for (const auto& m : json_get<Json>(j, "members")) b.members.push_back(glmm_tree_fit_from_json(m));
  return b;
}

// ---------------------------------------------------------------------------

std::string_view model_kind(const AnyModel& m) {
  static constexpr std::string_view names[] = {"cart", "forest", "lmm", "glmmtree", "bagged-glmmtree"};
  return names[m.index()];
}

Json to_json(const AnyModel& m) {
  Json body = std::visit([](const auto& model) { return to_json(model); }, m);
  return Json{{"kind", model_kind(m)}, {"model", std::move(body)}};
}

AnyModel any_model_from_json(const Json& j) {
  const auto kind = json_get<std::string>(j, "kind");
  const Json& body = json_get<Json>(j, "model");
  if (kind == "cart") return regression_tree_from_json(body);
  if (kind == "forest") return forest_from_json(body);
  if (kind == "lmm") return lmm_fit_from_json(body);
  if (kind == "glmmtree") return glmm_tree_fit_from_json(body);
  if (kind == "bagged-glmmtree") return bagged_from_json(body);
  throw Error(Errc::invalid_argument, "unknown model kind '" + kind + "'");
}

Eigen::VectorXd predict(const AnyModel& m, const Dataset& d) {
  const FeatureTable rows = d.features();
  const auto clusters = d.clusters();
  struct Visitor {
    const FeatureTable& rows;
    const std::vector<std::string>& clusters;
    Eigen::VectorXd operator()(const RegressionTree& t) const { return predict_tree(t, rows); }
    Eigen::VectorXd operator()(const Forest& f) const { return predict_forest(f, rows); }
    Eigen::VectorXd operator()(const LmmFit& f) const {
      std::vector<std::string> names;
      for (const auto& n : f.feature_names)
        if (n != kInterceptName) names.push_back(n);
      FeatureTable X = rows.select(names);
      if (names.size() != f.feature_names.size()) X = with_intercept(X);
      return predict_lmm(f, X, clusters, PredictMode::conditional);
    }
    Eigen::VectorXd operator()(const GlmmTreeFit& f) const {
      return predict_glmm_tree(f, rows, clusters, PredictMode::conditional);
    }
    Eigen::VectorXd operator()(const BaggedGlmmTree& b) const {
      return predict_bagged(b, rows, clusters, PredictMode::conditional);
    }
  };
  return std::visit(Visitor{rows, clusters}, m);
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(Errc::io, "cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(Errc::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mipd
