#include "mipd/rules.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>

#include "mipd/error.hpp"
#include "mipd/random.hpp"

namespace mipd {

using Json = nlohmann::ordered_json;

namespace {

// Keeps the tightest bound per (feature, op) at its first position.
void add_collapsed(std::vector<Condition>& path, const Condition& c) {
  for (auto& existing : path) {
    if (existing.feature != c.feature || existing.op != c.op) continue;
    existing.threshold = c.op == CompareOp::le ? std::min(existing.threshold, c.threshold)
                                               : std::max(existing.threshold, c.threshold);
    return;
  }
  path.push_back(c);
}

template <typename Node, typename Leaf>
void walk(const std::vector<Node>& nodes, int id, std::vector<Condition> path,
          const std::vector<std::string>& names, const Leaf& on_leaf) {
  const Node& node = nodes[static_cast<std::size_t>(id)];
  if (node.is_leaf()) {
    on_leaf(node, std::move(path));
    return;
  }
  const std::string& f = names[static_cast<std::size_t>(node.feature)];
  auto left = path;
  add_collapsed(left, {f, CompareOp::le, node.threshold});
  walk(nodes, node.left, std::move(left), names, on_leaf);
  add_collapsed(path, {f, CompareOp::gt, node.threshold});
  walk(nodes, node.right, std::move(path), names, on_leaf);
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  return buf;
}

const char* kLe = "≤";
const char* kAnd = " ∧ ";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double parse_number(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw Error(Errc::malformed_numeric, "not a number: '" + s + "'");
  return v;
}

template <typename T>
T get(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw Error(Errc::invalid_argument, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("field '") + key + "': " + e.what());
  }
}

double get_finite(const Json& j, const char* key) {
  const double v = get<double>(j, key);
  if (!std::isfinite(v)) throw Error(Errc::invalid_argument, std::string("field '") + key + "' not finite");
  return v;
}

}  // namespace

std::string_view to_string(CompareOp op) { return op == CompareOp::le ? "le" : "gt"; }

CompareOp compare_op_from_string(std::string_view s) {
  if (s == "le") return CompareOp::le;
  if (s == "gt") return CompareOp::gt;
  throw Error(Errc::invalid_argument, "op must be \"le\" or \"gt\", got \"" + std::string(s) + "\"");
}

std::string_view to_string(Provenance p) { return p == Provenance::learned ? "learned" : "edited"; }

// ---------------------------------------------------------------------------

RuleSet extract_rules(const ModelTree& tree) {
  RuleSet rs;
  rs.regressors = tree.regressors;
  if (tree.nodes.empty()) return rs;
  int next_id = 1;
  walk(tree.nodes, 0, {}, tree.partitioners, [&](const ModelTreeNode& leaf, std::vector<Condition> path) {
    Rule r;
    r.id = next_id++;
    r.conditions = std::move(path);
    r.model = leaf.model;
    r.support = static_cast<long>(leaf.n);
    rs.rules.push_back(std::move(r));
  });
  return rs;
}

RuleSet extract_rules(const GlmmTreeFit& fit) { return extract_rules(fit.tree); }

RuleSet extract_rules(const RegressionTree& tree) {
  RuleSet rs;
  if (tree.nodes.empty()) return rs;
  int next_id = 1;
  walk(tree.nodes, 0, {}, tree.feature_names, [&](const TreeNode& leaf, std::vector<Condition> path) {
    Rule r;
    r.id = next_id++;
    r.conditions = std::move(path);
    r.model.beta0 = leaf.value;
    r.support = static_cast<long>(leaf.n);
    rs.rules.push_back(std::move(r));
  });
  return rs;
}

bool satisfies(const Rule& rule, const FeatureTable& rows, std::size_t row) {
  for (const auto& c : rule.conditions) {
    const double v = rows.values(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(rows.index_of(c.feature)));
    if (is_missing(v) || !c.satisfied_by(v)) return false;
  }
  return true;
}

Membership encode(const RuleSet& rs, const FeatureTable& rows) {
  const auto n = static_cast<Eigen::Index>(rows.rows());
  Membership m;
  m.matrix = Eigen::MatrixXi::Zero(n, static_cast<Eigen::Index>(rs.rules.size()));

  // Resolve columns once.
  std::vector<std::vector<std::pair<std::size_t, const Condition*>>> cols(rs.rules.size());
  std::set<std::size_t> tested;
  for (std::size_t k = 0; k < rs.rules.size(); ++k)
    for (const auto& c : rs.rules[k].conditions) {
      const std::size_t j = rows.index_of(c.feature);
      cols[k].emplace_back(j, &c);
      tested.insert(j);
    }

  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j : tested)
      if (is_missing(rows.values(i, static_cast<Eigen::Index>(j)))) {
        m.incomplete.push_back(static_cast<std::size_t>(i));
        break;
      }
    for (std::size_t k = 0; k < rs.rules.size(); ++k) {
      bool ok = true;
      for (const auto& [j, c] : cols[k]) {
        const double v = rows.values(i, static_cast<Eigen::Index>(j));
        if (is_missing(v) || !c->satisfied_by(v)) {
          ok = false;
          break;
        }
      }
      m.matrix(i, static_cast<Eigen::Index>(k)) = ok ? 1 : 0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

bool is_satisfiable(const Rule& rule) {
  std::map<std::string, std::pair<double, double>> box;  // (lo, hi]
  for (const auto& c : rule.conditions) {
    auto [it, inserted] = box.try_emplace(c.feature, -std::numeric_limits<double>::infinity(),
                                          std::numeric_limits<double>::infinity());
    if (c.op == CompareOp::le)
      it->second.second = std::min(it->second.second, c.threshold);
    else
      it->second.first = std::max(it->second.first, c.threshold);
  }
  for (const auto& [f, b] : box)
    if (!(b.first < b.second)) return false;
  return true;
}

ValidationReport validate(const RuleSet& rs, const FeatureTable& sample) {
  ValidationReport report;
  for (const auto& r : rs.rules)
    if (!is_satisfiable(r)) report.unsatisfiable.push_back(r.id);

  const Membership m = encode(rs, sample);
  std::set<std::size_t> skip(m.incomplete.begin(), m.incomplete.end());
  std::set<std::pair<int, int>> overlaps;
  for (Eigen::Index i = 0; i < m.matrix.rows(); ++i) {
    if (skip.contains(static_cast<std::size_t>(i))) continue;
    std::vector<int> hit;
    for (Eigen::Index k = 0; k < m.matrix.cols(); ++k)
      if (m.matrix(i, k)) hit.push_back(rs.rules[static_cast<std::size_t>(k)].id);
    if (hit.empty()) report.gaps.push_back(static_cast<std::size_t>(i));
    for (std::size_t a = 0; a < hit.size(); ++a)
      for (std::size_t b = a + 1; b < hit.size(); ++b)
        overlaps.emplace(std::min(hit[a], hit[b]), std::max(hit[a], hit[b]));
  }
  report.overlaps.assign(overlaps.begin(), overlaps.end());
  return report;
}

FeatureTable sample_domain(std::span<const CovariateRange> ranges, std::size_t n, std::uint64_t seed) {
  FeatureTable t;
  for (const auto& r : ranges) t.names.push_back(r.feature);
  t.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(ranges.size()));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.values.rows(); ++i)
    for (std::size_t j = 0; j < ranges.size(); ++j)
      t.values(i, static_cast<Eigen::Index>(j)) = rng.uniform(ranges[j].lo, ranges[j].hi);
  return t;
}

// ---------------------------------------------------------------------------

namespace {

void check_known(const std::string& feature, std::span<const std::string> known) {
  if (known.empty()) return;
  if (std::find(known.begin(), known.end(), feature) == known.end())
    throw Error(Errc::unknown_feature, "unknown feature '" + feature + "'");
}

struct OperationApplier {
  Rule& rule;
  std::span<const std::string> known;

  void operator()(const ModifyThreshold& op) const {
    check_known(op.feature, known);
    if (!std::isfinite(op.threshold)) throw Error(Errc::invalid_argument, "threshold must be finite");
    Condition* target = nullptr;
    for (auto& c : rule.conditions) {
      if (c.feature != op.feature || (op.op && c.op != *op.op)) continue;
      if (target)
        throw Error(Errc::invalid_argument,
                    "rule " + std::to_string(rule.id) + " tests '" + op.feature + "' twice; give op");
      target = &c;
    }
    if (!target)
      throw Error(Errc::invalid_argument,
                  "rule " + std::to_string(rule.id) + " has no condition on '" + op.feature + "'");
    target->threshold = op.threshold;
  }
  void operator()(const AddCondition& op) const {
    check_known(op.condition.feature, known);
    if (!std::isfinite(op.condition.threshold)) throw Error(Errc::invalid_argument, "threshold must be finite");
    rule.conditions.push_back(op.condition);
  }
  void operator()(const RemoveCondition& op) const {
    check_known(op.feature, known);
    auto it = std::find_if(rule.conditions.begin(), rule.conditions.end(),
                           [&](const Condition& c) { return c.feature == op.feature && c.op == op.op; });
    if (it == rule.conditions.end())
      throw Error(Errc::invalid_argument, "rule " + std::to_string(rule.id) + " has no condition '" +
                                              op.feature + " " + std::string(to_string(op.op)) + "'");
    rule.conditions.erase(it);
  }
  void operator()(const SetModel& op) const {
    if (!std::isfinite(op.model.beta0) ||
        !std::all_of(op.model.beta1.begin(), op.model.beta1.end(), [](double b) { return std::isfinite(b); }))
      throw Error(Errc::invalid_argument, "model coefficients must be finite");
    if (!rule.model.beta1.empty() && op.model.beta1.size() != rule.model.beta1.size())
      throw Error(Errc::invalid_argument, "model has " + std::to_string(op.model.beta1.size()) +
                                              " slopes, rule has " + std::to_string(rule.model.beta1.size()));
    rule.model = op.model;
  }
};

}  // namespace

EditResult apply_edit(const RuleSet& rs, const RuleEdit& e, std::span<const std::string> known_features,
                      const FeatureTable* sample) {
  EditResult out{rs, {}};
  auto it = std::find_if(out.rules.rules.begin(), out.rules.rules.end(),
                         [&](const Rule& r) { return r.id == e.rule_id; });
  if (it == out.rules.rules.end()) throw Error(Errc::not_found, "no rule with id " + std::to_string(e.rule_id));
  if (!e.operations.empty()) {
    Rule edited = *it;
    for (const auto& op : e.operations) std::visit(OperationApplier{edited, known_features}, op);
    if (!is_satisfiable(edited))
      throw Error(Errc::unsatisfiable_rule, "edited rule " + std::to_string(edited.id) + " admits no point");
    edited.provenance = Provenance::edited;
    *it = std::move(edited);
  }
  if (sample) out.report = validate(out.rules, *sample);
  return out;
}

std::vector<VisitRecord> sample_from_rule(const Rule& rule, std::span<const std::string> regressors,
                                          std::span<const CovariateRange> ranges, std::size_t n,
                                          double noise_sd, std::uint64_t seed, const SampleOptions& options) {
  if (n == 0) throw Error(Errc::invalid_argument, "n must be at least 1");
  if (!(noise_sd >= 0.0)) throw Error(Errc::invalid_argument, "noise sd must be non-negative");
  auto position = [&](const std::string& f) {
    for (std::size_t j = 0; j < ranges.size(); ++j)
      if (ranges[j].feature == f) return j;
    throw Error(Errc::unknown_feature, "no range for feature '" + f + "'");
  };
  std::vector<std::pair<std::size_t, Condition>> conds;
  for (const auto& c : rule.conditions) conds.emplace_back(position(c.feature), c);
  std::vector<std::size_t> reg_pos;
  for (const auto& r : regressors) reg_pos.push_back(position(r));
  if (rule.model.beta1.size() > reg_pos.size())
    throw Error(Errc::invalid_argument, "rule model has more slopes than regressors");

  constexpr double kMinRate = 1e-4;
  constexpr std::size_t kWarmup = 100000;
  Rng rng(seed);
  std::vector<VisitRecord> out;
  out.reserve(n);
  std::vector<double> x(ranges.size()), z(reg_pos.size());
  std::size_t draws = 0;
  while (out.size() < n) {
    ++draws;
    for (std::size_t j = 0; j < ranges.size(); ++j) x[j] = rng.uniform(ranges[j].lo, ranges[j].hi);
    bool ok = std::all_of(conds.begin(), conds.end(),
                          [&](const auto& pc) { return pc.second.satisfied_by(x[pc.first]); });
    if (ok) {
      for (std::size_t j = 0; j < reg_pos.size(); ++j) z[j] = x[reg_pos[j]];
      VisitRecord rec;
      rec.patient_id = options.patient_id;
      rec.care_date = options.start_date.plus_days(static_cast<int>(out.size()));
      rec.features = x;
      rec.target = rule.model.evaluate(z) + (noise_sd > 0.0 ? rng.normal(0.0, noise_sd) : 0.0);
      rec.weight = options.weight;
      rec.origin = Origin::synthetic;
      out.push_back(std::move(rec));
    }
    if (draws >= kWarmup && static_cast<double>(out.size()) < kMinRate * static_cast<double>(draws))
      throw Error(Errc::infeasible_region, "rule " + std::to_string(rule.id) + " accepted " +
                                               std::to_string(out.size()) + " of " + std::to_string(draws) +
                                               " draws within the covariate ranges");
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_text(const Rule& rule, std::span<const std::string> regressors, const std::string& target) {
  std::string s = "IF ";
  if (rule.conditions.empty()) s += "TRUE";
  for (std::size_t i = 0; i < rule.conditions.size(); ++i) {
    const auto& c = rule.conditions[i];
    if (i) s += kAnd;
    s += c.feature;
    s += c.op == CompareOp::le ? std::string(" ") + kLe + " " : " > ";
    s += format_number(c.threshold);
  }
  s += " THEN " + target + " = " + format_number(rule.model.beta0);
  for (std::size_t j = 0; j < rule.model.beta1.size(); ++j) {
    const double b = rule.model.beta1[j];
    s += std::signbit(b) ? " - " : " + ";
    s += format_number(std::fabs(b));
    s += " * ";
    s += j < regressors.size() ? regressors[j] : "x" + std::to_string(j + 1);
  }
  return s;
}

Rule parse_rule_text(const std::string& text, std::span<const std::string> regressors, int id) {
  auto fail = [&](const std::string& why) { return Error(Errc::invalid_argument, "rule text: " + why); };
  const std::string body = trim(text);
  if (body.rfind("IF ", 0) != 0) throw fail("must start with IF");
  const auto then = body.find(" THEN ");
  if (then == std::string::npos) throw fail("missing THEN");
  Rule r;
  r.id = id;

  const std::string lhs = trim(std::string_view(body).substr(3, then - 3));
  if (lhs != "TRUE") {
    std::size_t pos = 0;
    const std::string sep = kAnd;
    while (pos <= lhs.size()) {
      auto next = lhs.find(sep, pos);
      const std::string part = trim(std::string_view(lhs).substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      Condition c;
      const std::string le = std::string(" ") + kLe + " ";
      std::size_t at = part.rfind(le), width = le.size();
      if (at == std::string::npos) {
        at = part.rfind(" > ");
        width = 3;
        c.op = CompareOp::gt;
      }
      if (at == std::string::npos) throw fail("condition without operator: '" + part + "'");
      c.feature = trim(std::string_view(part).substr(0, at));
      c.threshold = parse_number(trim(std::string_view(part).substr(at + width)));
      r.conditions.push_back(std::move(c));
      if (next == std::string::npos) break;
      pos = next + sep.size();
    }
  }

  const std::string rhs = trim(std::string_view(body).substr(then + 6));
  const auto eq = rhs.find(" = ");
  if (eq == std::string::npos) throw fail("missing '='");
  std::string model = trim(std::string_view(rhs).substr(eq + 3));
  // Split "b0 + b1 * x1 - b2 * x2" into signed terms.
  std::vector<std::string> terms;
  std::vector<int> signs{1};
  std::size_t pos = 0;
  while (true) {
    const auto plus = model.find(" + ", pos), minus = model.find(" - ", pos);
    const auto next = std::min(plus, minus);
    terms.push_back(trim(std::string_view(model).substr(pos, next == std::string::npos ? std::string::npos : next - pos)));
    if (next == std::string::npos) break;
    signs.push_back(next == plus ? 1 : -1);
    pos = next + 3;
  }
  r.model.beta0 = parse_number(terms[0]);
  for (std::size_t t = 1; t < terms.size(); ++t) {
    const auto star = terms[t].find(" * ");
    if (star == std::string::npos) throw fail("term without '*': '" + terms[t] + "'");
    const std::string name = trim(std::string_view(terms[t]).substr(star + 3));
    if (t - 1 >= regressors.size() || regressors[t - 1] != name)
      throw fail("unexpected regressor '" + name + "'");
    r.model.beta1.push_back(signs[t] * parse_number(trim(std::string_view(terms[t]).substr(0, star))));
  }
  return r;
}

// ---------------------------------------------------------------------------

Json to_json(const Condition& c) {
  return Json{{"feature", c.feature}, {"op", to_string(c.op)}, {"threshold", c.threshold}};
}

Json to_json(const NodeModel& m) { return Json{{"beta0", m.beta0}, {"beta1", m.beta1}}; }

Json to_json(const Rule& r) {
  Json conds = Json::array();
  for (const auto& c : r.conditions) conds.push_back(to_json(c));
  return Json{{"id", r.id},
              {"conditions", std::move(conds)},
              {"model", to_json(r.model)},
              {"support", r.support},
              {"provenance", to_string(r.provenance)}};
}

Json to_json(const RuleSet& rs) {
  Json rules = Json::array();
  for (const auto& r : rs.rules) rules.push_back(to_json(r));
  return Json{{"version", rs.version}, {"regressors", rs.regressors}, {"rules", std::move(rules)}};
}

Json to_json(const RuleEdit& e) {
  Json ops = Json::array();
  for (const auto& op : e.operations) {
    std::visit(
        [&](const auto& o) {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, ModifyThreshold>) {
            Json j{{"type", "modify_threshold"}, {"feature", o.feature}, {"threshold", o.threshold}};
            if (o.op) j["op"] = to_string(*o.op);
            ops.push_back(std::move(j));
          } else if constexpr (std::is_same_v<T, AddCondition>) {
            ops.push_back(Json{{"type", "add_condition"}, {"condition", to_json(o.condition)}});
          } else if constexpr (std::is_same_v<T, RemoveCondition>) {
            ops.push_back(Json{{"type", "remove_condition"}, {"feature", o.feature}, {"op", to_string(o.op)}});
          } else {
            ops.push_back(Json{{"type", "set_model"}, {"model", to_json(o.model)}});
          }
        },
        op);
  }
  return Json{{"rule_id", e.rule_id}, {"operations", std::move(ops)}, {"author", e.author}, {"timestamp", e.timestamp}};
}

Json to_json(const ValidationReport& report) {
  Json overlaps = Json::array();
  for (const auto& [a, b] : report.overlaps) overlaps.push_back(Json::array({a, b}));
  return Json{{"overlaps", std::move(overlaps)},
              {"gaps", report.gaps},
              {"unsatisfiable", report.unsatisfiable},
              {"ok", report.ok()}};
}

Condition condition_from_json(const Json& j) {
  return Condition{get<std::string>(j, "feature"), compare_op_from_string(get<std::string>(j, "op")),
                   get_finite(j, "threshold")};
}

NodeModel node_model_from_json(const Json& j) {
  NodeModel m;
  m.beta0 = get_finite(j, "beta0");
  if (j.contains("beta1")) m.beta1 = get<std::vector<double>>(j, "beta1");
  for (double b : m.beta1)
    if (!std::isfinite(b)) throw Error(Errc::invalid_argument, "beta1 not finite");
  return m;
}

Rule rule_from_json(const Json& j) {
  Rule r;
  r.id = get<int>(j, "id");
  const Json conds = j.contains("conditions") ? j.at("conditions") : Json::array();
  if (!conds.is_array()) throw Error(Errc::invalid_argument, "conditions must be an array");
  for (const auto& c : conds) r.conditions.push_back(condition_from_json(c));
  if (!j.contains("model")) throw Error(Errc::invalid_argument, "missing field 'model'");
  r.model = node_model_from_json(j.at("model"));
  r.support = j.contains("support") ? get<long>(j, "support") : 0;
  if (r.support < 0) throw Error(Errc::invalid_argument, "support must be non-negative");
  const std::string prov = j.contains("provenance") ? get<std::string>(j, "provenance") : "learned";
  if (prov == "learned")
    r.provenance = Provenance::learned;
  else if (prov == "edited")
    r.provenance = Provenance::edited;
  else
    throw Error(Errc::invalid_argument, "provenance must be \"learned\" or \"edited\"");
  return r;
}

RuleSet rule_set_from_json(const Json& j) {
  RuleSet rs;
  rs.version = get<int>(j, "version");
  rs.regressors = get<std::vector<std::string>>(j, "regressors");
  if (!j.contains("rules") || !j.at("rules").is_array()) throw Error(Errc::invalid_argument, "rules must be an array");
  std::set<int> ids;
  for (const auto& r : j.at("rules")) {
    rs.rules.push_back(rule_from_json(r));
    if (!ids.insert(rs.rules.back().id).second)
      throw Error(Errc::duplicate_key, "duplicate rule id " + std::to_string(rs.rules.back().id));
  }
  return rs;
}

RuleEdit rule_edit_from_json(const Json& j) {
  RuleEdit e;
  e.rule_id = get<int>(j, "rule_id");
  if (j.contains("author")) e.author = get<std::string>(j, "author");
  if (j.contains("timestamp")) e.timestamp = get<std::string>(j, "timestamp");
  if (!j.contains("operations") || !j.at("operations").is_array())
    throw Error(Errc::invalid_argument, "operations must be an array");
  for (const auto& o : j.at("operations")) {
    const std::string type = get<std::string>(o, "type");
    if (type == "modify_threshold") {
      ModifyThreshold m{get<std::string>(o, "feature"), get_finite(o, "threshold"), std::nullopt};
      if (o.contains("op")) m.op = compare_op_from_string(get<std::string>(o, "op"));
      e.operations.emplace_back(std::move(m));
    } else if (type == "add_condition") {
      if (!o.contains("condition")) throw Error(Errc::invalid_argument, "missing field 'condition'");
      e.operations.emplace_back(AddCondition{condition_from_json(o.at("condition"))});
    } else if (type == "remove_condition") {
      e.operations.emplace_back(
          RemoveCondition{get<std::string>(o, "feature"), compare_op_from_string(get<std::string>(o, "op"))});
    } else if (type == "set_model") {
      if (!o.contains("model")) throw Error(Errc::invalid_argument, "missing field 'model'");
      e.operations.emplace_back(SetModel{node_model_from_json(o.at("model"))});
    } else {
      throw Error(Errc::invalid_argument, "unknown operation type '" + type + "'");
    }
  }
  return e;
}

}  // namespace mipd
