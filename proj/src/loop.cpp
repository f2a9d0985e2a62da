#include "mipd/loop.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "mipd/error.hpp"
#include "mipd/model_io.hpp"

namespace mipd {

// ---------------------------------------------------------------------------
// Metrics

EvalMetrics evaluate(std::span<const double> predictions, std::span<const double> truths,
                     std::span<const double> weights, const std::string& split) {
  if (predictions.size() != truths.size() || weights.size() != truths.size())
    throw Error(Errc::invalid_argument, "evaluate: predictions, truths and weights differ in length");
  if (truths.empty()) throw Error(Errc::empty_input, "evaluate: no rows");
  double sw = 0.0, sa = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const double e = predictions[i] - truths[i];
    if (!std::isfinite(e)) throw Error(Errc::invalid_argument, "evaluate: non-finite residual at row " + std::to_string(i + 1));
    sw += weights[i];
    sa += weights[i] * std::fabs(e);
    ss += weights[i] * e * e;
  }
  if (!(sw > 0.0)) throw Error(Errc::invalid_argument, "evaluate: weights sum to zero");
  EvalMetrics m;
  m.mae = sa / sw;
  m.rmse = std::sqrt(ss / sw);
  // Guard the Jensen bound against the last bit of rounding.
  m.rmse = std::max(m.rmse, m.mae);
  m.n = truths.size();
  m.split = split;
  return m;
}

EvalMetrics evaluate(std::span<const double> predictions, std::span<const double> truths, const std::string& split) {
  const std::vector<double> w(truths.size(), 1.0);
  return evaluate(predictions, truths, w, split);
}

EvalMetrics evaluate(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truths, const std::string& split) {
  return evaluate(std::span<const double>(predictions.data(), static_cast<std::size_t>(predictions.size())),
                  std::span<const double>(truths.data(), static_cast<std::size_t>(truths.size())), split);
}

// ---------------------------------------------------------------------------
// Advice

std::string_view to_string(AdviceKind k) {
  switch (k) {
    case AdviceKind::dose_suggestion: return "dose_suggestion";
    case AdviceKind::target_correction: return "target_correction";
    case AdviceKind::rule_edit_ref: return "rule_edit_ref";
  }
  return "target_correction";
}

AdviceKind advice_kind_from_string(std::string_view s) {
  if (s == "dose_suggestion") return AdviceKind::dose_suggestion;
  if (s == "target_correction") return AdviceKind::target_correction;
  if (s == "rule_edit_ref") return AdviceKind::rule_edit_ref;
  throw Error(Errc::invalid_argument, "unknown advice kind '" + std::string(s) + "'");
}

void check_advice(const AdvicePool& pool) {
  for (std::size_t i = 0; i < pool.records.size(); ++i) {
    const auto& r = pool.records[i];
    if (r.kind == AdviceKind::rule_edit_ref) {
      if (r.edit_index < 0 || static_cast<std::size_t>(r.edit_index) >= pool.edits.size())
        throw Error(Errc::invalid_argument, "advice " + std::to_string(i + 1) + " refers to a missing edit");
    } else if (!std::isfinite(r.advice)) {
      throw Error(Errc::invalid_argument, "advice " + std::to_string(i + 1) + " is not finite");
    }
  }
}

namespace {

std::string unit_key(const AdviceRecord& r) { return r.patient_id + "|" + r.care_date.to_string(); }

}  // namespace

std::map<AdviceKind, RatingsMatrix> advice_ratings(const AdvicePool& pool) {
  std::map<AdviceKind, std::vector<Rating>> by_kind;
  for (const auto& r : pool.records)
    if (r.kind != AdviceKind::rule_edit_ref) by_kind[r.kind].push_back({unit_key(r), r.rater_id, r.advice, 0});
  std::map<AdviceKind, RatingsMatrix> out;
  for (const auto& [kind, ratings] : by_kind) out.emplace(kind, ratings_matrix(ratings));
  return out;
}

PoolGate gate_pool(const AdvicePool& pool, const GateOptions& options) {
  PoolGate g;
  for (const auto& [kind, m] : advice_ratings(pool)) {
    try {
      auto result = reliability_gate(m, options.threshold, options.replicates, options.level, options.seed);
      if (!result.pass) {
        g.pass = false;
        g.reason += std::string(to_string(kind)) + ": alpha " + std::to_string(result.agreement.alpha.alpha) +
                    " below " + std::to_string(options.threshold) + "; ";
      }
      g.results.emplace(kind, std::move(result));
    } catch (const Error& e) {
      if (e.code() != Errc::empty_input) throw;
      g.pass = false;
      g.reason += std::string(to_string(kind)) + ": no visit rated by two raters; ";
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Merge

std::vector<CovariateRange> observed_ranges(const Dataset& d) {
  std::vector<CovariateRange> ranges;
  for (std::size_t j = 0; j < d.schema().size(); ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : d.records())
      if (std::isfinite(r.features[j])) {
        lo = std::min(lo, r.features[j]);
        hi = std::max(hi, r.features[j]);
      }
    if (lo > hi) lo = hi = 0.0;
    ranges.push_back({d.schema()[j], lo, hi});
  }
  return ranges;
}

Dataset append_rule_features(const Dataset& d, const RuleSet& rules) {
  const Membership m = encode(rules, d.features());
  std::vector<std::string> schema = d.schema();
  for (const auto& r : rules.rules) schema.push_back("rule_" + std::to_string(r.id));
  std::vector<VisitRecord> rows(d.records().begin(), d.records().end());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index k = 0; k < m.matrix.cols(); ++k)
      rows[i].features.push_back(m.matrix(static_cast<Eigen::Index>(i), k));
  return Dataset(std::move(schema), std::move(rows));
}

MergeResult merge_advice(const Dataset& train, const AdvicePool& pool, const MergePolicy& policy,
                         const MergeContext& context) {
  if (!pool.empty() && !context.gate_passed)
    throw Error(Errc::gate_not_passed, "advice pool has not passed the reliability gate");
  check_advice(pool);
  if (!(policy.advice_weight >= 0.0) || !std::isfinite(policy.advice_weight))
    throw Error(Errc::invalid_argument, "advice weight must be finite and non-negative");

  MergeResult out;
  std::vector<VisitRecord> rows(train.records().begin(), train.records().end());

  // Next free sequence number per (patient, date).
  std::map<std::pair<std::string, Date>, int> next_seq;
  for (const auto& r : rows) {
    int& s = next_seq[{r.patient_id, r.care_date}];
    s = std::max(s, r.sequence + 1);
  }

  // Mean advice per (kind, visit), in key order.
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<std::tuple<AdviceKind, std::string, Date>, Acc> grouped;
  for (const auto& a : pool.records) {
    if (a.kind == AdviceKind::rule_edit_ref) continue;
    auto& acc = grouped[{a.kind, a.patient_id, a.care_date}];
    acc.sum += a.advice;
    ++acc.n;
  }
  const auto dose = train.find_feature(policy.dose_feature);
  for (const auto& [key, acc] : grouped) {
    const auto& [kind, patient, date] = key;
    const auto idx = train.find_visit(patient, date);
    if (!idx) {
      ++out.report.display_only;
      continue;
    }
    VisitRecord copy = train.records()[*idx];
    const double mean = acc.sum / acc.n;
    if (kind == AdviceKind::target_correction) {
      copy.target = mean;
      ++out.report.target_rows;
    } else {
      if (!dose) throw Error(Errc::unknown_feature, "dose feature '" + policy.dose_feature + "' not in schema");
      if (is_missing(copy.target)) {
        ++out.report.display_only;
        continue;
      }
      copy.features[*dose] = mean;
      ++out.report.dose_rows;
    }
    copy.weight = policy.advice_weight;
    copy.origin = Origin::advice;
    copy.sequence = next_seq[{patient, date}]++;
    rows.push_back(std::move(copy));
  }

  if (!pool.edits.empty()) {
    const auto ranges = observed_ranges(train);
    const double noise = policy.synthetic_noise_sd >= 0.0 ? policy.synthetic_noise_sd : context.noise_sd;
    std::vector<std::string> regressors{policy.dose_feature};
    if (context.active_rules && !context.active_rules->regressors.empty())
      regressors = context.active_rules->regressors;
    for (std::size_t k = 0; k < pool.edits.size(); ++k) {
      Rule rule;
      if (k < pool.edited_rules.size()) {
        rule = pool.edited_rules[k];
      } else {
        if (!context.active_rules) throw Error(Errc::invalid_argument, "edits need the active rules");
        const auto edited = apply_edit(*context.active_rules, pool.edits[k], train.schema());
        rule = *edited.rules.find(pool.edits[k].rule_id);
      }
      SampleOptions opts;
      opts.patient_id = "edit-" + std::to_string(k + 1);
      opts.weight = policy.advice_weight;
      auto sampled = sample_from_rule(rule, regressors, ranges, static_cast<std::size_t>(policy.samples_per_rule),
                                      noise, member_seed(context.seed, k), opts);
      out.report.synthetic_rows += sampled.size();
      for (auto& s : sampled) rows.push_back(std::move(s));
    }
  }

  out.data = Dataset(train.schema(), std::move(rows));
  if (policy.rule_features) {
    if (!context.active_rules) throw Error(Errc::invalid_argument, "rule features need the active rules");
    out.data = append_rule_features(out.data, *context.active_rules);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

GlmmTreeFormula effective_formula(const LoopConfig& config, const Dataset& data) {
  GlmmTreeFormula f = config.formula;
  if (f.partitioners.empty()) {
    auto defaults = default_formula(data.schema(), f.regressors.empty() ? config.policy.dose_feature : f.regressors[0]);
    if (f.regressors.empty()) f.regressors = defaults.regressors;
    for (const auto& p : defaults.partitioners)
      if (std::find(f.regressors.begin(), f.regressors.end(), p) == f.regressors.end()) f.partitioners.push_back(p);
  }
  return f;
}

std::uint64_t refit_seed(const LoopConfig& c, int version) {
  return c.pin_refit_seed ? c.seed : member_seed(c.seed, static_cast<std::uint64_t>(version));
}

// Fits the model(s) of `state` on `data` (already augmented).
void fit_into(LoopState& state, const Dataset& data, GlmmTreeFormula formula, std::uint64_t seed) {
  if (state.feature_rules)
    for (const auto& r : state.feature_rules->rules) formula.partitioners.push_back("rule_" + std::to_string(r.id));
  const Dataset labeled = data.labeled();
  state.model = fit_glmm_tree(labeled, formula, state.config.params);
  state.ensemble.reset();
  if (state.config.bagged) {
    BaggingParams b = state.config.bagging;
    b.seed = seed;
    state.ensemble = fit_bagged_glmm_tree(labeled, formula, state.config.params, b);
  }
  state.rules = extract_rules(state.model);
  state.rules.version = state.version;
}

VersionMetrics measure(const LoopState& state, const Dataset& train, const Dataset& test, std::uint64_t seed) {
  VersionMetrics m;
  m.version = state.version;
  m.refit_seed = seed;
  const Dataset tr = train.labeled(), te = test.labeled();
  m.train = evaluate(predict_state(state, tr), tr.targets(), "train");
  m.test = evaluate(predict_state(state, te), te.targets(), "test");
  m.n_advice = state.pool.records.size();
  m.n_edits = state.pool.edits.size();

  // Advice-consistency loss over target corrections attached to training visits.
  std::map<std::pair<std::string, Date>, std::pair<double, int>> grouped;
  for (const auto& a : state.pool.records)
    if (a.kind == AdviceKind::target_correction) {
      auto& g = grouped[{a.patient_id, a.care_date}];
      g.first += a.advice;
      ++g.second;
    }
  std::vector<std::size_t> idx;
  std::vector<double> advice;
  for (const auto& [key, g] : grouped)
    if (auto i = train.find_visit(key.first, key.second)) {
      idx.push_back(*i);
      advice.push_back(g.first / g.second);
    }
  if (!idx.empty()) {
    const Eigen::VectorXd pred = predict_state(state, train.subset(idx));
    double loss = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) loss += std::fabs(pred[static_cast<Eigen::Index>(k)] - advice[k]);
    m.advice_loss = loss / static_cast<double>(idx.size());
  }
  return m;
}

}  // namespace

Eigen::VectorXd predict_state(const LoopState& state, const Dataset& d) {
  const Dataset rows = state.feature_rules ? append_rule_features(d, *state.feature_rules) : d;
  const FeatureTable X = rows.features();
  const auto clusters = rows.clusters();
  if (state.ensemble) return predict_bagged(*state.ensemble, X, clusters, PredictMode::conditional);
  return predict_glmm_tree(state.model, X, clusters, PredictMode::conditional);
}

LoopState initialize(const Dataset& train, const Dataset& test, const LoopConfig& config) {
  LoopState state;
  state.config = config;
  state.config.formula = effective_formula(config, train);
  const std::uint64_t seed = refit_seed(config, 0);
  fit_into(state, train, state.config.formula, seed);
  state.history.push_back(measure(state, train, test, seed));
  return state;
}

IterateOutcome iterate(const LoopState& state, const AdvicePool& batch, const Dataset& train, const Dataset& test) {
  if (state.version + 1 > state.config.max_versions)
    throw Error(Errc::conflict, "max_versions (" + std::to_string(state.config.max_versions) + ") reached");
  check_advice(batch);
  IterateOutcome out{state, {}, false};

  GateOptions gate = state.config.gate;
  gate.seed = member_seed(gate.seed, static_cast<std::uint64_t>(state.version));
  out.gate = gate_pool(batch, gate);
  if (!out.gate.pass) {
    out.state.log.push_back("v" + std::to_string(state.version) + ": batch of " +
                            std::to_string(batch.records.size()) + " advice records and " +
                            std::to_string(batch.edits.size()) + " edits rejected: " + out.gate.reason);
    return out;
  }

  // Accept: resolve edits against the rules they were made on.
  AdvicePool pool = state.pool;
  const auto edit_offset = static_cast<int>(pool.edits.size());
  for (std::size_t k = 0; k < batch.edits.size(); ++k) {
    Rule edited;
    if (k < batch.edited_rules.size()) {
      edited = batch.edited_rules[k];
    } else {
      const auto result = apply_edit(state.rules, batch.edits[k], train.schema());
      edited = *result.rules.find(batch.edits[k].rule_id);
    }
    pool.edits.push_back(batch.edits[k]);
    pool.edited_rules.push_back(std::move(edited));
  }
  for (auto r : batch.records) {
    if (r.kind == AdviceKind::rule_edit_ref) r.edit_index += edit_offset;
    pool.records.push_back(std::move(r));
  }

  LoopState& next = out.state;
  const std::uint64_t seed = refit_seed(state.config, state.version + 1);
  MergeContext ctx{&state.rules, std::sqrt(state.model.sigma2), seed, true};
  const MergeResult merged = merge_advice(train, pool, state.config.policy, ctx);

  next.version = state.version + 1;
  next.pool = std::move(pool);
  next.feature_rules.reset();
  if (state.config.policy.rule_features) next.feature_rules = state.rules;
  fit_into(next, merged.data, state.config.formula, seed);

  VersionMetrics m = measure(next, train, test, seed);
  for (const auto& [kind, g] : out.gate.results)
    m.alpha = m.alpha ? std::min(*m.alpha, g.agreement.alpha.alpha) : g.agreement.alpha.alpha;
  next.history.push_back(m);
  next.log.push_back("v" + std::to_string(next.version) + ": merged " + std::to_string(merged.report.target_rows) +
                     " corrections, " + std::to_string(merged.report.dose_rows) + " dose rows, " +
                     std::to_string(merged.report.synthetic_rows) + " synthetic rows");
  out.accepted = true;
  return out;
}

// ---------------------------------------------------------------------------
// Simulated expert

AdviceRecord oracle_expert(const SyntheticTruth& truth, std::span<const double> x, double y_hat, int rule_id,
                           double intercept, double noise_sd, Rng* rng) {
  AdviceRecord a;
  const auto names = truth.covariate_names();
  for (std::size_t j = 0; j < names.size() && j < x.size(); ++j) a.x_snapshot[names[j]] = x[j];
  a.y_hat = y_hat;
  a.rule_id = rule_id;
  a.kind = AdviceKind::target_correction;
  a.rater_id = "oracle";
  a.advice = truth.mean_response(x) + intercept;
  if (noise_sd > 0.0) {
    if (!rng) throw Error(Errc::invalid_argument, "oracle noise needs a generator");
    a.advice += rng->normal(0.0, noise_sd);
  }
  return a;
}

std::optional<RuleEdit> oracle_rule_edit(const SyntheticTruth& truth, const Rule& shown, double rho) {
  RuleEdit e;
  e.rule_id = shown.id;
  e.author = "oracle";
  for (const auto& c : shown.conditions) {
    std::optional<double> nearest;
    for (const auto& planted : truth.rules)
      for (const auto& pc : planted.conditions)
        if (pc.feature == c.feature &&
            (!nearest || std::fabs(pc.threshold - c.threshold) < std::fabs(*nearest - c.threshold)))
          nearest = pc.threshold;
    if (!nearest) continue;
    const double moved = rho == 1.0 ? *nearest : c.threshold + rho * (*nearest - c.threshold);
    if (moved != c.threshold) e.operations.emplace_back(ModifyThreshold{c.feature, moved, c.op});
  }
  if (e.operations.empty()) return std::nullopt;
  return e;
}

AdvicePool oracle_round(const LoopState& state, const SyntheticTruth& truth, const Dataset& train,
                        const OracleOptions& options) {
  std::set<std::pair<std::string, Date>> advised;
  for (const auto& a : state.pool.records) advised.emplace(a.patient_id, a.care_date);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < train.n_records(); ++i) {
    const auto& r = train.records()[i];
    if (r.origin == Origin::observed && !is_missing(r.target) && !advised.contains({r.patient_id, r.care_date}))
      candidates.push_back(i);
  }
  Rng rng(member_seed(options.seed, static_cast<std::uint64_t>(state.version)));
  const std::size_t k = std::min(candidates.size(), static_cast<std::size_t>(std::max(0, options.visits_per_round)));
  for (std::size_t i = 0; i < k; ++i) std::swap(candidates[i], candidates[i + rng.index(candidates.size() - i)]);
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());

  AdvicePool pool;
  if (candidates.empty()) return pool;
  const Dataset shown = train.subset(candidates);
  const Eigen::VectorXd y_hat = predict_state(state, shown);
  const Membership member = encode(state.rules, shown.features());
  const auto ncov = truth.ranges.size();
  for (std::size_t i = 0; i < shown.n_records(); ++i) {
    const auto& r = shown.records()[i];
    int rule_id = 0;
    for (Eigen::Index c = 0; c < member.matrix.cols(); ++c)
      if (member.matrix(static_cast<Eigen::Index>(i), c)) rule_id = state.rules.rules[static_cast<std::size_t>(c)].id;
    const auto it = truth.intercepts.find(r.patient_id);
    const double b = it == truth.intercepts.end() ? 0.0 : it->second;
    const std::span<const double> x(r.features.data(), ncov);
    for (int rater = 0; rater < options.raters; ++rater) {
      AdviceRecord a = oracle_expert(truth, x, y_hat[static_cast<Eigen::Index>(i)], rule_id, b, options.noise_sd, &rng);
      a.patient_id = r.patient_id;
      a.care_date = r.care_date;
      a.rater_id = "oracle-" + std::to_string(rater + 1);
      pool.records.push_back(std::move(a));
    }
  }
  if (options.rho > 0.0)
    for (const auto& rule : state.rules.rules)
      if (auto e = oracle_rule_edit(truth, rule, options.rho)) pool.edits.push_back(std::move(*e));
  return pool;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
double number_from(const Json& v) { return v.is_null() ? kMissing : v.get<double>(); }

template <typename T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return json_get<T>(j, key);
}

void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, std::string(what) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw Error(Errc::invalid_argument, std::string(what) + ": unknown key '" + it.key() + "'");
}

template <typename T>
void maybe(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = json_get<T>(j, key);
}

}  // namespace

Json to_json(const EvalMetrics& m) {
  return Json{{"mae", m.mae}, {"rmse", m.rmse}, {"n", m.n}, {"split", m.split}};
}

EvalMetrics eval_metrics_from_json(const Json& j) {
  return {json_get<double>(j, "mae"), json_get<double>(j, "rmse"), json_get<std::size_t>(j, "n"),
          j.contains("split") ? json_get<std::string>(j, "split") : std::string()};
}

Json to_json(const AdviceRecord& r) {
  Json x = Json::object();
  for (const auto& [k, v] : r.x_snapshot) x[k] = number_or_null(v);
  Json j{{"patient_id", r.patient_id}, {"care_date", r.care_date.to_string()}, {"x_snapshot", std::move(x)},
         {"y_hat", r.y_hat},           {"rule_id", r.rule_id},                 {"advice", r.advice},
         {"kind", to_string(r.kind)},  {"rater_id", r.rater_id},               {"timestamp", r.timestamp}};
  if (r.kind == AdviceKind::rule_edit_ref) j["edit_index"] = r.edit_index;
  return j;
}

AdviceRecord advice_record_from_json(const Json& j) {
  reject_unknown(j, {"patient_id", "care_date", "x_snapshot", "y_hat", "rule_id", "advice", "kind", "rater_id",
                     "timestamp", "edit_index"},
                 "advice record");
  AdviceRecord r;
  r.patient_id = json_get<std::string>(j, "patient_id");
  const auto date = json_get<std::string>(j, "care_date");
  const auto parsed = Date::parse(date);
  if (!parsed) throw Error(Errc::invalid_date, "care_date '" + date + "' is not YYYY-MM-DD");
  r.care_date = *parsed;
  if (j.contains("x_snapshot")) {
    const Json& x = j.at("x_snapshot");
    if (!x.is_object()) throw Error(Errc::invalid_argument, "x_snapshot must be an object");
    for (auto it = x.begin(); it != x.end(); ++it) {
      if (!it.value().is_null() && !it.value().is_number())
        throw Error(Errc::invalid_argument, "x_snapshot." + it.key() + " must be a number or null");
      r.x_snapshot[it.key()] = number_from(it.value());
    }
  }
  maybe(j, "y_hat", r.y_hat);
  maybe(j, "rule_id", r.rule_id);
  r.kind = advice_kind_from_string(json_get<std::string>(j, "kind"));
  if (r.kind != AdviceKind::rule_edit_ref) r.advice = json_get<double>(j, "advice");
  r.rater_id = json_get<std::string>(j, "rater_id");
  if (r.rater_id.empty()) throw Error(Errc::invalid_argument, "rater_id must not be empty");
  maybe(j, "timestamp", r.timestamp);
  maybe(j, "edit_index", r.edit_index);
  return r;
}

Json to_json(const AdvicePool& p) {
  Json records = Json::array(), edits = Json::array(), edited = Json::array();
  for (const auto& r : p.records) records.push_back(to_json(r));
  for (const auto& e : p.edits) edits.push_back(to_json(e));
  for (const auto& r : p.edited_rules) edited.push_back(to_json(r));
  return Json{{"records", std::move(records)}, {"edits", std::move(edits)}, {"edited_rules", std::move(edited)}};
}

AdvicePool advice_pool_from_json(const Json& j) {
  AdvicePool p;
  for (const auto& r : json_get<Json>(j, "records")) p.records.push_back(advice_record_from_json(r));
  for (const auto& e : json_get<Json>(j, "edits")) p.edits.push_back(rule_edit_from_json(e));
  if (j.contains("edited_rules"))
    for (const auto& r : j.at("edited_rules")) p.edited_rules.push_back(rule_from_json(r));
  return p;
}

Json to_json(const VersionMetrics& m) {
  return Json{{"version", m.version},
              {"train", to_json(m.train)},
              {"test", to_json(m.test)},
              {"advice_loss", optional_json(m.advice_loss)},
              {"n_advice", m.n_advice},
              {"n_edits", m.n_edits},
              {"alpha", optional_json(m.alpha)},
              {"refit_seed", m.refit_seed}};
}

VersionMetrics version_metrics_from_json(const Json& j) {
  VersionMetrics m;
  m.version = json_get<int>(j, "version");
  m.train = eval_metrics_from_json(json_get<Json>(j, "train"));
  m.test = eval_metrics_from_json(json_get<Json>(j, "test"));
  m.advice_loss = optional_from<double>(j, "advice_loss");
  m.n_advice = json_get<std::size_t>(j, "n_advice");
  m.n_edits = json_get<std::size_t>(j, "n_edits");
  m.alpha = optional_from<double>(j, "alpha");
  m.refit_seed = json_get<std::uint64_t>(j, "refit_seed");
  return m;
}

Json to_json(const MergePolicy& p) {
  return Json{{"advice_weight", p.advice_weight},
              {"samples_per_rule", p.samples_per_rule},
              {"rule_features", p.rule_features},
              {"synthetic_noise_sd", p.synthetic_noise_sd},
              {"dose_feature", p.dose_feature}};
}

MergePolicy merge_policy_from_json(const Json& j, MergePolicy p) {
  reject_unknown(j, {"advice_weight", "samples_per_rule", "rule_features", "synthetic_noise_sd", "dose_feature"},
                 "policy");
  maybe(j, "advice_weight", p.advice_weight);
  maybe(j, "samples_per_rule", p.samples_per_rule);
  maybe(j, "rule_features", p.rule_features);
  maybe(j, "synthetic_noise_sd", p.synthetic_noise_sd);
  maybe(j, "dose_feature", p.dose_feature);
  if (p.samples_per_rule < 1) throw Error(Errc::invalid_argument, "samples_per_rule must be at least 1");
  return p;
}

Json to_json(const GateOptions& g) {
  return Json{{"threshold", g.threshold}, {"replicates", g.replicates}, {"level", g.level}, {"seed", g.seed}};
}

GateOptions gate_options_from_json(const Json& j, GateOptions g) {
  reject_unknown(j, {"threshold", "replicates", "level", "seed"}, "gate");
  maybe(j, "threshold", g.threshold);
  maybe(j, "replicates", g.replicates);
  maybe(j, "level", g.level);
  maybe(j, "seed", g.seed);
  return g;
}

Json to_json(const PoolGate& g) {
  Json results = Json::object();
  for (const auto& [kind, r] : g.results)
    results[std::string(to_string(kind))] = Json{{"pass", r.pass},
                                                 {"alpha", r.agreement.alpha.alpha},
                                                 {"ci", Json::array({r.agreement.ci.low, r.agreement.ci.high})},
                                                 {"n_units", r.agreement.alpha.n_units}};
  return Json{{"pass", g.pass}, {"reason", g.reason}, {"results", std::move(results)}};
}

Json to_json(const LoopConfig& c) {
  return Json{{"formula", to_json(c.formula)},     {"glmmtree", to_json(c.params)},
              {"policy", to_json(c.policy)},       {"gate", to_json(c.gate)},
              {"seed", c.seed},                    {"pin_refit_seed", c.pin_refit_seed},
              {"bagged", c.bagged},                {"bagging", to_json(c.bagging)},
              {"max_versions", c.max_versions}};
}

LoopConfig loop_config_from_json(const Json& j, LoopConfig c) {
  reject_unknown(j, {"formula", "glmmtree", "policy", "gate", "seed", "pin_refit_seed", "bagged", "bagging",
                     "max_versions"},
                 "loop");
  if (j.contains("formula")) c.formula = formula_from_json(j.at("formula"), c.formula);
  if (j.contains("glmmtree")) c.params = glmm_params_from_json(j.at("glmmtree"), c.params);
  if (j.contains("policy")) c.policy = merge_policy_from_json(j.at("policy"), c.policy);
  if (j.contains("gate")) c.gate = gate_options_from_json(j.at("gate"), c.gate);
  if (j.contains("bagging")) c.bagging = bagging_params_from_json(j.at("bagging"), c.bagging);
  maybe(j, "seed", c.seed);
  maybe(j, "pin_refit_seed", c.pin_refit_seed);
  maybe(j, "bagged", c.bagged);
  maybe(j, "max_versions", c.max_versions);
  return c;
}

// ---------------------------------------------------------------------------
// Snapshots

std::map<std::string, Json> snapshot_files(const LoopState& state) {
  std::map<std::string, Json> files;
  files["rules.json"] = to_json(state.rules);
  files["variances.json"] =
      Json{{"sigma2", state.model.sigma2}, {"sigma_b2", state.model.sigma_b2}, {"b_hat", to_json(state.model.b_hat)}};
  Json metrics = Json::array();
  for (const auto& m : state.history) metrics.push_back(to_json(m));
  files["metrics.json"] = std::move(metrics);
  files["pool.json"] = to_json(state.pool);
  files["config.json"] = to_json(state.config);
  Json model{{"version", state.version}, {"glmmtree", to_json(state.model)}};
  if (state.ensemble) model["ensemble"] = to_json(*state.ensemble);
  if (state.feature_rules) model["feature_rules"] = to_json(*state.feature_rules);
  files["model.json"] = std::move(model);
  files["log.json"] = Json(state.log);
  return files;
}

std::filesystem::path save_snapshot(const LoopState& state, const std::filesystem::path& root) {
  const auto dir = root / ("v" + std::to_string(state.version));
  std::filesystem::create_directories(dir);
  for (const auto& [name, j] : snapshot_files(state)) write_json_file(dir / name, j);
  return dir;
}

LoopState load_snapshot(const std::filesystem::path& dir) {
  LoopState s;
  const Json model = read_json_file(dir / "model.json");
  s.version = json_get<int>(model, "version");
  s.model = glmm_tree_fit_from_json(json_get<Json>(model, "glmmtree"));
  if (model.contains("ensemble")) s.ensemble = bagged_from_json(model.at("ensemble"));
  if (model.contains("feature_rules")) s.feature_rules = rule_set_from_json(model.at("feature_rules"));
  s.rules = rule_set_from_json(read_json_file(dir / "rules.json"));
  for (const auto& m : read_json_file(dir / "metrics.json")) s.history.push_back(version_metrics_from_json(m));
  s.pool = advice_pool_from_json(read_json_file(dir / "pool.json"));
  s.config = loop_config_from_json(read_json_file(dir / "config.json"));
  s.log = read_json_file(dir / "log.json").get<std::vector<std::string>>();
  return s;
}

std::vector<int> snapshot_versions(const std::filesystem::path& root) {
  std::vector<int> out;
  if (!std::filesystem::is_directory(root)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.size() < 2 || name[0] != 'v') continue;
    if (name.find_first_not_of("0123456789", 1) != std::string::npos) continue;
    if (std::filesystem::exists(entry.path() / "model.json")) out.push_back(std::stoi(name.substr(1)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

AdvicePool pool_delta(const AdvicePool& before, const AdvicePool& after) {
  if (after.records.size() < before.records.size() || after.edits.size() < before.edits.size() ||
      after.edited_rules.size() < before.edited_rules.size())
    throw Error(Errc::invalid_argument, "pool does not extend the earlier pool");
  AdvicePool batch;
  const auto edit_offset = static_cast<int>(before.edits.size());
  for (std::size_t i = before.records.size(); i < after.records.size(); ++i) {
    AdviceRecord r = after.records[i];
    if (r.kind == AdviceKind::rule_edit_ref) r.edit_index -= edit_offset;
    batch.records.push_back(std::move(r));
  }
  batch.edits.assign(after.edits.begin() + edit_offset, after.edits.end());
  batch.edited_rules.assign(after.edited_rules.begin() + static_cast<std::ptrdiff_t>(before.edited_rules.size()),
                            after.edited_rules.end());
  return batch;
}

std::vector<ReplayCheck> replay_snapshots(const std::filesystem::path& root, const Dataset& train,
                                          const Dataset& test) {
  const auto versions = snapshot_versions(root);
  std::vector<ReplayCheck> out;
  for (std::size_t i = 0; i + 1 < versions.size(); ++i) {
    const LoopState from = load_snapshot(root / ("v" + std::to_string(versions[i])));
    const LoopState to = load_snapshot(root / ("v" + std::to_string(versions[i + 1])));
    ReplayCheck check{versions[i], versions[i + 1], true, {}};
    const IterateOutcome rerun = iterate(from, pool_delta(from.pool, to.pool), train, test);
    if (!rerun.accepted) {
      check.identical = false;
      check.differing.push_back("gate");
    } else {
      const auto expected = snapshot_files(to);
      const auto actual = snapshot_files(rerun.state);
      for (const auto& [name, j] : expected)
        if (name != "log.json" && actual.at(name).dump() != j.dump()) {
          check.identical = false;
          check.differing.push_back(name);
        }
    }
    out.push_back(std::move(check));
  }
  return out;
}

}  // namespace mipd
