#include "mipd/service.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include <httplib.h>

#include "mipd/error.hpp"
#include "mipd/rules.hpp"

namespace mipd {

namespace {

Dataset combine(const Dataset& train, const Dataset& test) {
  std::vector<VisitRecord> rows(train.records().begin(), train.records().end());
  rows.insert(rows.end(), test.records().begin(), test.records().end());
  return Dataset(train.schema(), std::move(rows));
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

int parse_int(const std::string& s, const char* what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw Error(Errc::invalid_argument, std::string(what) + " must be an integer, got '" + s + "'");
  return v;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> grid;
  std::stringstream in(s);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v))
      throw Error(Errc::invalid_argument, "grid value '" + cell + "' is not a number");
    grid.push_back(v);
  }
  if (grid.empty()) throw Error(Errc::invalid_argument, "grid is empty");
  return grid;
}

Json parse_body(const std::string& body) {
  try {
    return Json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("body is not JSON: ") + e.what());
  }
}

int status_for(Errc code) {
  switch (code) {
    case Errc::not_found: return 404;
    case Errc::conflict:
    case Errc::duplicate_key:
    case Errc::gate_not_passed: return 409;
    case Errc::unsatisfiable_rule:
    case Errc::infeasible_region: return 422;
    case Errc::io: return 500;
    default: return 400;
  }
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json features_json(const std::vector<std::string>& schema, const std::vector<double>& x) {
  Json j = Json::object();
  for (std::size_t k = 0; k < schema.size(); ++k) j[schema[k]] = number_or_null(x[k]);
  return j;
}

}  // namespace

Service::Service(LoopState state, Dataset train, Dataset test, ServiceOptions options)
    : state_(std::move(state)),
      train_(std::move(train)),
      test_(std::move(test)),
      all_(combine(train_, test_)),
      options_(std::move(options)) {
  std::set<std::tuple<std::string, Date, int>> test_keys;
  for (const auto& r : test_.records()) test_keys.emplace(r.patient_id, r.care_date, r.sequence);
  for (const auto& r : all_.records()) in_test_.push_back(test_keys.contains({r.patient_id, r.care_date, r.sequence}));
}

LoopState Service::state() const {
  std::shared_lock lock(state_mu_);
  return state_;
}

int Service::version() const {
  std::shared_lock lock(state_mu_);
  return state_.version;
}

AdvicePool Service::staged() const {
  std::lock_guard lock(staged_mu_);
  return staged_;
}

void Service::on_iterate(std::function<void(int)> callback) { on_iterate_ = std::move(callback); }

Json Service::with_version(Json body) const {
  Json out{{"model_version", state_.version}};
  for (auto it = body.begin(); it != body.end(); ++it) out[it.key()] = it.value();
  return out;
}

ApiResponse Service::handle(const std::string& method, const std::string& path,
                            const std::map<std::string, std::string>& query, const std::string& body,
                            const std::string& authorization) {
  auto error = [&](int status, const std::string& code, const std::string& detail) {
    std::shared_lock lock(state_mu_);
    return ApiResponse{status, Json{{"error", code}, {"detail", detail}, {"model_version", state_.version}}};
  };
  if (!options_.token.empty() && authorization != "Bearer " + options_.token)
    return error(401, "unauthorized", "missing or wrong bearer token");
  const auto parts = split_path(path);
  if (parts.size() < 2 || parts[0] != "api" || parts[1] != "v1") return error(404, "not-found", "unknown path " + path);
  try {
    return route(method, std::vector<std::string>(parts.begin() + 2, parts.end()), query, body);
  } catch (const Error& e) {
    return error(status_for(e.code()), std::string(to_string(e.code())), e.what());
  } catch (const std::exception& e) {
    return error(500, "internal", e.what());
  }
}

ApiResponse Service::route(const std::string& method, const std::vector<std::string>& p,
                           const std::map<std::string, std::string>& query, const std::string& body) {
  auto is = [&](std::initializer_list<const char*> shape) {
    if (p.size() != shape.size()) return false;
    std::size_t i = 0;
    for (const char* s : shape) {
      if (std::string_view(s) != "*" && p[i] != s) return false;
      ++i;
    }
    return true;
  };
  const bool get = method == "GET", post = method == "POST";
  if (get && is({"rules"})) return get_rules();
  if (get && is({"rules", "*"})) return get_rule(parse_int(p[1], "rule id"));
  if (post && is({"rules", "*", "edits"})) {
    const auto dry = query.find("dry_run");
    return post_edit(parse_int(p[1], "rule id"), body, dry != query.end() && dry->second == "true");
  }
  if (get && is({"patients"})) return get_patients(query);
  if (get && is({"patients", "*", "trajectory"})) return get_trajectory(p[1]);
  if (get && is({"patients", "*", "dose-response"})) return get_dose_response(p[1], query);
  if (post && is({"annotations"})) return post_annotation(body);
  if (get && is({"annotations"})) return get_annotations(query);
  if (get && is({"agreement"})) return get_agreement();
  if (post && is({"loop", "iterate"})) return post_iterate();
  if (get && is({"metrics"})) return get_metrics();
  if (get && is({"versions"})) return get_versions();
  throw Error(Errc::not_found, "no endpoint " + method + " /api/v1/" + [&] {
    std::string s;
    for (std::size_t i = 0; i < p.size(); ++i) s += (i ? "/" : "") + p[i];
    return s;
  }());
}

// ---------------------------------------------------------------------------

ApiResponse Service::get_rules() const {
  std::shared_lock lock(state_mu_);
  return {200, with_version(to_json(state_.rules))};
}

ApiResponse Service::get_rule(int id) const {
  std::shared_lock lock(state_mu_);
  const Rule* r = state_.rules.find(id);
  if (!r) throw Error(Errc::not_found, "no rule with id " + std::to_string(id));
  const Membership m = encode(RuleSet{{*r}, state_.rules.version, state_.rules.regressors}, all_.features());
  return {200, with_version(Json{{"rule", to_json(*r)},
                                 {"text", to_text(*r, state_.rules.regressors)},
                                 {"members", m.matrix.sum()}})};
}

ApiResponse Service::post_edit(int id, const std::string& body, bool dry_run) {
  Json j = parse_body(body);
  if (!j.is_object()) throw Error(Errc::invalid_argument, "edit must be a JSON object");
  if (j.contains("rule_id") && json_get<int>(j, "rule_id") != id)
    throw Error(Errc::invalid_argument, "rule_id in body differs from the path");
  j["rule_id"] = id;
  const RuleEdit edit = rule_edit_from_json(j);

  std::shared_lock lock(state_mu_);
  const auto ranges = observed_ranges(train_);
  const FeatureTable sample = sample_domain(ranges, 2000, options_.seed);
  const EditResult result = apply_edit(state_.rules, edit, train_.schema(), &sample);
  const Rule& edited = *result.rules.find(id);
  Json out{{"edit", to_json(edit)},
           {"rule", to_json(edited)},
           {"text", to_text(edited, state_.rules.regressors)},
           {"report", to_json(result.report)},
           {"covered", encode(RuleSet{{edited}, 0, {}}, sample).matrix.sum()}};
  if (dry_run) {
    Json preview = Json::array();
    try {
      for (const auto& rec : sample_from_rule(edited, state_.rules.regressors, ranges, options_.preview_samples,
                                              std::sqrt(state_.model.sigma2), options_.seed))
        preview.push_back(Json{{"features", features_json(train_.schema(), rec.features)}, {"target", rec.target}});
      out["preview"] = std::move(preview);
    } catch (const Error& e) {
      if (e.code() != Errc::infeasible_region) throw;
      out["preview"] = Json::array();
      out["preview_error"] = e.what();
    }
    return {200, with_version(std::move(out))};
  }
  std::lock_guard staged_lock(staged_mu_);
  staged_.edits.push_back(edit);
  staged_.edited_rules.push_back(edited);
  out["edit_index"] = staged_.edits.size() - 1;
  return {201, with_version(std::move(out))};
}

std::vector<std::size_t> Service::patient_rows(const std::string& patient) const {
  std::vector<std::size_t> rows;
  const auto recs = all_.records();
  auto it = std::lower_bound(recs.begin(), recs.end(), patient,
                             [](const VisitRecord& r, const std::string& id) { return r.patient_id < id; });
  for (; it != recs.end() && it->patient_id == patient; ++it) rows.push_back(static_cast<std::size_t>(it - recs.begin()));
  if (rows.empty()) throw Error(Errc::not_found, "no patient '" + patient + "'");
  return rows;
}

ApiResponse Service::get_patients(const std::map<std::string, std::string>& query) const {
  std::shared_lock lock(state_mu_);
  std::optional<int> rule;
  if (auto it = query.find("rule"); it != query.end()) rule = parse_int(it->second, "rule");
  std::optional<Eigen::Index> col;
  Membership m;
  if (rule) {
    for (std::size_t k = 0; k < state_.rules.rules.size(); ++k)
      if (state_.rules.rules[k].id == *rule) col = static_cast<Eigen::Index>(k);
    if (!col) throw Error(Errc::not_found, "no rule with id " + std::to_string(*rule));
    m = encode(state_.rules, all_.features());
  }
  Json patients = Json::array();
  const auto recs = all_.records();
  for (std::size_t i = 0; i < recs.size();) {
    std::size_t j = i;
    long in_rule = 0;
    for (; j < recs.size() && recs[j].patient_id == recs[i].patient_id; ++j)
      if (col) in_rule += m.matrix(static_cast<Eigen::Index>(j), *col);
    if (!col || in_rule > 0) {
      Json p{{"patient_id", recs[i].patient_id}, {"n_visits", j - i}};
      if (col) p["n_in_rule"] = in_rule;
      patients.push_back(std::move(p));
    }
    i = j;
  }
  return {200, with_version(Json{{"rule", rule ? Json(*rule) : Json(nullptr)}, {"patients", std::move(patients)}})};
}

ApiResponse Service::get_trajectory(const std::string& patient) const {
  std::shared_lock lock(state_mu_);
  const auto rows = patient_rows(patient);
  const Dataset d = all_.subset(rows);
  const Eigen::VectorXd y_hat = predict_state(state_, d);
  const Membership m = encode(state_.rules, d.features());
  Json visits = Json::array();
  for (std::size_t i = 0; i < d.n_records(); ++i) {
    const auto& r = d.records()[i];
    Json rule = nullptr;
    for (Eigen::Index k = 0; k < m.matrix.cols(); ++k)
      if (m.matrix(static_cast<Eigen::Index>(i), k)) rule = state_.rules.rules[static_cast<std::size_t>(k)].id;
    visits.push_back(Json{{"care_date", r.care_date.to_string()},
                          {"split", in_test_[rows[i]] ? "test" : "train"},
                          {"origin", to_string(r.origin)},
                          {"target", number_or_null(r.target)},
                          {"y_hat", y_hat[static_cast<Eigen::Index>(i)]},
                          {"rule_id", rule},
                          {"features", features_json(d.schema(), r.features)}});
  }
  const auto b = state_.model.b_hat.find(patient);
  return {200, with_version(Json{{"patient_id", patient},
                                 {"b_hat", b == state_.model.b_hat.end() ? Json(nullptr) : Json(b->second)},
                                 {"visits", std::move(visits)}})};
}

ApiResponse Service::get_dose_response(const std::string& patient,
                                       const std::map<std::string, std::string>& query) const {
  std::shared_lock lock(state_mu_);
  const auto rows = patient_rows(patient);
  std::size_t row = rows.back();
  if (auto it = query.find("visit"); it != query.end()) {
    const auto date = Date::parse(it->second);
    if (!date) throw Error(Errc::invalid_date, "visit '" + it->second + "' is not YYYY-MM-DD");
    auto found = std::find_if(rows.begin(), rows.end(), [&](std::size_t i) { return all_.records()[i].care_date == *date; });
    if (found == rows.end()) throw Error(Errc::not_found, "patient '" + patient + "' has no visit on " + it->second);
    row = *found;
  }
  const std::vector<double> grid =
      query.contains("grid") ? parse_grid(query.at("grid")) : options_.dose_grid;
  const std::vector<std::size_t> one{row};
  Dataset d = all_.subset(one);
  if (state_.feature_rules) d = append_rule_features(d, *state_.feature_rules);
  const FeatureTable x = d.features();
  std::vector<DosePoint> points;
  double current = 0.0;
  if (auto it = query.find("current_hb"); it != query.end()) {
    std::size_t used = 0;
    current = std::stod(it->second, &used);
    if (used != it->second.size() || !std::isfinite(current))
      throw Error(Errc::invalid_argument, "current_hb must be a number");
    points = dose_response(state_.model, x, patient, grid, current);
  } else {
    if (!x.find(options_.level_feature))
      throw Error(Errc::invalid_argument, "no '" + options_.level_feature + "' column; pass current_hb");
    current = x.values(0, static_cast<Eigen::Index>(x.index_of(options_.level_feature)));
    points = dose_response(state_.model, x, patient, grid, options_.level_feature);
  }
  Json pts = Json::array();
  for (const auto& p : points)
    pts.push_back(Json{{"dose", p.dose}, {"delta_hb", p.delta_hb}, {"projected_hb", p.projected_hb}});
  return {200, with_version(Json{{"patient_id", patient},
                                 {"care_date", all_.records()[row].care_date.to_string()},
                                 {"current_hb", number_or_null(current)},
                                 {"points", std::move(pts)}})};
}

ApiResponse Service::post_annotation(const std::string& body) {
  AdviceRecord rec = advice_record_from_json(parse_body(body));
  std::shared_lock lock(state_mu_);
  const auto idx = all_.find_visit(rec.patient_id, rec.care_date);
  if (!idx)
    throw Error(Errc::not_found, "no visit for patient '" + rec.patient_id + "' on " + rec.care_date.to_string());
  const Json raw = parse_body(body);
  const auto& visit = all_.records()[*idx];
  // Fill what the interface showed when the client did not echo it.
  if (rec.x_snapshot.empty())
    for (std::size_t k = 0; k < all_.schema().size(); ++k) rec.x_snapshot[all_.schema()[k]] = visit.features[k];
  if (!raw.contains("y_hat") || !raw.contains("rule_id")) {
    const std::vector<std::size_t> one{*idx};
    const Dataset d = all_.subset(one);
    if (!raw.contains("y_hat")) rec.y_hat = predict_state(state_, d)[0];
    if (!raw.contains("rule_id")) {
      const Membership m = encode(state_.rules, d.features());
      for (Eigen::Index k = 0; k < m.matrix.cols(); ++k)
        if (m.matrix(0, k)) rec.rule_id = state_.rules.rules[static_cast<std::size_t>(k)].id;
    }
  }

  std::lock_guard staged_lock(staged_mu_);
  if (rec.kind == AdviceKind::rule_edit_ref) {
    if (rec.edit_index < 0 || static_cast<std::size_t>(rec.edit_index) >= staged_.edits.size())
      throw Error(Errc::invalid_argument, "edit_index does not name a staged edit");
  } else {
    if (!std::isfinite(rec.advice)) throw Error(Errc::invalid_argument, "advice must be finite");
    for (const auto& r : staged_.records)
      if (r.kind == rec.kind && r.rater_id == rec.rater_id && r.patient_id == rec.patient_id &&
          r.care_date == rec.care_date)
        throw Error(Errc::conflict, "rater '" + rec.rater_id + "' already advised on this visit");
  }
  staged_.records.push_back(rec);
  submitted_.push_back({state_.version, rec});
  return {201, with_version(Json{{"annotation", to_json(rec)}, {"index", staged_.records.size() - 1}})};
}

ApiResponse Service::get_annotations(const std::map<std::string, std::string>& query) const {
  std::shared_lock lock(state_mu_);
  std::string which = "current";
  if (auto it = query.find("version"); it != query.end()) which = it->second;
  std::optional<std::string> rater;
  if (auto it = query.find("rater"); it != query.end()) rater = it->second;
  std::lock_guard staged_lock(staged_mu_);
  const auto& source = which == "quarantined" ? quarantined_ : submitted_;
  std::optional<int> version;
  if (which == "current")
    version = state_.version;
  else if (which != "all" && which != "quarantined")
    version = parse_int(which, "version");
  Json list = Json::array();
  for (const auto& s : source) {
    if (version && s.version != *version) continue;
    if (rater && s.record.rater_id != *rater) continue;
    Json j = to_json(s.record);
    j["submitted_version"] = s.version;
    list.push_back(std::move(j));
  }
  return {200, with_version(Json{{"annotations", std::move(list)}})};
}

ApiResponse Service::get_agreement() const {
  std::shared_lock lock(state_mu_);
  AdvicePool batch;
  {
    std::lock_guard staged_lock(staged_mu_);
    batch = staged_;
  }
  GateOptions gate = state_.config.gate;
  gate.seed = member_seed(gate.seed, static_cast<std::uint64_t>(state_.version));
  Json kinds = Json::object();
  for (const auto& [kind, m] : advice_ratings(batch)) {
    Json k{{"n_units", m.n_units()}, {"n_raters", m.n_raters()}};
    try {
      const auto g = reliability_gate(m, gate.threshold, gate.replicates, gate.level, gate.seed);
      k["alpha"] = g.agreement.alpha.alpha;
      k["ci"] = Json::array({g.agreement.ci.low, g.agreement.ci.high});
      k["level"] = g.agreement.ci.level;
      k["n_pairable"] = g.agreement.alpha.n_pairable;
      k["degenerate"] = g.agreement.alpha.degenerate;
      k["pass"] = g.pass;
    } catch (const Error& e) {
      if (e.code() != Errc::empty_input) throw;
      k["alpha"] = nullptr;
      k["pass"] = false;
      k["detail"] = e.what();
    }
    kinds[std::string(to_string(kind))] = std::move(k);
  }
  return {200, with_version(Json{{"threshold", gate.threshold},
                                 {"n_annotations", batch.records.size()},
                                 {"kinds", std::move(kinds)}})};
}

ApiResponse Service::post_iterate() {
  std::unique_lock iterate_lock(iterate_mu_, std::try_to_lock);
  if (!iterate_lock.owns_lock()) throw Error(Errc::conflict, "an iteration is already running");
  LoopState current;
  AdvicePool batch;
  {
    std::shared_lock lock(state_mu_);
    current = state_;
    std::lock_guard staged_lock(staged_mu_);
    batch = staged_;
  }
  IterateOutcome out = iterate(current, batch, train_, test_);
  {
    std::unique_lock lock(state_mu_);
    std::lock_guard staged_lock(staged_mu_);
    // Drop the consumed batch; keep what arrived while iterating.
    const auto n_rec = batch.records.size(), n_edit = batch.edits.size();
    staged_.records.erase(staged_.records.begin(), staged_.records.begin() + static_cast<std::ptrdiff_t>(n_rec));
    staged_.edits.erase(staged_.edits.begin(), staged_.edits.begin() + static_cast<std::ptrdiff_t>(n_edit));
    staged_.edited_rules.erase(staged_.edited_rules.begin(),
                               staged_.edited_rules.begin() + static_cast<std::ptrdiff_t>(n_edit));
    for (auto& r : staged_.records)
      if (r.kind == AdviceKind::rule_edit_ref) r.edit_index -= static_cast<int>(n_edit);
    if (!out.accepted)
      for (const auto& r : batch.records) quarantined_.push_back({current.version, r});
    state_ = std::move(out.state);
    if (out.accepted && options_.snapshot_dir) save_snapshot(state_, *options_.snapshot_dir);
  }
  std::shared_lock lock(state_mu_);
  Json body{{"accepted", out.accepted},
            {"gate", to_json(out.gate)},
            {"metrics", to_json(state_.history.back())},
            {"log", state_.log.empty() ? Json(nullptr) : Json(state_.log.back())}};
  const int version = state_.version;
  auto response = ApiResponse{200, with_version(std::move(body))};
  lock.unlock();
  if (out.accepted && on_iterate_) on_iterate_(version);
  return response;
}

ApiResponse Service::get_metrics() const {
  std::shared_lock lock(state_mu_);
  Json history = Json::array();
  for (const auto& m : state_.history) history.push_back(to_json(m));
  return {200, with_version(Json{{"history", std::move(history)}})};
}

ApiResponse Service::get_versions() const {
  std::shared_lock lock(state_mu_);
  Json versions = Json::array();
  for (const auto& m : state_.history)
    versions.push_back(Json{{"version", m.version}, {"test_mae", m.test.mae}, {"n_advice", m.n_advice}});
  Json snapshots = Json::array();
  if (options_.snapshot_dir)
    for (int v : snapshot_versions(*options_.snapshot_dir)) snapshots.push_back(v);
  return {200, with_version(Json{{"versions", std::move(versions)}, {"snapshots", std::move(snapshots)}})};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  explicit Impl(Service& s) : service(s) {}
  Service& service;
  httplib::Server server;
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const ApiResponse r = impl_->service.handle(req.method, req.path, query, req.body,
                                                req.get_header_value("Authorization"));
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->server.Get(R"(/api/v1/.*)", handler);
  impl_->server.Post(R"(/api/v1/.*)", handler);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error(Errc::io, "cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error(Errc::io, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }
void HttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}
void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace mipd
