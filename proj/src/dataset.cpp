#include "mipd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "mipd/csv.hpp"
#include "mipd/error.hpp"
#include "mipd/random.hpp"

namespace mipd {

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::observed: return "observed";
    case Origin::advice: return "advice";
    case Origin::synthetic: return "synthetic";
  }
  return "observed";
}

Origin origin_from_string(std::string_view text) {
  if (text == "observed" || text.empty()) return Origin::observed;
  if (text == "advice") return Origin::advice;
  if (text == "synthetic") return Origin::synthetic;
  throw Error(Errc::invalid_argument, "unknown origin '" + std::string(text) + "'");
}

namespace {

// NaN-aware equality so that missing cells compare equal.
bool same_value(double a, double b) {
  return (is_missing(a) && is_missing(b)) || a == b;
}

auto record_key(const VisitRecord& r) {
  return std::tie(r.patient_id, r.care_date, r.sequence);
}

}  // namespace

bool operator==(const VisitRecord& a, const VisitRecord& b) {
  if (record_key(a) != record_key(b) || a.weight != b.weight || a.origin != b.origin ||
      !same_value(a.target, b.target) || a.features.size() != b.features.size()) {
    return false;
  }
  for (std::size_t j = 0; j < a.features.size(); ++j) {
    if (!same_value(a.features[j], b.features[j])) return false;
  }
  return true;
}

Dataset::Dataset(std::vector<std::string> schema, std::vector<VisitRecord> records)
    : schema_(std::move(schema)), records_(std::move(records)) {
  std::set<std::string> seen;
  for (const auto& name : schema_) {
    if (name == kIdColumn || name == kDateColumn || !seen.insert(name).second) {
      throw Error(Errc::name_collision, "schema feature name '" + name + "' is reserved or repeated");
    }
  }
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.features.size() != schema_.size()) {
      throw Error(Errc::invalid_argument, "record " + std::to_string(i + 1) +
                                              " does not match the schema width");
    }
    if (!(r.weight >= 0.0) || !std::isfinite(r.weight)) {
      throw Error(Errc::invalid_argument, "record " + std::to_string(i + 1) + " has a negative weight");
    }
    if (std::isinf(r.target)) {
      throw Error(Errc::invalid_argument, "record " + std::to_string(i + 1) + " has a non-finite target");
    }
  }
  std::stable_sort(records_.begin(), records_.end(),
                   [](const VisitRecord& a, const VisitRecord& b) { return record_key(a) < record_key(b); });
  for (std::size_t i = 1; i < records_.size(); ++i) {
    if (record_key(records_[i - 1]) == record_key(records_[i])) {
      throw Error(Errc::duplicate_key, "duplicate visit (" + records_[i].patient_id + ", " +
                                           records_[i].care_date.to_string() + ")");
    }
  }
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (i == 0 || records_[i].patient_id != records_[i - 1].patient_id) ++n_patients_;
  }
}

std::optional<std::size_t> Dataset::find_feature(std::string_view name) const {
  auto it = std::find(schema_.begin(), schema_.end(), name);
  if (it == schema_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - schema_.begin());
}

std::size_t Dataset::feature_index(std::string_view name) const {
  if (auto i = find_feature(name)) return *i;
  throw Error(Errc::unknown_feature, "unknown feature '" + std::string(name) + "'");
}

FeatureTable Dataset::features() const { return features(schema_); }

FeatureTable Dataset::features(std::span<const std::string> columns) const {
  std::vector<std::size_t> idx;
  for (const auto& c : columns) idx.push_back(feature_index(c));
  FeatureTable t;
  t.names.assign(columns.begin(), columns.end());
  t.values.resize(static_cast<Eigen::Index>(records_.size()), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < records_.size(); ++i) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = records_[i].features[idx[j]];
    }
  }
  return t;
}

Eigen::VectorXd Dataset::targets() const {
  Eigen::VectorXd y(static_cast<Eigen::Index>(records_.size()));
  for (std::size_t i = 0; i < records_.size(); ++i) y(static_cast<Eigen::Index>(i)) = records_[i].target;
  return y;
}

Eigen::VectorXd Dataset::weights() const {
  Eigen::VectorXd w(static_cast<Eigen::Index>(records_.size()));
  for (std::size_t i = 0; i < records_.size(); ++i) w(static_cast<Eigen::Index>(i)) = records_[i].weight;
  return w;
}

std::vector<std::string> Dataset::clusters() const {
  std::vector<std::string> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.patient_id);
  return out;
}

Dataset Dataset::labeled() const {
  std::vector<VisitRecord> keep;
  for (const auto& r : records_)
    if (!is_missing(r.target)) keep.push_back(r);
  return Dataset(schema_, std::move(keep));
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  std::vector<VisitRecord> keep;
  keep.reserve(rows.size());
  for (auto i : rows) keep.push_back(records_.at(i));
  return Dataset(schema_, std::move(keep));
}

std::optional<std::size_t> Dataset::find_visit(std::string_view patient_id, Date date) const {
  VisitRecord probe;
  probe.patient_id = std::string(patient_id);
  probe.care_date = date;
  probe.sequence = 0;
  auto it = std::lower_bound(records_.begin(), records_.end(), probe,
                             [](const VisitRecord& a, const VisitRecord& b) { return record_key(a) < record_key(b); });
  if (it == records_.end() || it->patient_id != patient_id || it->care_date != date || it->sequence != 0) {
    return std::nullopt;
  }
  return static_cast<std::size_t>(it - records_.begin());
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string format_number(double v) {
  if (is_missing(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Dataset build_from_raw(const RawCsv& raw, std::span<const std::string> schema,
                       const std::string& target_name) {
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(raw.header.begin(), raw.header.end(), name);
    if (it == raw.header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - raw.header.begin());
  };
  auto require = [&](const std::string& name) {
    if (auto c = column(name)) return *c;
    throw Error(Errc::missing_column, "missing column '" + name + "'");
  };
  const std::size_t id_col = require(kIdColumn);
  const std::size_t date_col = require(kDateColumn);
  const std::size_t target_col = require(target_name);
  std::vector<std::size_t> feature_cols;
  for (const auto& f : schema) feature_cols.push_back(require(f));
  const auto weight_col = column(kWeightColumn);
  const auto origin_col = column(kOriginColumn);

  std::vector<VisitRecord> records;
  records.reserve(raw.rows.size());
  // (patient, date) -> first row number, for duplicate reporting by row.
  std::map<std::pair<std::string, int>, std::size_t> first_row;
  std::map<std::pair<std::string, int>, int> next_sequence;
  for (std::size_t r = 0; r < raw.rows.size(); ++r) {
    const auto& cells = raw.rows[r];
    const std::size_t row_no = r + 1;
    if (cells.size() != raw.header.size()) {
      throw Error(Errc::malformed_numeric, "row " + std::to_string(row_no) + ": expected " +
                                               std::to_string(raw.header.size()) + " cells, found " +
                                               std::to_string(cells.size()));
    }
    VisitRecord rec;
    rec.patient_id = cells[id_col];
    auto date = Date::parse(cells[date_col]);
    if (!date) {
      throw Error(Errc::invalid_date, "row " + std::to_string(row_no) + ": unparseable date '" +
                                          cells[date_col] + "'");
    }
    rec.care_date = *date;
    rec.target = parse_csv_number(cells[target_col], row_no, target_name);
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      rec.features.push_back(parse_csv_number(cells[feature_cols[j]], row_no, std::string(schema[j])));
    }
    if (weight_col) {
      double w = parse_csv_number(cells[*weight_col], row_no, kWeightColumn);
      rec.weight = is_missing(w) ? 1.0 : w;
      if (rec.weight < 0.0) {
        throw Error(Errc::malformed_numeric, "row " + std::to_string(row_no) + ": negative weight");
      }
    }
    if (origin_col) rec.origin = origin_from_string(cells[*origin_col]);
    auto key = std::make_pair(rec.patient_id, rec.care_date.days());
    if (rec.origin == Origin::observed) {
      auto [it, inserted] = first_row.emplace(key, row_no);
      if (!inserted) {
        throw Error(Errc::duplicate_key, "duplicate (" + rec.patient_id + ", " + cells[date_col] +
                                             ") at rows " + std::to_string(it->second) + " and " +
                                             std::to_string(row_no));
      }
    } else {
      rec.sequence = ++next_sequence[key];
    }
    records.push_back(std::move(rec));
  }
  return Dataset(std::vector<std::string>(schema.begin(), schema.end()), std::move(records));
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, std::span<const std::string> schema,
                 const std::string& target_name) {
  return build_from_raw(read_raw(path), schema, target_name);
}

Dataset load_csv(const std::filesystem::path& path, const std::string& target_name) {
  RawCsv raw = read_raw(path);
  std::vector<std::string> schema;
  for (const auto& h : raw.header) {
    if (h != kIdColumn && h != kDateColumn && h != target_name && h != kWeightColumn && h != kOriginColumn) {
      schema.push_back(h);
    }
  }
  return build_from_raw(raw, schema, target_name);
}

void write_csv(const Dataset& d, const std::filesystem::path& path, const std::string& target_name) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  bool augmented = std::any_of(d.records().begin(), d.records().end(),
                               [](const VisitRecord& r) { return r.origin != Origin::observed; });
  bool weighted = std::any_of(d.records().begin(), d.records().end(),
                              [](const VisitRecord& r) { return r.weight != 1.0; });
  out << kIdColumn << ',' << kDateColumn;
  for (const auto& f : d.schema()) out << ',' << f;
  out << ',' << target_name;
  if (weighted) out << ',' << kWeightColumn;
  if (augmented) out << ',' << kOriginColumn;
  out << '\n';
  for (const auto& r : d.records()) {
    out << r.patient_id << ',' << r.care_date.to_string();
    for (double v : r.features) out << ',' << format_number(v);
    out << ',' << format_number(r.target);
    if (weighted) out << ',' << format_number(r.weight);
    if (augmented) out << ',' << to_string(r.origin);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Lags

Dataset derive_lags(const Dataset& d, const LagSpec& spec) {
  std::vector<std::string> schema = d.schema();
  std::vector<std::size_t> sources;
  for (const auto& der : spec.derivations) {
    if (der.k < 1) throw Error(Errc::invalid_argument, "lag '" + der.output + "' needs k >= 1");
    sources.push_back(d.feature_index(der.source));
    if (std::find(schema.begin(), schema.end(), der.output) != schema.end() || der.output == kIdColumn ||
        der.output == kDateColumn || der.output.empty()) {
      throw Error(Errc::name_collision, "derived feature '" + der.output + "' collides with the schema");
    }
    schema.push_back(der.output);
  }

  std::vector<VisitRecord> records(d.records().begin(), d.records().end());
  std::size_t begin = 0;
  while (begin < records.size()) {
    std::size_t end = begin;
    while (end < records.size() && records[end].patient_id == records[begin].patient_id) ++end;
    for (std::size_t t = begin; t < end; ++t) {
      const std::size_t pos = t - begin;  // visit index within the patient
      for (std::size_t j = 0; j < spec.derivations.size(); ++j) {
        const auto& der = spec.derivations[j];
        const std::size_t src = sources[j];
        const std::size_t k = static_cast<std::size_t>(der.k);
        double v = kMissing;
        switch (der.kind) {
          case LagKind::lag:
            if (pos >= k) v = d.records()[t - k].features[src];
            break;
          case LagKind::delta:
            if (pos >= k + 1) {
              v = d.records()[t - k].features[src] - d.records()[t - k - 1].features[src];
            }
            break;
          case LagKind::rolling_rate:
            if (pos >= k) {
              const int days = d.records()[t].care_date.days() - d.records()[t - k].care_date.days();
              if (days > 0) {
                double sum = 0.0;
                for (std::size_t s = t - k; s < t; ++s) sum += d.records()[s].features[src];
                v = sum / (days / 7.0);
              }
            }
            break;
        }
        records[t].features.push_back(v);
      }
    }
    begin = end;
  }
  return Dataset(std::move(schema), std::move(records));
}

// ---------------------------------------------------------------------------
// Split

TemporalSplit temporal_split(const Dataset& d, Date cutoff) {
  std::vector<VisitRecord> train, test;
  for (const auto& r : d.records()) {
    (r.care_date <= cutoff ? train : test).push_back(r);
  }
  TemporalSplit out{Dataset(d.schema(), std::move(train)), Dataset(d.schema(), std::move(test)), false};
  out.empty_side = out.train.empty() || out.test.empty();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic

std::vector<std::string> SyntheticTruth::covariate_names() const {
  std::vector<std::string> names;
  for (const auto& r : ranges) names.push_back(r.feature);
  return names;
}

std::size_t SyntheticTruth::locate(std::span<const double> x) const {
  std::size_t found = rules.size();
  int matches = 0;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    bool ok = true;
    for (const auto& c : rules[i].conditions) {
      std::size_t j = 0;
      while (j < ranges.size() && ranges[j].feature != c.feature) ++j;
      if (j == ranges.size()) {
        throw Error(Errc::unknown_feature, "planted rule uses unknown feature '" + c.feature + "'");
      }
      if (!c.satisfied_by(x[j])) {
        ok = false;
        break;
      }
    }
    if (ok) {
      ++matches;
      found = i;
    }
  }
  if (matches != 1) {
    throw Error(Errc::not_a_partition, "planted rules are not a partition: a covariate point matches " +
                                           std::to_string(matches) + " rules");
  }
  return found;
}

double SyntheticTruth::mean_response(std::span<const double> x) const {
  const Rule& rule = rules[locate(x)];
  std::vector<double> reg;
  for (const auto& name : regressors) {
    std::size_t j = 0;
    while (j < ranges.size() && ranges[j].feature != name) ++j;
    if (j == ranges.size()) throw Error(Errc::unknown_feature, "regressor '" + name + "' has no range");
    reg.push_back(x[j]);
  }
  return rule.model.evaluate(reg);
}

std::pair<Dataset, SyntheticTruth> generate_synthetic(const SyntheticTruth& truth, std::uint64_t seed) {
  if (truth.sigma_b < 0.0 || !(truth.sigma > 0.0)) {
    throw Error(Errc::invalid_argument, "synthetic truth needs sigma_b >= 0 and sigma > 0");
  }
  if (truth.rules.empty() || truth.n_clusters < 1 || truth.visits_per_cluster < 1) {
    throw Error(Errc::invalid_argument, "synthetic truth needs rules, clusters and visits");
  }
  for (const auto& r : truth.ranges) {
    if (!(r.lo <= r.hi)) throw Error(Errc::invalid_argument, "empty covariate range for " + r.feature);
  }
  SyntheticTruth realised = truth;
  realised.intercepts.clear();
  std::vector<std::string> schema = truth.covariate_names();
  if (!truth.level_feature.empty()) schema.push_back(truth.level_feature);

  Rng rng(seed);
  const int width = std::max(4, static_cast<int>(std::to_string(truth.n_clusters).size()));
  std::vector<VisitRecord> records;
  records.reserve(static_cast<std::size_t>(truth.n_clusters) * truth.visits_per_cluster);
  std::vector<double> x(truth.ranges.size());
  for (int c = 0; c < truth.n_clusters; ++c) {
    std::string id = std::to_string(c + 1);
    id.insert(0, static_cast<std::size_t>(width) - id.size(), '0');
    const double b = rng.normal(0.0, truth.sigma_b);
    realised.intercepts[id] = b;
    const int offset = static_cast<int>(rng.index(static_cast<std::uint64_t>(truth.visit_interval_days)));
    double level = truth.level_start;
    for (int v = 0; v < truth.visits_per_cluster; ++v) {
      for (std::size_t j = 0; j < truth.ranges.size(); ++j) {
        x[j] = rng.uniform(truth.ranges[j].lo, truth.ranges[j].hi);
      }
      VisitRecord rec;
      rec.patient_id = id;
      rec.care_date = truth.start_date.plus_days(offset + v * truth.visit_interval_days);
      rec.features = x;
      if (!truth.level_feature.empty()) rec.features.push_back(level);
      rec.target = truth.mean_response(x) + b + rng.normal(0.0, truth.sigma);
      level += rec.target;
      records.push_back(std::move(rec));
    }
  }
  return {Dataset(std::move(schema), std::move(records)), std::move(realised)};
}

}  // namespace mipd
