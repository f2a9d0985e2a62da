#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mipd/date.hpp"
#include "mipd/rule_types.hpp"
#include "mipd/table.hpp"

namespace mipd {

inline constexpr const char* kIdColumn = "ID";
inline constexpr const char* kDateColumn = "Care_Date";
inline constexpr const char* kWeightColumn = "weight";
inline constexpr const char* kOriginColumn = "origin";

/// Where a row came from. Advice and synthetic rows are appended by the loop
/// and never replace observed ones.
enum class Origin { observed, advice, synthetic };

std::string_view to_string(Origin origin);
Origin origin_from_string(std::string_view text);

/// One patient visit. `features` is aligned with the owning Dataset's schema.
struct VisitRecord {
  std::string patient_id;
  Date care_date;
  std::vector<double> features;
  double target = kMissing;  // change in Hb since the previous visit
  double weight = 1.0;
  Origin origin = Origin::observed;
  /// Disambiguates augmentation rows that share (patient_id, care_date) with
  /// an observed visit; 0 for observed rows.
  int sequence = 0;

  friend bool operator==(const VisitRecord& a, const VisitRecord& b);
};

/// Immutable, validated collection of visits. Records are kept sorted by
/// (patient_id, care_date, sequence) and those keys are unique.
class Dataset {
 public:
  Dataset() = default;
  /// Sorts and validates; throws duplicate_key / invalid_argument on violations.
  Dataset(std::vector<std::string> schema, std::vector<VisitRecord> records);

  const std::vector<std::string>& schema() const { return schema_; }
  std::span<const VisitRecord> records() const { return records_; }
  std::size_t n_records() const { return records_.size(); }
  std::size_t n_patients() const { return n_patients_; }
  bool empty() const { return records_.empty(); }

  std::optional<std::size_t> find_feature(std::string_view name) const;
  std::size_t feature_index(std::string_view name) const;

  FeatureTable features() const;
  FeatureTable features(std::span<const std::string> columns) const;
  Eigen::VectorXd targets() const;
  Eigen::VectorXd weights() const;
  std::vector<std::string> clusters() const;

  /// Rows with a finite target, i.e. the rows usable for fitting.
  Dataset labeled() const;
  Dataset subset(std::span<const std::size_t> rows) const;
  /// Index of the observed record for (patient, date), if present.
  std::optional<std::size_t> find_visit(std::string_view patient_id, Date date) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::vector<std::string> schema_;
  std::vector<VisitRecord> records_;
  std::size_t n_patients_ = 0;
};

// ---------------------------------------------------------------------------
// CSV ingestion

/// Reads long-format visits. Required columns: ID, Care_Date, `target_name`
/// and every schema feature. An optional `weight` column is honoured; other
/// columns are ignored. Errors carry 1-based data-row numbers.
Dataset load_csv(const std::filesystem::path& path, std::span<const std::string> schema,
                 const std::string& target_name);

/// As above, with the schema taken to be every non-reserved header column
/// other than the target.
Dataset load_csv(const std::filesystem::path& path, const std::string& target_name);

void write_csv(const Dataset& d, const std::filesystem::path& path,
               const std::string& target_name);

// ---------------------------------------------------------------------------
// Derived features

enum class LagKind {
  lag,           ///< value k visits before
  delta,         ///< one-visit change observed k visits before: v[t-k] - v[t-k-1]
  rolling_rate,  ///< sum of v over the previous k visits per week elapsed
};

struct LagDerivation {
  std::string source;
  LagKind kind = LagKind::lag;
  int k = 1;
  std::string output;
};

struct LagSpec {
  std::vector<LagDerivation> derivations;
};

/// Appends derived columns computed within each patient's visit sequence.
/// Values that reach before the first visit are kMissing.
Dataset derive_lags(const Dataset& d, const LagSpec& spec);

// ---------------------------------------------------------------------------
// Temporal split

struct TemporalSplit {
  Dataset train;  // care_date <= cutoff
  Dataset test;   // care_date > cutoff
  bool empty_side = false;
};

TemporalSplit temporal_split(const Dataset& d, Date cutoff);

// ---------------------------------------------------------------------------
// Synthetic data with planted structure

struct CovariateRange {
  std::string feature;
  double lo = 0.0;
  double hi = 1.0;

  friend bool operator==(const CovariateRange&, const CovariateRange&) = default;
};

/// Ground truth for generated cohorts. The planted rules must partition the
/// covariate box spanned by `ranges`.
struct SyntheticTruth {
  std::vector<Rule> rules;
  std::vector<std::string> regressors{"EPO_DOSE"};
  double sigma_b = 0.3;
  double sigma = 0.2;
  std::vector<CovariateRange> ranges;  // one per schema feature, in schema order
  int n_clusters = 300;
  int visits_per_cluster = 30;
  Date start_date = Date::from_ymd(2014, 1, 1);
  int visit_interval_days = 14;
  /// When non-empty, a running level (Hb before the visit) is added to the
  /// schema under this name; it is not used by the planted rules.
  std::string level_feature;
  double level_start = 10.5;
  /// Realised random intercepts, filled in by generate_synthetic.
  std::map<std::string, double> intercepts;

  /// Index of the planted rule whose conditions `x` meets (schema-ordered
  /// covariates); throws not_a_partition if zero or several match.
  std::size_t locate(std::span<const double> x) const;
  /// Noise-free mean response at covariates `x`, excluding the random intercept.
  double mean_response(std::span<const double> x) const;
  std::vector<std::string> covariate_names() const;
};

/// Draws b_i ~ N(0, sigma_b^2) per cluster and covariates uniformly per visit;
/// target = planted model at the visit's regressors + b_i + N(0, sigma^2).
std::pair<Dataset, SyntheticTruth> generate_synthetic(const SyntheticTruth& truth,
                                                      std::uint64_t seed);

}  // namespace mipd
