#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mipd {

/// Marker for an absent feature value (lags before a patient's history starts).
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline bool is_missing(double v) { return std::isnan(v); }

/// Numeric matrix with named columns; rows are observations.
struct FeatureTable {
  std::vector<std::string> names;
  Eigen::MatrixXd values;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return names.size(); }

  std::optional<std::size_t> find(std::string_view name) const;
  /// Throws Errc::unknown_feature when absent.
  std::size_t index_of(std::string_view name) const;

  FeatureTable select(std::span<const std::string> columns) const;
  FeatureTable rows_subset(std::span<const std::size_t> rows) const;
};

/// Column positions of `wanted` inside `table`; throws when any is absent.
std::vector<std::size_t> column_map(const FeatureTable& table,
                                    std::span<const std::string> wanted);

}  // namespace mipd
