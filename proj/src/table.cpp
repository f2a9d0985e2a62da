#include "mipd/table.hpp"

#include <algorithm>

#include "mipd/error.hpp"

namespace mipd {

std::optional<std::size_t> FeatureTable::find(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t FeatureTable::index_of(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw Error(Errc::unknown_feature, "unknown feature '" + std::string(name) + "'");
}

FeatureTable FeatureTable::select(std::span<const std::string> columns) const {
  FeatureTable out;
  out.names.assign(columns.begin(), columns.end());
  out.values.resize(values.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    out.values.col(static_cast<Eigen::Index>(j)) =
        values.col(static_cast<Eigen::Index>(index_of(columns[j])));
  }
  return out;
}

FeatureTable FeatureTable::rows_subset(std::span<const std::size_t> rows) const {
  FeatureTable out;
  out.names = names;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<std::size_t> column_map(const FeatureTable& table,
                                    std::span<const std::string> wanted) {
  std::vector<std::size_t> out;
  out.reserve(wanted.size());
  for (const auto& name : wanted) out.push_back(table.index_of(name));
  return out;
}

}  // namespace mipd
