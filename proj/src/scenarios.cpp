#include "mipd/scenarios.hpp"

#include <cmath>

#include "mipd/error.hpp"

namespace mipd {

namespace {

std::vector<CovariateRange> unit_box() {
  const double s3 = std::sqrt(3.0);
  return {{"z1", -s3, s3}, {"z2", -s3, s3}, {"z3", -s3, s3}, {"EPO_DOSE", 0.0, 3.0}};
}

Rule make_rule(int id, std::vector<Condition> conds, double b0, double b1) {
  Rule r;
  r.id = id;
  r.conditions = std::move(conds);
  r.model = {b0, {b1}};
  return r;
}

}  // namespace

SyntheticTruth three_leaf_truth() {
  SyntheticTruth t;
  t.ranges = unit_box();
  t.rules = {make_rule(1, {{"z1", CompareOp::le, 0.0}}, -0.33, 0.226),
             make_rule(2, {{"z1", CompareOp::gt, 0.0}, {"z2", CompareOp::le, 0.5}}, -0.46, 0.253),
             make_rule(3, {{"z1", CompareOp::gt, 0.0}, {"z2", CompareOp::gt, 0.5}}, -0.61, 0.251)};
  return t;
}

SyntheticTruth two_leaf_truth() {
  SyntheticTruth t;
  t.ranges = unit_box();
  t.rules = {make_rule(1, {{"z1", CompareOp::le, 0.0}}, -0.33, 0.226),
             make_rule(2, {{"z1", CompareOp::gt, 0.0}}, -0.46, 0.253)};
  return t;
}

SyntheticTruth grid_truth(int k) {
  if (k < 1) throw Error(Errc::invalid_argument, "grid needs at least one cell per axis");
  SyntheticTruth t;
  t.ranges = unit_box();
  const double lo = -std::sqrt(3.0), width = 2.0 * std::sqrt(3.0) / k;
  int id = 1;
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      std::vector<Condition> conds;
      if (a > 0) conds.push_back({"z1", CompareOp::gt, lo + a * width});
      if (a < k - 1) conds.push_back({"z1", CompareOp::le, lo + (a + 1) * width});
      if (b > 0) conds.push_back({"z2", CompareOp::gt, lo + b * width});
      if (b < k - 1) conds.push_back({"z2", CompareOp::le, lo + (b + 1) * width});
      const double c1 = lo + (a + 0.5) * width, c2 = lo + (b + 0.5) * width;
      t.rules.push_back(make_rule(id++, std::move(conds), -0.45 + 0.15 * c1 - 0.10 * c2, 0.24 + 0.03 * c2));
    }
  }
  return t;
}

Scenario temporal_scenario(const SyntheticTruth& truth, std::uint64_t seed, int train_visits) {
  auto [data, realised] = generate_synthetic(truth, seed);
  // Visit v of every patient falls in [start + v*interval, start + v*interval + interval).
  const Date cutoff = truth.start_date.plus_days(train_visits * truth.visit_interval_days - 1);
  auto split = temporal_split(data, cutoff);
  return {std::move(realised), std::move(split.train), std::move(split.test)};
}

Dataset attenuate_dose_effect(const Dataset& train, const SyntheticTruth& truth, double observed_slope,
                              const std::string& dose_feature) {
  const std::size_t dose = train.feature_index(dose_feature);
  std::vector<VisitRecord> rows(train.records().begin(), train.records().end());
  for (auto& r : rows) {
    if (is_missing(r.target)) continue;
    const double slope = truth.rules[truth.locate(r.features)].model.beta1.at(0);
    r.target -= (slope - observed_slope) * r.features[dose];
  }
  return Dataset(train.schema(), std::move(rows));
}

Scenario misspecified_scenario(std::uint64_t seed, const MisspecOptions& options) {
  SyntheticTruth truth = three_leaf_truth();
  truth.n_clusters = options.n_clusters;
  Scenario s = temporal_scenario(truth, seed, options.train_visits);
  s.train = attenuate_dose_effect(s.train, s.truth, options.observed_slope);
  return s;
}

}  // namespace mipd
