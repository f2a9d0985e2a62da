#pragma once

#include <cstdint>

#include "mipd/dataset.hpp"

namespace mipd {

/// Covariates z1..z3 ~ U(-sqrt 3, sqrt 3) (unit variance), EPO_DOSE ~ U(0, 3).
/// Leaves: z1 <= 0 | z1 > 0, z2 <= 0.5 | z1 > 0, z2 > 0.5.
SyntheticTruth three_leaf_truth();

/// Single split at z1 <= 0 with the same covariates as three_leaf_truth.
SyntheticTruth two_leaf_truth();

/// k x k cells on (z1, z2) whose intercepts and slopes vary linearly with the
/// cell centre: a staircase approximation of a smooth surface.
SyntheticTruth grid_truth(int cells_per_axis = 6);

struct Scenario {
  SyntheticTruth truth;  // with realised intercepts
  Dataset train;
  Dataset test;
};

/// Generates `truth` and splits each patient's history at visit
/// `train_visits` by date.
Scenario temporal_scenario(const SyntheticTruth& truth, std::uint64_t seed, int train_visits = 20);

struct MisspecOptions {
  double observed_slope = 0.10;  // dose slope seen in the corrupted training targets
  int train_visits = 20;
  int n_clusters = 300;
};

/// Shifts each target by -(beta1_leaf - observed_slope) * dose, so the data
/// show a dose slope of `observed_slope` in every planted leaf.
Dataset attenuate_dose_effect(const Dataset& train, const SyntheticTruth& truth, double observed_slope,
                              const std::string& dose_feature = "EPO_DOSE");

/// Three-leaf truth whose training targets understate the dose effect:
/// y' = y - (beta1_leaf - observed_slope) * dose. Test targets stay clean, so a
/// model fit on the training data alone starts out misspecified.
Scenario misspecified_scenario(std::uint64_t seed, const MisspecOptions& options = {});

}  // namespace mipd
