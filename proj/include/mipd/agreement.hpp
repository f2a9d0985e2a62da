#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mipd {

/// One rating in long format. `occasion` separates repeated ratings of the
/// same unit by the same rater (test-retest).
struct Rating {
  std::string unit_id;
  std::string rater_id;
  double value = 0.0;
  int occasion = 0;

  friend bool operator==(const Rating&, const Rating&) = default;
};

/// Units x raters grid on an interval scale; NaN marks an absent rating.
struct RatingsMatrix {
  std::vector<std::string> unit_ids;
  std::vector<std::string> rater_ids;
  Eigen::MatrixXd values;

  std::size_t n_units() const { return unit_ids.size(); }
  std::size_t n_raters() const { return rater_ids.size(); }
};

/// Units and raters in first-seen order. Throws duplicate_key when a rater
/// rates the same unit twice on one occasion, invalid_argument on non-finite values.
RatingsMatrix ratings_matrix(const std::vector<Rating>& ratings);

/// Units x occasions grid of one rater's ratings, for intra-rater agreement.
RatingsMatrix intra_rater_matrix(const std::vector<Rating>& ratings, const std::string& rater_id);

/// Long-format CSV with columns unit_id, rater_id, value and an optional occasion.
std::vector<Rating> load_ratings_csv(const std::filesystem::path& path);

struct AlphaResult {
  double alpha = 1.0;
  bool degenerate = false;   // expected disagreement is zero; alpha set to 1
  double observed = 0.0;     // D_o
  double expected = 0.0;     // D_e
  std::size_t n_units = 0;   // units with at least two ratings
  std::size_t n_pairable = 0;
};

/// Krippendorff's alpha with the interval metric (squared differences).
/// Only units holding two or more ratings contribute. Throws empty_input
/// when no such unit exists.
AlphaResult krippendorff_alpha(const RatingsMatrix& m);

struct Interval {
  double low = 1.0;
  double high = 1.0;
  double level = 0.95;
};

/// Unit-level nonparametric bootstrap, nearest-rank percentiles. Replicate b
/// draws with Rng(member_seed(seed, b)), so results do not depend on `threads`.
Interval bootstrap_ci(const RatingsMatrix& m, int replicates = 1000, double level = 0.95,
                      std::uint64_t seed = 1, int threads = 1);

struct AgreementResult {
  AlphaResult alpha;
  Interval ci;
  std::size_t n_units = 0;
  std::size_t n_raters = 0;
};

AgreementResult agreement(const RatingsMatrix& m, int replicates = 1000, double level = 0.95,
                          std::uint64_t seed = 1, int threads = 1);

struct GateResult {
  bool pass = false;
  double threshold = 0.667;
  AgreementResult agreement;
};

/// Passes iff alpha >= threshold.
GateResult reliability_gate(const RatingsMatrix& m, double threshold = 0.667, int replicates = 1000,
                            double level = 0.95, std::uint64_t seed = 1, int threads = 1);

}  // namespace mipd
