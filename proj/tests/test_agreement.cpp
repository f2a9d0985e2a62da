#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <iterator>

#include "helpers.hpp"
#include "mipd/agreement.hpp"
#include "mipd/random.hpp"
#include "mipd/table.hpp"

using namespace mipd;
using testutil::error_of;

namespace {

RatingsMatrix grid(const Eigen::MatrixXd& v) {
  RatingsMatrix m;
  for (Eigen::Index u = 0; u < v.rows(); ++u) m.unit_ids.push_back("u" + std::to_string(u));
  for (Eigen::Index r = 0; r < v.cols(); ++r) m.rater_ids.push_back("r" + std::to_string(r));
  m.values = v;
  return m;
}

/// Textbook pairwise form: every ordered pair of values within a unit against
/// every ordered pair of pairable values overall.
double pairwise_alpha(const Eigen::MatrixXd& v) {
  std::vector<std::vector<double>> units;
  for (Eigen::Index u = 0; u < v.rows(); ++u) {
    std::vector<double> vals;
    for (Eigen::Index r = 0; r < v.cols(); ++r)
      if (!std::isnan(v(u, r))) vals.push_back(v(u, r));
    if (vals.size() >= 2) units.push_back(vals);
  }
  std::vector<double> all;
  double within = 0.0;
  for (const auto& vals : units) {
    double s = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i)
      for (std::size_t j = 0; j < vals.size(); ++j)
        if (i != j) s += (vals[i] - vals[j]) * (vals[i] - vals[j]);
    within += s / static_cast<double>(vals.size() - 1);
    all.insert(all.end(), vals.begin(), vals.end());
  }
  const double n = static_cast<double>(all.size());
  double between = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = 0; j < all.size(); ++j)
      if (i != j) between += (all[i] - all[j]) * (all[i] - all[j]);
  return 1.0 - (within / n) / (between / (n * (n - 1)));
}

Eigen::MatrixXd noise(int units, int raters, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd v(units, raters);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal(0.0, 1.0);
  return v;
}

/// Shared unit signal plus rater noise: alpha near s^2 / (s^2 + 1).
Eigen::MatrixXd signal(int units, int raters, double s, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd v(units, raters);
  for (int u = 0; u < units; ++u) {
    const double mu = rng.normal(0.0, s);
    for (int r = 0; r < raters; ++r) v(u, r) = mu + rng.normal(0.0, 1.0);
  }
  return v;
}

}  // namespace

TEST_CASE("perfect agreement is exactly one") {
  Eigen::MatrixXd v(5, 3);
  for (int u = 0; u < 5; ++u) v.row(u).setConstant(0.3 * u - 1.0);
  v(2, 1) = kMissing;
  const AlphaResult a = krippendorff_alpha(grid(v));
  CHECK(a.alpha == 1.0);
  CHECK_FALSE(a.degenerate);
  CHECK(a.observed == 0.0);
  CHECK(a.n_units == 5);
  CHECK(a.n_pairable == 14);
}

TEST_CASE("alpha equals the pairwise oracle") {
  SUBCASE("4 units x 2 raters") {
    Eigen::MatrixXd v(4, 2);
    v << 1, 2, 3, 3, 2, 4, 5, 4;
    CHECK(std::abs(krippendorff_alpha(grid(v)).alpha - pairwise_alpha(v)) < 1e-12);
  }
  SUBCASE("4 units x 6 raters with gaps") {
    Eigen::MatrixXd v(4, 6);
    v << 1.5, 2.0, kMissing, 1.0, 2.5, 1.5,  //
        -0.5, 0.0, 0.5, kMissing, kMissing, -1.0,  //
        3.0, 2.0, 3.5, 3.0, 4.0, kMissing,  //
        kMissing, 1.0, kMissing, kMissing, kMissing, kMissing;  // unpairable
    const AlphaResult a = krippendorff_alpha(grid(v));
    CHECK(std::abs(a.alpha - pairwise_alpha(v)) < 1e-12);
    CHECK(a.n_units == 3);
    CHECK(a.n_pairable == 14);
  }
  SUBCASE("random grids") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Eigen::MatrixXd v = signal(12, 4, 1.0, seed);
      Rng rng(seed + 100);
      for (Eigen::Index i = 0; i < v.size(); ++i)
        if (rng.uniform(0, 1) < 0.2) v.data()[i] = kMissing;
      CHECK(std::abs(krippendorff_alpha(grid(v)).alpha - pairwise_alpha(v)) < 1e-12);
    }
  }
}

TEST_CASE("alpha of independent noise is near zero") {
  double sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) sum += krippendorff_alpha(grid(noise(280, 5, seed))).alpha;
  CHECK(std::abs(sum / 20) < 0.05);
}

TEST_CASE("invariances") {
  const Eigen::MatrixXd v = signal(30, 4, 1.5, 3);
  const double a = krippendorff_alpha(grid(v)).alpha;

  SUBCASE("affine transforms of every rating") {
    for (auto [scale, shift] : {std::pair{2.0, 0.0}, {-0.5, 3.0}, {1e3, -7.0}}) {
      const Eigen::MatrixXd w = (scale * v.array() + shift).matrix();
      CHECK(std::abs(krippendorff_alpha(grid(w)).alpha - a) < 1e-10);
    }
  }
  SUBCASE("unit and rater order") {
    Eigen::MatrixXd w = v.colwise().reverse().rowwise().reverse();
    CHECK(std::abs(krippendorff_alpha(grid(w)).alpha - a) < 1e-12);
  }
  SUBCASE("long-format input order") {
    std::vector<Rating> long_form;
    for (int u = 0; u < 30; ++u)
      for (int r = 0; r < 4; ++r) long_form.push_back({"u" + std::to_string(u), "r" + std::to_string(r), v(u, r), 0});
    std::reverse(long_form.begin(), long_form.end());
    CHECK(std::abs(krippendorff_alpha(ratings_matrix(long_form)).alpha - a) < 1e-12);
  }
}

TEST_CASE("zero expected disagreement is degenerate") {
  const Eigen::MatrixXd v = Eigen::MatrixXd::Constant(6, 3, 2.0);
  const AgreementResult r = agreement(grid(v), 200);
  CHECK(r.alpha.degenerate);
  CHECK(r.alpha.alpha == 1.0);
  CHECK(r.ci.low == 1.0);
  CHECK(r.ci.high == 1.0);
}

TEST_CASE("bootstrap interval") {
  const RatingsMatrix m = grid(signal(40, 3, 1.0, 8));
  const Interval a = bootstrap_ci(m, 500, 0.95, 21, 1);
  CHECK(a.low <= a.high);
  CHECK(a.level == 0.95);
  const Interval b = bootstrap_ci(m, 500, 0.95, 21, 4);
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  const Interval c = bootstrap_ci(m, 500, 0.95, 22, 1);
  CHECK((c.low != a.low || c.high != a.high));
  const double alpha = krippendorff_alpha(m).alpha;
  CHECK(a.low <= alpha);
  CHECK(alpha <= a.high);
  const Interval narrow = bootstrap_ci(m, 500, 0.5, 21, 1);
  CHECK(narrow.low >= a.low);
  CHECK(narrow.high <= a.high);

  CHECK(error_of([&] { bootstrap_ci(m, 99); }) == Errc::invalid_argument);
  CHECK(error_of([&] { bootstrap_ci(m, 100, 1.0); }) == Errc::invalid_argument);
}

TEST_CASE("more units give a narrower interval") {
  int narrower = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Interval small = bootstrap_ci(grid(signal(40, 4, 1.0, seed)), 400, 0.95, seed);
    const Interval large = bootstrap_ci(grid(signal(80, 4, 1.0, seed + 500)), 400, 0.95, seed);
    narrower += (large.high - large.low) < (small.high - small.low);
  }
  CHECK(narrower >= 18);
}

TEST_CASE("reliability gate") {
  const RatingsMatrix m = grid(signal(50, 3, 3.0, 4));
  const GateResult g = reliability_gate(m, 0.667, 200);
  CHECK(g.agreement.alpha.alpha > 0.8);
  CHECK(g.pass);
  CHECK(g.agreement.n_units == 50);
  CHECK(g.agreement.n_raters == 3);
  CHECK_FALSE(reliability_gate(m, 1.0, 200).pass);
  CHECK_FALSE(reliability_gate(grid(noise(50, 3, 4)), 0.667, 200).pass);
}

TEST_CASE("input errors") {
  Eigen::MatrixXd single(3, 2);
  single << 1, kMissing, kMissing, 2, 3, kMissing;
  CHECK(error_of([&] { krippendorff_alpha(grid(single)); }) == Errc::empty_input);
  CHECK(error_of([&] { ratings_matrix({{"u", "a", 1, 0}, {"u", "a", 2, 0}}); }) == Errc::duplicate_key);
  CHECK(error_of([&] { ratings_matrix({{"u", "a", NAN, 0}}); }) == Errc::invalid_argument);
}

TEST_CASE("CSV loading and test-retest") {
  testutil::TempDir dir("agreement");
  testutil::write_file(dir / "r.csv",
                       "unit_id,rater_id,value,occasion\n"
                       "p1,a,1.0,0\np1,b,1.5,0\np1,a,1.2,1\n"
                       "p2,a,3.0,0\np2,b,,0\np2,a,2.9,1\n"
                       "p3,a,-1.0,0\np3,b,-0.5,0\np3,a,-0.8,1\n");
  const auto ratings = load_ratings_csv(dir / "r.csv");
  CHECK(ratings.size() == 8);
  // Retest ratings land in the same rater column.
  CHECK(error_of([&] { ratings_matrix(ratings); }) == Errc::duplicate_key);
  std::vector<Rating> first;
  std::copy_if(ratings.begin(), ratings.end(), std::back_inserter(first), [](const Rating& r) { return r.occasion == 0; });
  const RatingsMatrix inter = ratings_matrix(first);
  CHECK(inter.n_units() == 3);
  CHECK(inter.n_raters() == 2);

  const RatingsMatrix intra = intra_rater_matrix(ratings, "a");
  REQUIRE(intra.n_units() == 3);
  REQUIRE(intra.n_raters() == 2);
  Eigen::MatrixXd expect(3, 2);
  expect << 1.0, 1.2, 3.0, 2.9, -1.0, -0.8;
  CHECK(intra.values == expect);
  CHECK(std::abs(krippendorff_alpha(intra).alpha - pairwise_alpha(expect)) < 1e-12);

  testutil::write_file(dir / "bad.csv", "unit_id,value\nu,1\n");
  CHECK(error_of([&] { load_ratings_csv(dir / "bad.csv"); }) == Errc::missing_column);
}
