#include "mipd/agreement.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "mipd/csv.hpp"
#include "mipd/error.hpp"
#include "mipd/random.hpp"
#include "mipd/table.hpp"
#include "mipd/trees.hpp"

namespace mipd {

namespace {

std::size_t intern(std::vector<std::string>& ids, std::map<std::string, std::size_t>& index, const std::string& id) {
  auto [it, inserted] = index.try_emplace(id, ids.size());
  if (inserted) ids.push_back(id);
  return it->second;
}

RatingsMatrix build(const std::vector<Rating>& ratings, bool by_occasion, const std::string& rater) {
  RatingsMatrix m;
  std::map<std::string, std::size_t> units, cols;
  std::vector<std::tuple<std::size_t, std::size_t, double>> cells;
  std::set<std::tuple<std::string, std::string, int>> seen;
  for (const auto& r : ratings) {
    if (by_occasion && r.rater_id != rater) continue;
    if (!std::isfinite(r.value))
      throw Error(Errc::invalid_argument, "rating of unit '" + r.unit_id + "' by '" + r.rater_id + "' is not finite");
    if (!seen.emplace(r.unit_id, r.rater_id, r.occasion).second)
      throw Error(Errc::duplicate_key, "rater '" + r.rater_id + "' rated unit '" + r.unit_id + "' twice on occasion " +
                                           std::to_string(r.occasion));
    const std::size_t u = intern(m.unit_ids, units, r.unit_id);
    const std::size_t c = by_occasion ? intern(m.rater_ids, cols, std::to_string(r.occasion))
                                      : intern(m.rater_ids, cols, r.rater_id);
    cells.emplace_back(u, c, r.value);
  }
  m.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(m.unit_ids.size()),
                                       static_cast<Eigen::Index>(m.rater_ids.size()), kMissing);
  for (const auto& [u, c, v] : cells) {
    double& cell = m.values(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(c));
    if (!is_missing(cell))
      throw Error(Errc::duplicate_key, "unit '" + m.unit_ids[u] + "' has two ratings in column '" + m.rater_ids[c] + "'");
    cell = v;
  }
  return m;
}

// Per pairable unit: count, centred sums and within-unit disagreement
// sum_{i != j} (v_i - v_j)^2 / (m - 1).
struct UnitStats {
  double m = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
  double within = 0.0;
};

std::vector<UnitStats> unit_stats(const RatingsMatrix& m) {
  std::vector<std::vector<double>> units;
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index u = 0; u < m.values.rows(); ++u) {
    std::vector<double> vals;
    for (Eigen::Index r = 0; r < m.values.cols(); ++r)
      if (!is_missing(m.values(u, r))) vals.push_back(m.values(u, r));
    if (vals.size() < 2) continue;
    for (double v : vals) total += v;
    count += vals.size();
    units.push_back(std::move(vals));
  }
  std::vector<UnitStats> stats;
  if (units.empty()) return stats;
  const double centre = total / static_cast<double>(count);
  for (const auto& vals : units) {
    UnitStats s;
    s.m = static_cast<double>(vals.size());
    for (double v : vals) {
      s.s1 += v - centre;
      s.s2 += (v - centre) * (v - centre);
    }
    // Pairwise differences keep identical ratings at exactly zero.
    double pairs = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i)
      for (std::size_t j = i + 1; j < vals.size(); ++j) pairs += (vals[i] - vals[j]) * (vals[i] - vals[j]);
    s.within = 2.0 * pairs / (s.m - 1.0);
    stats.push_back(s);
  }
  return stats;
}

// Alpha from (possibly replicated) unit statistics; counts[u] copies of unit u.
AlphaResult alpha_from(const std::vector<UnitStats>& stats, const std::vector<double>* counts) {
  double n = 0.0, within = 0.0, t1 = 0.0, t2 = 0.0;
  std::size_t units = 0;
  for (std::size_t u = 0; u < stats.size(); ++u) {
    const double c = counts ? (*counts)[u] : 1.0;
    if (c == 0.0) continue;
    units += static_cast<std::size_t>(c);
    n += c * stats[u].m;
    within += c * stats[u].within;
    t1 += c * stats[u].s1;
    t2 += c * stats[u].s2;
  }
  AlphaResult r;
  r.n_units = units;
  r.n_pairable = static_cast<std::size_t>(n);
  r.observed = within / n;
  const double pooled_ss = std::max(0.0, t2 - t1 * t1 / n);
  r.expected = 2.0 * pooled_ss / (n - 1.0);
  if (r.expected <= 0.0) {
    r.degenerate = true;
    r.alpha = 1.0;
  } else {
    r.alpha = 1.0 - r.observed / r.expected;
  }
  return r;
}

}  // namespace

RatingsMatrix ratings_matrix(const std::vector<Rating>& ratings) { return build(ratings, false, {}); }

RatingsMatrix intra_rater_matrix(const std::vector<Rating>& ratings, const std::string& rater_id) {
  return build(ratings, true, rater_id);
}

std::vector<Rating> load_ratings_csv(const std::filesystem::path& path) {
  const RawCsv raw = read_raw(path);
  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    auto it = std::find(raw.header.begin(), raw.header.end(), name);
    if (it == raw.header.end()) {
      if (required) throw Error(Errc::missing_column, path.string() + ": missing column '" + name + "'");
      return std::nullopt;
    }
    return static_cast<std::size_t>(it - raw.header.begin());
  };
  const std::size_t unit = *column("unit_id", true), rater = *column("rater_id", true),
                    value = *column("value", true);
  const auto occasion = column("occasion", false);
  std::vector<Rating> out;
  for (std::size_t i = 0; i < raw.rows.size(); ++i) {
    const auto& cells = raw.rows[i];
    if (cells.size() != raw.header.size())
      throw Error(Errc::invalid_argument, "row " + std::to_string(i + 1) + ": expected " +
                                              std::to_string(raw.header.size()) + " cells");
    const double v = parse_csv_number(cells[value], i + 1, "value");
    if (is_missing(v)) continue;  // unrated
    Rating r{cells[unit], cells[rater], v, 0};
    if (occasion) r.occasion = static_cast<int>(parse_csv_number(cells[*occasion], i + 1, "occasion"));
    out.push_back(std::move(r));
  }
  return out;
}

AlphaResult krippendorff_alpha(const RatingsMatrix& m) {
  const auto stats = unit_stats(m);
  if (stats.empty()) throw Error(Errc::empty_input, "alpha needs at least one unit with two ratings");
  return alpha_from(stats, nullptr);
}

Interval bootstrap_ci(const RatingsMatrix& m, int replicates, double level, std::uint64_t seed, int threads) {
  if (replicates < 100) throw Error(Errc::invalid_argument, "bootstrap needs at least 100 replicates");
  if (!(level > 0.0 && level < 1.0)) throw Error(Errc::invalid_argument, "level must lie in (0, 1)");
  const auto stats = unit_stats(m);
  if (stats.empty()) throw Error(Errc::empty_input, "alpha needs at least one unit with two ratings");
  Interval ci;
  ci.level = level;
  if (alpha_from(stats, nullptr).degenerate) return ci;

  std::vector<double> reps(static_cast<std::size_t>(replicates));
  parallel_for(reps.size(), threads, [&](std::size_t b) {
    Rng rng(member_seed(seed, b));
    std::vector<double> counts(stats.size(), 0.0);
    for (std::size_t k = 0; k < stats.size(); ++k) counts[rng.index(stats.size())] += 1.0;
    reps[b] = alpha_from(stats, &counts).alpha;
  });
  std::sort(reps.begin(), reps.end());
  auto rank = [&](double p) {
    const auto k = static_cast<long>(std::ceil(p * static_cast<double>(reps.size()))) - 1;
    return reps[static_cast<std::size_t>(std::clamp(k, 0L, static_cast<long>(reps.size()) - 1))];
  };
  ci.low = rank((1.0 - level) / 2.0);
  ci.high = rank(1.0 - (1.0 - level) / 2.0);
  return ci;
}

AgreementResult agreement(const RatingsMatrix& m, int replicates, double level, std::uint64_t seed, int threads) {
  AgreementResult r;
  r.alpha = krippendorff_alpha(m);
  r.ci = bootstrap_ci(m, replicates, level, seed, threads);
  r.n_units = m.n_units();
  r.n_raters = m.n_raters();
  return r;
}

GateResult reliability_gate(const RatingsMatrix& m, double threshold, int replicates, double level,
                            std::uint64_t seed, int threads) {
  GateResult g;
  g.threshold = threshold;
  g.agreement = agreement(m, replicates, level, seed, threads);
  g.pass = g.agreement.alpha.alpha >= threshold;
  return g;
}

}  // namespace mipd
