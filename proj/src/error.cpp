#include "mipd/error.hpp"

namespace mipd {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::missing_column: return "missing-column";
    case Errc::duplicate_key: return "duplicate-key";
    case Errc::malformed_numeric: return "malformed-numeric";
    case Errc::invalid_date: return "invalid-date";
    case Errc::unknown_feature: return "unknown-feature";
    case Errc::name_collision: return "name-collision";
    case Errc::not_a_partition: return "not-a-partition";
    case Errc::rank_deficient: return "rank-deficient";
    case Errc::column_mismatch: return "column-mismatch";
    case Errc::empty_input: return "empty-input";
    case Errc::unsatisfiable_rule: return "unsatisfiable-rule";
    case Errc::infeasible_region: return "infeasible-region";
    case Errc::gate_not_passed: return "gate-not-passed";
    case Errc::not_found: return "not-found";
    case Errc::conflict: return "conflict";
    case Errc::io: return "io";
  }
  return "unknown";
}

}  // namespace mipd
