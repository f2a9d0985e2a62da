#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mipd {

enum class Errc {
  invalid_argument,
  missing_column,
  duplicate_key,
  malformed_numeric,
  invalid_date,
  unknown_feature,
  name_collision,
  not_a_partition,
  rank_deficient,
  column_mismatch,
  empty_input,
  unsatisfiable_rule,
  infeasible_region,
  gate_not_passed,
  not_found,
  conflict,
  io,
};

std::string_view to_string(Errc code);

/// Exception type thrown by every module; `code()` lets callers map failures
/// onto exit statuses or HTTP responses without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mipd
