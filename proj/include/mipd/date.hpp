#pragma once

#include <compare>
#include <optional>
#include <string>
#include <string_view>

namespace mipd {

/// Calendar date held as a day count since 1970-01-01.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(int days_since_epoch) : days_(days_since_epoch) {}

  /// Parses strict ISO 8601 `YYYY-MM-DD`; nullopt for malformed or impossible dates.
  static std::optional<Date> parse(std::string_view iso);
  static Date from_ymd(int year, unsigned month, unsigned day);

  std::string to_string() const;
  constexpr int days() const { return days_; }
  constexpr Date plus_days(int n) const { return Date(days_ + n); }

  friend constexpr auto operator<=>(Date, Date) = default;

 private:
  int days_ = 0;
};

}  // namespace mipd
