#include "mipd/date.hpp"

#include <cctype>
#include <chrono>
#include <cstdio>

#include "mipd/error.hpp"

namespace mipd {

namespace chr = std::chrono;

std::optional<Date> Date::parse(std::string_view iso) {
  if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') return std::nullopt;
  auto digits = [&](std::size_t from, std::size_t len) -> std::optional<int> {
    int v = 0;
    for (std::size_t i = from; i < from + len; ++i) {
      if (!std::isdigit(static_cast<unsigned char>(iso[i]))) return std::nullopt;
      v = v * 10 + (iso[i] - '0');
    }
    return v;
  };
  auto y = digits(0, 4);
  auto m = digits(5, 2);
  auto d = digits(8, 2);
  if (!y || !m || !d) return std::nullopt;
  chr::year_month_day ymd{chr::year{*y}, chr::month{static_cast<unsigned>(*m)},
                          chr::day{static_cast<unsigned>(*d)}};
  if (!ymd.ok()) return std::nullopt;
  return Date(static_cast<int>(chr::sys_days(ymd).time_since_epoch().count()));
}

Date Date::from_ymd(int year, unsigned month, unsigned day) {
  chr::year_month_day ymd{chr::year{year}, chr::month{month}, chr::day{day}};
  if (!ymd.ok()) throw Error(Errc::invalid_date, "invalid calendar date");
  return Date(static_cast<int>(chr::sys_days(ymd).time_since_epoch().count()));
}

std::string Date::to_string() const {
  chr::year_month_day ymd{chr::sys_days{chr::days{days_}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

}  // namespace mipd
