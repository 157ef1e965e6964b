#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include "cohort_forge/error.hpp"

namespace cohort_forge {

// UTC, second resolution.
using Timestamp = std::chrono::sys_seconds;
using Duration = std::chrono::seconds;

inline constexpr Duration kDay{86400};
inline constexpr Duration kHour{3600};
// A "year" is 365 days everywhere in this library (horizons, observation
// spans, utilization rates).
inline constexpr Duration kYear{365 * 86400};

inline constexpr Duration days(std::int64_t n) { return n * kDay; }
inline constexpr Duration hours(std::int64_t n) { return n * kHour; }

inline Timestamp from_epoch_seconds(std::int64_t s) {
  return Timestamp{Duration{s}};
}
inline std::int64_t epoch_seconds(Timestamp t) {
  return t.time_since_epoch().count();
}

inline std::chrono::sys_days calendar_day(Timestamp t) {
  return std::chrono::floor<std::chrono::days>(t);
}

inline Timestamp make_timestamp(int y, unsigned m, unsigned d, int hh = 0,
                                int mm = 0, int ss = 0) {
  using namespace std::chrono;
  return Timestamp{sys_days{year{y} / month{m} / day{d}}} + hours(hh) +
         Duration{mm * 60 + ss};
}

namespace detail {
inline bool parse_fixed_int(std::string_view s, std::size_t pos,
                            std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  for (std::size_t i = pos; i < pos + len; ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  auto r = std::from_chars(s.data() + pos, s.data() + pos + len, out);
  return r.ec == std::errc{};
}
}  // namespace detail

// Accepts "YYYY-MM-DD" (midnight), "YYYY-MM-DDTHH:MM:SS" or the same with a
// space separator, optionally followed by "Z". Fractional seconds are
// truncated.
inline std::optional<Timestamp> parse_timestamp(std::string_view s) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, hh = 0, mi = 0, ss = 0;
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  if (!detail::parse_fixed_int(s, 0, 4, y) ||
      !detail::parse_fixed_int(s, 5, 2, mo) ||
      !detail::parse_fixed_int(s, 8, 2, d))
    return std::nullopt;
  std::size_t pos = 10;
  if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
    if (s.size() < pos + 9 || s[pos + 3] != ':' || s[pos + 6] != ':')
      return std::nullopt;
    if (!detail::parse_fixed_int(s, pos + 1, 2, hh) ||
        !detail::parse_fixed_int(s, pos + 4, 2, mi) ||
        !detail::parse_fixed_int(s, pos + 7, 2, ss))
      return std::nullopt;
    pos += 9;
    if (pos < s.size() && s[pos] == '.') {
      ++pos;
      while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    }
  }
  if (pos < s.size() && s[pos] == 'Z') ++pos;
  if (pos != s.size()) return std::nullopt;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                     day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || hh > 23 || mi > 59 || ss > 60) return std::nullopt;
  return Timestamp{sys_days{ymd}} + hours(hh) + Duration{mi * 60 + ss};
}

// Canonical form "YYYY-MM-DDTHH:MM:SS".
inline std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  auto day_point = floor<std::chrono::days>(t);
  year_month_day ymd{day_point};
  auto secs = (t - day_point).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:%02lld:%02lld",
                static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()),
                static_cast<long long>(secs / 3600),
                static_cast<long long>((secs / 60) % 60),
                static_cast<long long>(secs % 60));
  return buf;
}

inline std::string format_date(std::chrono::sys_days d) {
  std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

// Durations in task configs: an unsigned integer followed by one of
// s, m (minutes), h, d, w, y (365 days). A leading '+' is allowed; a leading
// '-' is only accepted when `allow_negative` is set.
inline Duration parse_duration(std::string_view s, bool allow_negative = false) {
  if (s.empty()) throw ParseError("empty duration");
  bool negative = false;
  std::size_t pos = 0;
  if (s[0] == '+' || s[0] == '-') {
    negative = s[0] == '-';
    pos = 1;
  }
  if (negative && !allow_negative)
    throw ParseError("negative duration '" + std::string(s) + "'");
  std::int64_t n = 0;
  auto r = std::from_chars(s.data() + pos, s.data() + s.size(), n);
  if (r.ec != std::errc{} || r.ptr == s.data() + pos || n < 0)
    throw ParseError("malformed duration '" + std::string(s) + "'");
  std::string_view unit(r.ptr, static_cast<std::size_t>(s.data() + s.size() - r.ptr));
  std::int64_t scale = 0;
  if (unit == "s") scale = 1;
  else if (unit == "m") scale = 60;
  else if (unit == "h") scale = 3600;
  else if (unit == "d") scale = 86400;
  else if (unit == "w") scale = 7 * 86400;
  else if (unit == "y") scale = 365 * 86400;
  else throw ParseError("unknown duration unit in '" + std::string(s) + "'");
  return Duration{(negative ? -n : n) * scale};
}

// Largest exact unit among d, h, s (zero is "0d"). Signed durations get an explicit sign.
inline std::string format_duration(Duration d, bool explicit_sign = false) {
  auto v = d.count();
  std::string sign;
  if (v < 0) {
    sign = "-";
    v = -v;
  } else if (explicit_sign) {
    sign = "+";
  }
  if (v % 86400 == 0) return sign + std::to_string(v / 86400) + "d";
  if (v != 0 && v % 3600 == 0) return sign + std::to_string(v / 3600) + "h";
  return sign + std::to_string(v) + "s";
}

// Completed calendar years between `birth` and `t`.
inline int completed_years(std::chrono::sys_days birth, Timestamp t) {
  using namespace std::chrono;
  year_month_day b{birth};
  year_month_day now{calendar_day(t)};
  int years = static_cast<int>(now.year()) - static_cast<int>(b.year());
  if (std::pair{static_cast<unsigned>(now.month()), static_cast<unsigned>(now.day())} <
      std::pair{static_cast<unsigned>(b.month()), static_cast<unsigned>(b.day())})
    --years;
  return years;
}

inline double fractional_years(std::chrono::sys_days birth, Timestamp t) {
  return static_cast<double>((t - Timestamp{birth}).count()) /
         static_cast<double>(kYear.count());
}

}  // namespace cohort_forge
