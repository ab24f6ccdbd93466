#pragma once

// UTC calendar dates and second-resolution instants with ISO-8601 text forms.

#include <charconv>
#include <chrono>
#include <cstdio>
#include <string>
#include <string_view>

#include "replica/errors.hpp"

namespace replica {

using Date = std::chrono::sys_days;
using Instant = std::chrono::sys_seconds;

namespace detail {

inline int parse_fixed_int(std::string_view s, std::size_t pos, std::size_t len, std::string_view what) {
    int v = 0;
    if (pos + len > s.size()) throw Error("bad " + std::string(what) + ": " + std::string(s));
    auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, v);
    if (ec != std::errc{} || ptr != s.data() + pos + len)
        throw Error("bad " + std::string(what) + ": " + std::string(s));
    return v;
}

inline Date make_date(int y, int m, int d, std::string_view src) {
    std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                    std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) throw Error("invalid calendar date: " + std::string(src));
    return Date{ymd};
}

} // namespace detail

/// Parses `YYYY-MM-DD`.
inline Date parse_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw Error("bad date: " + std::string(s));
    return detail::make_date(detail::parse_fixed_int(s, 0, 4, "date"), detail::parse_fixed_int(s, 5, 2, "date"),
                             detail::parse_fixed_int(s, 8, 2, "date"), s);
}

inline std::string format_date(Date d) {
    std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

/// Parses `YYYY-MM-DDTHH:MM:SSZ` (UTC only).
inline Instant parse_instant(std::string_view s) {
    if (s.size() != 20 || s[10] != 'T' || s[13] != ':' || s[16] != ':' || s[19] != 'Z')
        throw Error("bad timestamp: " + std::string(s));
    Date d = parse_date(s.substr(0, 10));
    int hh = detail::parse_fixed_int(s, 11, 2, "timestamp");
    int mm = detail::parse_fixed_int(s, 14, 2, "timestamp");
    int ss = detail::parse_fixed_int(s, 17, 2, "timestamp");
    if (hh > 23 || mm > 59 || ss > 59) throw Error("bad timestamp: " + std::string(s));
    return Instant{d} + std::chrono::hours{hh} + std::chrono::minutes{mm} + std::chrono::seconds{ss};
}

inline std::string format_instant(Instant t) {
    auto day = std::chrono::floor<std::chrono::days>(t);
    std::chrono::hh_mm_ss hms{t - day};
    char buf[48];
    std::snprintf(buf, sizeof buf, "T%02ld:%02ld:%02ldZ", static_cast<long>(hms.hours().count()),
                  static_cast<long>(hms.minutes().count()), static_cast<long>(hms.seconds().count()));
    return format_date(Date{day}) + buf;
}

} // namespace replica
