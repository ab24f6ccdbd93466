#pragma once

// Deterministic POSIX ustar archives: entries in the given order, mode 0644,
// uid/gid 0, mtime 0, empty owner names. Regular files only.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "replica/errors.hpp"

namespace replica::tar {

struct Entry {
    std::string name;
    std::string data;

    bool operator==(const Entry&) const = default;
};

namespace detail {

inline void put_octal(char* field, std::size_t width, std::uint64_t value) {
    // width includes the terminating NUL
    if (value >> (3 * (width - 1))) throw Error("tar: value too large for header field");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(value));
    std::memcpy(field, buf, width);
}

inline std::uint64_t get_octal(const char* field, std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width && field[i]; ++i) {
        char c = field[i];
        if (c == ' ') continue;
        if (c < '0' || c > '7') throw IntegrityError("tar: bad octal field");
        v = (v << 3) | static_cast<std::uint64_t>(c - '0');
    }
    return v;
}

inline unsigned header_checksum(const char* block) {
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(block[i]);
    return sum;
}

} // namespace detail

inline std::string write(const std::vector<Entry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        char h[512] = {};
        std::string_view name = e.name, prefix;
        if (name.size() > 100) {
            auto slash = name.rfind('/', 155);
            if (slash == std::string_view::npos || name.size() - slash - 1 > 100)
                throw Error("tar: path too long: " + e.name);
            prefix = name.substr(0, slash);
            name = name.substr(slash + 1);
        }
        std::memcpy(h, name.data(), name.size());
        detail::put_octal(h + 100, 8, 0644);
        detail::put_octal(h + 108, 8, 0);
        detail::put_octal(h + 116, 8, 0);
        detail::put_octal(h + 124, 12, e.data.size());
        detail::put_octal(h + 136, 12, 0);
        h[156] = '0';
        std::memcpy(h + 257, "ustar", 6);
        std::memcpy(h + 263, "00", 2);
        std::memcpy(h + 345, prefix.data(), prefix.size());
        detail::put_octal(h + 148, 7, detail::header_checksum(h));
        h[155] = ' ';
        out.append(h, 512);
        out += e.data;
        out.append((512 - e.data.size() % 512) % 512, '\0');
    }
    out.append(1024, '\0');
    return out;
}

inline std::vector<Entry> read(std::string_view archive) {
    std::vector<Entry> out;
    std::size_t pos = 0;
    while (true) {
        if (pos + 512 > archive.size()) throw IntegrityError("tar: truncated archive");
        const char* h = archive.data() + pos;
        bool zero = true;
        for (int i = 0; i < 512 && zero; ++i) zero = h[i] == 0;
        if (zero) break;
        if (std::memcmp(h + 257, "ustar", 5) != 0) throw IntegrityError("tar: not a ustar header");
        if (detail::get_octal(h + 148, 8) != detail::header_checksum(h))
            throw IntegrityError("tar: header checksum mismatch");
        if (h[156] != '0' && h[156] != '\0') throw IntegrityError("tar: only regular files are supported");
        std::string name(h, strnlen(h, 100));
        std::string prefix(h + 345, strnlen(h + 345, 155));
        if (!prefix.empty()) name = prefix + "/" + name;
        auto size = detail::get_octal(h + 124, 12);
        pos += 512;
        if (pos + size > archive.size()) throw IntegrityError("tar: truncated entry " + name);
        out.push_back({std::move(name), std::string(archive.substr(pos, size))});
        pos += (size + 511) / 512 * 512;
    }
    return out;
}

} // namespace replica::tar
