#pragma once

// SHA-256 content digests, lowercase hex everywhere.

#include <openssl/evp.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "replica/errors.hpp"

namespace replica {

namespace detail {
struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};
} // namespace detail

inline std::string to_hex(std::span<const unsigned char> bytes) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char b : bytes) {
        out.push_back(kHex[b >> 4]);
        out.push_back(kHex[b & 0x0f]);
    }
    return out;
}

inline bool is_hex_digest(std::string_view s) {
    if (s.size() != 64) return false;
    for (char c : s)
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    return true;
}

/// Incremental SHA-256.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
            throw Error("sha256: digest init failed");
    }

    Sha256& update(std::string_view bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }

    Sha256& update(std::span<const unsigned char> bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }

    /// Big-endian 64-bit integer.
    Sha256& update_u64(std::uint64_t v) {
        std::array<unsigned char, 8> buf{};
        for (int i = 7; i >= 0; --i) {
            buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v & 0xff);
            v >>= 8;
        }
        return update(std::span<const unsigned char>(buf));
    }

    /// Length-prefixed field: u64be(size) followed by the bytes.
    Sha256& update_field(std::string_view bytes) {
        update_u64(bytes.size());
        return update(bytes);
    }

    std::array<unsigned char, 32> finish_raw() {
        std::array<unsigned char, 32> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        return out;
    }

    std::string finish() {
        auto raw = finish_raw();
        return to_hex(std::span<const unsigned char>(raw));
    }

private:
    std::unique_ptr<EVP_MD_CTX, detail::MdCtxDeleter> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) {
    return Sha256{}.update(bytes).finish();
}

inline std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("file not found: " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        auto got = in.gcount();
        if (got > 0) h.update(std::string_view(buf.data(), static_cast<std::size_t>(got)));
    }
    return h.finish();
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("file not found: " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Write via a temp file + rename so readers never see partial content.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write " + tmp.string());
    }
    fs::rename(tmp, path);
}

} // namespace replica
