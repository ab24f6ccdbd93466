#pragma once

// Course/session catalog and the execute-against access policy.
//
// On disk, under the registry root:
//   index/<course_id>.json           course index (descriptor with digests)
//   data/<course_id>/<session_id>/   immutable copies of the session files
//
// Nothing here hands raw file contents to callers; the engine only learns
// paths, digests and sizes.

#include <fnmatch.h>
#include <sys/stat.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/civil_time.hpp"
#include "replica/digest.hpp"
#include "replica/errors.hpp"
#include "replica/manifest.hpp"

namespace replica {

namespace fs = std::filesystem;

struct DataFile {
    std::string path; ///< relative to the session directory
    std::string sha256;
    std::uint64_t size = 0;

    bool operator==(const DataFile&) const = default;
};

struct Session {
    std::string session_id;
    Date start_date{};
    int num_weeks = 0;
    std::optional<std::uint64_t> num_learners;
    std::vector<DataFile> data_files;

    bool operator==(const Session&) const = default;
};

struct Course {
    std::string course_id;
    std::string platform_schema;
    std::vector<Session> sessions; ///< sorted by start_date

    bool operator==(const Course&) const = default;

    const Session* find_session(std::string_view id) const {
        for (const auto& s : sessions)
            if (s.session_id == id) return &s;
        return nullptr;
    }
};

inline constexpr std::uint64_t kDefaultMaxExportBytes = 64ull << 20;

struct AccessPolicy {
    std::vector<std::string> export_allowlist;
    std::uint64_t max_export_bytes = kDefaultMaxExportBytes;

    static constexpr bool data_mount_read_only() { return true; }
    static constexpr bool network_allowed() { return false; }

    bool operator==(const AccessPolicy&) const = default;
};

/// Outputs of the reference pipeline.
inline AccessPolicy default_access_policy() {
    return AccessPolicy{{"features.csv", "labels.csv", "model.json", "predictions_w*.csv", "eval.csv"},
                        kDefaultMaxExportBytes};
}

struct ExportDecision {
    std::string path;
    bool allowed = false;
    std::string reason; ///< empty when allowed

    bool operator==(const ExportDecision&) const = default;
};

/// Decides export per path. Paths are processed in sorted order; a path is
/// allowed iff it is a safe relative path, matches an allowlist glob
/// (fnmatch, `*` does not cross `/`), and the cumulative size of the
/// candidate paths up to and including it is within the quota. Candidate
/// bytes, not allowed bytes, feed the quota so that widening the allowlist
/// can never revoke a path.
inline std::vector<ExportDecision> check_export(const std::map<std::string, std::uint64_t>& sizes,
                                                const AccessPolicy& policy) {
    std::vector<ExportDecision> out;
    std::uint64_t cumulative = 0;
    for (const auto& [path, size] : sizes) {
        ExportDecision d{path, false, {}};
        if (!is_safe_relative_path(path)) {
            d.reason = "path traversal";
            out.push_back(std::move(d));
            continue;
        }
        cumulative += size;
        bool listed = std::any_of(policy.export_allowlist.begin(), policy.export_allowlist.end(),
                                  [&](const std::string& pat) {
                                      return ::fnmatch(pat.c_str(), path.c_str(), FNM_PATHNAME | FNM_PERIOD) == 0;
                                  });
        if (!listed)
            d.reason = "not allowlisted";
        else if (cumulative > policy.max_export_bytes)
            d.reason = "quota";
        else
            d.allowed = true;
        out.push_back(std::move(d));
    }
    return out;
}

inline json to_json(const Course& c) {
    json sessions = json::array();
    for (const auto& s : c.sessions) {
        json files = json::array();
        for (const auto& f : s.data_files) files.push_back({{"path", f.path}, {"sha256", f.sha256}, {"size", f.size}});
        json js = {{"session_id", s.session_id},
                   {"start_date", format_date(s.start_date)},
                   {"num_weeks", s.num_weeks},
                   {"files", std::move(files)}};
        if (s.num_learners) js["num_learners"] = *s.num_learners;
        sessions.push_back(std::move(js));
    }
    return {{"course_id", c.course_id}, {"platform_schema", c.platform_schema}, {"sessions", std::move(sessions)}};
}

/// Parses a course descriptor and checks its structural invariants (not the
/// file digests).
inline Course course_from_json(const json& doc) {
    auto fail = [](const std::string& msg) -> RegistryError { return RegistryError("descriptor: " + msg); };
    try {
        if (!doc.is_object()) throw fail("must be an object");
        for (auto it = doc.begin(); it != doc.end(); ++it)
            if (it.key() != "course_id" && it.key() != "platform_schema" && it.key() != "sessions")
                throw fail("unknown field \"" + it.key() + "\"");
        Course c;
        c.course_id = doc.at("course_id").get<std::string>();
        c.platform_schema = doc.at("platform_schema").get<std::string>();
        if (!is_safe_id(c.course_id)) throw fail("invalid course_id \"" + c.course_id + "\"");
        for (const auto& js : doc.at("sessions")) {
            for (auto it = js.begin(); it != js.end(); ++it) {
                static const std::set<std::string> known{"session_id", "start_date", "num_weeks", "num_learners",
                                                         "files"};
                if (!known.contains(it.key())) throw fail("unknown session field \"" + it.key() + "\"");
            }
            Session s;
            s.session_id = js.at("session_id").get<std::string>();
            if (!is_safe_id(s.session_id)) throw fail("invalid session_id \"" + s.session_id + "\"");
            s.start_date = parse_date(js.at("start_date").get<std::string>());
            s.num_weeks = js.at("num_weeks").get<int>();
            if (s.num_weeks < 2) throw fail("num_weeks must be >= 2 (session " + s.session_id + ")");
            if (js.contains("num_learners")) s.num_learners = js.at("num_learners").get<std::uint64_t>();
            for (const auto& jf : js.at("files")) {
                DataFile f{jf.at("path").get<std::string>(), jf.at("sha256").get<std::string>(),
                           jf.at("size").get<std::uint64_t>()};
                if (!is_safe_relative_path(f.path)) throw fail("unsafe file path \"" + f.path + "\"");
                if (!is_hex_digest(f.sha256)) throw fail("sha256 must be 64 lowercase hex chars");
                s.data_files.push_back(std::move(f));
            }
            std::sort(s.data_files.begin(), s.data_files.end(),
                      [](const DataFile& a, const DataFile& b) { return a.path < b.path; });
            for (std::size_t i = 1; i < s.data_files.size(); ++i)
                if (s.data_files[i].path == s.data_files[i - 1].path) throw fail("duplicate file " + s.data_files[i].path);
            c.sessions.push_back(std::move(s));
        }
        if (c.sessions.empty()) throw fail("course has no sessions");
        std::sort(c.sessions.begin(), c.sessions.end(), [](const Session& a, const Session& b) {
            return a.start_date != b.start_date ? a.start_date < b.start_date : a.session_id < b.session_id;
        });
        for (std::size_t i = 1; i < c.sessions.size(); ++i) {
            if (c.sessions[i].start_date == c.sessions[i - 1].start_date)
                throw fail("session start dates must be distinct");
        }
        std::set<std::string> ids;
        for (const auto& s : c.sessions)
            if (!ids.insert(s.session_id).second) throw fail("duplicate session_id \"" + s.session_id + "\"");
        return c;
    } catch (const json::exception& e) {
        throw fail(e.what());
    } catch (const RegistryError&) {
        throw;
    } catch (const Error& e) {
        throw fail(e.what());
    }
}

struct SessionRef {
    std::string course_id;
    std::string session_id;

    auto operator<=>(const SessionRef&) const = default;
};

class Registry {
public:
    explicit Registry(fs::path root) : root_(std::move(root)) {
        fs::create_directories(root_ / "index");
        fs::create_directories(root_ / "data");
        for (const auto& entry : fs::directory_iterator(root_ / "index")) {
            if (entry.path().extension() != ".json") continue;
            Course c = course_from_json(json::parse(read_file(entry.path())));
            courses_.emplace(c.course_id, std::move(c));
        }
    }

    const fs::path& root() const { return root_; }

    /// Registers the course in `descriptor_path`. Session files are read from
    /// `<descriptor dir>/data/<course>/<session>/<path>`, verified, and copied
    /// into the registry's immutable data tree.
    Course register_course(const fs::path& descriptor_path) {
        Course c = course_from_json(json::parse(read_file(descriptor_path), nullptr, true));
        const fs::path base = descriptor_path.has_parent_path() ? descriptor_path.parent_path() : fs::path(".");

        for (const auto& s : c.sessions) {
            for (const auto& f : s.data_files) {
                auto src = base / "data" / c.course_id / s.session_id / f.path;
                if (!fs::is_regular_file(src)) throw RegistryError("file not found: " + src.string());
                if (fs::file_size(src) != f.size) throw RegistryError("size mismatch: " + src.string());
                if (sha256_file(src) != f.sha256) throw RegistryError("digest mismatch: " + src.string());
            }
        }

        std::unique_lock lock(mutex_);
        if (auto it = courses_.find(c.course_id); it != courses_.end()) {
            if (it->second == c) return it->second;
            throw RegistryError("course \"" + c.course_id + "\" already registered with different content");
        }
        for (const auto& s : c.sessions) {
            auto dir = session_dir(c.course_id, s.session_id);
            for (const auto& f : s.data_files) {
                auto dst = dir / f.path;
                fs::create_directories(dst.parent_path());
                if (fs::exists(dst)) {
                    fs::permissions(dst, fs::perms::owner_write, fs::perm_options::add);
                    fs::remove(dst);
                }
                fs::copy_file(base / "data" / c.course_id / s.session_id / f.path, dst);
                fs::permissions(dst, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read);
            }
        }
        write_file_atomic(root_ / "index" / (c.course_id + ".json"), to_json(c).dump(2) + "\n");
        return courses_.emplace(c.course_id, c).first->second;
    }

    const Course* find_course(std::string_view id) const {
        std::shared_lock lock(mutex_);
        auto it = courses_.find(std::string(id));
        return it == courses_.end() ? nullptr : &it->second;
    }

    /// Snapshot of all courses sorted by course_id.
    std::vector<Course> courses() const {
        std::shared_lock lock(mutex_);
        std::vector<Course> out;
        for (const auto& [id, c] : courses_) out.push_back(c);
        return out;
    }

    /// Sorted by (course_id, start_date).
    std::vector<SessionRef> resolve_selector(const DatasetSelector& sel) const {
        std::shared_lock lock(mutex_);
        std::vector<SessionRef> out;
        auto add_course = [&](const Course& c) {
            for (const auto& s : c.sessions) out.push_back({c.course_id, s.session_id});
        };
        switch (sel.kind) {
        case SelectorKind::all_courses:
            for (const auto& [id, c] : courses_) add_course(c);
            break;
        case SelectorKind::whole_course:
        case SelectorKind::single_session: {
            if (!sel.course_id) throw RegistryError("selector needs course_id");
            auto it = courses_.find(*sel.course_id);
            if (it == courses_.end()) throw RegistryError("unknown course \"" + *sel.course_id + "\"");
            if (sel.kind == SelectorKind::whole_course) {
                add_course(it->second);
            } else {
                if (!sel.session_id || !it->second.find_session(*sel.session_id))
                    throw RegistryError("unknown session \"" + sel.session_id.value_or("") + "\"");
                out.push_back({*sel.course_id, *sel.session_id});
            }
            break;
        }
        }
        return out;
    }

    fs::path session_dir(std::string_view course_id, std::string_view session_id) const {
        return root_ / "data" / std::string(course_id) / std::string(session_id);
    }

    const Session& session(std::string_view course_id, std::string_view session_id) const {
        const Course* c = find_course(course_id);
        if (!c) throw RegistryError("unknown course \"" + std::string(course_id) + "\"");
        const Session* s = c->find_session(session_id);
        if (!s) throw RegistryError("unknown session \"" + std::string(session_id) + "\"");
        return *s;
    }

    /// Re-hashes every stored file of the session against its index.
    void verify_session(std::string_view course_id, std::string_view session_id) const {
        const Session& s = session(course_id, session_id);
        auto dir = session_dir(course_id, session_id);
        for (const auto& f : s.data_files)
            if (sha256_file(dir / f.path) != f.sha256)
                throw IntegrityError("registry data corrupted: " + (dir / f.path).string());
    }

private:
    fs::path root_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, Course> courses_;
};

} // namespace replica
