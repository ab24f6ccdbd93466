#pragma once

// Content-addressed blob store, stage cache, trial ledger and bundles.
//
// Store layout under <root>:
//   objects/<aa>/<digest>   blobs, named by their SHA-256 (0444)
//   cache/<key>.json        one CacheEntry per key
//   trials/<trial_id>.json  one TrialRecord per trial
//   ledger.jsonl            append-only, one record per line
//
// cache_key bytes (SHA-256 over):
//   field("replica.cache.v1") field(stage) field(manifest_digest)
//   u64be(n_inputs) field(input_1) ... field(input_n) u64be(seed)
// trial_id bytes (SHA-256 over):
//   field("replica.trial.v1") field(canonical manifest) field(image_ref)
//   u64be(n_files) field(file digest_1) ... field(engine version)
// where field(x) = u64be(len(x)) || x.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
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
#include "replica/tar.hpp"

namespace replica {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kEngineVersion = "replica/0.1.0";

inline std::string now_timestamp() {
    return format_instant(std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now()));
}

inline std::string cache_key(StageName stage, std::string_view manifest_digest,
                             const std::vector<std::string>& input_digests, std::uint64_t seed) {
    Sha256 h;
    h.update_field("replica.cache.v1");
    h.update_field(to_string(stage));
    h.update_field(manifest_digest);
    h.update_u64(input_digests.size());
    for (const auto& d : input_digests) h.update_field(d);
    h.update_u64(seed);
    return h.finish();
}

inline std::string compute_trial_id(std::string_view canonical_manifest, std::string_view image_ref,
                                    const std::vector<std::string>& registry_digests,
                                    std::string_view engine_version = kEngineVersion) {
    Sha256 h;
    h.update_field("replica.trial.v1");
    h.update_field(canonical_manifest);
    h.update_field(image_ref);
    h.update_u64(registry_digests.size());
    for (const auto& d : registry_digests) h.update_field(d);
    h.update_field(engine_version);
    return h.finish();
}

// ---------------------------------------------------------------------------

class BlobStore {
public:
    explicit BlobStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

    fs::path path(std::string_view digest) const {
        if (!is_hex_digest(digest)) throw IntegrityError("not a digest: " + std::string(digest));
        return root_ / std::string(digest.substr(0, 2)) / std::string(digest);
    }

    bool has(std::string_view digest) const { return fs::exists(path(digest)); }

    std::string put_bytes(std::string_view bytes) {
        auto d = sha256_hex(bytes);
        auto dst = path(d);
        if (!fs::exists(dst)) {
            write_file_atomic(dst, bytes);
            fs::permissions(dst, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read);
        }
        return d;
    }

    std::string put_file(const fs::path& src) {
        auto d = sha256_file(src);
        auto dst = path(d);
        if (!fs::exists(dst)) {
            fs::create_directories(dst.parent_path());
            auto tmp = dst;
            tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter_++);
            fs::copy_file(src, tmp, fs::copy_options::overwrite_existing);
            fs::permissions(tmp, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read);
            fs::rename(tmp, dst);
        }
        return d;
    }

    /// Reads a blob and checks its digest.
    std::string get(std::string_view digest) const {
        auto p = path(digest);
        if (!fs::exists(p)) throw NotFound("blob not found: " + std::string(digest));
        auto bytes = read_file(p);
        if (sha256_hex(bytes) != digest) throw IntegrityError("blob corrupted: " + std::string(digest));
        return bytes;
    }

    /// Copies a blob to `dst` (writable copy).
    void materialize(std::string_view digest, const fs::path& dst) const {
        auto p = path(digest);
        if (!fs::exists(p)) throw NotFound("blob not found: " + std::string(digest));
        fs::create_directories(dst.parent_path());
        fs::copy_file(p, dst, fs::copy_options::overwrite_existing);
        fs::permissions(dst, fs::perms::owner_read | fs::perms::owner_write | fs::perms::group_read |
                                 fs::perms::others_read);
    }

private:
    fs::path root_;
    static inline std::atomic<std::uint64_t> counter_{0};
};

// ---------------------------------------------------------------------------

struct DeniedOutput {
    std::string path;
    std::string reason;

    bool operator==(const DeniedOutput&) const = default;
};

struct CacheEntry {
    std::string key;
    std::map<std::string, std::string> output_digests; ///< exported outputs
    std::string created_at;
    std::uint64_t size_bytes = 0;
    std::string log_digest;
    std::vector<DeniedOutput> denied;

    /// Content equality; created_at and the log are not content.
    bool same_content(const CacheEntry& o) const {
        return key == o.key && output_digests == o.output_digests && size_bytes == o.size_bytes && denied == o.denied;
    }
};

inline json to_json(const CacheEntry& e) {
    json denied = json::array();
    for (const auto& d : e.denied) denied.push_back({{"path", d.path}, {"reason", d.reason}});
    return {{"key", e.key},           {"output_digests", e.output_digests}, {"created_at", e.created_at},
            {"size_bytes", e.size_bytes}, {"log_digest", e.log_digest},       {"denied", denied}};
}

inline CacheEntry cache_entry_from_json(const json& j) {
    CacheEntry e;
    e.key = j.at("key").get<std::string>();
    e.output_digests = j.at("output_digests").get<std::map<std::string, std::string>>();
    e.created_at = j.at("created_at").get<std::string>();
    e.size_bytes = j.at("size_bytes").get<std::uint64_t>();
    e.log_digest = j.value("log_digest", std::string());
    for (const auto& d : j.value("denied", json::array()))
        e.denied.push_back({d.at("path").get<std::string>(), d.at("reason").get<std::string>()});
    return e;
}

class Cache {
public:
    explicit Cache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    std::optional<CacheEntry> get(std::string_view key) const {
        std::shared_lock lock(mutex_);
        auto p = file(key);
        if (!fs::exists(p)) return std::nullopt;
        return cache_entry_from_json(json::parse(read_file(p)));
    }

    /// Idempotent for identical content; a different entry under an existing
    /// key is an integrity error. Returns the stored entry.
    CacheEntry put(const std::string& key, CacheEntry entry) {
        entry.key = key;
        std::unique_lock lock(mutex_);
        auto p = file(key);
        if (fs::exists(p)) {
            auto old = cache_entry_from_json(json::parse(read_file(p)));
            if (!old.same_content(entry)) throw IntegrityError("cache conflict for key " + key);
            return old;
        }
        write_file_atomic(p, to_json(entry).dump(2) + "\n");
        return entry;
    }

private:
    fs::path file(std::string_view key) const {
        if (!is_hex_digest(key)) throw IntegrityError("not a cache key: " + std::string(key));
        return dir_ / (std::string(key) + ".json");
    }

    fs::path dir_;
    mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------------------

struct TrialRecord {
    std::string trial_id;
    std::string manifest_digest;
    std::string image_ref;
    std::string engine_version{kEngineVersion};
    std::vector<std::string> registry_digests; ///< data-file digests in resolve order
    std::map<std::string, std::map<std::string, std::string>> stage_digests; ///< unit_id -> path -> digest
    std::map<std::string, std::string> eval_digests; ///< eval.csv, eval.json, scatter.csv
    std::string eval_digest;                          ///< digest of eval.json
    std::string created_at;
    std::optional<std::string> parent_trial_id;
    std::string job_id;

    bool operator==(const TrialRecord&) const = default;
};

inline json to_json(const TrialRecord& r) {
    json j = {{"trial_id", r.trial_id},
              {"manifest_digest", r.manifest_digest},
              {"image_ref", r.image_ref},
              {"engine_version", r.engine_version},
              {"registry_digests", r.registry_digests},
              {"stage_digests", r.stage_digests},
              {"eval_digests", r.eval_digests},
              {"eval_digest", r.eval_digest},
              {"created_at", r.created_at},
              {"parent_trial_id", r.parent_trial_id ? json(*r.parent_trial_id) : json(nullptr)},
              {"job_id", r.job_id}};
    return j;
}

inline TrialRecord trial_from_json(const json& j) {
    TrialRecord r;
    try {
        r.trial_id = j.at("trial_id").get<std::string>();
        r.manifest_digest = j.at("manifest_digest").get<std::string>();
        r.image_ref = j.at("image_ref").get<std::string>();
        r.engine_version = j.at("engine_version").get<std::string>();
        r.registry_digests = j.at("registry_digests").get<std::vector<std::string>>();
        r.stage_digests = j.at("stage_digests").get<std::map<std::string, std::map<std::string, std::string>>>();
        r.eval_digests = j.at("eval_digests").get<std::map<std::string, std::string>>();
        r.eval_digest = j.at("eval_digest").get<std::string>();
        r.created_at = j.at("created_at").get<std::string>();
        if (!j.at("parent_trial_id").is_null()) r.parent_trial_id = j.at("parent_trial_id").get<std::string>();
        r.job_id = j.value("job_id", std::string());
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("malformed trial record: ") + e.what());
    }
    return r;
}

/// What record_trial needs from a finished job.
struct TrialInput {
    std::string job_id;
    bool succeeded = false;
    std::vector<std::string> registry_digests;
    std::map<std::string, std::map<std::string, std::string>> stage_digests;
    std::map<std::string, std::string> eval_digests;
    std::optional<std::string> parent_trial_id;
};

struct BundleImport {
    TrialRecord record;
    std::string bundle_digest;
};

class ProvenanceStore {
public:
    explicit ProvenanceStore(fs::path root)
        : root_(std::move(root)), blobs_(root_ / "objects"), cache_(root_ / "cache") {
        fs::create_directories(root_ / "trials");
    }

    const fs::path& root() const { return root_; }
    BlobStore& blobs() { return blobs_; }
    const BlobStore& blobs() const { return blobs_; }
    Cache& cache() { return cache_; }

    std::optional<TrialRecord> find_trial(std::string_view trial_id) const {
        if (!is_hex_digest(trial_id)) return std::nullopt;
        std::shared_lock lock(mutex_);
        auto p = root_ / "trials" / (std::string(trial_id) + ".json");
        if (!fs::exists(p)) return std::nullopt;
        return trial_from_json(json::parse(read_file(p)));
    }

    TrialRecord trial(std::string_view trial_id) const {
        auto r = find_trial(trial_id);
        if (!r) throw NotFound("unknown trial " + std::string(trial_id));
        return *r;
    }

    /// All ledger lines in append order.
    std::vector<TrialRecord> ledger() const {
        std::shared_lock lock(mutex_);
        std::vector<TrialRecord> out;
        auto p = root_ / "ledger.jsonl";
        if (!fs::exists(p)) return out;
        std::ifstream in(p);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) out.push_back(trial_from_json(json::parse(line)));
        return out;
    }

    /// Appends a record for a succeeded job. Identical content returns the
    /// existing record. A parent link equal to the new id is dropped.
    TrialRecord record_trial(const TrialInput& in, const JobManifest& m) {
        if (!in.succeeded) throw StateError("job " + in.job_id + " did not succeed; no trial recorded");
        auto canonical = canonicalize(m);
        TrialRecord r;
        r.trial_id = compute_trial_id(canonical, m.image_ref, in.registry_digests);
        r.manifest_digest = sha256_hex(canonical);
        r.image_ref = m.image_ref;
        r.registry_digests = in.registry_digests;
        r.stage_digests = in.stage_digests;
        r.eval_digests = in.eval_digests;
        if (auto it = in.eval_digests.find("eval.json"); it != in.eval_digests.end()) r.eval_digest = it->second;
        r.created_at = now_timestamp();
        if (in.parent_trial_id && *in.parent_trial_id != r.trial_id) r.parent_trial_id = in.parent_trial_id;
        r.job_id = in.job_id;
        blobs_.put_bytes(canonical);

        if (auto old = find_trial(r.trial_id)) {
            if (old->stage_digests != r.stage_digests || old->eval_digests != r.eval_digests)
                throw IntegrityError("trial " + r.trial_id + " re-recorded with different outputs");
            return *old;
        }
        append(r);
        return r;
    }

    /// Deterministic archive: trial.json, manifest.json, eval/*, outputs/<unit>/<path>.
    std::string export_bundle(std::string_view trial_id) const {
        auto r = trial(trial_id);
        std::vector<tar::Entry> entries;
        entries.push_back({"trial.json", to_json(r).dump(2) + "\n"});
        entries.push_back({"manifest.json", blobs_.get(r.manifest_digest)});
        for (const auto& [name, d] : r.eval_digests) entries.push_back({"eval/" + name, blobs_.get(d)});
        for (const auto& [unit, outputs] : r.stage_digests)
            for (const auto& [path, d] : outputs) entries.push_back({"outputs/" + unit + "/" + path, blobs_.get(d)});
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
        return tar::write(entries);
    }

    /// Verifies every digest in the archive, stores its blobs and registers
    /// the record (fields unchanged). Errors name the failing path.
    BundleImport import_bundle(std::string_view archive) {
        auto entries = tar::read(archive);
        std::map<std::string, const std::string*> by_name;
        for (const auto& e : entries)
            if (!by_name.emplace(e.name, &e.data).second) throw IntegrityError("duplicate bundle entry: " + e.name);
        auto need = [&](const std::string& name) -> const std::string& {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw IntegrityError("bundle missing " + name);
            return *it->second;
        };
        TrialRecord r;
        try {
            r = trial_from_json(json::parse(need("trial.json")));
        } catch (const json::exception& e) {
            throw IntegrityError(std::string("trial.json: ") + e.what());
        }
        const auto& manifest_bytes = need("manifest.json");
        if (sha256_hex(manifest_bytes) != r.manifest_digest) throw IntegrityError("digest mismatch: manifest.json");
        JobManifest m;
        try {
            m = parse_manifest(manifest_bytes);
        } catch (const Error& e) {
            throw IntegrityError(std::string("manifest.json: ") + e.what());
        }
        if (canonicalize(m) != manifest_bytes) throw IntegrityError("manifest.json: not canonical");
        if (m.image_ref != r.image_ref) throw IntegrityError("trial.json: image_ref does not match manifest");
        if (compute_trial_id(manifest_bytes, r.image_ref, r.registry_digests, r.engine_version) != r.trial_id)
            throw IntegrityError("trial.json: trial_id does not match its content");

        std::set<std::string> expected{"trial.json", "manifest.json"};
        auto check = [&](const std::string& name, const std::string& digest) {
            const auto& bytes = need(name);
            if (sha256_hex(bytes) != digest) throw IntegrityError("digest mismatch: " + name);
            expected.insert(name);
        };
        for (const auto& [name, d] : r.eval_digests) check("eval/" + name, d);
        if (!r.eval_digest.empty() && r.eval_digests.count("eval.json") && r.eval_digests.at("eval.json") != r.eval_digest)
            throw IntegrityError("trial.json: eval_digest mismatch");
        for (const auto& [unit, outputs] : r.stage_digests)
            for (const auto& [path, d] : outputs) check("outputs/" + unit + "/" + path, d);
        for (const auto& [name, data] : by_name)
            if (!expected.count(name)) throw IntegrityError("unexpected bundle entry: " + name);

        blobs_.put_bytes(manifest_bytes);
        for (const auto& e : entries)
            if (e.name != "trial.json" && e.name != "manifest.json") blobs_.put_bytes(e.data);

        BundleImport out{r, sha256_hex(archive)};
        if (auto old = find_trial(r.trial_id)) {
            if (old->stage_digests != r.stage_digests || old->eval_digests != r.eval_digests)
                throw IntegrityError("trial " + r.trial_id + " already recorded with different outputs");
            out.record = *old;
            return out;
        }
        append(r);
        return out;
    }

    JobManifest trial_manifest(const TrialRecord& r) const { return parse_manifest(blobs_.get(r.manifest_digest)); }

private:
    void append(const TrialRecord& r) {
        std::unique_lock lock(mutex_);
        // Serialise with other processes sharing the store.
        int fd = ::open((root_ / "ledger.lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd >= 0) ::flock(fd, LOCK_EX);
        auto p = root_ / "trials" / (r.trial_id + ".json");
        if (!fs::exists(p)) {
            write_file_atomic(p, to_json(r).dump(2) + "\n");
            std::ofstream out(root_ / "ledger.jsonl", std::ios::app | std::ios::binary);
            out << to_json(r).dump() << "\n";
        }
        if (fd >= 0) ::close(fd);
    }

    fs::path root_;
    BlobStore blobs_;
    Cache cache_;
    mutable std::shared_mutex mutex_;
};

/// Side-by-side summary of two trials.
inline json compare_trials(const ProvenanceStore& store, std::string_view a_id, std::string_view b_id) {
    auto a = store.trial(a_id), b = store.trial(b_id);
    json ma = to_json(store.trial_manifest(a)), mb = to_json(store.trial_manifest(b));
    json manifest_diff = json::array();
    for (const auto& op : json::diff(ma, mb)) manifest_diff.push_back(op);

    std::set<std::string> units;
    for (const auto& [u, o] : a.stage_digests) units.insert(u);
    for (const auto& [u, o] : b.stage_digests) units.insert(u);
    std::size_t same = 0;
    json differing = json::array();
    for (const auto& u : units) {
        auto ia = a.stage_digests.find(u), ib = b.stage_digests.find(u);
        if (ia != a.stage_digests.end() && ib != b.stage_digests.end() && ia->second == ib->second)
            ++same;
        else
            differing.push_back(u);
    }
    auto bias = [&](const TrialRecord& r) -> json {
        auto it = r.eval_digests.find("eval.json");
        if (it == r.eval_digests.end()) return nullptr;
        auto j = json::parse(store.blobs().get(it->second));
        return j.contains("aggregate") ? j["aggregate"].value("pooled", json(nullptr)) : json(nullptr);
    };
    return {{"a", a.trial_id},
            {"b", b.trial_id},
            {"same_trial", a.trial_id == b.trial_id},
            {"manifest_diff", manifest_diff},
            {"units_identical", same},
            {"units_differing", differing},
            {"eval_identical", a.eval_digests == b.eval_digests},
            {"bias_a", bias(a)},
            {"bias_b", bias(b)}};
}

} // namespace replica
