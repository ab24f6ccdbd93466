#pragma once

// Jobs: plan a manifest into work units, run them on a worker pool, keep the
// job state in an append-only event log, assemble the report.
//
// Engine root layout:
//   engine.json                       optional backend / access policy
//   registry/                         see Registry
//   store/                            see ProvenanceStore
//   jobs/<job_id>/manifest.json       rendered manifest
//   jobs/<job_id>/events.jsonl        event log (one JSON object per line)
//   jobs/<job_id>/report.json         JobReport, written before the terminal phase event
//   jobs/<job_id>/eval.csv|eval.json|scatter.csv
//   work/<job_id>/<course>/<slot>/    data, input, scratch, output, stage.log
//
// Event log lines carry `seq` plus one of
//   {"event":"submitted","job_id","manifest_digest","parent_trial_id"}
//   {"event":"phase","phase"}
//   {"event":"planned","units":[unit_id...]}
//   {"event":"unit","unit","state"[,"status","reason"]}
//   {"event":"trial","trial_id"}
// Replaying the lines in order yields the JobState.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/evalstats.hpp"
#include "replica/executor.hpp"
#include "replica/manifest.hpp"
#include "replica/provenance.hpp"
#include "replica/refpipe.hpp"
#include "replica/registry.hpp"

namespace replica {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Phase { queued, planning, running, succeeded, failed, partial, cancelled };
enum class UnitState { pending, running, done, failed, skipped, cached };

inline std::string_view to_string(Phase p) {
    switch (p) {
    case Phase::queued: return "queued";
    case Phase::planning: return "planning";
    case Phase::running: return "running";
    case Phase::succeeded: return "succeeded";
    case Phase::failed: return "failed";
    case Phase::partial: return "partial";
    case Phase::cancelled: return "cancelled";
    }
    return "?";
}

inline Phase parse_phase(std::string_view s) {
    for (auto p : {Phase::queued, Phase::planning, Phase::running, Phase::succeeded, Phase::failed, Phase::partial,
                   Phase::cancelled})
        if (to_string(p) == s) return p;
    throw Error("unknown phase " + std::string(s));
}

inline bool is_terminal(Phase p) { return p >= Phase::succeeded; }

inline std::string_view to_string(UnitState s) {
    switch (s) {
    case UnitState::pending: return "pending";
    case UnitState::running: return "running";
    case UnitState::done: return "done";
    case UnitState::failed: return "failed";
    case UnitState::skipped: return "skipped";
    case UnitState::cached: return "cached";
    }
    return "?";
}

inline UnitState parse_unit_state(std::string_view s) {
    for (auto u : {UnitState::pending, UnitState::running, UnitState::done, UnitState::failed, UnitState::skipped,
                   UnitState::cached})
        if (to_string(u) == s) return u;
    throw Error("unknown unit state " + std::string(s));
}

inline bool unit_ok(UnitState s) { return s == UnitState::done || s == UnitState::cached; }

// ---------------------------------------------------------------------------
// Planning

struct WorkUnit {
    std::string unit_id; ///< <course>/<slot>
    std::string slot;    ///< extract-<session>, train-holdout, test-cv3, evaluate, ...
    StageName stage = StageName::extract;
    std::string course_id;
    std::string session_id; ///< empty for units spanning several sessions
    std::set<std::string> depends_on;
    std::string cache_key;
    std::optional<stats::SplitScheme> split;
    unsigned fold = 0;
    // extract only
    std::string data_session;
    std::optional<Date> session_start;
    int num_weeks = 0;
    std::vector<std::string> data_digests;

    /// Dispatch and report order.
    auto order_key() const { return std::tie(course_id, session_id, stage, unit_id); }
};

/// Text hashed into a unit's cache key besides its data and dependencies.
inline std::string unit_role(const WorkUnit& u) {
    std::string split = u.split ? std::string(stats::to_string(*u.split)) : "none";
    return "unit=" + u.unit_id + ";course=" + u.course_id + ";session=" + u.session_id + ";split=" + split +
           ";fold=" + std::to_string(u.fold);
}

/// Expands a manifest into work units (sorted by order_key) with cache keys.
inline std::vector<WorkUnit> plan_units(const JobManifest& m, const Registry& reg) {
    auto refs = reg.resolve_selector(m.dataset_selector);
    if (refs.empty()) throw PlanError("dataset selector resolves to no sessions");
    std::map<std::string, std::vector<std::string>> by_course; // sessions in start-date order
    for (const auto& r : refs) by_course[r.course_id].push_back(r.session_id);

    const auto& ev = m.eval_config;
    std::vector<WorkUnit> units;
    for (const auto& [course, sessions] : by_course) {
        auto uid = [&](const std::string& slot) { return course + "/" + slot; };
        auto make = [&](std::string slot, StageName st, std::string session) {
            WorkUnit u;
            u.slot = std::move(slot);
            u.unit_id = uid(u.slot);
            u.stage = st;
            u.course_id = course;
            u.session_id = std::move(session);
            return u;
        };
        std::vector<std::string> extracts;
        for (const auto& s : sessions) {
            WorkUnit u = make("extract-" + s, StageName::extract, s);
            const Session& sess = reg.session(course, s);
            u.data_session = s;
            u.session_start = sess.start_date;
            u.num_weeks = sess.num_weeks;
            for (const auto& f : sess.data_files) u.data_digests.push_back(f.sha256);
            extracts.push_back(u.unit_id);
            units.push_back(std::move(u));
        }
        std::set<std::string> tests;
        if (uses_holdout(ev.scheme)) {
            if (sessions.size() < 2)
                throw PlanError("holdout needs at least 2 sessions in course \"" + course + "\"");
            WorkUnit tr = make("train-holdout", StageName::train, "");
            tr.split = stats::SplitScheme::holdout;
            tr.depends_on.insert(extracts.begin(), extracts.end() - 1);
            WorkUnit te = make("test-holdout", StageName::test, sessions.back());
            te.split = stats::SplitScheme::holdout;
            te.depends_on = {tr.unit_id, extracts.back()};
            tests.insert(te.unit_id);
            units.push_back(std::move(tr));
            units.push_back(std::move(te));
        }
        if (uses_cv(ev.scheme)) {
            std::string cv_session = sessions.size() == 1 ? sessions.front() : "";
            for (unsigned f = 1; f <= ev.k; ++f) {
                WorkUnit tr = make("train-cv" + std::to_string(f), StageName::train, cv_session);
                tr.split = stats::SplitScheme::cross_validation;
                tr.fold = f;
                tr.depends_on.insert(extracts.begin(), extracts.end());
                WorkUnit te = make("test-cv" + std::to_string(f), StageName::test, cv_session);
                te.split = stats::SplitScheme::cross_validation;
                te.fold = f;
                te.depends_on.insert(extracts.begin(), extracts.end());
                te.depends_on.insert(tr.unit_id);
                tests.insert(te.unit_id);
                units.push_back(std::move(tr));
                units.push_back(std::move(te));
            }
        }
        WorkUnit e = make("evaluate", StageName::evaluate, "");
        e.depends_on = tests;
        units.push_back(std::move(e));
    }

    // Keys in dependency order: stages only depend on earlier stages.
    const std::string mdigest = manifest_digest(m);
    std::map<std::string, std::string> keys;
    std::vector<std::size_t> order(units.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return units[a].stage < units[b].stage; });
    for (auto i : order) {
        auto& u = units[i];
        std::vector<std::string> inputs{sha256_hex(unit_role(u))};
        inputs.insert(inputs.end(), u.data_digests.begin(), u.data_digests.end());
        for (const auto& d : u.depends_on) inputs.push_back(keys.at(d)); // std::set: sorted by unit_id
        u.cache_key = cache_key(u.stage, mdigest, inputs, m.seed);
        keys[u.unit_id] = u.cache_key;
    }
    std::sort(units.begin(), units.end(), [](const WorkUnit& a, const WorkUnit& b) { return a.order_key() < b.order_key(); });
    return units;
}

/// Data-file digests touched by the manifest, in selector resolve order.
inline std::vector<std::string> touched_registry_digests(const JobManifest& m, const Registry& reg) {
    std::vector<std::string> out;
    for (const auto& r : reg.resolve_selector(m.dataset_selector))
        for (const auto& f : reg.session(r.course_id, r.session_id).data_files) out.push_back(f.sha256);
    return out;
}

// ---------------------------------------------------------------------------
// State and reports

struct JobState {
    std::string job_id;
    Phase phase = Phase::queued;
    std::map<std::string, UnitState> unit_states;
    std::optional<std::string> trial_id;

    std::map<UnitState, std::size_t> counts() const {
        std::map<UnitState, std::size_t> c;
        for (auto s : {UnitState::pending, UnitState::running, UnitState::done, UnitState::failed, UnitState::skipped,
                       UnitState::cached})
            c[s] = 0;
        for (const auto& [id, s] : unit_states) ++c[s];
        return c;
    }
};

inline json to_json(const JobState& s) {
    json units = json::object();
    for (const auto& [id, st] : s.unit_states) units[id] = to_string(st);
    json counts = json::object();
    for (const auto& [st, n] : s.counts()) counts[std::string(to_string(st))] = n;
    return {{"job_id", s.job_id},
            {"phase", to_string(s.phase)},
            {"units", units},
            {"counts", counts},
            {"total", s.unit_states.size()},
            {"trial_id", s.trial_id ? json(*s.trial_id) : json(nullptr)}};
}

struct UnitReport {
    std::string unit_id;
    std::string course_id;
    std::string session_id;
    StageName stage = StageName::extract;
    UnitState state = UnitState::pending;
    std::optional<StageStatus> status;
    int exit_code = 0;
    std::string reason;
    std::string cache_key;
    std::string log_digest;
    std::map<std::string, std::string> outputs; ///< exported path -> digest
    std::vector<DeniedOutput> denied;
    double duration = 0;
};

struct JobReport {
    std::string job_id;
    Phase phase = Phase::queued;
    std::vector<UnitReport> units; ///< sorted by (course, session, stage, unit_id)
    std::map<std::string, std::string> eval_digests;
    double wall_clock = 0;
    std::size_t cache_hits = 0;
    std::size_t executed = 0;
    std::optional<std::string> trial_id;
};

/// With `volatile_fields` false the result omits timings, job id, cache
/// bookkeeping and logs, leaving a pure function of manifest + data + seed.
inline json to_json(const JobReport& r, bool volatile_fields = true) {
    json units = json::array();
    for (const auto& u : r.units) {
        json denied = json::array();
        for (const auto& d : u.denied) denied.push_back({{"path", d.path}, {"reason", d.reason}});
        std::string outcome = unit_ok(u.state) ? "succeeded" : std::string(to_string(u.state));
        json j = {{"unit_id", u.unit_id},
                  {"course_id", u.course_id},
                  {"session_id", u.session_id},
                  {"stage", to_string(u.stage)},
                  {"outcome", outcome},
                  {"status", u.status ? json(to_string(*u.status)) : json(nullptr)},
                  {"exit_code", u.exit_code},
                  {"reason", u.reason},
                  {"cache_key", u.cache_key},
                  {"outputs", u.outputs},
                  {"denied", denied}};
        if (volatile_fields) {
            j["state"] = to_string(u.state);
            j["log_digest"] = u.log_digest;
            j["duration"] = u.duration;
        }
        units.push_back(std::move(j));
    }
    json j = {{"phase", to_string(r.phase)}, {"units", units}, {"eval_digests", r.eval_digests}};
    if (volatile_fields) {
        j["job_id"] = r.job_id;
        j["wall_clock"] = r.wall_clock;
        j["cache_hits"] = r.cache_hits;
        j["executed"] = r.executed;
        j["trial_id"] = r.trial_id ? json(*r.trial_id) : json(nullptr);
    }
    return j;
}

inline JobReport job_report_from_json(const json& j) {
    JobReport r;
    r.job_id = j.value("job_id", std::string());
    r.phase = parse_phase(j.at("phase").get<std::string>());
    r.eval_digests = j.at("eval_digests").get<std::map<std::string, std::string>>();
    r.wall_clock = j.value("wall_clock", 0.0);
    r.cache_hits = j.value("cache_hits", std::size_t{0});
    r.executed = j.value("executed", std::size_t{0});
    if (j.contains("trial_id") && !j["trial_id"].is_null()) r.trial_id = j["trial_id"].get<std::string>();
    for (const auto& ju : j.at("units")) {
        UnitReport u;
        u.unit_id = ju.at("unit_id").get<std::string>();
        u.course_id = ju.at("course_id").get<std::string>();
        u.session_id = ju.at("session_id").get<std::string>();
        u.stage = *parse_stage_name(ju.at("stage").get<std::string>());
        u.state = parse_unit_state(ju.value("state", std::string("pending")));
        if (!ju.at("status").is_null()) u.status = parse_stage_status(ju.at("status").get<std::string>());
        u.exit_code = ju.at("exit_code").get<int>();
        u.reason = ju.at("reason").get<std::string>();
        u.cache_key = ju.at("cache_key").get<std::string>();
        u.log_digest = ju.value("log_digest", std::string());
        u.outputs = ju.at("outputs").get<std::map<std::string, std::string>>();
        for (const auto& d : ju.at("denied"))
            u.denied.push_back({d.at("path").get<std::string>(), d.at("reason").get<std::string>()});
        u.duration = ju.value("duration", 0.0);
        r.units.push_back(std::move(u));
    }
    return r;
}

struct TraceEvent {
    std::uint64_t seq = 0;
    std::string unit_id;
    UnitState state = UnitState::pending;
};

/// Raised by submit when validation reports errors.
struct ValidationFailed : ManifestError {
    ValidationReport report;
    explicit ValidationFailed(ValidationReport r)
        : ManifestError("manifest validation failed with " + std::to_string(r.error_count()) + " error(s)"),
          report(std::move(r)) {}
};

struct EngineOptions {
    ExecutorBackend backend;
    AccessPolicy policy = default_access_policy();
    bool keep_work_dirs = false;
};

inline EngineOptions engine_options_from_json(const json& j) {
    EngineOptions o;
    if (j.contains("backend")) o.backend = backend_from_json(j["backend"]);
    if (j.contains("access_policy")) {
        const auto& p = j["access_policy"];
        o.policy.export_allowlist = p.value("export_allowlist", o.policy.export_allowlist);
        o.policy.max_export_bytes = p.value("max_export_bytes", o.policy.max_export_bytes);
    }
    o.keep_work_dirs = j.value("keep_work_dirs", false);
    return o;
}

inline std::string default_engine_root() {
    const char* env = std::getenv("REPLICA_ROOT");
    return env && *env ? env : ".replica";
}

// ---------------------------------------------------------------------------

class Engine {
public:
    explicit Engine(fs::path root) : Engine(root, load_options(root)) {}

    Engine(fs::path root, EngineOptions opts)
        : root_(fs::absolute(root)), opts_(std::move(opts)), registry_(root_ / "registry"), store_(root_ / "store") {
        validate_backend(opts_.backend);
        fs::create_directories(root_ / "jobs");
        fs::create_directories(root_ / "work");
    }

    ~Engine() {
        std::vector<std::jthread> bg;
        {
            std::lock_guard lock(mutex_);
            bg.swap(background_);
        }
        bg.clear(); // joins
    }

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    const fs::path& root() const { return root_; }
    Registry& registry() { return registry_; }
    const Registry& registry() const { return registry_; }
    ProvenanceStore& store() { return store_; }
    const EngineOptions& options() const { return opts_; }

    ValidationReport validate(const JobManifest& m) const { return validate_manifest(m, registry_); }

    std::string submit(const JobManifest& m, std::optional<std::string> parent_trial_id = std::nullopt) {
        auto report = validate(m);
        if (!report.ok()) throw ValidationFailed(std::move(report));
        std::string id = allocate_job_id();
        auto dir = job_dir(id);
        fs::create_directories(dir);
        write_file_atomic(dir / "manifest.json", render(m));
        auto rt = std::make_shared<JobRuntime>();
        rt->manifest = m;
        rt->state.job_id = id;
        rt->parent_trial_id = parent_trial_id;
        rt->events_path = dir / "events.jsonl";
        {
            std::lock_guard lock(rt->m);
            log_event(*rt, {{"event", "submitted"},
                            {"job_id", id},
                            {"manifest_digest", manifest_digest(m)},
                            {"parent_trial_id", parent_trial_id ? json(*parent_trial_id) : json(nullptr)}});
            log_event(*rt, {{"event", "phase"}, {"phase", "queued"}});
        }
        std::lock_guard lock(mutex_);
        jobs_[id] = rt;
        return id;
    }

    std::vector<WorkUnit> plan(const std::string& job_id) {
        auto rt = runtime(job_id);
        std::lock_guard lock(rt->m);
        if (rt->state.phase != Phase::queued)
            throw StateError("job " + job_id + " is " + std::string(to_string(rt->state.phase)) + ", not queued");
        plan_locked(*rt);
        return rt->units;
    }

    /// Runs all units; blocks until the job is terminal.
    JobReport execute(const std::string& job_id, unsigned parallelism) {
        if (parallelism < 1) throw Error("parallelism must be >= 1");
        auto rt = runtime(job_id);
        {
            std::lock_guard lock(rt->m);
            if (is_terminal(rt->state.phase)) throw StateError("job " + job_id + " is already terminal");
            if (rt->executing) throw StateError("job " + job_id + " is already running");
            if (rt->state.phase == Phase::queued) plan_locked(*rt);
            if (rt->units.empty()) rt->units = plan_units(rt->manifest, registry_);
            rt->executing = true;
        }
        try {
            return run_job(*rt, parallelism);
        } catch (...) {
            std::lock_guard lock(rt->m);
            rt->executing = false;
            throw;
        }
    }

    /// Starts execute() on a background thread (joined by the destructor).
    void execute_async(const std::string& job_id, unsigned parallelism) {
        auto rt = runtime(job_id);
        std::lock_guard lock(mutex_);
        background_.emplace_back([this, job_id, parallelism] {
            try {
                execute(job_id, parallelism);
            } catch (const std::exception&) {
                // The event log already reflects whatever happened.
            }
        });
    }

    JobState status(const std::string& job_id) const {
        {
            std::lock_guard lock(mutex_);
            if (auto it = jobs_.find(job_id); it != jobs_.end()) {
                std::lock_guard l2(it->second->m);
                return it->second->state;
            }
        }
        return replay(job_id)->state;
    }

    void cancel(const std::string& job_id) {
        auto rt = runtime(job_id);
        std::lock_guard lock(rt->m);
        if (is_terminal(rt->state.phase)) throw StateError("job " + job_id + " is already terminal");
        rt->cancel = true;
        if (!rt->executing) {
            if (rt->state.phase == Phase::queued) plan_locked(*rt);
            for (auto& [id, st] : rt->state.unit_states)
                if (st == UnitState::pending) {
                    st = UnitState::skipped;
                    log_event(*rt, {{"event", "unit"}, {"unit", id}, {"state", "skipped"}, {"reason", "cancelled"}});
                }
            rt->state.phase = Phase::cancelled;
            log_event(*rt, {{"event", "phase"}, {"phase", "cancelled"}});
        }
    }

    /// Report of a terminal job.
    JobReport report(const std::string& job_id) const {
        auto st = status(job_id);
        if (!is_terminal(st.phase)) throw StateError("job " + job_id + " is not terminal");
        auto p = job_dir(job_id) / "report.json";
        if (!fs::exists(p)) throw NotFound("no report for job " + job_id);
        return job_report_from_json(json::parse(read_file(p)));
    }

    /// Bytes of eval.csv / eval.json / scatter.csv for a terminal job.
    std::string eval_artifact(const std::string& job_id, const std::string& name) const {
        auto st = status(job_id);
        if (!is_terminal(st.phase)) throw StateError("job " + job_id + " is not terminal");
        auto p = job_dir(job_id) / name;
        if (!fs::exists(p)) throw NotFound("job " + job_id + " has no eval report");
        return read_file(p);
    }

    JobManifest job_manifest(const std::string& job_id) const {
        check_job_exists(job_id);
        return load_manifest(job_dir(job_id) / "manifest.json");
    }

    /// Start/end events of units in log order.
    std::vector<TraceEvent> trace(const std::string& job_id) const {
        check_job_exists(job_id);
        std::vector<TraceEvent> out;
        std::ifstream in(job_dir(job_id) / "events.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = json::parse(line);
            if (j.at("event") != "unit") continue;
            out.push_back({j.at("seq").get<std::uint64_t>(), j.at("unit").get<std::string>(),
                           parse_unit_state(j.at("state").get<std::string>())});
        }
        return out;
    }

    fs::path job_dir(const std::string& job_id) const {
        if (!is_safe_id(job_id)) throw NotFound("unknown job " + job_id);
        return root_ / "jobs" / job_id;
    }

    std::vector<std::string> job_ids() const {
        std::vector<std::string> out;
        for (const auto& e : fs::directory_iterator(root_ / "jobs"))
            if (e.is_directory()) out.push_back(e.path().filename().string());
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    struct JobRuntime {
        std::mutex m;
        JobManifest manifest;
        JobState state;
        std::vector<WorkUnit> units;
        std::optional<std::string> parent_trial_id;
        fs::path events_path;
        std::uint64_t seq = 0;
        std::atomic<bool> cancel{false};
        bool executing = false;
    };

    struct Task {
        std::size_t index = 0;
        std::vector<std::pair<std::string, std::map<std::string, std::string>>> inputs; ///< dep slot -> outputs
    };

    struct Outcome {
        std::size_t index = 0;
        UnitReport report;
        bool ok = false;
    };

    static EngineOptions load_options(const fs::path& root) {
        auto p = root / "engine.json";
        if (!fs::exists(p)) return {};
        try {
            return engine_options_from_json(json::parse(read_file(p)));
        } catch (const json::exception& e) {
            throw Error("engine.json: " + std::string(e.what()));
        }
    }

    void check_job_exists(const std::string& job_id) const {
        if (!fs::exists(job_dir(job_id) / "events.jsonl")) throw NotFound("unknown job " + job_id);
    }

    std::string allocate_job_id() {
        std::lock_guard lock(mutex_);
        auto counter = root_ / "jobs" / "counter";
        int fd = ::open(counter.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd < 0) throw Error("cannot open " + counter.string());
        ::flock(fd, LOCK_EX);
        char buf[32] = {};
        auto n = ::pread(fd, buf, sizeof buf - 1, 0);
        unsigned long next = (n > 0 ? std::strtoul(buf, nullptr, 10) : 0) + 1;
        std::string text = std::to_string(next) + "\n";
        (void)!::ftruncate(fd, 0);
        (void)!::pwrite(fd, text.data(), text.size(), 0);
        ::close(fd);
        char id[32];
        std::snprintf(id, sizeof id, "job-%06lu", next);
        return id;
    }

    void log_event(JobRuntime& rt, json ev) {
        ev["seq"] = ++rt.seq;
        std::ofstream out(rt.events_path, std::ios::app | std::ios::binary);
        out << ev.dump() << "\n";
        out.flush();
        if (!out) throw Error("cannot append to " + rt.events_path.string());
    }

    void set_unit(JobRuntime& rt, const std::string& id, UnitState st, const UnitReport* r = nullptr) {
        rt.state.unit_states[id] = st;
        json ev = {{"event", "unit"}, {"unit", id}, {"state", to_string(st)}};
        if (r && r->status) ev["status"] = to_string(*r->status);
        if (r && !r->reason.empty()) ev["reason"] = r->reason;
        log_event(rt, std::move(ev));
    }

    void plan_locked(JobRuntime& rt) {
        rt.state.phase = Phase::planning;
        log_event(rt, {{"event", "phase"}, {"phase", "planning"}});
        try {
            rt.units = plan_units(rt.manifest, registry_);
        } catch (const Error& e) {
            rt.state.phase = Phase::failed;
            log_event(rt, {{"event", "phase"}, {"phase", "failed"}, {"reason", e.what()}});
            throw;
        }
        json ids = json::array();
        for (const auto& u : rt.units) {
            ids.push_back(u.unit_id);
            rt.state.unit_states[u.unit_id] = UnitState::pending;
        }
        log_event(rt, {{"event", "planned"}, {"units", ids}});
    }

    /// Rebuilds a job from its directory.
    std::shared_ptr<JobRuntime> replay(const std::string& job_id) const {
        check_job_exists(job_id);
        auto rt = std::make_shared<JobRuntime>();
        rt->events_path = job_dir(job_id) / "events.jsonl";
        rt->manifest = load_manifest(job_dir(job_id) / "manifest.json");
        rt->state.job_id = job_id;
        std::ifstream in(rt->events_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json ev;
            try {
                ev = json::parse(line);
            } catch (const json::parse_error&) {
                break; // torn final line after a crash
            }
            rt->seq = ev.value("seq", rt->seq);
            const auto kind = ev.at("event").get<std::string>();
            if (kind == "submitted") {
                if (!ev.at("parent_trial_id").is_null()) rt->parent_trial_id = ev["parent_trial_id"].get<std::string>();
            } else if (kind == "phase") {
                rt->state.phase = parse_phase(ev.at("phase").get<std::string>());
            } else if (kind == "planned") {
                for (const auto& u : ev.at("units")) rt->state.unit_states[u.get<std::string>()] = UnitState::pending;
            } else if (kind == "unit") {
                rt->state.unit_states[ev.at("unit").get<std::string>()] =
                    parse_unit_state(ev.at("state").get<std::string>());
            } else if (kind == "trial") {
                rt->state.trial_id = ev.at("trial_id").get<std::string>();
            }
        }
        return rt;
    }

    std::shared_ptr<JobRuntime> runtime(const std::string& job_id) {
        std::lock_guard lock(mutex_);
        if (auto it = jobs_.find(job_id); it != jobs_.end()) return it->second;
        auto rt = replay(job_id);
        jobs_[job_id] = rt;
        return rt;
    }

    std::map<std::string, std::string> stage_env(const JobRuntime& rt, const WorkUnit& u, const fs::path& dir) const {
        const auto& m = rt.manifest;
        std::map<std::string, std::string> env{
            {"STAGE", std::string(to_string(u.stage))},
            {"COURSE_ID", u.course_id},
            {"SESSION_ID", u.session_id},
            {"SEED", std::to_string(m.seed)},
            {"DATA_DIR", (dir / "data").string()},
            {"INPUT_DIR", (dir / "input").string()},
            {"OUTPUT_DIR", (dir / "output").string()},
            {"SCRATCH_DIR", (dir / "scratch").string()},
            {"FEATURE_WEEKS", std::to_string(m.feature_weeks)},
            {"SPLIT", u.split ? std::string(stats::to_string(*u.split)) : std::string()},
            {"FOLD", std::to_string(u.fold)},
            {"CV_K", std::to_string(m.eval_config.k)},
            {"CV_AGGREGATION", std::string(to_string(m.eval_config.cv_aggregation))},
        };
        if (u.stage == StageName::extract) {
            env["NUM_WEEKS"] = std::to_string(u.num_weeks);
            env["SESSION_START"] = format_date(*u.session_start);
        }
        return env;
    }

    /// Worker body: prepare the sandbox, run, export, cache.
    Outcome run_unit(JobRuntime& rt, const Task& task, const std::set<std::string>& raw_digests) {
        const WorkUnit& u = rt.units[task.index];
        Outcome out;
        out.index = task.index;
        UnitReport& r = out.report;
        r.unit_id = u.unit_id;
        r.course_id = u.course_id;
        r.session_id = u.session_id;
        r.stage = u.stage;
        r.cache_key = u.cache_key;
        const auto t0 = std::chrono::steady_clock::now();
        const fs::path dir = root_ / "work" / rt.state.job_id / u.course_id / u.slot;
        try {
            remove_tree(dir);
            for (const char* sub : {"data", "input", "scratch", "output"}) fs::create_directories(dir / sub);
            if (u.stage == StageName::extract) {
                auto src = registry_.session_dir(u.course_id, u.data_session);
                for (const auto& f : registry_.session(u.course_id, u.data_session).data_files) {
                    auto dst = dir / "data" / f.path;
                    fs::create_directories(dst.parent_path());
                    fs::copy_file(src / f.path, dst);
                }
            }
            for (const auto& [slot, outputs] : task.inputs)
                for (const auto& [path, digest] : outputs)
                    store_.blobs().materialize(digest, dir / "input" / slot / path);
            make_read_only(dir / "data");
            make_read_only(dir / "input");

            SandboxSpec sb;
            sb.data_mount = dir / "data";
            sb.input_dir = dir / "input";
            sb.scratch_dir = dir / "scratch";
            sb.output_dir = dir / "output";
            sb.log_file = dir / "stage.log";
            sb.env = stage_env(rt, u, dir);
            sb.limits.timeout_seconds = rt.manifest.stage(u.stage).timeout_seconds;
            sb.limits.max_output_bytes = opts_.policy.max_export_bytes;
            ExecutorBackend backend = opts_.backend;
            if (backend.image_ref.empty()) backend.image_ref = rt.manifest.image_ref;

            StageResult res = run_stage(rt.manifest.stage(u.stage), sb, backend, &rt.cancel);
            r.status = res.status;
            r.exit_code = res.exit_code;
            r.reason = res.reason;
            r.log_digest = store_.blobs().put_file(sb.log_file);
            if (res.status == StageStatus::succeeded) {
                auto exp = collect_outputs(res, sb.output_dir, opts_.policy, raw_digests);
                CacheEntry entry;
                for (const auto& [path, digest] : exp.exported) {
                    store_.blobs().put_file(sb.output_dir / path);
                    entry.size_bytes += fs::file_size(sb.output_dir / path);
                }
                entry.output_digests = exp.exported;
                for (const auto& d : exp.denied) entry.denied.push_back({d.path, d.reason});
                entry.created_at = now_timestamp();
                entry.log_digest = r.log_digest;
                store_.cache().put(u.cache_key, entry);
                r.outputs = entry.output_digests;
                r.denied = entry.denied;
                out.ok = true;
            }
            if (out.ok && !opts_.keep_work_dirs) remove_tree(dir);
        } catch (const std::exception& e) {
            r.status = StageStatus::failed;
            r.reason = std::string("engine: ") + e.what();
            out.ok = false;
        }
        r.duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

    std::optional<CacheEntry> cache_hit(const WorkUnit& u) {
        auto e = store_.cache().get(u.cache_key);
        if (!e) return std::nullopt;
        for (const auto& [path, digest] : e->output_digests)
            if (!store_.blobs().has(digest)) return std::nullopt;
        return e;
    }

    JobReport run_job(JobRuntime& rt, unsigned parallelism) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto& units = rt.units;
        const std::size_t n = units.size();
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < n; ++i) index[units[i].unit_id] = i;
        std::vector<std::vector<std::size_t>> dependents(n);
        std::vector<std::size_t> waiting(n, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& d : units[i].depends_on) {
                dependents[index.at(d)].push_back(i);
                ++waiting[i];
            }
        std::set<std::string> raw_digests;
        for (const auto& u : units) raw_digests.insert(u.data_digests.begin(), u.data_digests.end());

        std::vector<UnitReport> reports(n);
        for (std::size_t i = 0; i < n; ++i) {
            reports[i].unit_id = units[i].unit_id;
            reports[i].course_id = units[i].course_id;
            reports[i].session_id = units[i].session_id;
            reports[i].stage = units[i].stage;
            reports[i].cache_key = units[i].cache_key;
        }
        auto by_order = [&](std::size_t a, std::size_t b) { return units[a].order_key() < units[b].order_key(); };
        std::set<std::size_t, decltype(by_order)> ready(by_order);

        // Worker pool.
        std::mutex qm;
        std::condition_variable task_cv, result_cv;
        std::deque<Task> tasks;
        std::deque<Outcome> results;
        bool stop = false;
        std::vector<std::jthread> workers;
        for (unsigned w = 0; w < parallelism; ++w)
            workers.emplace_back([&] {
                while (true) {
                    Task t;
                    {
                        std::unique_lock lock(qm);
                        task_cv.wait(lock, [&] { return stop || !tasks.empty(); });
                        if (tasks.empty()) return;
                        t = std::move(tasks.front());
                        tasks.pop_front();
                    }
                    Outcome o = run_unit(rt, t, raw_digests);
                    {
                        std::lock_guard lock(qm);
                        results.push_back(std::move(o));
                    }
                    result_cv.notify_one();
                }
            });

        std::size_t in_flight = 0, hits = 0, executed = 0;
        bool cancelled = false;
        {
            std::lock_guard lock(rt.m);
            rt.state.phase = Phase::running;
            log_event(rt, {{"event", "phase"}, {"phase", "running"}});
            for (std::size_t i = 0; i < n; ++i)
                if (waiting[i] == 0) ready.insert(i);
        }

        auto release = [&](std::size_t i) {
            for (auto d : dependents[i])
                if (--waiting[d] == 0) ready.insert(d);
        };
        auto skip_dependents = [&](std::size_t i) {
            std::vector<std::size_t> stack(dependents[i].begin(), dependents[i].end());
            while (!stack.empty()) {
                auto d = stack.back();
                stack.pop_back();
                if (rt.state.unit_states[units[d].unit_id] != UnitState::pending) continue;
                reports[d].state = UnitState::skipped;
                reports[d].reason = "dependency failed: " + units[i].unit_id;
                set_unit(rt, units[d].unit_id, UnitState::skipped, &reports[d]);
                ready.erase(d);
                stack.insert(stack.end(), dependents[d].begin(), dependents[d].end());
            }
        };

        while (true) {
            {
                std::lock_guard lock(rt.m);
                if (rt.cancel) cancelled = true;
                while (!cancelled && in_flight < parallelism && !ready.empty()) {
                    auto i = *ready.begin();
                    ready.erase(ready.begin());
                    const auto& u = units[i];
                    if (auto e = cache_hit(u)) {
                        auto& r = reports[i];
                        r.state = UnitState::cached;
                        r.status = StageStatus::succeeded;
                        r.outputs = e->output_digests;
                        r.denied = e->denied;
                        r.log_digest = e->log_digest;
                        set_unit(rt, u.unit_id, UnitState::cached, &r);
                        ++hits;
                        release(i);
                        continue;
                    }
                    Task t{i, {}};
                    for (const auto& d : u.depends_on) {
                        auto di = index.at(d);
                        t.inputs.emplace_back(units[di].slot, reports[di].outputs);
                    }
                    reports[i].state = UnitState::running;
                    set_unit(rt, u.unit_id, UnitState::running);
                    {
                        std::lock_guard ql(qm);
                        tasks.push_back(std::move(t));
                    }
                    task_cv.notify_one();
                    ++in_flight;
                    ++executed;
                }
                if (in_flight == 0 && (ready.empty() || cancelled)) break;
            }
            std::deque<Outcome> done;
            {
                std::unique_lock lock(qm);
                result_cv.wait_for(lock, std::chrono::milliseconds(50), [&] { return !results.empty(); });
                done.swap(results);
            }
            std::lock_guard lock(rt.m);
            for (auto& o : done) {
                --in_flight;
                auto i = o.index;
                reports[i] = std::move(o.report);
                reports[i].state = o.ok ? UnitState::done : UnitState::failed;
                set_unit(rt, units[i].unit_id, reports[i].state, &reports[i]);
                if (o.ok)
                    release(i);
                else
                    skip_dependents(i);
            }
        }
        {
            std::lock_guard ql(qm);
            stop = true;
        }
        task_cv.notify_all();
        workers.clear();

        JobReport rep;
        rep.job_id = rt.state.job_id;
        rep.cache_hits = hits;
        rep.executed = executed;
        {
            std::lock_guard lock(rt.m);
            for (std::size_t i = 0; i < n; ++i)
                if (rt.state.unit_states[units[i].unit_id] == UnitState::pending) {
                    reports[i].state = UnitState::skipped;
                    reports[i].reason = "cancelled";
                    set_unit(rt, units[i].unit_id, UnitState::skipped, &reports[i]);
                }
        }
        std::size_t ok = 0, failed = 0;
        for (const auto& r : reports) {
            ok += unit_ok(r.state);
            failed += r.state == UnitState::failed;
        }
        if (cancelled)
            rep.phase = Phase::cancelled;
        else if (ok == n)
            rep.phase = Phase::succeeded;
        else if (ok > 0 && failed > 0)
            rep.phase = Phase::partial;
        else
            rep.phase = Phase::failed;
        rep.units = reports;
        std::sort(rep.units.begin(), rep.units.end(), [](const UnitReport& a, const UnitReport& b) {
            return std::tie(a.course_id, a.session_id, a.stage, a.unit_id) <
                   std::tie(b.course_id, b.session_id, b.stage, b.unit_id);
        });

        write_eval_artifacts(rt, rep);
        if (rep.phase == Phase::succeeded) {
            TrialInput in;
            in.job_id = rep.job_id;
            in.succeeded = true;
            in.registry_digests = touched_registry_digests(rt.manifest, registry_);
            for (const auto& r : rep.units) in.stage_digests[r.unit_id] = r.outputs;
            in.eval_digests = rep.eval_digests;
            in.parent_trial_id = rt.parent_trial_id;
            rep.trial_id = store_.record_trial(in, rt.manifest).trial_id;
        }
        rep.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_file_atomic(job_dir(rep.job_id) / "report.json", to_json(rep).dump(2) + "\n");
        if (!opts_.keep_work_dirs && rep.phase == Phase::succeeded) remove_tree(root_ / "work" / rep.job_id);

        std::lock_guard lock(rt.m);
        if (rep.trial_id) {
            rt.state.trial_id = rep.trial_id;
            log_event(rt, {{"event", "trial"}, {"trial_id", *rep.trial_id}});
        }
        rt.state.phase = rep.phase;
        rt.executing = false;
        log_event(rt, {{"event", "phase"}, {"phase", to_string(rep.phase)}});
        return rep;
    }

    /// Cross-course report from each course's evaluate output.
    void write_eval_artifacts(const JobRuntime& rt, JobReport& rep) {
        std::vector<stats::AucRecord> records;
        bool any = false;
        for (const auto& r : rep.units) {
            if (r.stage != StageName::evaluate || !unit_ok(r.state)) continue;
            auto it = r.outputs.find("eval.csv");
            if (it == r.outputs.end()) continue;
            auto rows = pipeline::parse_course_eval_csv(store_.blobs().get(it->second));
            records.insert(records.end(), rows.begin(), rows.end());
            any = true;
        }
        if (!any) return;
        auto ev = stats::build_eval_report(std::move(records), rt.manifest.eval_config, rt.manifest.seed);
        const std::map<std::string, std::string> files{{"eval.csv", stats::to_csv(ev)},
                                                       {"eval.json", stats::to_json(ev).dump(2) + "\n"},
                                                       {"scatter.csv", stats::scatter_csv(ev)}};
        for (const auto& [name, bytes] : files) {
            write_file_atomic(job_dir(rep.job_id) / name, bytes);
            rep.eval_digests[name] = store_.blobs().put_bytes(bytes);
        }
    }

    fs::path root_;
    EngineOptions opts_;
    Registry registry_;
    ProvenanceStore store_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<JobRuntime>> jobs_;
    std::vector<std::jthread> background_;
};

} // namespace replica
