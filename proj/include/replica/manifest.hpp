#pragma once

// Experiment manifests: the declarative four-stage controller contract plus
// dataset selection and evaluation settings.
//
// Canonical form (the bytes that get hashed) is the JSON object produced by
// to_json() with every default made explicit, keys sorted, no whitespace,
// UTF-8, reals in shortest round-trip form. See docs/manifest.md.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/digest.hpp"
#include "replica/errors.hpp"

namespace replica {

using json = nlohmann::json;

enum class StageName { extract, train, test, evaluate };

inline constexpr std::array<StageName, 4> kStageOrder{StageName::extract, StageName::train, StageName::test,
                                                      StageName::evaluate};

inline std::string_view to_string(StageName s) {
    switch (s) {
    case StageName::extract: return "extract";
    case StageName::train: return "train";
    case StageName::test: return "test";
    case StageName::evaluate: return "evaluate";
    }
    return "?";
}

inline std::optional<StageName> parse_stage_name(std::string_view s) {
    for (auto st : kStageOrder)
        if (to_string(st) == s) return st;
    return std::nullopt;
}

struct StageSpec {
    StageName name{};
    std::vector<std::string> command;
    double timeout_seconds = 0;
    std::vector<std::string> outputs;

    bool operator==(const StageSpec&) const = default;
};

enum class SelectorKind { single_session, whole_course, all_courses };

inline std::string_view to_string(SelectorKind k) {
    switch (k) {
    case SelectorKind::single_session: return "single_session";
    case SelectorKind::whole_course: return "whole_course";
    case SelectorKind::all_courses: return "all_courses";
    }
    return "?";
}

struct DatasetSelector {
    SelectorKind kind = SelectorKind::all_courses;
    std::optional<std::string> course_id;
    std::optional<std::string> session_id;

    bool operator==(const DatasetSelector&) const = default;
};

enum class EvalScheme { holdout, cross_validation, both };

inline std::string_view to_string(EvalScheme s) {
    switch (s) {
    case EvalScheme::holdout: return "holdout";
    case EvalScheme::cross_validation: return "cross_validation";
    case EvalScheme::both: return "both";
    }
    return "?";
}

inline bool uses_holdout(EvalScheme s) { return s != EvalScheme::cross_validation; }
inline bool uses_cv(EvalScheme s) { return s != EvalScheme::holdout; }

enum class Metric { auc };

/// How CV predictions become one AUC per course-week.
enum class CvAggregation { pooled, fold_mean };

inline std::string_view to_string(CvAggregation a) {
    return a == CvAggregation::pooled ? "pooled" : "fold_mean";
}

struct EvalConfig {
    EvalScheme scheme = EvalScheme::holdout;
    unsigned k = 5;
    Metric metric = Metric::auc;
    double ci_level = 0.95;
    CvAggregation cv_aggregation = CvAggregation::pooled;

    bool operator==(const EvalConfig&) const = default;
};

struct JobManifest {
    std::string experiment_name;
    std::string image_ref;
    std::vector<StageSpec> stages;
    DatasetSelector dataset_selector;
    EvalConfig eval_config;
    std::uint64_t seed = 0;
    unsigned feature_weeks = 1;

    bool operator==(const JobManifest&) const = default;

    const StageSpec& stage(StageName n) const { return stages.at(static_cast<std::size_t>(n)); }
};

/// Identifier charset shared by course, session and learner ids: they become
/// path components and CSV fields.
inline bool is_safe_id(std::string_view s) {
    if (s.empty() || s.size() > 128 || s == "." || s == "..") return false;
    for (char c : s) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                  c == '_' || c == '.';
        if (!ok) return false;
    }
    return true;
}

/// Relative, non-empty, no `..` or `.` components, no empty components.
inline bool is_safe_relative_path(std::string_view p) {
    if (p.empty() || p.front() == '/' || p.back() == '/') return false;
    std::size_t start = 0;
    while (start <= p.size()) {
        auto end = p.find('/', start);
        if (end == std::string_view::npos) end = p.size();
        auto part = p.substr(start, end - start);
        if (part.empty() || part == "." || part == "..") return false;
        start = end + 1;
    }
    return p.find('\0') == std::string_view::npos && p.find('\\') == std::string_view::npos;
}

namespace detail {

inline void require_known_keys(const json& obj, std::initializer_list<std::string_view> known,
                               std::string_view where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool found = false;
        for (auto k : known)
            if (it.key() == k) found = true;
        if (!found) throw ManifestError("unknown field \"" + it.key() + "\" in " + std::string(where));
    }
}

inline const json& require_field(const json& obj, std::string_view key, std::string_view where) {
    auto it = obj.find(std::string(key));
    if (it == obj.end())
        throw ManifestError("missing required field \"" + std::string(key) + "\" in " + std::string(where));
    return *it;
}

inline std::string get_string(const json& obj, std::string_view key, std::string_view where) {
    const json& v = require_field(obj, key, where);
    if (!v.is_string()) throw ManifestError(std::string(where) + "." + std::string(key) + " must be a string");
    return v.get<std::string>();
}

inline std::uint64_t get_unsigned(const json& v, std::string_view what) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ManifestError(std::string(what) + " must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline double get_real(const json& v, std::string_view what) {
    if (!v.is_number()) throw ManifestError(std::string(what) + " must be a number");
    return v.get<double>();
}

inline std::vector<std::string> get_string_list(const json& v, std::string_view what) {
    if (!v.is_array()) throw ManifestError(std::string(what) + " must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) throw ManifestError(std::string(what) + " must be an array of strings");
        out.push_back(e.get<std::string>());
    }
    return out;
}

} // namespace detail

inline void check_manifest_invariants(const JobManifest& m) {
    if (m.experiment_name.empty()) throw ManifestError("experiment_name must be non-empty");
    if (m.stages.size() != 4) throw ManifestError("stages must contain exactly 4 entries");
    for (std::size_t i = 0; i < 4; ++i)
        if (m.stages[i].name != kStageOrder[i])
            throw ManifestError("stage order violation: expected extract, train, test, evaluate");
    for (const auto& st : m.stages) {
        auto where = std::string("stage ") + std::string(to_string(st.name));
        if (st.command.empty()) throw ManifestError(where + ": command must be non-empty");
        if (!(st.timeout_seconds > 0) || !std::isfinite(st.timeout_seconds))
            throw ManifestError(where + ": timeout must be > 0");
        if (st.name != StageName::evaluate && st.outputs.empty())
            throw ManifestError(where + ": outputs must be non-empty");
        for (const auto& p : st.outputs)
            if (!is_safe_relative_path(p)) throw ManifestError(where + ": output path not allowed: " + p);
    }
    const auto& sel = m.dataset_selector;
    switch (sel.kind) {
    case SelectorKind::single_session:
        if (!sel.course_id || !sel.session_id)
            throw ManifestError("single_session selector requires course_id and session_id");
        break;
    case SelectorKind::whole_course:
        if (!sel.course_id || sel.session_id)
            throw ManifestError("whole_course selector requires course_id and no session_id");
        break;
    case SelectorKind::all_courses:
        if (sel.course_id || sel.session_id)
            throw ManifestError("all_courses selector takes no course_id/session_id");
        break;
    }
    if (sel.course_id && !is_safe_id(*sel.course_id)) throw ManifestError("invalid course_id");
    if (sel.session_id && !is_safe_id(*sel.session_id)) throw ManifestError("invalid session_id");
    if (m.feature_weeks < 1) throw ManifestError("feature_weeks must be >= 1");
    if (m.eval_config.k < 1) throw ManifestError("eval.k must be positive");
    if (uses_cv(m.eval_config.scheme) && m.eval_config.k < 2)
        throw ManifestError("eval.k must be >= 2 for cross-validation");
    if (!(m.eval_config.ci_level > 0.0 && m.eval_config.ci_level < 1.0))
        throw ManifestError("eval.ci_level must lie in (0,1)");
}

/// Structured value -> manifest. Applies defaults, rejects unknown fields and
/// checks every invariant.
inline JobManifest manifest_from_json(const json& doc) {
    using namespace detail;
    if (!doc.is_object()) throw ManifestError("manifest must be a JSON object");
    require_known_keys(doc,
                       {"experiment_name", "image_ref", "stages", "dataset", "eval", "seed", "feature_weeks"},
                       "manifest");
    JobManifest m;
    m.experiment_name = get_string(doc, "experiment_name", "manifest");
    m.image_ref = get_string(doc, "image_ref", "manifest");
    m.seed = get_unsigned(require_field(doc, "seed", "manifest"), "seed");
    auto fw = get_unsigned(require_field(doc, "feature_weeks", "manifest"), "feature_weeks");
    if (fw < 1 || fw > 1000) throw ManifestError("feature_weeks must be in [1, 1000]");
    m.feature_weeks = static_cast<unsigned>(fw);

    const json& stages = require_field(doc, "stages", "manifest");
    if (!stages.is_array()) throw ManifestError("stages must be an array");
    for (const auto& s : stages) {
        if (!s.is_object()) throw ManifestError("stage entries must be objects");
        require_known_keys(s, {"name", "command", "timeout", "outputs"}, "stage");
        StageSpec st;
        auto name = get_string(s, "name", "stage");
        auto parsed = parse_stage_name(name);
        if (!parsed) throw ManifestError("unknown stage name \"" + name + "\"");
        st.name = *parsed;
        st.command = get_string_list(require_field(s, "command", "stage"), "stage.command");
        st.timeout_seconds = get_real(require_field(s, "timeout", "stage"), "stage.timeout");
        if (auto it = s.find("outputs"); it != s.end())
            st.outputs = get_string_list(*it, "stage.outputs");
        m.stages.push_back(std::move(st));
    }

    const json& ds = require_field(doc, "dataset", "manifest");
    if (!ds.is_object()) throw ManifestError("dataset must be an object");
    require_known_keys(ds, {"kind", "course_id", "session_id"}, "dataset");
    auto kind = get_string(ds, "kind", "dataset");
    if (kind == "single_session")
        m.dataset_selector.kind = SelectorKind::single_session;
    else if (kind == "whole_course")
        m.dataset_selector.kind = SelectorKind::whole_course;
    else if (kind == "all_courses")
        m.dataset_selector.kind = SelectorKind::all_courses;
    else
        throw ManifestError("unknown dataset.kind \"" + kind + "\"");
    if (ds.contains("course_id")) m.dataset_selector.course_id = get_string(ds, "course_id", "dataset");
    if (ds.contains("session_id")) m.dataset_selector.session_id = get_string(ds, "session_id", "dataset");

    const json& ev = require_field(doc, "eval", "manifest");
    if (!ev.is_object()) throw ManifestError("eval must be an object");
    require_known_keys(ev, {"scheme", "k", "metric", "ci_level", "cv_aggregation"}, "eval");
    auto scheme = get_string(ev, "scheme", "eval");
    if (scheme == "holdout")
        m.eval_config.scheme = EvalScheme::holdout;
    else if (scheme == "cross_validation")
        m.eval_config.scheme = EvalScheme::cross_validation;
    else if (scheme == "both")
        m.eval_config.scheme = EvalScheme::both;
    else
        throw ManifestError("unknown eval.scheme \"" + scheme + "\"");
    if (auto it = ev.find("k"); it != ev.end()) {
        auto k = get_unsigned(*it, "eval.k");
        if (k > 1'000'000) throw ManifestError("eval.k too large");
        m.eval_config.k = static_cast<unsigned>(k);
    }
    if (auto it = ev.find("metric"); it != ev.end()) {
        if (!it->is_string() || it->get<std::string>() != "auc")
            throw ManifestError("eval.metric must be \"auc\"");
    }
    if (auto it = ev.find("ci_level"); it != ev.end()) m.eval_config.ci_level = get_real(*it, "eval.ci_level");
    if (auto it = ev.find("cv_aggregation"); it != ev.end()) {
        auto agg = it->is_string() ? it->get<std::string>() : std::string();
        if (agg == "pooled")
            m.eval_config.cv_aggregation = CvAggregation::pooled;
        else if (agg == "fold_mean")
            m.eval_config.cv_aggregation = CvAggregation::fold_mean;
        else
            throw ManifestError("eval.cv_aggregation must be \"pooled\" or \"fold_mean\"");
    }

    check_manifest_invariants(m);
    return m;
}

inline JobManifest parse_manifest(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ManifestError("syntax error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    return manifest_from_json(doc);
}

inline JobManifest load_manifest(const std::filesystem::path& path) { return parse_manifest(read_file(path)); }

inline json to_json(const JobManifest& m) {
    json stages = json::array();
    for (const auto& s : m.stages) {
        stages.push_back({{"name", to_string(s.name)},
                          {"command", s.command},
                          {"timeout", s.timeout_seconds},
                          {"outputs", s.outputs}});
    }
    json ds = {{"kind", to_string(m.dataset_selector.kind)}};
    if (m.dataset_selector.course_id) ds["course_id"] = *m.dataset_selector.course_id;
    if (m.dataset_selector.session_id) ds["session_id"] = *m.dataset_selector.session_id;
    json ev = {{"scheme", to_string(m.eval_config.scheme)},
               {"k", m.eval_config.k},
               {"metric", "auc"},
               {"ci_level", m.eval_config.ci_level},
               {"cv_aggregation", to_string(m.eval_config.cv_aggregation)}};
    return {{"experiment_name", m.experiment_name},
            {"image_ref", m.image_ref},
            {"stages", std::move(stages)},
            {"dataset", std::move(ds)},
            {"eval", std::move(ev)},
            {"seed", m.seed},
            {"feature_weeks", m.feature_weeks}};
}

/// Human-oriented rendering (indented). parse_manifest(render(m)) == m.
inline std::string render(const JobManifest& m) { return to_json(m).dump(2) + "\n"; }

inline std::string canonicalize(const JobManifest& m) { return to_json(m).dump(); }

inline std::string manifest_digest(const JobManifest& m) { return sha256_hex(canonicalize(m)); }

/// Applies `key=value` overrides (dotted keys, e.g. `seed=7`,
/// `eval.scheme=holdout`). Values are parsed as JSON, falling back to a
/// plain string. The result is re-validated.
inline JobManifest apply_overrides(const JobManifest& m, const std::vector<std::string>& overrides) {
    json doc = to_json(m);
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0) throw ManifestError("invalid override (want key=value): " + ov);
        auto key = ov.substr(0, eq);
        auto raw = ov.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        json* node = &doc;
        std::size_t start = 0;
        while (true) {
            auto dot = key.find('.', start);
            auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (!node->is_object() || !node->contains(part)) {
                // New leaf under an existing object is allowed (e.g. dataset.course_id);
                // unknown names are then rejected by manifest_from_json.
                if (dot != std::string::npos || !node->is_object())
                    throw ManifestError("invalid override key: " + key);
            }
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    return manifest_from_json(doc);
}

// ---------------------------------------------------------------------------
// Validation against a registry view.

enum class Severity { error, warning };

struct Violation {
    Severity severity = Severity::error;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> items;

    bool ok() const {
        for (const auto& v : items)
            if (v.severity == Severity::error) return false;
        return true;
    }
    std::size_t error_count() const {
        std::size_t n = 0;
        for (const auto& v : items) n += v.severity == Severity::error;
        return n;
    }
};

/// `Registry` needs `find_course(id) -> const Course*` and `courses()`; a
/// Course exposes `sessions`, each with `session_id` and optional
/// `num_learners`.
template <class Registry>
ValidationReport validate_manifest(const JobManifest& m, const Registry& reg) {
    ValidationReport report;
    auto error = [&](std::string msg) { report.items.push_back({Severity::error, std::move(msg)}); };
    auto warn = [&](std::string msg) { report.items.push_back({Severity::warning, std::move(msg)}); };

    const auto& sel = m.dataset_selector;
    auto all = reg.courses();
    std::vector<const typename decltype(all)::value_type*> courses;
    if (sel.kind == SelectorKind::all_courses) {
        for (const auto& c : all) courses.push_back(&c);
        if (courses.empty()) error("registry has no courses");
    } else {
        const auto* c = reg.find_course(*sel.course_id);
        if (!c) {
            error("unknown course \"" + *sel.course_id + "\"");
            return report;
        }
        courses.push_back(c);
    }

    for (const auto* c : courses) {
        std::size_t sessions = c->sessions.size();
        std::uint64_t learners = 0;
        bool learners_known = true;
        if (sel.kind == SelectorKind::single_session) {
            const auto* found = static_cast<decltype(&c->sessions.front())>(nullptr);
            for (const auto& s : c->sessions)
                if (s.session_id == *sel.session_id) found = &s;
            if (!found) {
                error("unknown session \"" + *sel.session_id + "\" in course \"" + c->course_id + "\"");
                continue;
            }
            sessions = 1;
            if (found->num_learners)
                learners = *found->num_learners;
            else
                learners_known = false;
        } else {
            for (const auto& s : c->sessions) {
                if (s.num_learners)
                    learners += *s.num_learners;
                else
                    learners_known = false;
            }
        }
        if (uses_holdout(m.eval_config.scheme) && sessions < 2)
            error("holdout requires >=2 sessions (course \"" + c->course_id + "\")");
        if (uses_cv(m.eval_config.scheme) && learners_known && m.eval_config.k > learners)
            warn("cv k=" + std::to_string(m.eval_config.k) + " exceeds learner count " + std::to_string(learners) +
                 " (course \"" + c->course_id + "\")");
        for (const auto& s : c->sessions) {
            if (sel.kind == SelectorKind::single_session && s.session_id != *sel.session_id) continue;
            if (m.feature_weeks >= static_cast<unsigned>(s.num_weeks))
                error("feature_weeks must be < num_weeks (course \"" + c->course_id + "\", session \"" +
                      s.session_id + "\")");
        }
    }
    return report;
}

} // namespace replica
