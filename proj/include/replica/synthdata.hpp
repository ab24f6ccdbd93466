#pragma once

// Seeded synthetic MOOC corpora.
//
// Generative story, per (course, session):
//   course level   type mix m_t = exp(N(0, 0.5)); engagement share a_t ~ U(0.2, 1)
//   session shift  rate shift d_t ~ N(0, sd); a_t' = clamp(a_t + N(0, sd), 0, 1);
//                  hazard shift h_s ~ N(0, sd)                     (sd = session_shift_sd)
//   learner        engagement z_e, nuisance z_n ~ N(0, 1)
//                  type level l_t = a_t' z_e + sqrt(1 - a_t'^2) z_n
//                  weekly count_t ~ Poisson(rate * mix_t * m_t * e^{d_t} * e^{0.8 l_t - 0.32})
//                  weekly hazard = sigmoid(logit(dropout_hazard) + h_s - activity_effect * z_e)
//   A learner is active in week 1, then after each week leaves with the
//   weekly hazard; no events are produced after leaving.
// Seeds: course stream derive_seed("replica.synth:<seed>:course:<c>"),
// session stream derive_seed("replica.synth:<seed>:<c>:<s>") (0-based indices).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/civil_time.hpp"
#include "replica/digest.hpp"
#include "replica/pipeline.hpp"
#include "replica/rng.hpp"

namespace replica::synth {

namespace fs = std::filesystem;
using nlohmann::json;

struct SynthConfig {
    unsigned num_courses = 1;
    unsigned sessions_per_course = 3;
    int num_weeks = 5;
    unsigned learners_per_session = 200;
    double base_activity_rate = 6.0;
    double dropout_hazard = 0.25;
    double activity_effect = 1.0;
    double session_shift_sd = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const SynthConfig&) const = default;

    void validate() const {
        if (num_courses < 1) throw Error("synth: num_courses must be >= 1");
        if (sessions_per_course < 1) throw Error("synth: sessions_per_course must be >= 1");
        if (num_weeks < 2) throw Error("synth: num_weeks must be >= 2");
        if (learners_per_session < 1) throw Error("synth: learners_per_session must be >= 1");
        if (!(base_activity_rate > 0)) throw Error("synth: base_activity_rate must be > 0");
        if (!(dropout_hazard > 0 && dropout_hazard < 1)) throw Error("synth: dropout_hazard must lie in (0,1)");
        if (!std::isfinite(activity_effect)) throw Error("synth: activity_effect must be finite");
        if (!(session_shift_sd >= 0) || !std::isfinite(session_shift_sd))
            throw Error("synth: session_shift_sd must be >= 0");
    }
};

inline SynthConfig synth_config_from_json(const json& j) {
    static const std::vector<std::string> known{"num_courses",       "sessions_per_course", "num_weeks",
                                                "learners_per_session", "base_activity_rate", "dropout_hazard",
                                                "activity_effect",   "session_shift_sd",    "seed"};
    if (!j.is_object()) throw Error("synth config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw Error("synth config: unknown field \"" + it.key() + "\"");
    SynthConfig c;
    try {
        c.num_courses = j.value("num_courses", c.num_courses);
        c.sessions_per_course = j.value("sessions_per_course", c.sessions_per_course);
        c.num_weeks = j.value("num_weeks", c.num_weeks);
        c.learners_per_session = j.value("learners_per_session", c.learners_per_session);
        c.base_activity_rate = j.value("base_activity_rate", c.base_activity_rate);
        c.dropout_hazard = j.value("dropout_hazard", c.dropout_hazard);
        c.activity_effect = j.value("activity_effect", c.activity_effect);
        c.session_shift_sd = j.value("session_shift_sd", c.session_shift_sd);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw Error(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

inline json to_json(const SynthConfig& c) {
    return {{"num_courses", c.num_courses},
            {"sessions_per_course", c.sessions_per_course},
            {"num_weeks", c.num_weeks},
            {"learners_per_session", c.learners_per_session},
            {"base_activity_rate", c.base_activity_rate},
            {"dropout_hazard", c.dropout_hazard},
            {"activity_effect", c.activity_effect},
            {"session_shift_sd", c.session_shift_sd},
            {"seed", c.seed}};
}

/// Relative weight of each event type in the activity budget (sums to 1).
inline constexpr std::array<double, pipeline::kNumEventTypes> kTypeMix{0.25, 0.10, 0.04, 0.12, 0.35, 0.06, 0.08};

inline constexpr double kEngagementSigma = 0.8;

inline std::string course_id(const SynthConfig& cfg, unsigned course_idx) {
    char buf[32];
    int width = cfg.num_courses >= 100 ? 3 : 2;
    std::snprintf(buf, sizeof buf, "c%0*u", width, course_idx + 1);
    return buf;
}

inline std::string session_id(unsigned session_idx) { return "s" + std::to_string(session_idx + 1); }

inline Date session_start(unsigned course_idx, unsigned session_idx) {
    return parse_date("2013-01-07") + std::chrono::days{static_cast<int>(course_idx % 7) + 182 * static_cast<int>(session_idx)};
}

struct CourseParams {
    std::array<double, pipeline::kNumEventTypes> mix{};
    std::array<double, pipeline::kNumEventTypes> share{};
};

inline CourseParams course_params(const SynthConfig& cfg, unsigned course_idx) {
    Rng rng(derive_seed("replica.synth:" + std::to_string(cfg.seed) + ":course:" + std::to_string(course_idx)));
    CourseParams p;
    for (auto& m : p.mix) m = std::exp(rng.normal(0.0, 0.5));
    for (auto& a : p.share) a = 0.2 + 0.8 * rng.uniform();
    return p;
}

inline double logit(double p) { return std::log(p / (1 - p)); }

inline pipeline::EventLog generate_session(const SynthConfig& cfg, unsigned course_idx, unsigned session_idx) {
    cfg.validate();
    if (course_idx >= cfg.num_courses || session_idx >= cfg.sessions_per_course)
        throw Error("generate_session: index out of range");
    using pipeline::kNumEventTypes;
    const CourseParams cp = course_params(cfg, course_idx);
    Rng rng(derive_seed("replica.synth:" + std::to_string(cfg.seed) + ":" + std::to_string(course_idx) + ":" +
                        std::to_string(session_idx)));

    std::array<double, kNumEventTypes> rate{}, share{};
    for (std::size_t t = 0; t < kNumEventTypes; ++t)
        rate[t] = cfg.base_activity_rate * kTypeMix[t] * cp.mix[t] * std::exp(rng.normal(0.0, cfg.session_shift_sd));
    for (std::size_t t = 0; t < kNumEventTypes; ++t)
        share[t] = std::clamp(cp.share[t] + rng.normal(0.0, cfg.session_shift_sd), 0.0, 1.0);
    const double hazard_logit = logit(cfg.dropout_hazard) + rng.normal(0.0, cfg.session_shift_sd);

    pipeline::EventLog log;
    log.start_date = session_start(course_idx, session_idx);
    log.num_weeks = cfg.num_weeks;
    const std::string prefix = course_id(cfg, course_idx) + "-" + session_id(session_idx) + "-u";
    const double sigma = kEngagementSigma;

    for (unsigned i = 0; i < cfg.learners_per_session; ++i) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "%05u", i + 1);
        std::string learner = prefix + idbuf;
        log.enrolled.push_back(learner);

        double z_e = rng.normal();
        double z_n = rng.normal();
        std::array<double, kNumEventTypes> mean{};
        for (std::size_t t = 0; t < kNumEventTypes; ++t) {
            double level = share[t] * z_e + std::sqrt(1 - share[t] * share[t]) * z_n;
            mean[t] = rate[t] * std::exp(sigma * level - sigma * sigma / 2);
        }
        double hazard = pipeline::sigmoid(hazard_logit - cfg.activity_effect * z_e);
        int last_week = 1;
        while (last_week < cfg.num_weeks && !rng.bernoulli(hazard)) ++last_week;

        for (int week = 1; week <= last_week; ++week) {
            Instant begin = log.week_begin(week);
            for (std::size_t t = 0; t < kNumEventTypes; ++t) {
                auto n = rng.poisson(mean[t]);
                for (std::uint64_t e = 0; e < n; ++e)
                    log.events.push_back({learner, begin + std::chrono::seconds{rng.below(7 * 86400)},
                                          static_cast<pipeline::EventType>(t)});
            }
        }
    }
    std::sort(log.events.begin(), log.events.end(), [](const auto& a, const auto& b) {
        return std::tie(a.timestamp, a.learner_id, a.type) < std::tie(b.timestamp, b.learner_id, b.type);
    });
    return log;
}

/// Writes `<out>/data/<course>/<session>/{events,learners}.csv` and one
/// `<out>/<course>.course.json` descriptor per course. Returns the
/// descriptor paths in course order.
inline std::vector<fs::path> generate_corpus(const SynthConfig& cfg, const fs::path& out) {
    cfg.validate();
    if (fs::exists(out) && !fs::is_empty(out)) throw Error("synth: output directory not empty: " + out.string());
    fs::create_directories(out);

    const unsigned total = cfg.num_courses * cfg.sessions_per_course;
    std::vector<json> session_docs(total);
    std::atomic<unsigned> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (unsigned idx = next++; idx < total; idx = next++) {
            try {
                unsigned c = idx / cfg.sessions_per_course, s = idx % cfg.sessions_per_course;
                auto log = generate_session(cfg, c, s);
                auto dir = out / "data" / course_id(cfg, c) / session_id(s);
                std::string events = pipeline::events_csv(log.events);
                std::string learners = pipeline::learners_csv(log.enrolled);
                write_file_atomic(dir / "events.csv", events);
                write_file_atomic(dir / "learners.csv", learners);
                session_docs[idx] = {{"session_id", session_id(s)},
                                     {"start_date", format_date(log.start_date)},
                                     {"num_weeks", cfg.num_weeks},
                                     {"num_learners", cfg.learners_per_session},
                                     {"files",
                                      {{{"path", "events.csv"}, {"sha256", sha256_hex(events)}, {"size", events.size()}},
                                       {{"path", "learners.csv"},
                                        {"sha256", sha256_hex(learners)},
                                        {"size", learners.size()}}}}};
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    unsigned threads = std::clamp(std::thread::hardware_concurrency(), 1u, 16u);
    {
        std::vector<std::jthread> pool;
        for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);

    std::vector<fs::path> descriptors;
    for (unsigned c = 0; c < cfg.num_courses; ++c) {
        json sessions = json::array();
        for (unsigned s = 0; s < cfg.sessions_per_course; ++s)
            sessions.push_back(session_docs[c * cfg.sessions_per_course + s]);
        json doc = {{"course_id", course_id(cfg, c)},
                    {"platform_schema", "replica-events/1"},
                    {"sessions", std::move(sessions)}};
        auto path = out / (course_id(cfg, c) + ".course.json");
        write_file_atomic(path, doc.dump(2) + "\n");
        descriptors.push_back(path);
    }
    return descriptors;
}

} // namespace replica::synth
