#pragma once

// Reference dropout experiment: weekly counts of seven activity types as
// features, "no activity in the final week" as the label, and an L2
// logistic regression trained by full-batch gradient descent.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/civil_time.hpp"
#include "replica/digest.hpp"
#include "replica/errors.hpp"
#include "replica/manifest.hpp"

namespace replica::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::size_t kNumEventTypes = 7;

enum class EventType : std::uint8_t {
    video_play,
    quiz_attempt,
    forum_post,
    forum_view,
    page_view,
    assignment_submit,
    wiki_view,
};

inline constexpr std::array<std::string_view, kNumEventTypes> kEventTypeNames{
    "video_play", "quiz_attempt", "forum_post", "forum_view", "page_view", "assignment_submit", "wiki_view"};

inline std::string_view to_string(EventType t) { return kEventTypeNames[static_cast<std::size_t>(t)]; }

inline EventType parse_event_type(std::string_view s) {
    for (std::size_t i = 0; i < kNumEventTypes; ++i)
        if (kEventTypeNames[i] == s) return static_cast<EventType>(i);
    throw Error("unknown event_type \"" + std::string(s) + "\"");
}

struct EventRecord {
    std::string learner_id;
    Instant timestamp{};
    EventType type{};

    bool operator==(const EventRecord&) const = default;
};

struct EventLog {
    Date start_date{};
    int num_weeks = 0;
    std::vector<std::string> enrolled; ///< learners known even without events
    std::vector<EventRecord> events;

    Instant week_begin(int week) const { return Instant{start_date} + std::chrono::days{7 * (week - 1)}; }
    Instant end() const { return week_begin(num_weeks + 1); }

    /// 1-based week of `t`, or 0 when outside the session.
    int week_of(Instant t) const {
        if (t < week_begin(1) || t >= end()) return 0;
        auto secs = (t - week_begin(1)).count();
        return static_cast<int>(secs / (7 * 86400)) + 1;
    }

    /// Sorted, de-duplicated union of enrolled and active learners.
    std::vector<std::string> learner_index() const {
        std::vector<std::string> ids = enrolled;
        for (const auto& e : events) ids.push_back(e.learner_id);
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        return ids;
    }

    void validate() const {
        if (num_weeks < 2) throw Error("event log: num_weeks must be >= 2");
        for (const auto& e : events) {
            if (e.learner_id.empty()) throw Error("event log: empty learner_id");
            if (week_of(e.timestamp) == 0)
                throw Error("event log: timestamp outside session: " + format_instant(e.timestamp));
        }
    }
};

// ---------------------------------------------------------------------------
// CSV helpers

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

/// Calls `fn(fields, line_no)` for each data line after checking the header.
template <class Fn>
void for_each_csv_row(std::string_view text, std::string_view header, std::string_view what, Fn&& fn) {
    std::size_t pos = 0, line_no = 0;
    bool seen_header = false;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!seen_header) {
            if (line != header)
                throw Error(std::string(what) + ": expected header \"" + std::string(header) + "\"");
            seen_header = true;
            continue;
        }
        if (line.empty()) continue;
        fn(split_csv_line(line), line_no);
    }
    if (!seen_header) throw Error(std::string(what) + ": missing header");
}

template <class T>
T parse_number(std::string_view s, std::string_view what) {
    T v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw Error("bad number in " + std::string(what) + ": " + std::string(s));
    return v;
}

inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

inline constexpr std::string_view kEventsHeader = "learner_id,timestamp,event_type";
inline constexpr std::string_view kLearnersHeader = "learner_id";

inline std::vector<EventRecord> parse_events_csv(std::string_view text) {
    std::vector<EventRecord> out;
    detail::for_each_csv_row(text, kEventsHeader, "events.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 3) throw Error("events.csv line " + std::to_string(line) + ": expected 3 fields");
        if (f[0].empty()) throw Error("events.csv line " + std::to_string(line) + ": empty learner_id");
        out.push_back({std::string(f[0]), parse_instant(f[1]), parse_event_type(f[2])});
    });
    return out;
}

inline std::vector<std::string> parse_learners_csv(std::string_view text) {
    std::vector<std::string> out;
    detail::for_each_csv_row(text, kLearnersHeader, "learners.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 1 || f[0].empty())
            throw Error("learners.csv line " + std::to_string(line) + ": expected one learner_id");
        out.emplace_back(f[0]);
    });
    return out;
}

inline std::string events_csv(std::span<const EventRecord> events) {
    std::string out(kEventsHeader);
    out += '\n';
    for (const auto& e : events) {
        out += e.learner_id;
        out += ',';
        out += format_instant(e.timestamp);
        out += ',';
        out += to_string(e.type);
        out += '\n';
    }
    return out;
}

inline std::string learners_csv(std::span<const std::string> ids) {
    std::string out(kLearnersHeader);
    out += '\n';
    for (const auto& id : ids) out += id + "\n";
    return out;
}

/// Reads `events.csv` and, when present, `learners.csv` from a session
/// directory.
inline EventLog load_event_log(const fs::path& dir, Date start_date, int num_weeks) {
    EventLog log;
    log.start_date = start_date;
    log.num_weeks = num_weeks;
    log.events = parse_events_csv(read_file(dir / "events.csv"));
    if (fs::exists(dir / "learners.csv")) log.enrolled = parse_learners_csv(read_file(dir / "learners.csv"));
    log.validate();
    return log;
}

// ---------------------------------------------------------------------------
// Features and labels

using WeekCounts = std::array<std::uint32_t, kNumEventTypes>;

struct FeatureMatrix {
    std::vector<std::string> learners; ///< sorted
    unsigned weeks = 0;
    std::vector<WeekCounts> counts; ///< learners.size() * weeks, learner-major

    const WeekCounts& at(std::size_t learner, unsigned week) const { return counts[learner * weeks + (week - 1)]; }
    WeekCounts& at(std::size_t learner, unsigned week) { return counts[learner * weeks + (week - 1)]; }

    bool operator==(const FeatureMatrix&) const = default;
};

/// Week i covers [start + 7(i-1) days, start + 7i days).
inline FeatureMatrix extract_features(const EventLog& log, unsigned feature_weeks) {
    if (feature_weeks < 1 || static_cast<int>(feature_weeks) >= log.num_weeks)
        throw Error("extract_features: feature weeks must be in [1, num_weeks)");
    FeatureMatrix fm;
    fm.learners = log.learner_index();
    fm.weeks = feature_weeks;
    fm.counts.assign(fm.learners.size() * feature_weeks, WeekCounts{});
    for (const auto& e : log.events) {
        int week = log.week_of(e.timestamp);
        if (week < 1 || week > static_cast<int>(feature_weeks)) continue;
        auto it = std::lower_bound(fm.learners.begin(), fm.learners.end(), e.learner_id);
        auto row = static_cast<std::size_t>(it - fm.learners.begin());
        ++fm.at(row, static_cast<unsigned>(week))[static_cast<std::size_t>(e.type)];
    }
    return fm;
}

struct LabelVector {
    std::vector<std::string> learners; ///< same index as the features
    std::vector<int> dropout;

    bool operator==(const LabelVector&) const = default;
};

/// dropout = 1 iff the learner has no event in the final week.
inline LabelVector label_dropout(const EventLog& log) {
    if (log.num_weeks < 2) throw Error("label_dropout: num_weeks must be >= 2");
    LabelVector lv;
    lv.learners = log.learner_index();
    lv.dropout.assign(lv.learners.size(), 1);
    for (const auto& e : log.events) {
        if (log.week_of(e.timestamp) != log.num_weeks) continue;
        auto it = std::lower_bound(lv.learners.begin(), lv.learners.end(), e.learner_id);
        lv.dropout[static_cast<std::size_t>(it - lv.learners.begin())] = 0;
    }
    return lv;
}

inline std::string features_csv_header() {
    std::string h = "learner_id,week";
    for (auto n : kEventTypeNames) {
        h += ',';
        h += n;
    }
    return h;
}

inline std::string features_csv(const FeatureMatrix& fm) {
    std::string out = features_csv_header() + "\n";
    for (std::size_t i = 0; i < fm.learners.size(); ++i)
        for (unsigned w = 1; w <= fm.weeks; ++w) {
            out += fm.learners[i] + "," + std::to_string(w);
            for (auto c : fm.at(i, w)) out += "," + std::to_string(c);
            out += '\n';
        }
    return out;
}

inline FeatureMatrix parse_features_csv(std::string_view text) {
    std::map<std::string, std::map<unsigned, WeekCounts>> rows;
    unsigned max_week = 0;
    detail::for_each_csv_row(text, features_csv_header(), "features.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 2 + kNumEventTypes)
            throw Error("features.csv line " + std::to_string(line) + ": wrong field count");
        auto week = detail::parse_number<unsigned>(f[1], "features.csv");
        if (week < 1) throw Error("features.csv: week must be >= 1");
        WeekCounts c{};
        for (std::size_t t = 0; t < kNumEventTypes; ++t) c[t] = detail::parse_number<std::uint32_t>(f[2 + t], "features.csv");
        rows[std::string(f[0])][week] = c;
        max_week = std::max(max_week, week);
    });
    FeatureMatrix fm;
    fm.weeks = max_week;
    for (const auto& [id, weeks] : rows) {
        if (weeks.size() != max_week) throw Error("features.csv: learner " + id + " missing weeks");
        fm.learners.push_back(id);
        for (const auto& [w, c] : weeks) fm.counts.push_back(c);
    }
    return fm;
}

inline std::string labels_csv(const LabelVector& lv) {
    std::string out = "learner_id,dropout\n";
    for (std::size_t i = 0; i < lv.learners.size(); ++i)
        out += lv.learners[i] + "," + std::to_string(lv.dropout[i]) + "\n";
    return out;
}

inline LabelVector parse_labels_csv(std::string_view text) {
    std::vector<std::pair<std::string, int>> rows;
    detail::for_each_csv_row(text, "learner_id,dropout", "labels.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 2 || (f[1] != "0" && f[1] != "1"))
            throw Error("labels.csv line " + std::to_string(line) + ": expected learner_id,0|1");
        rows.emplace_back(std::string(f[0]), f[1] == "1" ? 1 : 0);
    });
    std::sort(rows.begin(), rows.end());
    LabelVector lv;
    for (auto& [id, y] : rows) {
        lv.learners.push_back(id);
        lv.dropout.push_back(y);
    }
    return lv;
}

// ---------------------------------------------------------------------------
// Design matrices

/// Row-major dense design matrix with binary targets.
struct Dataset {
    std::size_t rows = 0, cols = 0;
    std::vector<double> x;
    std::vector<int> y;

    std::span<const double> row(std::size_t i) const { return {x.data() + i * cols, cols}; }
};

/// Features of weeks 1..weeks concatenated (7 * weeks columns), rows in
/// learner order; `labels` must share the learner index.
inline Dataset design_matrix(const FeatureMatrix& fm, const LabelVector& labels, unsigned weeks) {
    if (weeks < 1 || weeks > fm.weeks) throw Error("design_matrix: week out of range");
    if (labels.learners != fm.learners) throw Error("design_matrix: labels not aligned with features");
    Dataset d;
    d.rows = fm.learners.size();
    d.cols = kNumEventTypes * weeks;
    d.x.reserve(d.rows * d.cols);
    for (std::size_t i = 0; i < d.rows; ++i)
        for (unsigned w = 1; w <= weeks; ++w)
            for (auto c : fm.at(i, w)) d.x.push_back(static_cast<double>(c));
    d.y = labels.dropout;
    return d;
}

/// Per-column mean/scale fit on a training split. Constant columns keep
/// scale 1.
struct Standardizer {
    std::vector<double> mean, scale;

    bool operator==(const Standardizer&) const = default;

    static Standardizer fit(const Dataset& d) {
        Standardizer s;
        s.mean.assign(d.cols, 0.0);
        s.scale.assign(d.cols, 1.0);
        if (d.rows == 0) return s;
        for (std::size_t i = 0; i < d.rows; ++i)
            for (std::size_t j = 0; j < d.cols; ++j) s.mean[j] += d.x[i * d.cols + j];
        for (auto& m : s.mean) m /= static_cast<double>(d.rows);
        std::vector<double> var(d.cols, 0.0);
        for (std::size_t i = 0; i < d.rows; ++i)
            for (std::size_t j = 0; j < d.cols; ++j) {
                double c = d.x[i * d.cols + j] - s.mean[j];
                var[j] += c * c;
            }
        for (std::size_t j = 0; j < d.cols; ++j) {
            double sd = std::sqrt(var[j] / static_cast<double>(d.rows));
            s.scale[j] = sd > 0 ? sd : 1.0;
        }
        return s;
    }

    Dataset apply(Dataset d) const {
        if (d.cols != mean.size()) throw Error("standardizer: column count mismatch");
        for (std::size_t i = 0; i < d.rows; ++i)
            for (std::size_t j = 0; j < d.cols; ++j) d.x[i * d.cols + j] = (d.x[i * d.cols + j] - mean[j]) / scale[j];
        return d;
    }
};

// ---------------------------------------------------------------------------
// Logistic regression

struct Hyperparams {
    double learning_rate = 0.1;
    unsigned iterations = 500;
    double l2_penalty = 1e-4;

    bool operator==(const Hyperparams&) const = default;
};

struct ModelParams {
    std::vector<double> weights;
    double bias = 0;
    Hyperparams hyperparams;
    std::uint64_t seed = 0;
    std::vector<double> loss_trace; ///< loss at each iterate, initial point first
    bool degenerate = false;

    bool operator==(const ModelParams&) const = default;
};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Mean logistic loss plus (l2/2)|w|^2; the bias is not penalised.
inline double logistic_loss(std::span<const double> w, double b, const Dataset& d, double l2) {
    double total = 0;
    for (std::size_t i = 0; i < d.rows; ++i) {
        auto r = d.row(i);
        double z = std::inner_product(r.begin(), r.end(), w.begin(), b);
        total += softplus(z) - d.y[i] * z;
    }
    double reg = 0;
    for (double v : w) reg += v * v;
    return total / static_cast<double>(d.rows) + 0.5 * l2 * reg;
}

struct Gradient {
    std::vector<double> weights;
    double bias = 0;
};

inline Gradient logistic_gradient(std::span<const double> w, double b, const Dataset& d, double l2) {
    Gradient g{std::vector<double>(d.cols, 0.0), 0.0};
    for (std::size_t i = 0; i < d.rows; ++i) {
        auto r = d.row(i);
        double resid = sigmoid(std::inner_product(r.begin(), r.end(), w.begin(), b)) - d.y[i];
        for (std::size_t j = 0; j < d.cols; ++j) g.weights[j] += resid * r[j];
        g.bias += resid;
    }
    const double n = static_cast<double>(d.rows);
    for (std::size_t j = 0; j < d.cols; ++j) g.weights[j] = g.weights[j] / n + l2 * w[j];
    g.bias /= n;
    return g;
}

/// Lipschitz bound of the loss gradient: lambda_max([X 1]^T [X 1] / n) / 4 + l2,
/// with the top eigenvalue from power iteration.
inline double gradient_lipschitz(const Dataset& d, double l2, unsigned power_iterations = 100) {
    const std::size_t p = d.cols + 1;
    std::vector<double> v(p, 1.0 / std::sqrt(static_cast<double>(p))), next(p);
    double lambda = 0;
    for (unsigned it = 0; it < power_iterations; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < d.rows; ++i) {
            auto r = d.row(i);
            double dot = v[d.cols];
            for (std::size_t j = 0; j < d.cols; ++j) dot += r[j] * v[j];
            for (std::size_t j = 0; j < d.cols; ++j) next[j] += dot * r[j];
            next[d.cols] += dot;
        }
        double norm = 0;
        for (double& x : next) {
            x /= static_cast<double>(d.rows);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm == 0) break;
        lambda = norm;
        for (std::size_t j = 0; j < p; ++j) v[j] = next[j] / norm;
    }
    return lambda / 4.0 + l2;
}

/// Full-batch gradient descent from zero. A single-class target yields a
/// bias-only model at the (clamped) class prior, flagged degenerate. `seed`
/// is recorded only: the procedure has no random component.
inline ModelParams train_logreg(const Dataset& d, const Hyperparams& hp, std::uint64_t seed) {
    if (d.rows < 2) throw Error("train_logreg: need at least 2 rows");
    if (d.y.size() != d.rows) throw Error("train_logreg: label count mismatch");
    ModelParams m;
    m.weights.assign(d.cols, 0.0);
    m.hyperparams = hp;
    m.seed = seed;
    const auto positives = std::count(d.y.begin(), d.y.end(), 1);
    if (positives == 0 || positives == static_cast<long>(d.rows)) {
        double prior = std::clamp(static_cast<double>(positives) / static_cast<double>(d.rows), 1e-6, 1 - 1e-6);
        m.bias = std::log(prior / (1 - prior));
        m.degenerate = true;
        return m;
    }
    m.loss_trace.reserve(hp.iterations + 1);
    std::vector<double> grad(d.cols);
    const double n = static_cast<double>(d.rows);
    for (unsigned it = 0; it < hp.iterations; ++it) {
        // One pass yields both the loss at the current iterate and its gradient.
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_bias = 0, total = 0;
        for (std::size_t i = 0; i < d.rows; ++i) {
            auto r = d.row(i);
            double z = std::inner_product(r.begin(), r.end(), m.weights.begin(), m.bias);
            const double e = std::exp(-std::fabs(z));
            total += std::max(z, 0.0) + std::log1p(e) - d.y[i] * z;
            const double prob = z >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
            double resid = prob - d.y[i];
            for (std::size_t j = 0; j < d.cols; ++j) grad[j] += resid * r[j];
            grad_bias += resid;
        }
        double reg = 0;
        for (double v : m.weights) reg += v * v;
        m.loss_trace.push_back(total / n + 0.5 * hp.l2_penalty * reg);
        for (std::size_t j = 0; j < d.cols; ++j)
            m.weights[j] -= hp.learning_rate * (grad[j] / n + hp.l2_penalty * m.weights[j]);
        m.bias -= hp.learning_rate * grad_bias / n;
    }
    m.loss_trace.push_back(logistic_loss(m.weights, m.bias, d, hp.l2_penalty));
    for (double v : m.weights)
        if (!std::isfinite(v)) throw Error("train_logreg: diverged");
    return m;
}

inline std::vector<double> predict(const ModelParams& m, const Dataset& d) {
    if (d.cols != m.weights.size()) throw Error("predict: dimension mismatch");
    std::vector<double> scores(d.rows);
    for (std::size_t i = 0; i < d.rows; ++i) {
        auto r = d.row(i);
        scores[i] = sigmoid(std::inner_product(r.begin(), r.end(), m.weights.begin(), m.bias));
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Per-week models as persisted by the train stage

struct WeekModel {
    unsigned week = 0;
    Standardizer standardizer;
    ModelParams params;
};

inline json to_json(const WeekModel& wm) {
    return {{"week", wm.week},
            {"mean", wm.standardizer.mean},
            {"scale", wm.standardizer.scale},
            {"weights", wm.params.weights},
            {"bias", wm.params.bias},
            {"degenerate", wm.params.degenerate},
            {"final_loss", wm.params.loss_trace.empty() ? json(nullptr) : json(wm.params.loss_trace.back())}};
}

inline std::string model_json(const std::vector<WeekModel>& models, const Hyperparams& hp, std::uint64_t seed) {
    json weeks = json::array();
    for (const auto& m : models) weeks.push_back(to_json(m));
    json doc = {{"hyperparams",
                 {{"learning_rate", hp.learning_rate}, {"iterations", hp.iterations}, {"l2_penalty", hp.l2_penalty}}},
                {"seed", seed},
                {"weeks", std::move(weeks)}};
    return doc.dump(1) + "\n";
}

inline std::vector<WeekModel> parse_model_json(std::string_view text) {
    json doc = json::parse(text);
    Hyperparams hp{doc.at("hyperparams").at("learning_rate").get<double>(),
                   doc.at("hyperparams").at("iterations").get<unsigned>(),
                   doc.at("hyperparams").at("l2_penalty").get<double>()};
    std::vector<WeekModel> out;
    for (const auto& jw : doc.at("weeks")) {
        WeekModel wm;
        wm.week = jw.at("week").get<unsigned>();
        wm.standardizer.mean = jw.at("mean").get<std::vector<double>>();
        wm.standardizer.scale = jw.at("scale").get<std::vector<double>>();
        wm.params.weights = jw.at("weights").get<std::vector<double>>();
        wm.params.bias = jw.at("bias").get<double>();
        wm.params.degenerate = jw.at("degenerate").get<bool>();
        wm.params.hyperparams = hp;
        wm.params.seed = doc.at("seed").get<std::uint64_t>();
        out.push_back(std::move(wm));
    }
    return out;
}

struct Prediction {
    std::string learner_id;
    double score = 0;
    int label = 0;
};

inline std::string predictions_csv(std::span<const Prediction> preds) {
    std::string out = "learner_id,score,label\n";
    for (const auto& p : preds) out += p.learner_id + "," + detail::fmt_real(p.score) + "," + std::to_string(p.label) + "\n";
    return out;
}

inline std::vector<Prediction> parse_predictions_csv(std::string_view text) {
    std::vector<Prediction> out;
    detail::for_each_csv_row(text, "learner_id,score,label", "predictions.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 3) throw Error("predictions.csv line " + std::to_string(line) + ": expected 3 fields");
        out.push_back({std::string(f[0]), std::stod(std::string(f[1])), f[2] == "1" ? 1 : 0});
    });
    return out;
}

inline std::string predictions_file_name(unsigned week) { return "predictions_w" + std::to_string(week) + ".csv"; }

} // namespace replica::pipeline
