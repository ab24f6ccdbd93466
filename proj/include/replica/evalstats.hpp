#pragma once

// Evaluation harness: future-session holdout and k-fold splits, rank AUC,
// Student-t intervals, the Wilcoxon signed-rank test and the holdout-vs-CV
// bias report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "replica/civil_time.hpp"
#include "replica/errors.hpp"
#include "replica/manifest.hpp"
#include "replica/rng.hpp"

namespace replica::stats {

// ---------------------------------------------------------------------------
// Splits

enum class SplitScheme { holdout, cross_validation };

inline std::string_view to_string(SplitScheme s) { return s == SplitScheme::holdout ? "holdout" : "cv"; }

struct HoldoutPlan {
    std::vector<std::string> train_sessions; ///< date order
    std::string test_session;
};

/// The latest-starting session is held out (ties: greatest session_id); all
/// others train. `S` needs `session_id` and `start_date`.
template <class S>
HoldoutPlan holdout_split(std::span<const S> sessions) {
    if (sessions.size() < 2) throw PlanError("holdout requires >=2 sessions");
    std::vector<const S*> order;
    for (const auto& s : sessions) order.push_back(&s);
    std::sort(order.begin(), order.end(), [](const S* a, const S* b) {
        return a->start_date != b->start_date ? a->start_date < b->start_date : a->session_id < b->session_id;
    });
    HoldoutPlan plan;
    plan.test_session = order.back()->session_id;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) plan.train_sessions.push_back(order[i]->session_id);
    return plan;
}

/// Fold (0-based) of each index in [0, n). Seeded Fisher-Yates shuffle of the
/// indices, then contiguous chunks: the first n % k folds hold ceil(n/k).
inline std::vector<unsigned> kfold_split(std::size_t n, unsigned k, std::uint64_t seed) {
    if (k < 2) throw Error("kfold: k must be >= 2");
    if (k > n) throw Error("kfold: k exceeds sample count");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<unsigned> fold(n);
    const std::size_t base = n / k, extra = n % k;
    std::size_t pos = 0;
    for (unsigned f = 0; f < k; ++f) {
        std::size_t size = base + (f < extra ? 1 : 0);
        for (std::size_t i = 0; i < size; ++i) fold[perm[pos++]] = f;
    }
    return fold;
}

// ---------------------------------------------------------------------------
// AUC

/// Midranks (1-based) of `values`; equal values share the mean of their ranks.
inline std::vector<double> midranks(std::span<const double> values) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
        double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Mann-Whitney form: (R+ - n1(n1+1)/2) / (n1 n0), ties counted one half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error("auc: scores and labels differ in length");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y == 1)
            ++pos;
        else if (y == 0)
            ++neg;
        else
            throw Error("auc: labels must be 0/1");
    }
    if (pos == 0 || neg == 0) throw Error("auc: undefined for single-class labels");
    for (double s : scores)
        if (std::isnan(s)) throw Error("auc: NaN score");
    auto ranks = midranks(scores);
    double rank_sum = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (labels[i] == 1) rank_sum += ranks[i];
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (rank_sum - p * (p + 1) / 2.0) / (p * q);
}

// ---------------------------------------------------------------------------
// Confidence intervals

struct MeanCi {
    double mean = 0, lo = 0, hi = 0;
};

/// Student-t interval mean +- t_{(1+level)/2, n-1} s / sqrt(n); not clipped.
inline MeanCi mean_ci(std::span<const double> values, double level) {
    const std::size_t n = values.size();
    if (n < 2) throw Error("mean_ci: need at least 2 values");
    if (!(level > 0 && level < 1)) throw Error("mean_ci: level must lie in (0,1)");
    double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    double se = std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
    if (se == 0) return {mean, mean, mean};
    boost::math::students_t_distribution<long double> dist(static_cast<long double>(n - 1));
    auto t = static_cast<double>(boost::math::quantile(dist, (1.0L + level) / 2.0L));
    return {mean, mean - t * se, mean + t * se};
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

enum class TestMethod { exact, normal_approx };

inline std::string_view to_string(TestMethod m) { return m == TestMethod::exact ? "exact" : "normal_approx"; }

struct StatTestResult {
    double statistic = 0; ///< W: sum of ranks of positive differences
    std::size_t n_effective = 0;
    double p_value = 1.0;
    TestMethod method = TestMethod::exact;
};

inline constexpr std::size_t kExactMaxN = 25;

/// Two-sided test on differences. Zeros are dropped; |d| ranked with
/// midranks; exact null distribution (by subset-sum counting over doubled
/// ranks) for n <= 25, else normal approximation with tie-corrected variance
/// and 0.5 continuity correction. p = min(1, 2 * smaller tail). `force`
/// selects a method regardless of n.
inline StatTestResult wilcoxon_signed_rank(std::span<const double> diffs,
                                           std::optional<TestMethod> force = std::nullopt) {
    if (diffs.empty()) throw Error("wilcoxon: need at least one pair");
    std::vector<double> nz;
    for (double d : diffs) {
        if (std::isnan(d)) throw Error("wilcoxon: NaN difference");
        if (d != 0.0) nz.push_back(d);
    }
    StatTestResult r;
    r.n_effective = nz.size();
    if (nz.empty()) return r;

    std::vector<double> mags(nz.size());
    std::transform(nz.begin(), nz.end(), mags.begin(), [](double d) { return std::fabs(d); });
    auto ranks = midranks(mags);
    double w = 0;
    for (std::size_t i = 0; i < nz.size(); ++i)
        if (nz[i] > 0) w += ranks[i];
    r.statistic = w;
    const auto n = static_cast<double>(nz.size());

    if (force ? *force == TestMethod::exact : nz.size() <= kExactMaxN) {
        r.method = TestMethod::exact;
        // Doubled midranks are integers.
        std::vector<std::size_t> twice(ranks.size());
        std::size_t total = 0;
        for (std::size_t i = 0; i < ranks.size(); ++i) {
            twice[i] = static_cast<std::size_t>(std::lround(2 * ranks[i]));
            total += twice[i];
        }
        std::vector<double> count(total + 1, 0.0);
        count[0] = 1;
        for (auto t : twice)
            for (std::size_t s = total; s >= t; --s) {
                count[s] += count[s - t];
                if (s == t) break;
            }
        const auto observed = static_cast<std::size_t>(std::lround(2 * w));
        double upper = 0, lower = 0;
        for (std::size_t s = 0; s <= total; ++s) {
            if (s >= observed) upper += count[s];
            if (s <= observed) lower += count[s];
        }
        const double all = std::ldexp(1.0, static_cast<int>(nz.size()));
        r.p_value = std::min(1.0, 2.0 * std::min(upper, lower) / all);
        return r;
    }

    r.method = TestMethod::normal_approx;
    double mu = n * (n + 1) / 4.0;
    double var = n * (n + 1) * (2 * n + 1) / 24.0;
    std::vector<double> sorted = mags;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        double t = static_cast<double>(j - i + 1);
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if (var <= 0) {
        r.p_value = 1.0;
        return r;
    }
    double z = std::max(0.0, std::fabs(w - mu) - 0.5) / std::sqrt(var);
    double p = std::erfc(z / std::sqrt(2.0));
    r.p_value = std::clamp(p, std::numeric_limits<double>::min(), 1.0);
    return r;
}

// ---------------------------------------------------------------------------
// Reports

struct AucRecord {
    std::string course_id;
    unsigned week = 0;
    SplitScheme scheme = SplitScheme::holdout;
    double auc = 0;

    bool operator==(const AucRecord&) const = default;
};

struct PairedObservation {
    std::string course_id;
    unsigned week = 0;
    double holdout_auc = 0;
    double cv_auc = 0;
};

using PairedSample = std::vector<PairedObservation>;

struct GroupSummary {
    unsigned week = 0;
    SplitScheme scheme = SplitScheme::holdout;
    std::size_t n = 0;
    double mean = 0;
    std::optional<double> ci_lo, ci_hi; ///< needs n >= 2
};

struct BiasSummary {
    std::size_t n_pairs = 0;
    double mean_bias = 0; ///< mean of cv - holdout
    double ci_lo = 0, ci_hi = 0;
    StatTestResult test;
};

/// Mean difference, its CI and the Wilcoxon result over (cv - holdout).
inline BiasSummary bias_report(const PairedSample& sample, double ci_level) {
    if (sample.size() < 2) throw Error("bias_report: need at least 2 pairs");
    std::vector<double> diffs;
    for (const auto& p : sample) diffs.push_back(p.cv_auc - p.holdout_auc);
    auto ci = mean_ci(diffs, ci_level);
    return BiasSummary{sample.size(), ci.mean, ci.lo, ci.hi, wilcoxon_signed_rank(diffs)};
}

struct EvalReport {
    std::vector<AucRecord> records; ///< sorted by (course, week, scheme)
    std::vector<GroupSummary> groups;
    PairedSample pairs;
    std::optional<BiasSummary> pooled;
    std::map<unsigned, BiasSummary> per_week;
    double ci_level = 0.95;
    unsigned k = 0;
    std::uint64_t seed = 0;
    CvAggregation cv_aggregation = CvAggregation::pooled;
};

/// Assembles the cross-course report. CIs are across courses, one AUC per
/// course per week per scheme.
inline EvalReport build_eval_report(std::vector<AucRecord> records, const EvalConfig& cfg, std::uint64_t seed) {
    EvalReport rep;
    rep.ci_level = cfg.ci_level;
    rep.k = cfg.k;
    rep.seed = seed;
    rep.cv_aggregation = cfg.cv_aggregation;
    std::sort(records.begin(), records.end(), [](const AucRecord& a, const AucRecord& b) {
        return std::tie(a.course_id, a.week, a.scheme) < std::tie(b.course_id, b.week, b.scheme);
    });
    rep.records = std::move(records);

    std::map<std::pair<unsigned, SplitScheme>, std::vector<double>> by_group;
    std::map<std::pair<std::string, unsigned>, std::pair<std::optional<double>, std::optional<double>>> by_key;
    for (const auto& r : rep.records) {
        by_group[{r.week, r.scheme}].push_back(r.auc);
        auto& slot = by_key[{r.course_id, r.week}];
        (r.scheme == SplitScheme::holdout ? slot.first : slot.second) = r.auc;
    }
    for (const auto& [key, values] : by_group) {
        GroupSummary g{key.first, key.second, values.size(), 0, {}, {}};
        g.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        if (values.size() >= 2) {
            auto ci = mean_ci(values, cfg.ci_level);
            g.ci_lo = ci.lo;
            g.ci_hi = ci.hi;
        }
        rep.groups.push_back(g);
    }
    for (const auto& [key, slot] : by_key)
        if (slot.first && slot.second) rep.pairs.push_back({key.first, key.second, *slot.first, *slot.second});

    if (rep.pairs.size() >= 2) rep.pooled = bias_report(rep.pairs, cfg.ci_level);
    std::map<unsigned, PairedSample> week_pairs;
    for (const auto& p : rep.pairs) week_pairs[p.week].push_back(p);
    for (const auto& [week, sample] : week_pairs)
        if (sample.size() >= 2) rep.per_week.emplace(week, bias_report(sample, cfg.ci_level));
    return rep;
}

namespace detail {
inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}
} // namespace detail

inline constexpr std::string_view kEvalCsvHeader = "course_id,week,scheme,auc,ci_lo,ci_hi";

/// Per-course rows (empty CI columns), then one `ALL` row per (week, scheme)
/// carrying the across-course mean and interval.
inline std::string to_csv(const EvalReport& rep) {
    std::string out(kEvalCsvHeader);
    out += '\n';
    for (const auto& r : rep.records)
        out += r.course_id + "," + std::to_string(r.week) + "," + std::string(to_string(r.scheme)) + "," +
               detail::fmt6(r.auc) + ",,\n";
    for (const auto& g : rep.groups) {
        out += "ALL," + std::to_string(g.week) + "," + std::string(to_string(g.scheme)) + "," + detail::fmt6(g.mean) +
               "," + (g.ci_lo ? detail::fmt6(*g.ci_lo) : "") + "," + (g.ci_hi ? detail::fmt6(*g.ci_hi) : "") + "\n";
    }
    return out;
}

/// Per-(course, week) holdout vs cv pairs.
inline std::string scatter_csv(const EvalReport& rep) {
    std::string out = "course_id,week,holdout_auc,cv_auc\n";
    for (const auto& p : rep.pairs)
        out += p.course_id + "," + std::to_string(p.week) + "," + detail::fmt6(p.holdout_auc) + "," +
               detail::fmt6(p.cv_auc) + "\n";
    return out;
}

inline nlohmann::json to_json(const StatTestResult& t) {
    return {{"W", t.statistic}, {"n_effective", t.n_effective}, {"p", t.p_value}, {"method", to_string(t.method)}};
}

inline nlohmann::json to_json(const BiasSummary& b) {
    return {{"n_pairs", b.n_pairs}, {"bias", b.mean_bias}, {"ci_lo", b.ci_lo}, {"ci_hi", b.ci_hi},
            {"wilcoxon", to_json(b.test)}};
}

inline nlohmann::json to_json(const EvalReport& rep) {
    using nlohmann::json;
    json rows = json::array();
    for (const auto& r : rep.records)
        rows.push_back({{"course_id", r.course_id}, {"week", r.week}, {"scheme", to_string(r.scheme)}, {"auc", r.auc}});
    json groups = json::array();
    for (const auto& g : rep.groups) {
        json jg = {{"week", g.week}, {"scheme", to_string(g.scheme)}, {"n", g.n}, {"mean", g.mean}};
        jg["ci_lo"] = g.ci_lo ? json(*g.ci_lo) : json(nullptr);
        jg["ci_hi"] = g.ci_hi ? json(*g.ci_hi) : json(nullptr);
        groups.push_back(std::move(jg));
    }
    json aggregate = {{"pooled", rep.pooled ? to_json(*rep.pooled) : json(nullptr)}};
    json weeks = json::object();
    for (const auto& [week, b] : rep.per_week) weeks[std::to_string(week)] = to_json(b);
    aggregate["per_week"] = std::move(weeks);
    return {{"metadata",
             {{"ci_level", rep.ci_level},
              {"k", rep.k},
              {"seed", rep.seed},
              {"metric", "auc"},
              {"cv_aggregation", to_string(rep.cv_aggregation)}}},
            {"rows", std::move(rows)},
            {"groups", std::move(groups)},
            {"aggregate", std::move(aggregate)}};
}

} // namespace replica::stats
