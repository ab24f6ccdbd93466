#pragma once

// Stage bodies of the reference experiment. The `replica-refpipe` entrypoint
// fills a StageContext from the sandbox environment and calls run(); tests
// can call the same functions directly.
//
// Input layout seen by a stage (INPUT_DIR):
//   extract-<session>/features.csv, labels.csv
//   train-holdout/model.json, train-cv<f>/model.json
//   test-holdout/predictions_w<week>.csv, test-cv<f>/predictions_w<week>.csv

#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "replica/evalstats.hpp"
#include "replica/pipeline.hpp"
#include "replica/rng.hpp"

namespace replica::pipeline {

struct StageContext {
    StageName stage = StageName::extract;
    std::string course_id;
    std::string session_id;
    std::uint64_t seed = 0;
    fs::path data_dir, input_dir, output_dir, scratch_dir;
    unsigned feature_weeks = 1;
    int num_weeks = 0;              ///< extract
    std::optional<Date> session_start; ///< extract
    stats::SplitScheme split = stats::SplitScheme::holdout;
    unsigned fold = 0; ///< 1-based CV fold; 0 for holdout
    unsigned cv_k = 0;
    CvAggregation cv_aggregation = CvAggregation::pooled;
    Hyperparams hyperparams;
};

/// Seed of the fold assignment for one course.
inline std::uint64_t fold_seed(std::uint64_t seed, std::string_view course_id) {
    return derive_seed("replica.kfold:" + std::to_string(seed) + ":" + std::string(course_id));
}

struct LabelledFeatures {
    FeatureMatrix features;
    LabelVector labels;
};

/// Concatenates every `extract-*` input, re-sorted by learner id.
inline LabelledFeatures load_extract_inputs(const fs::path& input_dir) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(input_dir))
        if (e.is_directory() && e.path().filename().string().starts_with("extract-")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw Error("no extract inputs under " + input_dir.string());

    std::map<std::string, std::pair<std::vector<WeekCounts>, int>> rows;
    unsigned weeks = 0;
    for (const auto& dir : dirs) {
        auto fm = parse_features_csv(read_file(dir / "features.csv"));
        auto lv = parse_labels_csv(read_file(dir / "labels.csv"));
        if (fm.learners != lv.learners) throw Error("features/labels misaligned in " + dir.string());
        if (weeks == 0) weeks = fm.weeks;
        if (fm.weeks != weeks) throw Error("inconsistent feature weeks across inputs");
        for (std::size_t i = 0; i < fm.learners.size(); ++i) {
            std::vector<WeekCounts> c(fm.counts.begin() + static_cast<long>(i * weeks),
                                      fm.counts.begin() + static_cast<long>((i + 1) * weeks));
            if (!rows.emplace(fm.learners[i], std::make_pair(std::move(c), lv.dropout[i])).second)
                throw Error("learner id appears in two sessions: " + fm.learners[i]);
        }
    }
    LabelledFeatures out;
    out.features.weeks = weeks;
    for (auto& [id, row] : rows) {
        out.features.learners.push_back(id);
        out.labels.learners.push_back(id);
        out.labels.dropout.push_back(row.second);
        for (auto& c : row.first) out.features.counts.push_back(c);
    }
    return out;
}

/// Keeps rows whose mask entry is true.
inline LabelledFeatures select_rows(const LabelledFeatures& in, const std::vector<bool>& keep) {
    LabelledFeatures out;
    out.features.weeks = in.features.weeks;
    for (std::size_t i = 0; i < in.features.learners.size(); ++i) {
        if (!keep[i]) continue;
        out.features.learners.push_back(in.features.learners[i]);
        out.labels.learners.push_back(in.labels.learners[i]);
        out.labels.dropout.push_back(in.labels.dropout[i]);
        for (unsigned w = 1; w <= in.features.weeks; ++w) out.features.counts.push_back(in.features.at(i, w));
    }
    return out;
}

/// Rows in (or out of) CV fold `fold` (1-based) for the pooled learner index.
inline std::vector<bool> fold_mask(const StageContext& ctx, std::size_t n, bool in_fold) {
    auto folds = stats::kfold_split(n, ctx.cv_k, fold_seed(ctx.seed, ctx.course_id));
    std::vector<bool> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = ((folds[i] + 1) == ctx.fold) == in_fold;
    return keep;
}

inline std::vector<WeekModel> train_week_models(const LabelledFeatures& data, unsigned feature_weeks,
                                                const Hyperparams& hp, std::uint64_t seed) {
    std::vector<WeekModel> models;
    for (unsigned w = 1; w <= feature_weeks; ++w) {
        Dataset raw = design_matrix(data.features, data.labels, w);
        WeekModel wm;
        wm.week = w;
        wm.standardizer = Standardizer::fit(raw);
        wm.params = train_logreg(wm.standardizer.apply(std::move(raw)), hp, seed);
        models.push_back(std::move(wm));
    }
    return models;
}

inline void run_extract(const StageContext& ctx) {
    if (!ctx.session_start || ctx.num_weeks < 2) throw Error("extract: SESSION_START and NUM_WEEKS required");
    auto log = load_event_log(ctx.data_dir, *ctx.session_start, ctx.num_weeks);
    auto fm = extract_features(log, ctx.feature_weeks);
    auto lv = label_dropout(log);
    write_file_atomic(ctx.output_dir / "features.csv", features_csv(fm));
    write_file_atomic(ctx.output_dir / "labels.csv", labels_csv(lv));
}

inline void run_train(const StageContext& ctx) {
    auto data = load_extract_inputs(ctx.input_dir);
    if (ctx.split == stats::SplitScheme::cross_validation)
        data = select_rows(data, fold_mask(ctx, data.features.learners.size(), false));
    auto models = train_week_models(data, ctx.feature_weeks, ctx.hyperparams, ctx.seed);
    write_file_atomic(ctx.output_dir / "model.json", model_json(models, ctx.hyperparams, ctx.seed));
}

inline void run_test(const StageContext& ctx) {
    std::string model_dir = ctx.split == stats::SplitScheme::holdout ? "train-holdout"
                                                                      : "train-cv" + std::to_string(ctx.fold);
    auto models = parse_model_json(read_file(ctx.input_dir / model_dir / "model.json"));
    auto data = load_extract_inputs(ctx.input_dir);
    if (ctx.split == stats::SplitScheme::cross_validation)
        data = select_rows(data, fold_mask(ctx, data.features.learners.size(), true));
    for (const auto& wm : models) {
        Dataset d = wm.standardizer.apply(design_matrix(data.features, data.labels, wm.week));
        auto scores = predict(wm.params, d);
        std::vector<Prediction> preds;
        for (std::size_t i = 0; i < scores.size(); ++i)
            preds.push_back({data.labels.learners[i], scores[i], data.labels.dropout[i]});
        write_file_atomic(ctx.output_dir / predictions_file_name(wm.week), predictions_csv(preds));
    }
}

namespace detail {
inline std::optional<double> safe_auc(const std::vector<Prediction>& preds) {
    std::vector<double> s;
    std::vector<int> y;
    for (const auto& p : preds) {
        s.push_back(p.score);
        y.push_back(p.label);
    }
    bool has0 = std::find(y.begin(), y.end(), 0) != y.end(), has1 = std::find(y.begin(), y.end(), 1) != y.end();
    if (!has0 || !has1) return std::nullopt;
    return stats::auc(s, y);
}
} // namespace detail

inline constexpr std::string_view kCourseEvalHeader = "course_id,week,scheme,auc";

/// One row per (week, scheme); AUC is `NA` when the test labels are single-class.
inline void run_evaluate(const StageContext& ctx) {
    std::string out = std::string(kCourseEvalHeader) + "\n";
    auto fmt = [](std::optional<double> v) { return v ? detail::fmt_real(*v) : std::string("NA"); };
    const bool have_holdout = fs::exists(ctx.input_dir / "test-holdout");
    std::vector<fs::path> cv_dirs;
    for (const auto& e : fs::directory_iterator(ctx.input_dir))
        if (e.is_directory() && e.path().filename().string().starts_with("test-cv")) cv_dirs.push_back(e.path());
    std::sort(cv_dirs.begin(), cv_dirs.end());

    for (unsigned w = 1; w <= ctx.feature_weeks; ++w) {
        auto file = predictions_file_name(w);
        if (have_holdout) {
            auto preds = parse_predictions_csv(read_file(ctx.input_dir / "test-holdout" / file));
            out += ctx.course_id + "," + std::to_string(w) + ",holdout," + fmt(detail::safe_auc(preds)) + "\n";
        }
        if (!cv_dirs.empty()) {
            std::optional<double> value;
            if (ctx.cv_aggregation == CvAggregation::pooled) {
                std::vector<Prediction> pooled;
                for (const auto& dir : cv_dirs) {
                    auto preds = parse_predictions_csv(read_file(dir / file));
                    pooled.insert(pooled.end(), preds.begin(), preds.end());
                }
                std::sort(pooled.begin(), pooled.end(),
                          [](const Prediction& a, const Prediction& b) { return a.learner_id < b.learner_id; });
                value = detail::safe_auc(pooled);
            } else {
                double sum = 0;
                unsigned n = 0;
                for (const auto& dir : cv_dirs)
                    if (auto a = detail::safe_auc(parse_predictions_csv(read_file(dir / file)))) {
                        sum += *a;
                        ++n;
                    }
                if (n > 0) value = sum / n;
            }
            out += ctx.course_id + "," + std::to_string(w) + ",cv," + fmt(value) + "\n";
        }
    }
    write_file_atomic(ctx.output_dir / "eval.csv", out);
}

inline void run(const StageContext& ctx) {
    switch (ctx.stage) {
    case StageName::extract: run_extract(ctx); break;
    case StageName::train: run_train(ctx); break;
    case StageName::test: run_test(ctx); break;
    case StageName::evaluate: run_evaluate(ctx); break;
    }
}

/// Parses a stage's eval.csv into report records (NA rows dropped).
inline std::vector<stats::AucRecord> parse_course_eval_csv(std::string_view text) {
    std::vector<stats::AucRecord> out;
    detail::for_each_csv_row(text, kCourseEvalHeader, "eval.csv", [&](const auto& f, std::size_t line) {
        if (f.size() != 4) throw Error("eval.csv line " + std::to_string(line) + ": expected 4 fields");
        if (f[3] == "NA") return;
        stats::AucRecord r;
        r.course_id = std::string(f[0]);
        r.week = detail::parse_number<unsigned>(f[1], "eval.csv");
        if (f[2] == "holdout")
            r.scheme = stats::SplitScheme::holdout;
        else if (f[2] == "cv")
            r.scheme = stats::SplitScheme::cross_validation;
        else
            throw Error("eval.csv: unknown scheme " + std::string(f[2]));
        r.auc = std::stod(std::string(f[3]));
        out.push_back(std::move(r));
    });
    return out;
}

} // namespace replica::pipeline
