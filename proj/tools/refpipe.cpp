// Stage entrypoint of the reference experiment. Reads the sandbox
// environment (STAGE, COURSE_ID, DATA_DIR, ...) and runs one stage.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "replica/refpipe.hpp"

namespace {

std::string env(const char* key, bool required = true) {
    const char* v = std::getenv(key);
    if (!v) {
        if (required) throw replica::Error(std::string("missing environment variable ") + key);
        return {};
    }
    return v;
}

unsigned env_unsigned(const char* key, unsigned fallback) {
    auto v = env(key, false);
    return v.empty() ? fallback : static_cast<unsigned>(std::stoul(v));
}

} // namespace

int main(int argc, char** argv) {
    using namespace replica;
    CLI::App app{"Reference dropout pipeline stage"};
    pipeline::StageContext ctx;
    app.add_option("--learning-rate", ctx.hyperparams.learning_rate)->check(CLI::PositiveNumber);
    app.add_option("--iterations", ctx.hyperparams.iterations);
    app.add_option("--l2", ctx.hyperparams.l2_penalty)->check(CLI::NonNegativeNumber);
    CLI11_PARSE(app, argc, argv);

    try {
        auto stage = parse_stage_name(env("STAGE"));
        if (!stage) throw Error("unknown STAGE " + env("STAGE"));
        ctx.stage = *stage;
        ctx.course_id = env("COURSE_ID");
        ctx.session_id = env("SESSION_ID", false);
        ctx.seed = std::stoull(env("SEED"));
        ctx.data_dir = env("DATA_DIR");
        ctx.input_dir = env("INPUT_DIR", false);
        ctx.output_dir = env("OUTPUT_DIR");
        ctx.scratch_dir = env("SCRATCH_DIR", false);
        ctx.feature_weeks = env_unsigned("FEATURE_WEEKS", 1);
        ctx.num_weeks = static_cast<int>(env_unsigned("NUM_WEEKS", 0));
        if (auto s = env("SESSION_START", false); !s.empty()) ctx.session_start = parse_date(s);
        ctx.split = env("SPLIT", false) == "cv" ? stats::SplitScheme::cross_validation : stats::SplitScheme::holdout;
        ctx.fold = env_unsigned("FOLD", 0);
        ctx.cv_k = env_unsigned("CV_K", 0);
        ctx.cv_aggregation =
            env("CV_AGGREGATION", false) == "fold_mean" ? CvAggregation::fold_mean : CvAggregation::pooled;
        pipeline::run(ctx);
        std::cout << to_string(ctx.stage) << " " << ctx.course_id << " ok\n";
    } catch (const std::exception& e) {
        std::cerr << "refpipe: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
