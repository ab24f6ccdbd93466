#pragma once

#include <sys/stat.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "replica/executor.hpp"
#include "replica/manifest.hpp"
#include "replica/scheduler.hpp"
#include "replica/synthdata.hpp"

namespace testing_support {

namespace fs = std::filesystem;

#ifndef REPLICA_REFPIPE_PATH
#error "REPLICA_REFPIPE_PATH must be defined"
#endif

inline const std::string kRefpipe = REPLICA_REFPIPE_PATH;

/// Fresh directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        std::string tmpl = (fs::temp_directory_path() / ("replica-" + tag + "-XXXXXX")).string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() { replica::remove_tree(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& p) const { return path_ / p; }

private:
    fs::path path_;
};

inline void write_script(const fs::path& path, const std::string& body) {
    replica::write_file_atomic(path, body);
    fs::permissions(path, fs::perms::owner_all | fs::perms::group_read | fs::perms::group_exec |
                              fs::perms::others_read | fs::perms::others_exec);
}

/// Manifest running the reference pipeline for every stage.
inline replica::JobManifest refpipe_manifest(replica::EvalScheme scheme, unsigned k = 5, std::uint64_t seed = 7,
                                             unsigned feature_weeks = 3,
                                             const std::vector<std::string>& command = {kRefpipe}) {
    using namespace replica;
    JobManifest m;
    m.experiment_name = "dropout-replication";
    m.image_ref = "local/refpipe:0.1.0";
    m.stages = {{StageName::extract, command, 120, {"features.csv", "labels.csv"}},
                {StageName::train, command, 300, {"model.json"}},
                {StageName::test, command, 120, {"predictions_w*.csv"}},
                {StageName::evaluate, command, 120, {"eval.csv"}}};
    m.dataset_selector.kind = SelectorKind::all_courses;
    m.eval_config.scheme = scheme;
    m.eval_config.k = k;
    m.seed = seed;
    m.feature_weeks = feature_weeks;
    return m;
}

/// Generates a corpus under `dir/corpus` and registers it with the engine.
inline std::vector<fs::path> populate(replica::Engine& engine, const fs::path& dir,
                                      const replica::synth::SynthConfig& cfg) {
    auto descs = replica::synth::generate_corpus(cfg, dir / "corpus");
    for (const auto& d : descs) engine.registry().register_course(d);
    return descs;
}

inline replica::synth::SynthConfig small_corpus(unsigned courses = 2, unsigned sessions = 3,
                                                unsigned learners = 60, std::uint64_t seed = 1) {
    replica::synth::SynthConfig c;
    c.num_courses = courses;
    c.sessions_per_course = sessions;
    c.learners_per_session = learners;
    c.session_shift_sd = 0.3;
    c.seed = seed;
    return c;
}

} // namespace testing_support
