#pragma once

// `replica` command line. Exit codes for submit/fork: 0 succeeded,
// 1 validation failure (or usage error), 2 partial, 3 failed or cancelled.
// Other subcommands return 0 on success and 1 on error.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "replica/gateway.hpp"
#include "replica/scheduler.hpp"
#include "replica/synthdata.hpp"

namespace replica::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitPartial = 2;
inline constexpr int kExitFailed = 3;

inline int exit_code_for(Phase p) {
    switch (p) {
    case Phase::succeeded: return kExitOk;
    case Phase::partial: return kExitPartial;
    default: return kExitFailed;
    }
}

inline void print_violations(const ValidationReport& r, std::ostream& err) {
    for (const auto& v : r.items)
        err << (v.severity == Severity::error ? "error: " : "warning: ") << v.message << "\n";
}

/// Submits, prints the job id, runs the job to completion.
inline int run_job(Engine& engine, const JobManifest& m, unsigned parallelism, std::optional<std::string> parent,
                   std::ostream& out, std::ostream& err) {
    std::string id;
    try {
        print_violations(engine.validate(m), err);
        id = engine.submit(m, std::move(parent));
    } catch (const ValidationFailed& e) {
        err << e.what() << "\n";
        return kExitInvalid;
    }
    out << id << "\n" << std::flush;
    JobReport rep;
    try {
        rep = engine.execute(id, parallelism);
    } catch (const PlanError& e) {
        err << "planning failed: " << e.what() << "\n";
        return kExitInvalid;
    }
    err << "phase: " << to_string(rep.phase) << " (" << rep.units.size() << " units, " << rep.executed
        << " executed, " << rep.cache_hits << " cached)\n";
    for (const auto& u : rep.units)
        if (u.state == UnitState::failed) err << "failed: " << u.unit_id << ": " << u.reason << "\n";
    if (rep.trial_id) err << "trial: " << *rep.trial_id << "\n";
    return exit_code_for(rep.phase);
}

inline int cmd_submit(Engine& engine, const fs::path& manifest_path, unsigned parallelism, std::ostream& out,
                      std::ostream& err) {
    JobManifest m;
    try {
        m = load_manifest(manifest_path);
    } catch (const ManifestError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const NotFound& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    }
    return run_job(engine, m, parallelism, std::nullopt, out, err);
}

inline int cmd_status(Engine& engine, const std::string& job_id, std::ostream& out) {
    out << to_json(engine.status(job_id)).dump(2) << "\n";
    return kExitOk;
}

inline int cmd_results(Engine& engine, const std::string& job_id, const std::string& format, std::ostream& out) {
    out << engine.eval_artifact(job_id, format == "csv" ? "eval.csv" : "eval.json");
    return kExitOk;
}

inline int cmd_fork(Engine& engine, const std::string& ref, const std::vector<std::string>& overrides,
                    unsigned parallelism, std::ostream& out, std::ostream& err) {
    TrialRecord rec;
    if (fs::is_regular_file(ref)) {
        auto imported = engine.store().import_bundle(read_file(ref));
        rec = imported.record;
        err << "imported trial " << rec.trial_id << " (bundle " << imported.bundle_digest << ")\n";
    } else {
        rec = engine.store().trial(ref);
    }
    JobManifest m;
    try {
        m = apply_overrides(engine.store().trial_manifest(rec), overrides);
    } catch (const ManifestError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    }
    return run_job(engine, m, parallelism, rec.trial_id, out, err);
}

inline int cmd_compare(Engine& engine, const std::string& a, const std::string& b, std::ostream& out) {
    out << compare_trials(engine.store(), a, b).dump(2) << "\n";
    return kExitOk;
}

inline int cmd_export(Engine& engine, const std::string& trial_id, const fs::path& path, std::ostream& out) {
    auto bytes = engine.store().export_bundle(trial_id);
    write_file_atomic(path, bytes);
    out << sha256_hex(bytes) << "\n";
    return kExitOk;
}

inline int cmd_synth(const fs::path& config, const fs::path& out_dir, std::ostream& out) {
    auto cfg = synth::synth_config_from_json(json::parse(read_file(config)));
    for (const auto& p : synth::generate_corpus(cfg, out_dir)) out << p.string() << "\n";
    return kExitOk;
}

inline int cmd_register(Engine& engine, const std::vector<fs::path>& descriptors, std::ostream& out) {
    for (const auto& d : descriptors) out << engine.registry().register_course(d).course_id << "\n";
    return kExitOk;
}

inline Gateway* g_gateway = nullptr;

inline int cmd_serve(Engine& engine, int port, unsigned parallelism, std::ostream& err) {
    Gateway gw(engine, parallelism);
    g_gateway = &gw;
    std::signal(SIGINT, [](int) {
        if (g_gateway) g_gateway->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_gateway) g_gateway->stop();
    });
    err << "listening on http://127.0.0.1:" << port << "\n" << std::flush;
    bool ok = gw.listen("127.0.0.1", port);
    g_gateway = nullptr;
    if (!ok) {
        err << "error: cannot listen on port " << port << "\n";
        return kExitInvalid;
    }
    return kExitOk;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Reproducible replication engine"};
    app.require_subcommand(1, 1);
    std::string root = default_engine_root();
    app.add_option("--root", root, "Engine state directory (default $REPLICA_ROOT or .replica)");

    std::string manifest, job, format = "json", ref, a, b, trial, config, out_path;
    std::vector<std::string> sets, descriptors;
    unsigned parallelism = 1;
    int port = 8080;

    auto* submit = app.add_subcommand("submit", "Validate, plan and run a manifest");
    submit->add_option("--manifest", manifest)->required();
    submit->add_option("--parallelism", parallelism)->check(CLI::PositiveNumber);

    auto* status = app.add_subcommand("status", "Print a job's state");
    status->add_option("job_id", job)->required();

    auto* results = app.add_subcommand("results", "Print a finished job's evaluation report");
    results->add_option("job_id", job)->required();
    results->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));

    auto* fork = app.add_subcommand("fork", "Re-run a trial (by id or bundle path) with overrides");
    fork->add_option("trial", ref)->required();
    fork->add_option("--set", sets, "key=value manifest override");
    fork->add_option("--parallelism", parallelism)->check(CLI::PositiveNumber);

    auto* compare = app.add_subcommand("compare", "Compare two trials");
    compare->add_option("--a", a)->required();
    compare->add_option("--b", b)->required();

    auto* serve = app.add_subcommand("serve", "Run the HTTP gateway on 127.0.0.1");
    serve->add_option("--port", port)->check(CLI::Range(1, 65535));
    serve->add_option("--parallelism", parallelism)->check(CLI::PositiveNumber);

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
    synth_cmd->add_option("--config", config)->required();
    synth_cmd->add_option("--out", out_path)->required();

    auto* reg = app.add_subcommand("register", "Register course descriptors");
    reg->add_option("--descriptor", descriptors)->required();

    auto* exp = app.add_subcommand("export", "Write a trial bundle and print its digest");
    exp->add_option("trial", trial)->required();
    exp->add_option("--out", out_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitInvalid;
    }

    try {
        if (*synth_cmd) return cmd_synth(config, out_path, out);
        Engine engine{fs::path(root)};
        if (*submit) return cmd_submit(engine, manifest, parallelism, out, err);
        if (*status) return cmd_status(engine, job, out);
        if (*results) return cmd_results(engine, job, format, out);
        if (*fork) return cmd_fork(engine, ref, sets, parallelism, out, err);
        if (*compare) return cmd_compare(engine, a, b, out);
        if (*serve) return cmd_serve(engine, port, parallelism, err);
        if (*reg) return cmd_register(engine, {descriptors.begin(), descriptors.end()}, out);
        if (*exp) return cmd_export(engine, trial, out_path, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    }
    return kExitInvalid;
}

} // namespace replica::cli
