#include <gtest/gtest.h>

#include <sstream>

#include <httplib.h>

#include "replica/frontend.hpp"
#include "replica/gateway.hpp"
#include "support.hpp"

using namespace replica;
using namespace testing_support;

#ifndef REPLICA_CLI_PATH
#error "REPLICA_CLI_PATH must be defined"
#endif

namespace {

struct Cli {
    TempDir dir{"cli"};
    fs::path root = dir / "root";
    std::string out, err;

    Cli() {
        Engine e(root);
        populate(e, dir.path(), small_corpus(2, 3, 40));
    }

    int operator()(std::vector<std::string> args) {
        args.insert(args.begin(), {"replica", "--root", root.string()});
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        std::ostringstream o, e;
        int rc = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
        out = o.str();
        err = e.str();
        return rc;
    }

    std::string write_manifest(const JobManifest& m, const std::string& name = "m.json") {
        auto p = dir / name;
        write_file_atomic(p, render(m));
        return p.string();
    }

    std::string first_line() const { return out.substr(0, out.find('\n')); }
};

std::string trial_of(const std::string& err) {
    auto pos = err.find("trial: ");
    return pos == std::string::npos ? "" : err.substr(pos + 7, 64);
}

} // namespace

TEST(Cli, SubmitStatusResults) {
    Cli cli;
    ASSERT_EQ(cli({"submit", "--manifest", cli.write_manifest(refpipe_manifest(EvalScheme::both, 3)),
                   "--parallelism", "2"}),
              cli::kExitOk)
        << cli.err;
    auto job = cli.first_line();
    EXPECT_EQ(job, "job-000001");
    EXPECT_NE(cli.err.find("phase: succeeded"), std::string::npos);
    auto trial = trial_of(cli.err);
    EXPECT_TRUE(is_hex_digest(trial));

    ASSERT_EQ(cli({"status", job}), 0);
    auto st = json::parse(cli.out);
    EXPECT_EQ(st["phase"], "succeeded");
    EXPECT_EQ(st["trial_id"], trial);
    EXPECT_EQ(st["counts"]["done"], st["total"]);

    ASSERT_EQ(cli({"results", job, "--format", "csv"}), 0);
    EXPECT_EQ(cli.out.substr(0, cli.out.find('\n')), "course_id,week,scheme,auc,ci_lo,ci_hi");
    ASSERT_EQ(cli({"results", job}), 0);
    EXPECT_EQ(json::parse(cli.out)["metadata"]["k"], 3);
}

TEST(Cli, InvalidInputsExitOne) {
    Cli cli;
    auto m = refpipe_manifest(EvalScheme::holdout);
    m.dataset_selector = {SelectorKind::whole_course, "c99", std::nullopt};
    EXPECT_EQ(cli({"submit", "--manifest", cli.write_manifest(m)}), cli::kExitInvalid);
    EXPECT_NE(cli.err.find("unknown course"), std::string::npos);
    EXPECT_TRUE(cli.out.empty());

    write_file_atomic(cli.dir / "bad.json", "{\"experiment_name\": 3}");
    EXPECT_EQ(cli({"submit", "--manifest", (cli.dir / "bad.json").string()}), 1);
    EXPECT_EQ(cli({"submit", "--manifest", (cli.dir / "missing.json").string()}), 1);
    EXPECT_EQ(cli({"status", "job-000042"}), 1);
    EXPECT_EQ(cli({"fork", std::string(64, 'a')}), 1);
    EXPECT_NE(cli.err.find("unknown trial"), std::string::npos);
    EXPECT_EQ(cli({"bogus"}), 1);
    EXPECT_EQ(cli({"submit", "--manifest", "x", "--parallelism", "0"}), 1);
}

TEST(Cli, PartialRunExitsTwo) {
    Cli cli;
    auto script = cli.dir / "flaky.sh";
    write_script(script, "#!/bin/sh\nif [ \"$STAGE\" = train ] && [ \"$COURSE_ID\" = c02 ]; then exit 4; fi\nexec " +
                             kRefpipe + "\n");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, {script.string()});
    EXPECT_EQ(cli({"submit", "--manifest", cli.write_manifest(m)}), cli::kExitPartial);
    EXPECT_NE(cli.err.find("failed: c02/train-holdout: exit code 4"), std::string::npos);
    EXPECT_EQ(trial_of(cli.err), "");
}

TEST(Cli, AllFailedExitsThree) {
    Cli cli;
    auto script = cli.dir / "broken.sh";
    write_script(script, "#!/bin/sh\nexit 1\n");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, {script.string()});
    EXPECT_EQ(cli({"submit", "--manifest", cli.write_manifest(m)}), cli::kExitFailed);
}

TEST(Cli, ForkCompareExport) {
    Cli cli;
    ASSERT_EQ(cli({"submit", "--manifest", cli.write_manifest(refpipe_manifest(EvalScheme::holdout))}), 0);
    auto parent = trial_of(cli.err);

    ASSERT_EQ(cli({"fork", parent}), 0) << cli.err;
    EXPECT_EQ(trial_of(cli.err), parent);

    ASSERT_EQ(cli({"fork", parent, "--set", "seed=8"}), 0) << cli.err;
    auto child = trial_of(cli.err);
    EXPECT_NE(child, parent);
    Engine e(cli.root);
    EXPECT_EQ(e.store().trial(child).parent_trial_id, parent);
    EXPECT_EQ(e.store().trial(child).manifest_digest,
              manifest_digest(apply_overrides(refpipe_manifest(EvalScheme::holdout), {"seed=8"})));

    EXPECT_EQ(cli({"fork", parent, "--set", "eval.scheme=both", "--set", "eval.k=1"}), 1);
    EXPECT_NE(cli.err.find("eval.k must be >= 2"), std::string::npos);

    ASSERT_EQ(cli({"compare", "--a", parent, "--b", child}), 0);
    auto cmp = json::parse(cli.out);
    EXPECT_EQ(cmp["manifest_diff"][0]["path"], "/seed");
    EXPECT_FALSE(cmp["eval_identical"].get<bool>());

    auto bundle = cli.dir / "trial.tar";
    ASSERT_EQ(cli({"export", parent, "--out", bundle.string()}), 0);
    EXPECT_EQ(cli.first_line(), sha256_hex(read_file(bundle)));
}

TEST(Cli, SynthAndRegister) {
    TempDir t("cli-synth");
    write_file_atomic(t / "synth.json", json{{"num_courses", 2}, {"learners_per_session", 15}, {"seed", 3}}.dump());
    std::vector<std::string> args{"replica", "--root", (t / "root").string(), "synth", "--config",
                                  (t / "synth.json").string(), "--out", (t / "corpus").string()};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream o, e;
    ASSERT_EQ(cli::run(static_cast<int>(argv.size()), argv.data(), o, e), 0) << e.str();
    EXPECT_TRUE(fs::exists(t / "corpus/c02.course.json"));

    std::vector<std::string> reg{"replica", "--root", (t / "root").string(), "register", "--descriptor",
                                 (t / "corpus/c01.course.json").string(), "--descriptor",
                                 (t / "corpus/c02.course.json").string()};
    argv.clear();
    for (auto& a : reg) argv.push_back(a.data());
    std::ostringstream o2, e2;
    ASSERT_EQ(cli::run(static_cast<int>(argv.size()), argv.data(), o2, e2), 0) << e2.str();
    EXPECT_EQ(o2.str(), "c01\nc02\n");
}

TEST(Cli, BinaryExitCodes) {
    TempDir t("bin");
    auto run = [&](const std::string& args) {
        int st = std::system((std::string(REPLICA_CLI_PATH) + " --root " + (t / "root").string() + " " + args +
                              " >/dev/null 2>&1")
                                 .c_str());
        return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    };
    EXPECT_EQ(run("--help"), 0);
    EXPECT_EQ(run("status job-000001"), 1);
    EXPECT_EQ(run("submit --manifest /nonexistent.json"), 1);
}

namespace {

struct Server {
    Engine& engine;
    Gateway gw;
    int port;
    std::jthread thread;

    explicit Server(Engine& e) : engine(e), gw(e, 2), port(gw.bind_any()) {
        thread = std::jthread([this] { gw.listen_after_bind(); });
        gw.wait_until_ready();
    }
    ~Server() { gw.stop(); }
};

} // namespace

TEST(Http, SubmitPollReportBundle) {
    Cli cli;
    Engine engine(cli.root);
    Server s(engine);
    httplib::Client c("127.0.0.1", s.port);

    auto bad = c.Post("/jobs", "{\"nope\":1}", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    auto holdout_one = refpipe_manifest(EvalScheme::holdout);
    holdout_one.dataset_selector = {SelectorKind::single_session, "c01", "s1"};
    auto invalid = c.Post("/jobs", render(holdout_one), "application/json");
    ASSERT_TRUE(invalid);
    EXPECT_EQ(invalid->status, 400);
    auto violations = json::parse(invalid->body)["violations"];
    ASSERT_FALSE(violations.empty());
    EXPECT_NE(violations[0]["message"].get<std::string>().find("holdout requires >=2 sessions"), std::string::npos);

    auto posted = c.Post("/jobs?parallelism=2", render(refpipe_manifest(EvalScheme::holdout)), "application/json");
    ASSERT_TRUE(posted);
    ASSERT_EQ(posted->status, 202);
    auto job = json::parse(posted->body)["job_id"].get<std::string>();

    json st;
    for (int i = 0; i < 600; ++i) {
        auto r = c.Get("/jobs/" + job);
        ASSERT_TRUE(r);
        ASSERT_EQ(r->status, 200);
        st = json::parse(r->body);
        if (is_terminal(parse_phase(st["phase"].get<std::string>()))) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    ASSERT_EQ(st["phase"], "succeeded");

    // The HTTP view equals the CLI view.
    auto http_status = c.Get("/jobs/" + job);
    ASSERT_EQ(cli({"status", job}), 0);
    EXPECT_EQ(http_status->body, cli.out);
    auto report = c.Get("/jobs/" + job + "/report");
    ASSERT_EQ(report->status, 200);
    ASSERT_EQ(cli({"results", job}), 0);
    EXPECT_EQ(report->body, cli.out);

    auto trial = st["trial_id"].get<std::string>();
    auto bundle = c.Get("/trials/" + trial + "/bundle");
    ASSERT_EQ(bundle->status, 200);
    EXPECT_EQ(bundle->get_header_value("X-Bundle-Digest"), sha256_hex(bundle->body));
    EXPECT_EQ(bundle->body, engine.store().export_bundle(trial));

    EXPECT_EQ(c.Get("/jobs/job-999999")->status, 404);
    EXPECT_EQ(c.Get("/trials/" + std::string(64, 'b') + "/bundle")->status, 404);
}

TEST(Http, ReportOfRunningJobIsConflict) {
    Cli cli;
    Engine engine(cli.root);
    auto id = engine.submit(refpipe_manifest(EvalScheme::holdout));
    Server s(engine);
    httplib::Client c("127.0.0.1", s.port);
    auto r = c.Get("/jobs/" + id + "/report");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 409);
    EXPECT_EQ(json::parse(c.Get("/jobs/" + id)->body)["phase"], "queued");
}
