#include <gtest/gtest.h>

#include "replica/scheduler.hpp"
#include "support.hpp"

using namespace replica;
using namespace testing_support;

namespace {

/// Engine over a small registered corpus.
struct World {
    TempDir dir{"sched"};
    Engine engine{dir / "root"};

    explicit World(synth::SynthConfig cfg = small_corpus()) { populate(engine, dir.path(), cfg); }

    /// Shell wrapper around the reference pipeline; `pre` runs first.
    std::vector<std::string> wrapper(const std::string& name, const std::string& pre) {
        auto p = dir / name;
        write_script(p, "#!/bin/sh\n" + pre + "\nexec " + kRefpipe + " \"$@\"\n");
        return {p.string()};
    }
};

std::size_t count_stage(const std::vector<WorkUnit>& units, StageName st) {
    return static_cast<std::size_t>(
        std::count_if(units.begin(), units.end(), [&](const WorkUnit& u) { return u.stage == st; }));
}

} // namespace

TEST(Plan, HoldoutOverThreeSessionsIsSixUnits) {
    World w(small_corpus(1, 3, 20));
    auto m = refpipe_manifest(EvalScheme::holdout);
    auto units = w.engine.plan(w.engine.submit(m));
    ASSERT_EQ(units.size(), 6u);
    EXPECT_EQ(count_stage(units, StageName::extract), 3u);
    auto slot = [&](const std::string& name) {
        return *std::find_if(units.begin(), units.end(), [&](const WorkUnit& u) { return u.slot == name; });
    };
    auto train = slot("train-holdout");
    EXPECT_EQ(train.depends_on, (std::set<std::string>{"c01/extract-s1", "c01/extract-s2"}));
    auto test = slot("test-holdout");
    EXPECT_EQ(test.depends_on, (std::set<std::string>{"c01/extract-s3", "c01/train-holdout"}));
    EXPECT_EQ(test.session_id, "s3");
}

TEST(Plan, CrossValidationOverOneSessionIsTwelveUnits) {
    World w(small_corpus(1, 1, 20));
    auto m = refpipe_manifest(EvalScheme::cross_validation, 5);
    auto units = w.engine.plan(w.engine.submit(m));
    ASSERT_EQ(units.size(), 12u);
    EXPECT_EQ(count_stage(units, StageName::train), 5u);
    EXPECT_EQ(count_stage(units, StageName::test), 5u);
    auto eval = *std::find_if(units.begin(), units.end(), [](const WorkUnit& u) { return u.slot == "evaluate"; });
    EXPECT_EQ(eval.depends_on.size(), 5u);
}

TEST(Plan, BothSchemesAndOrdering) {
    World w(small_corpus(2, 3, 20));
    auto units = w.engine.plan(w.engine.submit(refpipe_manifest(EvalScheme::both, 5)));
    EXPECT_EQ(units.size(), 2u * 16u);
    for (std::size_t i = 1; i < units.size(); ++i) EXPECT_LT(units[i - 1].order_key(), units[i].order_key());
    std::set<std::string> keys;
    for (const auto& u : units) keys.insert(u.cache_key);
    EXPECT_EQ(keys.size(), units.size());
}

TEST(Plan, RandomizedShapeProperty) {
    Rng r(4);
    World w(small_corpus(3, 4, 12));
    for (int i = 0; i < 40; ++i) {
        auto scheme = static_cast<EvalScheme>(r.below(3));
        auto k = static_cast<unsigned>(2 + r.below(6));
        auto m = refpipe_manifest(scheme, k, r.next());
        auto sessions = 1 + r.below(4);
        m.dataset_selector = {SelectorKind::whole_course, "c0" + std::to_string(1 + r.below(3)), std::nullopt};
        if (sessions == 1) {
            m.dataset_selector = {SelectorKind::single_session, *m.dataset_selector.course_id, "s2"};
            if (uses_holdout(scheme)) continue;
        } else {
            sessions = 4;
        }
        auto units = plan_units(m, w.engine.registry());
        std::size_t expect = sessions + 1 + (uses_holdout(scheme) ? 2 : 0) + (uses_cv(scheme) ? 2 * k : 0);
        ASSERT_EQ(units.size(), expect);
        // Dependencies point to earlier stages of the same course.
        std::map<std::string, const WorkUnit*> by_id;
        for (const auto& u : units) by_id[u.unit_id] = &u;
        for (const auto& u : units)
            for (const auto& d : u.depends_on) {
                ASSERT_TRUE(by_id.count(d));
                ASSERT_LT(by_id[d]->stage, u.stage);
                ASSERT_EQ(by_id[d]->course_id, u.course_id);
            }
    }
}

TEST(Submit, HoldoutOnSingleSessionCourseIsRejected) {
    World w(small_corpus(1, 1, 20));
    try {
        w.engine.submit(refpipe_manifest(EvalScheme::holdout));
        FAIL();
    } catch (const ValidationFailed& e) {
        ASSERT_FALSE(e.report.ok());
        EXPECT_NE(e.report.items[0].message.find("holdout requires >=2 sessions"), std::string::npos);
    }
    EXPECT_TRUE(w.engine.job_ids().empty());
    auto a = w.engine.submit(refpipe_manifest(EvalScheme::cross_validation));
    auto b = w.engine.submit(refpipe_manifest(EvalScheme::cross_validation));
    EXPECT_NE(a, b);
}

TEST(Execute, EndToEndDeterministicWithWarmCache) {
    World w;
    auto m = refpipe_manifest(EvalScheme::both, 3);
    auto id1 = w.engine.submit(m);
    auto r1 = w.engine.execute(id1, 2);
    ASSERT_EQ(r1.phase, Phase::succeeded);
    EXPECT_EQ(r1.cache_hits, 0u);
    EXPECT_EQ(r1.executed, r1.units.size());
    ASSERT_TRUE(r1.trial_id);
    EXPECT_EQ(w.engine.status(id1).trial_id, r1.trial_id);
    EXPECT_FALSE(fs::exists(w.engine.root() / "work" / id1));

    auto id2 = w.engine.submit(m);
    auto r2 = w.engine.execute(id2, 2);
    ASSERT_EQ(r2.phase, Phase::succeeded);
    EXPECT_EQ(r2.cache_hits, r2.units.size());
    EXPECT_EQ(r2.executed, 0u);
    EXPECT_EQ(r2.trial_id, r1.trial_id);
    EXPECT_EQ(to_json(r2, false), to_json(r1, false));
    EXPECT_EQ(w.engine.store().ledger().size(), 1u);

    auto eval = json::parse(w.engine.eval_artifact(id1, "eval.json"));
    EXPECT_EQ(eval["metadata"]["k"], 3);
    EXPECT_EQ(eval["rows"].size(), 2u * 3u * 2u);
    EXPECT_EQ(w.engine.eval_artifact(id1, "eval.csv"), w.engine.eval_artifact(id2, "eval.csv"));
}

TEST(Execute, FreshRootReproducesDigests) {
    World a, b;
    auto m = refpipe_manifest(EvalScheme::holdout);
    auto ra = a.engine.execute(a.engine.submit(m), 1);
    auto rb = b.engine.execute(b.engine.submit(m), 3);
    ASSERT_EQ(ra.phase, Phase::succeeded);
    EXPECT_EQ(ra.trial_id, rb.trial_id);
    EXPECT_EQ(to_json(ra, false), to_json(rb, false));
}

TEST(Execute, SeedChangesTrialAndInvalidatesCache) {
    World w;
    auto m = refpipe_manifest(EvalScheme::cross_validation, 3);
    auto r1 = w.engine.execute(w.engine.submit(m), 2);
    m.seed += 1;
    auto r2 = w.engine.execute(w.engine.submit(m), 2);
    EXPECT_NE(r1.trial_id, r2.trial_id);
    EXPECT_EQ(r2.cache_hits, 0u);
}

TEST(Execute, FailureIsIsolatedPerCourse) {
    World w;
    auto cmd = w.wrapper("fail-c02-train.sh",
                         "if [ \"$STAGE\" = train ] && [ \"$COURSE_ID\" = c02 ]; then echo boom >&2; exit 7; fi");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, cmd);
    auto id = w.engine.submit(m);
    auto rep = w.engine.execute(id, 2);
    EXPECT_EQ(rep.phase, Phase::partial);
    EXPECT_FALSE(rep.trial_id);
    std::map<std::string, UnitState> st;
    for (const auto& u : rep.units) st[u.unit_id] = u.state;
    EXPECT_EQ(st["c02/train-holdout"], UnitState::failed);
    EXPECT_EQ(st["c02/test-holdout"], UnitState::skipped);
    EXPECT_EQ(st["c02/evaluate"], UnitState::skipped);
    EXPECT_EQ(st["c01/evaluate"], UnitState::done);
    for (const auto& u : rep.units)
        if (u.unit_id == "c02/train-holdout") {
            EXPECT_EQ(u.reason, "exit code 7");
            EXPECT_EQ(w.engine.store().blobs().get(u.log_digest), "boom\n");
        }
    // Evaluation still covers the healthy course.
    auto eval = json::parse(w.engine.eval_artifact(id, "eval.json"));
    for (const auto& row : eval["rows"]) EXPECT_EQ(row["course_id"], "c01");
    EXPECT_TRUE(w.engine.store().ledger().empty());
}

TEST(Execute, AllFailIsFailed) {
    World w(small_corpus(1, 2, 20));
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, w.wrapper("fail.sh", "exit 1"));
    auto rep = w.engine.execute(w.engine.submit(m), 1);
    EXPECT_EQ(rep.phase, Phase::failed);
    EXPECT_TRUE(rep.eval_digests.empty());
}

TEST(Execute, TraceRespectsDependenciesAndParallelism) {
    World w(small_corpus(3, 3, 30));
    auto m = refpipe_manifest(EvalScheme::both, 3);
    auto id = w.engine.submit(m);
    auto units = w.engine.plan(id);
    w.engine.execute(id, 3);
    std::map<std::string, std::set<std::string>> deps;
    for (const auto& u : units) deps[u.unit_id] = u.depends_on;
    std::set<std::string> finished;
    int running = 0, peak = 0;
    std::uint64_t last_seq = 0;
    for (const auto& ev : w.engine.trace(id)) {
        EXPECT_GT(ev.seq, last_seq);
        last_seq = ev.seq;
        if (ev.state == UnitState::running) {
            for (const auto& d : deps[ev.unit_id]) EXPECT_TRUE(finished.count(d)) << ev.unit_id << " before " << d;
            peak = std::max(peak, ++running);
        } else if (ev.state == UnitState::done) {
            --running;
            finished.insert(ev.unit_id);
        }
    }
    EXPECT_LE(peak, 3);
    EXPECT_GE(peak, 2);
    EXPECT_EQ(finished.size(), units.size());
}

TEST(Execute, PolicyViolationsThroughTheEngine) {
    World w(small_corpus(1, 2, 20));
    // Test stage writes into its data mount; extract leaks a raw copy.
    auto cmd = w.wrapper("leaky.sh",
                         "if [ \"$STAGE\" = test ]; then echo x > \"$DATA_DIR/leak.csv\"; fi\n"
                         "if [ \"$STAGE\" = extract ]; then cp \"$DATA_DIR/events.csv\" \"$OUTPUT_DIR/raw_copy.dat\"; "
                         "cp \"$DATA_DIR/events.csv\" \"$OUTPUT_DIR/labels_backup.csv\"; fi");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, cmd);
    m.stages[0].outputs = {"features.csv", "labels.csv", "raw_copy.dat", "labels_backup.csv"};
    auto rep = w.engine.execute(w.engine.submit(m), 1);
    EXPECT_EQ(rep.phase, Phase::partial);
    for (const auto& u : rep.units) {
        if (u.stage == StageName::extract) {
            EXPECT_EQ(u.state, UnitState::done);
            EXPECT_EQ(u.outputs.count("raw_copy.dat"), 0u);
            ASSERT_EQ(u.denied.size(), 2u);
            EXPECT_EQ(u.denied[0], (DeniedOutput{"labels_backup.csv", "not allowlisted"}));
            EXPECT_EQ(u.denied[1], (DeniedOutput{"raw_copy.dat", "not allowlisted"}));
        }
        if (u.stage == StageName::test) {
            EXPECT_EQ(u.state, UnitState::failed);
            EXPECT_EQ(u.status, StageStatus::policy_violation);
            EXPECT_NE(u.reason.find("leak.csv"), std::string::npos);
        }
    }
    // The registry copy is untouched.
    EXPECT_NO_THROW(w.engine.registry().verify_session("c01", "s1"));
}

TEST(Execute, AllowlistedRawCopyIsStillDenied) {
    World w(small_corpus(1, 2, 20));
    auto cmd = w.wrapper("copy.sh", "if [ \"$STAGE\" = extract ]; then cp \"$DATA_DIR/events.csv\" "
                                    "\"$OUTPUT_DIR/eval.csv\"; fi");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, cmd);
    m.stages[0].outputs.push_back("eval.csv");
    auto rep = w.engine.execute(w.engine.submit(m), 1);
    for (const auto& u : rep.units)
        if (u.stage == StageName::extract) {
            ASSERT_EQ(u.denied.size(), 1u);
            EXPECT_EQ(u.denied[0].reason, "raw data copy");
        }
}

TEST(Execute, CancelStopsPendingWork) {
    World w(small_corpus(2, 2, 20));
    auto cmd = w.wrapper("slow.sh", "sleep 2");
    auto m = refpipe_manifest(EvalScheme::holdout, 5, 7, 3, cmd);
    auto id = w.engine.submit(m);
    w.engine.execute_async(id, 1);
    for (int i = 0; i < 100 && w.engine.status(id).phase != Phase::running; ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    w.engine.cancel(id);
    for (int i = 0; i < 500 && !is_terminal(w.engine.status(id).phase); ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    auto st = w.engine.status(id);
    EXPECT_EQ(st.phase, Phase::cancelled);
    EXPECT_GT(st.counts()[UnitState::skipped], 0u);
    EXPECT_EQ(st.counts()[UnitState::pending], 0u);
    EXPECT_THROW(w.engine.cancel(id), StateError);
    EXPECT_THROW(w.engine.execute(id, 1), StateError);
}

TEST(Execute, CancelBeforeExecution) {
    World w(small_corpus(1, 2, 20));
    auto id = w.engine.submit(refpipe_manifest(EvalScheme::holdout));
    w.engine.cancel(id);
    auto st = w.engine.status(id);
    EXPECT_EQ(st.phase, Phase::cancelled);
    EXPECT_EQ(st.counts()[UnitState::skipped], 5u);
}

TEST(Execute, StateSurvivesEngineRestart) {
    TempDir t("restart");
    std::string id;
    JobReport rep;
    {
        Engine e(t / "root");
        populate(e, t.path(), small_corpus(1, 2, 30));
        id = e.submit(refpipe_manifest(EvalScheme::holdout));
        rep = e.execute(id, 1);
    }
    Engine again(t / "root");
    auto st = again.status(id);
    EXPECT_EQ(st.phase, Phase::succeeded);
    EXPECT_EQ(st.trial_id, rep.trial_id);
    EXPECT_EQ(st.counts()[UnitState::done], 5u);
    EXPECT_EQ(to_json(again.report(id), false), to_json(rep, false));
    EXPECT_EQ(again.job_manifest(id), refpipe_manifest(EvalScheme::holdout));
    EXPECT_THROW(again.status("job-999999"), NotFound);
    auto next = again.submit(refpipe_manifest(EvalScheme::holdout));
    EXPECT_GT(next, id);
}

TEST(Execute, NotTerminalYet) {
    World w(small_corpus(1, 2, 20));
    auto id = w.engine.submit(refpipe_manifest(EvalScheme::holdout));
    EXPECT_THROW(w.engine.eval_artifact(id, "eval.json"), StateError);
    EXPECT_THROW(w.engine.report(id), StateError);
}

TEST(Execute, ContainerBackendMatchesLocal) {
    TempDir t("ctr");
    EngineOptions opts;
    opts.backend = {BackendKind::container_runtime,
                    {std::string(REPLICA_FIXTURES_DIR) + "/fake_runtime.py", "run", "--rm", "--network=none", "-v",
                     "{DATA_MOUNT}:/data:ro", "-v", "{INPUT_DIR}:/input:ro", "-v", "{SCRATCH_DIR}:/scratch", "-v",
                     "{OUTPUT_DIR}:/output", "{ENV}", "{IMAGE}", "{COMMAND}"},
                    ""};
    Engine ctr(t / "ctr", opts);
    populate(ctr, t / "a", small_corpus(1, 2, 30));
    World local(small_corpus(1, 2, 30));
    auto m = refpipe_manifest(EvalScheme::holdout);
    auto a = ctr.execute(ctr.submit(m), 1);
    auto b = local.engine.execute(local.engine.submit(m), 1);
    ASSERT_EQ(a.phase, Phase::succeeded);
    EXPECT_EQ(to_json(a, false), to_json(b, false));
}
