#include <gtest/gtest.h>

#include "replica/manifest.hpp"
#include "replica/registry.hpp"
#include "replica/rng.hpp"

using namespace replica;

namespace {

const char* kValid = R"({
  "experiment_name": "dropout",
  "image_ref": "local/refpipe:1",
  "stages": [
    {"name": "extract", "command": ["replica-refpipe"], "timeout": 60, "outputs": ["features.csv", "labels.csv"]},
    {"name": "train", "command": ["replica-refpipe"], "timeout": 60, "outputs": ["model.json"]},
    {"name": "test", "command": ["replica-refpipe"], "timeout": 60, "outputs": ["predictions_w*.csv"]},
    {"name": "evaluate", "command": ["replica-refpipe"], "timeout": 60, "outputs": ["eval.csv"]}
  ],
  "dataset": {"kind": "whole_course", "course_id": "c01"},
  "eval": {"scheme": "both", "k": 5},
  "seed": 42,
  "feature_weeks": 3
})";

std::string pick_id(Rng& r) {
    static const std::string chars = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_";
    std::string s = "x";
    for (auto n = r.below(12); n > 0; --n) s += chars[r.below(chars.size())];
    return s;
}

/// Random valid manifest.
JobManifest random_manifest(Rng& r) {
    JobManifest m;
    m.experiment_name = "exp " + pick_id(r) + " \"quoted\" \xc3\xa9";
    m.image_ref = "registry.example/" + pick_id(r) + ":" + std::to_string(r.below(100));
    for (auto st : kStageOrder) {
        StageSpec s;
        s.name = st;
        for (auto n = 1 + r.below(3); n > 0; --n) s.command.push_back(pick_id(r));
        s.timeout_seconds = 0.5 + static_cast<double>(r.below(10000)) / 7.0;
        for (auto n = 1 + r.below(3); n > 0; --n) s.outputs.push_back(pick_id(r) + "/" + pick_id(r) + ".csv");
        m.stages.push_back(std::move(s));
    }
    switch (r.below(3)) {
    case 0: m.dataset_selector = {SelectorKind::all_courses, std::nullopt, std::nullopt}; break;
    case 1: m.dataset_selector = {SelectorKind::whole_course, pick_id(r), std::nullopt}; break;
    default: m.dataset_selector = {SelectorKind::single_session, pick_id(r), pick_id(r)}; break;
    }
    m.eval_config.scheme = static_cast<EvalScheme>(r.below(3));
    m.eval_config.k = 2 + static_cast<unsigned>(r.below(20));
    m.eval_config.ci_level = 0.5 + 0.49 * r.uniform();
    m.eval_config.cv_aggregation = r.bernoulli(0.5) ? CvAggregation::pooled : CvAggregation::fold_mean;
    m.seed = r.next();
    m.feature_weeks = 1 + static_cast<unsigned>(r.below(10));
    return m;
}

struct FakeRegistry {
    std::vector<Course> list;
    std::vector<Course> courses() const { return list; }
    const Course* find_course(std::string_view id) const {
        for (const auto& c : list)
            if (c.course_id == id) return &c;
        return nullptr;
    }
};

Session session(std::string id, std::string date, int weeks, std::uint64_t learners) {
    Session s;
    s.session_id = std::move(id);
    s.start_date = parse_date(date);
    s.num_weeks = weeks;
    s.num_learners = learners;
    return s;
}

FakeRegistry fake_registry() {
    FakeRegistry reg;
    reg.list.push_back({"c01", "replica-events/1",
                        {session("s1", "2013-01-07", 6, 100), session("s2", "2013-07-08", 6, 100),
                         session("s3", "2014-01-06", 6, 100)}});
    reg.list.push_back({"c02", "replica-events/1", {session("s1", "2013-03-04", 6, 3)}});
    return reg;
}

} // namespace

TEST(Manifest, ParsesValidDocument) {
    auto m = parse_manifest(kValid);
    EXPECT_EQ(m.experiment_name, "dropout");
    EXPECT_EQ(m.stages.size(), 4u);
    EXPECT_EQ(m.stage(StageName::test).outputs, std::vector<std::string>{"predictions_w*.csv"});
    EXPECT_EQ(m.eval_config.scheme, EvalScheme::both);
    EXPECT_EQ(m.eval_config.k, 5u);
    EXPECT_DOUBLE_EQ(m.eval_config.ci_level, 0.95);
    EXPECT_EQ(m.seed, 42u);
}

TEST(Manifest, RejectsUnknownFieldsAndBadValues) {
    auto doc = json::parse(kValid);
    auto expect_error = [&](json d, const std::string& fragment) {
        try {
            manifest_from_json(d);
            ADD_FAILURE() << "accepted: " << d.dump();
        } catch (const ManifestError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    auto d = doc;
    d["extra"] = 1;
    expect_error(d, "unknown field");
    d = doc;
    d["eval"]["weird"] = true;
    expect_error(d, "unknown field");
    d = doc;
    std::swap(d["stages"][0], d["stages"][1]);
    expect_error(d, "stage order violation");
    d = doc;
    d["stages"][1]["timeout"] = 0;
    expect_error(d, "timeout");
    d = doc;
    d["stages"][0]["outputs"] = {"../escape.csv"};
    expect_error(d, "output path not allowed");
    d = doc;
    d["eval"]["k"] = 1;
    expect_error(d, "k must be >= 2");
    d = doc;
    d["dataset"] = {{"kind", "single_session"}, {"course_id", "c01"}};
    expect_error(d, "single_session");
    d = doc;
    d["seed"] = -1;
    expect_error(d, "seed");
    EXPECT_THROW(parse_manifest("{\"experiment_name\": "), ManifestError);
}

TEST(Manifest, RoundTripProperty) {
    Rng r(20240601);
    for (int i = 0; i < 300; ++i) {
        auto m = random_manifest(r);
        ASSERT_NO_THROW(check_manifest_invariants(m));
        auto back = parse_manifest(render(m));
        ASSERT_EQ(back, m) << render(m);
        ASSERT_EQ(canonicalize(back), canonicalize(m));
        ASSERT_EQ(parse_manifest(canonicalize(m)), m);
    }
}

TEST(Manifest, EverySingleFieldMutationChangesDigest) {
    Rng r(99);
    for (int i = 0; i < 50; ++i) {
        auto m = random_manifest(r);
        auto base = manifest_digest(m);
        std::vector<JobManifest> variants(9, m);
        variants[0].experiment_name += "!";
        variants[1].image_ref += "x";
        variants[2].stages[1].command.push_back("--flag");
        variants[3].stages[2].timeout_seconds += 1;
        variants[4].stages[3].outputs.push_back("more.csv");
        variants[5].eval_config.k += 1;
        variants[6].seed ^= 1;
        variants[7].feature_weeks += 1;
        variants[8].eval_config.cv_aggregation = m.eval_config.cv_aggregation == CvAggregation::pooled
                                                     ? CvAggregation::fold_mean
                                                     : CvAggregation::pooled;
        for (const auto& v : variants) EXPECT_NE(manifest_digest(v), base);
    }
}

TEST(Manifest, CanonicalFormIsKeyOrderIndependent) {
    auto a = parse_manifest(kValid);
    auto doc = json::parse(kValid);
    std::string reordered = "{\"seed\":42,\"feature_weeks\":3,\"eval\":" + doc["eval"].dump() +
                            ",\"dataset\":" + doc["dataset"].dump() + ",\"stages\":" + doc["stages"].dump() +
                            ",\"image_ref\":\"local/refpipe:1\",\"experiment_name\":\"dropout\"}";
    EXPECT_EQ(canonicalize(parse_manifest(reordered)), canonicalize(a));
}

TEST(Manifest, OverridesApplyAndRevalidate) {
    auto m = parse_manifest(kValid);
    auto o = apply_overrides(m, {"seed=7", "eval.scheme=holdout", "dataset.course_id=c02"});
    EXPECT_EQ(o.seed, 7u);
    EXPECT_EQ(o.eval_config.scheme, EvalScheme::holdout);
    EXPECT_EQ(*o.dataset_selector.course_id, "c02");
    EXPECT_THROW(apply_overrides(m, {"nonsense"}), ManifestError);
    EXPECT_THROW(apply_overrides(m, {"eval.k=1"}), ManifestError);
    EXPECT_THROW(apply_overrides(m, {"bogus.deep=1"}), ManifestError);
    EXPECT_THROW(apply_overrides(m, {"extra=1"}), ManifestError);
}

TEST(Validation, HoldoutNeedsTwoSessions) {
    auto reg = fake_registry();
    auto m = parse_manifest(kValid);
    m.eval_config.scheme = EvalScheme::holdout;
    EXPECT_TRUE(validate_manifest(m, reg).ok());
    m.dataset_selector = {SelectorKind::whole_course, "c02", std::nullopt};
    auto rep = validate_manifest(m, reg);
    EXPECT_FALSE(rep.ok());
    ASSERT_EQ(rep.error_count(), 1u);
    EXPECT_NE(rep.items[0].message.find("holdout requires >=2 sessions"), std::string::npos);
}

TEST(Validation, UnknownCourseAndSession) {
    auto reg = fake_registry();
    auto m = parse_manifest(kValid);
    m.dataset_selector = {SelectorKind::whole_course, "c99", std::nullopt};
    auto rep = validate_manifest(m, reg);
    ASSERT_FALSE(rep.ok());
    EXPECT_EQ(rep.items[0].message, "unknown course \"c99\"");
    m.eval_config.scheme = EvalScheme::cross_validation;
    m.dataset_selector = {SelectorKind::single_session, "c01", "s9"};
    EXPECT_FALSE(validate_manifest(m, reg).ok());
}

TEST(Validation, KAboveLearnersWarnsOnly) {
    auto reg = fake_registry();
    auto m = parse_manifest(kValid);
    m.eval_config.scheme = EvalScheme::cross_validation;
    m.dataset_selector = {SelectorKind::single_session, "c02", "s1"};
    auto rep = validate_manifest(m, reg);
    EXPECT_TRUE(rep.ok());
    ASSERT_EQ(rep.items.size(), 1u);
    EXPECT_EQ(rep.items[0].severity, Severity::warning);
}

TEST(Validation, FeatureWeeksMustLeaveALabelWeek) {
    auto reg = fake_registry();
    auto m = parse_manifest(kValid);
    m.feature_weeks = 6;
    EXPECT_FALSE(validate_manifest(m, reg).ok());
    m.feature_weeks = 5;
    EXPECT_TRUE(validate_manifest(m, reg).ok());
}
