#include <gtest/gtest.h>

#include "replica/provenance.hpp"
#include "replica/tar.hpp"
#include "support.hpp"

using namespace replica;
using testing_support::TempDir;

TEST(Keys, CacheKeyFixture) {
    // Independent computation of the length-prefixed layout.
    EXPECT_EQ(cache_key(StageName::train, sha256_hex("manifest"), {sha256_hex("a"), sha256_hex("b")}, 42),
              "b0a9f397bb272b34a92336156e815bc620ec690818fdea9a077984726803aa81");
}

TEST(Keys, TrialIdFixture) {
    EXPECT_EQ(compute_trial_id("{\"x\":1}", "img:1", {sha256_hex("d1"), sha256_hex("d2")}, "replica/0.1.0"),
              "ad34f8c0342c92b67de6745d087e7432e20963f24bab2f2e05c953ce63e36b9d");
}

TEST(Keys, EveryInputChangesTheCacheKey) {
    auto m = sha256_hex("m");
    std::vector<std::string> in{sha256_hex("a")};
    auto base = cache_key(StageName::test, m, in, 1);
    EXPECT_NE(cache_key(StageName::train, m, in, 1), base);
    EXPECT_NE(cache_key(StageName::test, sha256_hex("n"), in, 1), base);
    EXPECT_NE(cache_key(StageName::test, m, {sha256_hex("b")}, 1), base);
    EXPECT_NE(cache_key(StageName::test, m, {sha256_hex("a"), sha256_hex("a")}, 1), base);
    EXPECT_NE(cache_key(StageName::test, m, in, 2), base);
    EXPECT_EQ(cache_key(StageName::test, m, in, 1), base);
}

TEST(BlobStore, PutGetAndVerify) {
    TempDir t("blob");
    BlobStore b(t / "objects");
    auto d = b.put_bytes("hello");
    EXPECT_EQ(d, sha256_hex("hello"));
    EXPECT_TRUE(b.has(d));
    EXPECT_EQ(b.get(d), "hello");
    EXPECT_EQ(b.put_bytes("hello"), d);
    write_file_atomic(t / "f.txt", "file body");
    EXPECT_EQ(b.put_file(t / "f.txt"), sha256_hex("file body"));

    // Corrupt the stored object: reads must notice.
    auto p = b.path(d);
    fs::permissions(p, fs::perms::owner_write, fs::perm_options::add);
    write_file_atomic(p, "HELLO");
    EXPECT_THROW(b.get(d), IntegrityError);
    EXPECT_THROW(b.get(sha256_hex("absent")), NotFound);
}

TEST(Cache, PutIsIdempotentAndConflictsThrow) {
    TempDir t("cache");
    Cache c(t / "cache");
    auto key = sha256_hex("k");
    EXPECT_FALSE(c.get(key));
    CacheEntry e{key, {{"model.json", sha256_hex("m")}}, "2024-01-01T00:00:00Z", 10, sha256_hex("log"), {}};
    c.put(key, e);
    auto again = e;
    again.created_at = "2025-01-01T00:00:00Z";
    again.log_digest = sha256_hex("other log");
    EXPECT_NO_THROW(c.put(key, again));
    EXPECT_EQ(c.get(key)->created_at, e.created_at);
    auto conflict = e;
    conflict.output_digests["model.json"] = sha256_hex("different");
    try {
        c.put(key, conflict);
        FAIL();
    } catch (const IntegrityError& ex) {
        EXPECT_NE(std::string(ex.what()).find("cache conflict for key"), std::string::npos);
    }
    auto denied = e;
    denied.denied.push_back({"raw.dat", "not allowlisted"});
    EXPECT_EQ(cache_entry_from_json(to_json(denied)).denied, denied.denied);
}

namespace {

/// A store holding one recorded trial with two units and an eval report.
struct Recorded {
    TempDir dir{"prov"};
    ProvenanceStore store{dir / "store"};
    JobManifest manifest = testing_support::refpipe_manifest(EvalScheme::holdout);
    TrialRecord record;

    TrialInput input() {
        TrialInput in;
        in.job_id = "job-000001";
        in.succeeded = true;
        in.registry_digests = {sha256_hex("events-s1"), sha256_hex("events-s2")};
        in.stage_digests["c01/extract-s1"]["features.csv"] = store.blobs().put_bytes("f1");
        in.stage_digests["c01/train-holdout"]["model.json"] = store.blobs().put_bytes("{\"w\":[1]}");
        in.eval_digests["eval.json"] = store.blobs().put_bytes("{\"aggregate\":{\"pooled\":null}}");
        in.eval_digests["eval.csv"] = store.blobs().put_bytes("course_id,week,scheme,auc,ci_lo,ci_hi\n");
        return in;
    }

    Recorded() { record = store.record_trial(input(), manifest); }
};

std::string with_entry(const std::string& archive, const std::string& name, const std::string& data) {
    auto entries = tar::read(archive);
    bool replaced = false;
    for (auto& e : entries)
        if (e.name == name) {
            e.data = data;
            replaced = true;
        }
    if (!replaced) entries.push_back({name, data});
    return tar::write(entries);
}

} // namespace

TEST(Provenance, RecordTrialIsDeterministicAndIdempotent) {
    Recorded r;
    EXPECT_EQ(r.record.trial_id, compute_trial_id(canonicalize(r.manifest), r.manifest.image_ref,
                                                  {sha256_hex("events-s1"), sha256_hex("events-s2")}));
    EXPECT_EQ(r.record.manifest_digest, manifest_digest(r.manifest));
    EXPECT_EQ(r.record.eval_digest, r.record.eval_digests.at("eval.json"));
    auto again = r.store.record_trial(r.input(), r.manifest);
    EXPECT_EQ(again, r.record);
    EXPECT_EQ(r.store.ledger().size(), 1u);
    EXPECT_EQ(r.store.trial(r.record.trial_id), r.record);
    EXPECT_EQ(r.store.trial_manifest(r.record), r.manifest);

    auto failed = r.input();
    failed.succeeded = false;
    EXPECT_THROW(r.store.record_trial(failed, r.manifest), StateError);
    EXPECT_THROW(r.store.trial(sha256_hex("nope")), NotFound);

    auto self_parent = r.input();
    self_parent.parent_trial_id = r.record.trial_id;
    EXPECT_FALSE(r.store.record_trial(self_parent, r.manifest).parent_trial_id);
}

TEST(Provenance, DifferentOutputsForSameTrialIdAreRejected) {
    Recorded r;
    auto in = r.input();
    in.stage_digests["c01/train-holdout"]["model.json"] = r.store.blobs().put_bytes("{\"w\":[2]}");
    EXPECT_THROW(r.store.record_trial(in, r.manifest), IntegrityError);
    EXPECT_EQ(r.store.ledger().size(), 1u);
}

TEST(Provenance, BundleRoundTripIntoFreshStore) {
    Recorded r;
    auto bundle = r.store.export_bundle(r.record.trial_id);
    EXPECT_EQ(bundle, r.store.export_bundle(r.record.trial_id));
    auto names = tar::read(bundle);
    std::vector<std::string> got;
    for (const auto& e : names) got.push_back(e.name);
    EXPECT_EQ(got, (std::vector<std::string>{"eval/eval.csv", "eval/eval.json", "manifest.json",
                                             "outputs/c01/extract-s1/features.csv",
                                             "outputs/c01/train-holdout/model.json", "trial.json"}));

    TempDir other("prov2");
    ProvenanceStore fresh(other / "store");
    auto imp = fresh.import_bundle(bundle);
    EXPECT_EQ(imp.record, r.record);
    EXPECT_EQ(imp.bundle_digest, sha256_hex(bundle));
    EXPECT_EQ(fresh.blobs().get(r.record.stage_digests.at("c01/train-holdout").at("model.json")), "{\"w\":[1]}");
    EXPECT_EQ(fresh.export_bundle(r.record.trial_id), bundle);
    EXPECT_NO_THROW(fresh.import_bundle(bundle));
    EXPECT_EQ(fresh.ledger().size(), 1u);
}

TEST(Provenance, TamperedBundleNamesTheFailingPath) {
    Recorded r;
    auto bundle = r.store.export_bundle(r.record.trial_id);
    auto expect = [&](const std::string& archive, const std::string& fragment) {
        TempDir other("prov3");
        ProvenanceStore fresh(other / "store");
        try {
            fresh.import_bundle(archive);
            ADD_FAILURE() << "accepted tampered bundle (" << fragment << ")";
        } catch (const IntegrityError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
        EXPECT_TRUE(fresh.ledger().empty());
    };
    expect(with_entry(bundle, "outputs/c01/train-holdout/model.json", "{\"w\":[9]}"),
           "digest mismatch: outputs/c01/train-holdout/model.json");
    expect(with_entry(bundle, "eval/eval.csv", "x"), "digest mismatch: eval/eval.csv");
    expect(with_entry(bundle, "extra.txt", "x"), "unexpected bundle entry: extra.txt");

    auto trial = json::parse(tar::read(bundle).back().data);
    trial["image_ref"] = "other:1";
    expect(with_entry(bundle, "trial.json", trial.dump()), "image_ref");
    trial = json::parse(tar::read(bundle).back().data);
    trial["registry_digests"][0] = sha256_hex("forged");
    expect(with_entry(bundle, "trial.json", trial.dump()), "trial_id does not match");

    auto entries = tar::read(bundle);
    std::erase_if(entries, [](const tar::Entry& e) { return e.name == "eval/eval.json"; });
    expect(tar::write(entries), "bundle missing eval/eval.json");
    auto raw = bundle;
    raw[100] ^= 1; // header checksum no longer matches
    expect(raw, "");
}

TEST(Provenance, CompareTrials) {
    Recorded r;
    auto m2 = r.manifest;
    m2.seed = 99;
    auto in = r.input();
    in.stage_digests["c01/train-holdout"]["model.json"] = r.store.blobs().put_bytes("{\"w\":[3]}");
    auto other = r.store.record_trial(in, m2);
    auto cmp = compare_trials(r.store, r.record.trial_id, other.trial_id);
    EXPECT_FALSE(cmp["same_trial"].get<bool>());
    EXPECT_EQ(cmp["units_identical"], 1);
    EXPECT_EQ(cmp["units_differing"], json::array({"c01/train-holdout"}));
    ASSERT_EQ(cmp["manifest_diff"].size(), 1u);
    EXPECT_EQ(cmp["manifest_diff"][0]["path"], "/seed");
    EXPECT_TRUE(cmp["eval_identical"].get<bool>());
}
