#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gfsl/dataset.hpp"
#include "gfsl/errors.hpp"
#include "gfsl/rng.hpp"
#include "support/oracles.hpp"

using namespace gfsl;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

SyntheticSpec small_spec(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_domains = 2;
    spec.classes_per_domain = 5;
    spec.instances_per_class = 20;
    spec.feature_dim = 8;
    spec.unseen_val_classes = 2;
    spec.unseen_test_classes = 3;
    spec.aux_fraction = 0.45;  // 9 aux x 5 seen classes = 45, enough for 3-way tasks
    spec.seed = seed;
    return spec;
}

}  // namespace

TEST_CASE("load_dataset: minimal two-class file") {
    const std::string path = temp_path("gfsl_minimal.jsonl");
    std::ofstream out(path);
    out << R"({"feature_dim": 2, "roles": {"a": "seen", "b": "seen"}})" << "\n";
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < 3; ++i) {
            out << R"({"id": ")" << c << "_" << i << R"(", "class": ")" << (c == 0 ? "a" : "b")
                << R"(", "domain": null, "split": "train", "features": [0.5, -1.5]})" << "\n";
        }
    }
    out.close();
    const Dataset ds = load_dataset(path);
    CHECK(ds.classes_with_role(Role::Seen).size() == 2);
    CHECK(ds.classes_with_role(Role::UnseenTest).empty());
    CHECK(ds.instances.size() == 6);
}

TEST_CASE("load_dataset: unseen class with seen-style split is rejected") {
    const std::string path = temp_path("gfsl_bad_role.jsonl");
    std::ofstream out(path);
    out << R"({"feature_dim": 1, "roles": {"a": "seen", "b": "unseen_test"}})" << "\n";
    out << R"({"id": "x", "class": "a", "domain": null, "split": "train", "features": [1]})" << "\n";
    out << R"({"id": "y", "class": "b", "domain": null, "split": "train", "features": [2]})" << "\n";
    out.close();
    CHECK_THROWS_AS(load_dataset(path), ValidationError);
}

TEST_CASE("load_dataset: malformed record names the line") {
    const std::string path = temp_path("gfsl_bad_json.jsonl");
    std::ofstream out(path);
    out << R"({"feature_dim": 1, "roles": {"a": "seen"}})" << "\n";
    out << R"({"id": "x", "class": "a")" << "\n";  // truncated
    out.close();
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains(":2"), ParseError);
}

TEST_CASE("load_dataset: benchmark-style role partition 64/16/20") {
    const std::string path = temp_path("gfsl_bench.jsonl");
    std::ofstream out(path);
    out << R"({"feature_dim": 1, "roles": {)";
    for (int c = 0; c < 100; ++c) {
        out << "\"c" << (c < 10 ? "0" : "") << c << "\": "
            << (c < 64 ? R"("seen")" : c < 80 ? R"("unseen_val")" : R"("unseen_test")")
            << (c + 1 < 100 ? ", " : "");
    }
    out << "}}\n";
    for (int c = 0; c < 100; ++c) {
        const char* split = c < 64 ? "train" : c < 80 ? "val" : "test";
        out << R"({"id": "i)" << c << R"(", "class": "c)" << (c < 10 ? "0" : "") << c
            << R"(", "domain": null, "split": ")" << split << R"(", "features": [0]})" << "\n";
    }
    out.close();
    const Dataset ds = load_dataset(path);
    CHECK(ds.classes_with_role(Role::Seen).size() == 64);
    CHECK(ds.classes_with_role(Role::UnseenVal).size() == 16);
    CHECK(ds.classes_with_role(Role::UnseenTest).size() == 20);
}

TEST_CASE("gen_synthetic: zero-noise limit collapses classes to their mean") {
    SyntheticSpec spec;
    spec.num_domains = 1;
    spec.classes_per_domain = 2;
    spec.instances_per_class = 4;
    spec.feature_dim = 3;
    spec.sigma_noise = 0.0;
    spec.unseen_val_classes = 0;
    spec.unseen_test_classes = 0;
    spec.aux_fraction = 0.0;
    spec.seed = 9;
    const Dataset ds = gen_synthetic(spec);
    for (int c = 0; c < 2; ++c) {
        const auto& members = ds.instances_of(c, Split::Train);
        REQUIRE(members.size() == 4);
        for (std::size_t i : members) {
            CHECK(ds.instances[i].features == ds.instances[members.front()].features);
        }
    }
}

TEST_CASE("gen_synthetic: layout and byte-identical determinism") {
    SyntheticSpec spec;  // defaults: 5 domains x 8 classes x 60, 25/5/10 roles
    spec.seed = 42;
    const Dataset ds = gen_synthetic(spec);
    CHECK(ds.class_count() == 40);
    CHECK(ds.classes_with_role(Role::Seen).size() == 25);
    CHECK(ds.classes_with_role(Role::UnseenVal).size() == 5);
    CHECK(ds.classes_with_role(Role::UnseenTest).size() == 10);
    CHECK(ds.aux_pool().size() == 25 * 15);

    // Every role spans every domain.
    for (Role role : {Role::Seen, Role::UnseenVal, Role::UnseenTest}) {
        std::set<int> domains;
        for (int c : ds.classes_with_role(role)) {
            const Split split = role == Role::Seen ? Split::Train
                                : role == Role::UnseenVal ? Split::Val
                                                          : Split::Test;
            domains.insert(ds.instances[ds.instances_of(c, split).front()].domain_id);
        }
        CHECK(domains.size() == 5);
    }

    const std::string p1 = temp_path("gfsl_det1.jsonl"), p2 = temp_path("gfsl_det2.jsonl");
    save_dataset(ds, p1);
    save_dataset(gen_synthetic(spec), p2);
    CHECK(file_bytes(p1) == file_bytes(p2));

    // Round trip through the file preserves the dataset.
    const Dataset back = load_dataset(p1);
    CHECK(back.instances.size() == ds.instances.size());
    CHECK(back.instances[100].features == ds.instances[100].features);
}

TEST_CASE("gen_synthetic separability supports a near-perfect mean oracle") {
    SyntheticSpec spec;  // sigma_class = 1.5 >> sigma_noise = 0.6
    spec.seed = 7;
    const Dataset ds = gen_synthetic(spec);
    CHECK(testsupport::nearest_class_mean_accuracy(ds) >= 0.99);
}

TEST_CASE("sample_episode: sizes, grouping and determinism") {
    const Dataset ds = gen_synthetic(small_spec(1));
    const Episode ep = sample_episode(ds, Role::UnseenTest, 1, 3, 77);
    CHECK(ep.support.size() == 3);
    CHECK(ep.query.size() == 45);
    CHECK(ep.class_ids.size() == 3);
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
        CHECK(ds.instances[ep.query[q]].class_id == ep.class_ids[q / 15]);
    }

    const Episode again = sample_episode(ds, Role::UnseenTest, 1, 3, 77);
    CHECK(again.support == ep.support);
    CHECK(again.query == ep.query);
    const Episode other = sample_episode(ds, Role::UnseenTest, 1, 3, 78);
    CHECK(other.support != ep.support);
}

TEST_CASE("sample_episode: exhaustive case uses every instance once") {
    const Dataset ds = gen_synthetic(small_spec(2));
    // 3 unseen-test classes with 20 instances each: way 3, shot 5, 15 queries.
    const Episode ep = sample_episode(ds, Role::UnseenTest, 5, 3, 4);
    std::set<std::size_t> used(ep.support.begin(), ep.support.end());
    used.insert(ep.query.begin(), ep.query.end());
    CHECK(used.size() == 60);
}

TEST_CASE("sample_episode: capacity errors") {
    const Dataset ds = gen_synthetic(small_spec(3));
    CHECK_THROWS_AS(sample_episode(ds, Role::UnseenTest, 1, 4, 5), CapacityError);
    CHECK_THROWS_AS(sample_episode(ds, Role::UnseenTest, 6, 3, 5), CapacityError);
}

TEST_CASE("sample_gfsl_task: counts, aux-only seen queries, determinism") {
    const Dataset ds = gen_synthetic(small_spec(4));
    const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 3, 99);
    CHECK(task.unseen.support.size() == 3);
    CHECK(task.unseen.query.size() == 45);
    CHECK(task.seen_query.size() == 45);
    for (std::size_t i : task.seen_query) {
        CHECK(ds.instances[i].split == Split::Aux);
    }
    const GfslTask again = sample_gfsl_task(ds, Role::UnseenTest, 1, 3, 99);
    CHECK(again.unseen.support == task.unseen.support);
    CHECK(again.seen_query == task.seen_query);
}

TEST_CASE("sample_gfsl_task: whole unseen pool as ways") {
    const Dataset ds = gen_synthetic(small_spec(5));
    const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 3, 6);
    std::set<int> classes(task.unseen.class_ids.begin(), task.unseen.class_ids.end());
    CHECK(classes.size() == 3);  // |U_test| = 3, all of them
}

TEST_CASE("sample_gfsl_task: single-domain restriction") {
    SyntheticSpec spec = small_spec(6);
    spec.num_domains = 2;
    spec.classes_per_domain = 6;
    spec.unseen_val_classes = 2;
    spec.unseen_test_classes = 4;  // 2 per domain
    const Dataset ds = gen_synthetic(spec);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 2, seed, 15, true);
        REQUIRE(task.domain_id >= 0);
        for (std::size_t i : task.unseen.support) {
            CHECK(ds.instances[i].domain_id == task.domain_id);
        }
    }
}

TEST_CASE("support and query never share an instance") {
    const Dataset ds = gen_synthetic(small_spec(8));
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const GfslTask task = sample_gfsl_task(ds, Role::UnseenVal, 2, 2, seed, 5);
        std::set<std::size_t> support(task.unseen.support.begin(), task.unseen.support.end());
        for (std::size_t q : task.unseen.query) CHECK(support.count(q) == 0);
    }
}
