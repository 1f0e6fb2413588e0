#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gfsl/baselines.hpp"
#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"

using namespace gfsl;

namespace {

SyntheticSpec toy_spec(std::uint64_t seed, double noise = 0.6) {
    SyntheticSpec spec;
    spec.num_domains = 2;
    spec.classes_per_domain = 4;
    spec.instances_per_class = 30;
    spec.feature_dim = 8;
    spec.sigma_noise = noise;
    spec.unseen_val_classes = 2;
    spec.unseen_test_classes = 2;
    spec.aux_fraction = 0.4;
    spec.seed = seed;
    return spec;
}

ModelConfig toy_model_cfg() {
    ModelConfig cfg;
    cfg.input_dim = 8;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 7;
    cfg.dict_size = 4;
    return cfg;
}

TrainConfig proto_cfg(std::uint64_t seed, int batches) {
    TrainConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.queries_per_class = 5;
    cfg.lr = 1e-3;
    cfg.total_batches = batches;
    cfg.val_every = 50;
    cfg.val_tasks = 20;
    cfg.seed = seed;
    return cfg;
}

// Identity-embedding model over raw features, theta set by hand.
ModelState identity_model(const Dataset& ds, const Matrix& theta,
                          const std::vector<int>& seen_ids) {
    ModelState m;
    m.cfg.input_dim = ds.feature_dim;
    m.cfg.embed_dim = ds.feature_dim;
    m.cfg.hidden_dim = 0;
    m.cfg.dict_size = 0;
    m.embed.weights.push_back(Matrix::identity(ds.feature_dim));
    m.embed.biases.push_back(Matrix(1, ds.feature_dim));
    m.theta = theta;
    m.seen_class_ids = seen_ids;
    m.bases = Matrix(0, ds.feature_dim);
    m.proj_u = Matrix::identity(ds.feature_dim);
    m.proj_v = Matrix::identity(ds.feature_dim);
    return m;
}

// Two seen classes at (±5, 0) and two unseen-test classes at (0, ±5), a few
// instances each; features are 2-d and nearly noiseless.
Dataset cross_dataset() {
    Dataset ds;
    ds.feature_dim = 2;
    ds.class_names = {"s0", "s1", "u0", "u1"};
    ds.class_roles = {Role::Seen, Role::Seen, Role::UnseenTest, Role::UnseenTest};
    auto add = [&](const std::string& id, int cls, Split split, double x, double y) {
        Instance in;
        in.id = id;
        in.class_id = cls;
        in.split = split;
        in.features = {x, y};
        ds.instances.push_back(in);
    };
    for (int k = 0; k < 8; ++k) {
        add("s0_t" + std::to_string(k), 0, Split::Train, 5.0, 0.1 * k);
        add("s1_t" + std::to_string(k), 1, Split::Train, -5.0, 0.1 * k);
        add("s0_a" + std::to_string(k), 0, Split::Aux, 5.0, -0.1 * k);
        add("s1_a" + std::to_string(k), 1, Split::Aux, -5.0, -0.1 * k);
        add("u0_" + std::to_string(k), 2, Split::Test, 0.1 * k, 5.0);
        add("u1_" + std::to_string(k), 3, Split::Test, 0.1 * k, -5.0);
    }
    ds.finalize();
    return ds;
}

}  // namespace

TEST_CASE("protonet_train: near-zero noise drives episode accuracy to one") {
    const Dataset ds = gen_synthetic(toy_spec(1, 0.02));
    const ModelState m0 = init_model(toy_model_cfg(), ds, 1);
    const ModelState trained = protonet_train(ds, m0, proto_cfg(1, 100));
    const double acc = nearest_centroid_accuracy(trained, ds, Role::UnseenTest, 1, 2, 50, 5, 9);
    CHECK(acc >= 0.99);
}

TEST_CASE("protonet_train: deterministic under a fixed seed") {
    const Dataset ds = gen_synthetic(toy_spec(2));
    const ModelState m0 = init_model(toy_model_cfg(), ds, 2);
    const ModelState a = protonet_train(ds, m0, proto_cfg(2, 40));
    const ModelState b = protonet_train(ds, m0, proto_cfg(2, 40));
    CHECK(a.embed.weights[0] == b.embed.weights[0]);
    CHECK(a.embed.weights[1] == b.embed.weights[1]);
}

TEST_CASE("mc_proto with lambda 0 trains exactly like protonet") {
    const Dataset ds = gen_synthetic(toy_spec(3));
    const ModelState m0 = init_model(toy_model_cfg(), ds, 3);
    const ModelState proto = protonet_train(ds, m0, proto_cfg(3, 30));
    const ModelState mixed = mcproto_train(ds, m0, proto_cfg(3, 30), 0.0);
    CHECK(proto.embed.weights[0] == mixed.embed.weights[0]);
    CHECK(proto.embed.weights[1] == mixed.embed.weights[1]);
    CHECK(proto.theta == mixed.theta);

    CHECK_THROWS_AS(mcproto_train(ds, m0, proto_cfg(3, 1), 1.5), ConfigError);
}

TEST_CASE("mc_proto with lambda 1 ignores the episodic objective") {
    const Dataset ds = gen_synthetic(toy_spec(4));
    const ModelState m0 = init_model(toy_model_cfg(), ds, 4);
    TrainConfig a_cfg = proto_cfg(4, 30);
    TrainConfig b_cfg = a_cfg;
    b_cfg.queries_per_class = 8;  // changes the episode content only
    const ModelState a = mcproto_train(ds, m0, a_cfg, 1.0);
    const ModelState b = mcproto_train(ds, m0, b_cfg, 1.0);
    // Episode instances differ but their loss weight is zero, so only the
    // rng-identical MC batches shape the parameters.
    CHECK(a.theta == b.theta);
    CHECK(a.embed.weights[0] == b.embed.weights[0]);
}

TEST_CASE("baseline_joint_predict: mc_knn raw head logits swamp the kNN side") {
    const Dataset ds = cross_dataset();
    // An overconfident many-shot head: every unseen query projects strongly
    // onto one of the two columns, the way trained unbounded logits do.
    Matrix theta(2, 2);
    theta(0, 0) = 40.0;
    theta(1, 0) = 30.0;
    theta(0, 1) = 40.0;
    theta(1, 1) = -30.0;
    const ModelState m = identity_model(ds, theta, {0, 1});
    const BaselineModel bm = make_baseline({BaselineTag::McKnn, 0.5, 100}, m, ds, 7);

    const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 2, 5, 3);
    const JointPrediction pred = baseline_joint_predict(bm, ds, task);
    const TaskScores scores = score_task(pred, ds, task);
    for (const InstanceScore& s : scores) {
        CHECK(s.max_unseen <= 1.0);  // within-side softmax stays a probability
        if (!s.seen_role) {
            // The unseen query's best seen logit dwarfs any probability, so
            // the joint prediction lands on a seen class.
            CHECK(s.max_seen > s.max_unseen);
        }
    }
    const TaskMetrics metrics = task_metrics(scores, 0.0);
    CHECK(metrics.acc_unseen_joint == 0.0);
    CHECK(metrics.harmonic == 0.0);
}

TEST_CASE("baseline_joint_predict: proto_proto ties resolve to the lowest class id") {
    const Dataset ds = cross_dataset();
    const ModelState m = identity_model(ds, Matrix(2, 2, {1.0, 1.0, 0.0, 0.0}), {0, 1});
    BaselineModel bm = make_baseline({BaselineTag::ProtoProto, 0.5, 100}, m, ds, 7);

    const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 2, 5, 3);
    // Collapse both seen prototypes onto one support point: the seen side
    // then scores exactly (1/2, 1/2) everywhere and the within-side tie must
    // fall to the lowest class id.
    const Matrix sup = embed(m, ds.gather(task.unseen.support));
    for (int c = 0; c < 2; ++c) {
        for (int j = 0; j < 2; ++j) bm.seen_prototypes(j, c) = sup(0, j);
    }
    const JointPrediction pred = baseline_joint_predict(bm, ds, task);
    const TaskScores scores = score_task(pred, ds, task);
    for (const InstanceScore& s : scores) {
        CHECK(s.max_seen == 0.5);
        CHECK(s.arg_seen == 0);  // lowest seen id among the tied pair
    }
}

TEST_CASE("baseline_joint_predict: hand-set toy matches the closed forms") {
    const Dataset ds = cross_dataset();
    Matrix theta(2, 2);
    theta(0, 0) = 2.0;
    theta(1, 0) = 1.0;
    theta(0, 1) = -1.0;
    theta(1, 1) = 3.0;
    const ModelState m = identity_model(ds, theta, {0, 1});
    const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 2, 5, 3);
    const Matrix sup = embed(m, ds.gather(task.unseen.support));

    for (BaselineTag tag : {BaselineTag::McKnn, BaselineTag::ProtoProto, BaselineTag::McProto}) {
        const BaselineModel bm = make_baseline({tag, 0.5, 100}, m, ds, 7);
        const JointPrediction pred = baseline_joint_predict(bm, ds, task);
        std::vector<std::size_t> test = task.unseen.query;
        test.insert(test.end(), task.seen_query.begin(), task.seen_query.end());

        for (std::size_t r = 0; r < test.size(); ++r) {
            const auto& e = ds.instances[test[r]].features;
            // Unseen side: softmax over negative squared distances to the
            // 1-shot supports (kNN and prototypes coincide at K=1).
            std::vector<double> expect_u(2);
            for (int t = 0; t < 2; ++t) {
                double dist = 0.0;
                for (int j = 0; j < 2; ++j) {
                    const double diff = e[j] - sup(t, j);
                    dist += diff * diff;
                }
                expect_u[t] = -dist;
            }
            softmax_inplace(expect_u);
            for (int t = 0; t < 2; ++t) {
                CHECK(pred.unseen_scores(r, t) == doctest::Approx(expect_u[t]).epsilon(1e-12));
            }

            if (tag == BaselineTag::ProtoProto) {
                std::vector<double> expect_s(2);
                for (int c = 0; c < 2; ++c) {
                    double dist = 0.0;
                    for (int j = 0; j < 2; ++j) {
                        const double diff = e[j] - bm.seen_prototypes(j, c);
                        dist += diff * diff;
                    }
                    expect_s[c] = -dist;
                }
                softmax_inplace(expect_s);
                for (int c = 0; c < 2; ++c) {
                    CHECK(pred.seen_scores(r, c) ==
                          doctest::Approx(expect_s[c]).epsilon(1e-12));
                }
            } else {
                for (int c = 0; c < 2; ++c) {
                    const double logit = e[0] * theta(0, c) + e[1] * theta(1, c);
                    CHECK(pred.seen_scores(r, c) == doctest::Approx(logit).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("proto_proto confidence scales are seen-biased on synthetic data") {
    // The mismatch lives on the distance scale: the best seen prototype sits
    // systematically closer to a test instance than the best one-shot unseen
    // prototype does, because seen prototypes average many training rows.
    const Dataset ds = gen_synthetic(toy_spec(8));
    const ModelState m0 = init_model(toy_model_cfg(), ds, 8);
    const ModelState trained = protonet_train(ds, m0, proto_cfg(8, 150));
    const BaselineModel bm = make_baseline({BaselineTag::ProtoProto, 0.5, 100}, trained, ds, 8);

    double seen_best = 0.0, unseen_best = 0.0;
    int n = 0;
    for (std::uint64_t t = 0; t < 40; ++t) {
        const GfslTask task = sample_gfsl_task(ds, Role::UnseenTest, 1, 2, t, 5);
        const Matrix sup = embed(trained, ds.gather(task.unseen.support));
        std::vector<std::size_t> test = task.unseen.query;
        test.insert(test.end(), task.seen_query.begin(), task.seen_query.end());
        const Matrix emb = embed(trained, ds.gather(test));
        for (std::size_t r = 0; r < emb.rows(); ++r) {
            double best_s = 1e300, best_u = 1e300;
            for (std::size_t c = 0; c < bm.seen_prototypes.cols(); ++c) {
                double dist = 0.0;
                for (std::size_t j = 0; j < emb.cols(); ++j) {
                    const double df = emb(r, j) - bm.seen_prototypes(j, c);
                    dist += df * df;
                }
                best_s = std::min(best_s, dist);
            }
            for (std::size_t c = 0; c < sup.rows(); ++c) {
                double dist = 0.0;
                for (std::size_t j = 0; j < emb.cols(); ++j) {
                    const double df = emb(r, j) - sup(c, j);
                    dist += df * df;
                }
                best_u = std::min(best_u, dist);
            }
            seen_best += best_s;
            unseen_best += best_u;
            ++n;
        }
    }
    // Mean best unseen distance over mean best seen distance, i.e. the seen
    // side is the more confident one before any calibration.
    CHECK(unseen_best / seen_best > 1.0);
}
