#include "gfsl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"

namespace gfsl {

std::string baseline_name(BaselineTag t) {
    switch (t) {
        case BaselineTag::McKnn: return "mc_knn";
        case BaselineTag::ProtoProto: return "proto_proto";
        case BaselineTag::McProto: return "mc_proto";
    }
    return "?";
}

BaselineTag parse_baseline(const std::string& s) {
    if (s == "mc_knn") return BaselineTag::McKnn;
    if (s == "proto_proto") return BaselineTag::ProtoProto;
    if (s == "mc_proto") return BaselineTag::McProto;
    throw ConfigError("unknown baseline '" + s + "'");
}

namespace {

struct EpisodeGrad {
    double loss = 0.0;
    Matrix d_emb;  // gradient on the concatenated support+query embeddings
};

// Soft nearest-neighbor episode loss: CE over -||e_q - p_c||^2 logits.
EpisodeGrad prototype_episode_loss(const Matrix& emb, int way, int shot, int queries,
                                   double weight) {
    const std::size_t d = emb.cols();
    const std::size_t n_support = static_cast<std::size_t>(way) * shot;
    const std::size_t n_query = static_cast<std::size_t>(way) * queries;

    Matrix protos(way, d);
    for (int c = 0; c < way; ++c) {
        for (int k = 0; k < shot; ++k) {
            const auto row = emb.row(static_cast<std::size_t>(c) * shot + k);
            for (std::size_t j = 0; j < d; ++j) protos(c, j) += row[j] / shot;
        }
    }

    EpisodeGrad out;
    out.d_emb = Matrix(emb.rows(), d);
    Matrix d_protos(way, d);
    const double inv = weight / static_cast<double>(n_query);
    std::vector<double> logits(way), dl(way);
    for (std::size_t q = 0; q < n_query; ++q) {
        const auto e = emb.row(n_support + q);
        for (int c = 0; c < way; ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = e[j] - protos(c, j);
                dist += diff * diff;
            }
            logits[c] = -dist;
        }
        const int label = static_cast<int>(q) / queries;
        out.loss += inv * cross_entropy_with_grad(logits, label, dl);
        auto de = out.d_emb.row(n_support + q);
        for (int c = 0; c < way; ++c) {
            const double g = inv * dl[c];
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = e[j] - protos(c, j);
                de[j] += g * (-2.0) * diff;
                d_protos(c, j) += g * 2.0 * diff;
            }
        }
    }
    for (int c = 0; c < way; ++c) {
        for (int k = 0; k < shot; ++k) {
            auto row = out.d_emb.row(static_cast<std::size_t>(c) * shot + k);
            for (std::size_t j = 0; j < d; ++j) row[j] += d_protos(c, j) / shot;
        }
    }
    return out;
}

ModelState episodic_train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg,
                          double lambda, bool with_mc) {
    ModelState model = m0;
    std::vector<Matrix> vel_w, vel_b;
    for (const Matrix& w : model.embed.weights) vel_w.emplace_back(w.rows(), w.cols());
    for (const Matrix& b : model.embed.biases) vel_b.emplace_back(b.rows(), b.cols());
    Matrix vel_theta(model.theta.rows(), model.theta.cols());

    std::vector<std::size_t> train_pool;
    for (int id : model.seen_class_ids) {
        const auto& members = ds.instances_of(id, Split::Train);
        train_pool.insert(train_pool.end(), members.begin(), members.end());
    }

    const auto unseen_val = ds.classes_with_role(Role::UnseenVal);
    const int val_way = std::min<int>(cfg.way, static_cast<int>(unseen_val.size()));

    ModelState best = model;
    double best_val = -1.0;
    int stale = 0;

    for (int b = 0; b < cfg.total_batches; ++b) {
        const double lr = cfg.lr * std::pow(0.5, b / std::max(1, cfg.halve_every));
        Rng rng(Rng::mix(Rng::mix(cfg.seed, 0xef15), b));

        const Episode ep = sample_episode(ds, Role::Seen, cfg.shot, cfg.way,
                                          rng.next_u64(), cfg.queries_per_class);
        std::vector<std::size_t> rows = ep.support;
        rows.insert(rows.end(), ep.query.begin(), ep.query.end());

        EmbedCache cache;
        const Matrix emb = embed_forward(model.embed, ds.gather(rows), &cache);
        EpisodeGrad ep_grad = prototype_episode_loss(emb, ep.way, ep.shot, ep.queries_per_class,
                                                     with_mc ? 1.0 - lambda : 1.0);
        std::vector<Matrix> d_w(vel_w.size()), d_b(vel_b.size());
        for (std::size_t l = 0; l < d_w.size(); ++l) {
            d_w[l] = Matrix(vel_w[l].rows(), vel_w[l].cols());
            d_b[l] = Matrix(1, vel_b[l].cols());
        }
        embed_backward(model.embed, cache, ep_grad.d_emb, d_w, d_b);
        Matrix d_theta(model.theta.rows(), model.theta.cols());
        double loss = ep_grad.loss;

        if (with_mc && lambda > 0.0) {
            std::vector<std::size_t> batch;
            for (int i = 0; i < cfg.eval_batch; ++i) {
                batch.push_back(train_pool[rng.next_index(train_pool.size())]);
            }
            EmbedCache mc_cache;
            const Matrix mc_emb = embed_forward(model.embed, ds.gather(batch), &mc_cache);
            Matrix logits = matmul(mc_emb, model.theta);
            Matrix d_logits(logits.rows(), logits.cols());
            const double inv = lambda / static_cast<double>(logits.rows());
            for (std::size_t r = 0; r < logits.rows(); ++r) {
                const int label = model.column_of(ds.instances[batch[r]].class_id);
                loss += inv * cross_entropy_with_grad(logits.row(r), label, d_logits.row(r));
                for (double& g : d_logits.row(r)) g *= inv;
            }
            d_theta += matmul(transpose(mc_emb), d_logits);
            embed_backward(model.embed, mc_cache, matmul(d_logits, transpose(model.theta)), d_w,
                           d_b);
        }
        if (!std::isfinite(loss)) throw NumericError("episodic training loss went non-finite");

        auto update = [&](Matrix& param, Matrix& vel, const Matrix& grad) {
            for (std::size_t i = 0; i < param.size(); ++i) {
                vel.storage()[i] = cfg.momentum * vel.storage()[i] - lr * grad.storage()[i];
                param.storage()[i] += vel.storage()[i];
            }
        };
        for (std::size_t l = 0; l < d_w.size(); ++l) {
            update(model.embed.weights[l], vel_w[l], d_w[l]);
            update(model.embed.biases[l], vel_b[l], d_b[l]);
        }
        if (with_mc) update(model.theta, vel_theta, d_theta);

        if ((b + 1) % cfg.val_every == 0) {
            const double val = nearest_centroid_accuracy(
                model, ds, Role::UnseenVal, cfg.shot, val_way, std::max(1, cfg.val_tasks / 2),
                cfg.queries_per_class, Rng::mix(cfg.seed, 0xfa7 + b));
            if (val > best_val) {
                best_val = val;
                best = model;
                stale = 0;
            } else if (++stale >= cfg.early_stop_stale) {
                break;
            }
        }
    }
    return best_val >= 0.0 ? best : model;
}

}  // namespace

ModelState protonet_train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg) {
    return episodic_train(ds, m0, cfg, 0.0, false);
}

ModelState mcproto_train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg,
                         double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("mc_proto lambda must lie in [0, 1]");
    }
    return episodic_train(ds, m0, cfg, lambda, true);
}

BaselineModel make_baseline(const BaselineKind& kind, ModelState model, const Dataset& ds,
                            std::uint64_t seed) {
    BaselineModel bm{kind, std::move(model), {}};
    if (kind.tag == BaselineTag::ProtoProto) {
        const std::size_t d = bm.model.cfg.embed_dim;
        bm.seen_prototypes = Matrix(d, bm.model.seen_class_ids.size());
        Rng rng = Rng(seed).stream(0xce);
        for (std::size_t c = 0; c < bm.model.seen_class_ids.size(); ++c) {
            const auto& members = ds.instances_of(bm.model.seen_class_ids[c], Split::Train);
            const std::size_t take =
                std::min<std::size_t>(kind.seen_centroid_samples, members.size());
            std::vector<std::size_t> rows;
            for (std::size_t i : rng.sample_without_replacement(members.size(), take)) {
                rows.push_back(members[i]);
            }
            const Matrix emb = embed(bm.model, ds.gather(rows));
            for (std::size_t r = 0; r < emb.rows(); ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    bm.seen_prototypes(j, c) += emb(r, j) / static_cast<double>(emb.rows());
                }
            }
        }
    }
    return bm;
}

JointPrediction baseline_joint_predict(const BaselineModel& bm, const Dataset& ds,
                                       const GfslTask& task) {
    const ModelState& m = bm.model;
    const std::size_t d = m.cfg.embed_dim;
    const Episode& ep = task.unseen;

    const Matrix sup_emb = embed(m, ds.gather(ep.support));
    std::vector<int> tail_ids;
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
        const int cls = ds.instances[ep.support[i]].class_id;
        if (std::find(tail_ids.begin(), tail_ids.end(), cls) == tail_ids.end()) {
            tail_ids.push_back(cls);
        }
    }
    const int way = static_cast<int>(tail_ids.size());
    Matrix unseen_protos(way, d);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
        const int t = static_cast<int>(i) / ep.shot;
        for (std::size_t j = 0; j < d; ++j) unseen_protos(t, j) += sup_emb(i, j) / ep.shot;
    }

    std::vector<std::size_t> test = ep.query;
    test.insert(test.end(), task.seen_query.begin(), task.seen_query.end());
    const Matrix test_emb = embed(m, ds.gather(test));

    JointPrediction pred;
    pred.seen_class_ids = m.seen_class_ids;
    pred.unseen_class_ids = tail_ids;
    pred.seen_scores = Matrix(test.size(), m.seen_class_ids.size());
    pred.unseen_scores = Matrix(test.size(), way);

    for (std::size_t r = 0; r < test.size(); ++r) {
        const auto e = test_emb.row(r);

        // Unseen side: within-side softmax of negative squared distances,
        // to the nearest support instance (kNN) or to the prototype.
        auto urow = pred.unseen_scores.row(r);
        for (int t = 0; t < way; ++t) {
            double best = std::numeric_limits<double>::infinity();
            if (bm.kind.tag == BaselineTag::McKnn) {
                for (int k = 0; k < ep.shot; ++k) {
                    const auto srow = sup_emb.row(static_cast<std::size_t>(t) * ep.shot + k);
                    double dist = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double diff = e[j] - srow[j];
                        dist += diff * diff;
                    }
                    best = std::min(best, dist);
                }
            } else {
                double dist = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = e[j] - unseen_protos(t, j);
                    dist += diff * diff;
                }
                best = dist;
            }
            urow[t] = -best;
        }
        softmax_inplace(urow);

        auto srow = pred.seen_scores.row(r);
        if (bm.kind.tag == BaselineTag::ProtoProto) {
            for (std::size_t c = 0; c < srow.size(); ++c) {
                double dist = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = e[j] - bm.seen_prototypes(j, c);
                    dist += diff * diff;
                }
                srow[c] = -dist;
            }
            softmax_inplace(srow);
        } else {
            // Raw multi-class logits, the head's native confidence.
            for (std::size_t c = 0; c < srow.size(); ++c) {
                double dp = 0.0;
                for (std::size_t j = 0; j < d; ++j) dp += e[j] * m.theta(j, c);
                srow[c] = dp;
            }
        }
    }
    return pred;
}

TaskPredictor make_baseline_predictor(const BaselineModel& bm, const Dataset& ds) {
    return [&bm, &ds](const GfslTask& task) { return baseline_joint_predict(bm, ds, task); };
}

}  // namespace gfsl
