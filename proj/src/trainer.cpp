#include "gfsl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>

#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"

namespace gfsl {

ModelGrads zero_grads(const ModelState& m) {
    ModelGrads g;
    for (const Matrix& w : m.embed.weights) g.embed_w.emplace_back(w.rows(), w.cols());
    for (const Matrix& b : m.embed.biases) g.embed_b.emplace_back(b.rows(), b.cols());
    g.theta = Matrix(m.theta.rows(), m.theta.cols());
    g.bases = Matrix(m.bases.rows(), m.bases.cols());
    g.proj_u = Matrix(m.proj_u.rows(), m.proj_u.cols());
    g.proj_v = Matrix(m.proj_v.rows(), m.proj_v.cols());
    return g;
}

namespace {

template <typename Fn>
void for_each_block(ModelGrads& g, Fn&& fn) {
    for (Matrix& w : g.embed_w) fn(w);
    for (Matrix& b : g.embed_b) fn(b);
    fn(g.theta);
    fn(g.bases);
    fn(g.proj_u);
    fn(g.proj_v);
}

}  // namespace

double grads_global_norm(const ModelGrads& g) {
    double sq = 0.0;
    for_each_block(const_cast<ModelGrads&>(g), [&](Matrix& m) {
        for (double v : m.storage()) sq += v * v;
    });
    return std::sqrt(sq);
}

MulticlassBatch build_multiclassifier_batch(const Dataset& ds, const ModelState& m,
                                            const TrainConfig& cfg, std::uint64_t seed) {
    const int seen = m.seen_count();
    if (cfg.way < 1 || cfg.way > cfg.pool_way || cfg.pool_way > seen) {
        throw CapacityError("multiclassifier batch needs way <= pool_way <= seen classes (" +
                            std::to_string(cfg.way) + " <= " + std::to_string(cfg.pool_way) +
                            " <= " + std::to_string(seen) + ")");
    }
    if (cfg.classifiers_per_batch < 1 || cfg.eval_batch < 1 || cfg.shot < 1) {
        throw CapacityError("multiclassifier batch needs Z, eval batch and shot >= 1");
    }

    std::vector<int> eligible;
    for (int id : m.seen_class_ids) {
        if (ds.instances_of(id, Split::Train).size() >= static_cast<std::size_t>(cfg.shot)) {
            eligible.push_back(id);
        }
    }
    if (eligible.size() < static_cast<std::size_t>(cfg.pool_way)) {
        throw CapacityError("only " + std::to_string(eligible.size()) + " seen classes hold " +
                            std::to_string(cfg.shot) + " meta-train instances; pool needs " +
                            std::to_string(cfg.pool_way));
    }

    Rng root(seed);
    Rng class_rng = root.stream(1);
    Rng support_rng = root.stream(2);
    Rng part_rng = root.stream(3);
    Rng eval_rng = root.stream(4);

    MulticlassBatch batch;
    for (std::size_t i : class_rng.sample_without_replacement(eligible.size(), cfg.pool_way)) {
        batch.pool_class_ids.push_back(eligible[i]);
    }
    for (int id : batch.pool_class_ids) {
        const auto& members = ds.instances_of(id, Split::Train);
        for (std::size_t i : support_rng.sample_without_replacement(members.size(), cfg.shot)) {
            batch.pool_instances.push_back(members[i]);
        }
    }

    std::map<int, std::vector<int>> by_domain;  // domain -> local pool class indices
    if (cfg.domain_fake_tasks) {
        for (int c = 0; c < cfg.pool_way; ++c) {
            const auto& members = ds.instances_of(batch.pool_class_ids[c], Split::Train);
            by_domain[ds.instances[members.front()].domain_id].push_back(c);
        }
        std::erase_if(by_domain, [&](const auto& kv) {
            return kv.second.size() < static_cast<std::size_t>(cfg.way);
        });
        if (by_domain.empty()) {
            throw CapacityError("no domain contributes " + std::to_string(cfg.way) +
                                " pool classes for domain-restricted fake tasks");
        }
    }

    for (int z = 0; z < cfg.classifiers_per_batch; ++z) {
        std::vector<int> part;
        if (cfg.domain_fake_tasks) {
            auto it = by_domain.begin();
            std::advance(it, part_rng.next_index(by_domain.size()));
            const std::vector<int>& pool = it->second;
            for (std::size_t i : part_rng.sample_without_replacement(pool.size(), cfg.way)) {
                part.push_back(pool[i]);
            }
        } else {
            for (std::size_t i : part_rng.sample_without_replacement(cfg.pool_way, cfg.way)) {
                part.push_back(static_cast<int>(i));
            }
        }
        batch.partitions.push_back(std::move(part));
    }

    std::vector<std::size_t> train_pool;
    for (int id : m.seen_class_ids) {
        const auto& members = ds.instances_of(id, Split::Train);
        train_pool.insert(train_pool.end(), members.begin(), members.end());
    }
    if (train_pool.size() >= static_cast<std::size_t>(cfg.eval_batch)) {
        for (std::size_t i :
             eval_rng.sample_without_replacement(train_pool.size(), cfg.eval_batch)) {
            batch.eval_instances.push_back(train_pool[i]);
        }
    } else {
        for (int i = 0; i < cfg.eval_batch; ++i) {
            batch.eval_instances.push_back(train_pool[eval_rng.next_index(train_pool.size())]);
        }
    }
    for (std::size_t idx : batch.eval_instances) {
        batch.eval_labels.push_back(m.column_of(ds.instances[idx].class_id));
    }
    return batch;
}

namespace {

// Routes one dictionary-row gradient to the parameter block the row came from.
struct RowRouter {
    Matrix* shared;                      // grads.bases
    Matrix* d_protos;                    // N x d, tail-prototype rows
    Matrix* d_theta;                     // d x |S|
    const std::vector<int>* head_cols;   // base head-row index -> theta column
    std::size_t n_shared = 0;
    std::size_t n_tails = 0;

    void add(std::size_t row, std::span<const double> db) const {
        if (row < n_shared) {
            auto dst = shared->row(row);
            for (std::size_t j = 0; j < db.size(); ++j) dst[j] += db[j];
        } else if (row < n_shared + n_tails) {
            auto dst = d_protos->row(row - n_shared);
            for (std::size_t j = 0; j < db.size(); ++j) dst[j] += db[j];
        } else {
            const int col = (*head_cols)[row - n_shared - n_tails];
            for (std::size_t j = 0; j < db.size(); ++j) (*d_theta)(j, col) += db[j];
        }
    }
};

// Backward through one synthesize_traced call. `dw` is the upstream gradient
// on the unit output; the query gradient lands in dq.
void synth_backward(const SynthesisTrace& trace, const BaseSet& bases,
                    const std::vector<std::uint8_t>& mask, std::span<const double> query,
                    std::span<const double> dw, double attn_scale, std::span<double> dq,
                    Matrix& d_proj_u, Matrix& d_proj_v, const Matrix& proj_u,
                    const Matrix& proj_v, const RowRouter& route) {
    const std::size_t d = query.size();
    const std::size_t n = bases.size();

    // w = pre_norm / norm
    std::vector<double> dwt(d);
    const double along = dot(dw, trace.out);
    for (std::size_t i = 0; i < d; ++i) dwt[i] = (dw[i] - along * trace.out[i]) / trace.norm;
    for (std::size_t i = 0; i < d; ++i) dq[i] += dwt[i];

    std::vector<std::size_t> live;
    live.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        if (mask.empty() || !mask[k]) live.push_back(k);
    }

    std::vector<double> ga(live.size());
    double expected = 0.0;
    for (std::size_t i = 0; i < live.size(); ++i) {
        ga[i] = dot(dwt, bases.values.row(live[i]));
        expected += trace.alpha[live[i]] * ga[i];
    }
    std::vector<double> dt(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
        dt[i] = trace.alpha[live[i]] * (ga[i] - expected);
    }

    // U^T q and V^T dwt are shared across the per-row base gradients.
    std::vector<double> utq(d, 0.0), vtdw(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            utq[j] += proj_u(i, j) * query[i];
            vtdw[j] += proj_v(i, j) * dwt[i];
        }
    }

    std::vector<double> cb_u(d, 0.0), cb_v(d, 0.0), db(d);
    for (std::size_t i = 0; i < live.size(); ++i) {
        const std::size_t k = live[i];
        const double a = trace.alpha[k];
        const double c = attn_scale * dt[i];
        const auto key = bases.keys.row(k);
        const auto raw = bases.raw.row(k);
        for (std::size_t j = 0; j < d; ++j) {
            dq[j] += c * key[j];
            cb_u[j] += c * raw[j];
            cb_v[j] += a * raw[j];
            db[j] = c * utq[j] + a * vtdw[j];
        }
        route.add(k, db);
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            d_proj_u(i, j) += query[i] * cb_u[j];
            d_proj_v(i, j) += dwt[i] * cb_v[j];
        }
    }
}

}  // namespace

GfslLossResult gfsl_loss(const ModelState& m, const Dataset& ds, const MulticlassBatch& batch) {
    const std::size_t d = m.cfg.embed_dim;
    const int seen = m.seen_count();
    const int shot = static_cast<int>(batch.pool_instances.size() / batch.pool_class_ids.size());
    const std::size_t n_eval = batch.eval_instances.size();
    const std::size_t z_count = batch.partitions.size();
    const double attn_scale =
        m.cfg.attention_inv_sqrt_d ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
    const double s = m.cfg.logit_scale;

    GfslLossResult result;
    result.grads = zero_grads(m);
    ModelGrads& grads = result.grads;

    EmbedCache pool_cache, eval_cache;
    const Matrix e_pool = embed_forward(m.embed, ds.gather(batch.pool_instances), &pool_cache);
    const Matrix e_eval = embed_forward(m.embed, ds.gather(batch.eval_instances), &eval_cache);
    result.embedded_rows = e_pool.rows() + e_eval.rows();
    Matrix d_pool(e_pool.rows(), d), d_eval(e_eval.rows(), d);

    const double inv = 1.0 / (static_cast<double>(z_count) * static_cast<double>(n_eval));
    const bool act_like_minus = m.cfg.variant == Variant::CastleMinus ||
                                (m.cfg.variant != Variant::ACastle && m.bases.rows() == 0);
    const bool post_avg = m.cfg.synth_mode == SynthMode::PostAvg && shot > 1 && !act_like_minus;

    for (const std::vector<int>& part : batch.partitions) {
        const int way = static_cast<int>(part.size());
        // Tail prototypes, in partition order.
        Matrix protos(way, d);
        for (int t = 0; t < way; ++t) {
            for (int k = 0; k < shot; ++k) {
                const auto row = e_pool.row(static_cast<std::size_t>(part[t]) * shot + k);
                for (std::size_t j = 0; j < d; ++j) protos(t, j) += row[j] / shot;
            }
        }

        std::vector<int> tail_col_of(seen, -1);  // theta column -> tail index
        for (int t = 0; t < way; ++t) {
            tail_col_of[m.column_of(batch.pool_class_ids[part[t]])] = t;
        }
        std::vector<int> head_cols;  // theta columns kept as heads, ascending
        for (int c = 0; c < seen; ++c) {
            if (tail_col_of[c] < 0) head_cols.push_back(c);
        }

        Matrix head_mat(d, head_cols.size());
        for (std::size_t h = 0; h < head_cols.size(); ++h) {
            for (std::size_t j = 0; j < d; ++j) head_mat(j, h) = m.theta(j, head_cols[h]);
        }

        BaseSet bases;
        std::vector<std::uint8_t> head_mask;
        RowRouter route;
        Matrix d_protos(way, d);
        if (!act_like_minus) {
            bases = build_bases(m, protos, head_mat);
            route = {&grads.bases, &d_protos, &grads.theta, &head_cols, m.bases.rows(),
                     m.cfg.variant == Variant::ACastle ? static_cast<std::size_t>(way) : 0};
            if (m.cfg.variant == Variant::ACastle && !m.cfg.acastle_heads_attend_heads) {
                head_mask.assign(bases.size(), 0);
                for (std::size_t k = 0; k < bases.size(); ++k) {
                    head_mask[k] = bases.origin[k] == BaseOrigin::HeadClassifier ? 1 : 0;
                }
            }
        }

        // Forward every joint column; remember traces for the backward pass.
        std::vector<SynthesisTrace> tail_trace(way);
        std::vector<std::vector<SynthesisTrace>> inst_trace(way);  // post-avg
        std::vector<double> tail_mean_norm(way, 0.0);
        std::vector<SynthesisTrace> head_trace(head_cols.size());

        Matrix cols(d, seen);
        std::vector<double> col_norm(seen, 1.0);
        for (int c = 0; c < seen; ++c) {
            const int t = tail_col_of[c];
            std::vector<double> col(d);
            if (t >= 0) {
                if (act_like_minus) {
                    for (std::size_t j = 0; j < d; ++j) col[j] = protos(t, j);
                    l2_normalize_inplace(col);
                } else if (post_avg) {
                    std::vector<double> acc(d, 0.0);
                    for (int k = 0; k < shot; ++k) {
                        const auto e_row = e_pool.row(static_cast<std::size_t>(part[t]) * shot + k);
                        inst_trace[t].push_back(synthesize_traced(e_row, bases, {}, attn_scale));
                        for (std::size_t j = 0; j < d; ++j) {
                            acc[j] += inst_trace[t].back().out[j] / shot;
                        }
                    }
                    col = acc;
                    tail_mean_norm[t] = l2_normalize_inplace(col);
                } else {
                    tail_trace[t] = synthesize_traced(protos.row(t), bases, {}, attn_scale);
                    col = tail_trace[t].out;
                }
            } else {
                const auto h = static_cast<std::size_t>(
                    std::lower_bound(head_cols.begin(), head_cols.end(), c) - head_cols.begin());
                if (m.cfg.variant == Variant::ACastle) {
                    head_trace[h] =
                        synthesize_traced(head_mat.col(h), bases, head_mask, attn_scale);
                    col = head_trace[h].out;
                } else {
                    for (std::size_t j = 0; j < d; ++j) col[j] = m.theta(j, c);
                }
            }
            for (std::size_t j = 0; j < d; ++j) cols(j, c) = col[j];
        }

        // Unit columns, logits, loss and dL in one sweep.
        Matrix unit_cols = cols;
        for (int c = 0; c < seen; ++c) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) sq += cols(j, c) * cols(j, c);
            const double norm = std::sqrt(sq);
            if (norm <= kNormEpsilon) {
                throw NumericError("gfsl_loss: joint column with degenerate norm");
            }
            col_norm[c] = norm;
            for (std::size_t j = 0; j < d; ++j) unit_cols(j, c) /= norm;
        }
        Matrix logits = matmul(e_eval, unit_cols);
        logits *= s;
        Matrix d_logits(n_eval, seen);
        for (std::size_t r = 0; r < n_eval; ++r) {
            result.loss +=
                inv * cross_entropy_with_grad(logits.row(r), batch.eval_labels[r], d_logits.row(r));
            for (double& g : d_logits.row(r)) g *= inv;
        }

        // d_eval += s * dL * unit_cols^T ; per-column upstream dcol.
        d_eval += s * matmul(d_logits, transpose(unit_cols));
        const Matrix accum = matmul(transpose(d_logits), e_eval);  // |S| x d
        for (int c = 0; c < seen; ++c) {
            double beta = 0.0;
            for (std::size_t r = 0; r < n_eval; ++r) {
                beta += d_logits(r, c) * logits(r, c) / s;
            }
            std::vector<double> dcol(d);
            for (std::size_t j = 0; j < d; ++j) {
                dcol[j] = s * (accum(c, j) - beta * unit_cols(j, c)) / col_norm[c];
            }

            const int t = tail_col_of[c];
            if (t >= 0) {
                if (act_like_minus) {
                    // col = protos[t] / |protos[t]|
                    std::vector<double> p(protos.row(t).begin(), protos.row(t).end());
                    const double norm = l2_norm(p);
                    const std::vector<double> u(unit_cols.col(c));
                    const double along = dot(dcol, u);
                    for (std::size_t j = 0; j < d; ++j) {
                        d_protos(t, j) += (dcol[j] - along * u[j]) / norm;
                    }
                } else if (post_avg) {
                    const std::vector<double> w(unit_cols.col(c));
                    const double along = dot(dcol, w);
                    std::vector<double> d_mean(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        d_mean[j] = (dcol[j] - along * w[j]) / tail_mean_norm[t];
                    }
                    for (int k = 0; k < shot; ++k) {
                        std::vector<double> du(d);
                        for (std::size_t j = 0; j < d; ++j) du[j] = d_mean[j] / shot;
                        const std::size_t row = static_cast<std::size_t>(part[t]) * shot + k;
                        synth_backward(inst_trace[t][k], bases, {}, e_pool.row(row), du,
                                       attn_scale, d_pool.row(row), grads.proj_u, grads.proj_v,
                                       m.proj_u, m.proj_v, route);
                    }
                } else {
                    synth_backward(tail_trace[t], bases, {}, protos.row(t), dcol, attn_scale,
                                   d_protos.row(t), grads.proj_u, grads.proj_v, m.proj_u,
                                   m.proj_v, route);
                }
            } else if (m.cfg.variant == Variant::ACastle) {
                const auto h = static_cast<std::size_t>(
                    std::lower_bound(head_cols.begin(), head_cols.end(), c) - head_cols.begin());
                const std::vector<double> q = head_mat.col(h);
                std::vector<double> dq(d, 0.0);
                synth_backward(head_trace[h], bases, head_mask, q, dcol, attn_scale, dq,
                               grads.proj_u, grads.proj_v, m.proj_u, m.proj_v, route);
                for (std::size_t j = 0; j < d; ++j) grads.theta(j, c) += dq[j];
            } else {
                // Stationary head: dcol is already the raw-column gradient.
                for (std::size_t j = 0; j < d; ++j) grads.theta(j, c) += dcol[j];
            }
        }

        // Prototype gradients spread evenly over the class's support rows.
        for (int t = 0; t < way; ++t) {
            for (int k = 0; k < shot; ++k) {
                auto dst = d_pool.row(static_cast<std::size_t>(part[t]) * shot + k);
                for (std::size_t j = 0; j < d; ++j) dst[j] += d_protos(t, j) / shot;
            }
        }
    }

    embed_backward(m.embed, pool_cache, d_pool, grads.embed_w, grads.embed_b);
    embed_backward(m.embed, eval_cache, d_eval, grads.embed_w, grads.embed_b);
    if (!std::isfinite(result.loss)) throw NumericError("gfsl_loss produced a non-finite loss");
    return result;
}

TrainResult train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg) {
    ModelState model = m0;

    // Exemplar store for the light-weight adaptation path.
    Rng ex_rng = Rng(cfg.seed).stream(0xe);
    model.exemplar_ids.clear();
    for (int id : model.seen_class_ids) {
        const auto& members = ds.instances_of(id, Split::Train);
        const std::size_t take =
            std::min<std::size_t>(cfg.exemplars_per_class, members.size());
        for (std::size_t i : ex_rng.sample_without_replacement(members.size(), take)) {
            model.exemplar_ids.push_back(ds.instances[members[i]].id);
        }
    }

    ModelGrads vel = zero_grads(model);
    TrainResult result;
    ModelState best = model;
    int stale = 0;
    bool stop = false;

    const auto unseen_val = ds.classes_with_role(Role::UnseenVal);
    const int val_way = std::min<int>(cfg.way, static_cast<int>(unseen_val.size()));
    const auto t0 = std::chrono::steady_clock::now();

    auto validate = [&](const ModelState& state) {
        const TaskPredictor predictor = make_model_predictor(state, ds);
        double hm = 0.0;
        for (int t = 0; t < cfg.val_tasks; ++t) {
            const GfslTask task =
                sample_gfsl_task(ds, Role::UnseenVal, cfg.shot, val_way,
                                 Rng::mix(Rng::mix(cfg.seed, 0x7a11), t), cfg.queries_per_class);
            hm += task_metrics(score_task(predictor(task), ds, task), 0.0).harmonic;
        }
        return hm / std::max(1, cfg.val_tasks);
    };

    for (int b = 0; b < cfg.total_batches && !stop; ++b) {
        const double lr = cfg.lr * std::pow(0.5, b / std::max(1, cfg.halve_every));
        const MulticlassBatch batch =
            build_multiclassifier_batch(ds, model, cfg, Rng::mix(Rng::mix(cfg.seed, 0xba7c4), b));
        GfslLossResult step = gfsl_loss(model, ds, batch);

        const double norm = grads_global_norm(step.grads);
        if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
            const double scale = cfg.grad_clip / norm;
            for_each_block(step.grads, [&](Matrix& g) { g *= scale; });
        }

        auto update = [&](Matrix& param, Matrix& v, const Matrix& g) {
            for (std::size_t i = 0; i < param.size(); ++i) {
                v.storage()[i] = cfg.momentum * v.storage()[i] - lr * g.storage()[i];
                param.storage()[i] += v.storage()[i];
            }
        };
        for (std::size_t l = 0; l < model.embed.weights.size(); ++l) {
            update(model.embed.weights[l], vel.embed_w[l], step.grads.embed_w[l]);
            update(model.embed.biases[l], vel.embed_b[l], step.grads.embed_b[l]);
        }
        update(model.theta, vel.theta, step.grads.theta);
        update(model.bases, vel.bases, step.grads.bases);
        update(model.proj_u, vel.proj_u, step.grads.proj_u);
        update(model.proj_v, vel.proj_v, step.grads.proj_v);

        TrainLogEntry entry;
        entry.batch = b;
        entry.loss = step.loss;
        entry.lr = lr;
        entry.wallclock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
        if ((b + 1) % cfg.val_every == 0) {
            const double hm = validate(model);
            entry.val_hm = hm;
            if (hm > result.best_val_hm) {
                result.best_val_hm = hm;
                result.best_batch = b;
                best = model;
                stale = 0;
            } else if (++stale >= cfg.early_stop_stale) {
                stop = true;
            }
        }
        result.log.push_back(entry);
    }

    result.model = result.best_batch >= 0 ? std::move(best) : std::move(model);
    return result;
}

AdaptResult light_weight_adapt(const ModelState& m, const Dataset& ds, const Episode& support,
                               int steps, double lr) {
    if (m.exemplar_ids.empty()) {
        throw ConfigError("light_weight_adapt: the model stores no seen exemplars");
    }
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.instances.size(); ++i) by_id.emplace(ds.instances[i].id, i);
    std::vector<std::size_t> exemplars;
    for (const std::string& id : m.exemplar_ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw ConfigError("light_weight_adapt: exemplar '" + id + "' not in this dataset");
        }
        exemplars.push_back(it->second);
    }

    const std::size_t d = m.cfg.embed_dim;
    const double s = m.cfg.logit_scale;

    const Matrix sup_emb = embed(m, ds.gather(support.support));
    std::vector<int> support_labels(support.support.size());
    for (std::size_t i = 0; i < support.support.size(); ++i) {
        support_labels[i] = ds.instances[support.support[i]].class_id;
    }
    AdaptResult out;
    out.joint = synthesize_joint(m, sup_emb, support_labels, support.shot, m.seen_class_ids);
    out.scale.assign(d, 0.0);
    out.bias.assign(d, 0.0);

    std::vector<std::size_t> train_rows = exemplars;
    train_rows.insert(train_rows.end(), support.support.begin(), support.support.end());
    Matrix base_emb = embed(m, ds.gather(train_rows));
    if (m.cfg.normalize_embeddings) {
        for (std::size_t r = 0; r < base_emb.rows(); ++r) l2_normalize_inplace(base_emb.row(r));
    }
    std::vector<int> labels(train_rows.size());
    for (std::size_t i = 0; i < train_rows.size(); ++i) {
        const int cls = ds.instances[train_rows[i]].class_id;
        const auto it = std::find(out.joint.class_ids.begin(), out.joint.class_ids.end(), cls);
        if (it == out.joint.class_ids.end()) {
            throw ValidationError("light_weight_adapt: class " + std::to_string(cls) +
                                  " missing from the joint classifier");
        }
        labels[i] = static_cast<int>(it - out.joint.class_ids.begin());
    }

    const std::size_t n = train_rows.size();
    const std::size_t cols = out.joint.class_ids.size();
    Matrix& w = out.joint.columns;
    for (int step = 0; step < steps; ++step) {
        Matrix d_w(d, cols);
        std::vector<double> d_scale(d, 0.0), d_bias(d, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<double> e(d);
            for (std::size_t j = 0; j < d; ++j) {
                e[j] = (1.0 + out.scale[j]) * base_emb(r, j) + out.bias[j];
            }
            std::vector<double> logits(cols), norms(cols);
            for (std::size_t c = 0; c < cols; ++c) {
                double sq = 0.0, dp = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    sq += w(j, c) * w(j, c);
                    dp += w(j, c) * e[j];
                }
                norms[c] = std::sqrt(sq);
                if (norms[c] <= kNormEpsilon) {
                    throw NumericError("light_weight_adapt: degenerate classifier column");
                }
                logits[c] = s * dp / norms[c];
            }
            std::vector<double> dl(cols);
            cross_entropy_with_grad(logits, labels[r], dl);
            std::vector<double> de(d, 0.0);
            for (std::size_t c = 0; c < cols; ++c) {
                const double g = dl[c] / static_cast<double>(n);
                const double u_dot_e = logits[c] / s;
                for (std::size_t j = 0; j < d; ++j) {
                    const double u = w(j, c) / norms[c];
                    d_w(j, c) += s * g * (e[j] - u_dot_e * u) / norms[c];
                    de[j] += s * g * u;
                }
            }
            for (std::size_t j = 0; j < d; ++j) {
                d_scale[j] += de[j] * base_emb(r, j);
                d_bias[j] += de[j];
            }
        }
        w -= lr * d_w;
        for (std::size_t j = 0; j < d; ++j) {
            out.scale[j] -= lr * d_scale[j];
            out.bias[j] -= lr * d_bias[j];
        }
    }
    return out;
}

TaskPredictor make_adapted_predictor(const ModelState& m, const Dataset& ds, int steps,
                                     double lr) {
    return [&m, &ds, steps, lr](const GfslTask& task) {
        const AdaptResult adapted = light_weight_adapt(m, ds, task.unseen, steps, lr);
        const std::size_t d = m.cfg.embed_dim;

        std::vector<std::size_t> test = task.unseen.query;
        test.insert(test.end(), task.seen_query.begin(), task.seen_query.end());
        Matrix test_emb = embed(m, ds.gather(test));
        if (m.cfg.normalize_embeddings) {
            for (std::size_t r = 0; r < test_emb.rows(); ++r) {
                l2_normalize_inplace(test_emb.row(r));
            }
        }
        for (std::size_t r = 0; r < test_emb.rows(); ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                test_emb(r, j) = (1.0 + adapted.scale[j]) * test_emb(r, j) + adapted.bias[j];
            }
        }
        const Matrix logits = score_batch(adapted.joint.columns, test_emb, m.cfg.logit_scale);

        JointPrediction pred;
        const std::size_t heads = adapted.joint.head_count();
        pred.seen_class_ids.assign(adapted.joint.class_ids.begin(),
                                   adapted.joint.class_ids.begin() + heads);
        pred.unseen_class_ids.assign(adapted.joint.class_ids.begin() + heads,
                                     adapted.joint.class_ids.end());
        pred.seen_scores = Matrix(test.size(), heads);
        pred.unseen_scores = Matrix(test.size(), adapted.joint.class_ids.size() - heads);
        for (std::size_t r = 0; r < test.size(); ++r) {
            for (std::size_t c = 0; c < heads; ++c) pred.seen_scores(r, c) = logits(r, c);
            for (std::size_t c = heads; c < adapted.joint.class_ids.size(); ++c) {
                pred.unseen_scores(r, c - heads) = logits(r, c);
            }
        }
        return pred;
    };
}

}  // namespace gfsl
