#include "gfsl/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"

namespace gfsl {

using nlohmann::json;

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Castle: return "castle";
        case Variant::ACastle: return "acastle";
        case Variant::CastleMinus: return "castle-minus";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    if (s == "castle") return Variant::Castle;
    if (s == "acastle") return Variant::ACastle;
    if (s == "castle-minus") return Variant::CastleMinus;
    throw ConfigError("unknown variant '" + s + "'");
}

Matrix embed_forward(const EmbedParams& p, const Matrix& x, EmbedCache* cache) {
    if (x.cols() != p.input_dim()) {
        throw ShapeError("embed: input has " + std::to_string(x.cols()) +
                         " features, expected " + std::to_string(p.input_dim()));
    }
    if (cache) {
        cache->input = x;
        cache->pre.clear();
        cache->post.clear();
    }
    Matrix h = x;
    for (std::size_t layer = 0; layer < p.weights.size(); ++layer) {
        Matrix z = matmul(h, p.weights[layer]);
        for (std::size_t r = 0; r < z.rows(); ++r) {
            auto row = z.row(r);
            const auto bias = p.biases[layer].row(0);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
        }
        if (cache) cache->pre.push_back(z);
        if (layer + 1 < p.weights.size()) {
            for (double& v : z.storage()) v = v > 0.0 ? v : 0.0;
        }
        if (cache) cache->post.push_back(z);
        h = std::move(z);
    }
    return h;
}

Matrix embed_backward(const EmbedParams& p, const EmbedCache& cache, const Matrix& d_out,
                      std::vector<Matrix>& d_weights, std::vector<Matrix>& d_biases) {
    Matrix grad = d_out;
    for (std::size_t layer = p.weights.size(); layer-- > 0;) {
        if (layer + 1 < p.weights.size()) {
            // Rectifier gate on the cached pre-activations.
            const Matrix& pre = cache.pre[layer];
            for (std::size_t i = 0; i < grad.size(); ++i) {
                if (pre.storage()[i] <= 0.0) grad.storage()[i] = 0.0;
            }
        }
        const Matrix& input = layer == 0 ? cache.input : cache.post[layer - 1];
        d_weights[layer] += matmul(transpose(input), grad);
        for (std::size_t r = 0; r < grad.rows(); ++r) {
            auto brow = d_biases[layer].row(0);
            const auto grow = grad.row(r);
            for (std::size_t c = 0; c < brow.size(); ++c) brow[c] += grow[c];
        }
        if (layer > 0) grad = matmul(grad, transpose(p.weights[layer]));
    }
    return matmul(grad, transpose(p.weights[0]));
}

int ModelState::column_of(int class_id) const {
    const auto it = std::find(seen_class_ids.begin(), seen_class_ids.end(), class_id);
    return it == seen_class_ids.end() ? -1 : static_cast<int>(it - seen_class_ids.begin());
}

namespace {

Matrix uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    Matrix m(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, fan_in)));
    for (double& v : m.storage()) v = rng.next_uniform(-bound, bound);
    return m;
}

}  // namespace

ModelState init_model(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed) {
    if (cfg.input_dim != ds.feature_dim) {
        throw ConfigError("model input_dim " + std::to_string(cfg.input_dim) +
                          " does not match dataset feature_dim " +
                          std::to_string(ds.feature_dim));
    }
    Rng rng = Rng(seed).stream(0x10de1);
    ModelState m;
    m.cfg = cfg;
    if (cfg.hidden_dim > 0) {
        m.embed.weights.push_back(uniform_init(cfg.input_dim, cfg.hidden_dim, cfg.input_dim, rng));
        m.embed.biases.push_back(uniform_init(1, cfg.hidden_dim, cfg.input_dim, rng));
        m.embed.weights.push_back(uniform_init(cfg.hidden_dim, cfg.embed_dim, cfg.hidden_dim, rng));
        m.embed.biases.push_back(uniform_init(1, cfg.embed_dim, cfg.hidden_dim, rng));
    } else {
        m.embed.weights.push_back(uniform_init(cfg.input_dim, cfg.embed_dim, cfg.input_dim, rng));
        m.embed.biases.push_back(uniform_init(1, cfg.embed_dim, cfg.input_dim, rng));
    }
    m.seen_class_ids = ds.classes_with_role(Role::Seen);
    m.theta = uniform_init(cfg.embed_dim, m.seen_class_ids.size(), cfg.embed_dim, rng);
    m.bases = uniform_init(cfg.dict_size, cfg.embed_dim, cfg.embed_dim, rng);
    m.proj_u = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
    m.proj_v = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
    return m;
}

Matrix embed(const ModelState& m, const Matrix& x) { return embed_forward(m.embed, x); }

std::vector<double> score(const Matrix& classifier_cols, std::span<const double> emb,
                          double scale, bool normalize_embedding) {
    if (classifier_cols.rows() != emb.size()) {
        throw ShapeError("score: classifier rows " + std::to_string(classifier_cols.rows()) +
                         " vs embedding length " + std::to_string(emb.size()));
    }
    std::vector<double> e(emb.begin(), emb.end());
    if (normalize_embedding) l2_normalize_inplace(e);
    std::vector<double> logits(classifier_cols.cols());
    for (std::size_t j = 0; j < classifier_cols.cols(); ++j) {
        double sq = 0.0, dp = 0.0;
        for (std::size_t r = 0; r < classifier_cols.rows(); ++r) {
            const double w = classifier_cols(r, j);
            sq += w * w;
            dp += w * e[r];
        }
        const double norm = std::sqrt(sq);
        if (norm <= kNormEpsilon) {
            throw NumericError("score: classifier column " + std::to_string(j) +
                               " has degenerate norm");
        }
        logits[j] = scale * dp / norm;
    }
    return logits;
}

Matrix score_batch(const Matrix& classifier_cols, const Matrix& embeddings, double scale,
                   bool normalize_embedding) {
    Matrix out(embeddings.rows(), classifier_cols.cols());
    for (std::size_t r = 0; r < embeddings.rows(); ++r) {
        const auto logits = score(classifier_cols, embeddings.row(r), scale, normalize_embedding);
        std::copy(logits.begin(), logits.end(), out.row(r).begin());
    }
    return out;
}

int best_epoch(const std::vector<double>& scores) {
    if (scores.empty()) return -1;
    // Latest among equal scores: later epochs have seen more optimization.
    int best = 0;
    for (int e = 1; e < static_cast<int>(scores.size()); ++e) {
        if (scores[e] >= scores[best]) best = e;
    }
    return best;
}

double nearest_centroid_accuracy(const ModelState& m, const Dataset& ds, Role role, int shot,
                                 int way, int episodes, int queries, std::uint64_t seed) {
    double correct = 0.0, total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        const Episode ep = sample_episode(ds, role, shot, way, Rng::mix(seed, e), queries);
        const Matrix sup = embed(m, ds.gather(ep.support));
        const Matrix qry = embed(m, ds.gather(ep.query));
        Matrix protos(ep.way, m.cfg.embed_dim);
        for (int c = 0; c < ep.way; ++c) {
            for (int k = 0; k < ep.shot; ++k) {
                const auto row = sup.row(static_cast<std::size_t>(c) * ep.shot + k);
                for (std::size_t d = 0; d < row.size(); ++d) protos(c, d) += row[d] / ep.shot;
            }
        }
        for (std::size_t q = 0; q < qry.rows(); ++q) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < ep.way; ++c) {
                double dist = 0.0;
                for (std::size_t d = 0; d < m.cfg.embed_dim; ++d) {
                    const double diff = qry(q, d) - protos(c, d);
                    dist += diff * diff;
                }
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            const int truth = static_cast<int>(q) / ep.queries_per_class;
            correct += best == truth ? 1.0 : 0.0;
            total += 1.0;
        }
    }
    return total > 0.0 ? correct / total : 0.0;
}

PretrainResult pretrain(const Dataset& ds, const ModelConfig& mcfg, const PretrainConfig& cfg) {
    ModelState model = init_model(mcfg, ds, cfg.seed);
    if (model.seen_class_ids.empty()) throw CapacityError("pretrain: no seen classes");

    std::vector<std::size_t> train_idx;
    for (int c : model.seen_class_ids) {
        const auto& pool = ds.instances_of(c, Split::Train);
        train_idx.insert(train_idx.end(), pool.begin(), pool.end());
    }
    if (train_idx.empty()) throw CapacityError("pretrain: empty seen meta-train split");
    const auto unseen_val = ds.classes_with_role(Role::UnseenVal);
    if (unseen_val.empty()) throw CapacityError("pretrain: no unseen-val classes for selection");
    const int val_way = std::min<int>(cfg.val_way, static_cast<int>(unseen_val.size()));

    std::vector<int> labels(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i) {
        labels[i] = model.column_of(ds.instances[train_idx[i]].class_id);
    }

    Rng shuffle_rng = Rng(cfg.seed).stream(0x5bf11e);
    std::vector<Matrix> vel_w(model.embed.weights.size()), vel_b(model.embed.biases.size());
    for (std::size_t l = 0; l < vel_w.size(); ++l) {
        vel_w[l] = Matrix(model.embed.weights[l].rows(), model.embed.weights[l].cols());
        vel_b[l] = Matrix(1, model.embed.biases[l].cols());
    }
    Matrix vel_theta(model.theta.rows(), model.theta.cols());

    PretrainResult result;
    double lr = cfg.lr;
    double best_score = -1.0;
    int stale = 0;
    ModelState best_model = model;
    std::vector<std::size_t> order(train_idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double correct = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(train_idx[order[i]]);

            EmbedCache cache;
            const Matrix emb = embed_forward(model.embed, ds.gather(batch), &cache);
            Matrix logits = matmul(emb, model.theta);
            Matrix d_logits(logits.rows(), logits.cols());
            for (std::size_t r = 0; r < logits.rows(); ++r) {
                const int label = labels[order[start + r]];
                cross_entropy_with_grad(logits.row(r), label, d_logits.row(r));
                for (double& g : d_logits.row(r)) g /= static_cast<double>(logits.rows());
                const auto lrow = logits.row(r);
                const std::size_t argmax =
                    std::max_element(lrow.begin(), lrow.end()) - lrow.begin();
                if (static_cast<int>(argmax) == label) correct += 1.0;
            }
            Matrix d_theta = matmul(transpose(emb), d_logits);
            const Matrix d_emb = matmul(d_logits, transpose(model.theta));
            std::vector<Matrix> d_w(vel_w.size()), d_b(vel_b.size());
            for (std::size_t l = 0; l < d_w.size(); ++l) {
                d_w[l] = Matrix(vel_w[l].rows(), vel_w[l].cols());
                d_b[l] = Matrix(1, vel_b[l].cols());
            }
            embed_backward(model.embed, cache, d_emb, d_w, d_b);

            auto step = [&](Matrix& param, Matrix& vel, const Matrix& grad) {
                for (std::size_t i = 0; i < param.size(); ++i) {
                    vel.storage()[i] = cfg.momentum * vel.storage()[i] - lr * grad.storage()[i];
                    param.storage()[i] += vel.storage()[i];
                }
            };
            step(model.theta, vel_theta, d_theta);
            for (std::size_t l = 0; l < d_w.size(); ++l) {
                step(model.embed.weights[l], vel_w[l], d_w[l]);
                step(model.embed.biases[l], vel_b[l], d_b[l]);
            }
        }
        result.train_accuracy = correct / static_cast<double>(order.size());

        const double val = nearest_centroid_accuracy(model, ds, Role::UnseenVal, cfg.val_shot,
                                                     val_way, cfg.val_episodes, cfg.val_queries,
                                                     Rng::mix(cfg.seed, 0xa100 + epoch));
        result.val_scores.push_back(val);
        if (val > best_score) {
            best_score = val;
            best_model = model;
            stale = 0;
        } else {
            if (val == best_score) best_model = model;  // prefer the later tie
            if (++stale >= cfg.plateau_epochs) {
                lr *= 0.5;
                stale = 0;
            }
        }
    }
    result.best_epoch = best_epoch(result.val_scores);
    result.model = std::move(best_model);
    return result;
}

namespace {

json matrix_to_json(const Matrix& m) {
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}

Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_checkpoint(const ModelState& m, const std::string& path) {
    json j;
    j["format_version"] = 1;
    j["config"] = {{"input_dim", m.cfg.input_dim},
                   {"embed_dim", m.cfg.embed_dim},
                   {"hidden_dim", m.cfg.hidden_dim},
                   {"dict_size", m.cfg.dict_size},
                   {"logit_scale", m.cfg.logit_scale},
                   {"variant", variant_name(m.cfg.variant)},
                   {"synth_mode", m.cfg.synth_mode == SynthMode::PreAvg ? "pre-avg" : "post-avg"},
                   {"normalize_embeddings", m.cfg.normalize_embeddings},
                   {"attention_inv_sqrt_d", m.cfg.attention_inv_sqrt_d},
                   {"acastle_heads_attend_heads", m.cfg.acastle_heads_attend_heads}};
    json layers = json::array();
    for (std::size_t l = 0; l < m.embed.weights.size(); ++l) {
        layers.push_back(
            {{"weight", matrix_to_json(m.embed.weights[l])}, {"bias", matrix_to_json(m.embed.biases[l])}});
    }
    j["embed"] = layers;
    j["theta"] = matrix_to_json(m.theta);
    j["bases"] = matrix_to_json(m.bases);
    j["proj_u"] = matrix_to_json(m.proj_u);
    j["proj_v"] = matrix_to_json(m.proj_v);
    j["seen_class_ids"] = m.seen_class_ids;
    j["exemplar_ids"] = m.exemplar_ids;
    j["config_fingerprint"] = m.config_fingerprint;
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open checkpoint path '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("checkpoint '" + path + "': " + e.what());
    }
    ModelState m;
    const json& c = j.at("config");
    m.cfg.input_dim = c.at("input_dim").get<std::size_t>();
    m.cfg.embed_dim = c.at("embed_dim").get<std::size_t>();
    m.cfg.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    m.cfg.dict_size = c.at("dict_size").get<std::size_t>();
    m.cfg.logit_scale = c.at("logit_scale").get<double>();
    m.cfg.variant = parse_variant(c.at("variant").get<std::string>());
    m.cfg.synth_mode =
        c.at("synth_mode").get<std::string>() == "post-avg" ? SynthMode::PostAvg : SynthMode::PreAvg;
    m.cfg.normalize_embeddings = c.at("normalize_embeddings").get<bool>();
    m.cfg.attention_inv_sqrt_d = c.at("attention_inv_sqrt_d").get<bool>();
    m.cfg.acastle_heads_attend_heads = c.at("acastle_heads_attend_heads").get<bool>();
    for (const json& layer : j.at("embed")) {
        m.embed.weights.push_back(matrix_from_json(layer.at("weight")));
        m.embed.biases.push_back(matrix_from_json(layer.at("bias")));
    }
    m.theta = matrix_from_json(j.at("theta"));
    m.bases = matrix_from_json(j.at("bases"));
    m.proj_u = matrix_from_json(j.at("proj_u"));
    m.proj_v = matrix_from_json(j.at("proj_v"));
    m.seen_class_ids = j.at("seen_class_ids").get<std::vector<int>>();
    m.exemplar_ids = j.at("exemplar_ids").get<std::vector<std::string>>();
    m.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    return m;
}

}  // namespace gfsl
