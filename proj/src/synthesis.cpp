#include "gfsl/synthesis.hpp"

#include <algorithm>
#include <cmath>

#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"

namespace gfsl {

std::size_t JointClassifier::head_count() const {
    return static_cast<std::size_t>(
        std::count_if(provenance.begin(), provenance.end(), [](Provenance p) {
            return p != Provenance::SynthesizedTail;
        }));
}

Matrix compute_prototypes(const Matrix& embeddings, const std::vector<int>& labels, int shot) {
    if (labels.size() != embeddings.rows()) {
        throw ShapeError("compute_prototypes: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(embeddings.rows()) + " rows");
    }
    if (shot < 1 || labels.empty()) {
        throw ShapeError("compute_prototypes: empty support");
    }
    const int way = 1 + *std::max_element(labels.begin(), labels.end());
    std::vector<int> counts(way, 0);
    Matrix protos(way, embeddings.cols());
    for (std::size_t r = 0; r < embeddings.rows(); ++r) {
        const int c = labels[r];
        if (c < 0) throw ShapeError("compute_prototypes: negative label");
        ++counts[c];
        const auto row = embeddings.row(r);
        for (std::size_t d = 0; d < row.size(); ++d) protos(c, d) += row[d];
    }
    for (int c = 0; c < way; ++c) {
        if (counts[c] != shot) {
            throw ShapeError("compute_prototypes: label " + std::to_string(c) + " has " +
                             std::to_string(counts[c]) + " rows, expected " +
                             std::to_string(shot));
        }
        for (std::size_t d = 0; d < protos.cols(); ++d) protos(c, d) /= shot;
    }
    return protos;
}

BaseSet build_bases(const ModelState& m, const Matrix& prototypes, const Matrix& head_cols) {
    const std::size_t d = m.cfg.embed_dim;
    std::size_t rows = m.bases.rows();
    if (m.cfg.variant == Variant::ACastle) rows += prototypes.rows() + head_cols.cols();

    BaseSet set;
    set.raw = Matrix(rows, d);
    set.origin.resize(rows);
    std::size_t r = 0;
    for (std::size_t k = 0; k < m.bases.rows(); ++k, ++r) {
        std::copy(m.bases.row(k).begin(), m.bases.row(k).end(), set.raw.row(r).begin());
        set.origin[r] = BaseOrigin::Shared;
    }
    if (m.cfg.variant == Variant::ACastle) {
        for (std::size_t k = 0; k < prototypes.rows(); ++k, ++r) {
            std::copy(prototypes.row(k).begin(), prototypes.row(k).end(), set.raw.row(r).begin());
            set.origin[r] = BaseOrigin::TailPrototype;
        }
        for (std::size_t c = 0; c < head_cols.cols(); ++c, ++r) {
            for (std::size_t i = 0; i < d; ++i) set.raw(r, i) = head_cols(i, c);
            set.origin[r] = BaseOrigin::HeadClassifier;
        }
    }
    // key_k = U b_k and value_k = V b_k, stored as rows: raw * U^T, raw * V^T.
    set.keys = matmul(set.raw, transpose(m.proj_u));
    set.values = matmul(set.raw, transpose(m.proj_v));
    return set;
}

SynthesisTrace synthesize_traced(std::span<const double> query, const BaseSet& bases,
                                 const std::vector<std::uint8_t>& mask, double attn_scale) {
    const std::size_t n = bases.size();
    if (!mask.empty() && mask.size() != n) {
        throw ShapeError("synthesize: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(n) + " dictionary rows");
    }
    std::vector<std::size_t> live;
    for (std::size_t k = 0; k < n; ++k) {
        if (mask.empty() || !mask[k]) live.push_back(k);
    }
    if (live.empty()) {
        throw CapacityError("synthesize: every dictionary row is masked out");
    }

    SynthesisTrace trace;
    trace.alpha.assign(n, 0.0);
    std::vector<double> logits(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
        logits[i] = attn_scale * dot(query, bases.keys.row(live[i]));
    }
    softmax_inplace(logits);
    for (std::size_t i = 0; i < live.size(); ++i) trace.alpha[live[i]] = logits[i];

    trace.pre_norm.assign(query.begin(), query.end());
    for (std::size_t i = 0; i < live.size(); ++i) {
        const auto value = bases.values.row(live[i]);
        const double a = logits[i];
        for (std::size_t d = 0; d < value.size(); ++d) trace.pre_norm[d] += a * value[d];
    }
    trace.out = trace.pre_norm;
    trace.norm = l2_normalize_inplace(trace.out);
    return trace;
}

std::vector<double> synthesize(std::span<const double> query, const BaseSet& bases,
                               const std::vector<std::uint8_t>& mask, double attn_scale) {
    return synthesize_traced(query, bases, mask, attn_scale).out;
}

namespace {

std::vector<double> normalized(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    l2_normalize_inplace(out);
    return out;
}

}  // namespace

JointClassifier synthesize_joint(const ModelState& m, const Matrix& support_embs,
                                 const std::vector<int>& support_labels, int shot,
                                 const std::vector<int>& head_ids) {
    if (support_embs.rows() == 0) throw CapacityError("synthesize_joint: empty support");
    const std::size_t d = m.cfg.embed_dim;
    const double attn_scale =
        m.cfg.attention_inv_sqrt_d ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;

    // Local tail labels in first-appearance order of the global ids.
    std::vector<int> tail_ids;
    std::vector<int> local(support_labels.size());
    for (std::size_t i = 0; i < support_labels.size(); ++i) {
        const auto it = std::find(tail_ids.begin(), tail_ids.end(), support_labels[i]);
        if (it == tail_ids.end()) {
            local[i] = static_cast<int>(tail_ids.size());
            tail_ids.push_back(support_labels[i]);
        } else {
            local[i] = static_cast<int>(it - tail_ids.begin());
        }
    }
    const Matrix prototypes = compute_prototypes(support_embs, local, shot);

    Matrix head_cols(d, head_ids.size());
    for (std::size_t h = 0; h < head_ids.size(); ++h) {
        const int col = m.column_of(head_ids[h]);
        if (col < 0) {
            throw ValidationError("synthesize_joint: head class " + std::to_string(head_ids[h]) +
                                  " is not a seen class");
        }
        for (std::size_t i = 0; i < d; ++i) head_cols(i, h) = m.theta(i, col);
    }

    JointClassifier joint;
    joint.columns = Matrix(d, head_ids.size() + tail_ids.size());
    auto put_col = [&](std::size_t c, std::span<const double> v) {
        for (std::size_t i = 0; i < d; ++i) joint.columns(i, c) = v[i];
    };

    const bool degenerate_dict = m.cfg.variant != Variant::ACastle && m.bases.rows() == 0;
    const bool act_like_minus = m.cfg.variant == Variant::CastleMinus || degenerate_dict;

    BaseSet bases;
    std::vector<std::uint8_t> head_mask;
    if (!act_like_minus) {
        bases = build_bases(m, prototypes, head_cols);
        if (m.cfg.variant == Variant::ACastle && !m.cfg.acastle_heads_attend_heads) {
            head_mask.assign(bases.size(), 0);
            for (std::size_t k = 0; k < bases.size(); ++k) {
                head_mask[k] = bases.origin[k] == BaseOrigin::HeadClassifier ? 1 : 0;
            }
        }
    }

    // Heads first: stationary columns are the normalized theta columns, the
    // adaptive variant re-synthesizes each one against shared rows and tail
    // prototypes.
    for (std::size_t h = 0; h < head_ids.size(); ++h) {
        const std::vector<double> col = head_cols.col(h);
        if (m.cfg.variant == Variant::ACastle) {
            put_col(h, synthesize(col, bases, head_mask, attn_scale));
            joint.provenance.push_back(JointClassifier::Provenance::AdaptedHead);
        } else {
            put_col(h, normalized(col));
            joint.provenance.push_back(JointClassifier::Provenance::StationaryHead);
        }
        joint.class_ids.push_back(head_ids[h]);
    }

    for (std::size_t t = 0; t < tail_ids.size(); ++t) {
        const std::size_t c = head_ids.size() + t;
        std::vector<double> col;
        if (act_like_minus) {
            col = normalized(prototypes.row(t));
        } else if (m.cfg.synth_mode == SynthMode::PostAvg && shot > 1) {
            // Synthesize per support instance, average the unit classifiers,
            // renormalize.
            std::vector<double> acc(d, 0.0);
            for (std::size_t r = 0; r < support_embs.rows(); ++r) {
                if (local[r] != static_cast<int>(t)) continue;
                const auto one = synthesize(support_embs.row(r), bases, {}, attn_scale);
                for (std::size_t i = 0; i < d; ++i) acc[i] += one[i] / shot;
            }
            l2_normalize_inplace(acc);
            col = std::move(acc);
        } else {
            col = synthesize(prototypes.row(t), bases, {}, attn_scale);
        }
        put_col(c, col);
        joint.provenance.push_back(JointClassifier::Provenance::SynthesizedTail);
        joint.class_ids.push_back(tail_ids[t]);
    }
    return joint;
}

}  // namespace gfsl
