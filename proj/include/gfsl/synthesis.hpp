#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gfsl/matrix.hpp"
#include "gfsl/model.hpp"

namespace gfsl {

enum class BaseOrigin { Shared, TailPrototype, HeadClassifier };

/// Key/value rows of the dictionary. Row k holds the projections of base k;
/// origin says whether the base is a learned shared row, a tail prototype or
/// a head classifier column.
struct BaseSet {
    Matrix raw;     // |B| x d, the unprojected base rows
    Matrix keys;    // |B| x d, row k = (U b_k)^T
    Matrix values;  // |B| x d, row k = (V b_k)^T
    std::vector<BaseOrigin> origin;

    std::size_t size() const { return origin.size(); }
};

struct JointClassifier {
    enum class Provenance { StationaryHead, AdaptedHead, SynthesizedTail };

    Matrix columns;  // d x (heads + tails), heads first
    std::vector<Provenance> provenance;
    std::vector<int> class_ids;  // global class id per column

    std::size_t head_count() const;
};

/// Mean embedding per label. Labels must be 0..N-1 with exactly `shot` rows
/// each; rows for one label need not be contiguous.
Matrix compute_prototypes(const Matrix& embeddings, const std::vector<int>& labels, int shot);

/// Dictionary rows for one task. CASTLE and CASTLE- use the shared rows only;
/// aCASTLE appends the tail prototypes and the head classifier columns.
BaseSet build_bases(const ModelState& m, const Matrix& prototypes, const Matrix& head_cols);

/// Attention weights, the pre-normalization sum and the unit output of one
/// dictionary query. Kept so trainers can reuse the forward pass verbatim.
struct SynthesisTrace {
    std::vector<double> alpha;     // over all rows; exactly 0 on masked rows
    std::vector<double> pre_norm;  // query + sum_k alpha_k * value_k
    double norm = 0.0;
    std::vector<double> out;  // pre_norm / norm
};

/// Softmax attention of the query against unmasked keys, residual combination
/// with the values, then l2 normalization. An empty mask means every row is
/// eligible. Throws CapacityError when no row is eligible.
SynthesisTrace synthesize_traced(std::span<const double> query, const BaseSet& bases,
                                 const std::vector<std::uint8_t>& mask, double attn_scale);

std::vector<double> synthesize(std::span<const double> query, const BaseSet& bases,
                               const std::vector<std::uint8_t>& mask = {},
                               double attn_scale = 1.0);

/// Builds the joint classifier for one support set. support_labels carry the
/// global class id of each support row (grouped by class, shot rows each);
/// head_ids are the seen classes kept as heads.
JointClassifier synthesize_joint(const ModelState& m, const Matrix& support_embs,
                                 const std::vector<int>& support_labels, int shot,
                                 const std::vector<int>& head_ids);

}  // namespace gfsl
