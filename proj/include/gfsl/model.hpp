#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gfsl/dataset.hpp"
#include "gfsl/matrix.hpp"

namespace gfsl {

enum class Variant { Castle, ACastle, CastleMinus };
enum class SynthMode { PreAvg, PostAvg };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

/// Fully-connected embedding: 0 or 1 hidden layers, rectifier between
/// layers, none after the last.
struct EmbedParams {
    std::vector<Matrix> weights;  // layer k maps in_k -> out_k, stored in x out
    std::vector<Matrix> biases;   // 1 x out_k

    std::size_t input_dim() const { return weights.front().rows(); }
    std::size_t output_dim() const { return weights.back().cols(); }
};

/// Cached activations from one forward pass, consumed by embed_backward.
struct EmbedCache {
    Matrix input;
    std::vector<Matrix> pre;   // pre-activation per layer
    std::vector<Matrix> post;  // post-activation per layer (last == output)
};

Matrix embed_forward(const EmbedParams& p, const Matrix& x, EmbedCache* cache = nullptr);

/// Accumulates parameter gradients for an upstream d_out and returns the
/// gradient w.r.t. the input batch.
Matrix embed_backward(const EmbedParams& p, const EmbedCache& cache, const Matrix& d_out,
                      std::vector<Matrix>& d_weights, std::vector<Matrix>& d_biases);

struct ModelConfig {
    std::size_t input_dim = 32;
    std::size_t embed_dim = 16;
    std::size_t hidden_dim = 32;  // 0 = single linear layer
    std::size_t dict_size = 128;
    double logit_scale = 10.0;
    Variant variant = Variant::Castle;
    SynthMode synth_mode = SynthMode::PreAvg;
    bool normalize_embeddings = false;
    bool attention_inv_sqrt_d = false;
    bool acastle_heads_attend_heads = false;
};

/// Embedding, seen-class classifier, dictionary bases and projections.
/// Immutable during evaluation; only trainers mutate it.
struct ModelState {
    ModelConfig cfg;
    EmbedParams embed;
    Matrix theta;   // embed_dim x |S|, one column per seen class
    Matrix bases;   // dict_size x embed_dim, shared dictionary rows
    Matrix proj_u;  // embed_dim x embed_dim, key projection
    Matrix proj_v;  // embed_dim x embed_dim, value projection
    std::vector<int> seen_class_ids;       // global class id per theta column
    std::vector<std::string> exemplar_ids; // held-out seen exemplars for adaptation
    std::string config_fingerprint;

    int seen_count() const { return static_cast<int>(seen_class_ids.size()); }
    /// Theta column index for a global class id; -1 when not a seen class.
    int column_of(int class_id) const;
};

/// Fan-in symmetric uniform init for every parameter block.
ModelState init_model(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed);

Matrix embed(const ModelState& m, const Matrix& x);

/// logits[j] = scale * <l2_normalize(col_j), emb>; classifier columns are
/// normalized here, the embedding only when normalize_embedding is set.
/// Throws NumericError on a degenerate column.
std::vector<double> score(const Matrix& classifier_cols, std::span<const double> emb,
                          double scale, bool normalize_embedding = false);

/// Row r = score of embeddings.row(r) against the same columns.
Matrix score_batch(const Matrix& classifier_cols, const Matrix& embeddings, double scale,
                   bool normalize_embedding = false);

struct PretrainConfig {
    int epochs = 100;
    double lr = 0.1;
    double momentum = 0.9;
    int batch_size = 128;
    int plateau_epochs = 10;  // halve lr after this many epochs without val gain
    int val_episodes = 200;
    int val_way = 5;
    int val_shot = 1;
    int val_queries = 15;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    ModelState model;
    std::vector<double> val_scores;  // one per epoch
    int best_epoch = -1;
    double train_accuracy = 0.0;  // on the final epoch
};

/// Index of the best validation score; earliest wins ties.
int best_epoch(const std::vector<double>& scores);

/// Trains the |S|-way linear head with momentum SGD and returns the epoch
/// checkpoint with the best nearest-centroid accuracy on unseen-val episodes.
PretrainResult pretrain(const Dataset& ds, const ModelConfig& mcfg, const PretrainConfig& cfg);

/// Mean nearest-centroid episode accuracy in embedding space.
double nearest_centroid_accuracy(const ModelState& m, const Dataset& ds, Role role, int shot,
                                 int way, int episodes, int queries, std::uint64_t seed);

void save_checkpoint(const ModelState& m, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace gfsl
