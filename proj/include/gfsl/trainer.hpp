#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gfsl/dataset.hpp"
#include "gfsl/eval.hpp"
#include "gfsl/matrix.hpp"
#include "gfsl/model.hpp"
#include "gfsl/synthesis.hpp"

namespace gfsl {

struct TrainConfig {
    int way = 5;                    // N, fake-task classes
    int shot = 1;                   // K
    int pool_way = 24;              // M, classes embedded per batch
    int classifiers_per_batch = 64; // Z, fake tasks per batch
    int eval_batch = 128;
    double lr = 1e-4;
    double momentum = 0.9;
    int halve_every = 2000;
    int total_batches = 10000;
    int val_every = 500;
    int val_tasks = 500;
    int early_stop_stale = 20;  // stop after this many stale validations
    double grad_clip = 10.0;
    bool domain_fake_tasks = false;  // sample each fake task within one domain
    int exemplars_per_class = 5;
    int queries_per_class = 15;
    std::uint64_t seed = 0;
};

/// One multi-classifier mini-batch: a single embedded pool, Z fake-task
/// partitions over the pool classes and a shared evaluation batch.
struct MulticlassBatch {
    std::vector<std::size_t> pool_instances;  // pool_way * shot, grouped by class
    std::vector<int> pool_class_ids;          // global class id per pool class
    std::vector<std::vector<int>> partitions; // Z lists of local pool class indices
    std::vector<std::size_t> eval_instances;
    std::vector<int> eval_labels;  // theta column per eval instance
};

MulticlassBatch build_multiclassifier_batch(const Dataset& ds, const ModelState& m,
                                            const TrainConfig& cfg, std::uint64_t seed);

struct ModelGrads {
    std::vector<Matrix> embed_w, embed_b;
    Matrix theta, bases, proj_u, proj_v;
};
ModelGrads zero_grads(const ModelState& m);
double grads_global_norm(const ModelGrads& g);

struct GfslLossResult {
    double loss = 0.0;
    ModelGrads grads;
    std::size_t embedded_rows = 0;  // forward-pass row count, for the one-pass invariant
};

/// Mean over the Z fake tasks and the eval batch of the joint cross-entropy,
/// with hand-derived gradients for every parameter block.
GfslLossResult gfsl_loss(const ModelState& m, const Dataset& ds, const MulticlassBatch& batch);

struct TrainLogEntry {
    int batch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double val_hm = -1.0;  // < 0 when this batch ran no validation
    std::int64_t wallclock_ms = 0;
};

struct TrainResult {
    ModelState model;
    std::vector<TrainLogEntry> log;
    int best_batch = -1;
    double best_val_hm = -1.0;
};

/// Momentum descent over gfsl_loss with step-decayed lr, gradient clipping at
/// a global norm, periodic harmonic-mean validation on unseen-val tasks and
/// best-checkpoint selection. Throws NumericError when the loss goes
/// non-finite.
TrainResult train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg);

struct AdaptResult {
    JointClassifier joint;
    std::vector<double> scale;  // elementwise embedding gain, starts at 0
    std::vector<double> bias;   // elementwise embedding shift, starts at 0
};

/// Freezes the embedding and tunes the joint classifier plus a per-dimension
/// scale/bias on the embedding by cross-entropy over the stored seen
/// exemplars and the task support. Throws ConfigError when the model holds no
/// exemplar store.
AdaptResult light_weight_adapt(const ModelState& m, const Dataset& ds, const Episode& support,
                               int steps, double lr);

/// Predictor that runs light_weight_adapt per task before scoring.
TaskPredictor make_adapted_predictor(const ModelState& m, const Dataset& ds, int steps, double lr);

}  // namespace gfsl
