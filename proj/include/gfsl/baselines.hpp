#pragma once

#include <cstdint>
#include <string>

#include "gfsl/dataset.hpp"
#include "gfsl/eval.hpp"
#include "gfsl/model.hpp"
#include "gfsl/trainer.hpp"

namespace gfsl {

enum class BaselineTag { McKnn, ProtoProto, McProto };

std::string baseline_name(BaselineTag t);
BaselineTag parse_baseline(const std::string& s);

struct BaselineKind {
    BaselineTag tag = BaselineTag::ProtoProto;
    double lambda = 0.5;            // mc_proto only: many-shot vs episodic loss weight
    int seen_centroid_samples = 100;
};

/// Episodic training of the embedding with soft nearest-neighbor logits
/// (negative squared distances to class prototypes). theta and the dictionary
/// are carried through untouched from m0.
ModelState protonet_train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg);

/// Joint objective: lambda * many-shot cross-entropy + (1-lambda) * episodic
/// prototype loss. lambda=1 reduces to the plain multi-class classifier,
/// lambda=0 to protonet_train.
ModelState mcproto_train(const Dataset& ds, const ModelState& m0, const TrainConfig& cfg,
                         double lambda);

/// A baseline ready for joint prediction. proto_proto carries seen-class
/// prototypes computed once from sampled meta-train instances.
struct BaselineModel {
    BaselineKind kind;
    ModelState model;
    Matrix seen_prototypes;  // embed_dim x |S|, proto_proto only
};

BaselineModel make_baseline(const BaselineKind& kind, ModelState model, const Dataset& ds,
                            std::uint64_t seed);

/// Joint scores in each method's native confidence units, deliberately
/// uncalibrated: the multi-class head contributes raw logits, the
/// nearest-neighbor and prototype sides contribute within-side softmax of
/// negative squared distances.
JointPrediction baseline_joint_predict(const BaselineModel& bm, const Dataset& ds,
                                       const GfslTask& task);

TaskPredictor make_baseline_predictor(const BaselineModel& bm, const Dataset& ds);

}  // namespace gfsl
