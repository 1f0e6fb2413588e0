#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gfsl/baselines.hpp"
#include "gfsl/dataset.hpp"
#include "gfsl/eval.hpp"
#include "gfsl/model.hpp"
#include "gfsl/trainer.hpp"

namespace gfsl {

/// Full default run configuration; every recognized field with its default.
nlohmann::json default_config();

/// Deep-merges `overrides` into `base`; unknown or mistyped fields raise
/// ConfigError naming the dotted path.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides,
                            const std::string& prefix = "");

/// Applies one `dot.path=value` override; the value parses as JSON with a
/// string fallback.
void apply_set(nlohmann::json& config, const std::string& assignment);

/// Canonical fingerprint of a command plus its effective config.
std::string config_fingerprint(const std::string& command, const nlohmann::json& config);

SyntheticSpec synthetic_from(const nlohmann::json& config);
ModelConfig model_from(const nlohmann::json& config);
PretrainConfig pretrain_from(const nlohmann::json& config);
TrainConfig train_from(const nlohmann::json& config);
EvalParams eval_from(const nlohmann::json& config);
CalibrateParams calibrate_from(const nlohmann::json& config);
BaselineKind baseline_from(const nlohmann::json& config);

}  // namespace gfsl
