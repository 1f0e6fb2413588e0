#include "gfsl/config.hpp"

#include "gfsl/errors.hpp"
#include "gfsl/fingerprint.hpp"

namespace gfsl {

using nlohmann::json;

json default_config() {
    return json{
        {"seed", nullptr},  // mandatory, no wallclock fallback
        {"out", ""},
        {"data", ""},
        {"checkpoint", ""},
        {"init", ""},
        {"report", ""},
        {"variant", "castle"},
        {"from_scratch", false},
        {"gamma", 0.0},
        {"baseline",
         {{"kind", ""}, {"lambda", 0.5}, {"seen_centroid_samples", 100}}},
        {"synthetic",
         {{"num_domains", 5},
          {"classes_per_domain", 8},
          {"instances_per_class", 60},
          {"feature_dim", 32},
          {"sigma_domain", 4.0},
          {"sigma_class", 1.5},
          {"sigma_noise", 0.6},
          {"unseen_val_classes", 5},
          {"unseen_test_classes", 10},
          {"aux_fraction", 0.25}}},
        {"model",
         {{"embed_dim", 16},
          {"hidden_dim", 32},
          {"dict_size", 128},
          {"logit_scale", 10.0},
          {"synth_mode", "pre-avg"},
          {"normalize_embeddings", false},
          {"attention_inv_sqrt_d", false},
          {"acastle_heads_attend_heads", false}}},
        {"pretrain",
         {{"epochs", 100},
          {"lr", 0.1},
          {"momentum", 0.9},
          {"batch_size", 128},
          {"plateau_epochs", 10},
          {"val_episodes", 200},
          {"val_way", 5},
          {"val_shot", 1},
          {"val_queries", 15}}},
        {"train",
         {{"way", 5},
          {"shot", 1},
          {"pool_way", 24},
          {"classifiers_per_batch", 64},
          {"eval_batch", 128},
          {"lr", 1e-4},
          {"momentum", 0.9},
          {"halve_every", 2000},
          {"total_batches", 10000},
          {"val_every", 500},
          {"val_tasks", 500},
          {"early_stop_stale", 20},
          {"grad_clip", 10.0},
          {"domain_fake_tasks", false},
          {"exemplars_per_class", 5},
          {"queries_per_class", 15}}},
        {"eval",
         {{"role", "unseen_test"},
          {"shot", 1},
          {"ways", json::array({5})},
          {"tasks", 1000},
          {"queries_per_class", 15},
          {"gamma", 0.0},
          {"single_domain", false},
          {"threads", 1}}},
        {"calibrate",
         {{"shot", 1}, {"way", 5}, {"tasks", 500}, {"queries_per_class", 15},
          {"grid_points", 257}}},
        {"adapt", {{"steps", 0}, {"lr", 0.01}}},
        {"ablate", {{"sizes", json::array({0, 8, 16, 32})}}},
    };
}

json merge_config(json base, const json& overrides, const std::string& prefix) {
    if (!overrides.is_object()) {
        throw ConfigError("config" + (prefix.empty() ? "" : " at '" + prefix + "'") +
                          " must be an object");
    }
    for (const auto& [key, value] : overrides.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) {
            throw ConfigError("unknown config field '" + path + "'");
        }
        json& slot = base[key];
        if (slot.is_object()) {
            slot = merge_config(slot, value, path);
        } else if (slot.is_null() || value.is_null()) {
            slot = value;
        } else if (slot.type() == value.type() ||
                   (slot.is_number() && value.is_number())) {
            slot = value;
        } else {
            throw ConfigError("config field '" + path + "' expects a " +
                              std::string(slot.type_name()) + ", got " + value.type_name());
        }
    }
    return base;
}

void apply_set(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("--set expects dot.path=value, got '" + assignment + "'");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // plain strings need no quoting
    }
    // Build a nested override object for the dotted path and merge it.
    json override_obj = value;
    std::size_t end = path.size();
    while (true) {
        const auto dot = path.rfind('.', end - 1);
        const std::string key =
            dot == std::string::npos ? path.substr(0, end) : path.substr(dot + 1, end - dot - 1);
        if (key.empty()) throw ConfigError("--set path '" + path + "' has an empty segment");
        override_obj = json{{key, override_obj}};
        if (dot == std::string::npos) break;
        end = dot;
    }
    config = merge_config(config, override_obj);
}

std::string config_fingerprint(const std::string& command, const json& config) {
    // Filesystem locations stay out of the fingerprint: it identifies the
    // experiment, and the input files are hashed separately by content.
    json canon = config;
    for (const char* key : {"out", "data", "checkpoint", "init", "report"}) canon[key] = "";
    return sha256_hex(command + "\n" + canon.dump());
}

SyntheticSpec synthetic_from(const json& config) {
    const json& s = config.at("synthetic");
    SyntheticSpec spec;
    spec.num_domains = s.at("num_domains").get<int>();
    spec.classes_per_domain = s.at("classes_per_domain").get<int>();
    spec.instances_per_class = s.at("instances_per_class").get<int>();
    spec.feature_dim = s.at("feature_dim").get<std::size_t>();
    spec.sigma_domain = s.at("sigma_domain").get<double>();
    spec.sigma_class = s.at("sigma_class").get<double>();
    spec.sigma_noise = s.at("sigma_noise").get<double>();
    spec.unseen_val_classes = s.at("unseen_val_classes").get<int>();
    spec.unseen_test_classes = s.at("unseen_test_classes").get<int>();
    spec.aux_fraction = s.at("aux_fraction").get<double>();
    spec.seed = config.at("seed").get<std::uint64_t>();
    return spec;
}

ModelConfig model_from(const json& config) {
    const json& m = config.at("model");
    ModelConfig cfg;
    cfg.embed_dim = m.at("embed_dim").get<std::size_t>();
    cfg.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    cfg.dict_size = m.at("dict_size").get<std::size_t>();
    cfg.logit_scale = m.at("logit_scale").get<double>();
    cfg.variant = parse_variant(config.at("variant").get<std::string>());
    const std::string mode = m.at("synth_mode").get<std::string>();
    if (mode != "pre-avg" && mode != "post-avg") {
        throw ConfigError("model.synth_mode must be pre-avg or post-avg");
    }
    cfg.synth_mode = mode == "post-avg" ? SynthMode::PostAvg : SynthMode::PreAvg;
    cfg.normalize_embeddings = m.at("normalize_embeddings").get<bool>();
    cfg.attention_inv_sqrt_d = m.at("attention_inv_sqrt_d").get<bool>();
    cfg.acastle_heads_attend_heads = m.at("acastle_heads_attend_heads").get<bool>();
    return cfg;
}

PretrainConfig pretrain_from(const json& config) {
    const json& p = config.at("pretrain");
    PretrainConfig cfg;
    cfg.epochs = p.at("epochs").get<int>();
    cfg.lr = p.at("lr").get<double>();
    cfg.momentum = p.at("momentum").get<double>();
    cfg.batch_size = p.at("batch_size").get<int>();
    cfg.plateau_epochs = p.at("plateau_epochs").get<int>();
    cfg.val_episodes = p.at("val_episodes").get<int>();
    cfg.val_way = p.at("val_way").get<int>();
    cfg.val_shot = p.at("val_shot").get<int>();
    cfg.val_queries = p.at("val_queries").get<int>();
    cfg.seed = config.at("seed").get<std::uint64_t>();
    return cfg;
}

TrainConfig train_from(const json& config) {
    const json& t = config.at("train");
    TrainConfig cfg;
    cfg.way = t.at("way").get<int>();
    cfg.shot = t.at("shot").get<int>();
    cfg.pool_way = t.at("pool_way").get<int>();
    cfg.classifiers_per_batch = t.at("classifiers_per_batch").get<int>();
    cfg.eval_batch = t.at("eval_batch").get<int>();
    cfg.lr = t.at("lr").get<double>();
    cfg.momentum = t.at("momentum").get<double>();
    cfg.halve_every = t.at("halve_every").get<int>();
    cfg.total_batches = t.at("total_batches").get<int>();
    cfg.val_every = t.at("val_every").get<int>();
    cfg.val_tasks = t.at("val_tasks").get<int>();
    cfg.early_stop_stale = t.at("early_stop_stale").get<int>();
    cfg.grad_clip = t.at("grad_clip").get<double>();
    cfg.domain_fake_tasks = t.at("domain_fake_tasks").get<bool>();
    cfg.exemplars_per_class = t.at("exemplars_per_class").get<int>();
    cfg.queries_per_class = t.at("queries_per_class").get<int>();
    cfg.seed = config.at("seed").get<std::uint64_t>();
    return cfg;
}

EvalParams eval_from(const json& config) {
    const json& e = config.at("eval");
    EvalParams p;
    const std::string role = e.at("role").get<std::string>();
    if (role == "unseen_test") {
        p.role = Role::UnseenTest;
    } else if (role == "unseen_val") {
        p.role = Role::UnseenVal;
    } else {
        throw ConfigError("eval.role must be unseen_test or unseen_val");
    }
    p.shot = e.at("shot").get<int>();
    p.ways = e.at("ways").get<std::vector<int>>();
    p.num_tasks = e.at("tasks").get<int>();
    p.queries_per_class = e.at("queries_per_class").get<int>();
    p.gamma = e.at("gamma").get<double>();
    p.single_domain = e.at("single_domain").get<bool>();
    p.threads = e.at("threads").get<int>();
    p.seed = config.at("seed").get<std::uint64_t>();
    return p;
}

CalibrateParams calibrate_from(const json& config) {
    const json& c = config.at("calibrate");
    CalibrateParams p;
    p.shot = c.at("shot").get<int>();
    p.way = c.at("way").get<int>();
    p.num_tasks = c.at("tasks").get<int>();
    p.queries_per_class = c.at("queries_per_class").get<int>();
    p.grid_points = c.at("grid_points").get<int>();
    p.seed = config.at("seed").get<std::uint64_t>();
    return p;
}

BaselineKind baseline_from(const json& config) {
    const json& b = config.at("baseline");
    BaselineKind kind;
    kind.tag = parse_baseline(b.at("kind").get<std::string>());
    kind.lambda = b.at("lambda").get<double>();
    kind.seen_centroid_samples = b.at("seen_centroid_samples").get<int>();
    return kind;
}

}  // namespace gfsl
