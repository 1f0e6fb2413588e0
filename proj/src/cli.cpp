#include "gfsl/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "gfsl/baselines.hpp"
#include "gfsl/config.hpp"
#include "gfsl/errors.hpp"
#include "gfsl/fingerprint.hpp"
#include "gfsl/rng.hpp"

namespace gfsl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t parse_u64(const std::string& s, const char* what) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string(what) + " expects an unsigned integer, got '" + s + "'");
    }
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
}

std::string require_path(const json& config, const char* key, const char* why) {
    const std::string path = config.at(key).get<std::string>();
    if (path.empty()) throw ConfigError(std::string("config field '") + key + "' required " + why);
    return path;
}

Dataset load_data(const json& config, json& input_hashes) {
    const std::string path = require_path(config, "data", "to locate the dataset");
    if (!fs::exists(path)) throw ConfigError("dataset path '" + path + "' does not exist");
    input_hashes[path] = sha256_file(path);
    return load_dataset(path);
}

ModelState load_model(const json& config, const char* key, json& input_hashes) {
    const std::string path = require_path(config, key, "to locate the checkpoint");
    if (!fs::exists(path)) throw ConfigError("checkpoint path '" + path + "' does not exist");
    input_hashes[path] = sha256_file(path);
    return load_checkpoint(path);
}

std::string ensure_out(const json& config) {
    const std::string out = require_path(config, "out", "to place artifacts");
    fs::create_directories(out);
    return out;
}

void write_manifest(const std::string& out, const std::string& command,
                    const std::string& fingerprint, const json& input_hashes,
                    const std::vector<std::string>& outputs) {
    json manifest{{"command", command},
                  {"config_fingerprint", fingerprint},
                  {"inputs", input_hashes},
                  {"outputs", outputs}};
    std::ofstream f(out + "/run_manifest.json");
    f << manifest.dump(2) << "\n";
}

// Re-stamps the training-time knobs onto a loaded checkpoint; the embedding
// architecture always comes from the checkpoint itself.
ModelState restamp(ModelState m, const json& config) {
    const ModelConfig wanted = model_from(config);
    m.cfg.variant = wanted.variant;
    m.cfg.synth_mode = wanted.synth_mode;
    m.cfg.logit_scale = wanted.logit_scale;
    m.cfg.normalize_embeddings = wanted.normalize_embeddings;
    m.cfg.attention_inv_sqrt_d = wanted.attention_inv_sqrt_d;
    m.cfg.acastle_heads_attend_heads = wanted.acastle_heads_attend_heads;
    if (wanted.dict_size != m.cfg.dict_size) {
        m.cfg.dict_size = wanted.dict_size;
        Rng rng = Rng(config.at("seed").get<std::uint64_t>()).stream(0xd1c7);
        const double bound = 1.0 / std::sqrt(static_cast<double>(m.cfg.embed_dim));
        m.bases = Matrix(wanted.dict_size, m.cfg.embed_dim);
        for (double& v : m.bases.storage()) v = rng.next_uniform(-bound, bound);
    }
    return m;
}

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
    std::ofstream f(path);
    for (const TrainLogEntry& e : log) {
        json rec{{"batch", e.batch}, {"loss", e.loss}, {"lr", e.lr},
                 {"val_hm", e.val_hm < 0.0 ? json() : json(e.val_hm)},
                 {"wallclock_ms", e.wallclock_ms}};
        f << rec.dump() << "\n";
    }
}

TaskPredictor make_predictor(const json& config, const ModelState& model,
                             const BaselineModel* baseline, const Dataset& ds) {
    if (baseline) return make_baseline_predictor(*baseline, ds);
    const int steps = config.at("adapt").at("steps").get<int>();
    if (steps > 0) {
        return make_adapted_predictor(model, ds, steps, config.at("adapt").at("lr").get<double>());
    }
    return make_model_predictor(model, ds);
}

void cmd_gen_data(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    const Dataset ds = gen_synthetic(synthetic_from(config));
    save_dataset(ds, out + "/dataset.jsonl");
    write_manifest(out, "gen-data", fp, json::object(), {"dataset.jsonl"});
}

void cmd_pretrain(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    json inputs = json::object();
    const Dataset ds = load_data(config, inputs);
    ModelConfig mcfg = model_from(config);
    mcfg.input_dim = ds.feature_dim;
    PretrainResult result = pretrain(ds, mcfg, pretrain_from(config));
    result.model.config_fingerprint = fp;
    save_checkpoint(result.model, out + "/checkpoint.json");
    json summary{{"best_epoch", result.best_epoch},
                 {"val_scores", result.val_scores},
                 {"train_accuracy", result.train_accuracy}};
    std::ofstream(out + "/pretrain_summary.json") << summary.dump(2) << "\n";
    write_manifest(out, "pretrain", fp, inputs, {"checkpoint.json", "pretrain_summary.json"});
}

void cmd_train(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    json inputs = json::object();
    const Dataset ds = load_data(config, inputs);
    const TrainConfig tcfg = train_from(config);

    ModelState m0;
    if (config.at("from_scratch").get<bool>()) {
        ModelConfig mcfg = model_from(config);
        mcfg.input_dim = ds.feature_dim;
        m0 = init_model(mcfg, ds, tcfg.seed);
    } else {
        m0 = restamp(load_model(config, "init", inputs), config);
    }

    std::vector<std::string> outputs{"checkpoint.json"};
    ModelState trained;
    const std::string kind = config.at("baseline").at("kind").get<std::string>();
    if (kind.empty()) {
        TrainResult result = train(ds, m0, tcfg);
        trained = std::move(result.model);
        write_train_log(out + "/train_log.jsonl", result.log);
        outputs.push_back("train_log.jsonl");
    } else if (kind == "proto_proto") {
        trained = protonet_train(ds, m0, tcfg);
    } else if (kind == "mc_proto") {
        trained = mcproto_train(ds, m0, tcfg, config.at("baseline").at("lambda").get<double>());
    } else if (kind == "mc_knn") {
        throw ConfigError("mc_knn has no training stage; evaluate the pretrained checkpoint");
    } else {
        parse_baseline(kind);  // throws with the offending name
    }
    trained.config_fingerprint = fp;
    save_checkpoint(trained, out + "/checkpoint.json");
    write_manifest(out, "train", fp, inputs, outputs);
}

void cmd_eval(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    json inputs = json::object();
    const Dataset ds = load_data(config, inputs);
    const ModelState model = load_model(config, "checkpoint", inputs);

    const std::string kind = config.at("baseline").at("kind").get<std::string>();
    BaselineModel baseline;
    if (!kind.empty()) {
        baseline = make_baseline(baseline_from(config), model, ds,
                                 config.at("seed").get<std::uint64_t>());
    }
    const TaskPredictor predictor =
        make_predictor(config, model, kind.empty() ? nullptr : &baseline, ds);

    EvalReport report = evaluate(predictor, ds, eval_from(config));
    report.config_fingerprint = fp;
    report.checkpoint_fingerprint = model.config_fingerprint;
    write_report(report, out + "/report.json");
    write_curve_csv(report.curve, out + "/curve.csv");
    write_manifest(out, "eval", fp, inputs, {"report.json", "curve.csv"});
}

void cmd_calibrate(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    json inputs = json::object();
    const Dataset ds = load_data(config, inputs);
    const ModelState model = load_model(config, "checkpoint", inputs);

    const std::string kind = config.at("baseline").at("kind").get<std::string>();
    BaselineModel baseline;
    if (!kind.empty()) {
        baseline = make_baseline(baseline_from(config), model, ds,
                                 config.at("seed").get<std::uint64_t>());
    }
    const TaskPredictor predictor =
        make_predictor(config, model, kind.empty() ? nullptr : &baseline, ds);

    const double gamma = calibrate(predictor, ds, calibrate_from(config));
    json result{{"gamma", gamma},
                {"config_fingerprint", fp},
                {"checkpoint_fingerprint", model.config_fingerprint}};
    std::ofstream(out + "/calibration.json") << result.dump(2) << "\n";
    write_manifest(out, "calibrate", fp, inputs, {"calibration.json"});
}

void cmd_ablate(const json& config, const std::string& fp) {
    const std::string out = ensure_out(config);
    json inputs = json::object();
    const Dataset ds = load_data(config, inputs);
    const ModelState init = load_model(config, "init", inputs);
    const TrainConfig tcfg = train_from(config);
    const std::vector<int> sizes = config.at("ablate").at("sizes").get<std::vector<int>>();

    std::ofstream csv(out + "/ablate.csv");
    csv << "dict_size,fsl_acc,fsl_acc_ci95,harmonic_mean,harmonic_mean_ci95\n";
    char buf[256];
    for (int size : sizes) {
        json sized = config;
        sized["model"]["dict_size"] = size;
        const ModelState m0 = restamp(init, sized);
        TrainResult result = train(ds, m0, tcfg);
        const EvalReport report =
            evaluate(make_model_predictor(result.model, ds), ds, eval_from(config));
        const SweepRow& row = report.sweep.front();
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", size, row.fsl_acc.mean,
                      row.fsl_acc.ci95, row.harmonic.mean, row.harmonic.ci95);
        csv << buf;
    }
    csv.close();
    write_manifest(out, "ablate-dict", fp, inputs, {"ablate.csv"});
}

void cmd_report(const json& config) {
    std::string path = config.at("report").get<std::string>();
    if (path.empty()) path = require_path(config, "checkpoint", "to locate the report");
    const EvalReport r = load_report(path);
    std::printf("shot=%d tasks=%d gamma=%.6g seed=%llu\n", r.shot, r.num_tasks, r.gamma,
                static_cast<unsigned long long>(r.seed));
    std::printf("%4s %16s %16s %16s %16s %16s %16s %16s\n", "way", "fsl", "mean_acc",
                "seen->joint", "unseen->joint", "delta", "harmonic", "ausuc");
    for (const SweepRow& row : r.sweep) {
        auto cell = [](const MetricStat& s) {
            char b[64];
            std::snprintf(b, sizeof(b), "%.4f±%.4f", s.mean, s.ci95);
            return std::string(b);
        };
        std::printf("%4d %16s %16s %16s %16s %16s %16s %16s\n", row.way,
                    cell(row.fsl_acc).c_str(), cell(row.mean_acc).c_str(),
                    cell(row.acc_seen_joint).c_str(), cell(row.acc_unseen_joint).c_str(),
                    cell(row.delta).c_str(), cell(row.harmonic).c_str(),
                    cell(row.ausuc).c_str());
    }
}

}  // namespace

json build_effective_config(const CliOptions& opts) {
    json config = default_config();
    if (!opts.config_path.empty()) {
        config = merge_config(config, load_config_file(opts.config_path));
    }
    for (const std::string& s : opts.sets) apply_set(config, s);

    if (!opts.seed.empty()) config["seed"] = parse_u64(opts.seed, "--seed");
    if (!opts.variant.empty()) config["variant"] = opts.variant;
    if (!opts.shot.empty()) {
        const int k = static_cast<int>(parse_u64(opts.shot, "--shot"));
        config["train"]["shot"] = k;
        config["eval"]["shot"] = k;
        config["calibrate"]["shot"] = k;
    }
    if (!opts.way.empty()) {
        const int n = static_cast<int>(parse_u64(opts.way, "--way"));
        config["train"]["way"] = n;
        config["eval"]["ways"] = json::array({n});
        config["calibrate"]["way"] = n;
    }
    if (!opts.tasks.empty()) {
        config["eval"]["tasks"] = static_cast<int>(parse_u64(opts.tasks, "--tasks"));
    }
    if (!opts.threads.empty()) {
        config["eval"]["threads"] = static_cast<int>(parse_u64(opts.threads, "--threads"));
    }
    if (!opts.out.empty()) config["out"] = opts.out;
    if (!opts.data.empty()) config["data"] = opts.data;
    if (!opts.checkpoint.empty()) config["checkpoint"] = opts.checkpoint;
    if (!opts.init.empty()) config["init"] = opts.init;
    if (!opts.baseline.empty()) config["baseline"]["kind"] = opts.baseline;
    if (!opts.report.empty()) config["report"] = opts.report;
    if (!opts.gamma.empty()) {
        try {
            config["eval"]["gamma"] = std::stod(opts.gamma);
        } catch (const std::exception&) {
            throw ConfigError("--gamma expects a real number, got '" + opts.gamma + "'");
        }
    }
    if (opts.from_scratch) config["from_scratch"] = true;
    if (opts.single_domain) config["eval"]["single_domain"] = true;

    parse_variant(config.at("variant").get<std::string>());
    if (opts.command != "report" && config.at("seed").is_null()) {
        throw ConfigError("a seed is mandatory: pass --seed or set 'seed' in the config");
    }
    return config;
}

void run_command(const std::string& command, const json& config) {
    const std::string fp = config_fingerprint(command, config);
    if (command == "gen-data") {
        cmd_gen_data(config, fp);
    } else if (command == "pretrain") {
        cmd_pretrain(config, fp);
    } else if (command == "train") {
        cmd_train(config, fp);
    } else if (command == "eval") {
        cmd_eval(config, fp);
    } else if (command == "calibrate") {
        cmd_calibrate(config, fp);
    } else if (command == "ablate-dict") {
        cmd_ablate(config, fp);
    } else if (command == "report") {
        cmd_report(config);
    } else {
        throw ConfigError("unknown command '" + command + "'");
    }
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"classifier-synthesis learning for generalized few-shot evaluation"};
    CliOptions opts;
    app.add_option("command", opts.command,
                   "gen-data | pretrain | train | eval | calibrate | ablate-dict | report")
        ->required();
    app.add_option("--config", opts.config_path, "JSON config file");
    app.add_option("--seed", opts.seed, "run seed (mandatory, no wallclock seeding)");
    app.add_option("--variant", opts.variant, "castle | acastle | castle-minus");
    app.add_option("--shot", opts.shot, "shots per class");
    app.add_option("--way", opts.way, "classes per task");
    app.add_option("--tasks", opts.tasks, "evaluation task count");
    app.add_option("--threads", opts.threads, "evaluation threads");
    app.add_option("--out", opts.out, "output directory");
    app.add_option("--data", opts.data, "dataset file");
    app.add_option("--checkpoint", opts.checkpoint, "checkpoint to evaluate/calibrate");
    app.add_option("--init", opts.init, "initialization checkpoint for train/ablate-dict");
    app.add_option("--baseline", opts.baseline, "mc_knn | proto_proto | mc_proto");
    app.add_option("--gamma", opts.gamma, "calibration offset for eval");
    app.add_option("--report", opts.report, "report file for the report command");
    app.add_flag("--from-scratch", opts.from_scratch, "skip pretrained initialization");
    app.add_flag("--single-domain", opts.single_domain, "restrict task support to one domain");
    app.add_option("--set", opts.sets, "dot.path=value config override")->take_all();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        run_command(opts.command, build_effective_config(opts));
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const CapacityError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace gfsl
