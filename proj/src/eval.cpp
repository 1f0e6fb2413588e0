#include "gfsl/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <thread>

#include <json.hpp>

#include "gfsl/errors.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"
#include "gfsl/synthesis.hpp"

namespace gfsl {

using nlohmann::json;

double harmonic_mean(double acc_s, double acc_u) {
    if (acc_s <= 0.0 || acc_u <= 0.0) return 0.0;
    return 2.0 * acc_s * acc_u / (acc_s + acc_u);
}

double delta_value(double acc_ss, double acc_sj, double acc_uu, double acc_uj) {
    return 0.5 * ((acc_ss - acc_sj) + (acc_uu - acc_uj));
}

TaskScores score_task(const JointPrediction& pred, const Dataset& ds, const GfslTask& task) {
    const Episode& ep = task.unseen;
    const std::size_t n_unseen = ep.query.size();
    const std::size_t n_total = n_unseen + task.seen_query.size();
    if (pred.seen_scores.rows() != n_total || pred.unseen_scores.rows() != n_total) {
        throw ShapeError("score_task: prediction rows " + std::to_string(pred.seen_scores.rows()) +
                         " vs " + std::to_string(n_total) + " test instances");
    }

    if (pred.seen_scores.cols() == 0 || pred.unseen_scores.cols() == 0) {
        throw ShapeError("score_task: a side of the joint prediction is empty");
    }

    auto best = [](std::span<const double> row, const std::vector<int>& ids, double& mx, int& arg) {
        mx = -std::numeric_limits<double>::infinity();
        arg = -1;
        for (std::size_t j = 0; j < row.size(); ++j) {
            // Ties resolve to the lowest class id whatever the column order.
            if (row[j] > mx || (row[j] == mx && ids[j] < arg)) {
                mx = row[j];
                arg = ids[j];
            }
        }
    };

    TaskScores out(n_total);
    for (std::size_t i = 0; i < n_total; ++i) {
        InstanceScore& s = out[i];
        if (i < n_unseen) {
            s.true_class = ds.instances[ep.query[i]].class_id;
            s.seen_role = false;
        } else {
            s.true_class = ds.instances[task.seen_query[i - n_unseen]].class_id;
            s.seen_role = true;
        }
        best(pred.seen_scores.row(i), pred.seen_class_ids, s.max_seen, s.arg_seen);
        best(pred.unseen_scores.row(i), pred.unseen_class_ids, s.max_unseen, s.arg_unseen);
        if (!std::isfinite(s.max_seen) || !std::isfinite(s.max_unseen)) {
            throw NumericError("score_task: non-finite joint score");
        }
    }
    return out;
}

namespace {

struct SideTotals {
    double seen_total = 0.0, unseen_total = 0.0;
};

SideTotals totals(const TaskScores& scores) {
    SideTotals t;
    for (const InstanceScore& s : scores) (s.seen_role ? t.seen_total : t.unseen_total) += 1.0;
    return t;
}

}  // namespace

TaskMetrics task_metrics(const TaskScores& scores, double gamma) {
    const SideTotals tot = totals(scores);
    TaskMetrics m;
    double joint_correct = 0.0, seen_joint = 0.0, unseen_joint = 0.0;
    double seen_restricted = 0.0, unseen_restricted = 0.0;
    for (const InstanceScore& s : scores) {
        const bool seen_side = s.max_seen - gamma >= s.max_unseen;
        const int predicted = seen_side ? s.arg_seen : s.arg_unseen;
        const bool correct = predicted == s.true_class;
        joint_correct += correct;
        if (s.seen_role) {
            seen_joint += correct;
            seen_restricted += s.arg_seen == s.true_class;
        } else {
            unseen_joint += correct;
            unseen_restricted += s.arg_unseen == s.true_class;
        }
    }
    m.mean_acc = scores.empty() ? 0.0 : joint_correct / static_cast<double>(scores.size());
    m.acc_seen_joint = tot.seen_total > 0 ? seen_joint / tot.seen_total : 0.0;
    m.acc_unseen_joint = tot.unseen_total > 0 ? unseen_joint / tot.unseen_total : 0.0;
    m.acc_seen_restricted = tot.seen_total > 0 ? seen_restricted / tot.seen_total : 0.0;
    m.acc_unseen_restricted = tot.unseen_total > 0 ? unseen_restricted / tot.unseen_total : 0.0;
    m.fsl_acc = m.acc_unseen_restricted;
    m.delta = delta_value(m.acc_seen_restricted, m.acc_seen_joint, m.acc_unseen_restricted,
                          m.acc_unseen_joint);
    m.harmonic = harmonic_mean(m.acc_seen_joint, m.acc_unseen_joint);
    m.ausuc = ausuc(scores);
    return m;
}

std::vector<CurvePoint> seen_unseen_curve(const TaskScores& scores) {
    if (scores.empty()) return {};
    const SideTotals tot = totals(scores);

    struct Item {
        double gap;
        bool seen_role, seen_ok, unseen_ok;
    };
    std::vector<Item> items;
    items.reserve(scores.size());
    for (const InstanceScore& s : scores) {
        items.push_back({s.max_seen - s.max_unseen, s.seen_role, s.arg_seen == s.true_class,
                         s.arg_unseen == s.true_class});
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.gap < b.gap; });

    // Start with every instance on the seen side, then raise gamma through
    // each breakpoint; instances flip in gap order. The sentinel endpoints
    // use finite gammas realizing the same configurations as -inf and +inf
    // so the points survive JSON serialization.
    double seen_correct = 0.0, unseen_correct = 0.0;
    for (const Item& it : items) {
        if (it.seen_role && it.seen_ok) seen_correct += 1.0;
    }
    std::vector<CurvePoint> curve;
    auto push = [&](double gamma) {
        curve.push_back({gamma, tot.seen_total > 0 ? seen_correct / tot.seen_total : 0.0,
                         tot.unseen_total > 0 ? unseen_correct / tot.unseen_total : 0.0});
    };
    push(items.front().gap);  // gap >= gamma everywhere: all seen
    std::size_t i = 0;
    while (i < items.size()) {
        std::size_t j = i;
        // Flip the whole group of equal gaps at once; the configuration with
        // these instances unseen-side holds for gamma just above their gap.
        while (j < items.size() && items[j].gap == items[i].gap) {
            if (items[j].seen_role && items[j].seen_ok) seen_correct -= 1.0;
            if (!items[j].seen_role && items[j].unseen_ok) unseen_correct += 1.0;
            ++j;
        }
        push(j < items.size()
                 ? items[j].gap
                 : std::nextafter(items.back().gap, std::numeric_limits<double>::infinity()));
        i = j;
    }
    return curve;
}

double ausuc(const TaskScores& scores) {
    const std::vector<CurvePoint> curve = seen_unseen_curve(scores);
    double area = 0.0;
    for (std::size_t k = 0; k + 1 < curve.size(); ++k) {
        const double dx = curve[k + 1].acc_unseen_joint - curve[k].acc_unseen_joint;
        area += dx * 0.5 * (curve[k].acc_seen_joint + curve[k + 1].acc_seen_joint);
    }
    return area;
}

TaskPredictor make_model_predictor(const ModelState& m, const Dataset& ds) {
    // The model is captured by reference by design: callers keep it alive and
    // immutable for the lifetime of the predictor.
    return [&m, &ds](const GfslTask& task) {
        const Episode& ep = task.unseen;
        const Matrix sup_emb = embed(m, ds.gather(ep.support));
        std::vector<int> support_labels(ep.support.size());
        for (std::size_t i = 0; i < ep.support.size(); ++i) {
            support_labels[i] = ds.instances[ep.support[i]].class_id;
        }
        const JointClassifier joint =
            synthesize_joint(m, sup_emb, support_labels, ep.shot, m.seen_class_ids);

        std::vector<std::size_t> test = ep.query;
        test.insert(test.end(), task.seen_query.begin(), task.seen_query.end());
        const Matrix test_emb = embed(m, ds.gather(test));
        const Matrix logits = score_batch(joint.columns, test_emb, m.cfg.logit_scale,
                                          m.cfg.normalize_embeddings);

        JointPrediction pred;
        const std::size_t heads = joint.head_count();
        pred.seen_class_ids.assign(joint.class_ids.begin(), joint.class_ids.begin() + heads);
        pred.unseen_class_ids.assign(joint.class_ids.begin() + heads, joint.class_ids.end());
        pred.seen_scores = Matrix(test.size(), heads);
        pred.unseen_scores = Matrix(test.size(), joint.class_ids.size() - heads);
        for (std::size_t r = 0; r < test.size(); ++r) {
            for (std::size_t c = 0; c < heads; ++c) pred.seen_scores(r, c) = logits(r, c);
            for (std::size_t c = heads; c < joint.class_ids.size(); ++c) {
                pred.unseen_scores(r, c - heads) = logits(r, c);
            }
        }
        return pred;
    };
}

namespace {

MetricStat stat_of(const std::vector<double>& xs) {
    MetricStat s;
    if (xs.empty()) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        const double stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1)) /
                               std::sqrt(static_cast<double>(xs.size()));
        s.ci95 = 1.96 * stderr_;
    }
    return s;
}

std::vector<CurvePoint> downsample_curve(const std::vector<CurvePoint>& curve,
                                         std::size_t max_points) {
    if (curve.size() <= max_points) return curve;
    std::vector<CurvePoint> out;
    const std::size_t step = (curve.size() + max_points - 1) / max_points;
    for (std::size_t i = 0; i < curve.size(); i += step) out.push_back(curve[i]);
    if (out.back().acc_unseen_joint != curve.back().acc_unseen_joint ||
        out.back().gamma != curve.back().gamma) {
        out.push_back(curve.back());
    }
    return out;
}

}  // namespace

EvalReport evaluate(const TaskPredictor& predictor, const Dataset& ds, const EvalParams& params) {
    EvalReport report;
    report.shot = params.shot;
    report.num_tasks = params.num_tasks;
    report.gamma = params.gamma;
    report.seed = params.seed;

    std::size_t task_counter = 0;
    for (std::size_t w = 0; w < params.ways.size(); ++w) {
        const int way = params.ways[w];
        std::vector<TaskMetrics> metrics(params.num_tasks);
        std::vector<TaskScores> all_scores(params.num_tasks);

        auto run_task = [&](int t, std::size_t index) {
            const GfslTask task =
                sample_gfsl_task(ds, params.role, params.shot, way, Rng::mix(params.seed, index),
                                 params.queries_per_class, params.single_domain);
            TaskScores scores = score_task(predictor(task), ds, task);
            metrics[t] = task_metrics(scores, params.gamma);
            if (w == 0) all_scores[t] = std::move(scores);
        };

        const int threads = std::max(1, params.threads);
        if (threads == 1) {
            for (int t = 0; t < params.num_tasks; ++t) run_task(t, task_counter + t);
        } else {
            std::atomic<int> next{0};
            std::vector<std::thread> pool;
            for (int k = 0; k < threads; ++k) {
                pool.emplace_back([&] {
                    for (int t = next.fetch_add(1); t < params.num_tasks; t = next.fetch_add(1)) {
                        run_task(t, task_counter + t);
                    }
                });
            }
            for (auto& th : pool) th.join();
        }
        task_counter += params.num_tasks;

        auto collect = [&](auto field) {
            std::vector<double> xs(metrics.size());
            for (std::size_t i = 0; i < metrics.size(); ++i) xs[i] = metrics[i].*field;
            return stat_of(xs);
        };
        SweepRow row;
        row.way = way;
        row.fsl_acc = collect(&TaskMetrics::fsl_acc);
        row.mean_acc = collect(&TaskMetrics::mean_acc);
        row.acc_seen_joint = collect(&TaskMetrics::acc_seen_joint);
        row.acc_unseen_joint = collect(&TaskMetrics::acc_unseen_joint);
        row.acc_seen_restricted = collect(&TaskMetrics::acc_seen_restricted);
        row.acc_unseen_restricted = collect(&TaskMetrics::acc_unseen_restricted);
        row.delta = collect(&TaskMetrics::delta);
        row.harmonic = collect(&TaskMetrics::harmonic);
        row.ausuc = collect(&TaskMetrics::ausuc);
        report.sweep.push_back(row);

        if (w == 0) {
            TaskScores pooled;
            for (const TaskScores& s : all_scores) pooled.insert(pooled.end(), s.begin(), s.end());
            report.curve = downsample_curve(seen_unseen_curve(pooled), 512);
        }
    }
    return report;
}

double calibrate(const TaskPredictor& predictor, const Dataset& ds,
                 const CalibrateParams& params) {
    std::vector<TaskScores> tasks(params.num_tasks);
    std::vector<double> gaps;
    for (int t = 0; t < params.num_tasks; ++t) {
        const GfslTask task = sample_gfsl_task(ds, Role::UnseenVal, params.shot, params.way,
                                               Rng::mix(params.seed, t), params.queries_per_class);
        tasks[t] = score_task(predictor(task), ds, task);
        for (const InstanceScore& s : tasks[t]) gaps.push_back(s.max_seen - s.max_unseen);
    }
    std::sort(gaps.begin(), gaps.end());

    std::vector<double> grid{0.0};
    if (!gaps.empty()) {
        const int points = std::max(2, params.grid_points);
        for (int i = 0; i < points; ++i) {
            const std::size_t q = static_cast<std::size_t>(
                (static_cast<double>(i) / (points - 1)) * (gaps.size() - 1));
            grid.push_back(gaps[q]);
            grid.push_back(std::nextafter(gaps[q], std::numeric_limits<double>::infinity()));
        }
        grid.push_back(gaps.front() - 1.0);
        grid.push_back(gaps.back() + 1.0);
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

    double best_gamma = 0.0, best_hm = -1.0;
    for (double g : grid) {
        double hm = 0.0;
        for (const TaskScores& scores : tasks) {
            const TaskMetrics m = task_metrics(scores, g);
            hm += m.harmonic;
        }
        hm /= static_cast<double>(tasks.size());
        const bool better = hm > best_hm;
        const bool tie_toward_zero =
            hm == best_hm && (std::fabs(g) < std::fabs(best_gamma) ||
                              (std::fabs(g) == std::fabs(best_gamma) && g < best_gamma));
        if (better || tie_toward_zero) {
            best_hm = hm;
            best_gamma = g;
        }
    }
    return best_gamma;
}

namespace {

json stat_json(const MetricStat& s) { return json{{"mean", s.mean}, {"ci95", s.ci95}}; }

MetricStat stat_from(const json& j) {
    return MetricStat{j.at("mean").get<double>(), j.at("ci95").get<double>()};
}

}  // namespace

void write_report(const EvalReport& report, const std::string& path) {
    json j;
    j["shot"] = report.shot;
    j["num_tasks"] = report.num_tasks;
    j["gamma"] = report.gamma;
    j["seed"] = report.seed;
    j["config_fingerprint"] = report.config_fingerprint;
    j["checkpoint_fingerprint"] = report.checkpoint_fingerprint;
    json sweep = json::array();
    for (const SweepRow& row : report.sweep) {
        sweep.push_back({{"way", row.way},
                         {"fsl_acc", stat_json(row.fsl_acc)},
                         {"mean_acc", stat_json(row.mean_acc)},
                         {"acc_seen_joint", stat_json(row.acc_seen_joint)},
                         {"acc_unseen_joint", stat_json(row.acc_unseen_joint)},
                         {"acc_seen_restricted", stat_json(row.acc_seen_restricted)},
                         {"acc_unseen_restricted", stat_json(row.acc_unseen_restricted)},
                         {"delta_value", stat_json(row.delta)},
                         {"harmonic_mean", stat_json(row.harmonic)},
                         {"ausuc", stat_json(row.ausuc)}});
    }
    j["sweep"] = sweep;
    json curve = json::array();
    for (const CurvePoint& p : report.curve) {
        curve.push_back(
            {{"gamma", p.gamma}, {"acc_seen_joint", p.acc_seen_joint},
             {"acc_unseen_joint", p.acc_unseen_joint}});
    }
    j["curve"] = curve;
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open report path '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

EvalReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open report '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("report '" + path + "': " + e.what());
    }
    EvalReport r;
    r.shot = j.at("shot").get<int>();
    r.num_tasks = j.at("num_tasks").get<int>();
    r.gamma = j.at("gamma").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.checkpoint_fingerprint = j.at("checkpoint_fingerprint").get<std::string>();
    for (const json& row : j.at("sweep")) {
        SweepRow s;
        s.way = row.at("way").get<int>();
        s.fsl_acc = stat_from(row.at("fsl_acc"));
        s.mean_acc = stat_from(row.at("mean_acc"));
        s.acc_seen_joint = stat_from(row.at("acc_seen_joint"));
        s.acc_unseen_joint = stat_from(row.at("acc_unseen_joint"));
        s.acc_seen_restricted = stat_from(row.at("acc_seen_restricted"));
        s.acc_unseen_restricted = stat_from(row.at("acc_unseen_restricted"));
        s.delta = stat_from(row.at("delta_value"));
        s.harmonic = stat_from(row.at("harmonic_mean"));
        s.ausuc = stat_from(row.at("ausuc"));
        r.sweep.push_back(s);
    }
    for (const json& p : j.at("curve")) {
        r.curve.push_back({p.at("gamma").get<double>(), p.at("acc_seen_joint").get<double>(),
                           p.at("acc_unseen_joint").get<double>()});
    }
    return r;
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open curve path '" + path + "' for writing");
    out << "gamma,acc_seen_joint,acc_unseen_joint\n";
    char buf[128];
    for (const CurvePoint& p : curve) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.gamma, p.acc_seen_joint,
                      p.acc_unseen_joint);
        out << buf;
    }
}

}  // namespace gfsl
