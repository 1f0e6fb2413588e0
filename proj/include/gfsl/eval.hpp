#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gfsl/dataset.hpp"
#include "gfsl/matrix.hpp"
#include "gfsl/model.hpp"

namespace gfsl {

/// Joint scores for the test instances of one task. Row order is the task's
/// unseen queries followed by its seen queries; columns are grouped per side.
struct JointPrediction {
    Matrix seen_scores;    // n_test x |seen ids|
    Matrix unseen_scores;  // n_test x |unseen ids|
    std::vector<int> seen_class_ids;
    std::vector<int> unseen_class_ids;
};

using TaskPredictor = std::function<JointPrediction(const GfslTask&)>;

/// Per-instance reduction of a joint prediction: the best score and arg class
/// on each side. Ties resolve to the lowest class id.
struct InstanceScore {
    int true_class = -1;
    bool seen_role = false;
    double max_seen = 0.0;
    int arg_seen = -1;
    double max_unseen = 0.0;
    int arg_unseen = -1;
};
using TaskScores = std::vector<InstanceScore>;

TaskScores score_task(const JointPrediction& pred, const Dataset& ds, const GfslTask& task);

/// 2ab/(a+b); 0 when either argument is 0.
double harmonic_mean(double acc_s, double acc_u);

/// Mean accuracy drop from restricted to joint label space.
double delta_value(double acc_ss, double acc_sj, double acc_uu, double acc_uj);

struct CurvePoint {
    double gamma = 0.0;
    double acc_seen_joint = 0.0;
    double acc_unseen_joint = 0.0;
};

/// Staircase of joint per-side accuracies as the calibration offset sweeps
/// the exact score-gap breakpoints from all-seen to all-unseen.
std::vector<CurvePoint> seen_unseen_curve(const TaskScores& scores);

/// Area under the seen-unseen curve, trapezoid over the exact breakpoints.
double ausuc(const TaskScores& scores);

/// All per-task metrics at one calibration offset.
struct TaskMetrics {
    double fsl_acc = 0.0;
    double mean_acc = 0.0;
    double acc_seen_joint = 0.0;
    double acc_unseen_joint = 0.0;
    double acc_seen_restricted = 0.0;
    double acc_unseen_restricted = 0.0;
    double delta = 0.0;
    double harmonic = 0.0;
    double ausuc = 0.0;
};
TaskMetrics task_metrics(const TaskScores& scores, double gamma);

struct MetricStat {
    double mean = 0.0;
    double ci95 = 0.0;  // 1.96 * stderr over tasks
};

struct SweepRow {
    int way = 0;
    MetricStat fsl_acc, mean_acc, acc_seen_joint, acc_unseen_joint, acc_seen_restricted,
        acc_unseen_restricted, delta, harmonic, ausuc;
};

struct EvalReport {
    int shot = 1;
    int num_tasks = 0;
    double gamma = 0.0;
    std::uint64_t seed = 0;
    std::vector<SweepRow> sweep;
    std::vector<CurvePoint> curve;  // pooled over the first way's tasks
    std::string config_fingerprint;
    std::string checkpoint_fingerprint;
};

struct EvalParams {
    Role role = Role::UnseenTest;
    int shot = 1;
    std::vector<int> ways = {5};
    int num_tasks = 1000;
    int queries_per_class = 15;
    double gamma = 0.0;
    bool single_domain = false;
    int threads = 1;
    std::uint64_t seed = 0;
};

/// Samples num_tasks tasks per way (per-task seed = mix(seed, task index)),
/// applies gamma to the seen scores of every metric except AUSUC.
EvalReport evaluate(const TaskPredictor& predictor, const Dataset& ds, const EvalParams& params);

struct CalibrateParams {
    int shot = 1;
    int way = 5;
    int num_tasks = 500;
    int queries_per_class = 15;
    int grid_points = 257;
    std::uint64_t seed = 0;
};

/// Grid search (grid always contains 0) for the offset maximizing the mean
/// per-task harmonic mean over unseen-val tasks. Ties break toward 0.
double calibrate(const TaskPredictor& predictor, const Dataset& ds, const CalibrateParams& params);

/// Predictor for a dictionary model: synthesizes the joint classifier from
/// the task support and scores every test instance with the shared rule.
TaskPredictor make_model_predictor(const ModelState& m, const Dataset& ds);

void write_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);
void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path);

}  // namespace gfsl
