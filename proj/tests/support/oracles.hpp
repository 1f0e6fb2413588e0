#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "gfsl/dataset.hpp"
#include "gfsl/eval.hpp"
#include "gfsl/model.hpp"

namespace testsupport {

/// Brute-force nearest-class-mean classifier over raw features; class means
/// use every instance of the class. Returns accuracy over all instances.
inline double nearest_class_mean_accuracy(const gfsl::Dataset& ds) {
    std::map<int, std::vector<double>> means;
    std::map<int, int> counts;
    for (const gfsl::Instance& in : ds.instances) {
        auto& mu = means[in.class_id];
        mu.resize(ds.feature_dim, 0.0);
        for (std::size_t j = 0; j < ds.feature_dim; ++j) mu[j] += in.features[j];
        ++counts[in.class_id];
    }
    for (auto& [c, mu] : means) {
        for (double& v : mu) v /= counts[c];
    }
    double correct = 0.0;
    for (const gfsl::Instance& in : ds.instances) {
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& [c, mu] : means) {
            double d = 0.0;
            for (std::size_t j = 0; j < ds.feature_dim; ++j) {
                const double diff = in.features[j] - mu[j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        correct += best == in.class_id ? 1.0 : 0.0;
    }
    return correct / static_cast<double>(ds.instances.size());
}

/// Central finite differences are only valid where the loss is smooth, so
/// gradient-check fixtures shift hidden-unit biases until no rectifier
/// pre-activation on the probe rows sits inside the kink window.
inline void ensure_relu_margin(gfsl::ModelState& m, const gfsl::Dataset& ds,
                               const std::vector<std::size_t>& rows, double margin = 5e-3) {
    if (m.embed.weights.size() < 2) return;
    const gfsl::Matrix x = ds.gather(rows);
    for (int pass = 0; pass < 32; ++pass) {
        const gfsl::Matrix pre = matmul(x, m.embed.weights[0]);
        bool moved = false;
        for (std::size_t j = 0; j < m.embed.biases[0].cols(); ++j) {
            for (std::size_t r = 0; r < pre.rows(); ++r) {
                if (std::fabs(pre(r, j) + m.embed.biases[0](0, j)) < margin) {
                    m.embed.biases[0](0, j) += 2.0 * margin;
                    moved = true;
                    break;
                }
            }
        }
        if (!moved) return;
    }
}

/// AUSUC by exhaustive rescan: every gap value is tried as a threshold plus a
/// beyond-max sentinel, accuracies recomputed from scratch each time.
inline double ausuc_oracle(const gfsl::TaskScores& scores) {
    std::vector<double> thresholds;
    for (const gfsl::InstanceScore& s : scores) thresholds.push_back(s.max_seen - s.max_unseen);
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    if (thresholds.empty()) return 0.0;
    thresholds.push_back(thresholds.back() + 1.0);

    double seen_total = 0.0, unseen_total = 0.0;
    for (const gfsl::InstanceScore& s : scores) (s.seen_role ? seen_total : unseen_total) += 1.0;

    std::vector<std::pair<double, double>> points;  // (acc_unseen, acc_seen)
    for (double gamma : thresholds) {
        double seen_ok = 0.0, unseen_ok = 0.0;
        for (const gfsl::InstanceScore& s : scores) {
            const bool seen_side = s.max_seen - gamma >= s.max_unseen;
            if (s.seen_role && seen_side && s.arg_seen == s.true_class) seen_ok += 1.0;
            if (!s.seen_role && !seen_side && s.arg_unseen == s.true_class) unseen_ok += 1.0;
        }
        points.emplace_back(unseen_total > 0 ? unseen_ok / unseen_total : 0.0,
                            seen_total > 0 ? seen_ok / seen_total : 0.0);
    }
    std::sort(points.begin(), points.end(),
              [](const auto& a, const auto& b) {
                  return a.first < b.first || (a.first == b.first && a.second > b.second);
              });
    double area = 0.0;
    for (std::size_t k = 0; k + 1 < points.size(); ++k) {
        area += (points[k + 1].first - points[k].first) * 0.5 *
                (points[k].second + points[k + 1].second);
    }
    return area;
}

}  // namespace testsupport
