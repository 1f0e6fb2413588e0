#include "gfsl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gfsl/errors.hpp"

namespace gfsl {

void softmax_inplace(std::span<double> v) {
    if (v.empty()) return;
    const double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double l2_normalize_inplace(std::span<double> v) {
    const double n = l2_norm(v);
    if (n <= kNormEpsilon) {
        throw NumericError("l2_normalize: degenerate norm " + std::to_string(n));
    }
    for (double& x : v) x /= n;
    return n;
}

Matrix l2_normalize(const Matrix& v) {
    if (v.rows() != 1 && v.cols() != 1) {
        throw ShapeError("l2_normalize expects a row or column vector, got " +
                         std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
    }
    Matrix out = v;
    l2_normalize_inplace({out.data(), out.size()});
    return out;
}

double cross_entropy_with_grad(std::span<const double> logits, std::size_t label,
                               std::span<double> grad) {
    if (label >= logits.size()) {
        throw ShapeError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.size()) + " logits");
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double x : logits) sum += std::exp(x - m);
    const double log_z = m + std::log(sum);
    if (!grad.empty()) {
        for (std::size_t i = 0; i < logits.size(); ++i) {
            grad[i] = std::exp(logits[i] - log_z);
        }
        grad[label] -= 1.0;
    }
    return log_z - logits[label];
}

double cross_entropy(const Matrix& logits, std::size_t label) {
    if (logits.rows() != 1) {
        throw ShapeError("cross_entropy expects a 1-row logit matrix, got " +
                         std::to_string(logits.rows()) + " rows");
    }
    return cross_entropy_with_grad(logits.row(0), label, {});
}

double grad_check(const LossGradFn& loss_fn, std::vector<Matrix> params, double eps) {
    const LossAndGrads base = loss_fn(params);
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            double& x = params[p].storage()[i];
            const double saved = x;
            x = saved + eps;
            const double f_plus = loss_fn(params).loss;
            x = saved - eps;
            const double f_minus = loss_fn(params).loss;
            x = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double analytic = base.grads.at(p).storage()[i];
            const double denom = std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) {
        throw NumericError(std::string(what) + " contains a non-finite entry");
    }
}

}  // namespace gfsl
