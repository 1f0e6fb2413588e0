#pragma once

#include <functional>
#include <span>
#include <vector>

#include "gfsl/matrix.hpp"

namespace gfsl {

inline constexpr double kNormEpsilon = 1e-12;

/// Row-wise stable softmax (max subtraction per row).
Matrix softmax_rows(const Matrix& m);

/// In-place stable softmax over a contiguous span.
void softmax_inplace(std::span<double> v);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Scales a single row or column vector to unit L2 norm. Throws NumericError
/// when the norm is below kNormEpsilon.
Matrix l2_normalize(const Matrix& v);

/// In-place variant over a span; returns the original norm.
double l2_normalize_inplace(std::span<double> v);

/// -log softmax(logits)[label] for a single row of logits.
double cross_entropy(const Matrix& logits, std::size_t label);

/// Softmax cross-entropy over a raw logit span; writes dL/dlogits into grad
/// when non-null (probabilities minus one-hot).
double cross_entropy_with_grad(std::span<const double> logits, std::size_t label,
                               std::span<double> grad);

/// Loss and analytic gradients for a list of parameter matrices.
struct LossAndGrads {
    double loss = 0.0;
    std::vector<Matrix> grads;
};
using LossGradFn = std::function<LossAndGrads(const std::vector<Matrix>&)>;

/// Central finite differences on every coordinate of every parameter block.
/// Returns max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double grad_check(const LossGradFn& loss_fn, std::vector<Matrix> params, double eps);

/// Throws NumericError if any entry of m is NaN/Inf. `what` names the tensor.
void require_finite(const Matrix& m, const char* what);

}  // namespace gfsl
