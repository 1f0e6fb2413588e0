#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gfsl/errors.hpp"
#include "gfsl/matrix.hpp"
#include "gfsl/numerics.hpp"
#include "gfsl/rng.hpp"

using namespace gfsl;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.storage()) v = scale * rng.next_uniform(-1.0, 1.0);
    return m;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    Rng rng(11);
    const Matrix a = random_matrix(2, 2, rng);
    CHECK(matmul(Matrix::identity(2), a) == a);
    Matrix zero(2, 2);
    CHECK(matmul(zero, a) == zero);
}

TEST_CASE("matmul hand-computed product") {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{5, 6}, {7, 8}};
    const Matrix expect{{19, 22}, {43, 50}};
    CHECK(max_abs_diff(matmul(a, b), expect) == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    const Matrix a(2, 3), b(2, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("2x2") != std::string::npos);
    }
}

TEST_CASE("matmul associativity on random 3-chains") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n1 = 1 + rng.next_index(6), n2 = 1 + rng.next_index(6),
                          n3 = 1 + rng.next_index(6), n4 = 1 + rng.next_index(6);
        const Matrix a = random_matrix(n1, n2, rng), b = random_matrix(n2, n3, rng),
                     c = random_matrix(n3, n4, rng);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        double scale = 1e-12;
        for (double v : left.storage()) scale = std::max(scale, std::fabs(v));
        CHECK(max_abs_diff(left, right) / scale < 1e-9);
    }
}

TEST_CASE("softmax rows: symmetry, shift invariance, closed form") {
    const Matrix sym{{0.37, 0.37, 0.37}};
    const Matrix p = softmax_rows(sym);
    for (double v : p.storage()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Rng rng(3);
    for (int rep = 0; rep < 100; ++rep) {
        Matrix row = random_matrix(1, 4, rng, 5.0);
        Matrix shifted = row;
        const double k = rng.next_uniform(-100.0, 100.0);
        for (double& v : shifted.storage()) v += k;
        CHECK(max_abs_diff(softmax_rows(row), softmax_rows(shifted)) < 1e-12);
    }

    const Matrix two{{0.0, std::log(3.0)}};
    const Matrix q = softmax_rows(two);
    CHECK(q(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(q(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows stay on the simplex") {
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        const Matrix m = random_matrix(3, 5, rng, 50.0);
        const Matrix p = softmax_rows(m);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double sum = 0.0;
            for (double v : p.row(r)) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("l2_normalize basics") {
    const Matrix e1 = Matrix::col_vector({1, 0, 0});
    CHECK(max_abs_diff(l2_normalize(e1), e1) == 0.0);

    const Matrix v = Matrix::col_vector({3, 4});
    const Matrix u = l2_normalize(v);
    CHECK(u(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(u(1, 0) == doctest::Approx(0.8).epsilon(1e-12));

    CHECK(max_abs_diff(l2_normalize(v * 2.0), u) < 1e-15);

    CHECK_THROWS_AS(l2_normalize(Matrix::col_vector({0, 0, 0})), NumericError);
}

TEST_CASE("l2_normalize is idempotent with unit output norm") {
    Rng rng(17);
    for (int rep = 0; rep < 200; ++rep) {
        const Matrix v = random_matrix(5, 1, rng, 10.0);
        const Matrix u = l2_normalize(v);
        CHECK(std::fabs(l2_norm({u.data(), u.size()}) - 1.0) < 1e-9);
        CHECK(max_abs_diff(l2_normalize(u), u) < 1e-12);
    }
}

TEST_CASE("cross_entropy closed forms") {
    const Matrix uniform(1, 7, std::vector<double>(7, 1.3));
    CHECK(cross_entropy(uniform, 3) == doctest::Approx(std::log(7.0)).epsilon(1e-12));

    Matrix peaked(1, 4);
    peaked(0, 2) = 1e3;
    CHECK(cross_entropy(peaked, 2) == doctest::Approx(0.0).epsilon(1e-10));

    const Matrix two{{0.0, std::log(3.0)}};
    CHECK(cross_entropy(two, 1) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(two, 2), ShapeError);
}

TEST_CASE("grad_check accepts the quadratic gradient and flags a wrong one") {
    Rng rng(23);
    const Matrix x0 = random_matrix(3, 2, rng);

    const LossGradFn good = [](const std::vector<Matrix>& params) {
        LossAndGrads out;
        for (double v : params[0].storage()) out.loss += 0.5 * v * v;
        out.grads.push_back(params[0]);
        return out;
    };
    CHECK(grad_check(good, {x0}, 1e-5) < 1e-8);

    const LossGradFn wrong = [](const std::vector<Matrix>& params) {
        LossAndGrads out;
        for (double v : params[0].storage()) out.loss += 0.5 * v * v;
        out.grads.push_back(params[0] * 2.0);
        return out;
    };
    CHECK(grad_check(wrong, {x0}, 1e-5) > 0.3);
}

TEST_CASE("cross_entropy_with_grad matches finite differences") {
    Rng rng(29);
    const LossGradFn fn = [](const std::vector<Matrix>& params) {
        LossAndGrads out;
        Matrix grad(1, params[0].cols());
        out.loss = cross_entropy_with_grad(params[0].row(0), 1, grad.row(0));
        out.grads.push_back(grad);
        return out;
    };
    for (int rep = 0; rep < 20; ++rep) {
        CHECK(grad_check(fn, {random_matrix(1, 6, rng, 2.0)}, 1e-5) < 1e-7);
    }
}
