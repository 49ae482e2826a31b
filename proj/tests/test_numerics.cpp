#include "doctest.h"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

#include "moeforge/numerics.hpp"
#include "moeforge/rng.hpp"

using namespace moeforge;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.gaussian();
    return m;
}

// Independent oracle: full singular values via Eigen's two-sided Jacobi.
std::vector<double> eigen_singular_values(const Matrix& m) {
    Eigen::MatrixXd em(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) em(r, c) = m(r, c);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(em);
    std::vector<double> out(svd.singularValues().data(),
                            svd.singularValues().data() + svd.singularValues().size());
    return out;
}

double tail_formula(const std::vector<double>& sigma, std::size_t r) {
    double acc = 0.0;
    for (std::size_t i = r; i < sigma.size(); ++i) acc += sigma[i] * sigma[i];
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("cosine similarity basics") {
    const std::vector<double> a{3.0, 4.0};
    CHECK(cosine_similarity(a, a) == 1.0);

    const std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0};
    CHECK(cosine_similarity(e1, e2) == doctest::Approx(0.0).epsilon(1e-15));

    const std::vector<double> v{1.0, 1.0};
    CHECK(cosine_similarity(e1, v) == doctest::Approx(0.70710678).epsilon(1e-9));
}

TEST_CASE("cosine similarity rejects zero vectors and length mismatch") {
    const std::vector<double> z{0.0, 0.0}, a{1.0, 2.0}, b{1.0};
    CHECK_THROWS_AS(cosine_similarity(z, a), std::invalid_argument);
    CHECK_THROWS_AS(cosine_similarity(a, z), std::invalid_argument);
    CHECK_THROWS_AS(cosine_similarity(a, b), std::invalid_argument);
}

TEST_CASE("cosine similarity is symmetric and scale invariant") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> u(8), v(8);
        for (double& x : u) x = rng.gaussian();
        for (double& x : v) x = rng.gaussian();
        const double c = rng.uniform(0.1, 10.0);
        std::vector<double> cu = u;
        for (double& x : cu) x *= c;
        CHECK(cosine_similarity(u, v) == doctest::Approx(cosine_similarity(v, u)).epsilon(1e-15));
        CHECK(std::abs(cosine_similarity(cu, v) - cosine_similarity(u, v)) < 1e-12);
    }
}

TEST_CASE("truncated svd recovers an exact rank-1 matrix") {
    Rng rng(7);
    std::vector<double> u(12), v(9);
    for (double& x : u) x = rng.gaussian();
    for (double& x : v) x = rng.gaussian();
    const Matrix m = Matrix::outer(u, v);
    const FactorPair f = truncated_svd(m, 1);
    CHECK(frobenius_rel_error(m, f.delta()) <= 1e-10);
}

TEST_CASE("truncated svd keeps the identity at full rank") {
    Matrix eye(2, 2);
    eye(0, 0) = eye(1, 1) = 1.0;
    const FactorPair f = truncated_svd(eye, 2);
    const Matrix back = f.delta();
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(back(i, j) == doctest::Approx(eye(i, j)).epsilon(1e-12));
}

TEST_CASE("truncated svd error matches the full-SVD tail formula") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Matrix m = random_matrix(64, 64, seed);
        const std::vector<double> sigma = eigen_singular_values(m);
        const FactorPair f = truncated_svd(m, 8);
        const double err = (m - f.delta()).frobenius_norm();
        const double expected = tail_formula(sigma, 8);
        CHECK(err == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("truncated svd beats other rank-r factorizations") {
    const Matrix m = random_matrix(20, 14, 21);
    const std::size_t r = 3;
    const double svd_err = frobenius_rel_error(m, truncated_svd(m, r).delta());
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        Matrix a(20, r), b(14, r);
        for (double& v : a.values()) v = rng.gaussian();
        for (double& v : b.values()) v = rng.gaussian();
        // Least-squares-free random competitor; scale roughly toward m.
        const FactorPair f(a, b);
        const double scale = m.frobenius_norm() / std::max(f.delta().frobenius_norm(), 1e-12);
        Matrix a2 = a;
        for (double& v : a2.values()) v *= scale;
        CHECK(svd_err <= frobenius_rel_error(m, FactorPair(a2, b).delta()) + 1e-12);
    }
}

TEST_CASE("truncated svd error is monotone in rank") {
    const Matrix m = random_matrix(32, 24, 5);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t r : {2, 4, 8, 16}) {
        const double err = (m - truncated_svd(m, r).delta()).frobenius_norm();
        CHECK(err <= prev + 1e-12);
        prev = err;
    }
}

TEST_CASE("truncated svd is deterministic and sign-fixed") {
    const Matrix m = random_matrix(16, 16, 123);
    const FactorPair f1 = truncated_svd(m, 4);
    const FactorPair f2 = truncated_svd(m, 4);
    CHECK(f1.a == f2.a);
    CHECK(f1.b == f2.b);
    // First nonzero entry of each left singular column is positive.
    for (std::size_t k = 0; k < 4; ++k) {
        for (std::size_t i = 0; i < f1.a.rows(); ++i) {
            if (f1.a(i, k) != 0.0) {
                CHECK(f1.a(i, k) > 0.0);
                break;
            }
        }
    }
}

TEST_CASE("truncated svd rejects invalid ranks") {
    const Matrix m = random_matrix(8, 6, 1);
    CHECK_THROWS_AS(truncated_svd(m, 0), std::invalid_argument);
    CHECK_THROWS_AS(truncated_svd(m, 7), std::invalid_argument);
}

TEST_CASE("hitting the sweep cap raises a numeric error with a residual estimate") {
    const Matrix m = random_matrix(16, 16, 4);
    JacobiOptions opts;
    opts.max_sweeps = 1;  // a general matrix cannot converge in one sweep
    opts.tolerance = 1e-15;
    try {
        jacobi_svd(m, opts);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(e.residual() > 0.0);
    }
}

TEST_CASE("wide matrices factor through the transposed path") {
    const Matrix m = random_matrix(6, 20, 11);
    const std::vector<double> sigma = eigen_singular_values(m);
    const FactorPair f = truncated_svd(m, 3);
    CHECK((m - f.delta()).frobenius_norm() ==
          doctest::Approx(tail_formula(sigma, 3)).epsilon(1e-6));
}

TEST_CASE("frobenius_rel_error basics") {
    Matrix m(2, 2);
    m(0, 0) = 3.0;
    m(1, 1) = 4.0;
    CHECK(frobenius_rel_error(m, m) == 0.0);

    Matrix eye(2, 2);
    eye(0, 0) = eye(1, 1) = 1.0;
    CHECK(frobenius_rel_error(eye, Matrix(2, 2)) == doctest::Approx(1.0));

    Matrix approx(2, 2);
    approx(0, 0) = 3.0;
    CHECK(frobenius_rel_error(m, approx) == doctest::Approx(0.8));
}

TEST_CASE("frobenius_rel_error rejects bad inputs") {
    Matrix m(2, 2), other(2, 3);
    CHECK_THROWS_AS(frobenius_rel_error(m, other), std::invalid_argument);
    CHECK_THROWS_AS(frobenius_rel_error(Matrix(2, 2), Matrix(2, 2)), std::invalid_argument);
}

TEST_CASE("matrix construction validates finiteness") {
    CHECK_THROWS_AS(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}),
                    std::invalid_argument);
    CHECK_THROWS_AS(Matrix(1, 2, {1.0}), std::invalid_argument);
}
