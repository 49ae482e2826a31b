// numerics.hpp - cosine similarity, one-sided Jacobi SVD, Frobenius error
#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "moeforge/matrix.hpp"

namespace moeforge {

// Thrown when an iterative kernel fails to converge; carries the residual
// estimate at the iteration cap.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& msg, double residual)
        : std::runtime_error(msg), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_ = 0.0;
};

// <u,v> / (|u||v|). Throws on length mismatch or a zero vector.
// Returns exactly 1.0 for bit-identical inputs.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

struct SvdResult {
    Matrix u;                            // rows x min(rows, cols)
    std::vector<double> singular_values; // descending
    Matrix v;                            // cols x min(rows, cols)
};

struct JacobiOptions {
    std::size_t max_sweeps = 100;
    double tolerance = 1e-12;  // relative off-diagonal threshold
};

// Full SVD via one-sided Jacobi rotations. Deterministic: fixed cyclic
// sweep order, singular values sorted descending (stable), and each left
// singular vector's first nonzero entry made positive.
SvdResult jacobi_svd(const Matrix& m, const JacobiOptions& opts = {});

// Best rank-r approximation m ~= a * b^T (Eckart-Young), factors split as
// a = U_r sqrt(S_r), b = V_r sqrt(S_r).
FactorPair truncated_svd(const Matrix& m, std::size_t r, const JacobiOptions& opts = {});

// |m - approx|_F / |m|_F. Throws on shape mismatch or |m|_F = 0.
double frobenius_rel_error(const Matrix& m, const Matrix& approx);

double dot(std::span<const double> u, std::span<const double> v);
double l2_norm(std::span<const double> u);

}  // namespace moeforge
