// matrix.hpp - dense row-major FP64 matrix and rank-r factor pair
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moeforge {

class Matrix {
public:
    Matrix() = default;

    // Zero-filled.
    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    // Takes ownership of row-major data; rejects NaN/Inf and size mismatch.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<const double> values() const { return data_; }
    std::span<double> values() { return data_; }

    // Flattened weight vector, row-major (same storage).
    const std::vector<double>& flat() const { return data_; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double frobenius_norm() const;

    // y = M x  (x length cols, result length rows)
    std::vector<double> matvec(std::span<const double> x) const;
    // y = M^T x  (x length rows, result length cols)
    std::vector<double> matvec_transposed(std::span<const double> x) const;

    // M += alpha * other (same shape)
    void add_scaled(const Matrix& other, double alpha);

    // u v^T
    static Matrix outer(std::span<const double> u, std::span<const double> v);

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const;
    void require_finite(const std::string& context) const;

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);

// Low-rank factor pair: delta = a * b^T with a (d_out x r), b (d_in x r).
struct FactorPair {
    Matrix a;
    Matrix b;
    std::size_t rank = 0;

    FactorPair() = default;
    FactorPair(Matrix a_, Matrix b_);

    std::size_t d_out() const { return a.rows(); }
    std::size_t d_in() const { return b.rows(); }

    // Materializes a * b^T.
    Matrix delta() const;

    bool is_zero() const;
};

}  // namespace moeforge
