#include "moeforge/matrix.hpp"

#include <cmath>

namespace moeforge {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                    " != rows*cols " + std::to_string(rows_ * cols_));
    }
    require_finite("Matrix construction");
}

double Matrix::frobenius_norm() const {
    double acc = 0.0;
    for (double v : data_) acc += v * v;
    return std::sqrt(acc);
}

std::vector<double> Matrix::matvec(std::span<const double> x) const {
    if (x.size() != cols_) throw std::invalid_argument("matvec: length mismatch");
    std::vector<double> y(rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* row = data_.data() + r * cols_;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols_; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

std::vector<double> Matrix::matvec_transposed(std::span<const double> x) const {
    if (x.size() != rows_) throw std::invalid_argument("matvec_transposed: length mismatch");
    std::vector<double> y(cols_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* row = data_.data() + r * cols_;
        const double xr = x[r];
        for (std::size_t c = 0; c < cols_; ++c) y[c] += row[c] * xr;
    }
    return y;
}

void Matrix::add_scaled(const Matrix& other, double alpha) {
    if (!same_shape(other)) throw std::invalid_argument("add_scaled: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

Matrix Matrix::outer(std::span<const double> u, std::span<const double> v) {
    Matrix m(u.size(), v.size());
    for (std::size_t r = 0; r < u.size(); ++r)
        for (std::size_t c = 0; c < v.size(); ++c) m(r, c) = u[r] * v[c];
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Matrix::require_finite(const std::string& context) const {
    if (!all_finite()) throw std::invalid_argument(context + ": non-finite entry");
}

Matrix operator+(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("operator+: shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("operator-: shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

FactorPair::FactorPair(Matrix a_, Matrix b_) : a(std::move(a_)), b(std::move(b_)) {
    if (a.cols() != b.cols()) throw std::invalid_argument("FactorPair: rank mismatch between factors");
    rank = a.cols();
    if (rank < 1) throw std::invalid_argument("FactorPair: rank must be >= 1");
    if (rank > std::min(a.rows(), b.rows()))
        throw std::invalid_argument("FactorPair: rank exceeds min(d_in, d_out)");
}

Matrix FactorPair::delta() const {
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < rank; ++t) acc += a(i, t) * b(j, t);
            out(i, j) = acc;
        }
    }
    return out;
}

bool FactorPair::is_zero() const {
    for (double v : a.values())
        if (v != 0.0) return false;
    for (double v : b.values())
        if (v != 0.0) return false;
    return true;
}

}  // namespace moeforge
