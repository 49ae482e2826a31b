#include "moeforge/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moeforge {

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw std::invalid_argument("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

double l2_norm(std::span<const double> u) {
    double acc = 0.0;
    for (double x : u) acc += x * x;
    return std::sqrt(acc);
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    if (u.empty()) throw std::invalid_argument("cosine_similarity: empty vectors");
    const double nu = l2_norm(u);
    const double nv = l2_norm(v);
    if (nu == 0.0 || nv == 0.0)
        throw std::invalid_argument("cosine_similarity: zero vector");
    if (std::equal(u.begin(), u.end(), v.begin())) return 1.0;
    const double c = dot(u, v) / (nu * nv);
    return std::clamp(c, -1.0, 1.0);
}

namespace {

// One-sided Jacobi on a matrix with rows >= cols: orthogonalizes column
// pairs until every off-diagonal of the implicit Gram matrix is below
// tolerance, then reads off U, sigma, V.
SvdResult jacobi_tall(const Matrix& m, const JacobiOptions& opts) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    // Column-major working copy for cache-friendly column rotations.
    std::vector<double> a(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) a[c * rows + r] = m(r, c);

    std::vector<double> v(cols * cols, 0.0);
    for (std::size_t c = 0; c < cols; ++c) v[c * cols + c] = 1.0;

    double worst = 0.0;
    bool converged = false;
    for (std::size_t sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        converged = true;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double* cp = a.data() + p * rows;
                double* cq = a.data() + q * rows;
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    app += cp[r] * cp[r];
                    aqq += cq[r] * cq[r];
                    apq += cp[r] * cq[r];
                }
                const double denom = std::sqrt(app * aqq);
                if (denom == 0.0) continue;
                const double rel = std::abs(apq) / denom;
                worst = std::max(worst, rel);
                if (rel <= opts.tolerance) continue;
                converged = false;

                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double xp = cp[r];
                    const double xq = cq[r];
                    cp[r] = c * xp - s * xq;
                    cq[r] = s * xp + c * xq;
                }
                double* vp = v.data() + p * cols;
                double* vq = v.data() + q * cols;
                for (std::size_t r = 0; r < cols; ++r) {
                    const double xp = vp[r];
                    const double xq = vq[r];
                    vp[r] = c * xp - s * xq;
                    vq[r] = s * xp + c * xq;
                }
            }
        }
    }
    if (!converged) {
        throw NumericError("jacobi_svd: no convergence after " +
                               std::to_string(opts.max_sweeps) +
                               " sweeps (off-diagonal residual " + std::to_string(worst) + ")",
                           worst);
    }

    std::vector<double> sigma(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        const double* col = a.data() + c * rows;
        for (std::size_t r = 0; r < rows; ++r) acc += col[r] * col[r];
        sigma[c] = std::sqrt(acc);
    }

    // Stable descending order; ties keep the lower column index first.
    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return sigma[i] > sigma[j]; });

    SvdResult out;
    out.u = Matrix(rows, cols);
    out.v = Matrix(cols, cols);
    out.singular_values.resize(cols);
    for (std::size_t k = 0; k < cols; ++k) {
        const std::size_t src = order[k];
        const double s = sigma[src];
        out.singular_values[k] = s;
        const double* acol = a.data() + src * rows;
        const double* vcol = v.data() + src * cols;
        // Sign convention: first nonzero entry of the left singular vector
        // is positive, so repeated factorizations agree bit for bit.
        double sign = 1.0;
        if (s > 0.0) {
            for (std::size_t r = 0; r < rows; ++r) {
                if (acol[r] != 0.0) {
                    sign = acol[r] > 0.0 ? 1.0 : -1.0;
                    break;
                }
            }
        }
        for (std::size_t r = 0; r < rows; ++r)
            out.u(r, k) = s > 0.0 ? sign * acol[r] / s : 0.0;
        for (std::size_t r = 0; r < cols; ++r) out.v(r, k) = sign * vcol[r];
    }
    return out;
}

}  // namespace

SvdResult jacobi_svd(const Matrix& m, const JacobiOptions& opts) {
    if (m.empty()) throw std::invalid_argument("jacobi_svd: empty matrix");
    m.require_finite("jacobi_svd");
    if (m.rows() >= m.cols()) return jacobi_tall(m, opts);
    // Wide matrix: factor the transpose and swap U/V.
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    SvdResult res = jacobi_tall(t, opts);
    // Transposed factorization fixes the sign of what is now V; re-apply the
    // convention to the left vectors of the original matrix.
    SvdResult out;
    out.u = std::move(res.v);
    out.v = std::move(res.u);
    out.singular_values = std::move(res.singular_values);
    for (std::size_t k = 0; k < out.singular_values.size(); ++k) {
        if (out.singular_values[k] <= 0.0) continue;
        double sign = 1.0;
        for (std::size_t r = 0; r < out.u.rows(); ++r) {
            if (out.u(r, k) != 0.0) {
                sign = out.u(r, k) > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        if (sign < 0.0) {
            for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, k) = -out.u(r, k);
            for (std::size_t r = 0; r < out.v.rows(); ++r) out.v(r, k) = -out.v(r, k);
        }
    }
    return out;
}

FactorPair truncated_svd(const Matrix& m, std::size_t r, const JacobiOptions& opts) {
    if (r < 1) throw std::invalid_argument("truncated_svd: rank must be >= 1");
    if (r > std::min(m.rows(), m.cols()))
        throw std::invalid_argument("truncated_svd: rank exceeds min(rows, cols)");
    const SvdResult svd = jacobi_svd(m, opts);
    Matrix a(m.rows(), r);
    Matrix b(m.cols(), r);
    for (std::size_t k = 0; k < r; ++k) {
        const double root = std::sqrt(svd.singular_values[k]);
        for (std::size_t i = 0; i < m.rows(); ++i) a(i, k) = svd.u(i, k) * root;
        for (std::size_t j = 0; j < m.cols(); ++j) b(j, k) = svd.v(j, k) * root;
    }
    return FactorPair(std::move(a), std::move(b));
}

double frobenius_rel_error(const Matrix& m, const Matrix& approx) {
    if (!m.same_shape(approx)) throw std::invalid_argument("frobenius_rel_error: shape mismatch");
    const double ref = m.frobenius_norm();
    if (ref == 0.0) throw std::invalid_argument("frobenius_rel_error: reference matrix is all-zero");
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double d = m.data()[i] - approx.data()[i];
        acc += d * d;
    }
    return std::sqrt(acc) / ref;
}

}  // namespace moeforge
