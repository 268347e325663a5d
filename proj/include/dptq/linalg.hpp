// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dptq {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix diagonal(std::span<const double> d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool square() const noexcept { return rows_ == cols_; }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }
    Vector col(std::size_t j) const {
        Vector c(rows_);
        for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
        return c;
    }

    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    Matrix transpose() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Matrix& operator+=(const Matrix& o) {
        check_same(o, "+=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        check_same(o, "-=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (auto& v : data_) v *= s;
        return *this;
    }

    bool operator==(const Matrix&) const = default;

private:
    void check_same(const Matrix& o, const char* op) const {
        if (o.rows_ != rows_ || o.cols_ != cols_) {
            throw std::invalid_argument(std::string("Matrix ") + op + ": shape mismatch");
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()) + ")");
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ci = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto bk = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

/// y = A x
inline Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw std::invalid_argument("matvec: expected input of length " + std::to_string(a.cols()) + ", got " +
                                    std::to_string(x.size()));
    }
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) acc += ai[j] * x[j];
        y[i] = acc;
    }
    return y;
}

/// y = A^T x
inline Vector matvec_transposed(const Matrix& a, std::span<const double> x) {
    if (a.rows() != x.size()) throw std::invalid_argument("matvec_transposed: length mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto ai = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += ai[j] * xi;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.values()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Matrix outer(std::span<const double> a, std::span<const double> b) {
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
    return m;
}

inline bool is_symmetric(const Matrix& m, double tol) {
    if (!m.square()) return false;
    const double scale = std::max(1.0, max_abs(m.values()));
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            if (std::abs(m(i, j) - m(j, i)) > tol * scale) return false;
    return true;
}

struct EigenResult {
    Vector values;   // descending
    Matrix vectors;  // column k pairs with values[k]
};

namespace detail {

inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kJacobiOffTol = 1e-12;

// Makes the largest-magnitude entry of each column positive.
inline void canonicalize_signs(Matrix& v) {
    for (std::size_t j = 0; j < v.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < v.rows(); ++i) {
            if (std::abs(v(i, j)) > best + 1e-14) {
                best = std::abs(v(i, j));
                arg = i;
            }
        }
        if (v(arg, j) < 0.0)
            for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = -v(i, j);
    }
}

inline std::vector<std::size_t> argsort_desc(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
}

}  // namespace detail

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Throws std::invalid_argument for non-symmetric input and std::runtime_error
/// when the sweep cap is reached before the off-diagonal mass falls below tolerance.
inline EigenResult sym_eig(const Matrix& m) {
    if (!m.square()) throw std::invalid_argument("sym_eig: matrix is not square");
    if (!is_symmetric(m, 1e-8)) throw std::invalid_argument("sym_eig: matrix is not symmetric");
    if (!all_finite(m.values())) throw std::invalid_argument("sym_eig: non-finite entries");

    const std::size_t n = m.rows();
    Matrix a = m;
    // Work on the exactly symmetrized matrix.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
    Matrix v = Matrix::identity(n);
    const double scale = std::max(frobenius_norm(a), 1e-300);

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
        return std::sqrt(s);
    };

    bool converged = off_norm() <= detail::kJacobiOffTol * scale;
    for (int sweep = 0; sweep < detail::kJacobiMaxSweeps && !converged; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm() <= detail::kJacobiOffTol * scale;
    }
    if (!converged) throw std::runtime_error("sym_eig: Jacobi iteration did not converge within sweep cap");

    Vector diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
    const auto order = detail::argsort_desc(diag);
    EigenResult out{Vector(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = diag[order[k]];
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    detail::canonicalize_signs(out.vectors);
    return out;
}

struct SvdResult {
    Matrix u;        // rows x k
    Vector singular; // descending, non-negative
    Matrix v;        // cols x k
};

namespace detail {

// One-sided Jacobi (Hestenes) on a tall matrix (rows >= cols).
inline SvdResult svd_tall(const Matrix& m) {
    const std::size_t rows = m.rows(), cols = m.cols();
    Matrix w = m;
    Matrix v = Matrix::identity(cols);
    constexpr double eps = 1e-15;

    bool rotated = true;
    for (int sweep = 0; sweep < kJacobiMaxSweeps && rotated; ++sweep) {
        rotated = false;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t k = 0; k < rows; ++k) {
                    alpha += w(k, p) * w(k, p);
                    beta += w(k, q) * w(k, q);
                    gamma += w(k, p) * w(k, q);
                }
                if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < rows; ++k) {
                    const double wp = w(k, p), wq = w(k, q);
                    w(k, p) = c * wp - s * wq;
                    w(k, q) = s * wp + c * wq;
                }
                for (std::size_t k = 0; k < cols; ++k) {
                    const double vp = v(k, p), vq = v(k, q);
                    v(k, p) = c * vp - s * vq;
                    v(k, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (rotated) throw std::runtime_error("svd: one-sided Jacobi did not converge within sweep cap");

    Vector sigma(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < rows; ++k) s += w(k, j) * w(k, j);
        sigma[j] = std::sqrt(s);
    }
    const auto order = argsort_desc(sigma);
    const double tiny = (sigma.empty() ? 0.0 : sigma[order[0]]) * 1e-300;
    SvdResult out{Matrix(rows, cols), Vector(cols), Matrix(cols, cols)};
    for (std::size_t k = 0; k < cols; ++k) {
        const std::size_t j = order[k];
        out.singular[k] = sigma[j];
        for (std::size_t i = 0; i < cols; ++i) out.v(i, k) = v(i, j);
        if (sigma[j] > tiny && sigma[j] > 0.0)
            for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = w(i, j) / sigma[j];
    }
    return out;
}

}  // namespace detail

/// Thin SVD, m = U diag(S) V^T, with k = min(rows, cols). Columns of U paired
/// with zero singular values are left as zero vectors.
inline SvdResult svd(const Matrix& m) {
    if (!all_finite(m.values())) throw std::invalid_argument("svd: non-finite entries");
    if (m.rows() >= m.cols()) return detail::svd_tall(m);
    auto t = detail::svd_tall(m.transpose());
    return SvdResult{std::move(t.v), std::move(t.singular), std::move(t.u)};
}

/// Best rank-r approximation factors (Eckart-Young).
inline SvdResult truncated_svd(const Matrix& m, std::size_t r) {
    const std::size_t k = std::min(m.rows(), m.cols());
    if (r > k) {
        throw std::invalid_argument("truncated_svd: rank " + std::to_string(r) + " exceeds min(rows, cols) = " +
                                    std::to_string(k));
    }
    auto full = svd(m);
    SvdResult out{Matrix(m.rows(), r), Vector(full.singular.begin(), full.singular.begin() + static_cast<long>(r)),
                  Matrix(m.cols(), r)};
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) out.u(i, j) = full.u(i, j);
    for (std::size_t i = 0; i < m.cols(); ++i)
        for (std::size_t j = 0; j < r; ++j) out.v(i, j) = full.v(i, j);
    return out;
}

/// U diag(S) V^T
inline Matrix reconstruct(const SvdResult& s) {
    Matrix us = s.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s.singular[j];
    return us * s.v.transpose();
}

/// Applies f to the spectrum of a symmetric matrix, with eigenvalues floored at `floor`.
template <class F>
Matrix sym_apply(const Matrix& m, F&& f, double floor) {
    const auto eig = sym_eig(m);
    const std::size_t n = m.rows();
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double fk = f(std::max(eig.values[k], floor));
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * fk;
            if (vik == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
        }
    }
    return out;
}

inline Matrix sym_sqrt(const Matrix& m, double floor = 0.0) {
    return sym_apply(m, [](double x) { return std::sqrt(x); }, floor);
}

inline Matrix sym_inv_sqrt(const Matrix& m, double floor) {
    return sym_apply(m, [](double x) { return 1.0 / std::sqrt(x); }, floor);
}

/// Cholesky factor L (lower) of an SPD matrix; returns false when not positive definite.
inline bool cholesky(const Matrix& a, Matrix& l) {
    const std::size_t n = a.rows();
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return true;
}

/// Solves L L^T X = B for X given the Cholesky factor.
inline Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
    const std::size_t n = l.rows();
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
            x(ii, c) = s / l(ii, ii);
        }
    }
    return x;
}

/// Gaussian elimination with partial pivoting: solves A X = B.
inline Matrix solve(Matrix a, Matrix b) {
    if (!a.square() || a.rows() != b.rows()) throw std::invalid_argument("solve: shape mismatch");
    const std::size_t n = a.rows();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < n; ++i)
            if (std::abs(a(i, col)) > std::abs(a(piv, col))) piv = i;
        if (std::abs(a(piv, col)) < 1e-300) throw std::runtime_error("solve: singular matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
            for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(piv, j));
        }
        for (std::size_t i = col + 1; i < n; ++i) {
            const double f = a(i, col) / a(col, col);
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) a(i, j) -= f * a(col, j);
            for (std::size_t j = 0; j < b.cols(); ++j) b(i, j) -= f * b(col, j);
        }
    }
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t ii = n; ii-- > 0;) {
            double s = b(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k) s -= a(ii, k) * b(k, c);
            b(ii, c) = s / a(ii, ii);
        }
    }
    return b;
}

}  // namespace dptq
