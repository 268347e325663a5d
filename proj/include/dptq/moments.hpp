// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "dptq/linalg.hpp"

namespace dptq {

/// Streaming mean and co-moment (Welford), mergeable with Chan's parallel formula.
class RunningMoments {
public:
    RunningMoments() = default;
    explicit RunningMoments(std::size_t dim) : mean_(dim, 0.0), m2_(dim, dim) {}

    std::size_t dim() const noexcept { return mean_.size(); }
    std::uint64_t count() const noexcept { return n_; }
    const Vector& mean() const noexcept { return mean_; }
    const Matrix& comoment() const noexcept { return m2_; }

    void update(std::span<const double> x) {
        if (x.size() != dim()) {
            throw std::invalid_argument("RunningMoments::update: sample length " + std::to_string(x.size()) +
                                        " != accumulator dimension " + std::to_string(dim()));
        }
        if (!all_finite(x)) throw std::invalid_argument("RunningMoments::update: non-finite sample");
        ++n_;
        const double inv_n = 1.0 / static_cast<double>(n_);
        Vector delta(dim());
        for (std::size_t i = 0; i < dim(); ++i) {
            delta[i] = x[i] - mean_[i];
            mean_[i] += delta[i] * inv_n;
        }
        // m2 += delta_old (x) (x - mean_new); symmetric by construction up to rounding
        for (std::size_t i = 0; i < dim(); ++i) {
            auto row = m2_.row(i);
            for (std::size_t j = i; j < dim(); ++j) row[j] += delta[i] * (x[j] - mean_[j]);
        }
        for (std::size_t i = 0; i < dim(); ++i)
            for (std::size_t j = 0; j < i; ++j) m2_(i, j) = m2_(j, i);
    }

    RunningMoments& merge(const RunningMoments& other) {
        if (other.dim() != dim()) {
            throw std::invalid_argument("RunningMoments::merge: dimension mismatch (" + std::to_string(dim()) +
                                        " vs " + std::to_string(other.dim()) + ")");
        }
        if (other.n_ == 0) return *this;
        if (n_ == 0) {
            *this = other;
            return *this;
        }
        const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_);
        const double n = na + nb;
        Vector delta(dim());
        for (std::size_t i = 0; i < dim(); ++i) delta[i] = other.mean_[i] - mean_[i];
        const double w = na * nb / n;
        for (std::size_t i = 0; i < dim(); ++i) {
            for (std::size_t j = i; j < dim(); ++j) {
                const double v = m2_(i, j) + other.m2_(i, j) + delta[i] * delta[j] * w;
                m2_(i, j) = m2_(j, i) = v;
            }
        }
        for (std::size_t i = 0; i < dim(); ++i) mean_[i] = (na * mean_[i] + nb * other.mean_[i]) / n;
        n_ += other.n_;
        return *this;
    }

    /// Unbiased (n - 1) covariance.
    Matrix covariance() const {
        if (n_ < 2) throw std::runtime_error("RunningMoments::covariance: need at least 2 samples");
        Matrix c = m2_;
        c *= 1.0 / static_cast<double>(n_ - 1);
        return c;
    }

    Vector stddev() const {
        const Matrix c = covariance();
        Vector s(dim());
        for (std::size_t i = 0; i < dim(); ++i) s[i] = std::sqrt(std::max(c(i, i), 0.0));
        return s;
    }

    /// Rebuilds an accumulator from finalized statistics (count, mean, covariance).
    static RunningMoments from_statistics(std::uint64_t n, Vector mean, const Matrix& cov) {
        RunningMoments m(mean.size());
        if (cov.rows() != mean.size() || !cov.square()) throw std::invalid_argument("from_statistics: shape mismatch");
        m.n_ = n;
        m.mean_ = std::move(mean);
        m.m2_ = cov;
        m.m2_ *= n > 0 ? static_cast<double>(n - 1) : 0.0;
        return m;
    }

private:
    std::uint64_t n_ = 0;
    Vector mean_;
    Matrix m2_;
};

inline RunningMoments moments_update(RunningMoments acc, std::span<const double> sample) {
    acc.update(sample);
    return acc;
}

inline RunningMoments moments_merge(RunningMoments a, const RunningMoments& b) {
    a.merge(b);
    return a;
}

}  // namespace dptq
