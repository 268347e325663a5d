// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dptq/linalg.hpp"
#include "dptq/linear.hpp"

// Cross-space representation compensation: statistics-driven correction of a
// quantized layer's output distribution, folded back into that layer.
namespace dptq::csrc {

struct ChannelStats {
    Vector mu_fp;
    Vector sigma_fp;
    Vector mu_q;
    Vector sigma_q;
    double epsilon = 1e-6;

    std::size_t dim() const noexcept { return mu_fp.size(); }
    void validate() const {
        const auto d = mu_fp.size();
        if (sigma_fp.size() != d || mu_q.size() != d || sigma_q.size() != d)
            throw std::invalid_argument("ChannelStats: vectors differ in length");
        for (std::size_t c = 0; c < d; ++c)
            if (sigma_fp[c] < 0.0 || sigma_q[c] < 0.0) throw std::invalid_argument("ChannelStats: negative stddev");
        if (!(epsilon > 0.0)) throw std::invalid_argument("ChannelStats: epsilon must be positive");
    }
};

struct ChannelAffine {
    Vector g;
    Vector d;
    double g_min = 0.25;
    double g_max = 4.0;
};

/// g_c = clip(sigma_fp / (sigma_q + eps), g_min, g_max);  d_c = mu_fp - g_c mu_q.
inline ChannelAffine channel_affine(const ChannelStats& s, double g_min = 0.25, double g_max = 4.0) {
    s.validate();
    if (!(g_min > 0.0) || g_min > g_max) throw std::invalid_argument("channel_affine: need 0 < g_min <= g_max");
    ChannelAffine a{Vector(s.dim()), Vector(s.dim()), g_min, g_max};
    for (std::size_t c = 0; c < s.dim(); ++c) {
        a.g[c] = std::clamp(s.sigma_fp[c] / (s.sigma_q[c] + s.epsilon), g_min, g_max);
        a.d[c] = s.mu_fp[c] - a.g[c] * s.mu_q[c];
    }
    return a;
}

inline Vector apply_channel_affine(std::span<const double> z, const ChannelAffine& a) {
    if (z.size() != a.g.size()) throw std::invalid_argument("apply_channel_affine: dimension mismatch");
    Vector out(z.size());
    for (std::size_t c = 0; c < z.size(); ++c) out[c] = a.g[c] * z[c] + a.d[c];
    return out;
}

struct CovAlignProblem {
    Matrix sigma_fp;
    Matrix sigma_q;
    Vector w_diag;  // empty means unit weights
    double lambda_f = 1.0;
    double lambda_i = 0.0;
    double shrinkage = 0.55;
    double eig_floor = 1e-8;
};

/// lambda_f ||D (S_fp - M S_q M^T) D||_F^2 + lambda_i ||M - I||_F^2 with D = diag(w).
inline double cov_align_objective(const CovAlignProblem& p, const Matrix& m) {
    Matrix r = p.sigma_fp - m * p.sigma_q * m.transpose();
    if (!p.w_diag.empty()) {
        for (std::size_t i = 0; i < r.rows(); ++i)
            for (std::size_t j = 0; j < r.cols(); ++j) r(i, j) *= p.w_diag[i] * p.w_diag[j];
    }
    const double fit = frobenius_norm(r);
    const double reg = frobenius_norm(m - Matrix::identity(m.rows()));
    return p.lambda_f * fit * fit + p.lambda_i * reg * reg;
}

struct CovAlignSolution {
    Matrix m;   // returned transform
    Matrix m0;  // unshrunk whitening-coloring transform (identity on fallback)
    double objective = 0.0;
    double objective_identity = 0.0;
    bool fallback = false;
    std::string note;
};

/// Closed form M0 = S_fp^{1/2} S_q^{-1/2}, blended toward identity by the
/// shrinkage factor. Falls back to M = I when the eigensolver fails or the
/// blend would not improve the objective over the identity.
inline CovAlignSolution solve_cov_align(const CovAlignProblem& p) {
    const std::size_t d = p.sigma_fp.rows();
    if (!p.sigma_fp.square() || p.sigma_q.rows() != d || p.sigma_q.cols() != d)
        throw std::invalid_argument("solve_cov_align: covariance shapes differ");
    if (!p.w_diag.empty() && p.w_diag.size() != d) throw std::invalid_argument("solve_cov_align: weight length mismatch");
    if (p.shrinkage < 0.0 || p.shrinkage > 1.0) throw std::invalid_argument("solve_cov_align: shrinkage outside [0, 1]");

    const Matrix eye = Matrix::identity(d);
    CovAlignSolution out;
    out.objective_identity = cov_align_objective(p, eye);
    try {
        out.m0 = sym_sqrt(p.sigma_fp, p.eig_floor) * sym_inv_sqrt(p.sigma_q, p.eig_floor);
    } catch (const std::exception& e) {
        out.m = eye;
        out.m0 = eye;
        out.objective = out.objective_identity;
        out.fallback = true;
        out.note = std::string("eigendecomposition failed, using identity: ") + e.what();
        return out;
    }
    out.m = (1.0 - p.shrinkage) * out.m0 + p.shrinkage * eye;
    out.objective = cov_align_objective(p, out.m);
    if (!(out.objective <= out.objective_identity)) {
        out.note = "blended transform did not improve the objective, using identity";
        out.fallback = true;
        out.m = eye;
        out.objective = out.objective_identity;
    }
    return out;
}

using LowRankCompensation = LowRankAffine;

/// Best rank-r factorization of M - I; singular values are absorbed into U.
/// The bias is left at zero for the caller to set.
inline LowRankCompensation low_rank_truncate(const Matrix& m, std::size_t r, bool enforce_quarter_rank = true) {
    if (!m.square()) throw std::invalid_argument("low_rank_truncate: M must be square");
    const std::size_t d = m.rows();
    if (r > d || (enforce_quarter_rank && 4 * r > d)) {
        throw std::invalid_argument("low_rank_truncate: rank " + std::to_string(r) + " out of range for d = " + std::to_string(d));
    }
    const auto svd = truncated_svd(m - Matrix::identity(d), r);
    LowRankCompensation c{svd.u, svd.v, Vector(d, 0.0)};
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < r; ++k) c.u(i, k) *= svd.singular[k];
    return c;
}

/// Folds the channel affine into `layer` (row gains into scales, g*b + d into
/// the bias) and attaches the low-rank part as the fused post-affine.
inline void fold_compensation(Linear& layer, const LowRankCompensation& comp, const ChannelAffine& affine) {
    if (affine.g.size() != layer.out_dim() || affine.d.size() != layer.out_dim() || comp.dim() != layer.out_dim()) {
        throw std::invalid_argument("fold_compensation: layer '" + layer.name() + "' has output dimension " +
                                    std::to_string(layer.out_dim()) + " but compensation is sized differently");
    }
    layer.scale_rows(affine.g);
    Vector b = layer.bias();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += affine.d[i];
    layer.set_bias(std::move(b));
    layer.set_post(comp);
}

/// Block-diagonal orthogonal rotation; block k acts on channels [k*b, k*b + b).
/// Channels in a trailing partial block are left unrotated.
struct PreRotation {
    std::size_t dim = 0;
    std::size_t block_size = 16;
    double smoothing = 0.15;
    std::vector<Matrix> rotations;    // rows are the block's principal axes
    std::vector<Vector> spectrum;     // smoothed singular values per block

    Vector apply(std::span<const double> x) const { return apply_impl(x, false); }
    Vector apply_transpose(std::span<const double> y) const { return apply_impl(y, true); }

    Matrix dense() const {
        Matrix r = Matrix::identity(dim);
        for (std::size_t k = 0; k < rotations.size(); ++k)
            for (std::size_t i = 0; i < block_size; ++i)
                for (std::size_t j = 0; j < block_size; ++j) r(k * block_size + i, k * block_size + j) = rotations[k](i, j);
        return r;
    }

private:
    Vector apply_impl(std::span<const double> x, bool transpose) const {
        if (x.size() != dim) throw std::invalid_argument("PreRotation: dimension mismatch");
        Vector y(x.begin(), x.end());
        for (std::size_t k = 0; k < rotations.size(); ++k) {
            const auto xb = x.subspan(k * block_size, block_size);
            const Vector yb = transpose ? matvec_transposed(rotations[k], xb) : matvec(rotations[k], xb);
            std::copy(yb.begin(), yb.end(), y.begin() + static_cast<long>(k * block_size));
        }
        return y;
    }
};

/// Per-block principal-axis rotation from activation samples (one sample per row).
/// Singular values are smoothed as s^(1 - smoothing) before ordering the axes.
inline PreRotation build_pre_rotation(const Matrix& samples, std::size_t block_size = 16, double smoothing = 0.15) {
    if (block_size == 0) throw std::invalid_argument("build_pre_rotation: block size must be positive");
    if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("build_pre_rotation: smoothing outside [0, 1)");
    if (samples.rows() < 2) throw std::invalid_argument("build_pre_rotation: need at least 2 samples");
    PreRotation rot;
    rot.dim = samples.cols();
    rot.block_size = block_size;
    rot.smoothing = smoothing;
    const std::size_t blocks = rot.dim / block_size;
    const double n = static_cast<double>(samples.rows());
    for (std::size_t k = 0; k < blocks; ++k) {
        Matrix cov(block_size, block_size);
        Vector mean(block_size, 0.0);
        for (std::size_t s = 0; s < samples.rows(); ++s)
            for (std::size_t i = 0; i < block_size; ++i) mean[i] += samples(s, k * block_size + i) / n;
        for (std::size_t s = 0; s < samples.rows(); ++s) {
            for (std::size_t i = 0; i < block_size; ++i) {
                const double xi = samples(s, k * block_size + i) - mean[i];
                for (std::size_t j = 0; j < block_size; ++j) cov(i, j) += xi * (samples(s, k * block_size + j) - mean[j]);
            }
        }
        cov *= 1.0 / (n - 1.0);
        if (frobenius_norm(cov) == 0.0) {
            rot.rotations.push_back(Matrix::identity(block_size));
            rot.spectrum.emplace_back(block_size, 0.0);
            continue;
        }
        const auto dec = svd(cov);
        Vector smoothed(block_size);
        for (std::size_t i = 0; i < block_size; ++i) smoothed[i] = std::pow(dec.singular[i], 1.0 - smoothing);
        const auto order = detail::argsort_desc(smoothed);
        Matrix axes(block_size, block_size);
        Vector spec(block_size);
        for (std::size_t a = 0; a < block_size; ++a) {
            spec[a] = smoothed[order[a]];
            for (std::size_t i = 0; i < block_size; ++i) axes(i, a) = dec.u(i, order[a]);
        }
        // Zero singular values leave zero columns in U; complete them to an orthonormal basis.
        for (std::size_t a = 0; a < block_size; ++a) {
            if (norm2(axes.col(a)) > 0.5) continue;
            for (std::size_t e = 0; e < block_size; ++e) {
                Vector cand(block_size, 0.0);
                cand[e] = 1.0;
                for (std::size_t b = 0; b < block_size; ++b) {
                    if (b == a || norm2(axes.col(b)) < 0.5) continue;
                    const double proj = dot(cand, axes.col(b));
                    for (std::size_t i = 0; i < block_size; ++i) cand[i] -= proj * axes(i, b);
                }
                const double nn = norm2(cand);
                if (nn > 1e-6) {
                    for (std::size_t i = 0; i < block_size; ++i) axes(i, a) = cand[i] / nn;
                    break;
                }
            }
        }
        detail::canonicalize_signs(axes);
        rot.rotations.push_back(axes.transpose());
        rot.spectrum.push_back(std::move(spec));
    }
    return rot;
}

/// Rotates a layer's output space: W <- R W, b <- R b.
inline void rotate_outputs(Linear& layer, const PreRotation& rot) {
    if (layer.precision() != Precision::kFull) throw std::invalid_argument("rotate_outputs: layer must be full precision");
    const Matrix r = rot.dense();
    layer.set_bias(matvec(r, layer.bias()));
    layer.set_weight(r * layer.effective());
}

/// Compensates a consumer of a rotated space: W <- W R^T.
inline void rotate_inputs(Linear& layer, const PreRotation& rot) {
    if (layer.precision() != Precision::kFull) throw std::invalid_argument("rotate_inputs: layer must be full precision");
    layer.set_weight(layer.effective() * rot.dense().transpose());
}

struct CsrcOptions {
    double g_min = 0.25;
    double g_max = 4.0;
    double epsilon = 1e-6;
    double shrinkage = 0.55;
    std::size_t rank = 16;
};

struct InterfaceCompensation {
    ChannelAffine affine;
    CovAlignSolution cov;
    LowRankCompensation lowrank;
};

/// Full per-layer solve: channel affine, then covariance alignment of the
/// affine-corrected output, truncated to rank r with a mean-restoring bias.
inline InterfaceCompensation solve_interface(const Vector& mu_fp, const Matrix& cov_fp, const Vector& mu_q, const Matrix& cov_q,
                                             const CsrcOptions& opt) {
    const std::size_t d = mu_fp.size();
    if (cov_fp.rows() != d || cov_q.rows() != d || mu_q.size() != d)
        throw std::invalid_argument("solve_interface: statistics dimension mismatch");
    ChannelStats stats{mu_fp, Vector(d), mu_q, Vector(d), opt.epsilon};
    for (std::size_t c = 0; c < d; ++c) {
        stats.sigma_fp[c] = std::sqrt(std::max(cov_fp(c, c), 0.0));
        stats.sigma_q[c] = std::sqrt(std::max(cov_q(c, c), 0.0));
    }
    InterfaceCompensation out;
    out.affine = channel_affine(stats, opt.g_min, opt.g_max);

    Matrix cov1 = cov_q;
    Vector mu1(d);
    for (std::size_t i = 0; i < d; ++i) {
        mu1[i] = out.affine.g[i] * mu_q[i] + out.affine.d[i];
        for (std::size_t j = 0; j < d; ++j) cov1(i, j) *= out.affine.g[i] * out.affine.g[j];
    }
    CovAlignProblem prob{cov_fp, cov1, Vector(d), 1.0, 0.0, opt.shrinkage};
    for (std::size_t c = 0; c < d; ++c) prob.w_diag[c] = stats.sigma_fp[c] / (stats.sigma_q[c] + opt.epsilon);
    out.cov = solve_cov_align(prob);

    out.lowrank = low_rank_truncate(out.cov.m, opt.rank);
    Vector shifted = mu1;
    LowRankAffine{out.lowrank.u, out.lowrank.v, Vector(d, 0.0)}.apply(shifted);
    for (std::size_t i = 0; i < d; ++i) out.lowrank.bias[i] = mu_fp[i] - shifted[i];
    return out;
}

}  // namespace dptq::csrc
