// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dptq/linalg.hpp"
#include "dptq/quantizer.hpp"

// Drift-aware mixed-precision allocation: how per-dimension action errors
// propagate through a virtual planar chain, and which layers matter most for it.
namespace dptq::drift {

inline constexpr std::size_t kActionDim = 7;

/// [dx, dy, dz, drx, dry, drz, dgrip]
using ActionVector = std::array<double, kActionDim>;

/// Action dimensions reinterpreted as joint increments of a virtual planar chain.
struct VirtualChainState {
    ActionVector q{};
    ActionVector theta{};  // theta_j = sum_{i<=j} q_i
    double scaling_gain = 1.6;
};

inline VirtualChainState cumulative_theta(std::span<const double> action, double gain = 1.6) {
    if (action.size() != kActionDim) throw std::invalid_argument("cumulative_theta: action must have 7 entries");
    VirtualChainState s;
    s.scaling_gain = gain;
    double acc = 0.0;
    for (std::size_t j = 0; j < kActionDim; ++j) {
        s.q[j] = gain * action[j];
        acc += s.q[j];
        s.theta[j] = acc;
    }
    return s;
}

/// 3 x 7 Jacobian of (x, y, heading) with respect to the chain increments.
/// Translation sums run over segments j..6 only, so the seventh column is (0, 0, 1).
struct StructuralJacobian {
    Matrix j = Matrix(3, kActionDim);

    double column_norm(std::size_t col) const {
        return std::sqrt(j(0, col) * j(0, col) + j(1, col) * j(1, col) + j(2, col) * j(2, col));
    }
};

inline StructuralJacobian structural_jacobian(std::span<const double> theta) {
    if (theta.size() != kActionDim) throw std::invalid_argument("structural_jacobian: theta must have 7 entries");
    StructuralJacobian out;
    // Suffix sums over k = j..6 (1-based); index 6 (0-based) is excluded.
    double sx = 0.0, sy = 0.0;
    for (std::size_t col = kActionDim; col-- > 0;) {
        if (col < kActionDim - 1) {
            sx += std::sin(theta[col]);
            sy += std::cos(theta[col]);
        }
        out.j(0, col) = -sx;
        out.j(1, col) = sy;
        out.j(2, col) = 1.0;
    }
    return out;
}

inline StructuralJacobian structural_jacobian(const VirtualChainState& s) { return structural_jacobian(s.theta); }

/// J^T (J J^T + lambda I)^{-1}
inline Matrix damped_pinv(const Matrix& jac, double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("damped_pinv: lambda must be positive");
    Matrix a = jac * jac.transpose();
    for (std::size_t i = 0; i < a.rows(); ++i) a(i, i) += lambda;
    Matrix l;
    if (!cholesky(a, l)) throw std::runtime_error("damped_pinv: J J^T + lambda I is not positive definite");
    Matrix x = cholesky_solve(l, jac);  // (J J^T + lambda I)^{-1} J
    if (!all_finite(x.values())) throw std::runtime_error("damped_pinv: non-finite result");
    return x.transpose();
}

struct AxisWeights {
    double x = 1.8;
    double y = 1.8;
    double theta = 0.15;
};

struct DriftProfile {
    ActionVector s{};
    ActionVector s_hat{};
    AxisWeights w{};
    double lambda = 3e-4;
    double gain = 1.6;
    std::size_t samples = 0;
};

/// Raw per-dimension scores s_j = E_a[ sum_c w_c |J+_{j,c}(theta(a))| ]
/// and their mean-normalized form s_hat.
inline DriftProfile drift_scores(std::span<const ActionVector> actions, const AxisWeights& w = {}, double lambda = 3e-4,
                                 double gain = 1.6) {
    if (actions.empty()) throw std::invalid_argument("drift_scores: empty calibration set");
    DriftProfile p;
    p.w = w;
    p.lambda = lambda;
    p.gain = gain;
    p.samples = actions.size();
    const std::array<double, 3> wc{w.x, w.y, w.theta};
    for (const auto& a : actions) {
        const auto pinv = damped_pinv(structural_jacobian(cumulative_theta(a, gain)).j, lambda);
        for (std::size_t j = 0; j < kActionDim; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < 3; ++c) acc += wc[c] * std::abs(pinv(j, c));
            p.s[j] += acc;
        }
    }
    double mean = 0.0;
    for (auto& v : p.s) {
        v /= static_cast<double>(actions.size());
        mean += v / static_cast<double>(kActionDim);
    }
    if (!(mean > 0.0)) throw std::runtime_error("drift_scores: degenerate (all-zero) scores");
    for (std::size_t j = 0; j < kActionDim; ++j) p.s_hat[j] = p.s[j] / mean;
    return p;
}

/// One forward-noised calibration tuple (x_t, t, z, eps).
struct DenoiseSample {
    Vector x_t;
    int step = 1;
    Vector z;
    Vector eps;
};
using DenoiseBatch = std::vector<DenoiseSample>;

struct LayerGradient {
    std::string layer;
    Matrix grad;
};

template <class D>
concept EpsilonPredictor = requires(const D& d, const DenoiseSample& s) {
    { d.predict_eps(s.x_t, s.step, s.z) } -> std::convertible_to<Vector>;
};

template <class D>
concept DriftDifferentiable = EpsilonPredictor<D> && requires(const D& d, const DenoiseBatch& b, std::span<const double> w) {
    { d.drift_gradients(b, w) } -> std::same_as<std::vector<LayerGradient>>;
};

/// Batch mean of sum_j s_hat_j (eps_hat_j - eps_j)^2.
template <EpsilonPredictor D>
double drift_loss(const D& denoiser, const DenoiseBatch& batch, std::span<const double> s_hat) {
    if (batch.empty()) throw std::invalid_argument("drift_loss: empty batch");
    double total = 0.0;
    for (const auto& sample : batch) {
        const Vector eps_hat = denoiser.predict_eps(sample.x_t, sample.step, sample.z);
        if (eps_hat.size() != s_hat.size() || sample.eps.size() != s_hat.size())
            throw std::invalid_argument("drift_loss: dimension mismatch between prediction, target and weights");
        for (std::size_t j = 0; j < s_hat.size(); ++j) {
            const double r = eps_hat[j] - sample.eps[j];
            total += s_hat[j] * r * r;
        }
    }
    return total / static_cast<double>(batch.size());
}

enum class RowReduction { kMean, kMax };

struct LayerSensitivity {
    std::vector<std::pair<std::string, double>> phi;  // model order
    std::size_t probe_steps = 16;

    double at(std::string_view layer) const {
        for (const auto& [name, v] : phi)
            if (name == layer) return v;
        throw std::out_of_range("LayerSensitivity: no layer '" + std::string(layer) + "'");
    }
    /// Restriction to `layers`, in the given order.
    LayerSensitivity subset(std::span<const std::string> layers) const {
        LayerSensitivity out{{}, probe_steps};
        for (const auto& l : layers) out.phi.emplace_back(l, at(l));
        return out;
    }
};

/// phi_l = (1/R) sum_r (1/d_out) sum_i |dL/dW_l|_i, where |.|_i reduces output row i
/// (mean of absolute values by default).
template <DriftDifferentiable D>
LayerSensitivity layer_sensitivity(const D& denoiser, std::span<const DenoiseBatch> batches, std::span<const double> s_hat,
                                   std::size_t probe_steps = 16, RowReduction reduction = RowReduction::kMean) {
    if (probe_steps == 0) throw std::invalid_argument("layer_sensitivity: probe_steps must be >= 1");
    if (batches.size() < probe_steps)
        throw std::invalid_argument("layer_sensitivity: " + std::to_string(batches.size()) + " batches for " +
                                    std::to_string(probe_steps) + " probe steps");
    LayerSensitivity out{{}, probe_steps};
    for (std::size_t r = 0; r < probe_steps; ++r) {
        const auto grads = denoiser.drift_gradients(batches[r], s_hat);
        if (out.phi.empty())
            for (const auto& g : grads) out.phi.emplace_back(g.layer, 0.0);
        if (grads.size() != out.phi.size()) throw std::runtime_error("layer_sensitivity: layer set changed between probe steps");
        for (std::size_t l = 0; l < grads.size(); ++l) {
            const Matrix& g = grads[l].grad;
            if (!all_finite(g.values())) throw std::runtime_error("layer_sensitivity: non-finite gradient for layer '" + grads[l].layer + "'");
            double acc = 0.0;
            for (std::size_t i = 0; i < g.rows(); ++i) {
                double row = 0.0;
                for (double v : g.row(i)) row = reduction == RowReduction::kMean ? row + std::abs(v) : std::max(row, std::abs(v));
                if (reduction == RowReduction::kMean) row /= static_cast<double>(g.cols());
                acc += row;
            }
            out.phi[l].second += acc / static_cast<double>(g.rows()) / static_cast<double>(probe_steps);
        }
    }
    return out;
}

/// Number of layers retained at high precision: ceil(k% * n).
inline std::size_t retained_count(double k_percent, std::size_t n) {
    if (k_percent < 0.0 || k_percent > 100.0) throw std::invalid_argument("retention ratio must lie in [0, 100]");
    const double exact = k_percent * static_cast<double>(n) / 100.0;
    return std::min(n, static_cast<std::size_t>(std::ceil(exact - 1e-9)));
}

/// Top-k% layers by phi go to HIGH16, the rest to W4. Ties go to the earlier layer.
inline BitWidthMap allocate_bits(const LayerSensitivity& sens, double k_percent) {
    const std::size_t n = sens.phi.size();
    const std::size_t keep = retained_count(k_percent, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sens.phi[a].second > sens.phi[b].second; });
    std::vector<BitWidthMap::Entry> entries;
    for (const auto& [name, v] : sens.phi) entries.emplace_back(name, Precision::kW4);
    for (std::size_t i = 0; i < keep; ++i) entries[order[i]].second = Precision::kHigh16;
    return BitWidthMap(std::move(entries));
}

}  // namespace dptq::drift
