// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dptq/drift.hpp"
#include "dptq/linalg.hpp"
#include "dptq/linear.hpp"
#include "dptq/random.hpp"

namespace dptq {

class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, int step) : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    int step() const noexcept { return step_; }

private:
    int step_;
};

struct PolicyConfig {
    std::size_t obs_dim = 13;
    std::size_t instr_dim = 8;
    std::size_t backbone_hidden = 128;
    std::size_t z_dim = 64;
    std::size_t hidden = 128;
    std::size_t mlp = 128;
    std::size_t blocks = 6;
    std::size_t temb_dim = 8;
    int steps = 8;
    double beta_start = 0.02;
    double beta_end = 0.5;
    double action_scale = 0.25;
    // Initialization gains (weight std = gain / sqrt(fan_in)).
    double gain_backbone = 1.0;
    double gain_in = 0.1;
    double gain_cond = 1.0;
    double gain_fc1 = 0.5;
    double gain_fc2 = 1.0;
};

/// Linear beta schedule; alpha_bar(0) = 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    NoiseSchedule(int steps, double beta_start, double beta_end) : alpha_bar_(static_cast<std::size_t>(steps) + 1, 1.0) {
        if (steps < 1) throw std::invalid_argument("NoiseSchedule: need at least one step");
        for (int n = 1; n <= steps; ++n) {
            const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (n - 1) / (steps - 1);
            alpha_bar_[static_cast<std::size_t>(n)] = alpha_bar_[static_cast<std::size_t>(n - 1)] * (1.0 - beta);
        }
    }
    int steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
    double alpha_bar(int n) const { return alpha_bar_.at(static_cast<std::size_t>(n)); }

private:
    std::vector<double> alpha_bar_{1.0};
};

inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }
inline Matrix round_f32(Matrix m) {
    for (auto& v : m.values()) v = round_f32(v);
    return m;
}
inline Vector round_f32(Vector v) {
    for (auto& x : v) x = round_f32(x);
    return v;
}

/// Frozen random-feature backbone feeding a diffusion-style action denoiser.
///
/// backbone:  z = W_out tanh(W_fc [obs; instruction] + b_fc) + b_out
/// denoiser:  h = W_in [x_t; temb(t)] + b_in;  (gamma, beta) = W_cond z + b_cond
///            per block: h += W2 tanh(W1 (h * (1 + gamma) + beta) + b1) + b2
///            x0_hat = W_head h + b_head;  eps_hat = (x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)
class Policy {
public:
    static constexpr std::size_t kBackboneFc = 0;
    static constexpr std::size_t kBackboneOut = 1;
    static constexpr std::size_t kHeadIn = 2;
    static constexpr std::size_t kHeadCond = 3;
    static constexpr std::size_t kFirstBlock = 4;

    Policy() = default;

    /// Seeded random initialization; weights are representable in 32-bit floats.
    static Policy random(const PolicyConfig& cfg, std::uint64_t seed) {
        Policy p;
        p.cfg_ = cfg;
        p.schedule_ = NoiseSchedule(cfg.steps, cfg.beta_start, cfg.beta_end);
        Rng rng(derive_seed(seed, "policy-init"));
        p.instruction_ = round_f32(rng.normal_vector(cfg.instr_dim, 1.0));
        auto dense = [&](std::string name, std::size_t out, std::size_t in, double gain) {
            Matrix w = rng.normal_matrix(out, in, gain / std::sqrt(static_cast<double>(in)));
            Vector b = rng.normal_vector(out, 0.1);
            p.layers_.emplace_back(std::move(name), round_f32(std::move(w)), round_f32(std::move(b)));
        };
        dense("backbone.fc", cfg.backbone_hidden, cfg.obs_dim + cfg.instr_dim, cfg.gain_backbone);
        dense("backbone.out", cfg.z_dim, cfg.backbone_hidden, 1.0);
        dense("head.in", cfg.hidden, drift::kActionDim + cfg.temb_dim, cfg.gain_in);
        dense("head.cond", 2 * cfg.hidden, cfg.z_dim, cfg.gain_cond);
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            dense("head.block" + std::to_string(b) + ".fc1", cfg.mlp, cfg.hidden, cfg.gain_fc1);
            dense("head.block" + std::to_string(b) + ".fc2", cfg.hidden, cfg.mlp, cfg.gain_fc2);
        }
        dense("head.out", drift::kActionDim, cfg.hidden, 1.0);
        return p;
    }

    /// Reassembles a policy from deserialized parts.
    static Policy assemble(const PolicyConfig& cfg, Vector instruction, std::vector<Linear> layers) {
        Policy p;
        p.cfg_ = cfg;
        p.schedule_ = NoiseSchedule(cfg.steps, cfg.beta_start, cfg.beta_end);
        p.instruction_ = std::move(instruction);
        p.layers_ = std::move(layers);
        p.check_shapes();
        return p;
    }

    const PolicyConfig& config() const noexcept { return cfg_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    const Vector& instruction() const noexcept { return instruction_; }
    std::vector<Linear>& layers() noexcept { return layers_; }
    const std::vector<Linear>& layers() const noexcept { return layers_; }

    std::size_t block_fc1(std::size_t b) const noexcept { return kFirstBlock + 2 * b; }
    std::size_t block_fc2(std::size_t b) const noexcept { return kFirstBlock + 2 * b + 1; }
    std::size_t head_out() const noexcept { return kFirstBlock + 2 * cfg_.blocks; }

    Linear& layer(std::string_view name) { return layers_.at(index_of(name)); }
    const Linear& layer(std::string_view name) const { return layers_.at(index_of(name)); }
    std::size_t index_of(std::string_view name) const {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].name() == name) return i;
        throw std::out_of_range("Policy: no layer named '" + std::string(name) + "'");
    }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> out;
        for (const auto& l : layers_) out.push_back(l.name());
        return out;
    }
    /// Layers of the action denoiser, in forward order.
    std::vector<std::string> head_layer_names() const {
        std::vector<std::string> out;
        for (std::size_t i = kHeadIn; i < layers_.size(); ++i) out.push_back(layers_[i].name());
        return out;
    }
    std::vector<LayerShape> layer_shapes() const {
        std::vector<LayerShape> out;
        for (const auto& l : layers_) out.push_back({l.name(), l.out_dim(), l.in_dim()});
        return out;
    }

    Vector backbone_input(std::span<const double> obs) const {
        if (obs.size() != cfg_.obs_dim) {
            throw std::invalid_argument("Policy: observation has " + std::to_string(obs.size()) + " features, expected " +
                                        std::to_string(cfg_.obs_dim));
        }
        Vector in(obs.begin(), obs.end());
        in.insert(in.end(), instruction_.begin(), instruction_.end());
        return in;
    }

    Vector backbone_hidden(std::span<const double> obs) const {
        Vector h = layers_[kBackboneFc].forward(backbone_input(obs));
        for (auto& v : h) v = std::tanh(v);
        return h;
    }

    /// Conditioning vector z.
    Vector encode(std::span<const double> obs) const { return layers_[kBackboneOut].forward(backbone_hidden(obs)); }

    Vector time_embedding(int step) const {
        Vector e(cfg_.temb_dim);
        const double tau = static_cast<double>(step) / cfg_.steps;
        for (std::size_t k = 0; k < cfg_.temb_dim / 2; ++k) {
            const double f = 0.5 * M_PI * std::pow(2.0, static_cast<double>(k));
            e[2 * k] = std::sin(f * tau);
            e[2 * k + 1] = std::cos(f * tau);
        }
        return e;
    }

    /// Intermediate activations of one denoiser evaluation.
    struct Trace {
        Vector input;           // [x_t; temb]
        Vector cond;            // [gamma; beta]
        std::vector<Vector> h;  // stream entering each block, then the final stream
        std::vector<Vector> m;  // modulated block inputs
        std::vector<Vector> u;  // tanh activations
        Vector x0;
    };

    /// [gamma; beta] for conditioning vector z.
    Vector condition(std::span<const double> z) const {
        if (z.size() != cfg_.z_dim) throw std::invalid_argument("Policy: conditioning vector has wrong length");
        return layers_[kHeadCond].forward(z);
    }

    Vector predict_x0(std::span<const double> x_t, int step, std::span<const double> z, Trace* trace = nullptr) const {
        return predict_x0_conditioned(x_t, step, condition(z), trace);
    }

    Vector predict_x0_conditioned(std::span<const double> x_t, int step, std::span<const double> c, Trace* trace = nullptr) const {
        if (x_t.size() != drift::kActionDim) throw std::invalid_argument("Policy: x_t must have 7 entries");
        if (step < 1 || step > cfg_.steps) throw std::invalid_argument("Policy: denoising step out of range");
        Vector input(x_t.begin(), x_t.end());
        const Vector te = time_embedding(step);
        input.insert(input.end(), te.begin(), te.end());
        Vector h = layers_[kHeadIn].forward(input);
        const std::size_t H = cfg_.hidden;
        if (trace) {
            trace->input = input;
            trace->cond.assign(c.begin(), c.end());
            trace->h.clear();
            trace->m.clear();
            trace->u.clear();
        }
        for (std::size_t b = 0; b < cfg_.blocks; ++b) {
            Vector m(H);
            for (std::size_t i = 0; i < H; ++i) m[i] = h[i] * (1.0 + c[i]) + c[H + i];
            Vector u = layers_[block_fc1(b)].forward(m);
            for (auto& v : u) v = std::tanh(v);
            const Vector r = layers_[block_fc2(b)].forward(u);
            if (trace) {
                trace->h.push_back(h);
                trace->m.push_back(m);
                trace->u.push_back(u);
            }
            for (std::size_t i = 0; i < H; ++i) h[i] += r[i];
        }
        Vector x0 = layers_[head_out()].forward(h);
        if (trace) {
            trace->h.push_back(h);
            trace->x0 = x0;
        }
        return x0;
    }

    /// Final stream fed to the output head.
    Vector penultimate(std::span<const double> x_t, int step, std::span<const double> z) const {
        Trace t;
        predict_x0(x_t, step, z, &t);
        return t.h.back();
    }

    Vector predict_eps(std::span<const double> x_t, int step, std::span<const double> z) const {
        const Vector x0 = predict_x0(x_t, step, z);
        const double ab = schedule_.alpha_bar(step);
        Vector eps(x0.size());
        for (std::size_t j = 0; j < x0.size(); ++j) eps[j] = (x_t[j] - std::sqrt(ab) * x0[j]) / std::sqrt(1.0 - ab);
        return eps;
    }

    /// Deterministic DDIM sampling from `initial_noise`; returns the action in physical units.
    /// `observer`, if set, sees the activations of every denoising step.
    Vector denoise(std::span<const double> z, std::span<const double> initial_noise,
                   const std::function<void(const Trace&)>& observer = {}) const {
        if (initial_noise.size() != drift::kActionDim) throw std::invalid_argument("denoise: initial noise must have 7 entries");
        const Vector c = condition(z);
        Vector x(initial_noise.begin(), initial_noise.end());
        Trace tr;
        for (int n = cfg_.steps; n >= 1; --n) {
            const Vector x0 = predict_x0_conditioned(x, n, c, observer ? &tr : nullptr);
            if (observer) observer(tr);
            if (!all_finite(x0)) throw NonFiniteError("denoise: non-finite prediction", n);
            if (n == 1) {
                x = x0;
                break;
            }
            const double ab = schedule_.alpha_bar(n), ab_prev = schedule_.alpha_bar(n - 1);
            for (std::size_t j = 0; j < x.size(); ++j) {
                const double eps = (x[j] - std::sqrt(ab) * x0[j]) / std::sqrt(1.0 - ab);
                x[j] = std::sqrt(ab_prev) * x0[j] + std::sqrt(1.0 - ab_prev) * eps;
            }
            if (!all_finite(x)) throw NonFiniteError("denoise: non-finite iterate", n);
        }
        for (auto& v : x) v *= cfg_.action_scale;
        return x;
    }

    Vector act(std::span<const double> obs, std::span<const double> initial_noise) const {
        return denoise(encode(obs), initial_noise);
    }

    /// Exact reverse-mode gradients of the drift-weighted loss for every denoiser layer.
    std::vector<drift::LayerGradient> drift_gradients(const drift::DenoiseBatch& batch, std::span<const double> s_hat) const {
        if (batch.empty()) throw std::invalid_argument("drift_gradients: empty batch");
        if (s_hat.size() != drift::kActionDim) throw std::invalid_argument("drift_gradients: weight vector must have 7 entries");
        for (std::size_t i = kHeadIn; i < layers_.size(); ++i) {
            if (layers_[i].input_quant() || layers_[i].post())
                throw std::invalid_argument("drift_gradients: unsupported layer type for '" + layers_[i].name() +
                                            "' (quantized activations or fused post-affine)");
        }
        const std::size_t H = cfg_.hidden;
        std::vector<drift::LayerGradient> grads;
        for (std::size_t i = kHeadIn; i < layers_.size(); ++i)
            grads.push_back({layers_[i].name(), Matrix(layers_[i].out_dim(), layers_[i].in_dim())});
        auto grad_of = [&](std::size_t layer_index) -> Matrix& { return grads[layer_index - kHeadIn].grad; };
        auto accumulate = [](Matrix& g, std::span<const double> dy, std::span<const double> x) {
            for (std::size_t i = 0; i < dy.size(); ++i) {
                if (dy[i] == 0.0) continue;
                auto row = g.row(i);
                for (std::size_t j = 0; j < x.size(); ++j) row[j] += dy[i] * x[j];
            }
        };

        const double inv_b = 1.0 / static_cast<double>(batch.size());
        Trace tr;
        for (const auto& s : batch) {
            const Vector x0 = predict_x0(s.x_t, s.step, s.z, &tr);
            const double ab = schedule_.alpha_bar(s.step);
            const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
            Vector g_x0(drift::kActionDim);
            for (std::size_t j = 0; j < drift::kActionDim; ++j) {
                const double eps_hat = (s.x_t[j] - ca * x0[j]) / cb;
                const double g_eps = 2.0 * s_hat[j] * (eps_hat - s.eps[j]) * inv_b;
                g_x0[j] = -ca / cb * g_eps;
            }
            accumulate(grad_of(head_out()), g_x0, tr.h.back());
            Vector g_h = matvec_transposed(layers_[head_out()].effective(), g_x0);
            Vector g_cond(2 * H, 0.0);
            for (std::size_t b = cfg_.blocks; b-- > 0;) {
                // h_{b+1} = h_b + W2 u + b2,  u = tanh(W1 m + b1),  m = h_b (1 + gamma) + beta
                accumulate(grad_of(block_fc2(b)), g_h, tr.u[b]);
                Vector g_a = matvec_transposed(layers_[block_fc2(b)].effective(), g_h);
                for (std::size_t k = 0; k < g_a.size(); ++k) g_a[k] *= 1.0 - tr.u[b][k] * tr.u[b][k];
                accumulate(grad_of(block_fc1(b)), g_a, tr.m[b]);
                const Vector g_m = matvec_transposed(layers_[block_fc1(b)].effective(), g_a);
                for (std::size_t i = 0; i < H; ++i) {
                    g_cond[i] += g_m[i] * tr.h[b][i];
                    g_cond[H + i] += g_m[i];
                    g_h[i] += g_m[i] * (1.0 + tr.cond[i]);
                }
            }
            accumulate(grad_of(kHeadIn), g_h, tr.input);
            accumulate(grad_of(kHeadCond), g_cond, s.z);
        }
        return grads;
    }

private:
    void check_shapes() const {
        const std::size_t expected = kFirstBlock + 2 * cfg_.blocks + 1;
        if (layers_.size() != expected)
            throw std::invalid_argument("Policy: expected " + std::to_string(expected) + " layers, got " + std::to_string(layers_.size()));
        auto expect = [&](std::size_t i, std::size_t out, std::size_t in) {
            if (layers_[i].out_dim() != out || layers_[i].in_dim() != in)
                throw std::invalid_argument("Policy: layer '" + layers_[i].name() + "' has unexpected shape");
        };
        expect(kBackboneFc, cfg_.backbone_hidden, cfg_.obs_dim + cfg_.instr_dim);
        expect(kBackboneOut, cfg_.z_dim, cfg_.backbone_hidden);
        expect(kHeadIn, cfg_.hidden, drift::kActionDim + cfg_.temb_dim);
        expect(kHeadCond, 2 * cfg_.hidden, cfg_.z_dim);
        for (std::size_t b = 0; b < cfg_.blocks; ++b) {
            expect(block_fc1(b), cfg_.mlp, cfg_.hidden);
            expect(block_fc2(b), cfg_.hidden, cfg_.mlp);
        }
        expect(head_out(), drift::kActionDim, cfg_.hidden);
        if (instruction_.size() != cfg_.instr_dim) throw std::invalid_argument("Policy: instruction embedding has wrong length");
    }

    PolicyConfig cfg_;
    NoiseSchedule schedule_;
    Vector instruction_;
    std::vector<Linear> layers_;
};

struct HeadFitReport {
    double ridge_used = 0.0;
    double rmse_before = 0.0;  // x0 prediction error on the fitting set
    double rmse_after = 0.0;
    std::vector<std::string> warnings;
};

/// Refits the output head by closed-form ridge regression of the clean-action
/// target x0 = (x_t - sqrt(1 - ab) eps) / sqrt(ab) on the penultimate stream.
/// All other weights are untouched. The bias column is not regularized.
inline HeadFitReport fit_head(Policy& policy, const drift::DenoiseBatch& samples, double ridge = 1e-3) {
    if (samples.empty()) throw std::invalid_argument("fit_head: no samples");
    const std::size_t H = policy.config().hidden, A = drift::kActionDim, n = samples.size();
    const std::size_t p = H + 1;
    Matrix gram(p, p), cross(p, A);
    HeadFitReport rep;
    double sse_before = 0.0;
    for (const auto& s : samples) {
        Policy::Trace tr;
        const Vector x0_hat = policy.predict_x0(s.x_t, s.step, s.z, &tr);
        Vector phi = tr.h.back();
        phi.push_back(1.0);
        const double ab = policy.schedule().alpha_bar(s.step);
        for (std::size_t j = 0; j < A; ++j) {
            const double target = (s.x_t[j] - std::sqrt(1.0 - ab) * s.eps[j]) / std::sqrt(ab);
            sse_before += (x0_hat[j] - target) * (x0_hat[j] - target);
            for (std::size_t i = 0; i < p; ++i) cross(i, j) += phi[i] * target / static_cast<double>(n);
        }
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t k = 0; k < p; ++k) gram(i, k) += phi[i] * phi[k] / static_cast<double>(n);
    }
    rep.rmse_before = std::sqrt(sse_before / static_cast<double>(n * A));

    double lambda = ridge;
    Matrix l, beta;
    for (int attempt = 0;; ++attempt) {
        Matrix g = gram;
        for (std::size_t i = 0; i < H; ++i) g(i, i) += lambda;
        if (cholesky(g, l)) {
            beta = cholesky_solve(l, cross);
            if (all_finite(beta.values())) break;
        }
        if (attempt >= 12) throw std::runtime_error("fit_head: design matrix is numerically singular");
        const double next = lambda > 0.0 ? lambda * 10.0 : 1e-8;
        rep.warnings.push_back("rank-deficient design matrix: ridge increased from " + std::to_string(lambda) + " to " +
                               std::to_string(next));
        lambda = next;
    }
    rep.ridge_used = lambda;

    Matrix w(A, H);
    Vector b(A);
    for (std::size_t j = 0; j < A; ++j) {
        for (std::size_t i = 0; i < H; ++i) w(j, i) = beta(i, j);
        b[j] = beta(H, j);
    }
    Linear& head = policy.layers()[policy.head_out()];
    head.set_bias(round_f32(std::move(b)));
    head.set_weight(round_f32(std::move(w)));

    double sse_after = 0.0;
    for (const auto& s : samples) {
        const Vector x0_hat = policy.predict_x0(s.x_t, s.step, s.z);
        const double ab = policy.schedule().alpha_bar(s.step);
        for (std::size_t j = 0; j < A; ++j) {
            const double target = (s.x_t[j] - std::sqrt(1.0 - ab) * s.eps[j]) / std::sqrt(ab);
            sse_after += (x0_hat[j] - target) * (x0_hat[j] - target);
        }
    }
    rep.rmse_after = std::sqrt(sse_after / static_cast<double>(n * A));
    return rep;
}

}  // namespace dptq
