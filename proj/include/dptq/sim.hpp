// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dptq/drift.hpp"
#include "dptq/linalg.hpp"
#include "dptq/policy.hpp"
#include "dptq/random.hpp"

// Planar reaching task on the seven-increment virtual chain. Links 1..6 have
// unit length; the seventh increment only turns the end effector.
namespace dptq::sim {

using drift::ActionVector;
using drift::kActionDim;

inline constexpr std::size_t kObsDim = 13;
inline constexpr double kPoseScale = 6.0;
inline constexpr double kJointScale = 0.3;
inline constexpr ActionVector kRestPose{0.0, 0.3, -0.2, 0.3, -0.2, 0.3, 0.0};

struct SimConfig {
    int spatial_bins = 6;
    double angle_lo = -1.2;
    double angle_hi = 1.2;
    double radius_lo = 3.0;
    double radius_hi = 5.0;
    double orientation_jitter = 0.3;
    double init_noise = 0.1;
    double exploration_noise = 0.05;  // added to executed expert actions during data collection
    double expert_gain = 0.3;
    double expert_damping = 0.5;
    double action_limit = 0.25;
    bool nominal_jacobian = true;  // resolved-rate control with the rest-pose Jacobian in the first-link frame
};

struct Pose {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
};

struct ReachTask {
    Pose target;
    int bin = 0;
};

struct ArmSimState {
    ActionVector q{};
    Pose pose;
    int t = 0;
    int horizon = 0;
};

inline ActionVector chain_angles(const ActionVector& q) {
    ActionVector th{};
    double acc = 0.0;
    for (std::size_t k = 0; k < kActionDim; ++k) th[k] = acc += q[k];
    return th;
}

inline Pose forward_kinematics(const ActionVector& q) {
    const ActionVector th = chain_angles(q);
    Pose p;
    for (std::size_t k = 0; k + 1 < kActionDim; ++k) {
        p.x += std::cos(th[k]);
        p.y += std::sin(th[k]);
    }
    p.theta = th[kActionDim - 1];
    return p;
}

/// d(x, y, theta)/dq at the current configuration.
inline Matrix jacobian(const ActionVector& q) { return drift::structural_jacobian(chain_angles(q)).j; }

inline double wrap_angle(double a) { return std::remainder(a, 2.0 * M_PI); }

/// Targets are stratified by polar angle: bin b covers an equal slice of [angle_lo, angle_hi].
inline ReachTask sample_task(Rng& rng, int bin, const SimConfig& cfg = {}) {
    if (bin < 0 || bin >= cfg.spatial_bins) throw std::invalid_argument("sample_task: bin index out of range");
    const double width = (cfg.angle_hi - cfg.angle_lo) / cfg.spatial_bins;
    const double angle = cfg.angle_lo + width * (bin + rng.uniform());
    const double radius = cfg.radius_lo + (cfg.radius_hi - cfg.radius_lo) * rng.uniform();
    ReachTask t;
    t.bin = bin;
    t.target = {radius * std::cos(angle), radius * std::sin(angle),
                angle + cfg.orientation_jitter * (2.0 * rng.uniform() - 1.0)};
    return t;
}

inline ArmSimState initial_state(Rng& rng, const SimConfig& cfg = {}) {
    ArmSimState s;
    s.q = kRestPose;
    s.q[0] = 0.5 * (2.0 * rng.uniform() - 1.0);
    for (auto& v : s.q) v += cfg.init_noise * rng.normal();
    s.pose = forward_kinematics(s.q);
    return s;
}

/// [0.3 q (7), x/6, y/6, heading, target offset (3)]. The target offset is expressed in
/// the frame of the first link: R(q_1)^T (target - pose) / 6 and the wrapped heading error.
/// Joint angles are down-weighted so the fitted policy reacts mainly to task-space error.
inline Vector observe(const ArmSimState& s, const ReachTask& task) {
    Vector o(s.q.begin(), s.q.end());
    for (auto& v : o) v *= kJointScale;
    o.push_back(s.pose.x / kPoseScale);
    o.push_back(s.pose.y / kPoseScale);
    o.push_back(s.pose.theta);
    const double dx = task.target.x - s.pose.x, dy = task.target.y - s.pose.y;
    const double c = std::cos(s.q[0]), sn = std::sin(s.q[0]);
    o.push_back((c * dx + sn * dy) / kPoseScale);
    o.push_back((-sn * dx + c * dy) / kPoseScale);
    o.push_back(wrap_angle(task.target.theta - s.pose.theta));
    return o;
}

/// Proportional controller in end-effector space mapped through a damped pseudo-inverse,
/// either of the current Jacobian or of the rest-pose Jacobian expressed in the first-link frame.
inline ActionVector expert_action(const ArmSimState& s, const ReachTask& task, const SimConfig& cfg = {}) {
    std::array<double, 3> err{task.target.x - s.pose.x, task.target.y - s.pose.y, wrap_angle(task.target.theta - s.pose.theta)};
    Matrix pinv;
    if (cfg.nominal_jacobian) {
        pinv = drift::damped_pinv(jacobian(kRestPose), cfg.expert_damping);
        const double c = std::cos(s.q[0]), sn = std::sin(s.q[0]);
        err = {c * err[0] + sn * err[1], -sn * err[0] + c * err[1], err[2]};
    } else {
        pinv = drift::damped_pinv(jacobian(s.q), cfg.expert_damping);
    }
    ActionVector a{};
    for (std::size_t j = 0; j < kActionDim; ++j) {
        double v = 0.0;
        for (std::size_t c = 0; c < 3; ++c) v += pinv(j, c) * err[c];
        a[j] = std::clamp(cfg.expert_gain * v, -cfg.action_limit, cfg.action_limit);
    }
    return a;
}

inline void step(ArmSimState& s, std::span<const double> action) {
    if (action.size() != kActionDim) throw std::invalid_argument("step: action must have 7 entries");
    for (std::size_t j = 0; j < kActionDim; ++j) s.q[j] += action[j];
    s.pose = forward_kinematics(s.q);
    ++s.t;
    if (!all_finite(s.q) || !std::isfinite(s.pose.x) || !std::isfinite(s.pose.y) || !std::isfinite(s.pose.theta))
        throw NonFiniteError("simulator: non-finite state", s.t);
}

inline double xy_distance(const Pose& a, const Pose& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Environment for evaluation seed `env_seed`; bins cycle with the seed.
inline std::pair<ReachTask, ArmSimState> make_episode(std::uint64_t env_seed, std::uint64_t index, const SimConfig& cfg = {}) {
    Rng rng(derive_seed(env_seed, "episode", index));
    const ReachTask task = sample_task(rng, static_cast<int>(index % static_cast<std::uint64_t>(cfg.spatial_bins)), cfg);
    return {task, initial_state(rng, cfg)};
}

/// Denoising noise for step t, shared by every policy rolled out in this environment.
inline Vector step_noise(std::uint64_t env_seed, int t) {
    Rng rng(derive_seed(env_seed, "denoise-noise", static_cast<std::uint64_t>(t)));
    return rng.normal_vector(kActionDim);
}

struct RolloutOptions {
    std::optional<ActionVector> inject;  // added to the quantized policy's action every step
    bool open_loop = true;               // also accumulate drift along the FP trajectory
};

struct RolloutReport {
    std::vector<ActionVector> eps;           // a_q - a_fp at the quantized states
    std::vector<std::array<double, 3>> de;   // J(s_q) eps_t
    std::array<double, 3> e_total{};         // running sum of de
    std::vector<double> e_norm_curve;        // ||E_t|| after each step
    std::array<double, 3> e_open_loop{};     // same sum measured along the FP trajectory
    Pose final_fp;
    Pose final_q;
    double final_gap = 0.0;                  // xy distance between the two final poses
    int horizon = 0;

    double e_norm() const { return std::sqrt(e_total[0] * e_total[0] + e_total[1] * e_total[1] + e_total[2] * e_total[2]); }
    double e_open_loop_norm() const {
        return std::sqrt(e_open_loop[0] * e_open_loop[0] + e_open_loop[1] * e_open_loop[1] + e_open_loop[2] * e_open_loop[2]);
    }
};

/// Runs the FP policy and the quantized policy side by side in the same environment.
/// The FP rollout provides the nominal final pose; action errors are measured at the
/// quantized rollout's own states against FP actions recomputed there.
inline RolloutReport rollout_closed_loop(const Policy& fp, const Policy& q, std::uint64_t env_seed, int horizon,
                                         const RolloutOptions& opt = {}, const SimConfig& cfg = {}, std::uint64_t episode_index = 0) {
    if (horizon < 1) throw std::invalid_argument("rollout_closed_loop: horizon must be >= 1");
    auto [task, s0] = make_episode(env_seed, episode_index, cfg);
    ArmSimState s_fp = s0, s_q = s0;
    s_fp.horizon = s_q.horizon = horizon;
    RolloutReport rep;
    rep.horizon = horizon;
    rep.eps.reserve(static_cast<std::size_t>(horizon));
    for (int t = 0; t < horizon; ++t) {
        const Vector noise = step_noise(env_seed, t);

        const Vector obs_q = observe(s_q, task);
        Vector a_q = q.act(obs_q, noise);
        const Vector a_ref = &q == &fp ? a_q : fp.act(obs_q, noise);
        if (opt.inject)
            for (std::size_t j = 0; j < kActionDim; ++j) a_q[j] += (*opt.inject)[j];

        ActionVector eps{};
        for (std::size_t j = 0; j < kActionDim; ++j) eps[j] = a_q[j] - a_ref[j];
        const Matrix jq = jacobian(s_q.q);
        std::array<double, 3> de{};
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t j = 0; j < kActionDim; ++j) de[c] += jq(c, j) * eps[j];
            rep.e_total[c] += de[c];
        }
        rep.eps.push_back(eps);
        rep.de.push_back(de);
        rep.e_norm_curve.push_back(rep.e_norm());

        const Vector obs_fp = observe(s_fp, task);
        const Vector a_fp = fp.act(obs_fp, noise);
        if (opt.open_loop) {
            Vector a_q_fp = q.act(obs_fp, noise);
            if (opt.inject)
                for (std::size_t j = 0; j < kActionDim; ++j) a_q_fp[j] += (*opt.inject)[j];
            const Matrix jf = jacobian(s_fp.q);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t j = 0; j < kActionDim; ++j) rep.e_open_loop[c] += jf(c, j) * (a_q_fp[j] - a_fp[j]);
        }

        step(s_q, a_q);
        step(s_fp, a_fp);
    }
    rep.final_fp = s_fp.pose;
    rep.final_q = s_q.pose;
    rep.final_gap = xy_distance(s_fp.pose, s_q.pose);
    return rep;
}

/// Distance from the end effector to the target after rolling a single policy out.
inline double reach_error(const Policy& p, std::uint64_t env_seed, int horizon, const SimConfig& cfg = {}) {
    auto [task, s] = make_episode(env_seed, 0, cfg);
    for (int t = 0; t < horizon; ++t) step(s, p.act(observe(s, task), step_noise(env_seed, t)));
    return xy_distance(s.pose, task.target);
}

}  // namespace dptq::sim
