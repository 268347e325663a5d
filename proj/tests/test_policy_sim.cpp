// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>

#include "dptq/drift.hpp"
#include "dptq/linear.hpp"
#include "dptq/moments.hpp"
#include "dptq/policy.hpp"
#include "dptq/random.hpp"
#include "dptq/sim.hpp"

using namespace dptq;
using drift::ActionVector;

namespace {

PolicyConfig small_config() {
    PolicyConfig c;
    c.obs_dim = 13;
    c.instr_dim = 3;
    c.backbone_hidden = 10;
    c.z_dim = 5;
    c.hidden = 6;
    c.mlp = 5;
    c.blocks = 2;
    c.temb_dim = 4;
    c.gain_in = 1.0;
    return c;
}

drift::DenoiseBatch random_batch(const Policy& p, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    drift::DenoiseBatch b;
    for (std::size_t i = 0; i < n; ++i)
        b.push_back({rng.normal_vector(7), 1 + static_cast<int>(rng.next() % p.config().steps), rng.normal_vector(p.config().z_dim),
                     rng.normal_vector(7)});
    return b;
}

const ActionVector kWeights{1.9, 1.6, 1.2, 0.9, 0.6, 0.4, 0.4};

// Central-difference check of sampled gradient entries; returns the worst relative error per layer.
std::vector<double> gradient_check(Policy p, const drift::DenoiseBatch& batch, std::size_t per_layer, std::uint64_t seed) {
    const auto grads = p.drift_gradients(batch, kWeights);
    Rng rng(seed);
    std::vector<double> worst;
    for (const auto& g : grads) {
        const std::size_t l = p.index_of(g.layer);
        const Matrix w0 = p.layers()[l].effective();
        const double scale = max_abs(g.grad.values());
        double err = 0.0;
        for (std::size_t s = 0; s < std::min(per_layer, w0.size()); ++s) {
            const std::size_t k = per_layer >= w0.size() ? s : static_cast<std::size_t>(rng.next() % w0.size());
            const double h = 1e-5 * std::max(1.0, std::abs(w0.values()[k]));
            Matrix w = w0;
            w.values()[k] += h;
            p.layers()[l].set_weight(w);
            const double up = drift::drift_loss(p, batch, kWeights);
            w.values()[k] = w0.values()[k] - h;
            p.layers()[l].set_weight(w);
            const double down = drift::drift_loss(p, batch, kWeights);
            const double fd = (up - down) / (2.0 * h), an = g.grad.values()[k];
            err = std::max(err, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3 * scale}));
        }
        p.layers()[l].set_weight(w0);
        worst.push_back(err);
    }
    return worst;
}

}  // namespace

TEST(Policy, DeterministicConstruction) {
    const Policy a = Policy::random({}, 3), b = Policy::random({}, 3), c = Policy::random({}, 4);
    Rng rng(1);
    const Vector obs = rng.normal_vector(13), noise = rng.normal_vector(7);
    EXPECT_EQ(a.act(obs, noise), b.act(obs, noise));
    EXPECT_NE(a.act(obs, noise), c.act(obs, noise));
    EXPECT_EQ(a.layers().size(), 4 + 2 * 6 + 1u);
    EXPECT_EQ(a.layer_names().front(), "backbone.fc");
    EXPECT_EQ(a.layer_names().back(), "head.out");
    EXPECT_EQ(a.head_layer_names().size(), a.layers().size() - Policy::kHeadIn);
}

TEST(Policy, WeightsAreSinglePrecision) {
    const Policy p = Policy::random({}, 5);
    for (const auto& l : p.layers())
        for (double v : l.effective().values()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v))) << l.name();
}

TEST(Policy, EncodingVariesWithObservation) {
    const Policy p = Policy::random({}, 6);
    Rng rng(2);
    RunningMoments m(p.config().z_dim);
    for (int i = 0; i < 64; ++i) m.update(p.encode(rng.normal_vector(13)));
    const Matrix cov = m.covariance();
    for (std::size_t i = 0; i < cov.rows(); ++i) EXPECT_GT(cov(i, i), 0.0);
    EXPECT_THROW(p.encode(Vector(12)), std::invalid_argument);
}

TEST(Policy, ObserverSeesEveryStep) {
    const Policy p = Policy::random({}, 7);
    Rng rng(3);
    int calls = 0;
    const Vector a = p.denoise(rng.normal_vector(64), rng.normal_vector(7), [&](const Policy::Trace& t) {
        ++calls;
        EXPECT_EQ(t.h.size(), p.config().blocks + 1);
    });
    EXPECT_EQ(calls, p.config().steps);
    EXPECT_EQ(a.size(), 7u);
}

TEST(Policy, PredictEpsInvertsX0) {
    const Policy p = Policy::random(small_config(), 8);
    for (const auto& s : random_batch(p, 10, 4)) {
        const Vector x0 = p.predict_x0(s.x_t, s.step, s.z), eps = p.predict_eps(s.x_t, s.step, s.z);
        const double ab = p.schedule().alpha_bar(s.step);
        for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(std::sqrt(ab) * x0[j] + std::sqrt(1.0 - ab) * eps[j], s.x_t[j], 1e-12);
    }
    EXPECT_THROW(p.predict_x0(Vector(7), 0, Vector(5)), std::invalid_argument);
    EXPECT_THROW(p.predict_x0(Vector(7), p.config().steps + 1, Vector(5)), std::invalid_argument);
}

TEST(Policy, High16ActionsStayClose) {
    const Policy fp = Policy::random({}, 9);
    const Policy q = quantize_model(fp, BitWidthMap::uniform(fp.layer_names(), Precision::kHigh16), {});
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        const Vector obs = rng.normal_vector(13), noise = rng.normal_vector(7);
        const Vector a = fp.act(obs, noise), b = q.act(obs, noise);
        for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(a[j], b[j], 1e-2);
    }
}

TEST(DriftGradients, MatchFiniteDifferencesSmall) {
    const Policy p = Policy::random(small_config(), 10);
    const auto worst = gradient_check(p, random_batch(p, 3, 6), 1000, 1);
    for (double e : worst) EXPECT_LE(e, 1e-4);
}

TEST(DriftGradients, MatchFiniteDifferencesFullSize) {
    const Policy p = Policy::random({}, 11);
    const auto worst = gradient_check(p, random_batch(p, 2, 7), 25, 2);
    ASSERT_EQ(worst.size(), p.layers().size() - Policy::kHeadIn);
    for (double e : worst) EXPECT_LE(e, 1e-4);
}

TEST(DriftGradients, OutputHeadClosedForm) {
    const Policy p = Policy::random(small_config(), 12);
    const auto batch = random_batch(p, 4, 8);
    const auto grads = p.drift_gradients(batch, kWeights);
    const Matrix& g = grads.back().grad;
    ASSERT_EQ(grads.back().layer, "head.out");
    Matrix ref(g.rows(), g.cols());
    for (const auto& s : batch) {
        const Vector h = p.penultimate(s.x_t, s.step, s.z), eps = p.predict_eps(s.x_t, s.step, s.z);
        const double ab = p.schedule().alpha_bar(s.step), c = -std::sqrt(ab) / std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < 7; ++j)
            for (std::size_t i = 0; i < h.size(); ++i) ref(j, i) += 2.0 * kWeights[j] * (eps[j] - s.eps[j]) * c * h[i] / batch.size();
    }
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(g.values()[k], ref.values()[k], 1e-12 * (1.0 + std::abs(ref.values()[k])));
}

TEST(DriftGradients, RejectsWrappedLayers) {
    Policy p = Policy::random(small_config(), 13);
    p.layers()[Policy::kHeadIn].set_input_quant(ActivationQuantizer(1.0));
    EXPECT_THROW(p.drift_gradients(random_batch(p, 1, 9), kWeights), std::invalid_argument);
}

TEST(FitHead, ReducesError) {
    Policy p = Policy::random(small_config(), 14);
    const auto rep = fit_head(p, random_batch(p, 200, 10), 1e-3);
    EXPECT_LT(rep.rmse_after, rep.rmse_before);
    EXPECT_EQ(rep.ridge_used, 1e-3);
    EXPECT_TRUE(rep.warnings.empty());
}

TEST(FitHead, RecoversPlantedHead) {
    const Policy planted = Policy::random(small_config(), 15);
    drift::DenoiseBatch samples = random_batch(planted, 80, 11);
    for (auto& s : samples) s.eps = planted.predict_eps(s.x_t, s.step, s.z);
    Policy p = planted;
    Rng rng(12);
    Matrix w0(7, 6);
    for (auto& v : w0.values()) v = rng.normal();
    p.layers()[p.head_out()].set_weight(round_f32(w0));
    const auto rep = fit_head(p, samples, 1e-12);
    EXPECT_LT(rep.rmse_after, 1e-5);
    const Matrix& w = p.layers()[p.head_out()].effective();
    const Matrix& w_ref = planted.layers()[planted.head_out()].effective();
    for (std::size_t k = 0; k < w.size(); ++k) EXPECT_NEAR(w.values()[k], w_ref.values()[k], 1e-5);
}

TEST(FitHead, Idempotent) {
    Policy p = Policy::random(small_config(), 16);
    const auto samples = random_batch(p, 100, 13);
    fit_head(p, samples, 1e-2);
    const Policy once = p;
    fit_head(p, samples, 1e-2);
    EXPECT_EQ(p.layers()[p.head_out()].effective(), once.layers()[once.head_out()].effective());
    EXPECT_EQ(p.layers()[p.head_out()].bias(), once.layers()[once.head_out()].bias());
}

TEST(FitHead, RaisesRidgeWhenSingular) {
    Policy p = Policy::random(small_config(), 17);
    auto samples = random_batch(p, 1, 14);
    const auto rep = fit_head(p, samples, 0.0);
    EXPECT_GT(rep.ridge_used, 0.0);
    EXPECT_FALSE(rep.warnings.empty());
    EXPECT_THROW(fit_head(p, {}, 1e-3), std::invalid_argument);
}

TEST(Simulator, JacobianMatchesKinematics) {
    Rng rng(20);
    for (int t = 0; t < 50; ++t) {
        ActionVector q{};
        for (auto& v : q) v = rng.uniform(-1.0, 1.0);
        const Matrix j = sim::jacobian(q);
        for (std::size_t c = 0; c < 7; ++c) {
            ActionVector up = q, down = q;
            up[c] += 1e-6;
            down[c] -= 1e-6;
            const auto pu = sim::forward_kinematics(up), pd = sim::forward_kinematics(down);
            EXPECT_NEAR(j(0, c), (pu.x - pd.x) / 2e-6, 1e-7);
            EXPECT_NEAR(j(1, c), (pu.y - pd.y) / 2e-6, 1e-7);
            EXPECT_NEAR(j(2, c), (pu.theta - pd.theta) / 2e-6, 1e-7);
        }
    }
}

TEST(Simulator, Determinism) {
    const auto [t1, s1] = sim::make_episode(42, 3);
    const auto [t2, s2] = sim::make_episode(42, 3);
    EXPECT_EQ(s1.q, s2.q);
    EXPECT_EQ(t1.target.x, t2.target.x);
    EXPECT_EQ(t1.bin, 3);
    EXPECT_EQ(sim::step_noise(42, 5), sim::step_noise(42, 5));
    EXPECT_NE(sim::step_noise(42, 5), sim::step_noise(42, 6));
}

TEST(Simulator, ObservationLayout) {
    const auto [task, s] = sim::make_episode(1, 0);
    const Vector o = sim::observe(s, task);
    ASSERT_EQ(o.size(), sim::kObsDim);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(o[j], sim::kJointScale * s.q[j]);
    EXPECT_EQ(o[7], s.pose.x / sim::kPoseScale);
    EXPECT_EQ(o[9], s.pose.theta);
}

TEST(Simulator, ExpertActionIsClamped) {
    const sim::SimConfig cfg;
    Rng rng(21);
    for (int i = 0; i < 100; ++i) {
        const auto [task, s] = sim::make_episode(rng.next(), static_cast<std::uint64_t>(i));
        for (double v : sim::expert_action(s, task, cfg)) EXPECT_LE(std::abs(v), cfg.action_limit);
    }
}

TEST(Simulator, NonFiniteStepThrows) {
    sim::ArmSimState s;
    Vector a(7, 0.0);
    a[2] = std::nan("");
    EXPECT_THROW(sim::step(s, a), NonFiniteError);
}

TEST(Rollout, IdenticalPolicyHasNoDrift) {
    const Policy p = Policy::random({}, 30);
    const auto rep = sim::rollout_closed_loop(p, p, 5, 16);
    EXPECT_EQ(rep.e_norm(), 0.0);
    EXPECT_EQ(rep.final_gap, 0.0);
    EXPECT_EQ(rep.e_norm_curve.size(), 16u);
}

TEST(Rollout, SingleStepIsJacobianTimesError) {
    const Policy p = Policy::random({}, 31);
    const ActionVector delta{0.01, -0.02, 0.03, 0.0, 0.01, 0.02, -0.01};
    const auto rep = sim::rollout_closed_loop(p, p, 6, 1, {delta, true});
    const auto [task, s0] = sim::make_episode(6, 0);
    const Matrix j = sim::jacobian(s0.q);
    for (std::size_t c = 0; c < 3; ++c) {
        double ref = 0.0;
        for (std::size_t k = 0; k < 7; ++k) ref += j(c, k) * delta[k];
        EXPECT_NEAR(rep.e_total[c], ref, 1e-15);
        EXPECT_NEAR(rep.e_open_loop[c], ref, 1e-15);
    }
}

TEST(Rollout, TotalIsSumOfIncrements) {
    const Policy fp = Policy::random({}, 32);
    const Policy q = quantize_model(fp, BitWidthMap::uniform(fp.layer_names(), Precision::kW4), {});
    const auto rep = sim::rollout_closed_loop(fp, q, 7, 24);
    std::array<double, 3> sum{};
    for (const auto& d : rep.de)
        for (std::size_t c = 0; c < 3; ++c) sum[c] += d[c];
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(rep.e_total[c], sum[c], 1e-12);
    EXPECT_NEAR(rep.e_norm_curve.back(), rep.e_norm(), 1e-15);
    EXPECT_GT(rep.e_norm(), 0.0);
}

TEST(Rollout, BaseJointPerturbationDriftsMoreThanDistal) {
    const Policy p = Policy::random({}, 33);
    int wins = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        ActionVector d1{}, d6{};
        d1[0] = 0.01;
        d6[5] = 0.01;
        const double e1 = sim::rollout_closed_loop(p, p, s, 8, {d1, false}).e_norm();
        const double e6 = sim::rollout_closed_loop(p, p, s, 8, {d6, false}).e_norm();
        wins += e1 > e6;
    }
    EXPECT_EQ(wins, 100);
}
