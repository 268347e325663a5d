// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dptq/drift.hpp"
#include "dptq/policy.hpp"
#include "dptq/random.hpp"

using namespace dptq;
using namespace dptq::drift;

namespace {

ActionVector seeded_action(Rng& rng, double spread) {
    ActionVector a{};
    for (auto& v : a) v = rng.uniform(-spread, spread);
    return a;
}

// Dense ridge oracle: x = (J^T J + lambda I_7)^{-1} J^T e_c by Gaussian elimination.
Matrix ridge_oracle(const Matrix& j, double lambda) {
    Matrix a = j.transpose() * j;
    for (std::size_t i = 0; i < a.rows(); ++i) a(i, i) += lambda;
    return solve(a, j.transpose());
}

// Exact-epsilon denoiser for loss identities.
struct OracleDenoiser {
    Vector offset;
    Vector predict_eps(std::span<const double> x_t, int, std::span<const double>) const {
        Vector e(x_t.begin(), x_t.end());
        for (std::size_t j = 0; j < e.size(); ++j) e[j] += offset[j];
        return e;
    }
};

PolicyConfig toy_config(std::size_t blocks) {
    PolicyConfig c;
    c.obs_dim = 5;
    c.instr_dim = 2;
    c.backbone_hidden = 6;
    c.z_dim = 4;
    c.hidden = 6;
    c.mlp = 5;
    c.blocks = blocks;
    c.temb_dim = 4;
    c.gain_in = 1.0;
    return c;
}

DenoiseBatch seeded_batch(const Policy& p, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    DenoiseBatch b;
    for (std::size_t i = 0; i < n; ++i)
        b.push_back({rng.normal_vector(kActionDim), 1 + static_cast<int>(rng.next() % p.config().steps), rng.normal_vector(p.config().z_dim),
                     rng.normal_vector(kActionDim)});
    return b;
}

// Central differences of drift_loss with respect to every weight of every denoiser layer.
std::vector<Matrix> finite_difference_grads(Policy p, const DenoiseBatch& batch, std::span<const double> s_hat, double h) {
    std::vector<Matrix> out;
    for (std::size_t l = Policy::kHeadIn; l < p.layers().size(); ++l) {
        const Matrix w0 = p.layers()[l].effective();
        Matrix g(w0.rows(), w0.cols());
        for (std::size_t k = 0; k < w0.size(); ++k) {
            Matrix w = w0;
            w.values()[k] = w0.values()[k] + h;
            p.layers()[l].set_weight(w);
            const double up = drift_loss(p, batch, s_hat);
            w.values()[k] = w0.values()[k] - h;
            p.layers()[l].set_weight(w);
            const double down = drift_loss(p, batch, s_hat);
            g.values()[k] = (up - down) / (2.0 * h);
        }
        p.layers()[l].set_weight(w0);
        out.push_back(std::move(g));
    }
    return out;
}

double phi_of(const Matrix& g) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i) {
        double row = 0.0;
        for (double v : g.row(i)) row += std::abs(v);
        acc += row / static_cast<double>(g.cols());
    }
    return acc / static_cast<double>(g.rows());
}

}  // namespace

TEST(CumulativeTheta, ZeroAction) {
    const auto s = cumulative_theta(ActionVector{}, 1.6);
    for (double t : s.theta) EXPECT_EQ(t, 0.0);
}

TEST(CumulativeTheta, UnitFirstDimension) {
    const auto s = cumulative_theta(ActionVector{1, 0, 0, 0, 0, 0, 0}, 1.0);
    for (double t : s.theta) EXPECT_EQ(t, 1.0);
}

TEST(CumulativeTheta, PrefixSumOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const ActionVector a = seeded_action(rng, 0.4);
        const auto s = cumulative_theta(a, 1.6);
        for (std::size_t j = 0; j < kActionDim; ++j) {
            double ref = 0.0;
            for (std::size_t i = 0; i <= j; ++i) ref += 1.6 * a[i];
            EXPECT_NEAR(s.theta[j], ref, 1e-15);
            EXPECT_EQ(s.q[j], 1.6 * a[j]);
        }
    }
    EXPECT_THROW(cumulative_theta(Vector(6), 1.0), std::invalid_argument);
}

TEST(StructuralJacobian, ZeroAngleRows) {
    const auto j = structural_jacobian(ActionVector{}).j;
    const double ys[] = {6, 5, 4, 3, 2, 1, 0};
    for (std::size_t c = 0; c < kActionDim; ++c) {
        EXPECT_EQ(j(0, c), 0.0);
        EXPECT_EQ(j(1, c), ys[c]);
        EXPECT_EQ(j(2, c), 1.0);
    }
}

TEST(StructuralJacobian, ZeroAngleColumnNorms) {
    const auto j = structural_jacobian(ActionVector{});
    const double sq[] = {37, 26, 17, 10, 5, 2, 1};
    for (std::size_t c = 0; c < kActionDim; ++c) EXPECT_EQ(j.column_norm(c), std::sqrt(sq[c]));
}

TEST(StructuralJacobian, SmallAngleColumnNormsDecrease) {
    Rng rng(1000);
    for (int s = 0; s < 1000; ++s) {
        const auto state = cumulative_theta(seeded_action(rng, 0.15), 1.6);
        for (double t : state.theta) ASSERT_LT(std::abs(t), M_PI / 2);
        const auto j = structural_jacobian(state);
        for (std::size_t c = 0; c + 1 < kActionDim; ++c) ASSERT_GT(j.column_norm(c), j.column_norm(c + 1));
        EXPECT_EQ(j.j(0, 6), 0.0);
        EXPECT_EQ(j.j(1, 6), 0.0);
        EXPECT_EQ(j.j(2, 6), 1.0);
    }
}

TEST(StructuralJacobian, MatchesSumFormula) {
    Rng rng(2);
    for (int s = 0; s < 50; ++s) {
        ActionVector th{};
        for (auto& t : th) t = rng.uniform(-3.0, 3.0);
        const auto j = structural_jacobian(th).j;
        for (std::size_t c = 0; c < kActionDim; ++c) {
            double sx = 0.0, sy = 0.0;
            for (std::size_t k = c; k < 6; ++k) {
                sx -= std::sin(th[k]);
                sy += std::cos(th[k]);
            }
            EXPECT_NEAR(j(0, c), sx, 1e-14);
            EXPECT_NEAR(j(1, c), sy, 1e-14);
        }
    }
}

TEST(DampedPinv, PaddedIdentity) {
    Matrix j(3, 7);
    for (std::size_t i = 0; i < 3; ++i) j(i, i) = 1.0;
    const Matrix p = damped_pinv(j, 1e-12);
    for (std::size_t r = 0; r < 7; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p(r, c), r == c ? 1.0 : 0.0, 1e-9);
}

// theta = 0 leaves the x row empty, so use bent chains with full row rank.
TEST(DampedPinv, NearRightInverseAtDefaultDamping) {
    Rng rng(12);
    for (int s = 0; s < 100; ++s) {
        ActionVector th{};
        for (auto& t : th) t = rng.uniform(0.2, 0.6);
        const Matrix j = structural_jacobian(cumulative_theta(th, 1.0)).j;
        const Matrix jp = j * damped_pinv(j, 3e-4);
        EXPECT_LE(frobenius_norm(jp - Matrix::identity(3)), 1e-2);
    }
}

TEST(DampedPinv, MatchesRidgeOracle) {
    Rng rng(3);
    for (int s = 0; s < 100; ++s) {
        const Matrix j = structural_jacobian(cumulative_theta(seeded_action(rng, 0.4), 1.6)).j;
        for (double lambda : {3e-4, 1e-2, 1.0}) {
            const Matrix p = damped_pinv(j, lambda), ref = ridge_oracle(j, lambda);
            for (std::size_t r = 0; r < 7; ++r)
                for (std::size_t c = 0; c < 3; ++c) ASSERT_NEAR(p(r, c), ref(r, c), 1e-10);
        }
    }
    EXPECT_THROW(damped_pinv(Matrix(3, 7), 0.0), std::invalid_argument);
}

TEST(DriftScores, SingleZeroAction) {
    const std::vector<ActionVector> acts{ActionVector{}};
    const auto p = drift_scores(acts);
    double mean = 0.0;
    for (double v : p.s_hat) mean += v / 7.0;
    EXPECT_NEAR(mean, 1.0, 1e-15);
    const Matrix pinv = damped_pinv(structural_jacobian(ActionVector{}).j, 3e-4);
    for (std::size_t j = 0; j < 7; ++j)
        EXPECT_NEAR(p.s[j], 1.8 * std::abs(pinv(j, 0)) + 1.8 * std::abs(pinv(j, 1)) + 0.15 * std::abs(pinv(j, 2)), 1e-15);
}

TEST(DriftScores, MirroredDatasetMatches) {
    Rng rng(4);
    const ActionVector a = seeded_action(rng, 0.3);
    ActionVector neg{};
    for (std::size_t j = 0; j < 7; ++j) neg[j] = -a[j];
    const std::vector<ActionVector> one{a}, both{a, neg};
    const auto p1 = drift_scores(one), p2 = drift_scores(both);
    for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_NEAR(p1.s[j], p2.s[j], 1e-10 * p1.s[j]);
        EXPECT_NEAR(p1.s_hat[j], p2.s_hat[j], 1e-10);
    }
}

TEST(DriftScores, NormalizedMeanIsOne) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<ActionVector> acts;
        for (int i = 0; i < 64; ++i) acts.push_back(seeded_action(rng, 0.45));
        const auto p = drift_scores(acts, {1.8, 1.8, 0.15}, 3e-4, 1.6);
        const double mean = std::accumulate(p.s_hat.begin(), p.s_hat.end(), 0.0) / 7.0;
        EXPECT_NEAR(mean, 1.0, 1e-9);
        for (double v : p.s) EXPECT_GE(v, 0.0);
    }
    EXPECT_THROW(drift_scores(std::vector<ActionVector>{}), std::invalid_argument);
}

TEST(DriftScores, FirstDimensionDominatesSixth) {
    Rng rng(6);
    std::vector<ActionVector> acts;
    for (int i = 0; i < 256; ++i) acts.push_back(seeded_action(rng, 0.2));
    const auto p = drift_scores(acts);
    EXPECT_GT(p.s_hat[0], p.s_hat[5]);
}

TEST(DriftLoss, ExactPredictionGivesZero) {
    OracleDenoiser d{Vector(7, 0.0)};
    DenoiseBatch b;
    Rng rng(7);
    for (int i = 0; i < 5; ++i) {
        const Vector x = rng.normal_vector(7);
        b.push_back({x, 1, {}, x});
    }
    const ActionVector w{1, 2, 3, 4, 5, 6, 7};
    EXPECT_EQ(drift_loss(d, b, w), 0.0);
}

TEST(DriftLoss, UniformWeightsAndLinearity) {
    Rng rng(8);
    OracleDenoiser d{rng.normal_vector(7)};
    DenoiseBatch b;
    for (int i = 0; i < 9; ++i) b.push_back({rng.normal_vector(7), 1, {}, rng.normal_vector(7)});
    double mse = 0.0, r1 = 0.0;
    for (const auto& s : b)
        for (std::size_t j = 0; j < 7; ++j) {
            const double r = s.x_t[j] + d.offset[j] - s.eps[j];
            mse += r * r / (9.0 * 7.0);
            if (j == 0) r1 += r * r / 9.0;
        }
    const Vector ones(7, 1.0);
    EXPECT_NEAR(drift_loss(d, b, ones), 7.0 * mse, 1e-12);
    Vector w{0.7, 1.1, 0.9, 1.3, 1.0, 0.8, 1.2};
    const double base = drift_loss(d, b, w);
    w[0] *= 2.0;
    EXPECT_NEAR(drift_loss(d, b, w) - base, 0.7 * r1, 1e-12);
    EXPECT_THROW(drift_loss(d, b, Vector(6, 1.0)), std::invalid_argument);
}

TEST(LayerSensitivity, ZeroResidualGivesZero) {
    const Policy p = Policy::random(toy_config(2), 1);
    DenoiseBatch b = seeded_batch(p, 6, 2);
    for (auto& s : b) s.eps = p.predict_eps(s.x_t, s.step, s.z);
    const std::vector<DenoiseBatch> batches(3, b);
    const ActionVector w{1, 1, 1, 1, 1, 1, 1};
    const auto sens = layer_sensitivity(p, batches, w, 3);
    ASSERT_EQ(sens.phi.size(), p.layers().size() - Policy::kHeadIn);
    for (const auto& [name, v] : sens.phi) EXPECT_EQ(v, 0.0) << name;
}

TEST(LayerSensitivity, MatchesFiniteDifferencesOnToyDenoiser) {
    const Policy p = Policy::random(toy_config(1), 3);
    const ActionVector w{1.9, 1.6, 1.2, 0.9, 0.6, 0.4, 0.4};
    std::vector<DenoiseBatch> batches{seeded_batch(p, 4, 10), seeded_batch(p, 4, 11)};
    const auto sens = layer_sensitivity(p, batches, w, 2);
    std::vector<double> phi_fd(sens.phi.size(), 0.0);
    for (const auto& b : batches) {
        const auto fd = finite_difference_grads(p, b, w, 1e-5);
        for (std::size_t l = 0; l < fd.size(); ++l) phi_fd[l] += phi_of(fd[l]) / 2.0;
    }
    for (std::size_t l = 0; l < phi_fd.size(); ++l)
        EXPECT_LE(std::abs(sens.phi[l].second - phi_fd[l]), 1e-4 * phi_fd[l]) << sens.phi[l].first;
}

TEST(LayerSensitivity, ScalesLinearlyWithWeights) {
    const Policy p = Policy::random(toy_config(2), 4);
    const std::vector<DenoiseBatch> batches{seeded_batch(p, 5, 1), seeded_batch(p, 5, 2)};
    const ActionVector w{1.5, 1.2, 1.0, 0.9, 0.8, 0.3, 1.3};
    ActionVector w3 = w;
    for (auto& v : w3) v *= 3.0;
    const auto a = layer_sensitivity(p, batches, w, 2), b = layer_sensitivity(p, batches, w3, 2);
    for (std::size_t l = 0; l < a.phi.size(); ++l) EXPECT_NEAR(b.phi[l].second, 3.0 * a.phi[l].second, 1e-12 * b.phi[l].second);
    EXPECT_EQ(allocate_bits(a, 30).entries(), allocate_bits(b, 30).entries());
}

TEST(LayerSensitivity, RowMaxVariantDominatesMean) {
    const Policy p = Policy::random(toy_config(2), 5);
    const std::vector<DenoiseBatch> batches{seeded_batch(p, 5, 3)};
    const ActionVector w{1, 1, 1, 1, 1, 1, 1};
    const auto mean = layer_sensitivity(p, batches, w, 1, RowReduction::kMean);
    const auto max = layer_sensitivity(p, batches, w, 1, RowReduction::kMax);
    for (std::size_t l = 0; l < mean.phi.size(); ++l) EXPECT_GE(max.phi[l].second, mean.phi[l].second);
}

TEST(LayerSensitivity, NeedsEnoughBatches) {
    const Policy p = Policy::random(toy_config(1), 6);
    const std::vector<DenoiseBatch> batches{seeded_batch(p, 2, 1)};
    const ActionVector w{1, 1, 1, 1, 1, 1, 1};
    EXPECT_THROW(layer_sensitivity(p, batches, w, 2), std::invalid_argument);
    EXPECT_THROW(layer_sensitivity(p, batches, w, 0), std::invalid_argument);
}

TEST(AllocateBits, Boundaries) {
    LayerSensitivity s;
    for (int i = 0; i < 10; ++i) s.phi.emplace_back("l" + std::to_string(i), 0.1 * (i + 1));
    EXPECT_EQ(allocate_bits(s, 0).count(Precision::kHigh16), 0u);
    EXPECT_EQ(allocate_bits(s, 100).count(Precision::kHigh16), 10u);
}

TEST(AllocateBits, ThirtyPercentOfTenKeepsTopThree) {
    LayerSensitivity s;
    const double phi[] = {0.5, 0.9, 0.1, 0.7, 0.3, 0.95, 0.2, 0.4, 0.6, 0.05};
    for (int i = 0; i < 10; ++i) s.phi.emplace_back("l" + std::to_string(i), phi[i]);
    const auto m = allocate_bits(s, 30);
    EXPECT_EQ(m.count(Precision::kHigh16), 3u);
    for (const char* n : {"l5", "l1", "l3"}) EXPECT_EQ(m.at(n), Precision::kHigh16);
}

TEST(AllocateBits, PermutationAndScaleInvariant) {
    Rng rng(9);
    LayerSensitivity s;
    for (int i = 0; i < 17; ++i) s.phi.emplace_back("l" + std::to_string(i), rng.uniform());
    auto high_set = [](const BitWidthMap& m) {
        std::vector<std::string> out;
        for (const auto& [n, p] : m.entries())
            if (p == Precision::kHigh16) out.push_back(n);
        std::sort(out.begin(), out.end());
        return out;
    };
    const auto ref = high_set(allocate_bits(s, 30));
    for (int t = 0; t < 20; ++t) {
        LayerSensitivity shuffled = s;
        std::shuffle(shuffled.phi.begin(), shuffled.phi.end(), rng.engine());
        for (auto& [n, v] : shuffled.phi) v *= 0.01 + t;
        EXPECT_EQ(high_set(allocate_bits(shuffled, 30)), ref);
    }
}

TEST(AllocateBits, TiesGoToEarlierLayer) {
    LayerSensitivity s;
    for (int i = 0; i < 4; ++i) s.phi.emplace_back("l" + std::to_string(i), 1.0);
    const auto m = allocate_bits(s, 50);
    EXPECT_EQ(m.at("l0"), Precision::kHigh16);
    EXPECT_EQ(m.at("l1"), Precision::kHigh16);
    EXPECT_EQ(m.at("l2"), Precision::kW4);
}

TEST(AllocateBits, RetainedFractionWithinOneLayer) {
    for (std::size_t n = 1; n <= 40; ++n)
        for (int k = 0; k <= 100; k += 7) {
            const std::size_t keep = retained_count(k, n);
            EXPECT_EQ(keep, static_cast<std::size_t>(std::ceil(k * n / 100.0 - 1e-9)));
            EXPECT_LE(std::abs(static_cast<double>(keep) - k * n / 100.0), 1.0);
        }
    EXPECT_EQ(retained_count(30, 10), 3u);
    EXPECT_THROW(retained_count(101, 10), std::invalid_argument);
}
