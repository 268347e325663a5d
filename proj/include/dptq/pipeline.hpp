// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dptq/config.hpp"
#include "dptq/csrc.hpp"
#include "dptq/dataset.hpp"
#include "dptq/drift.hpp"
#include "dptq/linear.hpp"
#include "dptq/moments.hpp"
#include "dptq/policy.hpp"
#include "dptq/quantizer.hpp"
#include "dptq/random.hpp"
#include "dptq/sim.hpp"

// Three-stage calibration: drift profiling, interface compensation, and
// drift-aware bit allocation, followed by paired closed-loop evaluation.
namespace dptq::pipeline {

class StageOrderError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline constexpr std::size_t kProbeBatch = 24;

using RecordSet = std::vector<const TrajectoryRecord*>;

namespace detail {

/// Runs body(i) for i in [0, n) on up to hardware_concurrency threads. Each index
/// writes only its own output slot, so results do not depend on the thread count.
template <class F>
void parallel_for(std::size_t n, F&& body, unsigned threads = 0) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::exception_ptr error;
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i;
                {
                    std::lock_guard lock(mu);
                    if (error || next >= n) return;
                    i = next++;
                }
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

inline nlohmann::ordered_json matrix_json(const Matrix& m) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(Vector(m.row(i).begin(), m.row(i).end()));
    return rows;
}

template <class Json>
Matrix matrix_from_json(const Json& j) {
    const std::size_t r = j.size(), c = r ? j.at(0).size() : 0;
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        if (j.at(i).size() != c) throw std::invalid_argument("matrix rows differ in length");
        for (std::size_t k = 0; k < c; ++k) m(i, k) = j.at(i).at(k).template get<double>();
    }
    return m;
}

inline double mean_abs_diff(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full-precision reference policy

/// Forward-noised samples for the head fit: every other record, random step,
/// x_t built from the expert action in normalized units.
inline drift::DenoiseBatch head_fit_samples(const Policy& p, const Dataset& ds, std::uint64_t seed) {
    drift::DenoiseBatch batch;
    Rng rng(derive_seed(seed, "head-fit"));
    const int steps = p.config().steps;
    for (std::size_t i = 0; i < ds.records.size(); i += 2) {
        const auto& r = ds.records[i];
        drift::DenoiseSample s;
        s.z = p.encode(r.obs);
        s.step = 1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(steps));
        s.eps = rng.normal_vector(drift::kActionDim);
        const double ab = p.schedule().alpha_bar(s.step);
        s.x_t.resize(drift::kActionDim);
        for (std::size_t j = 0; j < drift::kActionDim; ++j)
            s.x_t[j] = std::sqrt(ab) * r.action[j] / p.config().action_scale + std::sqrt(1.0 - ab) * s.eps[j];
        batch.push_back(std::move(s));
    }
    return batch;
}

inline Policy build_fp_policy(const CalibConfig& cfg, const Dataset& ds, HeadFitReport* report = nullptr) {
    if (ds.records.empty()) throw std::invalid_argument("build_fp_policy: empty dataset");
    Policy p = Policy::random(PolicyConfig{}, cfg.seed);
    const HeadFitReport rep = fit_head(p, head_fit_samples(p, ds, cfg.seed), cfg.ridge);
    if (report) *report = rep;
    return p;
}

// ---------------------------------------------------------------------------
// Calibration data

inline RecordSet calibration_records(const Dataset& ds, const CalibConfig& cfg) {
    const auto count = static_cast<std::size_t>(cfg.calibration_steps) * static_cast<std::size_t>(cfg.batch_size);
    RecordSet out = select_calibration(ds, count, cfg.seed);
    if (out.size() < static_cast<std::size_t>(cfg.warmup_steps) + 2) {
        throw std::runtime_error("insufficient calibration samples: " + std::to_string(out.size()) + " records with " +
                                 std::to_string(cfg.warmup_steps) + " warmup steps leaves fewer than 2 for covariance");
    }
    return out;
}

inline Vector calibration_noise(std::uint64_t seed, std::size_t i) {
    Rng rng(derive_seed(seed, "calibration-noise", i));
    return rng.normal_vector(drift::kActionDim);
}

/// Output of a conditioning-interface layer for one observation.
inline Vector interface_output(const Policy& p, std::string_view layer, std::span<const double> obs) {
    if (layer == "backbone.out") return p.encode(obs);
    if (layer == "head.cond") return p.condition(p.encode(obs));
    throw std::invalid_argument("interface_output: unsupported interface layer '" + std::string(layer) + "'");
}

struct InterfaceStats {
    std::string layer;
    RunningMoments moments;  // post-warmup samples only
    double absmax = 0.0;     // every sample, warmup included
};

inline InterfaceStats interface_statistics(const Policy& p, const std::string& layer, const RecordSet& records, std::size_t warmup) {
    std::vector<Vector> outs(records.size());
    detail::parallel_for(records.size(), [&](std::size_t i) { outs[i] = interface_output(p, layer, records[i]->obs); });
    InterfaceStats st{layer, RunningMoments(outs.front().size()), 0.0};
    for (std::size_t i = 0; i < outs.size(); ++i) {
        st.absmax = std::max(st.absmax, max_abs(outs[i]));
        if (i >= warmup) st.moments.update(outs[i]);
    }
    return st;
}

/// Per-layer absolute maximum of each denoiser layer's input over full
/// denoising runs on the calibration records. Ranges for 8-bit activations.
using ActivationRanges = std::vector<std::pair<std::string, double>>;

inline ActivationRanges activation_ranges(const Policy& p, const RecordSet& records, std::uint64_t seed) {
    const auto names = p.head_layer_names();
    const std::size_t blocks = p.config().blocks;
    std::vector<std::vector<double>> per(records.size(), std::vector<double>(names.size(), 0.0));
    detail::parallel_for(records.size(), [&](std::size_t i) {
        auto& r = per[i];
        const Vector z = p.encode(records[i]->obs);
        // Order matches head_layer_names(): in, cond, (fc1, fc2) per block, out.
        r[1] = max_abs(z);
        p.denoise(z, calibration_noise(seed, i), [&](const Policy::Trace& tr) {
            r[0] = std::max(r[0], max_abs(tr.input));
            for (std::size_t b = 0; b < blocks; ++b) {
                r[2 + 2 * b] = std::max(r[2 + 2 * b], max_abs(tr.m[b]));
                r[3 + 2 * b] = std::max(r[3 + 2 * b], max_abs(tr.u[b]));
            }
            r.back() = std::max(r.back(), max_abs(tr.h.back()));
        });
    });
    ActivationRanges out;
    for (std::size_t l = 0; l < names.size(); ++l) {
        double m = 0.0;
        for (const auto& r : per) m = std::max(m, r[l]);
        out.emplace_back(names[l], m);
    }
    return out;
}

inline double range_of(const ActivationRanges& ranges, std::string_view layer) {
    for (const auto& [name, v] : ranges)
        if (name == layer) return v;
    throw std::out_of_range("no activation range for layer '" + std::string(layer) + "'");
}

/// Attaches 8-bit input quantizers to the denoiser layers stored as W4.
inline void attach_activation_quant(Policy& q, const ActivationRanges& ranges) {
    for (std::size_t i = Policy::kHeadIn; i < q.layers().size(); ++i) {
        auto& l = q.layers()[i];
        if (l.precision() == Precision::kW4) l.set_input_quant(ActivationQuantizer::from_range(range_of(ranges, l.name())));
    }
}

/// Probe batches for the sensitivity estimate: batch r draws kProbeBatch calibration
/// records with replacement, a random denoising step and fresh noise per sample.
inline std::vector<drift::DenoiseBatch> probe_batches(const Policy& fp, const RecordSet& records, const CalibConfig& cfg) {
    std::vector<drift::DenoiseBatch> out;
    const int steps = fp.config().steps;
    for (int r = 0; r < cfg.probe_steps; ++r) {
        Rng rng(derive_seed(cfg.seed, "probe-batch", static_cast<std::uint64_t>(r)));
        drift::DenoiseBatch batch;
        for (std::size_t k = 0; k < kProbeBatch; ++k) {
            const auto& rec = *records[rng.next() % records.size()];
            drift::DenoiseSample s;
            s.z = fp.encode(rec.obs);
            s.step = 1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(steps));
            s.eps = rng.normal_vector(drift::kActionDim);
            const double ab = fp.schedule().alpha_bar(s.step);
            s.x_t.resize(drift::kActionDim);
            for (std::size_t j = 0; j < drift::kActionDim; ++j)
                s.x_t[j] = std::sqrt(ab) * rec.action[j] / fp.config().action_scale + std::sqrt(1.0 - ab) * s.eps[j];
            batch.push_back(std::move(s));
        }
        out.push_back(std::move(batch));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage 1: drift profiling

struct Stage1Result {
    std::vector<InterfaceStats> interfaces;
    drift::DriftProfile profile;
    drift::LayerSensitivity sensitivity;
    ActivationRanges ranges;
    std::size_t calibration_records = 0;
    std::size_t warmup = 0;
};

inline Stage1Result run_stage1_profile(const Policy& fp, const Dataset& ds, const CalibConfig& cfg) {
    cfg.validate();
    const RecordSet records = calibration_records(ds, cfg);
    Stage1Result s1;
    s1.calibration_records = records.size();
    s1.warmup = static_cast<std::size_t>(cfg.warmup_steps);
    for (const auto& layer : cfg.interface_list()) s1.interfaces.push_back(interface_statistics(fp, layer, records, s1.warmup));

    std::vector<drift::ActionVector> actions;
    for (const auto* r : records) actions.push_back(r->action);
    s1.profile = drift::drift_scores(actions, {cfg.w_trans, cfg.w_trans, cfg.w_rot}, cfg.damping, cfg.scaling_gain);

    const auto batches = probe_batches(fp, records, cfg);
    s1.sensitivity = drift::layer_sensitivity(fp, batches, s1.profile.s_hat, static_cast<std::size_t>(cfg.probe_steps),
                                              cfg.row_reduction == "max" ? drift::RowReduction::kMax : drift::RowReduction::kMean);
    s1.ranges = activation_ranges(fp, records, cfg.seed);
    return s1;
}

// ---------------------------------------------------------------------------
// Stage 2: cross-space representation compensation

struct InterfaceDiagnostics {
    std::string layer;
    double mean_mismatch_before = 0.0;  // mean over channels of |mu_q - mu_fp|
    double mean_mismatch_after = 0.0;
    double std_mismatch_before = 0.0;   // mean over channels of |sigma_q - sigma_fp|
    double std_mismatch_after = 0.0;
    double cov_rel_before = 0.0;        // ||C_q - C_fp||_F / ||C_fp||_F
    double cov_rel_after = 0.0;
    double objective_identity = 0.0;
    double objective = 0.0;
    bool fallback = false;
    std::string note;
    double g_lo = 0.0;
    double g_hi = 0.0;
    double lowrank_fro = 0.0;           // ||U V^T||_F

    double mean_reduction() const {
        return mean_mismatch_before > 0.0 ? 1.0 - mean_mismatch_after / mean_mismatch_before : 0.0;
    }
};

struct CompensatedModel {
    Policy model;
    std::vector<InterfaceDiagnostics> diagnostics;
};

inline double cov_rel(const Matrix& c, const Matrix& ref) {
    const double d = frobenius_norm(ref);
    return d > 0.0 ? frobenius_norm(c - ref) / d : frobenius_norm(c);
}

/// Quantizes `reference` per `bitmap`, attaches 8-bit activation quantizers when
/// ranges are given, then solves and folds the compensation for every interface
/// in forward order, measuring each interface after the earlier ones are folded.
inline CompensatedModel quantize_and_compensate(const Policy& reference, const BitWidthMap& bitmap, const ActivationRanges* ranges,
                                                const std::vector<InterfaceStats>& fp_stats, const RecordSet& records,
                                                const CalibConfig& cfg) {
    QuantSpec spec;
    spec.group_size = static_cast<std::size_t>(cfg.group_size);
    CompensatedModel out{quantize_model(reference, bitmap, spec), {}};
    if (ranges) attach_activation_quant(out.model, *ranges);
    const auto warmup = static_cast<std::size_t>(cfg.warmup_steps);
    const csrc::CsrcOptions opt{cfg.g_min, cfg.g_max, 1e-6, cfg.shrinkage, static_cast<std::size_t>(cfg.rank_r)};
    for (const auto& fs : fp_stats) {
        const InterfaceStats qs = interface_statistics(out.model, fs.layer, records, warmup);
        const Matrix cov_fp = fs.moments.covariance(), cov_q = qs.moments.covariance();
        const auto comp = csrc::solve_interface(fs.moments.mean(), cov_fp, qs.moments.mean(), cov_q, opt);
        csrc::fold_compensation(out.model.layer(fs.layer), comp.lowrank, comp.affine);

        const InterfaceStats post = interface_statistics(out.model, fs.layer, records, warmup);
        InterfaceDiagnostics d;
        d.layer = fs.layer;
        d.mean_mismatch_before = detail::mean_abs_diff(qs.moments.mean(), fs.moments.mean());
        d.mean_mismatch_after = detail::mean_abs_diff(post.moments.mean(), fs.moments.mean());
        d.std_mismatch_before = detail::mean_abs_diff(qs.moments.stddev(), fs.moments.stddev());
        d.std_mismatch_after = detail::mean_abs_diff(post.moments.stddev(), fs.moments.stddev());
        d.cov_rel_before = cov_rel(cov_q, cov_fp);
        d.cov_rel_after = cov_rel(post.moments.covariance(), cov_fp);
        d.objective_identity = comp.cov.objective_identity;
        d.objective = comp.cov.objective;
        d.fallback = comp.cov.fallback;
        d.note = comp.cov.note;
        d.g_lo = *std::min_element(comp.affine.g.begin(), comp.affine.g.end());
        d.g_hi = *std::max_element(comp.affine.g.begin(), comp.affine.g.end());
        d.lowrank_fro = frobenius_norm(comp.lowrank.u * comp.lowrank.v.transpose());
        out.diagnostics.push_back(std::move(d));
    }
    return out;
}

/// Folds a pre-rotation into the conditioning interface: backbone.out rows are
/// rotated and head.cond columns counter-rotated, leaving the FP function unchanged.
inline Policy rotate_interface(Policy p, const csrc::PreRotation& rot) {
    csrc::rotate_outputs(p.layers()[Policy::kBackboneOut], rot);
    csrc::rotate_inputs(p.layers()[Policy::kHeadCond], rot);
    return p;
}

struct Stage2Result {
    std::optional<csrc::PreRotation> rotation;
    std::vector<InterfaceStats> fp_stats;  // in the rotated frame
    ActivationRanges ranges;               // in the rotated frame
    std::vector<InterfaceDiagnostics> diagnostics;
    Policy model;                          // all-W4 (+A8) with compensation folded
};

inline Policy apply_rotation(const Policy& fp, const std::optional<csrc::PreRotation>& rot) {
    return rot ? rotate_interface(fp, *rot) : fp;
}

inline Stage2Result run_stage2_compensate(const Policy& fp, const Dataset& ds, const Stage1Result* s1, const CalibConfig& cfg) {
    if (!s1) throw StageOrderError("stage 2 requires stage 1 outputs (run 'profile' first)");
    cfg.validate();
    const RecordSet records = calibration_records(ds, cfg);
    if (records.size() != s1->calibration_records) throw StageOrderError("stage 1 outputs were produced with a different calibration set");
    Stage2Result s2;
    s2.fp_stats = s1->interfaces;
    s2.ranges = s1->ranges;

    const auto ifaces = cfg.interface_list();
    if (cfg.pre_rotation && std::find(ifaces.begin(), ifaces.end(), "backbone.out") != ifaces.end()) {
        std::vector<Vector> zs(records.size());
        detail::parallel_for(records.size(), [&](std::size_t i) { zs[i] = fp.encode(records[i]->obs); });
        const std::size_t warmup = s1->warmup;
        Matrix samples(zs.size() - warmup, fp.config().z_dim);
        for (std::size_t i = warmup; i < zs.size(); ++i) std::copy(zs[i].begin(), zs[i].end(), samples.row(i - warmup).begin());
        const auto rot = csrc::build_pre_rotation(samples, static_cast<std::size_t>(cfg.svd_block), cfg.smoothing);
        const Matrix r = rot.dense();
        for (auto& st : s2.fp_stats) {
            if (st.layer != "backbone.out") continue;
            const Matrix cov = r * st.moments.covariance() * r.transpose();
            st.moments = RunningMoments::from_statistics(st.moments.count(), matvec(r, st.moments.mean()), cov);
            st.absmax = 0.0;
            for (const auto& z : zs) st.absmax = std::max(st.absmax, max_abs(rot.apply(z)));
        }
        // Only the consumer of z sees a different input range after rotation.
        double zmax = 0.0;
        for (const auto& z : zs) zmax = std::max(zmax, max_abs(rot.apply(z)));
        for (auto& [name, v] : s2.ranges)
            if (name == "head.cond") v = zmax;
        s2.rotation = rot;
    }
    const Policy reference = apply_rotation(fp, s2.rotation);
    const BitWidthMap initial = BitWidthMap::uniform(fp.layer_names(), Precision::kW4);
    auto comp = quantize_and_compensate(reference, initial, cfg.activation_quant ? &s2.ranges : nullptr, s2.fp_stats, records, cfg);
    s2.model = std::move(comp.model);
    s2.diagnostics = std::move(comp.diagnostics);
    return s2;
}

// ---------------------------------------------------------------------------
// Stage 3: drift-aware mixed-precision allocation

struct LayerPartition {
    std::vector<std::string> eligible;
    std::vector<std::string> excluded;  // output head and the last blocks, always HIGH16
};

inline LayerPartition partition_layers(const Policy& p, int excluded_blocks) {
    LayerPartition out;
    const std::size_t blocks = p.config().blocks;
    const std::size_t first_excluded = blocks - std::min<std::size_t>(blocks, static_cast<std::size_t>(excluded_blocks));
    for (std::size_t i = Policy::kHeadIn; i < p.layers().size(); ++i) {
        bool excluded = i == p.head_out();
        for (std::size_t b = first_excluded; b < blocks; ++b) excluded = excluded || i == p.block_fc1(b) || i == p.block_fc2(b);
        (excluded ? out.excluded : out.eligible).push_back(p.layers()[i].name());
    }
    return out;
}

/// Backbone layers at the configured precision, excluded layers HIGH16,
/// eligible layers by the retention rule on their sensitivities.
inline BitWidthMap final_bitmap(const Policy& p, const drift::LayerSensitivity& sens, const CalibConfig& cfg) {
    const auto part = partition_layers(p, cfg.excluded_blocks);
    const BitWidthMap eligible = drift::allocate_bits(sens.subset(part.eligible), cfg.retention_k);
    const Precision backbone = precision_from_string(cfg.backbone_precision);
    BitWidthMap out;
    for (std::size_t i = 0; i < p.layers().size(); ++i) {
        const auto& name = p.layers()[i].name();
        if (i < Policy::kHeadIn) out.set(name, backbone);
        else if (auto e = eligible.find(name)) out.set(name, *e);
        else out.set(name, Precision::kHigh16);
    }
    return out;
}

struct Stage3Result {
    LayerPartition partition;
    drift::LayerSensitivity eligible_sensitivity;
    BitWidthMap bitmap;
    MemoryReport memory;
    std::vector<InterfaceDiagnostics> diagnostics;
    Policy model;
};

inline Stage3Result run_stage3_allocate(const Policy& fp, const Dataset& ds, const Stage1Result* s1, const Stage2Result* s2,
                                        const CalibConfig& cfg) {
    if (!s1 || s1->sensitivity.phi.empty()) throw StageOrderError("stage 3 requires layer sensitivities from stage 1 (run 'profile' first)");
    if (!s2) throw StageOrderError("stage 3 requires stage 2 outputs (run 'compensate' first)");
    cfg.validate();
    const RecordSet records = calibration_records(ds, cfg);
    Stage3Result s3;
    s3.partition = partition_layers(fp, cfg.excluded_blocks);
    s3.eligible_sensitivity = s1->sensitivity.subset(s3.partition.eligible);
    s3.bitmap = final_bitmap(fp, s1->sensitivity, cfg);
    const auto shapes = fp.layer_shapes();
    s3.memory = memory_report(shapes, s3.bitmap, static_cast<std::size_t>(cfg.group_size));
    const Policy reference = apply_rotation(fp, s2->rotation);
    auto comp = quantize_and_compensate(reference, s3.bitmap, cfg.activation_quant ? &s2->ranges : nullptr, s2->fp_stats, records, cfg);
    s3.model = std::move(comp.model);
    s3.diagnostics = std::move(comp.diagnostics);
    return s3;
}

/// Uniform baselines: every layer at `p`; W4 layers get 8-bit inputs from the FP ranges.
inline Policy uniform_variant(const Policy& fp, Precision p, const ActivationRanges* ranges, const CalibConfig& cfg) {
    QuantSpec spec;
    spec.group_size = static_cast<std::size_t>(cfg.group_size);
    Policy q = quantize_model(fp, BitWidthMap::uniform(fp.layer_names(), p), spec);
    if (ranges && cfg.activation_quant) attach_activation_quant(q, *ranges);
    return q;
}

inline BitWidthMap bitmap_of(const Policy& p) {
    BitWidthMap m;
    for (const auto& l : p.layers()) m.set(l.name(), l.precision());
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SeedResult {
    int seed = 0;
    std::uint64_t env_seed = 0;
    double e_norm = 0.0;
    double e_open_loop = 0.0;
    double final_gap = 0.0;
    std::vector<double> curve;
};

struct VariantEvaluation {
    std::string name;
    std::vector<SeedResult> seeds;

    double mean_e() const { return mean_of(&SeedResult::e_norm); }
    double std_e() const { return std_of(&SeedResult::e_norm); }
    double mean_gap() const { return mean_of(&SeedResult::final_gap); }
    double std_gap() const { return std_of(&SeedResult::final_gap); }
    double mean_open_loop() const { return mean_of(&SeedResult::e_open_loop); }

private:
    double mean_of(double SeedResult::*f) const {
        double s = 0.0;
        for (const auto& r : seeds) s += r.*f;
        return seeds.empty() ? 0.0 : s / static_cast<double>(seeds.size());
    }
    double std_of(double SeedResult::*f) const {
        if (seeds.size() < 2) return 0.0;
        const double m = mean_of(f);
        double s = 0.0;
        for (const auto& r : seeds) s += (r.*f - m) * (r.*f - m);
        return std::sqrt(s / static_cast<double>(seeds.size() - 1));
    }
};

inline std::uint64_t evaluation_env_seed(std::uint64_t seed, int s) { return derive_seed(seed, "evaluation", static_cast<std::uint64_t>(s)); }

/// Paired closed-loop rollouts: seed s uses the same environment and denoising
/// noise for every variant.
inline std::vector<VariantEvaluation> evaluate(const Policy& fp, const std::vector<std::pair<std::string, const Policy*>>& variants,
                                               const CalibConfig& cfg, int n_seeds) {
    if (n_seeds < 1) throw std::invalid_argument("evaluate: need at least one seed");
    sim::SimConfig sc;
    sc.spatial_bins = cfg.spatial_bins;
    std::vector<VariantEvaluation> out;
    for (const auto& [name, model] : variants) {
        VariantEvaluation ev{name, std::vector<SeedResult>(static_cast<std::size_t>(n_seeds))};
        const Policy& q = *model;
        detail::parallel_for(static_cast<std::size_t>(n_seeds), [&](std::size_t s) {
            const std::uint64_t env = evaluation_env_seed(cfg.seed, static_cast<int>(s));
            try {
                const auto rep = sim::rollout_closed_loop(fp, q, env, cfg.horizon, {}, sc, s);
                ev.seeds[s] = {static_cast<int>(s), env, rep.e_norm(), rep.e_open_loop_norm(), rep.final_gap, rep.e_norm_curve};
            } catch (const NonFiniteError& e) {
                throw std::runtime_error("rollout aborted for variant '" + name + "' at seed " + std::to_string(s) + ": " + e.what());
            }
        });
        out.push_back(std::move(ev));
    }
    return out;
}

/// Seeds where variant `a` accumulates strictly less drift than variant `b`.
inline int paired_wins(const VariantEvaluation& a, const VariantEvaluation& b) {
    if (a.seeds.size() != b.seeds.size()) throw std::invalid_argument("paired_wins: seed counts differ");
    int wins = 0;
    for (std::size_t i = 0; i < a.seeds.size(); ++i) wins += a.seeds[i].e_norm < b.seeds[i].e_norm;
    return wins;
}

// ---------------------------------------------------------------------------
// Stage output serialization (hand-off between CLI subcommands)

inline nlohmann::ordered_json ranges_json(const ActivationRanges& r) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& [name, v] : r) j.push_back({{"layer", name}, {"absmax", v}});
    return j;
}

inline ActivationRanges ranges_from_json(const nlohmann::json& j) {
    ActivationRanges r;
    for (const auto& e : j) r.emplace_back(e.at("layer").get<std::string>(), e.at("absmax").get<double>());
    return r;
}

inline nlohmann::ordered_json stats_json(const std::vector<InterfaceStats>& stats) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& s : stats) {
        nlohmann::ordered_json e;
        e["layer"] = s.layer;
        e["count"] = s.moments.count();
        e["absmax"] = s.absmax;
        e["mean"] = s.moments.mean();
        e["covariance"] = detail::matrix_json(s.moments.covariance());
        j.push_back(std::move(e));
    }
    return j;
}

inline std::vector<InterfaceStats> stats_from_json(const nlohmann::json& j) {
    std::vector<InterfaceStats> out;
    for (const auto& e : j) {
        out.push_back({e.at("layer").get<std::string>(),
                       RunningMoments::from_statistics(e.at("count").get<std::uint64_t>(), e.at("mean").get<Vector>(),
                                                       detail::matrix_from_json(e.at("covariance"))),
                       e.at("absmax").get<double>()});
    }
    return out;
}

inline nlohmann::ordered_json diagnostics_json(const std::vector<InterfaceDiagnostics>& ds) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& d : ds) {
        nlohmann::ordered_json e;
        e["layer"] = d.layer;
        e["mean_mismatch_before"] = d.mean_mismatch_before;
        e["mean_mismatch_after"] = d.mean_mismatch_after;
        e["mean_mismatch_reduction"] = d.mean_reduction();
        e["std_mismatch_before"] = d.std_mismatch_before;
        e["std_mismatch_after"] = d.std_mismatch_after;
        e["cov_rel_before"] = d.cov_rel_before;
        e["cov_rel_after"] = d.cov_rel_after;
        e["objective_identity"] = d.objective_identity;
        e["objective"] = d.objective;
        e["fallback"] = d.fallback;
        e["note"] = d.note;
        e["gain_min"] = d.g_lo;
        e["gain_max"] = d.g_hi;
        e["lowrank_frobenius"] = d.lowrank_fro;
        j.push_back(std::move(e));
    }
    return j;
}

inline std::vector<InterfaceDiagnostics> diagnostics_from_json(const nlohmann::json& j) {
    std::vector<InterfaceDiagnostics> out;
    for (const auto& e : j) {
        InterfaceDiagnostics d;
        d.layer = e.at("layer").get<std::string>();
        d.mean_mismatch_before = e.at("mean_mismatch_before").get<double>();
        d.mean_mismatch_after = e.at("mean_mismatch_after").get<double>();
        d.std_mismatch_before = e.at("std_mismatch_before").get<double>();
        d.std_mismatch_after = e.at("std_mismatch_after").get<double>();
        d.cov_rel_before = e.at("cov_rel_before").get<double>();
        d.cov_rel_after = e.at("cov_rel_after").get<double>();
        d.objective_identity = e.at("objective_identity").get<double>();
        d.objective = e.at("objective").get<double>();
        d.fallback = e.at("fallback").get<bool>();
        d.note = e.at("note").get<std::string>();
        d.g_lo = e.at("gain_min").get<double>();
        d.g_hi = e.at("gain_max").get<double>();
        d.lowrank_fro = e.at("lowrank_frobenius").get<double>();
        out.push_back(std::move(d));
    }
    return out;
}

inline nlohmann::ordered_json profile_json(const drift::DriftProfile& p) {
    nlohmann::ordered_json j;
    j["s"] = p.s;
    j["s_hat"] = p.s_hat;
    double m = 0.0;
    for (double v : p.s_hat) m += v / static_cast<double>(p.s_hat.size());
    j["s_hat_mean"] = m;
    j["weights"] = {{"x", p.w.x}, {"y", p.w.y}, {"theta", p.w.theta}};
    j["lambda"] = p.lambda;
    j["gain"] = p.gain;
    j["samples"] = p.samples;
    return j;
}

inline drift::DriftProfile profile_from_json(const nlohmann::json& j) {
    drift::DriftProfile p;
    p.s = j.at("s").get<drift::ActionVector>();
    p.s_hat = j.at("s_hat").get<drift::ActionVector>();
    p.w = {j.at("weights").at("x").get<double>(), j.at("weights").at("y").get<double>(), j.at("weights").at("theta").get<double>()};
    p.lambda = j.at("lambda").get<double>();
    p.gain = j.at("gain").get<double>();
    p.samples = j.at("samples").get<std::size_t>();
    return p;
}

inline nlohmann::ordered_json sensitivity_json(const drift::LayerSensitivity& s) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& [name, v] : s.phi) j.push_back({{"layer", name}, {"phi", v}});
    return j;
}

inline drift::LayerSensitivity sensitivity_from_json(const nlohmann::json& j, std::size_t probe_steps) {
    drift::LayerSensitivity s{{}, probe_steps};
    for (const auto& e : j) s.phi.emplace_back(e.at("layer").get<std::string>(), e.at("phi").get<double>());
    return s;
}

inline nlohmann::ordered_json bitmap_json(const BitWidthMap& m) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [name, p] : m.entries()) j[name] = std::string(to_string(p));
    return j;
}

inline nlohmann::ordered_json memory_json(const MemoryReport& m) {
    return {{"total_bits", m.total_bits}, {"baseline_bits", m.baseline_bits}, {"reduction_fraction", m.reduction_fraction}};
}

inline nlohmann::ordered_json stage1_json(const Stage1Result& s) {
    nlohmann::ordered_json j;
    j["stage"] = 1;
    j["calibration_records"] = s.calibration_records;
    j["warmup"] = s.warmup;
    j["interfaces"] = stats_json(s.interfaces);
    j["drift_profile"] = profile_json(s.profile);
    j["probe_steps"] = s.sensitivity.probe_steps;
    j["sensitivity"] = sensitivity_json(s.sensitivity);
    j["activation_ranges"] = ranges_json(s.ranges);
    return j;
}

inline Stage1Result stage1_from_json(const nlohmann::json& j) {
    if (j.value("stage", 0) != 1) throw std::invalid_argument("not a stage 1 output");
    Stage1Result s;
    s.calibration_records = j.at("calibration_records").get<std::size_t>();
    s.warmup = j.at("warmup").get<std::size_t>();
    s.interfaces = stats_from_json(j.at("interfaces"));
    s.profile = profile_from_json(j.at("drift_profile"));
    s.sensitivity = sensitivity_from_json(j.at("sensitivity"), j.at("probe_steps").get<std::size_t>());
    s.ranges = ranges_from_json(j.at("activation_ranges"));
    return s;
}

/// Stage 2 hand-off; the compensated model itself travels in a container.
inline nlohmann::ordered_json stage2_json(const Stage2Result& s) {
    nlohmann::ordered_json j;
    j["stage"] = 2;
    if (s.rotation) {
        const auto& r = *s.rotation;
        nlohmann::ordered_json rot;
        rot["dim"] = r.dim;
        rot["block_size"] = r.block_size;
        rot["smoothing"] = r.smoothing;
        rot["blocks"] = nlohmann::ordered_json::array();
        for (std::size_t k = 0; k < r.rotations.size(); ++k)
            rot["blocks"].push_back({{"rotation", detail::matrix_json(r.rotations[k])}, {"spectrum", r.spectrum[k]}});
        j["rotation"] = std::move(rot);
    } else {
        j["rotation"] = nullptr;
    }
    j["interfaces"] = stats_json(s.fp_stats);
    j["activation_ranges"] = ranges_json(s.ranges);
    j["diagnostics"] = diagnostics_json(s.diagnostics);
    return j;
}

inline Stage2Result stage2_from_json(const nlohmann::json& j, Policy model) {
    if (j.value("stage", 0) != 2) throw std::invalid_argument("not a stage 2 output");
    Stage2Result s;
    if (!j.at("rotation").is_null()) {
        const auto& rj = j.at("rotation");
        csrc::PreRotation r;
        r.dim = rj.at("dim").get<std::size_t>();
        r.block_size = rj.at("block_size").get<std::size_t>();
        r.smoothing = rj.at("smoothing").get<double>();
        for (const auto& b : rj.at("blocks")) {
            r.rotations.push_back(detail::matrix_from_json(b.at("rotation")));
            r.spectrum.push_back(b.at("spectrum").get<Vector>());
        }
        s.rotation = std::move(r);
    }
    s.fp_stats = stats_from_json(j.at("interfaces"));
    s.ranges = ranges_from_json(j.at("activation_ranges"));
    s.diagnostics = diagnostics_from_json(j.at("diagnostics"));
    s.model = std::move(model);
    return s;
}

inline nlohmann::ordered_json stage3_json(const Stage3Result& s) {
    nlohmann::ordered_json j;
    j["stage"] = 3;
    j["eligible"] = sensitivity_json(s.eligible_sensitivity);
    j["excluded"] = s.partition.excluded;
    std::size_t retained = 0;
    for (const auto& name : s.partition.eligible) retained += s.bitmap.at(name) == Precision::kHigh16;
    j["retained"] = retained;
    j["bitmap"] = bitmap_json(s.bitmap);
    j["memory"] = memory_json(s.memory);
    j["diagnostics"] = diagnostics_json(s.diagnostics);
    return j;
}

}  // namespace dptq::pipeline
