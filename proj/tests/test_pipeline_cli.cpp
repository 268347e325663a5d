// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dptq/cli.hpp"
#include "dptq/container.hpp"
#include "dptq/dataset.hpp"
#include "dptq/pipeline.hpp"
#include "dptq/report.hpp"

using namespace dptq;
using namespace dptq::pipeline;
namespace fs = std::filesystem;

namespace {

CalibConfig small_config() {
    CalibConfig c;
    c.episodes = 60;
    c.episode_steps = 24;
    c.calibration_steps = 256;
    c.warmup_steps = 64;
    c.probe_steps = 4;
    c.eval_seeds = 3;
    c.horizon = 16;
    c.seed = 3;
    return c;
}

const std::vector<std::string> kSmallSets{"episodes=60",      "episode_steps=24", "calibration_steps=256", "warmup_steps=64",
                                          "probe_steps=4",    "eval_seeds=3",     "horizon=16"};

struct Cli {
    int code = 0;
    std::string out, err;
};

Cli run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dptq");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Cli r;
    r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::vector<std::string> with_small(std::vector<std::string> args) {
    for (const auto& s : kSmallSets) {
        args.push_back("--set");
        args.push_back(s);
    }
    return args;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dptq_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// One in-process pipeline run shared by the stage tests.
struct Shared {
    CalibConfig cfg = small_config();
    Dataset ds;
    Policy fp;
    Stage1Result s1;
    Stage2Result s2;
    Stage3Result s3;

    static const Shared& get() {
        static const Shared s;
        return s;
    }

private:
    Shared() : ds(generate_dataset(cfg)), fp(build_fp_policy(cfg, ds)) {
        s1 = run_stage1_profile(fp, ds, cfg);
        s2 = run_stage2_compensate(fp, ds, &s1, cfg);
        s3 = run_stage3_allocate(fp, ds, &s1, &s2, cfg);
    }
};

}  // namespace

TEST(Dataset, DeterministicAndRoundTrips) {
    const CalibConfig cfg = small_config();
    const Dataset a = generate_dataset(cfg), b = generate_dataset(cfg);
    std::ostringstream sa, sb;
    write_dataset(sa, a);
    write_dataset(sb, b);
    EXPECT_EQ(sa.str(), sb.str());
    std::istringstream in(sa.str());
    const Dataset back = read_dataset(in);
    std::ostringstream again;
    write_dataset(again, back);
    EXPECT_EQ(again.str(), sa.str());
    EXPECT_EQ(back.records.size(), 60u * 24u);
}

TEST(Dataset, BinsBalancedAndActionsBounded) {
    const CalibConfig cfg = small_config();
    const Dataset ds = generate_dataset(cfg);
    std::vector<int> hist(static_cast<std::size_t>(cfg.spatial_bins), 0);
    for (const auto& r : ds.records) {
        if (r.step == 0) ++hist.at(static_cast<std::size_t>(r.bin));
        for (double a : r.action) ASSERT_LE(std::abs(a), 0.25);
        ASSERT_EQ(r.obs.size(), 13u);
    }
    const auto [lo, hi] = std::minmax_element(hist.begin(), hist.end());
    EXPECT_LE(*hi - *lo, 1);

    const auto calib = select_calibration(ds, 256, cfg.seed);
    std::vector<int> chist(hist.size(), 0);
    for (const auto* r : calib) ++chist[static_cast<std::size_t>(r->bin)];
    const auto [clo, chi] = std::minmax_element(chist.begin(), chist.end());
    EXPECT_LE(*chi - *clo, 1);
}

TEST(Dataset, RejectsMalformedInput) {
    std::istringstream in("{\"schema\": \"something-else\"}\n");
    EXPECT_THROW(read_dataset(in), DatasetError);
}

TEST(Stages, EnforceOrder) {
    const auto& s = Shared::get();
    EXPECT_THROW(run_stage2_compensate(s.fp, s.ds, nullptr, s.cfg), StageOrderError);
    EXPECT_THROW(run_stage3_allocate(s.fp, s.ds, &s.s1, nullptr, s.cfg), StageOrderError);
    Stage1Result empty = s.s1;
    empty.sensitivity.phi.clear();
    EXPECT_THROW(run_stage3_allocate(s.fp, s.ds, &empty, &s.s2, s.cfg), StageOrderError);
}

TEST(Stage1, DriftScoresNormalized) {
    const auto& p = Shared::get().s1.profile;
    EXPECT_NEAR(std::accumulate(p.s_hat.begin(), p.s_hat.end(), 0.0) / 7.0, 1.0, 1e-9);
    EXPECT_GT(p.s_hat[0], p.s_hat[5]);
}

TEST(Stage1, OutputHeadIsAboveMedianSensitivity) {
    const auto& phi = Shared::get().s1.sensitivity.phi;
    std::vector<double> v;
    for (const auto& [n, x] : phi) v.push_back(x);
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    const auto it = std::find_if(phi.begin(), phi.end(), [](const auto& e) { return e.first == "head.out"; });
    ASSERT_NE(it, phi.end());
    EXPECT_GT(it->second, v[v.size() / 2]);
}

TEST(Stage2, CompensationRestoresInterfaceStatistics) {
    const auto& s = Shared::get();
    ASSERT_EQ(s.s2.diagnostics.size(), s.cfg.interface_list().size());
    for (const auto& d : s.s2.diagnostics) {
        EXPECT_GE(d.mean_reduction(), 0.9) << d.layer;
        EXPECT_LE(d.objective, d.objective_identity) << d.layer;
        EXPECT_GE(d.g_lo, s.cfg.g_min);
        EXPECT_LE(d.g_hi, s.cfg.g_max);
    }
    ASSERT_TRUE(s.s2.rotation);
}

TEST(Stage2, RotationPreservesFullPrecisionFunction) {
    const auto& s = Shared::get();
    const Policy rotated = apply_rotation(s.fp, s.s2.rotation);
    Rng rng(1);
    for (int i = 0; i < 10; ++i) {
        const Vector obs = rng.normal_vector(13), noise = rng.normal_vector(7);
        const Vector a = s.fp.act(obs, noise), b = rotated.act(obs, noise);
        for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(a[j], b[j], 1e-9);
    }
}

TEST(Stage2, FullPrecisionInputGivesIdentityCompensation) {
    const auto& s = Shared::get();
    const RecordSet records = calibration_records(s.ds, s.cfg);
    const auto comp = quantize_and_compensate(s.fp, BitWidthMap::uniform(s.fp.layer_names(), Precision::kFull), nullptr, s.s1.interfaces,
                                              records, s.cfg);
    // Identical statistics leave only the epsilon in sigma_fp / (sigma_q + eps).
    for (const auto& d : comp.diagnostics) {
        EXPECT_NEAR(d.g_lo, 1.0, 1e-4) << d.layer;
        EXPECT_NEAR(d.g_hi, 1.0, 1e-4) << d.layer;
        EXPECT_LE(d.lowrank_fro, 0.05) << d.layer;
        EXPECT_LE(d.mean_mismatch_after, 1e-9) << d.layer;
        EXPECT_FALSE(d.fallback) << d.layer;
    }
    Rng rng(2);
    const Vector obs = rng.normal_vector(13), noise = rng.normal_vector(7);
    const Vector a = s.fp.act(obs, noise), b = comp.model.act(obs, noise);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(a[j], b[j], 1e-4);
}

TEST(Stage3, RetentionAndMemory) {
    const auto& s = Shared::get();
    const auto& part = s.s3.partition;
    EXPECT_EQ(part.eligible.size(), 2u + 2u * 4u);
    EXPECT_EQ(part.excluded.size(), 1u + 2u * 2u);
    std::size_t eligible_high = 0;
    for (const auto& n : part.eligible) eligible_high += s.s3.bitmap.at(n) == Precision::kHigh16;
    EXPECT_EQ(eligible_high, 3u);
    for (const auto& n : part.excluded) EXPECT_EQ(s.s3.bitmap.at(n), Precision::kHigh16);
    EXPECT_EQ(s.s3.bitmap.at("backbone.fc"), Precision::kW4);

    // Analytic storage: 16 bits per HIGH16 weight; 4 bits per W4 weight plus a 16-bit scale per group of 32.
    std::uint64_t bits = 0, base = 0;
    for (const auto& l : s.fp.layers()) {
        const std::uint64_t n = l.out_dim() * l.in_dim();
        base += 16 * n;
        if (s.s3.bitmap.at(l.name()) == Precision::kHigh16) bits += 16 * n;
        else bits += 4 * n + 16 * l.out_dim() * ((l.in_dim() + 31) / 32);
    }
    EXPECT_EQ(s.s3.memory.total_bits, bits);
    EXPECT_EQ(s.s3.memory.baseline_bits, base);
    EXPECT_DOUBLE_EQ(s.s3.memory.reduction_fraction, 1.0 - static_cast<double>(bits) / static_cast<double>(base));
}

TEST(Stage3, FullRetentionKeepsEveryHeadLayer) {
    const auto& s = Shared::get();
    CalibConfig cfg = s.cfg;
    cfg.retention_k = 100;
    const BitWidthMap m = final_bitmap(s.fp, s.s1.sensitivity, cfg);
    for (std::size_t i = Policy::kHeadIn; i < s.fp.layers().size(); ++i) EXPECT_EQ(m.at(s.fp.layers()[i].name()), Precision::kHigh16);
    cfg.retention_k = 0;
    const BitWidthMap z = final_bitmap(s.fp, s.s1.sensitivity, cfg);
    for (const auto& n : s.s3.partition.eligible) EXPECT_EQ(z.at(n), Precision::kW4);
}

TEST(Evaluation, FullPrecisionAgainstItselfHasNoDrift) {
    const auto& s = Shared::get();
    const auto ev = evaluate(s.fp, {{"fp", &s.fp}, {"daptq", &s.s3.model}}, s.cfg, 3);
    ASSERT_EQ(ev.size(), 2u);
    for (const auto& r : ev[0].seeds) {
        EXPECT_EQ(r.e_norm, 0.0);
        EXPECT_EQ(r.final_gap, 0.0);
        EXPECT_EQ(r.curve.size(), 16u);
    }
    EXPECT_EQ(paired_wins(ev[0], ev[1]), 3);
    EXPECT_EQ(paired_wins(ev[1], ev[0]), 0);
}

TEST(Report, SchemaRejectsBrokenDocuments) {
    nlohmann::json doc = nlohmann::json::object();
    EXPECT_FALSE(report::validate_against_schema(doc).empty());
}

TEST(Container, RoundTripIsByteExact) {
    const auto& s = Shared::get();
    for (const Policy* p : {&s.fp, &s.s2.model, &s.s3.model}) {
        const std::string bytes = serialize_model(*p, {{"role", "test"}});
        const auto back = deserialize_model(bytes);
        EXPECT_EQ(serialize_model(back.policy, {{"role", "test"}}), bytes);
        // Storage is f32: one trip reaches a fixed point. The FP model is already f32 and
        // survives unchanged; 8-bit input rounding turns f32 drift in the compensation
        // factors into occasional whole-step changes, hence the looser bound.
        const double tol = p == &s.fp ? 0.0 : 5e-3;
        const auto twice = deserialize_model(serialize_model(back.policy));
        Rng rng(3);
        for (int i = 0; i < 5; ++i) {
            const Vector obs = rng.normal_vector(13), noise = rng.normal_vector(7);
            const Vector a = back.policy.act(obs, noise), b = p->act(obs, noise);
            EXPECT_EQ(twice.policy.act(obs, noise), a);
            for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(a[j], b[j], tol);
        }
    }
    EXPECT_THROW(deserialize_model("not a container"), ContainerError);
}

TEST(Config, SeedPrecedence) {
    const fs::path dir = scratch("cfg");
    const std::string file = (dir / "c.cfg").string();
    std::ofstream(file) << "# comment\nseed = 11\nhorizon = 32\n";
    ::setenv("DRIFT_PTQ_SEED", "5", 1);
    cli::Options o;
    EXPECT_EQ(cli::resolve_config(o).seed, 5u);
    o.config_path = file;
    CalibConfig c = cli::resolve_config(o);
    EXPECT_EQ(c.seed, 11u);
    EXPECT_EQ(c.horizon, 32);
    o.sets = {"seed=12"};
    EXPECT_EQ(cli::resolve_config(o).seed, 12u);
    o.seed = 13;
    EXPECT_EQ(cli::resolve_config(o).seed, 13u);
    ::unsetenv("DRIFT_PTQ_SEED");
    o.config_path = (dir / "missing.cfg").string();
    EXPECT_THROW(cli::resolve_config(o), cli::UsageError);
    fs::remove_all(dir);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run_cli({}).code, cli::kExitUsage);
    EXPECT_EQ(run_cli({"no-such-command"}).code, cli::kExitUsage);
    EXPECT_EQ(run_cli({"--help"}).code, cli::kExitOk);
    const fs::path dir = scratch("usage");
    const Cli missing = run_cli({"compensate", "--out-dir", dir.string()});
    EXPECT_EQ(missing.code, cli::kExitUsage);
    EXPECT_NE(missing.err.find("missing input"), std::string::npos);
    EXPECT_EQ(run_cli({"generate-data", "--out-dir", dir.string(), "--set", "no_such_key=1"}).code, cli::kExitUsage);
    EXPECT_EQ(run_cli({"quantize", "--precision", "w3", "--out-dir", dir.string()}).code, cli::kExitUsage);
    EXPECT_EQ(run_cli({"evaluate", "--seeds", "0", "--out-dir", dir.string()}).code, cli::kExitUsage);
    fs::remove_all(dir);
}

TEST(Cli, StageByStageProducesValidReport) {
    const fs::path dir = scratch("stages");
    const std::string d = dir.string();
    for (const char* cmd : {"generate-data", "profile", "compensate", "allocate"})
        ASSERT_EQ(run_cli(with_small({cmd, "--out-dir", d})).code, cli::kExitOk) << cmd;
    ASSERT_EQ(run_cli(with_small({"quantize", "--precision", "w4", "--out-dir", d})).code, cli::kExitOk);
    const Cli ev = run_cli(with_small({"evaluate", "--variants", "fp,w4,daptq", "--seeds", "3", "--out-dir", d}));
    ASSERT_EQ(ev.code, cli::kExitOk) << ev.err;
    ASSERT_EQ(run_cli(with_small({"report", "--out-dir", d})).code, cli::kExitOk);

    const auto evaluation = report::read_json((dir / "evaluation.json").string());
    ASSERT_EQ(evaluation.at("variants").size(), 3u);
    for (const auto& v : evaluation.at("variants")) EXPECT_EQ(v.at("per_seed").size(), 3u);
    EXPECT_TRUE(evaluation.at("paired").contains("daptq_vs_w4_wins"));

    const auto rep = report::read_json((dir / "report.json").string());
    EXPECT_TRUE(report::validate_against_schema(rep).empty());
    for (const char* f : {"stage1.json", "stage2.json", "stage3.json", "fp.dptq", "w4_csrc.dptq", "daptq.dptq", "w4.dptq", "evaluation.csv",
                          "drift_curves.csv", "timings.json", "report.schema.json"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;

    // A missing variant container is a usage error, not a crash.
    EXPECT_EQ(run_cli(with_small({"evaluate", "--variants", "fp,high16", "--out-dir", d})).code, cli::kExitUsage);
    fs::remove_all(dir);
}
