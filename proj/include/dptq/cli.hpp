// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand reads and writes files in --out-dir,
// so the stages can run one at a time or all together through run-all.

#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dptq/config.hpp"
#include "dptq/container.hpp"
#include "dptq/dataset.hpp"
#include "dptq/pipeline.hpp"
#include "dptq/report.hpp"

namespace dptq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Missing inputs or bad settings: reported with exit code 1.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::vector<std::string> sets;  // key=value overrides applied after the config file

    std::string dataset;
    std::string model;
    std::string precision = "w4";
    std::string variants = "fp,w4,daptq";
    int seeds = 0;  // 0 = eval_seeds from the config
};

/// Defaults, then DRIFT_PTQ_SEED, then the config file, then --set, then --seed.
inline CalibConfig resolve_config(const Options& o) {
    CalibConfig cfg;
    if (const char* env = std::getenv("DRIFT_PTQ_SEED"); env && *env) cfg.set("seed", env);
    if (!o.config_path.empty()) {
        if (!fs::exists(o.config_path)) throw UsageError("config file '" + o.config_path + "' does not exist");
        cfg = load_config(o.config_path, cfg);
    }
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
        cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (o.seed) cfg.set("seed", std::to_string(*o.seed));
    cfg.validate();
    return cfg;
}

class Session {
public:
    Session(Options o, std::ostream& out) : opt_(std::move(o)), out_(out), cfg_(resolve_config(opt_)) {}

    const CalibConfig& config() const { return cfg_; }
    std::string path(const std::string& name) const { return (fs::path(opt_.out_dir) / name).string(); }

    void ensure_out_dir() const { fs::create_directories(opt_.out_dir); }

    std::string require(const std::string& file, const std::string& hint) const {
        if (!fs::exists(file)) throw UsageError("missing input '" + file + "' (" + hint + ")");
        return file;
    }

    const Dataset& dataset() {
        if (!dataset_) {
            const std::string p = opt_.dataset.empty() ? path("dataset.jsonl") : opt_.dataset;
            dataset_ = read_dataset(require(p, "run 'generate-data' first or pass --dataset"));
        }
        return *dataset_;
    }

    void timed(const std::string& stage, const std::function<void()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        body();
        timings_[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    /// Timings are wall-clock and therefore kept out of the deterministic report.
    void flush_timings() const {
        if (timings_.empty()) return;
        ordered_json j = fs::exists(path("timings.json")) ? report::read_json(path("timings.json")) : ordered_json::object();
        if (!j.is_object()) j = ordered_json::object();
        for (const auto& [k, v] : timings_.items()) j[k] = v;
        report::write_json(path("timings.json"), j);
    }

    void wrote(const std::string& file) const { out_ << "wrote " << file << '\n'; }

    // --- stages -------------------------------------------------------------

    void generate_data() {
        ensure_out_dir();
        const std::string p = opt_.dataset.empty() ? path("dataset.jsonl") : opt_.dataset;
        timed("generate_data", [&] { write_dataset(p, generate_dataset(cfg_)); });
        wrote(p);
    }

    /// Loads --model or fits a fresh FP model into fp.dptq. The model is stored in
    /// f32 and every later stage starts from the stored copy.
    Policy fp_model() {
        if (!opt_.model.empty()) return load_model(require(opt_.model, "--model")).policy;
        HeadFitReport fit;
        Policy fp;
        timed("fp_model", [&] { fp = pipeline::build_fp_policy(cfg_, dataset(), &fit); });
        ordered_json meta;
        meta["role"] = "fp";
        meta["head_fit"] = report::head_fit_json(fit);
        meta["provenance"] = report::provenance_json(cfg_, dataset());
        const std::string bytes = serialize_model(fp, meta);
        report::write_text(path("fp.dptq"), bytes);
        wrote(path("fp.dptq"));
        return deserialize_model(bytes).policy;
    }

    void profile() {
        dataset();
        ensure_out_dir();
        const Policy fp = fp_model();
        pipeline::Stage1Result s1;
        timed("stage1_profile", [&] { s1 = pipeline::run_stage1_profile(fp, dataset(), cfg_); });
        report::write_json(path("stage1.json"), pipeline::stage1_json(s1));
        wrote(path("stage1.json"));
    }

    pipeline::Stage1Result load_stage1() const {
        return pipeline::stage1_from_json(report::read_json(require(path("stage1.json"), "run 'profile' first")));
    }

    void compensate() {
        const Policy fp = fp_model_required();
        const auto s1 = load_stage1();
        pipeline::Stage2Result s2;
        timed("stage2_compensate", [&] { s2 = pipeline::run_stage2_compensate(fp, dataset(), &s1, cfg_); });
        report::write_json(path("stage2.json"), pipeline::stage2_json(s2));
        wrote(path("stage2.json"));
        save_variant("w4_csrc", s2.model, {{"role", "w4_csrc"}, {"diagnostics", pipeline::diagnostics_json(s2.diagnostics)}});
    }

    void allocate() {
        const Policy fp = fp_model_required();
        const auto s1 = load_stage1();
        const std::string s2_path = require(path("stage2.json"), "run 'compensate' first");
        const auto s2 = pipeline::stage2_from_json(report::read_json(s2_path), Policy{});
        pipeline::Stage3Result s3;
        timed("stage3_allocate", [&] { s3 = pipeline::run_stage3_allocate(fp, dataset(), &s1, &s2, cfg_); });
        const ordered_json j = pipeline::stage3_json(s3);
        report::write_json(path("stage3.json"), j);
        wrote(path("stage3.json"));
        save_variant("daptq", s3.model, {{"role", "daptq"}, {"bitmap", j.at("bitmap")}, {"memory", j.at("memory")}});
    }

    /// Uniform baseline. W4 layers take their 8-bit input ranges from stage 1.
    void quantize(const std::string& precision) {
        const Precision p = precision_from_string(precision);
        if (p == Precision::kFull) throw UsageError("quantize: --precision must be w4, w8 or high16");
        const Policy fp = fp_model_required();
        std::optional<pipeline::Stage1Result> s1;
        if (p == Precision::kW4 && cfg_.activation_quant) s1 = load_stage1();
        Policy q;
        timed("quantize_" + precision, [&] { q = pipeline::uniform_variant(fp, p, s1 ? &s1->ranges : nullptr, cfg_); });
        save_variant(precision, q, {{"role", precision}});
    }

    std::vector<std::string> variant_list() const {
        std::vector<std::string> out;
        std::stringstream ss(opt_.variants);
        for (std::string v; std::getline(ss, v, ',');) {
            v = trim(v);
            if (v.empty()) continue;
            if (std::find(out.begin(), out.end(), v) != out.end()) throw UsageError("--variants lists '" + v + "' twice");
            out.push_back(v);
        }
        if (out.empty()) throw UsageError("--variants is empty");
        return out;
    }

    void evaluate() {
        const Policy fp = fp_model_required();
        const int n = opt_.seeds > 0 ? opt_.seeds : cfg_.eval_seeds;
        std::vector<Policy> models;
        std::vector<std::string> names = variant_list();
        models.reserve(names.size());
        for (const auto& name : names)
            models.push_back(name == "fp" ? fp : load_model(require(path(name + ".dptq"), "produce variant '" + name + "' first")).policy);
        std::vector<std::pair<std::string, const Policy*>> refs;
        for (std::size_t i = 0; i < names.size(); ++i) refs.emplace_back(names[i], &models[i]);

        std::vector<report::EvaluatedVariant> evaluated;
        timed("evaluate", [&] {
            auto evals = pipeline::evaluate(fp, refs, cfg_, n);
            const auto shapes = fp.layer_shapes();
            for (std::size_t i = 0; i < evals.size(); ++i) {
                const BitWidthMap bm = pipeline::bitmap_of(models[i]);
                evaluated.push_back({std::move(evals[i]), bm, memory_report(shapes, bm, static_cast<std::size_t>(cfg_.group_size))});
            }
        });
        report::write_json(path("evaluation.json"), report::evaluation_json(evaluated, cfg_.horizon));
        report::write_text(path("evaluation.csv"), report::evaluation_csv(evaluated));
        report::write_text(path("drift_curves.csv"), report::drift_curves_csv(evaluated));
        wrote(path("evaluation.json"));
        wrote(path("evaluation.csv"));
        wrote(path("drift_curves.csv"));
    }

    void build_report() {
        const auto fp = load_model(require(path("fp.dptq"), "run 'profile' first"));
        const auto s1 = report::read_json(require(path("stage1.json"), "run 'profile' first"));
        const auto s2 = report::read_json(require(path("stage2.json"), "run 'compensate' first"));
        const auto s3 = report::read_json(require(path("stage3.json"), "run 'allocate' first"));
        const auto ev = report::read_json(require(path("evaluation.json"), "run 'evaluate' first"));
        const auto& meta = fp.metadata();
        if (!meta.contains("head_fit") || !meta.contains("provenance")) throw UsageError("fp.dptq carries no fit metadata (run 'profile' without --model)");
        const ordered_json r = report::assemble_report(meta.at("provenance"), meta.at("head_fit"), s1, s2, s3, ev);
        const auto errors = report::validate_against_schema(r);
        if (!errors.empty()) throw std::runtime_error("report fails its schema: " + errors.front());
        report::write_json(path("report.json"), r);
        report::write_text(path("report.schema.json"), std::string(report::kReportSchema) + "\n");
        wrote(path("report.json"));
        wrote(path("report.schema.json"));
    }

    void run_all() {
        if (opt_.dataset.empty() || !fs::exists(opt_.dataset)) generate_data();
        profile();
        compensate();
        allocate();
        quantize("w4");
        quantize("high16");
        opt_.variants = "fp,high16,w4,w4_csrc,daptq";
        evaluate();
        build_report();
    }

    ~Session() {
        try {
            flush_timings();
        } catch (...) {
        }
    }

private:
    Policy fp_model_required() const {
        const std::string p = opt_.model.empty() ? path("fp.dptq") : opt_.model;
        return load_model(require(p, "run 'profile' first or pass --model")).policy;
    }

    void save_variant(const std::string& name, const Policy& p, ordered_json meta) {
        meta["provenance"] = {{"seed", cfg_.seed}, {"config", cfg_.to_json()}};
        report::write_text(path(name + ".dptq"), serialize_model(p, meta));
        wrote(path(name + ".dptq"));
    }

    Options opt_;
    std::ostream& out_;
    CalibConfig cfg_;
    std::optional<Dataset> dataset_;
    ordered_json timings_ = ordered_json::object();
};

/// Entry point shared by the executable and the acceptance binary.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Drift-aware post-training quantization for a diffusion action policy", "dptq"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "key = value configuration file");
        sub->add_option("--seed", seed, "master seed (overrides DRIFT_PTQ_SEED and the config file)");
        sub->add_option("--out-dir", o.out_dir, "directory for all inputs and outputs")->capture_default_str();
        sub->add_option("--set", o.sets, "KEY=VALUE config override (repeatable)");
    };
    auto* gen = app.add_subcommand("generate-data", "write the scripted-controller dataset as JSONL");
    auto* prof = app.add_subcommand("profile", "stage 1: interface statistics, drift scores and layer sensitivities");
    auto* comp = app.add_subcommand("compensate", "stage 2: all-W4 quantization with folded compensation");
    auto* alloc = app.add_subcommand("allocate", "stage 3: mixed-precision bit map and final model");
    auto* quant = app.add_subcommand("quantize", "uniform baseline model");
    auto* eval = app.add_subcommand("evaluate", "paired closed-loop rollouts against the FP model");
    auto* rep = app.add_subcommand("report", "assemble and validate report.json");
    auto* all = app.add_subcommand("run-all", "every stage, the baselines, evaluation and the report");
    for (auto* s : {gen, prof, comp, alloc, quant, eval, rep, all}) common(s);
    for (auto* s : {gen, prof, comp, alloc, eval, rep, all}) s->add_option("--dataset", o.dataset, "dataset path (default <out-dir>/dataset.jsonl)");
    for (auto* s : {prof, comp, alloc, quant, eval}) s->add_option("--model", o.model, "FP model container (default <out-dir>/fp.dptq)");
    quant->add_option("--precision", o.precision, "w4, w8 or high16")->check(CLI::IsMember({"w4", "w8", "high16"}))->capture_default_str();
    eval->add_option("--variants", o.variants, "comma-separated variant names; each loads <out-dir>/<name>.dptq")->capture_default_str();
    eval->add_option("--seeds", o.seeds, "number of paired seeds (default eval_seeds)")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "dptq: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }
    for (auto* s : app.get_subcommands())
        if (s->count("--seed")) o.seed = seed;

    try {
        Session session(o, out);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "generate-data") session.generate_data();
        else if (cmd == "profile") session.profile();
        else if (cmd == "compensate") session.compensate();
        else if (cmd == "allocate") session.allocate();
        else if (cmd == "quantize") session.quantize(o.precision);
        else if (cmd == "evaluate") session.evaluate();
        else if (cmd == "report") session.build_report();
        else session.run_all();
        return kExitOk;
    } catch (const UsageError& e) {
        err << "dptq: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "dptq: " << e.what() << '\n';
        return kExitUsage;
    } catch (const pipeline::StageOrderError& e) {
        err << "dptq: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "dptq: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace dptq::cli
