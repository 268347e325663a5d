// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dptq/config.hpp"
#include "dptq/dataset.hpp"
#include "dptq/pipeline.hpp"
#include "dptq/policy.hpp"

namespace dptq::report {

inline constexpr const char* kReportSchemaTag = "dptq.report";
inline constexpr int kReportVersion = 1;

/// JSON Schema (draft-07 subset) for report.json.
inline constexpr const char* kReportSchema = R"json({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "dptq pipeline report",
  "type": "object",
  "required": ["schema", "version", "provenance", "fp_model", "stage1", "stage2", "stage3", "evaluation"],
  "properties": {
    "schema": {"type": "string", "enum": ["dptq.report"]},
    "version": {"type": "integer", "enum": [1]},
    "provenance": {
      "type": "object",
      "required": ["seed", "config", "overrides", "dataset"],
      "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
        "overrides": {"type": "object"},
        "dataset": {
          "type": "object",
          "required": ["episodes", "episode_steps", "spatial_bins", "records"],
          "properties": {
            "episodes": {"type": "integer", "minimum": 1},
            "episode_steps": {"type": "integer", "minimum": 1},
            "spatial_bins": {"type": "integer", "minimum": 1},
            "records": {"type": "integer", "minimum": 1}
          }
        }
      }
    },
    "fp_model": {
      "type": "object",
      "required": ["head_fit"],
      "properties": {
        "head_fit": {
          "type": "object",
          "required": ["ridge_used", "rmse_before", "rmse_after", "warnings"],
          "properties": {
            "ridge_used": {"type": "number", "minimum": 0},
            "rmse_before": {"type": "number", "minimum": 0},
            "rmse_after": {"type": "number", "minimum": 0},
            "warnings": {"type": "array", "items": {"type": "string"}}
          }
        }
      }
    },
    "stage1": {
      "type": "object",
      "required": ["calibration_records", "warmup", "interfaces", "drift_profile", "sensitivity", "activation_ranges"],
      "properties": {
        "calibration_records": {"type": "integer", "minimum": 2},
        "warmup": {"type": "integer", "minimum": 0},
        "interfaces": {
          "type": "array",
          "minItems": 1,
          "items": {
            "type": "object",
            "required": ["layer", "count", "absmax", "mean_norm", "trace_covariance"],
            "properties": {
              "layer": {"type": "string"},
              "count": {"type": "integer", "minimum": 2},
              "absmax": {"type": "number", "minimum": 0},
              "mean_norm": {"type": "number", "minimum": 0},
              "trace_covariance": {"type": "number", "minimum": 0}
            }
          }
        },
        "drift_profile": {
          "type": "object",
          "required": ["s", "s_hat", "s_hat_mean", "weights", "lambda", "gain", "samples"],
          "properties": {
            "s": {"type": "array", "minItems": 7, "maxItems": 7, "items": {"type": "number", "minimum": 0}},
            "s_hat": {"type": "array", "minItems": 7, "maxItems": 7, "items": {"type": "number", "minimum": 0}},
            "s_hat_mean": {"type": "number"},
            "weights": {"type": "object", "required": ["x", "y", "theta"]},
            "lambda": {"type": "number", "minimum": 0},
            "gain": {"type": "number"},
            "samples": {"type": "integer", "minimum": 1}
          }
        },
        "sensitivity": {"$ref": "#/definitions/sensitivity"},
        "activation_ranges": {
          "type": "array",
          "items": {
            "type": "object",
            "required": ["layer", "absmax"],
            "properties": {"layer": {"type": "string"}, "absmax": {"type": "number", "minimum": 0}}
          }
        }
      }
    },
    "stage2": {
      "type": "object",
      "required": ["rotation", "diagnostics"],
      "properties": {
        "rotation": {
          "type": ["object", "null"],
          "required": ["dim", "block_size", "blocks", "smoothing"]
        },
        "diagnostics": {"$ref": "#/definitions/diagnostics"}
      }
    },
    "stage3": {
      "type": "object",
      "required": ["eligible", "excluded", "retained", "bitmap", "memory", "diagnostics"],
      "properties": {
        "eligible": {"$ref": "#/definitions/sensitivity"},
        "excluded": {"type": "array", "items": {"type": "string"}},
        "retained": {"type": "integer", "minimum": 0},
        "bitmap": {"$ref": "#/definitions/bitmap"},
        "memory": {"$ref": "#/definitions/memory"},
        "diagnostics": {"$ref": "#/definitions/diagnostics"}
      }
    },
    "evaluation": {
      "type": "object",
      "required": ["horizon", "seeds", "variants"],
      "properties": {
        "horizon": {"type": "integer", "minimum": 1},
        "seeds": {"type": "integer", "minimum": 1},
        "variants": {
          "type": "array",
          "minItems": 1,
          "items": {
            "type": "object",
            "required": ["name", "bitmap", "memory", "summary", "per_seed"],
            "properties": {
              "name": {"type": "string"},
              "bitmap": {"$ref": "#/definitions/bitmap"},
              "memory": {"$ref": "#/definitions/memory"},
              "summary": {
                "type": "object",
                "required": ["e_norm_mean", "e_norm_std", "final_gap_mean", "final_gap_std", "e_open_loop_mean"],
                "properties": {
                  "e_norm_mean": {"type": "number", "minimum": 0},
                  "e_norm_std": {"type": "number", "minimum": 0},
                  "final_gap_mean": {"type": "number", "minimum": 0},
                  "final_gap_std": {"type": "number", "minimum": 0},
                  "e_open_loop_mean": {"type": "number", "minimum": 0}
                }
              },
              "per_seed": {
                "type": "array",
                "items": {
                  "type": "object",
                  "required": ["seed", "env_seed", "e_norm", "e_open_loop", "final_gap"],
                  "properties": {
                    "seed": {"type": "integer", "minimum": 0},
                    "env_seed": {"type": "integer", "minimum": 0},
                    "e_norm": {"type": "number", "minimum": 0},
                    "e_open_loop": {"type": "number", "minimum": 0},
                    "final_gap": {"type": "number", "minimum": 0}
                  }
                }
              }
            }
          }
        },
        "paired": {"type": "object"}
      }
    }
  },
  "definitions": {
    "sensitivity": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["layer", "phi"],
        "properties": {"layer": {"type": "string"}, "phi": {"type": "number", "minimum": 0}}
      }
    },
    "bitmap": {
      "type": "object",
      "additionalProperties": {"type": "string", "enum": ["fp", "high16", "w4", "w8"]}
    },
    "memory": {
      "type": "object",
      "required": ["total_bits", "baseline_bits", "reduction_fraction"],
      "properties": {
        "total_bits": {"type": "integer", "minimum": 0},
        "baseline_bits": {"type": "integer", "minimum": 0},
        "reduction_fraction": {"type": "number", "maximum": 1}
      }
    },
    "diagnostics": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["layer", "mean_mismatch_before", "mean_mismatch_after", "objective_identity", "objective", "fallback"],
        "properties": {
          "layer": {"type": "string"},
          "mean_mismatch_before": {"type": "number", "minimum": 0},
          "mean_mismatch_after": {"type": "number", "minimum": 0},
          "objective_identity": {"type": "number", "minimum": 0},
          "objective": {"type": "number", "minimum": 0},
          "fallback": {"type": "boolean"}
        }
      }
    }
  }
})json";

inline const nlohmann::json& report_schema() {
    static const nlohmann::json schema = nlohmann::json::parse(kReportSchema);
    return schema;
}

namespace detail {

inline bool type_matches(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    throw std::invalid_argument("schema: unsupported type '" + t + "'");
}

inline const nlohmann::json& resolve(const nlohmann::json& root, const nlohmann::json& s) {
    if (!s.is_object() || !s.contains("$ref")) return s;
    const auto ref = s.at("$ref").get<std::string>();
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0) throw std::invalid_argument("schema: unsupported $ref '" + ref + "'");
    return root.at("definitions").at(ref.substr(prefix.size()));
}

inline void validate(const nlohmann::json& root, const nlohmann::json& schema_in, const nlohmann::json& v, const std::string& path,
                     std::vector<std::string>& errors) {
    const nlohmann::json& s = resolve(root, schema_in);
    if (s.contains("type")) {
        const auto& t = s.at("type");
        bool ok = false;
        if (t.is_array()) {
            for (const auto& alt : t) ok = ok || type_matches(v, alt.get<std::string>());
        } else {
            ok = type_matches(v, t.get<std::string>());
        }
        if (!ok) {
            errors.push_back(path + ": expected type " + t.dump());
            return;
        }
    }
    if (s.contains("enum")) {
        bool found = false;
        for (const auto& e : s.at("enum")) found = found || e == v;
        if (!found) errors.push_back(path + ": value " + v.dump() + " not in enum");
    }
    if (v.is_number()) {
        if (s.contains("minimum") && v.get<double>() < s.at("minimum").get<double>()) errors.push_back(path + ": below minimum");
        if (s.contains("maximum") && v.get<double>() > s.at("maximum").get<double>()) errors.push_back(path + ": above maximum");
    }
    if (v.is_object()) {
        if (s.contains("required"))
            for (const auto& k : s.at("required"))
                if (!v.contains(k.get<std::string>())) errors.push_back(path + ": missing required key '" + k.get<std::string>() + "'");
        for (const auto& [k, child] : v.items()) {
            if (s.contains("properties") && s.at("properties").contains(k))
                validate(root, s.at("properties").at(k), child, path + "/" + k, errors);
            else if (s.contains("additionalProperties") && s.at("additionalProperties").is_object())
                validate(root, s.at("additionalProperties"), child, path + "/" + k, errors);
        }
    }
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>()) errors.push_back(path + ": too few items");
        if (s.contains("maxItems") && v.size() > s.at("maxItems").get<std::size_t>()) errors.push_back(path + ": too many items");
        if (s.contains("items"))
            for (std::size_t i = 0; i < v.size(); ++i) validate(root, s.at("items"), v[i], path + "/" + std::to_string(i), errors);
    }
}

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Validates `doc` against a schema using type, enum, minimum/maximum, required,
/// properties, additionalProperties, items, minItems/maxItems and local $ref.
inline std::vector<std::string> validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema = report_schema()) {
    std::vector<std::string> errors;
    detail::validate(schema, schema, doc, "", errors);
    return errors;
}

inline nlohmann::ordered_json head_fit_json(const HeadFitReport& r) {
    return {{"ridge_used", r.ridge_used}, {"rmse_before", r.rmse_before}, {"rmse_after", r.rmse_after}, {"warnings", r.warnings}};
}

inline nlohmann::ordered_json provenance_json(const CalibConfig& cfg, const Dataset& ds) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    const auto all = cfg.to_json();
    j["config"] = all;
    nlohmann::ordered_json ov = nlohmann::ordered_json::object();
    for (const auto& k : cfg.overrides) ov[k] = all.at(k);
    j["overrides"] = std::move(ov);
    j["dataset"] = {{"episodes", ds.episodes}, {"episode_steps", ds.episode_steps}, {"spatial_bins", ds.spatial_bins}, {"records", ds.records.size()}};
    return j;
}

/// Report view of a stage 1 hand-off: full covariances are replaced by summaries.
inline nlohmann::ordered_json stage1_summary(const nlohmann::ordered_json& s1) {
    nlohmann::ordered_json j = s1;
    j.erase("stage");
    for (auto& e : j["interfaces"]) {
        const auto mean = e.at("mean").get<Vector>();
        const Matrix cov = pipeline::detail::matrix_from_json(e.at("covariance"));
        double tr = 0.0;
        for (std::size_t i = 0; i < cov.rows(); ++i) tr += cov(i, i);
        e.erase("mean");
        e.erase("covariance");
        e["mean_norm"] = norm2(mean);
        e["trace_covariance"] = tr;
    }
    return j;
}

inline nlohmann::ordered_json stage2_summary(const nlohmann::ordered_json& s2) {
    nlohmann::ordered_json j;
    if (s2.at("rotation").is_null()) {
        j["rotation"] = nullptr;
    } else {
        const auto& r = s2.at("rotation");
        j["rotation"] = {{"dim", r.at("dim")}, {"block_size", r.at("block_size")}, {"blocks", r.at("blocks").size()}, {"smoothing", r.at("smoothing")}};
    }
    j["diagnostics"] = s2.at("diagnostics");
    return j;
}

struct EvaluatedVariant {
    pipeline::VariantEvaluation eval;
    BitWidthMap bitmap;
    MemoryReport memory;
};

inline nlohmann::ordered_json evaluation_json(const std::vector<EvaluatedVariant>& variants, int horizon) {
    nlohmann::ordered_json j;
    j["horizon"] = horizon;
    j["seeds"] = variants.empty() ? 0 : variants.front().eval.seeds.size();
    j["variants"] = nlohmann::ordered_json::array();
    for (const auto& v : variants) {
        nlohmann::ordered_json e;
        e["name"] = v.eval.name;
        e["bitmap"] = pipeline::bitmap_json(v.bitmap);
        e["memory"] = pipeline::memory_json(v.memory);
        e["summary"] = {{"e_norm_mean", v.eval.mean_e()},
                        {"e_norm_std", v.eval.std_e()},
                        {"final_gap_mean", v.eval.mean_gap()},
                        {"final_gap_std", v.eval.std_gap()},
                        {"e_open_loop_mean", v.eval.mean_open_loop()}};
        e["per_seed"] = nlohmann::ordered_json::array();
        for (const auto& s : v.eval.seeds)
            e["per_seed"].push_back(
                {{"seed", s.seed}, {"env_seed", s.env_seed}, {"e_norm", s.e_norm}, {"e_open_loop", s.e_open_loop}, {"final_gap", s.final_gap}});
        j["variants"].push_back(std::move(e));
    }
    // Paired comparisons of every variant against the uniform W4 baseline.
    const pipeline::VariantEvaluation* w4 = nullptr;
    for (const auto& v : variants)
        if (v.eval.name == "w4") w4 = &v.eval;
    nlohmann::ordered_json paired = nlohmann::ordered_json::object();
    if (w4)
        for (const auto& v : variants)
            if (&v.eval != w4) paired[v.eval.name + "_vs_w4_wins"] = pipeline::paired_wins(v.eval, *w4);
    j["paired"] = std::move(paired);
    return j;
}

inline std::string evaluation_csv(const std::vector<EvaluatedVariant>& variants) {
    std::ostringstream out;
    out << "variant,seed,env_seed,e_norm,e_open_loop,final_gap\n";
    for (const auto& v : variants)
        for (const auto& s : v.eval.seeds)
            out << v.eval.name << ',' << s.seed << ',' << s.env_seed << ',' << detail::fmt_double(s.e_norm) << ','
                << detail::fmt_double(s.e_open_loop) << ',' << detail::fmt_double(s.final_gap) << '\n';
    return out.str();
}

/// Per-step ||E_t|| curves for external plotting.
inline std::string drift_curves_csv(const std::vector<EvaluatedVariant>& variants) {
    std::ostringstream out;
    out << "variant,seed,t,e_norm\n";
    for (const auto& v : variants)
        for (const auto& s : v.eval.seeds)
            for (std::size_t t = 0; t < s.curve.size(); ++t)
                out << v.eval.name << ',' << s.seed << ',' << t + 1 << ',' << detail::fmt_double(s.curve[t]) << '\n';
    return out.str();
}

inline nlohmann::ordered_json assemble_report(const nlohmann::ordered_json& provenance, const nlohmann::ordered_json& head_fit,
                                              const nlohmann::ordered_json& stage1, const nlohmann::ordered_json& stage2,
                                              const nlohmann::ordered_json& stage3, const nlohmann::ordered_json& evaluation) {
    nlohmann::ordered_json r;
    r["schema"] = kReportSchemaTag;
    r["version"] = kReportVersion;
    r["provenance"] = provenance;
    r["fp_model"] = {{"head_fit", head_fit}};
    r["stage1"] = stage1_summary(stage1);
    r["stage2"] = stage2_summary(stage2);
    nlohmann::ordered_json s3 = stage3;
    s3.erase("stage");
    r["stage3"] = std::move(s3);
    r["evaluation"] = evaluation;
    return r;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw std::runtime_error("write failure on '" + path + "'");
}

inline std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::ordered_json read_json(const std::string& path) {
    try {
        return nlohmann::ordered_json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed JSON in '" + path + "': " + e.what());
    }
}

}  // namespace dptq::report
