// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dptq {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Calibration and evaluation settings. The first block carries the reference
/// hyperparameters; the second block sizes the desk-scale experiment.
struct CalibConfig {
    int calibration_steps = 512;
    int batch_size = 1;
    int spatial_bins = 6;
    int warmup_steps = 128;
    int probe_steps = 16;
    double damping = 3e-4;
    double w_trans = 1.8;
    double w_rot = 0.15;
    double scaling_gain = 1.6;
    double retention_k = 30.0;
    int svd_block = 16;
    double smoothing = 0.15;
    int group_size = 32;
    double shrinkage = 0.55;
    int rank_r = 16;
    double g_min = 0.25;
    double g_max = 4.0;
    std::uint64_t seed = 0;

    int episodes = 512;
    int episode_steps = 32;
    int horizon = 64;
    int eval_seeds = 20;
    double ridge = 1e-2;
    int excluded_blocks = 2;
    std::string interface_layers = "backbone.out,head.cond";
    std::string backbone_precision = "w4";
    bool activation_quant = true;
    bool pre_rotation = true;
    std::string row_reduction = "mean";

    /// Keys set explicitly (config file or flags), in the order they were applied.
    std::vector<std::string> overrides;

    std::vector<std::string> interface_list() const {
        std::vector<std::string> out;
        std::stringstream ss(interface_layers);
        for (std::string item; std::getline(ss, item, ',');)
            if (!item.empty()) out.push_back(item);
        return out;
    }

    void validate() const {
        auto positive = [](const char* key, double v) {
            if (!(v > 0.0)) throw ConfigError(std::string("config: '") + key + "' must be positive");
        };
        positive("calibration_steps", calibration_steps);
        positive("batch_size", batch_size);
        positive("spatial_bins", spatial_bins);
        positive("probe_steps", probe_steps);
        positive("damping", damping);
        positive("w_trans", w_trans);
        positive("w_rot", w_rot);
        positive("scaling_gain", scaling_gain);
        positive("svd_block", svd_block);
        positive("group_size", group_size);
        positive("rank_r", rank_r);
        positive("g_min", g_min);
        positive("g_max", g_max);
        positive("episodes", episodes);
        positive("episode_steps", episode_steps);
        positive("horizon", horizon);
        positive("eval_seeds", eval_seeds);
        positive("ridge", ridge);
        if (warmup_steps < 0 || warmup_steps + 2 > calibration_steps)
            throw ConfigError("config: warmup_steps must leave at least 2 calibration records");
        if (retention_k < 0.0 || retention_k > 100.0) throw ConfigError("config: retention_k must lie in [0, 100]");
        if (smoothing < 0.0 || smoothing > 1.0) throw ConfigError("config: smoothing must lie in [0, 1]");
        if (shrinkage < 0.0 || shrinkage > 1.0) throw ConfigError("config: shrinkage must lie in [0, 1]");
        if (g_min > g_max) throw ConfigError("config: g_min must not exceed g_max");
        if (excluded_blocks < 0) throw ConfigError("config: excluded_blocks must be non-negative");
        if (backbone_precision != "w4" && backbone_precision != "w8" && backbone_precision != "high16")
            throw ConfigError("config: backbone_precision must be w4, w8 or high16");
        if (row_reduction != "mean" && row_reduction != "max") throw ConfigError("config: row_reduction must be mean or max");
        if (interface_list().empty()) throw ConfigError("config: interface_layers is empty");
        for (const auto& l : interface_list())
            if (l != "backbone.out" && l != "head.cond")
                throw ConfigError("config: interface layer '" + l + "' is not supported (use backbone.out and/or head.cond)");
    }

    /// Applies one `key = value` assignment.
    void set(const std::string& key, const std::string& value) {
        auto as_int = [&]() {
            int v = 0;
            const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || p != value.data() + value.size()) throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
            return v;
        };
        auto as_double = [&]() {
            try {
                std::size_t used = 0;
                const double v = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument("trailing");
                return v;
            } catch (const std::exception&) {
                throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
            }
        };
        auto as_bool = [&]() {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw ConfigError("config: '" + key + "' expects true/false, got '" + value + "'");
        };
        if (key == "calibration_steps") calibration_steps = as_int();
        else if (key == "batch_size") batch_size = as_int();
        else if (key == "spatial_bins") spatial_bins = as_int();
        else if (key == "warmup_steps") warmup_steps = as_int();
        else if (key == "probe_steps") probe_steps = as_int();
        else if (key == "damping") damping = as_double();
        else if (key == "w_trans") w_trans = as_double();
        else if (key == "w_rot") w_rot = as_double();
        else if (key == "scaling_gain") scaling_gain = as_double();
        else if (key == "retention_k") retention_k = as_double();
        else if (key == "svd_block") svd_block = as_int();
        else if (key == "smoothing") smoothing = as_double();
        else if (key == "group_size") group_size = as_int();
        else if (key == "shrinkage") shrinkage = as_double();
        else if (key == "rank_r") rank_r = as_int();
        else if (key == "g_min") g_min = as_double();
        else if (key == "g_max") g_max = as_double();
        else if (key == "seed") {
            try {
                std::size_t used = 0;
                seed = std::stoull(value, &used);
                if (used != value.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw ConfigError("config: 'seed' expects a non-negative integer, got '" + value + "'");
            }
        } else if (key == "episodes") episodes = as_int();
        else if (key == "episode_steps") episode_steps = as_int();
        else if (key == "horizon") horizon = as_int();
        else if (key == "eval_seeds") eval_seeds = as_int();
        else if (key == "ridge") ridge = as_double();
        else if (key == "excluded_blocks") excluded_blocks = as_int();
        else if (key == "interface_layers") interface_layers = value;
        else if (key == "backbone_precision") backbone_precision = value;
        else if (key == "activation_quant") activation_quant = as_bool();
        else if (key == "pre_rotation") pre_rotation = as_bool();
        else if (key == "row_reduction") row_reduction = value;
        else throw ConfigError("config: unknown key '" + key + "'");
        std::erase(overrides, key);
        overrides.push_back(key);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["calibration_steps"] = calibration_steps;
        j["batch_size"] = batch_size;
        j["spatial_bins"] = spatial_bins;
        j["warmup_steps"] = warmup_steps;
        j["probe_steps"] = probe_steps;
        j["damping"] = damping;
        j["w_trans"] = w_trans;
        j["w_rot"] = w_rot;
        j["scaling_gain"] = scaling_gain;
        j["retention_k"] = retention_k;
        j["svd_block"] = svd_block;
        j["smoothing"] = smoothing;
        j["group_size"] = group_size;
        j["shrinkage"] = shrinkage;
        j["rank_r"] = rank_r;
        j["g_min"] = g_min;
        j["g_max"] = g_max;
        j["seed"] = seed;
        j["episodes"] = episodes;
        j["episode_steps"] = episode_steps;
        j["horizon"] = horizon;
        j["eval_seeds"] = eval_seeds;
        j["ridge"] = ridge;
        j["excluded_blocks"] = excluded_blocks;
        j["interface_layers"] = interface_layers;
        j["backbone_precision"] = backbone_precision;
        j["activation_quant"] = activation_quant;
        j["pre_rotation"] = pre_rotation;
        j["row_reduction"] = row_reduction;
        return j;
    }
};

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Parses `key = value` lines; `#` starts a comment.
inline void apply_config_text(CalibConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    int lineno = 0;
    for (std::string line; std::getline(in, line);) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

inline CalibConfig load_config(const std::string& path, CalibConfig base = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    apply_config_text(base, ss.str());
    base.validate();
    return base;
}

}  // namespace dptq
