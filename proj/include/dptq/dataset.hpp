// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dptq/config.hpp"
#include "dptq/drift.hpp"
#include "dptq/random.hpp"
#include "dptq/sim.hpp"

namespace dptq {

inline constexpr const char* kDatasetSchema = "dptq.trajectories";
inline constexpr int kDatasetVersion = 1;

struct TrajectoryRecord {
    int episode = 0;
    int step = 0;
    Vector obs;
    drift::ActionVector action{};
    int bin = 0;
};

struct Dataset {
    std::uint64_t seed = 0;
    int episodes = 0;
    int episode_steps = 0;
    int spatial_bins = 6;
    std::vector<TrajectoryRecord> records;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Scripted-controller episodes; episode e targets spatial bin e mod spatial_bins.
/// Executed actions carry exploration noise so the recorded states cover recoveries.
inline Dataset generate_dataset(const CalibConfig& cfg, const sim::SimConfig& sim_cfg_in = {}) {
    sim::SimConfig sim_cfg = sim_cfg_in;
    sim_cfg.spatial_bins = cfg.spatial_bins;
    Dataset ds;
    ds.seed = cfg.seed;
    ds.episodes = cfg.episodes;
    ds.episode_steps = cfg.episode_steps;
    ds.spatial_bins = cfg.spatial_bins;
    ds.records.reserve(static_cast<std::size_t>(cfg.episodes) * static_cast<std::size_t>(cfg.episode_steps));
    for (int e = 0; e < cfg.episodes; ++e) {
        Rng rng(derive_seed(cfg.seed, "dataset-episode", static_cast<std::uint64_t>(e)));
        const auto task = sim::sample_task(rng, e % cfg.spatial_bins, sim_cfg);
        auto state = sim::initial_state(rng, sim_cfg);
        for (int t = 0; t < cfg.episode_steps; ++t) {
            TrajectoryRecord r;
            r.episode = e;
            r.step = t;
            r.bin = task.bin;
            r.obs = sim::observe(state, task);
            r.action = sim::expert_action(state, task, sim_cfg);
            // Labels stay clean; the executed action is perturbed to widen state coverage.
            drift::ActionVector executed = r.action;
            for (auto& a : executed) a += sim_cfg.exploration_noise * rng.normal();
            sim::step(state, executed);
            ds.records.push_back(std::move(r));
        }
    }
    return ds;
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
    nlohmann::ordered_json header;
    header["schema"] = kDatasetSchema;
    header["version"] = kDatasetVersion;
    header["seed"] = ds.seed;
    header["episodes"] = ds.episodes;
    header["episode_steps"] = ds.episode_steps;
    header["spatial_bins"] = ds.spatial_bins;
    header["obs_dim"] = sim::kObsDim;
    header["action_dim"] = drift::kActionDim;
    out << header.dump() << '\n';
    for (const auto& r : ds.records) {
        nlohmann::ordered_json j;
        j["episode"] = r.episode;
        j["step"] = r.step;
        j["bin"] = r.bin;
        j["obs"] = r.obs;
        j["action"] = r.action;
        out << j.dump() << '\n';
    }
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DatasetError("cannot open '" + path + "' for writing");
    write_dataset(f, ds);
    if (!f) throw DatasetError("write failure on '" + path + "'");
}

inline Dataset read_dataset(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DatasetError("dataset: missing header line");
    Dataset ds;
    try {
        const auto h = nlohmann::json::parse(line);
        if (h.at("schema").get<std::string>() != kDatasetSchema) throw DatasetError("dataset: unexpected schema tag");
        if (h.at("version").get<int>() != kDatasetVersion)
            throw DatasetError("dataset: unsupported version " + std::to_string(h.at("version").get<int>()));
        ds.seed = h.at("seed").get<std::uint64_t>();
        ds.episodes = h.at("episodes").get<int>();
        ds.episode_steps = h.at("episode_steps").get<int>();
        ds.spatial_bins = h.at("spatial_bins").get<int>();
        if (h.at("obs_dim").get<std::size_t>() != sim::kObsDim) throw DatasetError("dataset: observation width mismatch");
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(std::string("dataset: malformed header: ") + e.what());
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        TrajectoryRecord r;
        try {
            const auto j = nlohmann::json::parse(line);
            r.episode = j.at("episode").get<int>();
            r.step = j.at("step").get<int>();
            r.bin = j.at("bin").get<int>();
            r.obs = j.at("obs").get<Vector>();
            const auto a = j.at("action").get<Vector>();
            if (a.size() != drift::kActionDim) throw DatasetError("action must have 7 entries");
            std::copy(a.begin(), a.end(), r.action.begin());
        } catch (const std::exception& e) {
            throw DatasetError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
        if (r.obs.size() != sim::kObsDim) throw DatasetError("dataset line " + std::to_string(lineno) + ": observation width mismatch");
        if (r.bin < 0 || r.bin >= ds.spatial_bins) throw DatasetError("dataset line " + std::to_string(lineno) + ": bin index out of range");
        if (!all_finite(r.action) || !all_finite(r.obs)) throw DatasetError("dataset line " + std::to_string(lineno) + ": non-finite value");
        ds.records.push_back(std::move(r));
    }
    if (ds.records.empty()) throw DatasetError("dataset: no records");
    return ds;
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DatasetError("cannot open dataset '" + path + "'");
    return read_dataset(f);
}

/// Spatially balanced calibration subset: each bin's records are shuffled with a
/// seeded permutation, then bins are visited round-robin until `count` records are taken.
inline std::vector<const TrajectoryRecord*> select_calibration(const Dataset& ds, std::size_t count, std::uint64_t seed) {
    std::vector<std::vector<const TrajectoryRecord*>> bins(static_cast<std::size_t>(ds.spatial_bins));
    for (const auto& r : ds.records) bins.at(static_cast<std::size_t>(r.bin)).push_back(&r);
    for (std::size_t b = 0; b < bins.size(); ++b) {
        std::mt19937_64 eng(derive_seed(seed, "calibration-order", b));
        auto& v = bins[b];
        // Fisher-Yates with an explicit draw so the order does not depend on the library's shuffle.
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[eng() % i]);
    }
    std::vector<const TrajectoryRecord*> out;
    std::vector<std::size_t> cursor(bins.size(), 0);
    while (out.size() < count) {
        bool progressed = false;
        for (std::size_t b = 0; b < bins.size() && out.size() < count; ++b) {
            if (cursor[b] < bins[b].size()) {
                out.push_back(bins[b][cursor[b]++]);
                progressed = true;
            }
        }
        if (!progressed) break;
    }
    return out;
}

}  // namespace dptq
