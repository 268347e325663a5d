// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dptq/linear.hpp"
#include "dptq/policy.hpp"
#include "dptq/quantizer.hpp"

// Model container: "DPTQMDL1", u64 LE manifest length, UTF-8 JSON manifest, then
// little-endian f32 blobs. Blob references in the manifest are {offset, count}
// with offsets in bytes from the start of the blob section.
namespace dptq {

inline constexpr char kContainerMagic[8] = {'D', 'P', 'T', 'Q', 'M', 'D', 'L', '1'};
inline constexpr int kContainerVersion = 1;

class ContainerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

class BlobWriter {
public:
    nlohmann::ordered_json put(std::span<const double> values) {
        nlohmann::ordered_json ref;
        ref["offset"] = bytes_.size();
        ref["count"] = values.size();
        for (double v : values) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int k = 0; k < 4; ++k) bytes_.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
        }
        return ref;
    }
    const std::string& bytes() const noexcept { return bytes_; }

private:
    std::string bytes_;
};

class BlobReader {
public:
    explicit BlobReader(std::string bytes) : bytes_(std::move(bytes)) {}
    Vector get(const nlohmann::json& ref, std::size_t expected) const {
        const auto offset = ref.at("offset").get<std::size_t>();
        const auto count = ref.at("count").get<std::size_t>();
        if (count != expected)
            throw ContainerError("container: blob holds " + std::to_string(count) + " values, expected " + std::to_string(expected));
        if (offset % 4 != 0 || offset + 4 * count > bytes_.size()) throw ContainerError("container: blob reference out of range");
        Vector out(count);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int k = 0; k < 4; ++k)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[offset + 4 * i + k])) << (8 * k);
            out[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
        return out;
    }

private:
    std::string bytes_;
};

inline nlohmann::ordered_json policy_config_json(const PolicyConfig& c) {
    nlohmann::ordered_json j;
    j["obs_dim"] = c.obs_dim;
    j["instr_dim"] = c.instr_dim;
    j["backbone_hidden"] = c.backbone_hidden;
    j["z_dim"] = c.z_dim;
    j["hidden"] = c.hidden;
    j["mlp"] = c.mlp;
    j["blocks"] = c.blocks;
    j["temb_dim"] = c.temb_dim;
    j["steps"] = c.steps;
    j["beta_start"] = c.beta_start;
    j["beta_end"] = c.beta_end;
    j["action_scale"] = c.action_scale;
    return j;
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.obs_dim = j.at("obs_dim").get<std::size_t>();
    c.instr_dim = j.at("instr_dim").get<std::size_t>();
    c.backbone_hidden = j.at("backbone_hidden").get<std::size_t>();
    c.z_dim = j.at("z_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.mlp = j.at("mlp").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.temb_dim = j.at("temb_dim").get<std::size_t>();
    c.steps = j.at("steps").get<int>();
    c.beta_start = j.at("beta_start").get<double>();
    c.beta_end = j.at("beta_end").get<double>();
    c.action_scale = j.at("action_scale").get<double>();
    return c;
}

inline Vector to_vector(std::span<const std::int8_t> codes) { return Vector(codes.begin(), codes.end()); }

}  // namespace detail

/// Serializes `policy` with an arbitrary JSON `metadata` block (bit map, provenance, diagnostics).
inline std::string serialize_model(const Policy& policy, const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object()) {
    detail::BlobWriter blobs;
    nlohmann::ordered_json m;
    m["format"] = "dptq-model";
    m["version"] = kContainerVersion;
    m["policy"] = detail::policy_config_json(policy.config());
    m["instruction"] = blobs.put(policy.instruction());
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& l : policy.layers()) {
        nlohmann::ordered_json e;
        e["name"] = l.name();
        e["rows"] = l.out_dim();
        e["cols"] = l.in_dim();
        e["precision"] = std::string(to_string(l.precision()));
        if (l.packed()) {
            const auto& q = *l.packed();
            e["quant"] = {{"bits", q.bits}, {"group_size", q.group_size}};
            e["quant"]["codes"] = blobs.put(detail::to_vector(q.codes));
            e["quant"]["scales"] = blobs.put(q.scales);
        } else {
            e["weight"] = blobs.put(l.stored_weight().values());
            if (!l.row_scale().empty()) e["row_scale"] = blobs.put(l.row_scale());
        }
        e["bias"] = blobs.put(l.bias());
        if (l.input_quant()) e["input_scale"] = static_cast<double>(static_cast<float>(l.input_quant()->scale));
        if (l.post()) {
            const auto& p = *l.post();
            e["post"] = {{"rank", p.rank()}};
            e["post"]["u"] = blobs.put(p.u.values());
            e["post"]["v"] = blobs.put(p.v.values());
            e["post"]["bias"] = blobs.put(p.bias);
        }
        layers.push_back(std::move(e));
    }
    m["layers"] = std::move(layers);
    m["metadata"] = metadata;

    const std::string manifest = m.dump();
    std::string out(kContainerMagic, sizeof(kContainerMagic));
    const auto len = static_cast<std::uint64_t>(manifest.size());
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((len >> (8 * k)) & 0xffu));
    out += manifest;
    out += blobs.bytes();
    return out;
}

struct LoadedModel {
    Policy policy;
    nlohmann::json manifest;
    const nlohmann::json& metadata() const { return manifest.at("metadata"); }
};

inline LoadedModel deserialize_model(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0) throw ContainerError("container: bad magic");
    std::uint64_t len = 0;
    for (int k = 0; k < 8; ++k) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + k])) << (8 * k);
    if (16 + len > bytes.size()) throw ContainerError("container: truncated manifest");
    LoadedModel out;
    try {
        out.manifest = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw ContainerError(std::string("container: malformed manifest: ") + e.what());
    }
    const auto& m = out.manifest;
    if (m.value("format", "") != "dptq-model" || m.value("version", 0) != kContainerVersion)
        throw ContainerError("container: unsupported format or version");
    const detail::BlobReader blobs(bytes.substr(16 + len));
    try {
        const PolicyConfig cfg = detail::policy_config_from_json(m.at("policy"));
        Vector instruction = blobs.get(m.at("instruction"), cfg.instr_dim);
        std::vector<Linear> layers;
        for (const auto& e : m.at("layers")) {
            const auto rows = e.at("rows").get<std::size_t>(), cols = e.at("cols").get<std::size_t>();
            Vector bias = blobs.get(e.at("bias"), rows);
            Linear l(e.at("name").get<std::string>(), Matrix(rows, cols), Vector(rows, 0.0));
            const Precision p = precision_from_string(e.at("precision").get<std::string>());
            if (e.contains("quant")) {
                const auto& qj = e.at("quant");
                QuantizedTensor q;
                q.rows = rows;
                q.cols = cols;
                q.bits = qj.at("bits").get<int>();
                q.group_size = qj.at("group_size").get<std::size_t>();
                for (double c : blobs.get(qj.at("codes"), rows * cols)) q.codes.push_back(static_cast<std::int8_t>(c));
                q.scales = blobs.get(qj.at("scales"), rows * q.groups_per_row());
                q.validate();
                l.restore(p, Matrix(), {}, std::move(q), std::move(bias));
            } else {
                Matrix w(rows, cols, blobs.get(e.at("weight"), rows * cols));
                Vector rs = e.contains("row_scale") ? blobs.get(e.at("row_scale"), rows) : Vector{};
                l.restore(p, std::move(w), std::move(rs), std::nullopt, std::move(bias));
            }
            if (e.contains("input_scale")) l.set_input_quant(ActivationQuantizer{e.at("input_scale").get<double>()});
            if (e.contains("post")) {
                const auto& pj = e.at("post");
                const auto r = pj.at("rank").get<std::size_t>();
                LowRankAffine post{Matrix(rows, r, blobs.get(pj.at("u"), rows * r)), Matrix(rows, r, blobs.get(pj.at("v"), rows * r)),
                                   blobs.get(pj.at("bias"), rows)};
                l.set_post(std::move(post));
            }
            layers.push_back(std::move(l));
        }
        out.policy = Policy::assemble(cfg, std::move(instruction), std::move(layers));
    } catch (const nlohmann::json::exception& e) {
        throw ContainerError(std::string("container: malformed layer entry: ") + e.what());
    }
    return out;
}

inline void save_model(const std::string& path, const Policy& policy, const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object()) {
    const std::string bytes = serialize_model(policy, metadata);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ContainerError("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ContainerError("write failure on '" + path + "'");
}

inline LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContainerError("cannot open model container '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return deserialize_model(ss.str());
}

}  // namespace dptq
