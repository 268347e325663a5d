// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dptq/linalg.hpp"

namespace dptq {

/// Group-wise symmetric weight quantization parameters.
struct QuantSpec {
    int bits = 4;
    std::size_t group_size = 32;
    bool symmetric = true;

    int qmax() const noexcept { return (1 << (bits - 1)) - 1; }

    void validate() const {
        if (bits != 4 && bits != 8) throw std::invalid_argument("QuantSpec: bits must be 4 or 8, got " + std::to_string(bits));
        if (group_size == 0) throw std::invalid_argument("QuantSpec: group_size must be positive");
        // Codes carry no zero point; only the symmetric scheme is representable.
        if (!symmetric) throw std::invalid_argument("QuantSpec: asymmetric quantization is not supported");
    }
};

/// Integer codes with one scale per (row, group). Groups run along each row;
/// the last group of a row holds the remainder when cols % group_size != 0.
struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = 32;
    int bits = 4;
    std::vector<std::int8_t> codes;  // rows * cols, row-major
    std::vector<double> scales;      // rows * groups_per_row()

    std::size_t groups_per_row() const noexcept { return (cols + group_size - 1) / group_size; }
    double scale_at(std::size_t row, std::size_t col) const noexcept {
        return scales[row * groups_per_row() + col / group_size];
    }

    void validate() const {
        if (codes.size() != rows * cols) throw std::invalid_argument("QuantizedTensor: code count does not match shape");
        if (group_size == 0 || scales.size() != rows * groups_per_row())
            throw std::invalid_argument("QuantizedTensor: scale count does not match shape/group size");
        const int qmax = (1 << (bits - 1)) - 1;
        for (auto c : codes)
            if (c < -qmax || c > qmax) throw std::invalid_argument("QuantizedTensor: code outside symmetric range");
        if (!all_finite(scales)) throw std::invalid_argument("QuantizedTensor: non-finite scale");
    }
};

namespace detail {

inline void quantize_span(std::span<const double> v, const QuantSpec& spec, std::span<std::int8_t> codes, double& scale) {
    const double amax = max_abs(v);
    const int qmax = spec.qmax();
    // All-zero group: unit scale, zero codes.
    scale = amax > 0.0 ? amax / qmax : 1.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        // nearbyint honours the default FE_TONEAREST mode: round half to even.
        const double c = std::clamp(std::nearbyint(v[i] / scale), static_cast<double>(-qmax), static_cast<double>(qmax));
        codes[i] = static_cast<std::int8_t>(c);
    }
}

}  // namespace detail

/// Quantizes every row of `w` group-wise.
inline QuantizedTensor quantize_rows(const Matrix& w, const QuantSpec& spec) {
    spec.validate();
    if (!all_finite(w.values())) throw std::invalid_argument("quantize: non-finite weights");
    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.group_size = spec.group_size;
    q.bits = spec.bits;
    q.codes.resize(w.size());
    q.scales.resize(q.rows * q.groups_per_row());
    for (std::size_t r = 0; r < w.rows(); ++r) {
        auto row = w.row(r);
        for (std::size_t g = 0; g < q.groups_per_row(); ++g) {
            const std::size_t begin = g * spec.group_size;
            const std::size_t len = std::min(spec.group_size, w.cols() - begin);
            detail::quantize_span(row.subspan(begin, len), spec,
                                  std::span<std::int8_t>(q.codes.data() + r * w.cols() + begin, len),
                                  q.scales[r * q.groups_per_row() + g]);
        }
    }
    return q;
}

/// Quantizes a single vector (one row, possibly several groups).
inline QuantizedTensor quantize_group(std::span<const double> values, const QuantSpec& spec) {
    if (values.empty()) throw std::invalid_argument("quantize_group: empty input");
    return quantize_rows(Matrix(1, values.size(), std::vector<double>(values.begin(), values.end())), spec);
}

inline Matrix dequantize(const QuantizedTensor& q) {
    q.validate();
    Matrix m(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r)
        for (std::size_t c = 0; c < q.cols; ++c) m(r, c) = q.codes[r * q.cols + c] * q.scale_at(r, c);
    return m;
}

/// Rounds to the bfloat16 grid (8 significant bits, round-to-nearest-even).
inline double snap_bf16(double x) {
    if (!std::isfinite(x)) return x;
    const auto f = static_cast<float>(x);
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7fffu + lsb;
    bits &= 0xffff0000u;
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline Matrix snap_bf16(Matrix m) {
    for (auto& v : m.values()) v = snap_bf16(v);
    return m;
}

/// Per-tensor symmetric 8-bit activation quantizer with a calibrated range.
struct ActivationQuantizer {
    double scale = 1.0;

    static ActivationQuantizer from_range(double absmax) {
        return ActivationQuantizer{absmax > 0.0 ? absmax / 127.0 : 1.0};
    }
    double operator()(double x) const noexcept {
        return std::clamp(std::nearbyint(x / scale), -127.0, 127.0) * scale;
    }
    void apply(std::span<double> x) const noexcept {
        for (auto& v : x) v = (*this)(v);
    }
};

enum class Precision { kFull, kHigh16, kW4, kW8 };

inline std::string_view to_string(Precision p) {
    switch (p) {
        case Precision::kFull: return "fp";
        case Precision::kHigh16: return "high16";
        case Precision::kW4: return "w4";
        case Precision::kW8: return "w8";
    }
    return "?";
}

inline Precision precision_from_string(std::string_view s) {
    if (s == "fp") return Precision::kFull;
    if (s == "high16") return Precision::kHigh16;
    if (s == "w4") return Precision::kW4;
    if (s == "w8") return Precision::kW8;
    throw std::invalid_argument("unknown precision tag '" + std::string(s) + "'");
}

/// Ordered layer -> precision assignment.
class BitWidthMap {
public:
    using Entry = std::pair<std::string, Precision>;

    BitWidthMap() = default;
    explicit BitWidthMap(std::vector<Entry> entries) : entries_(std::move(entries)) {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (entries_[i].first == entries_[j].first)
                    throw std::invalid_argument("BitWidthMap: duplicate layer '" + entries_[i].first + "'");
    }

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    std::optional<Precision> find(std::string_view layer) const {
        for (const auto& [name, p] : entries_)
            if (name == layer) return p;
        return std::nullopt;
    }
    Precision at(std::string_view layer) const {
        if (auto p = find(layer)) return *p;
        throw std::out_of_range("BitWidthMap: no entry for layer '" + std::string(layer) + "'");
    }
    void set(std::string_view layer, Precision p) {
        for (auto& [name, q] : entries_)
            if (name == layer) {
                q = p;
                return;
            }
        entries_.emplace_back(std::string(layer), p);
    }
    std::size_t count(Precision p) const {
        return static_cast<std::size_t>(
            std::count_if(entries_.begin(), entries_.end(), [p](const Entry& e) { return e.second == p; }));
    }

    static BitWidthMap uniform(std::span<const std::string> layers, Precision p) {
        std::vector<Entry> e;
        for (const auto& l : layers) e.emplace_back(l, p);
        return BitWidthMap(std::move(e));
    }

private:
    std::vector<Entry> entries_;
};

struct LayerShape {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

struct MemoryReport {
    std::uint64_t total_bits = 0;
    std::uint64_t baseline_bits = 0;  // every layer at 16 bits
    double reduction_fraction = 0.0;
};

/// Analytic weight storage: 16 bits per HIGH16 weight; `bits` per quantized weight
/// plus one 16-bit scale per group.
inline MemoryReport memory_report(std::span<const LayerShape> layers, const BitWidthMap& bitmap, std::size_t group_size = 32) {
    MemoryReport r;
    for (const auto& l : layers) {
        const std::uint64_t n = static_cast<std::uint64_t>(l.rows) * l.cols;
        r.baseline_bits += 16 * n;
        const Precision p = bitmap.at(l.name);
        switch (p) {
            case Precision::kFull:
            case Precision::kHigh16: r.total_bits += 16 * n; break;
            case Precision::kW4:
            case Precision::kW8: {
                const std::uint64_t groups = static_cast<std::uint64_t>(l.rows) * ((l.cols + group_size - 1) / group_size);
                r.total_bits += (p == Precision::kW4 ? 4 : 8) * n + 16 * groups;
                break;
            }
        }
    }
    r.reduction_fraction = r.baseline_bits == 0 ? 0.0
                                                : 1.0 - static_cast<double>(r.total_bits) / static_cast<double>(r.baseline_bits);
    return r;
}

}  // namespace dptq
