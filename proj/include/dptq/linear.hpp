// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <concepts>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dptq/linalg.hpp"
#include "dptq/quantizer.hpp"

namespace dptq {

/// z -> z + U (V^T z) + bias. Costs O(d r) per application; I + U V^T is never formed.
struct LowRankAffine {
    Matrix u;  // d x r
    Matrix v;  // d x r
    Vector bias;

    std::size_t dim() const noexcept { return u.rows(); }
    std::size_t rank() const noexcept { return u.cols(); }

    void apply(std::span<double> z) const {
        if (z.size() != dim()) throw std::invalid_argument("LowRankAffine: dimension mismatch");
        const Vector proj = matvec_transposed(v, z);  // r
        const Vector lift = matvec(u, proj);          // d
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += lift[i] + bias[i];
    }

    /// Dense I + U V^T, for diagnostics and tests only.
    Matrix dense() const {
        Matrix m = u * v.transpose();
        for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += 1.0;
        return m;
    }
};

/// Dense layer y = W x + b with optional simulated quantization state:
/// grouped integer weights or a bf16 grid, an 8-bit input quantizer, and a
/// fused low-rank post-affine produced by compensation folding.
class Linear {
public:
    Linear() = default;
    Linear(std::string name, Matrix weight, Vector bias) : name_(std::move(name)), weight_(std::move(weight)), bias_(std::move(bias)) {
        if (bias_.size() != weight_.rows()) throw std::invalid_argument("Linear '" + name_ + "': bias length != rows");
        refresh();
    }

    const std::string& name() const noexcept { return name_; }
    Precision precision() const noexcept { return precision_; }
    std::size_t in_dim() const noexcept { return dense_.cols(); }
    std::size_t out_dim() const noexcept { return dense_.rows(); }

    /// Weights as used by the forward pass.
    const Matrix& effective() const noexcept { return dense_; }
    const Matrix& stored_weight() const noexcept { return weight_; }
    const Vector& row_scale() const noexcept { return row_scale_; }
    const std::optional<QuantizedTensor>& packed() const noexcept { return packed_; }
    const Vector& bias() const noexcept { return bias_; }
    const std::optional<ActivationQuantizer>& input_quant() const noexcept { return input_quant_; }
    const std::optional<LowRankAffine>& post() const noexcept { return post_; }

    void set_weight(Matrix w) {
        if (w.rows() != bias_.size()) throw std::invalid_argument("Linear '" + name_ + "': weight rows != bias length");
        weight_ = std::move(w);
        row_scale_.clear();
        packed_.reset();
        precision_ = Precision::kFull;
        refresh();
    }
    void set_bias(Vector b) {
        if (b.size() != out_dim()) throw std::invalid_argument("Linear '" + name_ + "': bias length mismatch");
        bias_ = std::move(b);
    }
    void set_input_quant(std::optional<ActivationQuantizer> q) { input_quant_ = q; }
    void set_post(std::optional<LowRankAffine> p) {
        if (p && (p->dim() != out_dim() || p->v.rows() != out_dim() || p->bias.size() != out_dim()))
            throw std::invalid_argument("Linear '" + name_ + "': post-affine dimension mismatch");
        post_ = std::move(p);
    }

    /// Restores a serialized state verbatim.
    void restore(Precision p, Matrix weight, Vector row_scale, std::optional<QuantizedTensor> packed, Vector bias) {
        precision_ = p;
        weight_ = std::move(weight);
        row_scale_ = std::move(row_scale);
        packed_ = std::move(packed);
        bias_ = std::move(bias);
        refresh();
    }

    /// Re-expresses the current effective weights at precision `p`.
    void quantize(Precision p, const QuantSpec& spec = {}) {
        Matrix w = dense_;
        switch (p) {
            case Precision::kFull:
                return;
            case Precision::kHigh16:
                weight_ = snap_bf16(std::move(w));
                row_scale_.clear();
                packed_.reset();
                break;
            case Precision::kW4:
            case Precision::kW8: {
                QuantSpec s = spec;
                s.bits = p == Precision::kW4 ? 4 : 8;
                packed_ = quantize_rows(w, s);
                weight_ = Matrix();
                row_scale_.clear();
                break;
            }
        }
        precision_ = p;
        refresh();
    }

    /// Multiplies output row i by g[i] inside the storage: group scales for
    /// integer weights, the per-row scale otherwise. Bias is scaled too.
    void scale_rows(std::span<const double> g) {
        if (g.size() != out_dim()) throw std::invalid_argument("Linear '" + name_ + "': row gain length mismatch");
        if (packed_) {
            const std::size_t gpr = packed_->groups_per_row();
            for (std::size_t r = 0; r < packed_->rows; ++r)
                for (std::size_t k = 0; k < gpr; ++k) packed_->scales[r * gpr + k] *= g[r];
        } else {
            if (row_scale_.empty()) row_scale_.assign(out_dim(), 1.0);
            for (std::size_t r = 0; r < row_scale_.size(); ++r) row_scale_[r] *= g[r];
        }
        for (std::size_t r = 0; r < bias_.size(); ++r) bias_[r] *= g[r];
        refresh();
    }

    /// Output before the fused post-affine.
    Vector forward_core(std::span<const double> x) const {
        if (x.size() != in_dim()) {
            throw std::invalid_argument("Linear '" + name_ + "': expected input of length " + std::to_string(in_dim()) +
                                        ", got " + std::to_string(x.size()));
        }
        Vector y;
        if (input_quant_) {
            Vector xq(x.begin(), x.end());
            input_quant_->apply(xq);
            y = matvec(dense_, xq);
        } else {
            y = matvec(dense_, x);
        }
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias_[i];
        return y;
    }

    Vector forward(std::span<const double> x) const {
        Vector y = forward_core(x);
        if (post_) post_->apply(y);
        return y;
    }

    void refresh() {
        if (packed_) {
            dense_ = dequantize(*packed_);
        } else {
            dense_ = weight_;
            if (!row_scale_.empty()) {
                if (row_scale_.size() != dense_.rows()) throw std::invalid_argument("Linear '" + name_ + "': row_scale length mismatch");
                for (std::size_t r = 0; r < dense_.rows(); ++r)
                    for (auto& v : dense_.row(r)) v *= row_scale_[r];
            }
        }
        if (dense_.rows() != bias_.size()) throw std::invalid_argument("Linear '" + name_ + "': weight/bias shape mismatch");
    }

private:
    std::string name_;
    Precision precision_ = Precision::kFull;
    Matrix weight_;
    Vector row_scale_;
    std::optional<QuantizedTensor> packed_;
    Vector bias_;
    std::optional<ActivationQuantizer> input_quant_;
    std::optional<LowRankAffine> post_;
    Matrix dense_;
};

/// Models whose quantizable layers are exposed as a mutable sequence of Linear.
template <class M>
concept LayeredModel = requires(M& m) {
    { m.layers() } -> std::same_as<std::vector<Linear>&>;
};

/// Applies a bit-width map: W4/W8 layers become grouped integer tensors,
/// HIGH16 layers are snapped to the bf16 grid, layers absent from the map stay as they are.
template <LayeredModel M>
M quantize_model(M model, const BitWidthMap& bitmap, const QuantSpec& spec) {
    for (const auto& [name, precision] : bitmap.entries()) {
        auto& layers = model.layers();
        auto it = std::find_if(layers.begin(), layers.end(), [&](const Linear& l) { return l.name() == name; });
        if (it == layers.end()) throw std::invalid_argument("quantize_model: unknown layer id '" + name + "' in bit-width map");
        it->quantize(precision, spec);
    }
    return model;
}

}  // namespace dptq
