// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "compt/tensor.hpp"

namespace compt {

/// Two-layer per-token MLP: row -> gelu(row W1 + b1) W2 + b2, all layers d wide.
struct EncoderParams {
    Tensor w1;
    Tensor b1;
    Tensor w2;
    Tensor b2;

    [[nodiscard]] std::size_t width() const { return b1.numel(); }
    [[nodiscard]] std::vector<Tensor> tensors() const { return {w1, b1, w2, b2}; }

    /// Kaiming-normal weights, zero biases.
    template <class Engine>
    static EncoderParams init(std::size_t d, Engine& engine, bool requires_grad = true) {
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(d)));
        auto draw = [&] {
            std::vector<double> v(d * d);
            for (auto& x : v) x = normal(engine);
            return Tensor::from({d, d}, std::move(v), requires_grad);
        };
        EncoderParams p;
        p.w1 = draw();
        p.b1 = Tensor::zeros({d}, requires_grad);
        p.w2 = draw();
        p.b2 = Tensor::zeros({d}, requires_grad);
        return p;
    }
};

/// Encodes each prompt token independently; no mixing across rows.
inline Tensor encode(const EncoderParams& params, const Tensor& prompt) {
    if (prompt.dim() != 2 || prompt.cols() != params.width()) {
        fail(ErrorCode::kShapeMismatch, "encode: prompt " + shape_str(prompt.shape()) + " for encoder width " +
                                            std::to_string(params.width()));
    }
    const Tensor hidden = gelu(add_bias(matmul(prompt, params.w1), params.b1));
    return add_bias(matmul(hidden, params.w2), params.b2);
}

}  // namespace compt
