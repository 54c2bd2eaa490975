// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Target-prompt construction from an encoded private prompt and weighted,
// encoded source prompts.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "compt/tensor.hpp"

namespace compt {

enum class CompositionMethod { kPT, kSSUM, kMSUM, kMCAT };

inline std::string_view method_name(CompositionMethod m) {
    switch (m) {
        case CompositionMethod::kPT: return "pt";
        case CompositionMethod::kSSUM: return "ssum";
        case CompositionMethod::kMSUM: return "msum";
        case CompositionMethod::kMCAT: return "mcat";
    }
    return "?";
}

inline CompositionMethod parse_method(std::string_view tag) {
    if (tag == "pt" || tag == "PT") return CompositionMethod::kPT;
    if (tag == "ssum" || tag == "SSUM") return CompositionMethod::kSSUM;
    if (tag == "msum" || tag == "MSUM") return CompositionMethod::kMSUM;
    if (tag == "mcat" || tag == "MCAT") return CompositionMethod::kMCAT;
    fail(ErrorCode::kInvalidArgument, "unknown composition method '" + std::string(tag) + "'");
}

inline bool uses_sources(CompositionMethod m) { return m != CompositionMethod::kPT; }

/// Number of target-prompt rows.
inline std::size_t target_length(CompositionMethod method, std::size_t num_sources, std::size_t source_len) {
    if (num_sources == 0 && method != CompositionMethod::kPT) {
        fail(ErrorCode::kInvalidArgument, "target_length: need at least one source");
    }
    return method == CompositionMethod::kMCAT ? num_sources * source_len : source_len;
}

/// Which prompt components take part in a composition. Default keeps all.
struct SourceMask {
    std::vector<bool> keep_source;
    bool keep_private = true;

    [[nodiscard]] bool keeps_everything() const {
        if (!keep_private) return false;
        for (bool k : keep_source) {
            if (!k) return false;
        }
        return true;
    }
};

/// Validates a keep set against M sources and builds the mask.
inline SourceMask mask_sources(std::size_t num_sources, const std::vector<std::size_t>& keep, bool keep_private) {
    SourceMask mask;
    mask.keep_source.assign(num_sources, false);
    mask.keep_private = keep_private;
    for (auto s : keep) {
        if (s >= num_sources) {
            fail(ErrorCode::kOutOfRange, "mask_sources: source " + std::to_string(s) + " of " +
                                             std::to_string(num_sources));
        }
        mask.keep_source[s] = true;
    }
    if (keep.empty() && !keep_private) {
        fail(ErrorCode::kInvalidArgument, "mask_sources: masking every source and the private prompt");
    }
    return mask;
}

inline void check_simplex(const Tensor& weights, std::size_t num_sources) {
    if (weights.numel() != num_sources) {
        fail(ErrorCode::kShapeMismatch, "compose: weights " + shape_str(weights.shape()) + " for " +
                                            std::to_string(num_sources) + " sources");
    }
    double total = 0.0;
    for (double w : weights.data()) {
        if (w < -1e-8 || !std::isfinite(w)) fail(ErrorCode::kInvalidArgument, "compose: negative weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-8) {
        fail(ErrorCode::kInvalidArgument, "compose: weights sum to " + std::to_string(total));
    }
}

/// Builds the target prompt.
///
///   SSUM: P_u + sum_s w_s P_s
///   MSUM: P_u * (sum_s w_s P_s)          (elementwise)
///   MCAT: P_u * cat_s(w_s P_s)           (elementwise, rows in source order)
///   PT:   P_u
///
/// With a mask, SSUM/MSUM drop masked sources and renormalize the kept
/// weights to sum to one; a masked private prompt is replaced by zeros. MCAT
/// keeps the full layout; masking there happens in the backbone's attention
/// (see prompt_row_mask).
inline Tensor compose(CompositionMethod method, const Tensor& encoded_private,
                      const std::vector<Tensor>& encoded_sources, const Tensor& weights,
                      const std::optional<SourceMask>& mask = std::nullopt) {
    if (method == CompositionMethod::kPT) return encoded_private;
    const std::size_t m_sources = encoded_sources.size();
    if (m_sources == 0) fail(ErrorCode::kInvalidArgument, "compose: no source prompts");
    check_simplex(weights, m_sources);
    const Shape& src_shape = encoded_sources.front().shape();
    for (const auto& s : encoded_sources) {
        if (s.shape() != src_shape) {
            fail(ErrorCode::kShapeMismatch, "compose: source " + shape_str(s.shape()) + " vs " + shape_str(src_shape));
        }
    }
    const std::size_t src_len = src_shape.at(0);
    const std::size_t width = src_shape.at(1);
    const std::size_t want_rows = target_length(method, m_sources, src_len);
    if (encoded_private.dim() != 2 || encoded_private.rows() != want_rows || encoded_private.cols() != width) {
        fail(ErrorCode::kShapeMismatch, "compose: private " + shape_str(encoded_private.shape()) + " but " +
                                            std::string(method_name(method)) + " needs [" +
                                            std::to_string(want_rows) + "," + std::to_string(width) + "]");
    }
    if (mask && mask->keep_source.size() != m_sources) {
        fail(ErrorCode::kShapeMismatch, "compose: mask covers " + std::to_string(mask->keep_source.size()) +
                                            " sources, have " + std::to_string(m_sources));
    }

    const bool private_kept = !mask || mask->keep_private;
    const Tensor privat = private_kept ? encoded_private : Tensor::zeros(encoded_private.shape());

    if (method == CompositionMethod::kMCAT) {
        std::vector<Tensor> blocks;
        blocks.reserve(m_sources);
        for (std::size_t s = 0; s < m_sources; ++s) blocks.push_back(mul_scalar(encoded_sources[s], pick(weights, s)));
        return mul(privat, concat_rows(blocks));
    }

    // Weighted sum over kept sources.
    std::vector<std::size_t> kept;
    for (std::size_t s = 0; s < m_sources; ++s) {
        if (!mask || mask->keep_source[s]) kept.push_back(s);
    }
    Tensor mix;
    if (kept.empty()) {
        mix = Tensor::zeros(src_shape);
    } else {
        // Renormalized weights are plain constants; isolation analysis runs
        // without gradients.
        double kept_total = 0.0;
        for (auto s : kept) kept_total += weights.at(s);
        const bool renormalize = mask && kept.size() < m_sources;
        for (auto s : kept) {
            const Tensor w = renormalize ? Tensor::scalar(weights.at(s) / kept_total) : pick(weights, s);
            Tensor term = mul_scalar(encoded_sources[s], w);
            mix = mix.defined() ? add(mix, term) : term;
        }
    }
    return method == CompositionMethod::kSSUM ? add(privat, mix) : mul(privat, mix);
}

/// Per-row key mask for the target prompt (1 = visible to the backbone).
/// Only MCAT masks rows: a masked source hides its block; a masked private
/// prompt hides nothing extra since it scales every block.
inline std::vector<std::uint8_t> prompt_row_mask(CompositionMethod method, std::size_t num_sources,
                                                 std::size_t source_len, const std::optional<SourceMask>& mask) {
    const std::size_t rows = method == CompositionMethod::kPT ? source_len
                                                              : target_length(method, num_sources, source_len);
    std::vector<std::uint8_t> out(rows, 1);
    if (method != CompositionMethod::kMCAT || !mask) return out;
    for (std::size_t s = 0; s < num_sources; ++s) {
        if (mask->keep_source.at(s)) continue;
        for (std::size_t r = s * source_len; r < (s + 1) * source_len; ++r) out[r] = 0;
    }
    return out;
}

}  // namespace compt
