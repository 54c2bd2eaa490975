// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "compt/rng.hpp"
#include "compt/tensor.hpp"

namespace compt {

/// Linear temperature decay from tau_start at step 0 to tau_end at total_steps.
struct TemperatureSchedule {
    double tau_start = 5.0;
    double tau_end = 1e-3;
    std::int64_t total_steps = 1;
};

/// Temperature at `step`. Out-of-range steps are clamped to the endpoints and
/// reported through `warning` when given.
inline double anneal(const TemperatureSchedule& schedule, std::int64_t step, std::string* warning = nullptr) {
    const std::int64_t total = std::max<std::int64_t>(schedule.total_steps, 1);
    if (step < 0 || step > total) {
        if (warning) {
            *warning = "anneal: step " + std::to_string(step) + " outside [0, " + std::to_string(total) +
                       "], clamped";
        }
        step = std::clamp<std::int64_t>(step, 0, total);
    }
    if (step == total) return schedule.tau_end;
    const double frac = static_cast<double>(step) / static_cast<double>(total);
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac;
}

/// N×M learnable logits plus the current temperature.
struct RouterState {
    Tensor logits;
    double temperature = 5.0;

    [[nodiscard]] std::size_t num_tasks() const { return logits.rows(); }
    [[nodiscard]] std::size_t num_sources() const { return logits.cols(); }

    static RouterState zeros(std::size_t num_tasks, std::size_t num_sources, bool requires_grad = true) {
        return {Tensor::zeros({num_tasks, num_sources}, requires_grad), 5.0};
    }
};

namespace detail {

inline Tensor logits_row(const RouterState& state, std::size_t task) {
    if (task >= state.num_tasks()) {
        fail(ErrorCode::kOutOfRange, "router: task " + std::to_string(task) + " of " +
                                         std::to_string(state.num_tasks()));
    }
    return slice_rows(state.logits, task, task + 1);
}

}  // namespace detail

/// Relaxed-Bernoulli draws before normalization:
/// sigmoid((w + log(u / (1 - u))) / tau). Differentiable in the logits.
inline Tensor relaxed_bernoulli(const RouterState& state, std::size_t task, std::span<const double> u) {
    const Tensor row = detail::logits_row(state, task);
    if (u.size() != row.numel()) {
        fail(ErrorCode::kShapeMismatch, "relaxed_bernoulli: " + std::to_string(u.size()) + " noise draws for " +
                                            std::to_string(row.numel()) + " sources");
    }
    if (!(state.temperature > 0.0)) fail(ErrorCode::kDomain, "relaxed_bernoulli: temperature must be positive");
    std::vector<double> noise(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) {
        if (!(u[j] > 0.0 && u[j] < 1.0)) {
            fail(ErrorCode::kDomain, "relaxed_bernoulli: noise " + std::to_string(u[j]) + " not in (0,1)");
        }
        noise[j] = std::log(u[j]) - std::log1p(-u[j]);
    }
    const Tensor shifted = add(row, Tensor::from(row.shape(), std::move(noise)));
    return sigmoid(scale(shifted, 1.0 / state.temperature));
}

/// Training-time weights: relaxed-Bernoulli samples, then softmax across sources.
inline Tensor sample_weights(const RouterState& state, std::size_t task, std::span<const double> u) {
    return softmax(relaxed_bernoulli(state, task, u), 1);
}

/// Noise for one (step, task) pair, one draw per source.
inline std::vector<double> router_noise(const CounterRng& rng, std::uint64_t step, std::uint64_t task,
                                        std::size_t num_sources) {
    std::vector<double> u(num_sources);
    for (std::size_t j = 0; j < num_sources; ++j) u[j] = rng.uniform_open(0x524F55544552ULL, step, task, j);
    return u;
}

/// Inference-time weights: softmax of the learned logits, no sampling.
inline Tensor inference_weights(const RouterState& state, std::size_t task) {
    return softmax(detail::logits_row(state, task), 1);
}

/// Uniform 1/M weights; carries no gradient path to the logits.
inline Tensor constant_weights(std::size_t num_sources) {
    if (num_sources == 0) fail(ErrorCode::kInvalidArgument, "constant_weights: no sources");
    return Tensor::full({1, num_sources}, 1.0 / static_cast<double>(num_sources));
}

}  // namespace compt
