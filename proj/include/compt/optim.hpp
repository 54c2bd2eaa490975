// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "compt/tensor.hpp"

namespace compt {

enum class OptimizerKind { kSgd, kAdam };

/// Tensors updated with one learning rate.
struct ParamGroup {
    std::string name;
    std::vector<Tensor> members;
    double lr = 0.0;
};

/// Per-group SGD, or Adam as a non-default option. Updates tensors in place
/// and leaves gradients untouched; call zero_grad() between steps.
class Optimizer {
public:
    Optimizer(std::vector<ParamGroup> groups, OptimizerKind kind = OptimizerKind::kSgd)
        : groups_(std::move(groups)), kind_(kind) {
        if (kind_ == OptimizerKind::kAdam) {
            for (const auto& g : groups_) {
                for (const auto& t : g.members) {
                    m_.emplace_back(t.numel(), 0.0);
                    v_.emplace_back(t.numel(), 0.0);
                }
            }
        }
    }

    void step() {
        ++steps_;
        std::size_t slot = 0;
        for (auto& g : groups_) {
            for (auto& t : g.members) {
                auto x = t.mutable_data();
                const auto grad = t.grad();
                if (grad.size() != x.size()) {
                    ++slot;
                    continue;
                }
                if (kind_ == OptimizerKind::kSgd) {
                    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= g.lr * grad[i];
                } else {
                    constexpr double kB1 = 0.9;
                    constexpr double kB2 = 0.999;
                    constexpr double kEps = 1e-8;
                    const double c1 = 1.0 - std::pow(kB1, static_cast<double>(steps_));
                    const double c2 = 1.0 - std::pow(kB2, static_cast<double>(steps_));
                    auto& m = m_[slot];
                    auto& v = v_[slot];
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        m[i] = kB1 * m[i] + (1.0 - kB1) * grad[i];
                        v[i] = kB2 * v[i] + (1.0 - kB2) * grad[i] * grad[i];
                        x[i] -= g.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
                    }
                }
                ++slot;
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_) {
            for (auto& t : g.members) t.zero_grad();
        }
    }

    [[nodiscard]] const std::vector<ParamGroup>& groups() const { return groups_; }
    [[nodiscard]] std::vector<ParamGroup>& groups() { return groups_; }

private:
    std::vector<ParamGroup> groups_;
    OptimizerKind kind_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    long steps_ = 0;
};

}  // namespace compt
