// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named task-family presets used by the CLI and the experiment suites.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "compt/error.hpp"
#include "compt/tasks.hpp"

namespace compt {

inline constexpr std::uint64_t kDefaultFamilySeed = 2026;

/// "transfer": two triples whose anchors point in opposite directions, so
/// every cross-triple pair conflicts.
/// "inclusion": the same layout with a fourth alpha task held back as the
/// extra task of an inclusion study.
/// "shared": one triple with a common rule and no spread.
inline FamilySpec family_preset(std::string_view name) {
    FamilySpec f;
    f.name = std::string(name);
    auto group = [](std::string n, std::size_t size, std::string anchor, double spread) {
        GroupSpec g;
        g.name = std::move(n);
        g.size = size;
        g.anchor = std::move(anchor);
        g.spread_deg = spread;
        return g;
    };
    if (name == "transfer") {
        f.groups = {group("alpha", 3, "random", 10.0), group("beta", 3, "-alpha", 10.0)};
    } else if (name == "inclusion") {
        f.groups = {group("alpha", 4, "random", 10.0), group("beta", 3, "-alpha", 10.0)};
    } else if (name == "shared") {
        f.groups = {group("shared", 3, "random", 0.0)};
    } else {
        fail(ErrorCode::kInvalidArgument, "unknown family preset '" + std::string(name) + "'");
    }
    return f;
}

inline const std::vector<std::string>& family_preset_names() {
    static const std::vector<std::string> names{"transfer", "inclusion", "shared"};
    return names;
}

/// Rules of every preset at `seed`, for excluding them from pretraining.
inline std::vector<std::vector<double>> preset_rules(const TokenWorld& world, std::uint64_t seed) {
    std::vector<std::vector<double>> rules;
    for (const auto& name : family_preset_names()) {
        FamilySpec spec = family_preset(name);
        spec.train_pool = 1;
        spec.dev_size = 1;
        spec.test_size = 1;
        for (const auto& t : generate_task_family(world, seed, spec).tasks) rules.push_back(t.spec.rule);
    }
    return rules;
}

}  // namespace compt
