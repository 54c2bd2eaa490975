// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task suite.
//
// A fixed "world" assigns every input token a latent feature vector. A task is
// a unit rule vector in that latent space: an example is a bag of tokens and
// its label is the sign of the summed feature projection onto the rule. Tasks
// in the same group share an anchor rule up to a small rotation; a group
// anchored at the negation of another conflicts with it. Label tokens have a
// fixed polarity (first half negative, second half positive), so tasks that
// use the same pair share labels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compt/error.hpp"
#include "compt/rng.hpp"

namespace compt {

struct WorldConfig {
    std::size_t vocab = 64;
    std::size_t label_vocab = 16;
    std::size_t rule_dim = 8;
    std::size_t seq_len = 16;
    std::uint64_t world_seed = 7;

    [[nodiscard]] std::size_t input_vocab() const { return vocab - label_vocab; }
    [[nodiscard]] std::size_t num_label_pairs() const { return label_vocab / 2; }
    [[nodiscard]] std::size_t negative_label(std::size_t pair) const { return input_vocab() + pair; }
    [[nodiscard]] std::size_t positive_label(std::size_t pair) const {
        return input_vocab() + num_label_pairs() + pair;
    }
};

/// Token feature table shared by pretraining and every task.
class TokenWorld {
public:
    explicit TokenWorld(WorldConfig config) : config_(config) {
        if (config_.label_vocab < 2 || config_.label_vocab % 2 != 0 || config_.label_vocab >= config_.vocab) {
            fail(ErrorCode::kInvalidArgument, "world: label_vocab must be even and smaller than vocab");
        }
        if (config_.rule_dim == 0 || config_.seq_len == 0) {
            fail(ErrorCode::kInvalidArgument, "world: rule_dim and seq_len must be positive");
        }
        auto engine = make_engine(config_.world_seed, 0x574F524C44ULL);
        std::normal_distribution<double> normal(0.0, 1.0);
        features_.resize(config_.input_vocab() * config_.rule_dim);
        for (auto& f : features_) f = normal(engine);
    }

    [[nodiscard]] const WorldConfig& config() const { return config_; }

    [[nodiscard]] std::span<const double> feature(std::size_t token) const {
        return std::span<const double>(features_).subspan(token * config_.rule_dim, config_.rule_dim);
    }

    /// Summed token features scaled by 1/sqrt(seq_len).
    [[nodiscard]] std::vector<double> bag_features(std::span<const std::size_t> tokens) const {
        std::vector<double> out(config_.rule_dim, 0.0);
        for (auto t : tokens) {
            const auto f = feature(t);
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += f[j];
        }
        const double inv = 1.0 / std::sqrt(static_cast<double>(tokens.size()));
        for (auto& v : out) v *= inv;
        return out;
    }

    /// Projection of the bag features onto `rule`; unit variance for unit rules.
    [[nodiscard]] double score(std::span<const double> rule, std::span<const std::size_t> tokens) const {
        const auto f = bag_features(tokens);
        double s = 0.0;
        for (std::size_t j = 0; j < f.size(); ++j) s += f[j] * rule[j];
        return s;
    }

private:
    WorldConfig config_;
    std::vector<double> features_;
};

struct TaskSpec {
    std::string task_id;
    std::vector<double> rule;
    std::vector<std::size_t> label_tokens;  // {negative, positive}
    std::string group;
    double noise_rate = 0.0;
};

struct Example {
    std::vector<std::size_t> tokens;
    std::size_t label = 0;  // vocabulary id, one of the task's label tokens

    bool operator==(const Example&) const = default;
};

struct TaskData {
    TaskSpec spec;
    std::vector<Example> train;
    std::vector<Example> dev;
    std::vector<Example> test;
};

/// One related group of tasks.
///
/// `anchor` is "random" for a fresh rule, "<group>" to reuse another group's
/// anchor, or "-<group>" for its negation. `anchor_angle_deg` rotates the
/// anchor away from the referenced one; `spread_deg` rotates each member away
/// from the group anchor.
struct GroupSpec {
    std::string name;
    std::size_t size = 1;
    std::string anchor = "random";
    double anchor_angle_deg = 0.0;
    double spread_deg = 10.0;
    std::size_t label_pair = 0;
    double noise_rate = 0.0;
};

struct FamilySpec {
    std::string name = "family";
    std::vector<GroupSpec> groups;
    std::size_t train_pool = 64;
    std::size_t dev_size = 32;
    std::size_t test_size = 100;
    double min_margin = 0.25;
};

struct TaskFamily {
    WorldConfig world;
    FamilySpec spec;
    std::uint64_t seed = 0;
    std::vector<TaskData> tasks;

    [[nodiscard]] const TaskData& task(const std::string& id) const {
        for (const auto& t : tasks) {
            if (t.spec.task_id == id) return t;
        }
        fail(ErrorCode::kUnknownTask, "unknown task '" + id + "'");
    }
    [[nodiscard]] std::vector<std::string> task_ids() const {
        std::vector<std::string> ids;
        for (const auto& t : tasks) ids.push_back(t.spec.task_id);
        return ids;
    }
};

namespace detail {

inline void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
}

template <class Engine>
std::vector<double> random_unit(std::size_t dim, Engine& engine) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(engine);
    normalize(v);
    return v;
}

/// Rotates unit vector `a` by `angle_deg` towards a random orthogonal direction.
template <class Engine>
std::vector<double> rotate_random(const std::vector<double>& a, double angle_deg, Engine& engine) {
    if (angle_deg == 0.0) return a;
    auto v = random_unit(a.size(), engine);
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * v[i];
    for (std::size_t i = 0; i < a.size(); ++i) v[i] -= dot * a[i];
    normalize(v);
    const double th = angle_deg * std::acos(-1.0) / 180.0;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::cos(th) * a[i] + std::sin(th) * v[i];
    return out;
}

}  // namespace detail

/// Draws a labeled example for `spec`, rejecting bags whose score lies inside the margin.
template <class Engine>
Example draw_example(const TokenWorld& world, const TaskSpec& spec, double min_margin, Engine& engine) {
    const auto& cfg = world.config();
    std::uniform_int_distribution<std::size_t> tok(0, cfg.input_vocab() - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (;;) {
        Example ex;
        ex.tokens.resize(cfg.seq_len);
        for (auto& t : ex.tokens) t = tok(engine);
        const double s = world.score(spec.rule, ex.tokens);
        if (std::abs(s) < min_margin) continue;
        bool positive = s > 0.0;
        if (coin(engine) < spec.noise_rate) positive = !positive;
        ex.label = spec.label_tokens[positive ? 1 : 0];
        return ex;
    }
}

/// Clean label of an example under the task's stored rule.
inline std::size_t rule_label(const TokenWorld& world, const TaskSpec& spec, std::span<const std::size_t> tokens) {
    return spec.label_tokens[world.score(spec.rule, tokens) > 0.0 ? 1 : 0];
}

inline TaskFamily generate_task_family(const TokenWorld& world, std::uint64_t seed, const FamilySpec& family) {
    const auto& cfg = world.config();
    std::set<std::string> names;
    std::set<std::string> group_names;
    for (const auto& g : family.groups) {
        if (!group_names.insert(g.name).second) fail(ErrorCode::kInvalidArgument, "duplicate group '" + g.name + "'");
        if (g.size == 0) fail(ErrorCode::kInvalidArgument, "group '" + g.name + "' is empty");
        if (g.label_pair >= cfg.num_label_pairs()) {
            fail(ErrorCode::kInvalidArgument, "group '" + g.name + "' label pair out of range");
        }
        if (g.noise_rate < 0.0 || g.noise_rate >= 0.5) {
            fail(ErrorCode::kInvalidArgument, "group '" + g.name + "' noise rate outside [0, 0.5)");
        }
        for (std::size_t i = 0; i < g.size; ++i) {
            const std::string id = g.name + std::to_string(i + 1);
            if (!names.insert(id).second) fail(ErrorCode::kInvalidArgument, "duplicate task id '" + id + "'");
        }
    }

    TaskFamily out;
    out.world = cfg;
    out.spec = family;
    out.seed = seed;
    auto engine = make_engine(seed, 0x46414D494C59ULL);
    std::map<std::string, std::vector<double>> anchors;
    for (const auto& g : family.groups) {
        std::vector<double> anchor;
        if (g.anchor == "random") {
            anchor = detail::random_unit(cfg.rule_dim, engine);
        } else {
            const bool negate = !g.anchor.empty() && g.anchor.front() == '-';
            const std::string ref = negate ? g.anchor.substr(1) : g.anchor;
            const auto it = anchors.find(ref);
            if (it == anchors.end()) {
                fail(ErrorCode::kInvalidArgument, "group '" + g.name + "' references unknown or later group '" +
                                                      ref + "'");
            }
            anchor = it->second;
            if (negate) {
                for (auto& x : anchor) x = -x;
            }
        }
        anchor = detail::rotate_random(anchor, g.anchor_angle_deg, engine);
        anchors[g.name] = anchor;
        for (std::size_t i = 0; i < g.size; ++i) {
            TaskData data;
            data.spec.task_id = g.name + std::to_string(i + 1);
            data.spec.rule = detail::rotate_random(anchor, g.spread_deg, engine);
            data.spec.label_tokens = {cfg.negative_label(g.label_pair), cfg.positive_label(g.label_pair)};
            data.spec.group = g.name;
            data.spec.noise_rate = g.noise_rate;
            out.tasks.push_back(std::move(data));
        }
    }

    for (std::size_t t = 0; t < out.tasks.size(); ++t) {
        auto& data = out.tasks[t];
        auto ex_engine = make_engine(seed, 0x4558414D0000ULL + t);
        std::set<std::vector<std::size_t>> seen;
        auto fill = [&](std::vector<Example>& split, std::size_t count) {
            while (split.size() < count) {
                auto ex = draw_example(world, data.spec, family.min_margin, ex_engine);
                if (!seen.insert(ex.tokens).second) continue;
                split.push_back(std::move(ex));
            }
        };
        fill(data.train, family.train_pool);
        fill(data.dev, family.dev_size);
        fill(data.test, family.test_size);
    }
    return out;
}

/// k examples from the task's training pool, balanced across labels as far as k allows.
inline std::vector<Example> sample_kshot(const TaskData& task, std::size_t k, std::uint64_t seed) {
    if (k == 0) fail(ErrorCode::kInvalidArgument, "sample_kshot: k must be positive");
    if (k > task.train.size()) {
        fail(ErrorCode::kInvalidArgument, "sample_kshot: k=" + std::to_string(k) + " exceeds pool of " +
                                              std::to_string(task.train.size()));
    }
    std::uint64_t key = seed;
    for (char c : task.spec.task_id) key = mix64(key ^ static_cast<unsigned char>(c));
    auto engine = make_engine(key, k);
    const auto& labels = task.spec.label_tokens;
    std::vector<std::vector<std::size_t>> by_label(labels.size());
    for (std::size_t i = 0; i < task.train.size(); ++i) {
        const auto pos = std::find(labels.begin(), labels.end(), task.train[i].label) - labels.begin();
        by_label[static_cast<std::size_t>(pos)].push_back(i);
    }
    for (auto& idx : by_label) std::shuffle(idx.begin(), idx.end(), engine);

    std::vector<std::size_t> chosen;
    std::vector<std::size_t> cursor(labels.size(), 0);
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), engine);
    while (chosen.size() < k) {
        bool progressed = false;
        for (auto l : order) {
            if (chosen.size() == k) break;
            if (cursor[l] < by_label[l].size()) {
                chosen.push_back(by_label[l][cursor[l]++]);
                progressed = true;
            }
        }
        if (!progressed) break;
    }
    std::shuffle(chosen.begin(), chosen.end(), engine);
    std::vector<Example> out;
    out.reserve(k);
    for (auto i : chosen) out.push_back(task.train[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Linear probe on latent bag features (task-relatedness oracle)
// ---------------------------------------------------------------------------

struct LinearProbe {
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<std::size_t> label_tokens;
};

/// Logistic regression by full-batch gradient descent.
inline LinearProbe train_probe(const TokenWorld& world, const TaskSpec& spec, const std::vector<Example>& data,
                               std::size_t iterations = 500, double lr = 0.5) {
    const std::size_t dim = world.config().rule_dim;
    LinearProbe probe{std::vector<double>(dim, 0.0), 0.0, spec.label_tokens};
    std::vector<std::vector<double>> feats;
    std::vector<double> ys;
    for (const auto& ex : data) {
        feats.push_back(world.bag_features(ex.tokens));
        ys.push_back(ex.label == spec.label_tokens[1] ? 1.0 : 0.0);
    }
    const double inv = 1.0 / static_cast<double>(data.size());
    for (std::size_t it = 0; it < iterations; ++it) {
        std::vector<double> gw(dim, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            double z = probe.bias;
            for (std::size_t j = 0; j < dim; ++j) z += probe.weights[j] * feats[i][j];
            const double err = 1.0 / (1.0 + std::exp(-z)) - ys[i];
            for (std::size_t j = 0; j < dim; ++j) gw[j] += err * feats[i][j];
            gb += err;
        }
        for (std::size_t j = 0; j < dim; ++j) probe.weights[j] -= lr * gw[j] * inv;
        probe.bias -= lr * gb * inv;
    }
    return probe;
}

/// Accuracy of a probe on another task's examples; the probe's negative and
/// positive predictions map onto `labels` in order.
inline double probe_accuracy(const TokenWorld& world, const LinearProbe& probe, const std::vector<Example>& data,
                             const std::vector<std::size_t>& labels) {
    std::size_t correct = 0;
    for (const auto& ex : data) {
        const auto f = world.bag_features(ex.tokens);
        double z = probe.bias;
        for (std::size_t j = 0; j < f.size(); ++j) z += probe.weights[j] * f[j];
        if (labels[z > 0.0 ? 1 : 0] == ex.label) ++correct;
    }
    return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Accuracy of the task's own rule on its examples (the unrestricted oracle).
inline double oracle_accuracy(const TokenWorld& world, const TaskSpec& spec, const std::vector<Example>& data) {
    std::size_t correct = 0;
    for (const auto& ex : data) correct += rule_label(world, spec, ex.tokens) == ex.label ? 1 : 0;
    return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Serialization: JSON-lines examples plus a manifest
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const WorldConfig& w) {
    return {{"vocab", w.vocab}, {"label_vocab", w.label_vocab}, {"rule_dim", w.rule_dim},
            {"seq_len", w.seq_len}, {"world_seed", w.world_seed}};
}

inline WorldConfig world_from_json(const nlohmann::json& j) {
    WorldConfig w;
    w.vocab = j.at("vocab").get<std::size_t>();
    w.label_vocab = j.at("label_vocab").get<std::size_t>();
    w.rule_dim = j.at("rule_dim").get<std::size_t>();
    w.seq_len = j.at("seq_len").get<std::size_t>();
    w.world_seed = j.at("world_seed").get<std::uint64_t>();
    return w;
}

inline nlohmann::json to_json(const FamilySpec& f) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : f.groups) {
        groups.push_back({{"name", g.name}, {"size", g.size}, {"anchor", g.anchor},
                          {"anchor_angle_deg", g.anchor_angle_deg}, {"spread_deg", g.spread_deg},
                          {"label_pair", g.label_pair}, {"noise_rate", g.noise_rate}});
    }
    return {{"name", f.name}, {"groups", groups}, {"train_pool", f.train_pool}, {"dev_size", f.dev_size},
            {"test_size", f.test_size}, {"min_margin", f.min_margin}};
}

inline FamilySpec family_from_json(const nlohmann::json& j) {
    FamilySpec f;
    f.name = j.value("name", std::string("family"));
    f.train_pool = j.value("train_pool", f.train_pool);
    f.dev_size = j.value("dev_size", f.dev_size);
    f.test_size = j.value("test_size", f.test_size);
    f.min_margin = j.value("min_margin", f.min_margin);
    for (const auto& g : j.at("groups")) {
        GroupSpec gs;
        gs.name = g.at("name").get<std::string>();
        gs.size = g.value("size", gs.size);
        gs.anchor = g.value("anchor", gs.anchor);
        gs.anchor_angle_deg = g.value("anchor_angle_deg", gs.anchor_angle_deg);
        gs.spread_deg = g.value("spread_deg", gs.spread_deg);
        gs.label_pair = g.value("label_pair", gs.label_pair);
        gs.noise_rate = g.value("noise_rate", gs.noise_rate);
        f.groups.push_back(std::move(gs));
    }
    return f;
}

inline nlohmann::json to_json(const TaskSpec& t) {
    return {{"task_id", t.task_id}, {"rule", t.rule}, {"label_tokens", t.label_tokens}, {"group", t.group},
            {"noise_rate", t.noise_rate}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
    TaskSpec t;
    t.task_id = j.at("task_id").get<std::string>();
    t.rule = j.at("rule").get<std::vector<double>>();
    t.label_tokens = j.at("label_tokens").get<std::vector<std::size_t>>();
    t.group = j.at("group").get<std::string>();
    t.noise_rate = j.at("noise_rate").get<double>();
    return t;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    for (const auto& ex : examples) out << nlohmann::json{{"tokens", ex.tokens}, {"label", ex.label}}.dump() << '\n';
}

inline std::vector<Example> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
    std::vector<Example> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("tokens").get<std::vector<std::size_t>>(), j.at("label").get<std::size_t>()});
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
        }
    }
    return out;
}

/// Writes manifest.json and <task>.{train,dev,test}.jsonl under `dir`.
inline void save_family(const TaskFamily& family, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : family.tasks) {
        tasks.push_back(to_json(t.spec));
        write_jsonl(dir / (t.spec.task_id + ".train.jsonl"), t.train);
        write_jsonl(dir / (t.spec.task_id + ".dev.jsonl"), t.dev);
        write_jsonl(dir / (t.spec.task_id + ".test.jsonl"), t.test);
    }
    const nlohmann::json manifest = {{"seed", family.seed}, {"world", to_json(family.world)},
                                     {"family", to_json(family.spec)}, {"tasks", tasks}};
    std::ofstream out(dir / "manifest.json");
    if (!out) fail(ErrorCode::kIo, "cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

inline TaskFamily load_family(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) fail(ErrorCode::kIo, "cannot read " + (dir / "manifest.json").string());
    TaskFamily family;
    try {
        const auto manifest = nlohmann::json::parse(in);
        family.seed = manifest.at("seed").get<std::uint64_t>();
        family.world = world_from_json(manifest.at("world"));
        family.spec = family_from_json(manifest.at("family"));
        for (const auto& tj : manifest.at("tasks")) {
            TaskData t;
            t.spec = task_from_json(tj);
            family.tasks.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedFile, "manifest: " + std::string(e.what()));
    }
    for (auto& t : family.tasks) {
        t.train = read_jsonl(dir / (t.spec.task_id + ".train.jsonl"));
        t.dev = read_jsonl(dir / (t.spec.task_id + ".dev.jsonl"));
        t.test = read_jsonl(dir / (t.spec.task_id + ".test.jsonl"));
    }
    return family;
}

}  // namespace compt
