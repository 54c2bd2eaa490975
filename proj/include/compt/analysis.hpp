// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Analyses over trained prompt checkpoints: prompt isolation, learned weight
// dumps, cross-task prompt transfer, private learning-rate grids and task
// inclusion experiments. Every report renders to JSON and CSV.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compt/trainer.hpp"

namespace compt {

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

/// Appends one row to the run index, writing the header for a new file.
inline void append_run_index(const std::filesystem::path& path, const MetricsRecord& r) {
    const bool fresh = !std::filesystem::exists(path);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    if (fresh) out << "run_id,method,M,k,seed,avg_acc\n";
    out << r.run_id << ',' << method_name(r.config.method) << ','
        << (uses_sources(r.config.method) ? r.config.num_sources : 0) << ',' << r.config.k_shot << ','
        << r.config.seed << ',' << format_double(r.average_test) << '\n';
}

// ---------------------------------------------------------------------------
// Isolation
// ---------------------------------------------------------------------------

struct IsolationReport {
    CompositionMethod method = CompositionMethod::kSSUM;
    std::vector<std::string> columns;  // source0..source{M-1}, all_src, private, total
    std::vector<std::string> tasks;
    std::vector<std::vector<double>> accuracy;  // [task][column]

    [[nodiscard]] double at(const std::string& task, const std::string& column) const {
        const auto t = std::find(tasks.begin(), tasks.end(), task);
        const auto c = std::find(columns.begin(), columns.end(), column);
        if (t == tasks.end() || c == columns.end()) {
            fail(ErrorCode::kOutOfRange, "isolation report has no cell (" + task + ", " + column + ")");
        }
        return accuracy[static_cast<std::size_t>(t - tasks.begin())][static_cast<std::size_t>(c - columns.begin())];
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::object();
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            nlohmann::json row = nlohmann::json::object();
            for (std::size_t c = 0; c < columns.size(); ++c) row[columns[c]] = accuracy[t][c];
            rows[tasks[t]] = row;
        }
        return {{"method", method_name(method)}, {"columns", columns}, {"accuracy", rows}};
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out = "task";
        for (const auto& c : columns) out += "," + c;
        out += "\n";
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            out += tasks[t];
            for (double v : accuracy[t]) out += "," + format_double(v);
            out += "\n";
        }
        return out;
    }
};

/// Isolation masks per column. SSUM zeroes everything outside the kept set;
/// MSUM and MCAT keep the private factor in single-source columns because a
/// zero private prompt zeroes the whole product.
inline std::vector<std::pair<std::string, std::optional<SourceMask>>> isolation_columns(CompositionMethod method,
                                                                                       std::size_t num_sources) {
    std::vector<std::pair<std::string, std::optional<SourceMask>>> cols;
    const bool private_in_singles = method != CompositionMethod::kSSUM;
    std::vector<std::size_t> all(num_sources);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t s = 0; s < num_sources; ++s) {
        cols.emplace_back("source" + std::to_string(s), mask_sources(num_sources, {s}, private_in_singles));
    }
    cols.emplace_back("all_src", mask_sources(num_sources, all, false));
    cols.emplace_back("private", mask_sources(num_sources, {}, true));
    cols.emplace_back("total", std::nullopt);
    return cols;
}

/// Accuracy of every task under each isolation column on the first
/// `test_size` test examples.
inline IsolationReport isolation_study(const PromptCheckpoint& ck, const BackboneParams& backbone,
                                       const TaskFamily& family, const std::vector<std::string>& tasks,
                                       std::size_t test_size = 100) {
    if (ck.method() == CompositionMethod::kPT) {
        fail(ErrorCode::kInvalidArgument, "isolation_study: PT checkpoints have no sources to isolate");
    }
    IsolationReport report;
    report.method = ck.method();
    const auto cols = isolation_columns(ck.method(), ck.bank.num_sources());
    for (const auto& [name, mask] : cols) report.columns.push_back(name);
    for (const auto& id : tasks) {
        TaskData data = family.task(id);
        if (data.test.size() > test_size) data.test.resize(test_size);
        std::vector<double> row;
        for (const auto& [name, mask] : cols) row.push_back(evaluate(ck, backbone, data, Split::kTest, mask));
        report.tasks.push_back(id);
        report.accuracy.push_back(std::move(row));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

struct WeightReport {
    WeightsMode mode = WeightsMode::kLearned;
    std::vector<std::string> tasks;
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> weights;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"weights_mode", weights_mode_name(mode)}, {"tasks", tasks}, {"logits", logits}, {"weights", weights}};
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out = "task,source,logit,weight\n";
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            for (std::size_t s = 0; s < weights[t].size(); ++s) {
                out += tasks[t] + "," + std::to_string(s) + "," + format_double(logits[t][s]) + "," +
                       format_double(weights[t][s]) + "\n";
            }
        }
        return out;
    }
};

inline WeightReport weight_report(const PromptCheckpoint& ck) {
    if (!ck.router) fail(ErrorCode::kInvalidArgument, "weight_report: checkpoint has no router");
    WeightReport r;
    r.mode = ck.weights_mode;
    r.tasks = ck.bank.task_ids;
    const std::size_t m = ck.router->num_sources();
    for (std::size_t t = 0; t < r.tasks.size(); ++t) {
        const auto row = ck.router->logits.data().subspan(t * m, m);
        r.logits.emplace_back(row.begin(), row.end());
        const Tensor w = checkpoint_weights(ck, t);
        r.weights.emplace_back(w.data().begin(), w.data().end());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Cross-task transfer
// ---------------------------------------------------------------------------

struct CrossEvalResult {
    std::string prompt_of;
    std::string eval_on;
    double accuracy = 0.0;
    std::vector<std::size_t> labels;                 // eval task's label tokens
    std::vector<std::vector<std::size_t>> histogram;  // [gold][predicted]

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"prompt_of", prompt_of},
                {"eval_on", eval_on},
                {"accuracy", accuracy},
                {"labels", labels},
                {"histogram", histogram}};
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out = "gold,predicted,count\n";
        for (std::size_t g = 0; g < labels.size(); ++g) {
            for (std::size_t p = 0; p < labels.size(); ++p) {
                out += std::to_string(labels[g]) + "," + std::to_string(labels[p]) + "," +
                       std::to_string(histogram[g][p]) + "\n";
            }
        }
        return out;
    }
};

/// Evaluates task A's target prompt on task B's test split. Predictions are
/// made over A's label tokens and translated through `label_map` (A token to
/// B token); without a map the two label sets must coincide.
inline CrossEvalResult cross_task_eval(const PromptCheckpoint& ck, const BackboneParams& backbone,
                                       const TaskFamily& family, const std::string& prompt_of,
                                       const std::string& eval_on,
                                       const std::optional<std::map<std::size_t, std::size_t>>& label_map = std::nullopt) {
    const TaskData& a = family.task(prompt_of);
    const TaskData& b = family.task(eval_on);
    (void)ck.bank.task_index(prompt_of);  // throws for tasks outside the checkpoint
    const auto& la = a.spec.label_tokens;
    const auto& lb = b.spec.label_tokens;
    std::map<std::size_t, std::size_t> map;
    if (label_map) {
        map = *label_map;
    } else {
        if (std::set<std::size_t>(la.begin(), la.end()) != std::set<std::size_t>(lb.begin(), lb.end())) {
            fail(ErrorCode::kInvalidArgument, "cross_task_eval: labels of " + prompt_of + " and " + eval_on +
                                                  " differ and no label map was given");
        }
        for (auto t : la) map[t] = t;
    }
    for (auto t : la) {
        const auto it = map.find(t);
        if (it == map.end() || std::find(lb.begin(), lb.end(), it->second) == lb.end()) {
            fail(ErrorCode::kInvalidArgument, "cross_task_eval: label " + std::to_string(t) + " of " + prompt_of +
                                                  " has no image among " + eval_on + "'s labels");
        }
    }
    const auto prompt = target_prompt(ck, prompt_of);
    const auto preds = predict_examples(backbone, prompt, b.test, la, ck.position);
    CrossEvalResult r{prompt_of, eval_on, 0.0, lb, std::vector<std::vector<std::size_t>>(lb.size(), std::vector<std::size_t>(lb.size(), 0))};
    std::size_t correct = 0;
    auto index_of = [&](std::size_t token) {
        return static_cast<std::size_t>(std::find(lb.begin(), lb.end(), token) - lb.begin());
    };
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const std::size_t mapped = map.at(preds[i]);
        correct += mapped == b.test[i].label ? 1 : 0;
        ++r.histogram[index_of(b.test[i].label)][index_of(mapped)];
    }
    r.accuracy = b.test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(b.test.size());
    return r;
}

// ---------------------------------------------------------------------------
// Learning-rate grid
// ---------------------------------------------------------------------------

struct LrGridCell {
    double private_lr = 0.0;
    std::size_t epochs = 0;
    double average_test = 0.0;
};

struct LrGrid {
    std::vector<LrGridCell> cells;

    [[nodiscard]] const LrGridCell& at(double plr, std::size_t epochs) const {
        for (const auto& c : cells) {
            if (c.private_lr == plr && c.epochs == epochs) return c;
        }
        fail(ErrorCode::kOutOfRange, "lr grid has no cell (" + format_double(plr) + ", " + std::to_string(epochs) + ")");
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& c : cells) {
            out.push_back({{"private_lr", c.private_lr}, {"epochs", c.epochs}, {"average_test", c.average_test}});
        }
        return {{"cells", out}};
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out = "private_lr,epochs,average_test\n";
        for (const auto& c : cells) {
            out += format_double(c.private_lr) + "," + std::to_string(c.epochs) + "," + format_double(c.average_test) +
                   "\n";
        }
        return out;
    }
};

inline const std::vector<double> kDefaultGridPrivateLrs{0.01, 0.02, 0.05};
inline const std::vector<std::size_t> kDefaultGridEpochs{30, 50};

/// One independent run per (private lr, epochs) cell, all with the base seed.
inline LrGrid lr_grid(const TrainConfig& base, const std::vector<double>& private_lrs,
                      const std::vector<std::size_t>& epochs_list, const BackboneParams& backbone,
                      const TaskFamily& family) {
    if (private_lrs.empty() || epochs_list.empty()) fail(ErrorCode::kInvalidArgument, "lr_grid: empty axis");
    LrGrid grid;
    for (double plr : private_lrs) {
        for (std::size_t epochs : epochs_list) {
            TrainConfig c = base;
            c.lr_private = plr;
            c.epochs = epochs;
            c.eval_every = 0;
            grid.cells.push_back({plr, epochs, train(c, backbone, family).metrics.average_test});
        }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Task inclusion
// ---------------------------------------------------------------------------

struct InclusionArm {
    std::uint64_t seed = 0;
    std::map<std::string, double> without_extra;
    std::map<std::string, double> with_extra;
};

struct InclusionReport {
    std::vector<std::string> base_tasks;
    std::string extra_task;
    std::vector<std::string> relatives;  // base tasks in the extra task's group
    std::vector<InclusionArm> arms;
    std::vector<nlohmann::json> config_echo_without;
    std::vector<nlohmann::json> config_echo_with;

    [[nodiscard]] double mean_over(const std::vector<std::string>& ids, bool with) const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& arm : arms) {
            const auto& m = with ? arm.with_extra : arm.without_extra;
            for (const auto& id : ids) {
                s += m.at(id);
                ++n;
            }
        }
        return n == 0 ? 0.0 : s / static_cast<double>(n);
    }

    [[nodiscard]] double relatives_mean(bool with) const { return mean_over(relatives, with); }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json arms_json = nlohmann::json::array();
        for (const auto& a : arms) {
            arms_json.push_back({{"seed", a.seed}, {"without", a.without_extra}, {"with", a.with_extra}});
        }
        return {{"base_tasks", base_tasks},
                {"extra_task", extra_task},
                {"relatives", relatives},
                {"arms", arms_json},
                {"relatives_mean_without", relatives_mean(false)},
                {"relatives_mean_with", relatives_mean(true)},
                {"base_mean_without", mean_over(base_tasks, false)},
                {"base_mean_with", mean_over(base_tasks, true)}};
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out = "seed,task,without_extra,with_extra\n";
        for (const auto& a : arms) {
            for (const auto& id : base_tasks) {
                out += std::to_string(a.seed) + "," + id + "," + format_double(a.without_extra.at(id)) + "," +
                       format_double(a.with_extra.at(id)) + "\n";
            }
        }
        return out;
    }
};

/// Paired runs per seed: the base task list, then the same list plus
/// `extra_task`. Only the base tasks' accuracies are reported.
inline InclusionReport inclusion_study(const TrainConfig& config, const std::string& extra_task,
                                       const BackboneParams& backbone, const TaskFamily& family,
                                       const std::vector<std::uint64_t>& seeds = {}) {
    const auto& base = config.task_list;
    if (std::find(base.begin(), base.end(), extra_task) != base.end()) {
        fail(ErrorCode::kInvalidArgument, "inclusion_study: '" + extra_task + "' is already a base task");
    }
    const std::string& group = family.task(extra_task).spec.group;
    InclusionReport report;
    report.base_tasks = base;
    report.extra_task = extra_task;
    for (const auto& id : base) {
        if (family.task(id).spec.group == group) report.relatives.push_back(id);
    }
    const std::vector<std::uint64_t> run_seeds = seeds.empty() ? std::vector<std::uint64_t>{config.seed} : seeds;
    for (auto seed : run_seeds) {
        TrainConfig without = config;
        without.seed = seed;
        without.eval_every = 0;
        TrainConfig with = without;
        with.task_list.push_back(extra_task);
        const auto r0 = train(without, backbone, family).metrics;
        const auto r1 = train(with, backbone, family).metrics;
        InclusionArm arm{seed, {}, {}};
        for (const auto& id : base) {
            arm.without_extra[id] = r0.final_test.at(id);
            arm.with_extra[id] = r1.final_test.at(id);
        }
        report.arms.push_back(std::move(arm));
        report.config_echo_without.push_back(r0.config.to_json());
        report.config_echo_with.push_back(r1.config.to_json());
    }
    return report;
}

}  // namespace compt
