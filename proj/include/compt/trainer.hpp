// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-task prompt training: round-robin task batches, relaxed-Bernoulli
// source weights during training, per-group learning rates, and evaluation
// with deterministic inference weights.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compt/backbone.hpp"
#include "compt/composition.hpp"
#include "compt/optim.hpp"
#include "compt/prompt_bank.hpp"
#include "compt/router.hpp"
#include "compt/tasks.hpp"

namespace compt {

struct TrainConfig {
    CompositionMethod method = CompositionMethod::kSSUM;
    std::size_t num_sources = 2;
    std::size_t source_len = 20;
    std::size_t k_shot = 8;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr_router = 0.1;
    double lr_source = 0.05;
    double lr_private = 0.02;
    std::uint64_t seed = 1;
    WeightsMode weights_mode = WeightsMode::kLearned;
    PromptPosition prompt_position = PromptPosition::kAppend;
    std::vector<std::string> task_list;
    OptimizerKind optimizer = OptimizerKind::kSgd;
    /// Per-task dev/test evaluation every this many epochs; 0 evaluates only
    /// after the last epoch.
    std::size_t eval_every = 1;

    void validate() const {
        auto bad = [](const std::string& msg) { fail(ErrorCode::kInvalidArgument, "train config: " + msg); };
        if (!(lr_router > 0.0 && lr_source > 0.0 && lr_private > 0.0)) bad("learning rates must be positive");
        if (epochs == 0) bad("epochs must be >= 1");
        if (batch_size == 0) bad("batch_size must be >= 1");
        if (k_shot == 0) bad("k_shot must be >= 1 (empty train set)");
        if (source_len == 0) bad("source_len must be >= 1");
        if (uses_sources(method) && num_sources == 0) bad("num_sources must be >= 1");
        if (task_list.empty()) bad("task_list is empty");
        std::vector<std::string> sorted = task_list;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) bad("duplicate task in task_list");
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"method", method_name(method)},
                {"num_sources", uses_sources(method) ? num_sources : 0},
                {"source_len", source_len},
                {"k_shot", k_shot},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr_router", lr_router},
                {"lr_source", lr_source},
                {"lr_private", lr_private},
                {"seed", seed},
                {"weights_mode", weights_mode_name(weights_mode)},
                {"prompt_position", position_name(prompt_position)},
                {"task_list", task_list},
                {"optimizer", optimizer == OptimizerKind::kSgd ? "sgd" : "adam"},
                {"eval_every", eval_every}};
    }
};

/// Row of the per-epoch evaluation log.
struct EpochEval {
    std::size_t epoch = 0;
    std::string task;
    double dev_accuracy = 0.0;
    double test_accuracy = 0.0;
};

struct MetricsRecord {
    std::string run_id;
    TrainConfig config;
    std::string backbone_sha256;
    std::size_t steps = 0;
    std::vector<EpochEval> history;  // append-only
    std::map<std::string, double> final_dev;
    std::map<std::string, double> final_test;
    double average_dev = 0.0;
    double average_test = 0.0;
    double wall_clock_seconds = 0.0;
    std::string started_at;

    /// Everything except timing is a pure function of the config, data and
    /// backbone; `with_timing=false` yields the comparable part.
    [[nodiscard]] nlohmann::json to_json(bool with_timing = true) const {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& h : history) {
            hist.push_back({{"epoch", h.epoch}, {"task", h.task}, {"dev", h.dev_accuracy}, {"test", h.test_accuracy}});
        }
        nlohmann::json doc = {{"run_id", run_id},
                              {"seed", config.seed},
                              {"config", config.to_json()},
                              {"backbone_sha256", backbone_sha256},
                              {"steps", steps},
                              {"history", hist},
                              {"final", {{"dev", final_dev}, {"test", final_test}}},
                              {"average_dev", average_dev},
                              {"average_test", average_test}};
        if (with_timing) doc["timing"] = {{"wall_clock_seconds", wall_clock_seconds}, {"started_at", started_at}};
        return doc;
    }
};

/// Snapshot handed to step hooks after backward() and before the update.
struct StepInfo {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t task_index = 0;
    const std::string* task_id = nullptr;
    double loss = 0.0;
    double temperature = 0.0;
    std::vector<double> weights;
    const PromptBank* bank = nullptr;
    const RouterState* router = nullptr;
};

using StepHook = std::function<void(const StepInfo&)>;

struct TrainResult {
    MetricsRecord metrics;
    PromptCheckpoint checkpoint;
};

enum class Split { kTrain, kDev, kTest };

inline const std::vector<Example>& split_of(const TaskData& task, Split split) {
    switch (split) {
        case Split::kTrain:
            return task.train;
        case Split::kDev:
            return task.dev;
        case Split::kTest:
            return task.test;
    }
    fail(ErrorCode::kInvalidArgument, "unknown split");
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::kTrain;
    if (s == "dev") return Split::kDev;
    if (s == "test") return Split::kTest;
    fail(ErrorCode::kInvalidArgument, "unknown split '" + std::string(s) + "'");
}

/// Target prompt for a task at inference plus its backbone row mask.
struct TargetPrompt {
    Tensor prompt;
    std::vector<std::uint8_t> row_mask;
};

inline Tensor checkpoint_weights(const PromptCheckpoint& ck, std::size_t task_index) {
    const std::size_t m = ck.bank.num_sources();
    if (ck.weights_mode == WeightsMode::kConstant || !ck.router) return constant_weights(m);
    return inference_weights(*ck.router, task_index);
}

inline TargetPrompt target_prompt(const PromptCheckpoint& ck, const std::string& task_id,
                                  const std::optional<SourceMask>& mask = std::nullopt) {
    const auto& bank = ck.bank;
    const std::size_t index = bank.task_index(task_id);
    const auto encoded = encode_for_task(bank, task_id);
    TargetPrompt out;
    if (bank.method == CompositionMethod::kPT) {
        out.prompt = encoded.private_prompt;
        out.row_mask.assign(out.prompt.rows(), 1);
        return out;
    }
    out.prompt = compose(bank.method, encoded.private_prompt, encoded.sources, checkpoint_weights(ck, index), mask);
    out.row_mask = prompt_row_mask(bank.method, bank.num_sources(), bank.source_len, mask);
    return out;
}

/// Predicted label token for every example, in batches of `chunk`.
inline std::vector<std::size_t> predict_examples(const BackboneParams& backbone, const TargetPrompt& prompt,
                                                 const std::vector<Example>& data,
                                                 const std::vector<std::size_t>& label_tokens,
                                                 PromptPosition position = PromptPosition::kAppend,
                                                 std::size_t chunk = 50) {
    std::vector<std::size_t> out;
    out.reserve(data.size());
    const Tensor p = prompt.prompt.detach();
    ForwardOptions options{position, prompt.row_mask};
    for (std::size_t i = 0; i < data.size(); i += chunk) {
        const std::span<const Example> part(data.data() + i, std::min(chunk, data.size() - i));
        const auto preds = predict(forward(backbone, p, part, label_tokens, options), label_tokens);
        out.insert(out.end(), preds.begin(), preds.end());
    }
    return out;
}

inline double accuracy(const std::vector<std::size_t>& preds, const std::vector<Example>& data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += preds[i] == data[i].label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Accuracy of a checkpoint on one split of a task, using inference weights
/// (no sampling) and the optional isolation mask.
inline double evaluate(const PromptCheckpoint& ck, const BackboneParams& backbone, const TaskData& task, Split split,
                       const std::optional<SourceMask>& mask = std::nullopt) {
    const auto prompt = target_prompt(ck, task.spec.task_id, mask);
    const auto& data = split_of(task, split);
    return accuracy(predict_examples(backbone, prompt, data, task.spec.label_tokens, ck.position), data);
}

namespace detail {

inline std::uint64_t task_key(const std::string& id) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : id) h = (h ^ c) * 0x100000001B3ULL;
    return h;
}

inline std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

inline std::string run_id_of(const TrainConfig& c) {
    std::string id = std::string(method_name(c.method));
    if (uses_sources(c.method)) id += "-m" + std::to_string(c.num_sources);
    id += "-k" + std::to_string(c.k_shot) + "-s" + std::to_string(c.seed);
    if (c.weights_mode == WeightsMode::kConstant) id += "-const";
    return id;
}

/// Trains prompts for `config.task_list` on a frozen backbone.
inline TrainResult train(const TrainConfig& config, const BackboneParams& backbone, const TaskFamily& family,
                         const StepHook& hook = {}) {
    config.validate();
    if (!backbone.frozen) fail(ErrorCode::kInvalidArgument, "train: backbone must be frozen");
    const auto started = std::chrono::steady_clock::now();
    const std::string fingerprint = backbone.fingerprint();

    std::vector<const TaskData*> tasks;
    std::vector<std::vector<Example>> shots;
    for (const auto& id : config.task_list) {
        const TaskData& t = family.task(id);
        tasks.push_back(&t);
        // Keyed by task id so that a task's shots do not depend on its neighbours.
        shots.push_back(sample_kshot(t, config.k_shot, config.seed ^ detail::task_key(id)));
    }
    const std::size_t n_tasks = tasks.size();

    const CompositionMethod method = config.method;
    PromptCheckpoint ck;
    ck.bank = init_bank(config.num_sources, config.task_list, config.source_len, backbone.config.d, method,
                        config.seed);
    ck.weights_mode = config.weights_mode;
    ck.backbone_sha256 = fingerprint;
    ck.seed = config.seed;
    ck.position = config.prompt_position;
    const bool routed = uses_sources(method);
    if (routed) ck.router = RouterState::zeros(n_tasks, config.num_sources, true);
    const bool learned = routed && config.weights_mode == WeightsMode::kLearned;
    if (routed && !learned) {
        ck.router->logits.set_requires_grad(false);
    }

    std::vector<ParamGroup> groups;
    if (learned) groups.push_back({"router", {ck.router->logits}, config.lr_router});
    if (routed) groups.push_back({"source_prompts_and_encoders", ck.bank.source_tensors(), config.lr_source});
    groups.push_back({"private_prompts_and_encoders", ck.bank.private_tensors(), config.lr_private});
    Optimizer optimizer(groups, config.optimizer);

    const std::size_t batches_per_task = (config.k_shot + config.batch_size - 1) / config.batch_size;
    const std::size_t steps_per_epoch = batches_per_task * n_tasks;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const TemperatureSchedule schedule{5.0, 1e-3, static_cast<std::int64_t>(std::max<std::size_t>(total_steps - 1, 1))};
    const CounterRng noise_rng(config.seed);

    MetricsRecord record;
    record.run_id = run_id_of(config);
    record.config = config;
    record.backbone_sha256 = fingerprint;
    record.started_at = detail::utc_now();

    auto evaluate_all = [&](std::size_t epoch, bool final) {
        double dev_sum = 0.0;
        double test_sum = 0.0;
        for (std::size_t t = 0; t < n_tasks; ++t) {
            const auto prompt = target_prompt(ck, config.task_list[t]);
            const auto& spec = tasks[t]->spec;
            const double dev = accuracy(
                predict_examples(backbone, prompt, tasks[t]->dev, spec.label_tokens, config.prompt_position),
                tasks[t]->dev);
            const double test = accuracy(
                predict_examples(backbone, prompt, tasks[t]->test, spec.label_tokens, config.prompt_position),
                tasks[t]->test);
            record.history.push_back({epoch, config.task_list[t], dev, test});
            dev_sum += dev;
            test_sum += test;
            if (final) {
                record.final_dev[config.task_list[t]] = dev;
                record.final_test[config.task_list[t]] = test;
            }
        }
        if (final) {
            record.average_dev = dev_sum / static_cast<double>(n_tasks);
            record.average_test = test_sum / static_cast<double>(n_tasks);
        }
    };

    std::vector<std::size_t> order;
    std::vector<std::vector<std::size_t>> epoch_order(n_tasks);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t t = 0; t < n_tasks; ++t) {
            auto& o = epoch_order[t];
            o.resize(shots[t].size());
            std::iota(o.begin(), o.end(), 0);
            auto engine = make_engine(config.seed ^ detail::task_key(config.task_list[t]), epoch);
            std::shuffle(o.begin(), o.end(), engine);
        }
        for (std::size_t b = 0; b < batches_per_task; ++b) {
            for (std::size_t t = 0; t < n_tasks; ++t, ++step) {
                const auto& o = epoch_order[t];
                std::vector<Example> batch;
                for (std::size_t i = b * config.batch_size; i < std::min(o.size(), (b + 1) * config.batch_size); ++i) {
                    batch.push_back(shots[t][o[i]]);
                }
                const std::string& id = config.task_list[t];
                const double tau = anneal(schedule, static_cast<std::int64_t>(step));

                optimizer.zero_grad();
                const auto encoded = encode_for_task(ck.bank, id);
                Tensor weights;
                Tensor prompt;
                if (method == CompositionMethod::kPT) {
                    prompt = encoded.private_prompt;
                } else {
                    if (learned) {
                        ck.router->temperature = tau;
                        weights = sample_weights(*ck.router, t,
                                                 router_noise(noise_rng, step, t, config.num_sources));
                    } else {
                        weights = constant_weights(config.num_sources);
                    }
                    prompt = compose(method, encoded.private_prompt, encoded.sources, weights);
                }
                const auto& labels = tasks[t]->spec.label_tokens;
                const Tensor logits = forward(backbone, prompt, batch, labels, {config.prompt_position, {}});
                const Tensor loss = cross_entropy_with_logits(logits, label_indices(batch, labels));
                if (!std::isfinite(loss.item())) {
                    fail(ErrorCode::kNanLoss, "train: non-finite loss at step " + std::to_string(step) + " (epoch " +
                                                  std::to_string(epoch) + ", task " + id + ", tau " +
                                                  std::to_string(tau) + ")");
                }
                backward(loss);
                if (hook) {
                    StepInfo info{step, epoch, t, &id, loss.item(), tau, {}, &ck.bank,
                                  ck.router ? &*ck.router : nullptr};
                    if (weights.defined()) info.weights.assign(weights.data().begin(), weights.data().end());
                    hook(info);
                }
                optimizer.step();
            }
        }
        if (backbone.fingerprint() != fingerprint) {
            fail(ErrorCode::kInvalidArgument, "train: frozen backbone changed during epoch " + std::to_string(epoch));
        }
        const bool last = epoch + 1 == config.epochs;
        if (last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0)) evaluate_all(epoch + 1, last);
    }
    optimizer.zero_grad();
    if (ck.router) ck.router->temperature = schedule.tau_end;
    ck.bank.check_invariants();
    record.steps = step;
    record.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {std::move(record), std::move(ck)};
}

// ---------------------------------------------------------------------------
// Seed sweeps
// ---------------------------------------------------------------------------

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd out;
    if (xs.empty()) return out;
    out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (xs.size() < 2) return out;
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return out;
}

struct SweepResult {
    std::vector<MetricsRecord> runs;
    std::vector<PromptCheckpoint> checkpoints;
    std::map<std::string, MeanStd> per_task;  // final test accuracy
    MeanStd average;

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json tasks = nlohmann::json::object();
        for (const auto& [id, ms] : per_task) tasks[id] = {{"mean", ms.mean}, {"std", ms.std}};
        std::vector<std::uint64_t> seeds;
        for (const auto& r : runs) seeds.push_back(r.config.seed);
        return {{"seeds", seeds}, {"per_task", tasks}, {"average", {{"mean", average.mean}, {"std", average.std}}}};
    }
};

inline SweepResult aggregate_runs(std::vector<MetricsRecord> runs) {
    SweepResult out;
    std::vector<double> averages;
    std::map<std::string, std::vector<double>> per_task;
    for (const auto& r : runs) {
        averages.push_back(r.average_test);
        for (const auto& [id, acc] : r.final_test) per_task[id].push_back(acc);
    }
    for (const auto& [id, xs] : per_task) out.per_task[id] = mean_std(xs);
    out.average = mean_std(averages);
    out.runs = std::move(runs);
    return out;
}

/// One training run per seed, then mean and sample std per task and overall.
inline SweepResult run_seed_sweep(const TrainConfig& config, const std::vector<std::uint64_t>& seeds,
                                  const BackboneParams& backbone, const TaskFamily& family,
                                  const std::function<void(const TrainResult&)>& on_run = {}) {
    if (seeds.empty()) fail(ErrorCode::kInvalidArgument, "run_seed_sweep: no seeds");
    std::vector<MetricsRecord> runs;
    std::vector<PromptCheckpoint> checkpoints;
    for (auto seed : seeds) {
        TrainConfig c = config;
        c.seed = seed;
        auto result = train(c, backbone, family);
        if (on_run) on_run(result);
        runs.push_back(std::move(result.metrics));
        checkpoints.push_back(std::move(result.checkpoint));
    }
    auto out = aggregate_runs(std::move(runs));
    out.checkpoints = std::move(checkpoints);
    return out;
}

}  // namespace compt
