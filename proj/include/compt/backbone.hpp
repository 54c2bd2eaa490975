// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small pre-LN transformer classifier that stands in for a frozen pretrained
// language model. Prompt rows are placed next to the embedded input tokens,
// the final hidden states are mean-pooled over visible positions and scored
// against the label-token rows of the output head.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "compt/encoder.hpp"
#include "compt/hash.hpp"
#include "compt/optim.hpp"
#include "compt/tasks.hpp"
#include "compt/tensor.hpp"

namespace compt {

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t d = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t seq_len = 16;
    std::size_t max_prompt_len = 40;
    std::size_t mlp_hidden = 128;

    void validate() const {
        if (d == 0 || heads == 0 || d % heads != 0) {
            fail(ErrorCode::kInvalidArgument, "model config: d must be a positive multiple of heads");
        }
        if (vocab == 0 || layers == 0 || seq_len == 0 || mlp_hidden == 0) {
            fail(ErrorCode::kInvalidArgument, "model config: sizes must be positive");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class PromptPosition { kAppend, kPrepend };

inline PromptPosition parse_position(std::string_view s) {
    if (s == "append") return PromptPosition::kAppend;
    if (s == "prepend") return PromptPosition::kPrepend;
    fail(ErrorCode::kInvalidArgument, "unknown prompt position '" + std::string(s) + "'");
}

inline std::string_view position_name(PromptPosition p) { return p == PromptPosition::kAppend ? "append" : "prepend"; }

struct LayerParams {
    Tensor ln1_gain, ln1_shift;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_shift;
    Tensor fc1, fc1_bias, fc2, fc2_bias;
};

struct BackboneParams {
    ModelConfig config;
    Tensor token_embedding;  // vocab × d
    std::vector<LayerParams> layers;
    Tensor final_gain, final_shift;
    Tensor head;  // vocab × d; label logits use the label-token rows
    bool frozen = false;

    /// Every tensor with a stable name, in a fixed order.
    [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out{{"token_embedding", token_embedding}};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& p = layers[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            out.emplace_back(pre + "ln1_gain", p.ln1_gain);
            out.emplace_back(pre + "ln1_shift", p.ln1_shift);
            out.emplace_back(pre + "wq", p.wq);
            out.emplace_back(pre + "wk", p.wk);
            out.emplace_back(pre + "wv", p.wv);
            out.emplace_back(pre + "wo", p.wo);
            out.emplace_back(pre + "ln2_gain", p.ln2_gain);
            out.emplace_back(pre + "ln2_shift", p.ln2_shift);
            out.emplace_back(pre + "fc1", p.fc1);
            out.emplace_back(pre + "fc1_bias", p.fc1_bias);
            out.emplace_back(pre + "fc2", p.fc2);
            out.emplace_back(pre + "fc2_bias", p.fc2_bias);
        }
        out.emplace_back("final_gain", final_gain);
        out.emplace_back("final_shift", final_shift);
        out.emplace_back("head", head);
        return out;
    }

    [[nodiscard]] std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }

    /// Freezing drops gradient tracking from every parameter.
    void set_frozen(bool value) {
        frozen = value;
        for (auto& t : tensors()) {
            Tensor copy = t;
            copy.set_requires_grad(!value);
        }
    }

    /// SHA-256 over the configuration and every parameter's bytes.
    [[nodiscard]] std::string fingerprint() const {
        Sha256 h;
        const auto& c = config;
        h.update("compt-backbone-v1:" + std::to_string(c.vocab) + "," + std::to_string(c.d) + "," +
                 std::to_string(c.layers) + "," + std::to_string(c.heads) + "," + std::to_string(c.seq_len) + "," +
                 std::to_string(c.max_prompt_len) + "," + std::to_string(c.mlp_hidden));
        for (const auto& [name, t] : named()) {
            h.update(name);
            h.update(t.data());
        }
        return h.hex();
    }

    [[nodiscard]] BackboneParams clone() const {
        BackboneParams out = *this;
        out.token_embedding = token_embedding.detach();
        for (auto& p : out.layers) {
            for (Tensor* t : {&p.ln1_gain, &p.ln1_shift, &p.wq, &p.wk, &p.wv, &p.wo, &p.ln2_gain, &p.ln2_shift,
                              &p.fc1, &p.fc1_bias, &p.fc2, &p.fc2_bias}) {
                *t = t->detach();
            }
        }
        out.final_gain = final_gain.detach();
        out.final_shift = final_shift.detach();
        out.head = head.detach();
        out.set_frozen(frozen);
        return out;
    }

    /// Random parameters. With `world`, the first rule_dim embedding columns of
    /// every input token start at that token's feature vector, which makes
    /// meta-training converge much faster.
    template <class Engine>
    static BackboneParams init(const ModelConfig& config, Engine& engine, const TokenWorld* world = nullptr) {
        config.validate();
        const std::size_t d = config.d;
        auto normal = [&](std::size_t r, std::size_t c, double stddev) {
            std::normal_distribution<double> dist(0.0, stddev);
            std::vector<double> v(r * c);
            for (auto& x : v) x = dist(engine);
            return Tensor::from({r, c}, std::move(v), true);
        };
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        BackboneParams p;
        p.config = config;
        p.token_embedding = normal(config.vocab, d, 1.0);
        if (world != nullptr) {
            const auto& wc = world->config();
            if (wc.rule_dim > d || wc.input_vocab() > config.vocab) {
                fail(ErrorCode::kInvalidArgument, "backbone init: world does not fit the model");
            }
            auto emb = p.token_embedding.mutable_data();
            for (std::size_t t = 0; t < wc.input_vocab(); ++t) {
                const auto f = world->feature(t);
                for (std::size_t j = 0; j < wc.rule_dim; ++j) emb[t * d + j] = f[j];
            }
        }
        for (std::size_t l = 0; l < config.layers; ++l) {
            LayerParams lp;
            lp.ln1_gain = Tensor::full({d}, 1.0, true);
            lp.ln1_shift = Tensor::zeros({d}, true);
            lp.wq = normal(d, d, sd);
            lp.wk = normal(d, d, sd);
            lp.wv = normal(d, d, sd);
            lp.wo = normal(d, d, sd / std::sqrt(2.0 * static_cast<double>(config.layers)));
            lp.ln2_gain = Tensor::full({d}, 1.0, true);
            lp.ln2_shift = Tensor::zeros({d}, true);
            lp.fc1 = normal(d, config.mlp_hidden, sd);
            lp.fc1_bias = Tensor::zeros({config.mlp_hidden}, true);
            lp.fc2 = normal(config.mlp_hidden, d,
                            1.0 / std::sqrt(static_cast<double>(config.mlp_hidden) * 2.0 *
                                            static_cast<double>(config.layers)));
            lp.fc2_bias = Tensor::zeros({d}, true);
            p.layers.push_back(std::move(lp));
        }
        p.final_gain = Tensor::full({d}, 1.0, true);
        p.final_shift = Tensor::zeros({d}, true);
        p.head = normal(config.vocab, d, 0.05);
        return p;
    }
};

struct ForwardOptions {
    PromptPosition position = PromptPosition::kAppend;
    /// One entry per prompt row; 0 hides the row from attention and pooling.
    std::span<const std::uint8_t> prompt_mask{};
};

/// Class indices of examples within `label_tokens`.
inline std::vector<std::size_t> label_indices(std::span<const Example> batch, std::span<const std::size_t> label_tokens) {
    std::vector<std::size_t> out;
    out.reserve(batch.size());
    for (const auto& ex : batch) {
        const auto it = std::find(label_tokens.begin(), label_tokens.end(), ex.label);
        if (it == label_tokens.end()) {
            fail(ErrorCode::kInvalidArgument, "label " + std::to_string(ex.label) + " not among task labels");
        }
        out.push_back(static_cast<std::size_t>(it - label_tokens.begin()));
    }
    return out;
}

/// Logits over `label_tokens` for each example in `batch` (B × C).
inline Tensor forward(const BackboneParams& params, const Tensor& prompt, std::span<const Example> batch,
                      std::span<const std::size_t> label_tokens, const ForwardOptions& options = {}) {
    const auto& cfg = params.config;
    if (batch.empty()) fail(ErrorCode::kInvalidArgument, "forward: empty batch");
    const std::size_t m = prompt.defined() ? prompt.rows() : 0;
    if (prompt.defined() && (prompt.dim() != 2 || prompt.cols() != cfg.d)) {
        fail(ErrorCode::kShapeMismatch, "forward: prompt " + shape_str(prompt.shape()) + " for width " +
                                            std::to_string(cfg.d));
    }
    if (m > cfg.max_prompt_len) {
        fail(ErrorCode::kInvalidArgument, "forward: prompt of " + std::to_string(m) + " rows exceeds max_prompt_len " +
                                              std::to_string(cfg.max_prompt_len));
    }
    if (!options.prompt_mask.empty() && options.prompt_mask.size() != m) {
        fail(ErrorCode::kShapeMismatch, "forward: prompt mask of " + std::to_string(options.prompt_mask.size()) +
                                            " entries for " + std::to_string(m) + " rows");
    }
    const std::size_t seq = cfg.seq_len;
    const std::size_t total = seq + m;
    std::vector<std::size_t> ids;
    ids.reserve(batch.size() * seq);
    for (const auto& ex : batch) {
        if (ex.tokens.size() != seq) {
            fail(ErrorCode::kShapeMismatch, "forward: example of " + std::to_string(ex.tokens.size()) +
                                                " tokens, expected " + std::to_string(seq));
        }
        ids.insert(ids.end(), ex.tokens.begin(), ex.tokens.end());
    }
    const Tensor embedded = embedding(params.token_embedding, ids);

    // Visible positions, per example, in sequence order.
    std::vector<std::uint8_t> row_visible;
    row_visible.reserve(total);
    const bool append = options.position == PromptPosition::kAppend;
    auto push_prompt_mask = [&] {
        for (std::size_t r = 0; r < m; ++r) row_visible.push_back(options.prompt_mask.empty() ? 1 : options.prompt_mask[r]);
    };
    if (!append) push_prompt_mask();
    for (std::size_t i = 0; i < seq; ++i) row_visible.push_back(1);
    if (append) push_prompt_mask();

    Tensor hidden;
    if (m == 0) {
        hidden = embedded;
    } else {
        std::vector<Tensor> parts;
        parts.reserve(2 * batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Tensor inputs = slice_rows(embedded, b * seq, (b + 1) * seq);
            if (append) {
                parts.push_back(inputs);
                parts.push_back(prompt);
            } else {
                parts.push_back(prompt);
                parts.push_back(inputs);
            }
        }
        hidden = concat_rows(parts);
    }
    std::vector<std::uint8_t> key_mask;
    key_mask.reserve(batch.size() * total);
    for (std::size_t b = 0; b < batch.size(); ++b) key_mask.insert(key_mask.end(), row_visible.begin(), row_visible.end());

    for (const auto& layer : params.layers) {
        const Tensor a = layer_norm(hidden, layer.ln1_gain, layer.ln1_shift);
        const Tensor att = multi_head_attention(matmul(a, layer.wq), matmul(a, layer.wk), matmul(a, layer.wv),
                                                cfg.heads, total, key_mask);
        hidden = add(hidden, matmul(att, layer.wo));
        const Tensor b = layer_norm(hidden, layer.ln2_gain, layer.ln2_shift);
        const Tensor mlp = add_bias(matmul(gelu(add_bias(matmul(b, layer.fc1), layer.fc1_bias)), layer.fc2),
                                    layer.fc2_bias);
        hidden = add(hidden, mlp);
    }
    hidden = layer_norm(hidden, params.final_gain, params.final_shift);

    // Mean pooling over visible positions as a constant B × (B·total) matrix.
    std::size_t visible = 0;
    for (auto v : row_visible) visible += v;
    std::vector<double> pool(batch.size() * batch.size() * total, 0.0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (std::size_t r = 0; r < total; ++r) {
            if (row_visible[r]) pool[b * batch.size() * total + b * total + r] = 1.0 / static_cast<double>(visible);
        }
    }
    const Tensor pooled = matmul(Tensor::from({batch.size(), batch.size() * total}, std::move(pool)), hidden);
    const Tensor label_rows = embedding(params.head, label_tokens);
    return matmul(pooled, transpose(label_rows));
}

/// Argmax label token per example.
inline std::vector<std::size_t> predict(const Tensor& logits, std::span<const std::size_t> label_tokens) {
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        }
        out.push_back(label_tokens[best]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr int kBackboneFormatVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab", c.vocab}, {"d", c.d}, {"layers", c.layers}, {"heads", c.heads},
            {"seq_len", c.seq_len}, {"max_prompt_len", c.max_prompt_len}, {"mlp_hidden", c.mlp_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab = j.at("vocab").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.max_prompt_len = j.at("max_prompt_len").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    return c;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j, bool requires_grad = false) {
    return Tensor::from(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>(), requires_grad);
}

struct BackboneFile {
    BackboneParams params;
    WorldConfig world;
    nlohmann::json certification;
};

inline void save_backbone(const std::filesystem::path& path, const BackboneParams& params, const WorldConfig& world,
                          const nlohmann::json& certification = nlohmann::json::object()) {
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : params.named()) tensors[name] = tensor_to_json(t);
    const nlohmann::json doc = {{"format_version", kBackboneFormatVersion},
                                {"config", to_json(params.config)},
                                {"world", to_json(world)},
                                {"sha256", params.fingerprint()},
                                {"certification", certification},
                                {"tensors", tensors}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    out << doc.dump() << '\n';
}

/// Loads a frozen backbone and verifies its stored fingerprint.
inline BackboneFile load_backbone(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
    }
    try {
        if (doc.at("format_version").get<int>() != kBackboneFormatVersion) {
            fail(ErrorCode::kVersionMismatch, "backbone format_version " + doc.at("format_version").dump());
        }
        BackboneFile out;
        out.world = world_from_json(doc.at("world"));
        out.certification = doc.value("certification", nlohmann::json::object());
        auto& p = out.params;
        p.config = model_config_from_json(doc.at("config"));
        const auto& t = doc.at("tensors");
        p.token_embedding = tensor_from_json(t.at("token_embedding"));
        for (std::size_t l = 0; l < p.config.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            LayerParams lp;
            lp.ln1_gain = tensor_from_json(t.at(pre + "ln1_gain"));
            lp.ln1_shift = tensor_from_json(t.at(pre + "ln1_shift"));
            lp.wq = tensor_from_json(t.at(pre + "wq"));
            lp.wk = tensor_from_json(t.at(pre + "wk"));
            lp.wv = tensor_from_json(t.at(pre + "wv"));
            lp.wo = tensor_from_json(t.at(pre + "wo"));
            lp.ln2_gain = tensor_from_json(t.at(pre + "ln2_gain"));
            lp.ln2_shift = tensor_from_json(t.at(pre + "ln2_shift"));
            lp.fc1 = tensor_from_json(t.at(pre + "fc1"));
            lp.fc1_bias = tensor_from_json(t.at(pre + "fc1_bias"));
            lp.fc2 = tensor_from_json(t.at(pre + "fc2"));
            lp.fc2_bias = tensor_from_json(t.at(pre + "fc2_bias"));
            p.layers.push_back(std::move(lp));
        }
        p.final_gain = tensor_from_json(t.at("final_gain"));
        p.final_shift = tensor_from_json(t.at("final_shift"));
        p.head = tensor_from_json(t.at("head"));
        p.frozen = true;
        if (p.fingerprint() != doc.at("sha256").get<std::string>()) {
            fail(ErrorCode::kFingerprintMismatch, path.string() + ": parameters do not match stored sha256");
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Pretraining and certification
// ---------------------------------------------------------------------------

struct PretrainConfig {
    std::uint64_t seed = 1;
    std::size_t steps = 8000;
    std::size_t batch = 32;
    double lr = 1.5e-3;
    std::size_t min_prompt_len = 2;
    double prompt_noise = 0.3;
    double min_margin = 0.25;
    /// Pretraining rules closer than this cosine to any held-out rule are redrawn.
    double max_heldout_cosine = 0.9;
    // Certification.
    std::size_t cert_tasks = 4;
    std::size_t cert_train = 128;
    std::size_t cert_test = 200;
    std::size_t cert_steps = 150;
    std::size_t cert_batch = 16;
    std::size_t cert_prompt_len = 20;
    double cert_prompt_lr = 1e-2;
    double cert_backbone_lr = 1e-4;
    double cert_full_threshold = 0.90;
    double cert_prompt_threshold = 0.75;
    std::function<void(const std::string&)> log;
};

struct CertificationReport {
    std::vector<double> full_finetune_accuracy;
    std::vector<double> prompt_tuning_accuracy;
    double full_finetune_mean = 0.0;
    double prompt_tuning_mean = 0.0;
    bool passed = false;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"full_finetune_accuracy", full_finetune_accuracy}, {"prompt_tuning_accuracy", prompt_tuning_accuracy},
                {"full_finetune_mean", full_finetune_mean}, {"prompt_tuning_mean", prompt_tuning_mean},
                {"passed", passed}};
    }
};

namespace detail {

template <class Engine>
TaskSpec random_pretrain_task(const TokenWorld& world, Engine& engine, const std::vector<std::vector<double>>& heldout,
                              double max_cos, const std::string& id) {
    const auto& cfg = world.config();
    for (;;) {
        auto rule = random_unit(cfg.rule_dim, engine);
        bool ok = true;
        for (const auto& h : heldout) {
            double dot = 0.0;
            double n = 0.0;
            for (std::size_t i = 0; i < rule.size(); ++i) {
                dot += rule[i] * h[i];
                n += h[i] * h[i];
            }
            if (std::abs(dot) / std::sqrt(n) > max_cos) ok = false;
        }
        if (!ok) continue;
        std::uniform_int_distribution<std::size_t> pair(0, cfg.num_label_pairs() - 1);
        const std::size_t p = pair(engine);
        return {id, std::move(rule), {cfg.negative_label(p), cfg.positive_label(p)}, "pretrain", 0.0};
    }
}

inline double accuracy_of(const BackboneParams& params, const Tensor& prompt, const std::vector<Example>& data,
                          const std::vector<std::size_t>& labels, std::size_t chunk = 64) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); i += chunk) {
        const std::span<const Example> part(data.data() + i, std::min(chunk, data.size() - i));
        const auto preds = predict(forward(params, prompt, part, labels), labels);
        for (std::size_t j = 0; j < part.size(); ++j) correct += preds[j] == part[j].label ? 1 : 0;
    }
    return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace detail

/// Adapts a single encoded prompt (and, with `full`, the whole backbone) to a
/// task and reports test accuracy. Used to certify prompt steerability.
inline double tune_single_task(const BackboneParams& base, const TaskSpec& task, const std::vector<Example>& train,
                               const std::vector<Example>& test, bool full, const PretrainConfig& cfg,
                               std::uint64_t seed) {
    BackboneParams params = base.clone();
    params.set_frozen(!full);
    auto engine = make_engine(seed, 0x54554E45ULL);
    std::normal_distribution<double> normal(0.0, 0.02);
    std::vector<double> raw(cfg.cert_prompt_len * params.config.d);
    for (auto& x : raw) x = normal(engine);
    Tensor prompt = Tensor::from({cfg.cert_prompt_len, params.config.d}, std::move(raw), true);
    EncoderParams enc = EncoderParams::init(params.config.d, engine);
    std::vector<ParamGroup> groups{{"prompt", {prompt}, cfg.cert_prompt_lr}};
    for (auto& t : enc.tensors()) groups[0].members.push_back(t);
    if (full) groups.push_back({"backbone", params.tensors(), cfg.cert_backbone_lr});
    Optimizer opt(groups, OptimizerKind::kAdam);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < cfg.cert_steps; ++step) {
        std::vector<Example> batch;
        while (batch.size() < cfg.cert_batch) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), engine);
                cursor = 0;
            }
            batch.push_back(train[order[cursor++]]);
        }
        opt.zero_grad();
        const Tensor logits = forward(params, encode(enc, prompt), batch, task.label_tokens);
        backward(cross_entropy_with_logits(logits, label_indices(batch, task.label_tokens)));
        opt.step();
    }
    params.set_frozen(true);
    const Tensor final_prompt = encode(enc, prompt.detach());
    return detail::accuracy_of(params, final_prompt, test, task.label_tokens);
}

/// Held-out certification: full fine-tuning and prompt-only tuning on fresh rules.
inline CertificationReport certify_backbone(const BackboneParams& params, const TokenWorld& world,
                                            const PretrainConfig& cfg) {
    CertificationReport report;
    auto engine = make_engine(cfg.seed, 0x43455254ULL);
    for (std::size_t t = 0; t < cfg.cert_tasks; ++t) {
        const TaskSpec task = detail::random_pretrain_task(world, engine, {}, 1.0, "cert" + std::to_string(t));
        std::vector<Example> train;
        std::vector<Example> test;
        for (std::size_t i = 0; i < cfg.cert_train; ++i) train.push_back(draw_example(world, task, cfg.min_margin, engine));
        for (std::size_t i = 0; i < cfg.cert_test; ++i) test.push_back(draw_example(world, task, cfg.min_margin, engine));
        report.full_finetune_accuracy.push_back(tune_single_task(params, task, train, test, true, cfg, cfg.seed + t));
        report.prompt_tuning_accuracy.push_back(tune_single_task(params, task, train, test, false, cfg, cfg.seed + t));
        if (cfg.log) {
            cfg.log("certify " + task.task_id + ": full=" + std::to_string(report.full_finetune_accuracy.back()) +
                    " prompt=" + std::to_string(report.prompt_tuning_accuracy.back()));
        }
    }
    auto avg = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    report.full_finetune_mean = avg(report.full_finetune_accuracy);
    report.prompt_tuning_mean = avg(report.prompt_tuning_accuracy);
    report.passed = report.full_finetune_mean >= cfg.cert_full_threshold &&
                    report.prompt_tuning_mean >= cfg.cert_prompt_threshold;
    return report;
}

struct PretrainResult {
    BackboneParams params;
    CertificationReport certification;
};

/// Meta-trains the backbone on a stream of random rules disjoint from
/// `heldout_rules`. Each step draws a rule, encodes it into prompt rows through
/// a learned per-row code plus noise, and trains on a batch of its examples.
/// The result is frozen; when `require_certification` is set, failing either
/// certification threshold raises kCertificationFailed.
inline PretrainResult pretrain_backbone(const ModelConfig& model, const TokenWorld& world, const PretrainConfig& cfg,
                                        const std::vector<std::vector<double>>& heldout_rules = {},
                                        bool require_certification = true) {
    if (model.vocab != world.config().vocab || model.seq_len != world.config().seq_len) {
        fail(ErrorCode::kInvalidArgument, "pretrain: model and world disagree on vocab or seq_len");
    }
    auto engine = make_engine(cfg.seed, 0x50524554ULL);
    BackboneParams params = BackboneParams::init(model, engine, &world);
    const std::size_t rdim = world.config().rule_dim;
    const std::size_t max_len = model.max_prompt_len;
    // Prompt row i of a rule r is r^T C_i: one learned rdim×d code per row.
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> code_init(rdim * max_len * model.d);
    for (auto& x : code_init) x = unit(engine);
    Tensor code = Tensor::from({rdim, max_len * model.d}, std::move(code_init), true);

    std::vector<ParamGroup> groups{{"backbone", params.tensors(), cfg.lr}, {"code", {code}, cfg.lr}};
    Optimizer opt(groups, OptimizerKind::kAdam);
    std::uniform_int_distribution<std::size_t> len_dist(cfg.min_prompt_len, max_len);
    double running = 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const TaskSpec task = detail::random_pretrain_task(world, engine, heldout_rules, cfg.max_heldout_cosine, "pre");
        std::vector<Example> batch;
        for (std::size_t i = 0; i < cfg.batch; ++i) batch.push_back(draw_example(world, task, cfg.min_margin, engine));
        const std::size_t m = len_dist(engine);
        std::vector<double> noise(m * model.d);
        for (auto& x : noise) x = cfg.prompt_noise * unit(engine);
        const Tensor rows = reshape(matmul(Tensor::from({1, rdim}, task.rule), code), {max_len, model.d});
        const Tensor prompt = add(slice_rows(rows, 0, m), Tensor::from({m, model.d}, std::move(noise)));

        opt.zero_grad();
        const Tensor logits = forward(params, prompt, batch, task.label_tokens);
        const Tensor loss = cross_entropy_with_logits(logits, label_indices(batch, task.label_tokens));
        running = step == 0 ? loss.item() : 0.98 * running + 0.02 * loss.item();
        backward(loss);
        opt.step();
        if (cfg.log && (step + 1) % 100 == 0) {
            cfg.log("pretrain step " + std::to_string(step + 1) + " loss " + std::to_string(running));
        }
    }
    params.set_frozen(true);
    PretrainResult result{std::move(params), {}};
    result.certification = certify_backbone(result.params, world, cfg);
    if (require_certification && !result.certification.passed) {
        fail(ErrorCode::kCertificationFailed,
             "backbone not prompt-steerable: full fine-tune mean " +
                 std::to_string(result.certification.full_finetune_mean) + " (need " +
                 std::to_string(cfg.cert_full_threshold) + "), prompt tuning mean " +
                 std::to_string(result.certification.prompt_tuning_mean) + " (need " +
                 std::to_string(cfg.cert_prompt_threshold) + ")");
    }
    return result;
}

}  // namespace compt
