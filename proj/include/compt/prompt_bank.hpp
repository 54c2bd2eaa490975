// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Trainable prompt state (shared source prompts, per-task private prompts and
// their encoders) and the checkpoint format that persists it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compt/backbone.hpp"
#include "compt/composition.hpp"
#include "compt/encoder.hpp"
#include "compt/rng.hpp"
#include "compt/router.hpp"
#include "compt/tensor.hpp"

namespace compt {

/// An m×d matrix of prompt-token embeddings.
struct SoftPrompt {
    std::string id;
    Tensor tokens;

    [[nodiscard]] std::size_t length() const { return tokens.rows(); }
    [[nodiscard]] std::size_t width() const { return tokens.cols(); }
};

struct PromptBank {
    CompositionMethod method = CompositionMethod::kSSUM;
    std::size_t source_len = 0;
    std::size_t private_len = 0;
    std::size_t d = 0;
    std::vector<SoftPrompt> sources;
    std::vector<EncoderParams> source_encoders;
    std::vector<std::string> task_ids;  // registration order; row order of the router
    std::map<std::string, SoftPrompt> privates;
    std::map<std::string, EncoderParams> private_encoders;

    [[nodiscard]] std::size_t num_sources() const { return sources.size(); }
    [[nodiscard]] std::size_t num_tasks() const { return task_ids.size(); }

    [[nodiscard]] std::size_t task_index(const std::string& id) const {
        for (std::size_t i = 0; i < task_ids.size(); ++i) {
            if (task_ids[i] == id) return i;
        }
        fail(ErrorCode::kUnknownTask, "task '" + id + "' has no private prompt");
    }

    [[nodiscard]] const SoftPrompt& private_prompt(const std::string& id) const {
        const auto it = privates.find(id);
        if (it == privates.end()) fail(ErrorCode::kUnknownTask, "task '" + id + "' has no private prompt");
        return it->second;
    }

    [[nodiscard]] const EncoderParams& private_encoder(const std::string& id) const {
        const auto it = private_encoders.find(id);
        if (it == private_encoders.end()) fail(ErrorCode::kUnknownTask, "task '" + id + "' has no private encoder");
        return it->second;
    }

    /// Source prompts and their encoders.
    [[nodiscard]] std::vector<Tensor> source_tensors() const {
        std::vector<Tensor> out;
        for (const auto& s : sources) out.push_back(s.tokens);
        for (const auto& e : source_encoders) {
            for (auto& t : e.tensors()) out.push_back(t);
        }
        return out;
    }

    /// Private prompts and their encoders, in task order.
    [[nodiscard]] std::vector<Tensor> private_tensors() const {
        std::vector<Tensor> out;
        for (const auto& id : task_ids) {
            out.push_back(private_prompt(id).tokens);
            for (auto& t : private_encoder(id).tensors()) out.push_back(t);
        }
        return out;
    }

    /// Throws kInvalidArgument when a length or registration invariant is broken.
    void check_invariants() const {
        auto bad = [](const std::string& msg) { fail(ErrorCode::kInvalidArgument, "prompt bank: " + msg); };
        if (sources.size() != source_encoders.size()) bad("one encoder per source required");
        if (uses_sources(method) && sources.empty()) bad("composition needs at least one source");
        for (const auto& s : sources) {
            if (s.length() != source_len || s.width() != d) bad("source '" + s.id + "' has shape " + shape_str(s.tokens.shape()));
        }
        const std::size_t want = method == CompositionMethod::kPT ? source_len
                                                                  : target_length(method, sources.size(), source_len);
        if (private_len != want) bad("private_len " + std::to_string(private_len) + " expected " + std::to_string(want));
        if (privates.size() != task_ids.size() || private_encoders.size() != task_ids.size()) {
            bad("every task needs exactly one private prompt and encoder");
        }
        for (const auto& id : task_ids) {
            const auto& p = private_prompt(id);
            if (p.length() != private_len || p.width() != d) bad("private '" + id + "' has shape " + shape_str(p.tokens.shape()));
        }
        for (const auto& t : source_tensors()) {
            for (double v : t.data()) {
                if (!std::isfinite(v)) bad("non-finite source parameter");
            }
        }
        for (const auto& t : private_tensors()) {
            for (double v : t.data()) {
                if (!std::isfinite(v)) bad("non-finite private parameter");
            }
        }
    }
};

/// Random bank: prompts i.i.d. Normal(0, 0.02^2), Kaiming encoders. PT banks
/// carry no sources. MCAT private prompts span all M source blocks.
inline PromptBank init_bank(std::size_t num_sources, const std::vector<std::string>& task_ids, std::size_t source_len,
                            std::size_t d, CompositionMethod method, std::uint64_t seed) {
    if (task_ids.empty()) fail(ErrorCode::kInvalidArgument, "init_bank: no tasks");
    if (source_len == 0 || d == 0) fail(ErrorCode::kInvalidArgument, "init_bank: source_len and d must be positive");
    if (uses_sources(method) && num_sources == 0) fail(ErrorCode::kInvalidArgument, "init_bank: M must be >= 1");
    PromptBank bank;
    bank.method = method;
    bank.source_len = source_len;
    bank.d = d;
    const std::size_t m_sources = uses_sources(method) ? num_sources : 0;
    bank.private_len = method == CompositionMethod::kPT ? source_len : target_length(method, m_sources, source_len);

    auto engine = make_engine(seed, 0x42414E4BULL);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto draw = [&](std::size_t rows) {
        std::vector<double> v(rows * d);
        for (auto& x : v) x = normal(engine);
        return Tensor::from({rows, d}, std::move(v), true);
    };
    for (std::size_t s = 0; s < m_sources; ++s) {
        bank.sources.push_back({"source" + std::to_string(s), draw(source_len)});
        bank.source_encoders.push_back(EncoderParams::init(d, engine));
    }
    for (const auto& id : task_ids) {
        if (bank.privates.count(id)) fail(ErrorCode::kInvalidArgument, "init_bank: duplicate task '" + id + "'");
        bank.task_ids.push_back(id);
        bank.privates.emplace(id, SoftPrompt{id, draw(bank.private_len)});
        bank.private_encoders.emplace(id, EncoderParams::init(d, engine));
    }
    return bank;
}

inline PromptBank init_bank(std::size_t num_sources, std::size_t num_tasks, std::size_t source_len, std::size_t d,
                            CompositionMethod method, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < num_tasks; ++i) ids.push_back("task" + std::to_string(i));
    return init_bank(num_sources, ids, source_len, d, method, seed);
}

/// Encodes every prompt with its own encoder.
struct EncodedBank {
    std::vector<Tensor> sources;
    Tensor private_prompt;
};

inline EncodedBank encode_for_task(const PromptBank& bank, const std::string& task_id) {
    EncodedBank out;
    for (std::size_t s = 0; s < bank.sources.size(); ++s) {
        out.sources.push_back(encode(bank.source_encoders[s], bank.sources[s].tokens));
    }
    out.private_prompt = encode(bank.private_encoder(task_id), bank.private_prompt(task_id).tokens);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

enum class WeightsMode { kLearned, kConstant };

inline std::string_view weights_mode_name(WeightsMode m) { return m == WeightsMode::kLearned ? "learned" : "constant"; }

inline WeightsMode parse_weights_mode(std::string_view s) {
    if (s == "learned") return WeightsMode::kLearned;
    if (s == "constant") return WeightsMode::kConstant;
    fail(ErrorCode::kInvalidArgument, "unknown weights mode '" + std::string(s) + "'");
}

struct PromptCheckpoint {
    int format_version = kCheckpointFormatVersion;
    PromptBank bank;
    std::optional<RouterState> router;  // absent for PT
    WeightsMode weights_mode = WeightsMode::kLearned;
    std::string backbone_sha256;
    std::uint64_t seed = 0;
    PromptPosition position = PromptPosition::kAppend;

    [[nodiscard]] CompositionMethod method() const { return bank.method; }
};

namespace detail {

inline nlohmann::json matrix_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t n = t.cols();
    for (std::size_t r = 0; r < t.rows(); ++r) {
        rows.push_back(std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                                           t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n)));
    }
    return rows;
}

inline Tensor matrix_from_json(const nlohmann::json& j, bool requires_grad) {
    std::vector<double> data;
    std::size_t cols = 0;
    for (const auto& row : j) {
        auto v = row.get<std::vector<double>>();
        if (cols == 0) cols = v.size();
        if (v.size() != cols) fail(ErrorCode::kMalformedFile, "ragged matrix in checkpoint");
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor::from({j.size(), cols}, std::move(data), requires_grad);
}

inline nlohmann::json encoder_json(const EncoderParams& e) {
    return {{"w1", matrix_json(e.w1)},
            {"b1", std::vector<double>(e.b1.data().begin(), e.b1.data().end())},
            {"w2", matrix_json(e.w2)},
            {"b2", std::vector<double>(e.b2.data().begin(), e.b2.data().end())}};
}

inline EncoderParams encoder_from_json(const nlohmann::json& j, bool requires_grad) {
    EncoderParams e;
    e.w1 = matrix_from_json(j.at("w1"), requires_grad);
    auto b1 = j.at("b1").get<std::vector<double>>();
    const std::size_t b1_len = b1.size();  // read before the move below
    e.b1 = Tensor::from({b1_len}, std::move(b1), requires_grad);
    e.w2 = matrix_from_json(j.at("w2"), requires_grad);
    auto b2 = j.at("b2").get<std::vector<double>>();
    const std::size_t b2_len = b2.size();  // read before the move below
    e.b2 = Tensor::from({b2_len}, std::move(b2), requires_grad);
    return e;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const PromptCheckpoint& ck) {
    const auto& bank = ck.bank;
    nlohmann::json sources = nlohmann::json::array();
    nlohmann::json source_encoders = nlohmann::json::array();
    for (std::size_t s = 0; s < bank.sources.size(); ++s) {
        sources.push_back(detail::matrix_json(bank.sources[s].tokens));
        source_encoders.push_back(detail::encoder_json(bank.source_encoders[s]));
    }
    nlohmann::json privates = nlohmann::json::object();
    nlohmann::json private_encoders = nlohmann::json::object();
    for (const auto& id : bank.task_ids) {
        privates[id] = detail::matrix_json(bank.private_prompt(id).tokens);
        private_encoders[id] = detail::encoder_json(bank.private_encoder(id));
    }
    nlohmann::json doc = {{"format_version", ck.format_version},
                          {"method", method_name(bank.method)},
                          {"source_len", bank.source_len},
                          {"private_len", bank.private_len},
                          {"d", bank.d},
                          {"tasks", bank.task_ids},
                          {"privates", privates},
                          {"encoders", {{"privates", private_encoders}}},
                          {"weights_mode", weights_mode_name(ck.weights_mode)},
                          {"backbone_sha256", ck.backbone_sha256},
                          {"seed", ck.seed},
                          {"prompt_position", position_name(ck.position)}};
    if (uses_sources(bank.method)) {
        doc["sources"] = sources;
        doc["encoders"]["sources"] = source_encoders;
    }
    if (ck.router) doc["router_logits"] = detail::matrix_json(ck.router->logits);
    return doc;
}

/// Parses a checkpoint document. With `expected_backbone`, a different
/// backbone fingerprint raises kFingerprintMismatch.
inline PromptCheckpoint checkpoint_from_json(const nlohmann::json& doc,
                                             const std::optional<std::string>& expected_backbone = std::nullopt) {
    try {
        const int version = doc.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion) {
            fail(ErrorCode::kVersionMismatch, "checkpoint format_version " + std::to_string(version) + ", expected " +
                                                  std::to_string(kCheckpointFormatVersion));
        }
        PromptCheckpoint ck;
        ck.backbone_sha256 = doc.at("backbone_sha256").get<std::string>();
        if (expected_backbone && *expected_backbone != ck.backbone_sha256) {
            fail(ErrorCode::kFingerprintMismatch, "checkpoint trained against backbone " + ck.backbone_sha256 +
                                                      ", loading against " + *expected_backbone);
        }
        ck.seed = doc.at("seed").get<std::uint64_t>();
        ck.weights_mode = parse_weights_mode(doc.value("weights_mode", std::string("learned")));
        ck.position = parse_position(doc.value("prompt_position", std::string("append")));
        auto& bank = ck.bank;
        bank.method = parse_method(doc.at("method").get<std::string>());
        bank.source_len = doc.at("source_len").get<std::size_t>();
        bank.private_len = doc.at("private_len").get<std::size_t>();
        bank.d = doc.at("d").get<std::size_t>();
        if (uses_sources(bank.method)) {
            const auto& src = doc.at("sources");
            const auto& enc = doc.at("encoders").at("sources");
            for (std::size_t s = 0; s < src.size(); ++s) {
                bank.sources.push_back({"source" + std::to_string(s), detail::matrix_from_json(src[s], true)});
                bank.source_encoders.push_back(detail::encoder_from_json(enc.at(s), true));
            }
        }
        for (const auto& id : doc.at("tasks")) {
            const auto name = id.get<std::string>();
            bank.task_ids.push_back(name);
            bank.privates.emplace(name, SoftPrompt{name, detail::matrix_from_json(doc.at("privates").at(name), true)});
            bank.private_encoders.emplace(name,
                                          detail::encoder_from_json(doc.at("encoders").at("privates").at(name), true));
        }
        if (doc.contains("router_logits")) {
            ck.router = RouterState{detail::matrix_from_json(doc.at("router_logits"), true), 1e-3};
        }
        bank.check_invariants();
        return ck;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedFile, std::string("checkpoint: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == ErrorCode::kInvalidArgument) fail(ErrorCode::kMalformedFile, e.what());
        throw;
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const PromptCheckpoint& ck) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    out << checkpoint_to_json(ck).dump() << '\n';
}

inline PromptCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const std::optional<std::string>& expected_backbone = std::nullopt) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
    }
    return checkpoint_from_json(doc, expected_backbone);
}

}  // namespace compt
