// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "compt/prompt_bank.hpp"
#include "test_util.hpp"

namespace compt {
namespace {

using testing::values;

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

void expect_same_encoder(const EncoderParams& a, const EncoderParams& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(bit_equal(ta[i], tb[i]));
}

void expect_same_checkpoint(const PromptCheckpoint& a, const PromptCheckpoint& b) {
    EXPECT_EQ(a.method(), b.method());
    EXPECT_EQ(a.seed, b.seed);
    EXPECT_EQ(a.backbone_sha256, b.backbone_sha256);
    EXPECT_EQ(a.bank.task_ids, b.bank.task_ids);
    ASSERT_EQ(a.bank.num_sources(), b.bank.num_sources());
    for (std::size_t s = 0; s < a.bank.num_sources(); ++s) {
        EXPECT_TRUE(bit_equal(a.bank.sources[s].tokens, b.bank.sources[s].tokens));
        expect_same_encoder(a.bank.source_encoders[s], b.bank.source_encoders[s]);
    }
    for (const auto& id : a.bank.task_ids) {
        EXPECT_TRUE(bit_equal(a.bank.private_prompt(id).tokens, b.bank.private_prompt(id).tokens));
        expect_same_encoder(a.bank.private_encoder(id), b.bank.private_encoder(id));
    }
    ASSERT_EQ(a.router.has_value(), b.router.has_value());
    if (a.router) EXPECT_TRUE(bit_equal(a.router->logits, b.router->logits));
}

// Awkward doubles that a lossy text format would get wrong.
PromptCheckpoint awkward_checkpoint(CompositionMethod method) {
    PromptCheckpoint ck;
    ck.bank = init_bank(2, {"t1", "t2"}, 3, 4, method, 9);
    if (!ck.bank.sources.empty()) ck.bank.sources[0].tokens.mutable_data()[0] = 0.1 + 0.2;
    ck.bank.privates.at("t1").tokens.mutable_data()[1] = std::nextafter(1.0, 2.0);
    ck.bank.privates.at("t2").tokens.mutable_data()[2] = 5e-324;
    if (uses_sources(method)) ck.router = RouterState{Tensor::from({2, 2}, {1.0 / 3.0, -2.5e-17, 7.0, 1e300}), 1e-3};
    ck.backbone_sha256 = std::string(64, 'a');
    ck.seed = 1234567890123ULL;
    return ck;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("compt_bank_" + name + ".json");
}

TEST(PromptBank, McatPrivatesSpanAllSourceBlocks) {
    const auto bank = init_bank(2, 3, 10, 64, CompositionMethod::kMCAT, 1);
    EXPECT_EQ(bank.private_len, 20U);
    for (const auto& id : bank.task_ids) EXPECT_EQ(bank.private_prompt(id).length(), 20U);
    for (const auto& s : bank.sources) EXPECT_EQ(s.length(), 10U);
}

TEST(PromptBank, SeededInitIsDeterministic) {
    const auto a = init_bank(1, 1, 20, 64, CompositionMethod::kSSUM, 4);
    const auto b = init_bank(1, 1, 20, 64, CompositionMethod::kSSUM, 4);
    EXPECT_TRUE(bit_equal(a.sources[0].tokens, b.sources[0].tokens));
    EXPECT_TRUE(bit_equal(a.private_prompt("task0").tokens, b.private_prompt("task0").tokens));
    const auto c = init_bank(1, 1, 20, 64, CompositionMethod::kSSUM, 5);
    EXPECT_FALSE(bit_equal(a.sources[0].tokens, c.sources[0].tokens));
}

TEST(PromptBank, ConstructorContract) {
    const auto bank = init_bank(3, 8, 20, 64, CompositionMethod::kSSUM, 2);
    EXPECT_EQ(bank.num_sources(), 3U);
    EXPECT_EQ(bank.num_tasks(), 8U);
    for (const auto& s : bank.sources) EXPECT_EQ(s.tokens.shape(), (Shape{20, 64}));
    for (const auto& id : bank.task_ids) EXPECT_EQ(bank.private_prompt(id).tokens.shape(), (Shape{20, 64}));
    EXPECT_NO_THROW(bank.check_invariants());
}

TEST(PromptBank, InitScaleIsSmallNormal) {
    const auto bank = init_bank(4, 4, 20, 64, CompositionMethod::kSSUM, 3);
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& s : bank.sources) {
        for (double v : s.tokens.data()) {
            ss += v * v;
            ++n;
        }
    }
    EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 0.02, 0.001);
}

TEST(PromptBank, PtBankHasNoSources) {
    const auto bank = init_bank(2, 2, 5, 8, CompositionMethod::kPT, 1);
    EXPECT_EQ(bank.num_sources(), 0U);
    EXPECT_EQ(bank.private_len, 5U);
}

TEST(PromptBank, BadArgumentsAreRejected) {
    EXPECT_THROW((void)init_bank(0, 2, 5, 8, CompositionMethod::kSSUM, 1), Error);
    EXPECT_THROW((void)init_bank(1, 0, 5, 8, CompositionMethod::kSSUM, 1), Error);
    EXPECT_THROW((void)init_bank(1, 2, 0, 8, CompositionMethod::kSSUM, 1), Error);
    EXPECT_THROW((void)init_bank(1, {"a", "a"}, 5, 8, CompositionMethod::kSSUM, 1), Error);
}

TEST(PromptBank, BrokenLengthInvariantIsDetected) {
    auto bank = init_bank(2, 2, 5, 8, CompositionMethod::kMCAT, 1);
    bank.privates.at("task0").tokens = Tensor::zeros({5, 8});
    EXPECT_THROW(bank.check_invariants(), Error);
}

TEST(PromptBank, UnknownTaskIsReported) {
    const auto bank = init_bank(1, 1, 5, 8, CompositionMethod::kSSUM, 1);
    try {
        (void)bank.private_prompt("nope");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kUnknownTask);
    }
}

TEST(Checkpoint, RoundTripIsBitExactForEveryMethod) {
    for (auto m : {CompositionMethod::kPT, CompositionMethod::kSSUM, CompositionMethod::kMSUM, CompositionMethod::kMCAT}) {
        const auto ck = awkward_checkpoint(m);
        const auto path = temp_file(std::string(method_name(m)));
        save_checkpoint(path, ck);
        const auto back = load_checkpoint(path, ck.backbone_sha256);
        expect_same_checkpoint(ck, back);
        // Saving again reproduces the file byte for byte.
        save_checkpoint(path.string() + ".2", back);
        std::ifstream f1(path);
        std::ifstream f2(path.string() + ".2");
        const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        EXPECT_EQ(s1, s2);
        std::filesystem::remove(path);
        std::filesystem::remove(path.string() + ".2");
    }
}

TEST(Checkpoint, PtCheckpointCarriesNoRouterOrSources) {
    const auto doc = checkpoint_to_json(awkward_checkpoint(CompositionMethod::kPT));
    EXPECT_FALSE(doc.contains("router_logits"));
    EXPECT_TRUE(!doc.contains("sources") || doc.at("sources").empty());
}

TEST(Checkpoint, BumpedVersionIsRejected) {
    auto doc = checkpoint_to_json(awkward_checkpoint(CompositionMethod::kSSUM));
    doc["format_version"] = kCheckpointFormatVersion + 1;
    try {
        (void)checkpoint_from_json(doc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kVersionMismatch);
    }
}

TEST(Checkpoint, DifferentBackboneIsRejected) {
    const auto doc = checkpoint_to_json(awkward_checkpoint(CompositionMethod::kSSUM));
    try {
        (void)checkpoint_from_json(doc, std::string(64, 'b'));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kFingerprintMismatch);
    }
    EXPECT_NO_THROW((void)checkpoint_from_json(doc, std::string(64, 'a')));
}

TEST(Checkpoint, MalformedFilesAreRejected) {
    const auto path = temp_file("malformed");
    {
        std::ofstream out(path);
        out << "{not json";
    }
    try {
        (void)load_checkpoint(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kMalformedFile);
    }
    auto doc = checkpoint_to_json(awkward_checkpoint(CompositionMethod::kMSUM));
    doc.erase("privates");
    try {
        (void)checkpoint_from_json(doc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kMalformedFile);
    }
    std::filesystem::remove(path);
    try {
        (void)load_checkpoint(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kIo);
    }
}

TEST(EncodedBank, EachPromptUsesItsOwnEncoder) {
    const auto bank = init_bank(2, 2, 3, 4, CompositionMethod::kSSUM, 6);
    const auto enc = encode_for_task(bank, "task1");
    ASSERT_EQ(enc.sources.size(), 2U);
    EXPECT_EQ(values(enc.sources[1]), values(encode(bank.source_encoders[1], bank.sources[1].tokens)));
    EXPECT_EQ(values(enc.private_prompt),
              values(encode(bank.private_encoder("task1"), bank.private_prompt("task1").tokens)));
}

}  // namespace
}  // namespace compt
