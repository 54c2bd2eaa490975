// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "compt/analysis.hpp"
#include "test_util.hpp"

namespace compt {
namespace {

using testing::tiny_backbone;
using testing::tiny_family;

TrainConfig tiny_config(CompositionMethod method, std::size_t num_sources = 2) {
    TrainConfig c;
    c.method = method;
    c.num_sources = num_sources;
    c.source_len = 3;
    c.k_shot = 4;
    c.epochs = 3;
    c.batch_size = 2;
    c.eval_every = 0;
    c.task_list = {"a1", "a2", "b1", "b2"};
    return c;
}

PromptCheckpoint trained(CompositionMethod method, std::size_t num_sources = 2) {
    return train(tiny_config(method, num_sources), tiny_backbone(), tiny_family()).checkpoint;
}

TEST(Isolation, TotalColumnEqualsPlainEvaluation) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    for (auto m : {CompositionMethod::kSSUM, CompositionMethod::kMSUM, CompositionMethod::kMCAT}) {
        const auto ck = trained(m);
        const auto report = isolation_study(ck, bb, fam, ck.bank.task_ids);
        EXPECT_EQ(report.columns,
                  (std::vector<std::string>{"source0", "source1", "all_src", "private", "total"}));
        for (const auto& id : ck.bank.task_ids) {
            EXPECT_EQ(report.at(id, "total"), evaluate(ck, bb, fam.task(id), Split::kTest)) << id;
        }
    }
}

TEST(Isolation, SingleSourceSsumAllSourcesEqualsTheSource) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kSSUM, 1);
    const auto report = isolation_study(ck, bb, fam, ck.bank.task_ids);
    for (const auto& id : ck.bank.task_ids) EXPECT_EQ(report.at(id, "all_src"), report.at(id, "source0"));
}

// With the private factor masked, MSUM's target prompt is all zeros, so the
// prediction cannot depend on the task at all.
TEST(Isolation, MsumWithoutPrivateMatchesAZeroPrompt) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kMSUM);
    const auto report = isolation_study(ck, bb, fam, ck.bank.task_ids);
    for (const auto& id : ck.bank.task_ids) {
        const auto& task = fam.task(id);
        const TargetPrompt zero{Tensor::zeros({ck.bank.private_len, ck.bank.d}),
                                std::vector<std::uint8_t>(ck.bank.private_len, 1)};
        const double oracle =
            accuracy(predict_examples(bb, zero, task.test, task.spec.label_tokens), task.test);
        EXPECT_EQ(report.at(id, "all_src"), oracle) << id;
    }
}

TEST(Isolation, TestSizeTruncatesAndPtIsRejected) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kSSUM);
    const auto report = isolation_study(ck, bb, fam, {"a1"}, 4);
    for (double v : report.accuracy.front()) {
        EXPECT_DOUBLE_EQ(v * 4.0, std::round(v * 4.0));
    }
    EXPECT_THROW((void)report.at("b1", "total"), Error);
    EXPECT_THROW((void)isolation_study(trained(CompositionMethod::kPT), bb, fam, {"a1"}), Error);
}

TEST(Isolation, ReportsAreReproducible) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto a = isolation_study(trained(CompositionMethod::kMCAT), bb, fam, {"a1", "b2"});
    const auto b = isolation_study(trained(CompositionMethod::kMCAT), bb, fam, {"a1", "b2"});
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    EXPECT_EQ(a.to_csv(), b.to_csv());
}

TEST(Weights, RowsAreSoftmaxOfLogits) {
    const auto ck = trained(CompositionMethod::kSSUM);
    const auto r = weight_report(ck);
    ASSERT_EQ(r.tasks, ck.bank.task_ids);
    for (std::size_t t = 0; t < r.tasks.size(); ++t) {
        double sum = 0.0;
        for (double w : r.weights[t]) sum += w;
        EXPECT_NEAR(sum, 1.0, 1e-12);
        const double oracle = 1.0 / (1.0 + std::exp(r.logits[t][1] - r.logits[t][0]));
        EXPECT_NEAR(r.weights[t][0], oracle, 1e-12);
    }
    EXPECT_NE(r.to_csv().find("task,source,logit,weight"), std::string::npos);
    EXPECT_THROW((void)weight_report(trained(CompositionMethod::kPT)), Error);
}

TEST(Weights, ConstantModeReportsUniformWeights) {
    auto cfg = tiny_config(CompositionMethod::kMSUM);
    cfg.weights_mode = WeightsMode::kConstant;
    const auto ck = train(cfg, tiny_backbone(), tiny_family()).checkpoint;
    const auto r = weight_report(ck);
    for (const auto& row : r.weights) EXPECT_EQ(row, (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(r.to_json().at("weights_mode"), "constant");
}

TEST(CrossEval, SameTaskEqualsEvaluation) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kSSUM);
    const auto r = cross_task_eval(ck, bb, fam, "a2", "a2");
    EXPECT_EQ(r.accuracy, evaluate(ck, bb, fam.task("a2"), Split::kTest));
    std::size_t total = 0;
    std::size_t diagonal = 0;
    for (std::size_t g = 0; g < r.histogram.size(); ++g) {
        for (std::size_t p = 0; p < r.histogram.size(); ++p) total += r.histogram[g][p];
        diagonal += r.histogram[g][g];
    }
    EXPECT_EQ(total, fam.task("a2").test.size());
    EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(diagonal) / static_cast<double>(total));
}

TEST(CrossEval, SwappedLabelMapInvertsAccuracy) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kMSUM);
    const auto& labels = fam.task("b1").spec.label_tokens;
    const std::map<std::size_t, std::size_t> swap{{labels[0], labels[1]}, {labels[1], labels[0]}};
    const auto plain = cross_task_eval(ck, bb, fam, "a1", "b1");
    const auto swapped = cross_task_eval(ck, bb, fam, "a1", "b1", swap);
    EXPECT_DOUBLE_EQ(plain.accuracy + swapped.accuracy, 1.0);
    EXPECT_EQ(plain.histogram[0][0], swapped.histogram[0][1]);
}

TEST(CrossEval, UnmappableLabelsAndUnknownTasksFail) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto ck = trained(CompositionMethod::kSSUM);
    const auto& labels = fam.task("b1").spec.label_tokens;
    const std::map<std::size_t, std::size_t> partial{{labels[0], labels[0]}};
    try {
        (void)cross_task_eval(ck, bb, fam, "a1", "b1", partial);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
    }
    EXPECT_THROW((void)cross_task_eval(ck, bb, fam, "a1", "zz"), Error);
}

TEST(LrGrid, OneCellEqualsAPlainRun) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto base = tiny_config(CompositionMethod::kSSUM);
    const auto grid = lr_grid(base, {0.03}, {2}, bb, fam);
    auto c = base;
    c.lr_private = 0.03;
    c.epochs = 2;
    ASSERT_EQ(grid.cells.size(), 1U);
    EXPECT_EQ(grid.at(0.03, 2).average_test, train(c, bb, fam).metrics.average_test);
    EXPECT_THROW((void)grid.at(0.03, 3), Error);
    EXPECT_THROW((void)lr_grid(base, {}, {2}, bb, fam), Error);
}

TEST(LrGrid, CellsDoNotDependOnOrder) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    const auto base = tiny_config(CompositionMethod::kMCAT);
    const auto a = lr_grid(base, {0.01, 0.05}, {1, 2}, bb, fam);
    const auto b = lr_grid(base, {0.05, 0.01}, {2, 1}, bb, fam);
    for (const auto& cell : a.cells) EXPECT_EQ(cell.average_test, b.at(cell.private_lr, cell.epochs).average_test);
    EXPECT_EQ(a.to_csv().substr(0, 29), "private_lr,epochs,average_tes");
}

TEST(LrGrid, DefaultAxes) {
    EXPECT_EQ(kDefaultGridPrivateLrs, (std::vector<double>{0.01, 0.02, 0.05}));
    EXPECT_EQ(kDefaultGridEpochs, (std::vector<std::size_t>{30, 50}));
}

TEST(Inclusion, PairedRunsOverTheBaseTasksOnly) {
    const auto bb = tiny_backbone();
    const auto fam = tiny_family();
    auto cfg = tiny_config(CompositionMethod::kSSUM);
    cfg.task_list = {"a1", "b1", "b2"};
    const auto report = inclusion_study(cfg, "a2", bb, fam, {1, 2});
    EXPECT_EQ(report.base_tasks, cfg.task_list);
    EXPECT_EQ(report.relatives, (std::vector<std::string>{"a1"}));
    ASSERT_EQ(report.arms.size(), 2U);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(report.config_echo_without[i].at("task_list"), nlohmann::json(cfg.task_list));
        EXPECT_EQ(report.config_echo_with[i].at("task_list"),
                  nlohmann::json(std::vector<std::string>{"a1", "b1", "b2", "a2"}));
        EXPECT_EQ(report.config_echo_without[i].at("seed"), report.config_echo_with[i].at("seed"));
        EXPECT_EQ(report.arms[i].without_extra.size(), 3U);
        EXPECT_EQ(report.arms[i].with_extra.size(), 3U);
        EXPECT_EQ(report.arms[i].with_extra.count("a2"), 0U);
    }
    // The without-extra arm is an ordinary run.
    auto plain = cfg;
    plain.seed = 2;
    const auto r = train(plain, bb, fam).metrics;
    EXPECT_EQ(report.arms[1].without_extra.at("b1"), r.final_test.at("b1"));
    const double oracle = (report.arms[0].with_extra.at("a1") + report.arms[1].with_extra.at("a1")) / 2.0;
    EXPECT_DOUBLE_EQ(report.relatives_mean(true), oracle);
}

TEST(Inclusion, ExtraTaskAlreadyInBaseIsRejected) {
    const auto cfg = tiny_config(CompositionMethod::kSSUM);
    EXPECT_THROW((void)inclusion_study(cfg, "a1", tiny_backbone(), tiny_family()), Error);
}

TEST(Reports, FormatDoubleRoundTrips) {
    for (double v : {0.1, 1.0 / 3.0, 0.7166666666666667, 1e-300, 0.0}) {
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}

}  // namespace
}  // namespace compt
