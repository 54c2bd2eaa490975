// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Each invocation checks one numbered criterion and prints
// a single line "criterion N: PASS|FAIL <details>". Exit status is 0 on PASS,
// 1 on FAIL and 2 when the criterion could not be evaluated. With
// --expected-failure a FAIL exits with 77 instead, which ctest reports as
// skipped rather than hiding it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "compt/analysis.hpp"
#include "compt/families.hpp"
#include "compt/platform.hpp"
#include "gradient_suite.hpp"

namespace compt::acceptance {
namespace {

namespace fs = std::filesystem;

struct Outcome {
    bool pass = false;
    std::string details;
    nlohmann::json data = nlohmann::json::object();
};

/// Process CPU seconds, the budget the runtime limits refer to.
double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << std::fixed << v;
    return s.str();
}

std::string pp(double v) { return fmt(100.0 * v, 1) + "pp"; }

const std::vector<CompositionMethod> kComposed{CompositionMethod::kSSUM, CompositionMethod::kMSUM,
                                               CompositionMethod::kMCAT};
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

// Settings for the trained-prompt criteria. The library defaults (30 epochs,
// router lr 0.1) leave the router almost untrained because the relaxed-Bernoulli
// gradient at tau near 5 is tiny, so these were tuned once on the transfer
// family and then fixed.
TrainConfig experiment_config(CompositionMethod method, std::size_t k, std::uint64_t seed,
                              const TaskFamily& family) {
    TrainConfig c;
    c.method = method;
    c.num_sources = 2;
    c.source_len = method == CompositionMethod::kMCAT ? 10 : 20;
    c.k_shot = k;
    c.epochs = 60;
    c.batch_size = 8;
    c.lr_router = 100.0;
    c.lr_source = 0.2;
    c.lr_private = 0.02;
    c.seed = seed;
    c.eval_every = 0;
    c.task_list = family.task_ids();
    return c;
}

struct Artifacts {
    fs::path dir;

    [[nodiscard]] BackboneFile backbone() const {
        const auto path = dir / "backbone.json";
        auto bb = load_backbone(path);
        if (!bb.certification.value("passed", false)) {
            fail(ErrorCode::kCertificationFailed, path.string() + " is not a certified backbone");
        }
        return bb;
    }

    void write(int criterion, const Outcome& o) const {
        fs::create_directories(dir);
        std::ofstream(dir / ("acceptance-" + std::to_string(criterion) + ".json"))
            << nlohmann::json{{"criterion", criterion}, {"pass", o.pass}, {"details", o.details}, {"data", o.data}}
                   .dump(2)
            << '\n';
    }
};

TaskFamily preset_family(const BackboneFile& bb, const std::string& name) {
    return generate_task_family(TokenWorld(bb.world), kDefaultFamilySeed, family_preset(name));
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
    const double start = cpu_seconds();
    const auto ops = testing::op_gradient_suite(100, 101);
    const auto pipes = testing::pipeline_gradient_suite(100, 102);
    const double elapsed = cpu_seconds() - start;
    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    for (const auto* report : {&ops, &pipes}) {
        for (const auto& [name, err] : *report) {
            o.data["max_rel_error"][name] = err;
            if (!(err <= worst)) {
                worst = err;
                worst_name = name;
            }
        }
    }
    o.data["cpu_seconds"] = elapsed;
    o.pass = worst < 1e-4 && elapsed < 120.0 && ops.size() == 21 && pipes.size() == 4;
    o.details = std::to_string(ops.size()) + " ops + " + std::to_string(pipes.size()) +
                " pipelines x 100 points, worst " + worst_name + " rel err " + fmt(worst, 10) + " (< 1e-4), " +
                fmt(elapsed, 1) + "s CPU (< 120s)";
    return o;
}

// ---------------------------------------------------------------------------

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

Outcome composition_identities() {
    std::mt19937_64 engine(2);
    const std::size_t d = 64;
    auto rnd = [&](std::size_t rows) { return testing::random_tensor({rows, d}, engine); };
    std::map<std::string, double> errs;

    // Additive identity.
    {
        const auto src = rnd(20);
        const auto out = compose(CompositionMethod::kSSUM, Tensor::zeros({20, d}), {src}, Tensor::from({1, 1}, {1.0}));
        errs["ssum_additive_identity"] = max_abs_diff(out, src);
    }
    // Multiplicative identity against a hand-written weighted sum.
    {
        const std::vector<Tensor> srcs{rnd(20), rnd(20), rnd(20)};
        const std::vector<double> w{0.2, 0.5, 0.3};
        std::vector<double> oracle(20 * d, 0.0);
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t i = 0; i < oracle.size(); ++i) oracle[i] += w[s] * srcs[s].data()[i];
        }
        const auto out = compose(CompositionMethod::kMSUM, Tensor::full({20, d}, 1.0), srcs, Tensor::from({1, 3}, w));
        errs["msum_multiplicative_identity"] = max_abs_diff(out, Tensor::from({20, d}, oracle));
    }
    // MCAT block layout by slicing.
    {
        const auto pu = rnd(20);
        const std::vector<Tensor> srcs{rnd(10), rnd(10)};
        const std::vector<double> w{0.35, 0.65};
        const auto out = compose(CompositionMethod::kMCAT, pu, srcs, Tensor::from({1, 2}, w));
        double err = out.rows() == 20 ? 0.0 : INFINITY;
        for (std::size_t r = 0; r < 20 && out.rows() == 20; ++r) {
            const std::size_t s = r / 10;
            for (std::size_t c = 0; c < d; ++c) {
                const double want = pu.data()[r * d + c] * w[s] * srcs[s].data()[(r % 10) * d + c];
                err = std::max(err, std::abs(out.data()[r * d + c] - want));
            }
        }
        errs["mcat_block_layout"] = err;
        errs["mcat_target_length"] = target_length(CompositionMethod::kMCAT, 3, 10) == 30 ? 0.0 : INFINITY;
        errs["ssum_target_length"] = target_length(CompositionMethod::kSSUM, 3, 20) == 20 ? 0.0 : INFINITY;
        errs["pt_target_length"] = target_length(CompositionMethod::kPT, 5, 20) == 20 ? 0.0 : INFINITY;
    }
    // PT ignores sources and weights.
    {
        const auto pu = rnd(20);
        const auto a = compose(CompositionMethod::kPT, pu, {rnd(20), rnd(20)}, Tensor::from({1, 2}, {0.5, 0.5}));
        const auto b = compose(CompositionMethod::kPT, pu, {rnd(20)}, Tensor::from({1, 1}, {1.0}));
        errs["pt_independence"] = std::max(max_abs_diff(a, pu), max_abs_diff(b, pu));
    }
    // Permuting sources together with their weights.
    {
        const std::vector<std::size_t> perm{2, 0, 1};
        const std::vector<Tensor> srcs{rnd(10), rnd(10), rnd(10)};
        const std::vector<double> w{0.1, 0.6, 0.3};
        std::vector<Tensor> psrcs;
        std::vector<double> pw;
        for (auto p : perm) {
            psrcs.push_back(srcs[p]);
            pw.push_back(w[p]);
        }
        for (auto m : {CompositionMethod::kSSUM, CompositionMethod::kMSUM}) {
            const auto pu = rnd(10);
            const auto a = compose(m, pu, srcs, Tensor::from({1, 3}, w));
            const auto b = compose(m, pu, psrcs, Tensor::from({1, 3}, pw));
            errs[std::string(method_name(m)) + "_permutation"] = max_abs_diff(a, b);
        }
        // MCAT: permuting sources with the matching private blocks permutes
        // the output blocks.
        const auto pu = rnd(30);
        std::vector<Tensor> pu_blocks;
        for (auto p : perm) pu_blocks.push_back(slice_rows(pu, p * 10, p * 10 + 10));
        const auto a = compose(CompositionMethod::kMCAT, pu, srcs, Tensor::from({1, 3}, w));
        const auto b = compose(CompositionMethod::kMCAT, concat_rows(pu_blocks), psrcs, Tensor::from({1, 3}, pw));
        std::vector<Tensor> a_blocks;
        for (auto p : perm) a_blocks.push_back(slice_rows(a, p * 10, p * 10 + 10));
        errs["mcat_permutation"] = max_abs_diff(concat_rows(a_blocks), b);
    }

    Outcome o;
    double worst = 0.0;
    for (const auto& [name, e] : errs) {
        o.data[name] = e;
        worst = std::max(worst, e);
    }
    o.pass = worst <= 1e-12;
    o.details = std::to_string(errs.size()) + " identities, worst abs error " + fmt(worst, 15) + " (<= 1e-12)";
    return o;
}

// ---------------------------------------------------------------------------

Outcome router_statistics() {
    Outcome o;
    bool ok = true;
    std::ostringstream det;
    std::mt19937_64 engine(3);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (double w : {-2.0, 0.0, 2.0}) {
        const RouterState state{Tensor::from({1, 1}, {w}), 0.01};
        std::size_t above = 0;
        const std::size_t draws = 10000;
        for (std::size_t i = 0; i < draws; ++i) {
            double u = unif(engine);
            while (u <= 0.0) u = unif(engine);
            const std::vector<double> noise{u};
            if (relaxed_bernoulli(state, 0, noise).at(0) > 0.5) ++above;
        }
        const double frac = static_cast<double>(above) / static_cast<double>(draws);
        const double expect = 1.0 / (1.0 + std::exp(-w));
        o.data["mc_fraction"][fmt(w, 0)] = {frac, expect};
        ok = ok && std::abs(frac - expect) <= 0.02;
        det << "w=" << fmt(w, 0) << ": " << fmt(frac, 4) << " vs " << fmt(expect, 4) << "; ";
    }

    // Inference weights: deterministic and on the simplex.
    bool simplex = true;
    for (int trial = 0; trial < 100; ++trial) {
        RouterState state{testing::random_tensor({4, 3}, engine, -5.0, 5.0), 1.0};
        for (std::size_t t = 0; t < 4; ++t) {
            const auto a = inference_weights(state, t);
            const auto b = inference_weights(state, t);
            double total = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                simplex = simplex && a.data()[j] >= 0.0 && a.data()[j] == b.data()[j];
                total += a.data()[j];
            }
            simplex = simplex && std::abs(total - 1.0) <= 1e-12;
        }
    }
    ok = ok && simplex;
    det << "inference simplex+deterministic " << (simplex ? "yes" : "no") << "; ";

    // Temperature endpoints, both from the schedule and as seen by training.
    const TemperatureSchedule sched{5.0, 1e-3, 1000};
    bool ends = anneal(sched, 0) == 5.0 && anneal(sched, 1000) == 1e-3;
    std::vector<double> seen;
    auto cfg = TrainConfig{};
    cfg.num_sources = 2;
    cfg.source_len = 3;
    cfg.k_shot = 4;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.eval_every = 0;
    cfg.task_list = {"a1", "a2", "b1", "b2"};
    (void)train(cfg, testing::tiny_backbone(), testing::tiny_family(),
                [&](const StepInfo& info) { seen.push_back(info.temperature); });
    ends = ends && !seen.empty() && seen.front() == 5.0 && seen.back() == 1e-3;
    ok = ok && ends;
    det << "tau endpoints " << (ends ? "5.0 and 1e-3 exactly" : "wrong");
    o.pass = ok;
    o.details = det.str();
    return o;
}

// ---------------------------------------------------------------------------

bool all_zero(std::span<const double> g) {
    return std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; });
}

Outcome gradient_routing() {
    // Untrained full-size backbone; routing is a property of the graph, not
    // of the weights.
    const WorldConfig world_cfg;
    const TokenWorld world(world_cfg);
    auto engine = make_engine(4);
    auto bb = BackboneParams::init(ModelConfig{}, engine, &world);
    bb.set_frozen(true);
    const auto family = generate_task_family(world, kDefaultFamilySeed, family_preset("transfer"));
    Outcome o;
    std::size_t steps = 0;
    std::size_t leaks = 0;
    std::size_t stale_sources = 0;
    for (auto m : {CompositionMethod::kPT, CompositionMethod::kSSUM, CompositionMethod::kMSUM,
                   CompositionMethod::kMCAT}) {
        TrainConfig c;
        c.method = m;
        c.source_len = m == CompositionMethod::kMCAT ? 10 : 20;
        c.epochs = 1;
        c.k_shot = 16;
        c.eval_every = 0;
        c.task_list = family.task_ids();
        (void)train(c, bb, family, [&](const StepInfo& info) {
            ++steps;
            for (const auto& id : c.task_list) {
                if (id == *info.task_id) continue;
                std::vector<Tensor> group{info.bank->private_prompt(id).tokens};
                for (const auto& t : info.bank->private_encoder(id).tensors()) group.push_back(t);
                for (const auto& t : group) leaks += all_zero(t.grad()) ? 0 : 1;
            }
            for (const auto& s : info.bank->sources) stale_sources += all_zero(s.tokens.grad()) ? 1 : 0;
            for (const auto& enc : info.bank->source_encoders) {
                for (const auto& t : enc.tensors()) stale_sources += all_zero(t.grad()) ? 1 : 0;
            }
        });
    }
    o.data = {{"steps", steps}, {"foreign_private_nonzero", leaks}, {"source_without_gradient", stale_sources}};
    o.pass = steps > 0 && leaks == 0 && stale_sources == 0;
    o.details = std::to_string(steps) + " steps over one epoch x 4 methods: " + std::to_string(leaks) +
                " foreign private tensors with gradient, " + std::to_string(stale_sources) +
                " source tensors without gradient";
    return o;
}

// ---------------------------------------------------------------------------

Outcome few_shot_transfer(const Artifacts& art) {
    const double start = cpu_seconds();
    const auto bb = art.backbone();
    const auto family = preset_family(bb, "transfer");
    std::map<std::string, std::map<std::size_t, double>> mean;
    Outcome o;
    for (std::size_t k : {8, 32}) {
        for (auto m : {CompositionMethod::kPT, CompositionMethod::kSSUM, CompositionMethod::kMSUM,
                       CompositionMethod::kMCAT}) {
            const auto r = run_seed_sweep(experiment_config(m, k, 1, family), kSeeds, bb.params, family);
            const std::string name(method_name(m));
            mean[name][k] = r.average.mean;
            o.data["runs"][name][std::to_string(k)] = r.to_json();
        }
    }
    const double elapsed = cpu_seconds() - start;
    bool ok = elapsed < 900.0;
    std::ostringstream det;
    det << "PT k8 " << fmt(mean["pt"][8], 3) << " k32 " << fmt(mean["pt"][32], 3) << "; ";
    for (auto m : kComposed) {
        const std::string name(method_name(m));
        const double gap8 = mean[name][8] - mean["pt"][8];
        const double gap32 = mean[name][32] - mean["pt"][32];
        const bool lead = gap8 >= 0.10;
        const bool shrinks = gap32 < gap8;
        ok = ok && lead && shrinks;
        det << name << " " << (gap8 >= 0 ? "+" : "") << pp(gap8) << (lead ? "" : " (<10pp)") << " -> "
            << (gap32 >= 0 ? "+" : "") << pp(gap32) << (shrinks ? "" : " (gap grew)") << "; ";
        o.data["gap"][name] = {{"k8", gap8}, {"k32", gap32}};
    }
    det << fmt(elapsed, 0) << "s CPU (< 900s)";
    o.data["cpu_seconds"] = elapsed;
    o.pass = ok;
    o.details = det.str();
    return o;
}

// ---------------------------------------------------------------------------

Outcome weight_separation(const Artifacts& art) {
    const auto bb = art.backbone();
    const auto family = preset_family(bb, "transfer");
    Outcome o;
    std::size_t separated = 0;
    std::ostringstream det;
    for (auto seed : kSeeds) {
        const auto ck = train(experiment_config(CompositionMethod::kSSUM, 8, seed, family), bb.params, family).checkpoint;
        const auto w = weight_report(ck);
        std::map<std::string, std::vector<double>> group_mean;
        std::map<std::string, std::size_t> group_n;
        for (std::size_t t = 0; t < w.tasks.size(); ++t) {
            const auto& g = family.task(w.tasks[t]).spec.group;
            auto& acc = group_mean[g];
            acc.resize(w.weights[t].size(), 0.0);
            for (std::size_t s = 0; s < acc.size(); ++s) acc[s] += w.weights[t][s];
            ++group_n[g];
        }
        std::vector<std::size_t> preferred;
        bool strong = true;
        det << "seed " << seed << ":";
        for (auto& [g, acc] : group_mean) {
            for (auto& v : acc) v /= static_cast<double>(group_n[g]);
            const auto best = static_cast<std::size_t>(std::max_element(acc.begin(), acc.end()) - acc.begin());
            preferred.push_back(best);
            strong = strong && acc[best] > 0.7;
            det << " " << g << "->src" << best << " " << fmt(acc[best], 3);
        }
        const bool distinct = preferred.size() == 2 && preferred[0] != preferred[1];
        const bool sep = strong && distinct;
        separated += sep ? 1 : 0;
        det << (sep ? " (separated); " : " (not separated); ");
        o.data["seeds"][std::to_string(seed)] = {{"group_weights", group_mean}, {"separated", sep}};
    }
    o.pass = separated >= 2;
    det << separated << "/3 seeds separated (need >= 2)";
    o.details = det.str();
    return o;
}

// ---------------------------------------------------------------------------

Outcome isolation_consistency(const Artifacts& art) {
    const auto bb = art.backbone();
    const auto transfer = preset_family(bb, "transfer");
    Outcome o;
    std::ostringstream det;

    // Total column against plain evaluation, every composed method.
    bool totals = true;
    PromptCheckpoint msum_ck;
    for (auto m : kComposed) {
        auto ck = train(experiment_config(m, 8, 1, transfer), bb.params, transfer).checkpoint;
        const auto report = isolation_study(ck, bb.params, transfer, ck.bank.task_ids, 1000000);
        for (const auto& id : ck.bank.task_ids) {
            totals = totals && report.at(id, "total") == evaluate(ck, bb.params, transfer.task(id), Split::kTest);
        }
        if (m == CompositionMethod::kMSUM) msum_ck = std::move(ck);
    }
    det << "total==evaluate " << (totals ? "exact" : "MISMATCH") << "; ";

    // MSUM without its private factor: the prompt is zero, so the prediction
    // ignores the task. Pooled over the family the accuracy must sit inside a
    // 99% binomial band around chance.
    const auto report = isolation_study(msum_ck, bb.params, transfer, msum_ck.bank.task_ids, 1000000);
    double hits = 0.0;
    double n = 0.0;
    for (const auto& id : msum_ck.bank.task_ids) {
        const double size = static_cast<double>(transfer.task(id).test.size());
        hits += report.at(id, "all_src") * size;
        n += size;
    }
    const double chance = 0.5;  // every task has two labels
    const double pooled = hits / n;
    const double band = 2.576 * std::sqrt(chance * (1.0 - chance) / n);
    const bool at_chance = std::abs(pooled - chance) <= band;
    det << "MSUM private-masked " << fmt(pooled, 3) << " (chance 0.5 +- " << fmt(band, 3) << "); ";
    o.data["msum_private_masked"] = {{"pooled", pooled}, {"band", band}, {"n", n}};

    // Shared-structure family: one source carries the whole task.
    const auto shared = preset_family(bb, "shared");
    const auto ck = train(experiment_config(CompositionMethod::kSSUM, 8, 1, shared), bb.params, shared).checkpoint;
    const auto sr = isolation_study(ck, bb.params, shared, ck.bank.task_ids, 1000000);
    bool single = true;
    for (const auto& id : ck.bank.task_ids) {
        const double best = std::max(sr.at(id, "source0"), sr.at(id, "source1"));
        const double total = sr.at(id, "total");
        single = single && best >= 0.9 * total;
        det << id << " single " << fmt(best, 3) << "/total " << fmt(total, 3) << " ";
        o.data["shared"][id] = {{"best_single", best}, {"total", total}};
    }
    det << (single ? "(>= 90%)" : "(< 90%)");
    o.pass = totals && at_chance && single;
    o.details = det.str();
    return o;
}

// ---------------------------------------------------------------------------

Outcome modularity(const Artifacts& art) {
    const auto bb = art.backbone();
    const auto family = preset_family(bb, "inclusion");
    const std::string extra = "alpha4";
    auto cfg = experiment_config(CompositionMethod::kSSUM, 8, 1, family);
    cfg.task_list.erase(std::remove(cfg.task_list.begin(), cfg.task_list.end(), extra), cfg.task_list.end());
    const auto report = inclusion_study(cfg, extra, bb.params, family, kSeeds);
    const double without = report.relatives_mean(false);
    const double with = report.relatives_mean(true);
    Outcome o;
    o.data = report.to_json();
    o.pass = with > without;
    o.details = "relatives of " + extra + " (" + std::to_string(report.relatives.size()) + " tasks, 3 seeds): " +
                fmt(without, 4) + " without -> " + fmt(with, 4) + " with (" + (with >= without ? "+" : "") +
                pp(with - without) + ")";
    return o;
}

// ---------------------------------------------------------------------------

std::string file_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

Outcome reproducibility(const Artifacts& art) {
    const WorldConfig world_cfg;
    const TokenWorld world(world_cfg);
    auto engine = make_engine(9);
    auto bb = BackboneParams::init(ModelConfig{}, engine, &world);
    bb.set_frozen(true);
    const auto family = generate_task_family(world, kDefaultFamilySeed, family_preset("transfer"));
    Outcome o;
    bool metrics_same = true;
    bool round_trip = true;
    fs::create_directories(art.dir);
    for (auto m : {CompositionMethod::kPT, CompositionMethod::kSSUM, CompositionMethod::kMSUM,
                   CompositionMethod::kMCAT}) {
        TrainConfig c;
        c.method = m;
        c.source_len = m == CompositionMethod::kMCAT ? 10 : 20;
        c.epochs = 2;
        c.seed = 17;
        c.task_list = family.task_ids();
        const auto a = train(c, bb, family);
        const auto b = train(c, bb, family);
        metrics_same = metrics_same && a.metrics.to_json(false).dump() == b.metrics.to_json(false).dump() &&
                       checkpoint_to_json(a.checkpoint).dump() == checkpoint_to_json(b.checkpoint).dump();

        const auto path = art.dir / ("repro-" + std::string(method_name(m)) + ".json");
        save_checkpoint(path, a.checkpoint);
        const auto back = load_checkpoint(path, bb.fingerprint());
        save_checkpoint(path.string() + ".again", back);
        bool same = file_text(path) == file_text(path.string() + ".again");
        for (std::size_t s = 0; s < back.bank.num_sources(); ++s) {
            same = same && bit_equal(back.bank.sources[s].tokens, a.checkpoint.bank.sources[s].tokens);
        }
        for (const auto& id : back.bank.task_ids) {
            same = same && bit_equal(back.bank.private_prompt(id).tokens, a.checkpoint.bank.private_prompt(id).tokens);
            const auto ea = a.checkpoint.bank.private_encoder(id).tensors();
            const auto eb = back.bank.private_encoder(id).tensors();
            for (std::size_t i = 0; i < ea.size(); ++i) same = same && bit_equal(ea[i], eb[i]);
        }
        if (a.checkpoint.router) same = same && back.router && bit_equal(back.router->logits, a.checkpoint.router->logits);
        // Reloaded prompts score exactly as the originals.
        for (const auto& id : back.bank.task_ids) {
            same = same && evaluate(back, bb, family.task(id), Split::kTest) ==
                               evaluate(a.checkpoint, bb, family.task(id), Split::kTest);
        }
        round_trip = round_trip && same;
        fs::remove(path);
        fs::remove(path.string() + ".again");
        o.data[std::string(method_name(m))] = {{"metrics_identical", metrics_same}, {"round_trip", same}};
    }
    o.pass = metrics_same && round_trip;
    o.details = std::string("metrics JSON ") + (metrics_same ? "bit-identical" : "DIFFERS") +
                " across repeated runs; checkpoint round trip " + (round_trip ? "bit-exact" : "NOT exact") +
                " for pt/ssum/msum/mcat";
    return o;
}

}  // namespace
}  // namespace compt::acceptance

int main(int argc, char** argv) {
    using namespace compt::acceptance;
    compt::tune_allocator();
    CLI::App app{"compt acceptance criteria"};
    int criterion = 0;
    std::string artifacts = "artifacts";
    app.add_option("--criterion", criterion, "criterion number 1-9")->required()->check(CLI::Range(1, 9));
    bool expected_failure = false;
    app.add_option("--artifacts", artifacts, "directory holding backbone.json; results are written here");
    app.add_flag("--expected-failure", expected_failure, "exit 77 on FAIL (a known, documented failure)");
    CLI11_PARSE(app, argc, argv);

    const Artifacts art{artifacts};
    const std::map<int, std::function<Outcome()>> checks{
        {1, gradient_suite},
        {2, composition_identities},
        {3, router_statistics},
        {4, gradient_routing},
        {5, [&] { return few_shot_transfer(art); }},
        {6, [&] { return weight_separation(art); }},
        {7, [&] { return isolation_consistency(art); }},
        {8, [&] { return modularity(art); }},
        {9, [&] { return reproducibility(art); }},
    };
    try {
        const auto o = checks.at(criterion)();
        art.write(criterion, o);
        std::cout << "criterion " << criterion << ": " << (o.pass ? "PASS" : "FAIL") << " " << o.details << '\n';
        if (o.pass) return 0;
        return expected_failure ? 77 : 1;
    } catch (const std::exception& e) {
        std::cout << "criterion " << criterion << ": FAIL error: " << e.what() << '\n';
        return 2;
    }
}
