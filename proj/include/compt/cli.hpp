// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// The `compt` command line. Kept in a header so tests can drive it in-process.

#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "compt/analysis.hpp"
#include "compt/backbone.hpp"
#include "compt/families.hpp"
#include "compt/trainer.hpp"

namespace compt::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    for (const auto& item : split_list(s)) {
        try {
            std::size_t used = 0;
            if constexpr (std::is_floating_point_v<T>) {
                out.push_back(static_cast<T>(std::stod(item, &used)));
            } else {
                if (!item.empty() && item.front() == '-') throw std::invalid_argument(item);
                out.push_back(static_cast<T>(std::stoull(item, &used)));
            }
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            fail(ErrorCode::kInvalidArgument, std::string("bad ") + what + " entry '" + item + "'");
        }
    }
    if (out.empty()) fail(ErrorCode::kInvalidArgument, std::string("empty ") + what + " list");
    return out;
}

/// Flags shared by every training-based subcommand.
struct TrainFlags {
    std::string method = "ssum";
    std::size_t num_sources = 2;
    std::size_t source_len = 0;  // 0 picks the per-method default
    std::size_t k_shot = 8;
    std::string seeds = "1";
    std::string weights = "learned";
    double lr_router = 0.1;
    double lr_source = 0.05;
    double lr_private = 0.02;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    std::string optimizer = "sgd";
    std::string position = "append";
    std::string task_list;
    std::size_t eval_every = 1;

    void attach(CLI::App* app) {
        app->add_option("--method", method, "pt, ssum, msum or mcat")
            ->check(CLI::IsMember({"pt", "ssum", "msum", "mcat"}, CLI::ignore_case));
        app->add_option("--num-sources", num_sources, "number of shared source prompts");
        app->add_option("--source-len", source_len, "source prompt length (default 20, 10 for mcat)");
        app->add_option("--k-shot", k_shot, "training examples per task");
        app->add_option("--seeds", seeds, "comma-separated seeds");
        app->add_option("--weights", weights, "learned or constant")->check(CLI::IsMember({"learned", "constant"}));
        app->add_option("--lr-router", lr_router);
        app->add_option("--lr-source", lr_source);
        app->add_option("--lr-private", lr_private);
        app->add_option("--epochs", epochs);
        app->add_option("--batch-size", batch_size);
        app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}));
        app->add_option("--position", position, "prompt position: append or prepend")
            ->check(CLI::IsMember({"append", "prepend"}));
        app->add_option("--task-list", task_list, "comma-separated task ids (default: every task)");
        app->add_option("--eval-every", eval_every, "evaluate every N epochs; 0 only at the end");
    }

    [[nodiscard]] TrainConfig config(const TaskFamily& family) const {
        TrainConfig c;
        c.method = parse_method(method);
        c.num_sources = num_sources;
        c.source_len = source_len != 0 ? source_len : (c.method == CompositionMethod::kMCAT ? 10 : 20);
        c.k_shot = k_shot;
        c.weights_mode = parse_weights_mode(weights);
        c.lr_router = lr_router;
        c.lr_source = lr_source;
        c.lr_private = lr_private;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.optimizer = optimizer == "adam" ? OptimizerKind::kAdam : OptimizerKind::kSgd;
        c.prompt_position = parse_position(position);
        c.task_list = task_list.empty() ? family.task_ids() : split_list(task_list);
        c.eval_every = eval_every;
        c.seed = seed_list().front();
        c.validate();
        return c;
    }

    [[nodiscard]] std::vector<std::uint64_t> seed_list() const { return parse_list<std::uint64_t>(seeds, "seed"); }
};

struct Context {
    std::string out = "out";
    std::string backbone;
    std::string tasks;

    [[nodiscard]] fs::path out_dir() const { return out; }
    [[nodiscard]] fs::path backbone_path() const { return backbone.empty() ? out_dir() / "backbone.json" : fs::path(backbone); }
    [[nodiscard]] fs::path tasks_dir() const { return tasks.empty() ? out_dir() / "tasks" / "transfer" : fs::path(tasks); }
    [[nodiscard]] fs::path reports() const { return out_dir() / "reports"; }

    void attach(CLI::App* app, bool needs_backbone, bool needs_tasks) {
        app->add_option("--out", out, "output directory");
        if (needs_backbone) app->add_option("--backbone", backbone, "backbone file (default OUT/backbone.json)");
        if (needs_tasks) app->add_option("--tasks", tasks, "task family directory (default OUT/tasks/transfer)");
    }
};

inline void write_report(const fs::path& dir, const std::string& name, const nlohmann::json& doc,
                         const std::optional<std::string>& csv) {
    write_json(dir / (name + ".json"), doc);
    if (csv) write_text(dir / (name + ".csv"), *csv);
}

inline void save_run(const Context& ctx, const TrainResult& r) {
    const fs::path dir = ctx.out_dir() / "runs" / r.metrics.run_id;
    write_json(dir / "metrics.json", r.metrics.to_json());
    save_checkpoint(dir / "checkpoint.json", r.checkpoint);
    append_run_index(ctx.out_dir() / "index.csv", r.metrics);
}

/// Run-id stem without the seed suffix.
inline std::string sweep_name(const TrainConfig& c) {
    std::string id = run_id_of(c);
    const auto pos = id.find("-s" + std::to_string(c.seed));
    if (pos != std::string::npos) id.erase(pos, 2 + std::to_string(c.seed).size());
    return id;
}

inline std::map<std::size_t, std::size_t> parse_label_map(const std::string& s) {
    std::map<std::size_t, std::size_t> out;
    for (const auto& item : split_list(s)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) fail(ErrorCode::kInvalidArgument, "label map entry '" + item + "' lacks ':'");
        const auto a = parse_list<std::size_t>(item.substr(0, colon), "label");
        const auto b = parse_list<std::size_t>(item.substr(colon + 1), "label");
        out[a.front()] = b.front();
    }
    return out;
}

inline std::string one_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

}  // namespace detail

/// Runs one `compt` invocation. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    using namespace detail;
    CLI::App app{"compt: composable soft prompts over a frozen synthetic backbone", "compt"};
    app.require_subcommand(1);

    // pretrain-backbone
    Context pre_ctx;
    PretrainConfig pre_cfg;
    std::string pre_path;
    bool pre_reuse = false;
    bool pre_no_cert = false;
    std::uint64_t pre_family_seed = kDefaultFamilySeed;
    auto* pre = app.add_subcommand("pretrain-backbone", "meta-train and certify the frozen backbone");
    pre_ctx.attach(pre, false, false);
    pre->add_option("--backbone", pre_path, "output file (default OUT/backbone.json)");
    pre->add_option("--steps", pre_cfg.steps);
    pre->add_option("--batch", pre_cfg.batch);
    pre->add_option("--lr", pre_cfg.lr);
    pre->add_option("--seed", pre_cfg.seed);
    pre->add_option("--family-seed", pre_family_seed, "preset families whose rules are held out");
    pre->add_flag("--reuse", pre_reuse, "keep an existing backbone that loads and is certified");
    pre->add_flag("--no-certify", pre_no_cert, "save even if certification fails");

    // gen-tasks
    Context gen_ctx;
    std::string gen_family = "transfer";
    std::string gen_json;
    std::uint64_t gen_seed = kDefaultFamilySeed;
    auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task family");
    gen_ctx.attach(gen, false, false);
    gen->add_option("--family", gen_family, "preset name: transfer, inclusion or shared");
    gen->add_option("--family-json", gen_json, "family spec file (overrides --family)");
    gen->add_option("--seed", gen_seed);

    // train
    Context train_ctx;
    TrainFlags train_flags;
    auto* train_cmd = app.add_subcommand("train", "train prompts, one run per seed");
    train_ctx.attach(train_cmd, true, true);
    train_flags.attach(train_cmd);

    // eval
    Context eval_ctx;
    std::string eval_ck;
    std::string eval_split = "test";
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_ctx.attach(eval_cmd, true, true);
    eval_cmd->add_option("--checkpoint", eval_ck)->required();
    eval_cmd->add_option("--split", eval_split)->check(CLI::IsMember({"train", "dev", "test"}));

    // isolate
    Context iso_ctx;
    std::string iso_ck;
    std::string iso_name = "isolation";
    std::size_t iso_test = 100;
    auto* iso = app.add_subcommand("isolate", "per-source isolation study and weight report");
    iso_ctx.attach(iso, true, true);
    iso->add_option("--checkpoint", iso_ck)->required();
    iso->add_option("--name", iso_name, "report name");
    iso->add_option("--test-size", iso_test);

    // cross-eval
    Context cross_ctx;
    std::string cross_ck;
    std::string cross_a;
    std::string cross_b;
    std::string cross_map;
    auto* cross = app.add_subcommand("cross-eval", "evaluate task A's prompt on task B");
    cross_ctx.attach(cross, true, true);
    cross->add_option("--checkpoint", cross_ck)->required();
    cross->add_option("--prompt-of", cross_a)->required();
    cross->add_option("--eval-on", cross_b)->required();
    cross->add_option("--label-map", cross_map, "A:B token pairs, comma-separated");

    // lr-grid
    Context grid_ctx;
    TrainFlags grid_flags;
    std::string grid_plrs = "0.01,0.02,0.05";
    std::string grid_epochs = "30,50";
    auto* grid = app.add_subcommand("lr-grid", "private learning rate by epochs grid");
    grid_ctx.attach(grid, true, true);
    grid_flags.attach(grid);
    grid->add_option("--private-lrs", grid_plrs);
    grid->add_option("--epochs-list", grid_epochs);

    // include-study
    Context inc_ctx;
    TrainFlags inc_flags;
    std::string inc_extra;
    auto* inc = app.add_subcommand("include-study", "paired runs with and without an extra task");
    inc_ctx.attach(inc, true, true);
    inc_flags.attach(inc);
    inc->add_option("--extra", inc_extra, "task added in the second arm")->required();

    // sweep
    Context sweep_ctx;
    TrainFlags sweep_flags;
    std::string sweep_methods = "pt,ssum,msum,mcat";
    std::string sweep_ks = "8";
    auto* sweep = app.add_subcommand("sweep", "methods by k-shot by seeds table");
    sweep_ctx.attach(sweep, true, true);
    sweep_flags.attach(sweep);
    sweep->add_option("--methods", sweep_methods);
    sweep->add_option("--k-shots", sweep_ks);

    if (!args.empty() && !args.front().starts_with("-") && app.get_subcommand_no_throw(args.front()) == nullptr) {
        err << "error: usage: unknown subcommand '" << one_line(args.front()) << "'\n" << app.help();
        return kExitUsage;
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << one_line(e.what()) << '\n' << app.help();
        return kExitUsage;
    }

    try {
        if (*pre) {
            const fs::path path = pre_path.empty() ? pre_ctx.out_dir() / "backbone.json" : fs::path(pre_path);
            if (pre_reuse && fs::exists(path)) {
                const auto existing = load_backbone(path);
                if (existing.certification.value("passed", false)) {
                    out << nlohmann::json{{"backbone", path.string()}, {"sha256", existing.params.fingerprint()},
                                          {"reused", true}}
                               .dump()
                        << '\n';
                    return kExitOk;
                }
            }
            const WorldConfig wc;
            const TokenWorld world(wc);
            pre_cfg.log = [&err](const std::string& s) { err << s << '\n'; };
            auto result = pretrain_backbone(ModelConfig{}, world, pre_cfg, preset_rules(world, pre_family_seed),
                                            !pre_no_cert);
            save_backbone(path, result.params, wc, result.certification.to_json());
            out << nlohmann::json{{"backbone", path.string()},
                                  {"sha256", result.params.fingerprint()},
                                  {"certification", result.certification.to_json()}}
                       .dump()
                << '\n';
        } else if (*gen) {
            FamilySpec spec;
            if (!gen_json.empty()) {
                std::ifstream in(gen_json);
                if (!in) fail(ErrorCode::kIo, "cannot read " + gen_json);
                try {
                    spec = family_from_json(nlohmann::json::parse(in));
                } catch (const nlohmann::json::exception& e) {
                    fail(ErrorCode::kMalformedFile, gen_json + ": " + e.what());
                }
            } else {
                spec = family_preset(gen_family);
            }
            const TokenWorld world{WorldConfig{}};
            const auto family = generate_task_family(world, gen_seed, spec);
            const fs::path dir = gen_ctx.out_dir() / "tasks" / spec.name;
            save_family(family, dir);
            out << nlohmann::json{{"tasks_dir", dir.string()}, {"tasks", family.task_ids()}}.dump() << '\n';
        } else if (*train_cmd) {
            const auto bb = load_backbone(train_ctx.backbone_path());
            const auto family = load_family(train_ctx.tasks_dir());
            const auto config = train_flags.config(family);
            const auto seeds = train_flags.seed_list();
            const auto sweep_result = run_seed_sweep(config, seeds, bb.params, family,
                                                     [&](const TrainResult& r) { save_run(train_ctx, r); });
            nlohmann::json doc = sweep_result.to_json();
            doc["config"] = config.to_json();
            doc["config"].erase("seed");
            std::vector<std::string> ids;
            for (const auto& r : sweep_result.runs) ids.push_back(r.run_id);
            doc["runs"] = ids;
            if (seeds.size() > 1) write_json(train_ctx.reports() / ("aggregate-" + sweep_name(config) + ".json"), doc);
            out << doc.dump() << '\n';
        } else if (*eval_cmd) {
            const auto bb = load_backbone(eval_ctx.backbone_path());
            const auto family = load_family(eval_ctx.tasks_dir());
            const auto ck = load_checkpoint(eval_ck, bb.params.fingerprint());
            nlohmann::json acc = nlohmann::json::object();
            for (const auto& id : ck.bank.task_ids) {
                acc[id] = evaluate(ck, bb.params, family.task(id), parse_split(eval_split));
            }
            out << nlohmann::json{{"split", eval_split}, {"accuracy", acc}}.dump() << '\n';
        } else if (*iso) {
            const auto bb = load_backbone(iso_ctx.backbone_path());
            const auto family = load_family(iso_ctx.tasks_dir());
            const auto ck = load_checkpoint(iso_ck, bb.params.fingerprint());
            const auto report = isolation_study(ck, bb.params, family, ck.bank.task_ids, iso_test);
            write_report(iso_ctx.reports(), iso_name, report.to_json(), report.to_csv());
            nlohmann::json doc = {{"isolation", report.to_json()}};
            if (ck.router) {
                const auto weights = weight_report(ck);
                write_report(iso_ctx.reports(), iso_name + "-weights", weights.to_json(), weights.to_csv());
                doc["weights"] = weights.to_json();
            }
            out << doc.dump() << '\n';
        } else if (*cross) {
            const auto bb = load_backbone(cross_ctx.backbone_path());
            const auto family = load_family(cross_ctx.tasks_dir());
            const auto ck = load_checkpoint(cross_ck, bb.params.fingerprint());
            std::optional<std::map<std::size_t, std::size_t>> map;
            if (!cross_map.empty()) map = parse_label_map(cross_map);
            const auto r = cross_task_eval(ck, bb.params, family, cross_a, cross_b, map);
            write_report(cross_ctx.reports(), "cross-" + cross_a + "-" + cross_b, r.to_json(), std::nullopt);
            out << r.to_json().dump() << '\n';
        } else if (*grid) {
            const auto bb = load_backbone(grid_ctx.backbone_path());
            const auto family = load_family(grid_ctx.tasks_dir());
            const auto config = grid_flags.config(family);
            const auto g = lr_grid(config, parse_list<double>(grid_plrs, "private lr"),
                                   parse_list<std::size_t>(grid_epochs, "epochs"), bb.params, family);
            write_report(grid_ctx.reports(), "lr-grid-" + sweep_name(config), g.to_json(), g.to_csv());
            out << g.to_json().dump() << '\n';
        } else if (*inc) {
            const auto bb = load_backbone(inc_ctx.backbone_path());
            const auto family = load_family(inc_ctx.tasks_dir());
            TrainFlags flags = inc_flags;
            if (flags.task_list.empty()) {
                // Default base list: every task except the extra one.
                for (const auto& id : family.task_ids()) {
                    if (id != inc_extra) flags.task_list += (flags.task_list.empty() ? "" : ",") + id;
                }
            }
            const auto config = flags.config(family);
            const auto report = inclusion_study(config, inc_extra, bb.params, family, flags.seed_list());
            write_report(inc_ctx.reports(), "inclusion-" + inc_extra, report.to_json(), report.to_csv());
            out << report.to_json().dump() << '\n';
        } else if (*sweep) {
            const auto bb = load_backbone(sweep_ctx.backbone_path());
            const auto family = load_family(sweep_ctx.tasks_dir());
            const auto methods = split_list(sweep_methods);
            const auto ks = parse_list<std::size_t>(sweep_ks, "k-shot");
            nlohmann::json rows = nlohmann::json::array();
            std::string csv = "method,k_shot,mean,std,seeds\n";
            for (const auto& m : methods) {
                for (auto k : ks) {
                    TrainFlags flags = sweep_flags;
                    flags.method = m;
                    flags.k_shot = k;
                    const auto config = flags.config(family);
                    const auto r = run_seed_sweep(config, flags.seed_list(), bb.params, family,
                                                  [&](const TrainResult& tr) { save_run(sweep_ctx, tr); });
                    rows.push_back({{"method", m}, {"k_shot", k}, {"result", r.to_json()}});
                    csv += m + "," + std::to_string(k) + "," + format_double(r.average.mean) + "," +
                           format_double(r.average.std) + "," + std::to_string(r.runs.size()) + "\n";
                }
            }
            write_report(sweep_ctx.reports(), "sweep", {{"rows", rows}}, csv);
            out << nlohmann::json{{"rows", rows}}.dump() << '\n';
        }
    } catch (const Error& e) {
        err << "error: " << one_line(e.what()) << '\n';
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "error: internal: " << one_line(e.what()) << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace compt::cli
