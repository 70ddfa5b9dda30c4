// rsprompt: command-line front end for the experiment pipeline.
//
// Exit codes: 0 success, 1 task failure, 2 configuration error.

#include "rsprompt/app/plan.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace rsprompt;

namespace {

struct Flags {
    std::string config;
    std::vector<std::string> datasets;
    std::vector<std::string> methods;
    std::vector<int> shots;
    std::vector<int> seeds;
    std::string backbone;
    std::string data_root;
    std::string splits;
    std::string out;
    std::string template_text;
    unsigned jobs = 1;
    bool resume = false;
    bool force = false;
    bool dry_run = false;
    bool verbose = false;
    std::string checkpoint;
    double test_fraction = -1;
    int split_seed = -1;
};

constexpr int kTaskFailure = 1;
constexpr int kConfigError = 2;

/// Config document from --config (or the saved config of a resumed run), with the
/// cell-selection flags applied; path flags are applied after the environment.
/// `forced_methods` replaces the config's methods unless --method is given.
ExperimentConfig load_config(const Flags& f, const std::vector<std::string>& forced_methods, bool need_cells = true) {
    nlohmann::json doc = nlohmann::json::object();
    fs::path base;
    if (!f.config.empty()) {
        doc = read_config_document(f.config);
        base = fs::path(f.config).parent_path();
    } else if (f.resume) {
        if (f.out.empty()) throw ConfigError("--resume needs --out (or --config)");
        auto saved = read_json(fs::path(f.out) / "config.json");
        doc = saved.at("config");
        for (auto& [m, o] : doc["method_overrides"].items()) o.erase("method");
        doc["paths"] = {{"out", f.out}};
    }
    if (!f.datasets.empty()) doc["datasets"] = f.datasets;
    if (!f.methods.empty())
        doc["methods"] = f.methods;
    else if (!forced_methods.empty())
        doc["methods"] = forced_methods;
    if (!f.shots.empty()) doc["shots"] = f.shots;
    if (!f.seeds.empty()) doc["seeds"] = f.seeds;
    if (!f.template_text.empty()) doc["zeroshot"]["template"] = f.template_text;
    if (f.test_fraction >= 0) doc["splits"]["test_fraction"] = f.test_fraction;
    if (f.split_seed >= 0) doc["splits"]["seed"] = f.split_seed;
    auto cfg = config_from_json(doc, base, need_cells);
    if (!f.backbone.empty()) cfg.paths.backbone = f.backbone;
    if (!f.data_root.empty()) cfg.paths.data_root = f.data_root;
    if (!f.splits.empty()) cfg.paths.splits = f.splits;
    if (!f.out.empty()) cfg.paths.out = f.out;
    return cfg;
}

std::string pct(double a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * a);
    return buf;
}

void print_reports(const std::vector<EvalReport>& reports) {
    for (const auto& r : reports) {
        std::cout << r.dataset << " " << r.method;
        if (r.method == "zeroshot")
            std::cout << " template=\"" << (r.provenance.count("template") ? r.provenance.at("template") : "") << "\"";
        else
            std::cout << " shots=" << r.shots << " seeds=" << r.seeds.size();
        std::cout << " top1=" << pct(r.mean_accuracy) << "\n";
    }
}

int run_cells(const Flags& f, const std::vector<std::string>& forced_methods, bool prompt_only) {
    for (const auto& m : f.methods)
        if (forced_methods.size() == 1 && m != forced_methods[0])
            throw ConfigError(forced_methods[0] + ": --method " + m + " belongs to another subcommand");
    auto cfg = load_config(f, forced_methods);
    if (prompt_only) {
        for (const auto& m : f.methods)
            if (!is_prompt_method(m)) throw ConfigError("train: '" + m + "' is not a prompt method (coop, cocoop, maple or promptsrc)");
        std::erase_if(cfg.methods, [](const std::string& m) { return !is_prompt_method(m); });
        if (cfg.methods.empty()) throw ConfigError("train: no prompt method selected (--method or the config's methods)");
    }
    if (f.dry_run) {
        PlanDigests none;
        auto plan = build_plan(cfg, none);
        std::cout << "plan: " << plan.tasks.size() << " cells, " << plan.training_cells() << " training cells\n";
        return 0;
    }
    Workspace ws(cfg, f.jobs);
    auto plan = build_plan(cfg, workspace_digests(ws));
    RunOptions opt;
    opt.force = f.force;
    auto s = run_plan(ws, plan, opt);
    print_reports(s.reports);
    std::cerr << "cells: " << s.executed << " executed, " << s.cached << " from cache, " << s.failures.size() << " failed\n";
    for (const auto& [task, err] : s.failures) std::cerr << "failed " << task << ": " << err << "\n";
    return s.failures.empty() ? 0 : kTaskFailure;
}

int cmd_splits(const Flags& f) {
    auto cfg = load_config(f, {"zeroshot"});
    for (const auto& name : cfg.datasets) {
        const auto& desc = find_dataset(name);
        auto [train, test] = generate_splits(desc, cfg.paths.data_root / name, cfg.splits.test_fraction, cfg.splits.seed);
        const auto tr = split_path(cfg.paths.splits, name, "train"), te = split_path(cfg.paths.splits, name, "test");
        if (fs::exists(te) && !f.force) {
            std::cerr << name << ": " << te << " exists; test manifests are never regenerated without --force\n";
            return kTaskFailure;
        }
        fs::create_directories(tr.parent_path());
        train.save(tr);
        test.save(te);
        std::cout << name << " train=" << train.items.size() << " test=" << test.items.size() << " train_digest=" << train.digest
                  << " test_digest=" << test.digest << "\n";
    }
    return 0;
}

int cmd_digest(const Flags& f) {
    auto cfg = load_config(f, {}, false);
    Workspace ws(cfg, f.jobs);
    std::cout << "backbone " << ws.backbone().digest() << "\n";
    std::cout << "config " << cfg.hash() << "\n";
    for (const auto& name : cfg.datasets) {
        const auto& ds = ws.dataset(name);
        std::cout << name << " train " << ds.train_digest() << "\n" << name << " test " << ds.test_digest() << "\n";
    }
    return 0;
}

int cmd_eval(const Flags& f) {
    if (f.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    if (f.datasets.size() != 1) throw ConfigError("eval: exactly one --dataset is required");
    auto cfg = load_config(f, {}, false);
    Workspace ws(cfg, f.jobs);
    auto r = evaluate_checkpoint(ws, f.checkpoint, f.datasets[0], 0, f.jobs);
    std::cout << f.datasets[0] << " " << r.method << " checkpoint=" << r.provenance.at("checkpoint") << " top1=" << pct(r.mean_accuracy) << "\n";
    return 0;
}

std::vector<TransferMatrix> stored_grids(const fs::path& out) {
    std::vector<TransferMatrix> grids;
    const auto dir = out / "crosseval";
    if (!fs::exists(dir)) return grids;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        auto j = read_json(p);
        auto g = TransferMatrix::empty(j.at("method"), j.at("sources"), j.at("targets"));
        for (std::size_t s = 0; s < g.sources.size(); ++s)
            for (std::size_t t = 0; t < g.targets.size(); ++t) {
                const auto& v = j.at("accuracy").at(s).at(t);
                if (!v.is_null()) g.cells[s][t] = v.get<double>();
            }
        grids.push_back(std::move(g));
    }
    return grids;
}

TransferReport transfer_report(std::vector<TransferMatrix> grids) {
    TransferReport t{std::move(grids), std::nullopt};
    if (t.grids.size() > 1) {
        bool aligned = std::all_of(t.grids.begin(), t.grids.end(), [&](const auto& g) {
            return g.sources == t.grids[0].sources && g.targets == t.grids[0].targets;
        });
        if (aligned) t.winners = winner(t.grids);
    }
    return t;
}

int cmd_crosseval(const Flags& f) {
    if (f.shots.size() > 1) throw ConfigError("crosseval: give a single --shots value");
    auto cfg = load_config(f, {});
    if (!f.shots.empty()) cfg.crosseval.shots = f.shots[0];
    if (f.methods.empty()) std::erase_if(cfg.methods, [](const std::string& m) { return !is_prompt_method(m); });
    cfg.validate();
    Workspace ws(cfg, f.jobs);
    for (const auto& m : cfg.methods) {
        auto grid = cross_eval(ws, m, f.jobs);
        write_json(cfg.paths.out / "crosseval" / (m + ".json"), grid.to_json());
        std::cout << "crosseval " << m << " shots=" << cfg.crosseval.shots << " (rows: source, columns: target)\n";
        std::cout << "source";
        for (const auto& t : grid.targets) std::cout << "\t" << t;
        std::cout << "\n";
        for (std::size_t s = 0; s < grid.sources.size(); ++s) {
            std::cout << grid.sources[s];
            for (const auto& c : grid.cells[s]) std::cout << "\t" << (c ? pct(*c) : "NA");
            std::cout << "\n";
        }
        if (grid.missing()) std::cerr << m << ": " << grid.missing() << " missing cells\n";
    }
    auto files = emit_report({}, transfer_report(stored_grids(cfg.paths.out)), cfg.paths.out / "report");
    std::cerr << "wrote " << files.size() << " report files to " << (cfg.paths.out / "report").string() << "\n";
    return 0;
}

int cmd_report(const Flags& f) {
    fs::path out = f.out;
    if (out.empty()) out = load_config(f, {}, false).paths.out;
    auto reports = aggregate_by_cell(collect_reports(out));
    auto files = emit_report(reports, transfer_report(stored_grids(out)), out / "report");
    print_reports(reports);
    std::cerr << "wrote " << files.size() << " report files to " << (out / "report").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt learning and baselines for remote sensing scene classification"};
    app.require_subcommand(1);
    app.fallthrough();
    Flags f;
    app.add_option("--config", f.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--dataset", f.datasets, "Dataset name(s)");
    app.add_option("--method", f.methods, "Method(s): zeroshot, probe, coop, cocoop, maple, promptsrc");
    app.add_option("--shots", f.shots, "Shots per class (1, 2, 4, 8, 16)");
    app.add_option("--seed", f.seeds, "Seed(s)");
    app.add_option("--backbone", f.backbone, "Backbone archive, or micro:<seed>");
    app.add_option("--data-root", f.data_root, "Directory holding one folder per dataset");
    app.add_option("--splits", f.splits, "Split manifest directory");
    app.add_option("--out", f.out, "Results directory");
    app.add_option("--jobs", f.jobs, "Parallel workers")->check(CLI::PositiveNumber);
    app.add_flag("--resume", f.resume, "Continue the run saved in --out");
    app.add_flag("--force", f.force, "Re-execute completed cells");
    app.add_flag("-v,--verbose", f.verbose, "Log progress");

    auto* zs = app.add_subcommand("zeroshot", "Zero-shot accuracy with a handcrafted template");
    zs->add_option("--template", f.template_text, "Prompt template with a {} placeholder");
    auto* probe = app.add_subcommand("probe", "Linear probe on frozen image features");
    auto* train = app.add_subcommand("train", "Train and evaluate prompt-learning cells");
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint archive")->check(CLI::ExistingFile);
    auto* cross = app.add_subcommand("crosseval", "Source x target transfer grid of 16-shot checkpoints");
    auto* report = app.add_subcommand("report", "Aggregate stored cell reports into tables and figures");
    auto* digest = app.add_subcommand("digest", "Print backbone, config and split digests");
    auto* run = app.add_subcommand("run", "Execute every cell of the config's plan");
    run->add_flag("--dry-run", f.dry_run, "Only print the plan size");
    train->add_flag("--dry-run", f.dry_run, "Only print the plan size");
    auto* splits = app.add_subcommand("splits", "Generate stratified train/test manifests from class folders");
    splits->add_option("--test-fraction", f.test_fraction, "Held-out fraction per class");
    splits->add_option("--split-seed", f.split_seed, "Seed of the split draw");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kConfigError;
    }
    log::set_level(f.verbose ? log::Level::info : log::Level::warn);
    try {
        if (zs->parsed()) return run_cells(f, {"zeroshot"}, false);
        if (probe->parsed()) return run_cells(f, {"probe"}, false);
        if (train->parsed()) return run_cells(f, {}, true);
        if (run->parsed()) return run_cells(f, {}, false);
        if (eval->parsed()) return cmd_eval(f);
        if (cross->parsed()) return cmd_crosseval(f);
        if (report->parsed()) return cmd_report(f);
        if (digest->parsed()) return cmd_digest(f);
        if (splits->parsed()) return cmd_splits(f);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kTaskFailure;
    }
    return kConfigError;
}
