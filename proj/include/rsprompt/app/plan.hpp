#pragma once

// Resumable experiment plans: one task per (dataset, method, shots, seed) cell.

#include "rsprompt/app/pipeline.hpp"

#include <atomic>

namespace rsprompt {

struct PlanTask {
    std::string dataset;
    std::string method;
    int shots = 0;  // 0 for zero-shot
    int seed = 0;   // 0 for zero-shot
    std::string id;  // sha256 of every input of the cell

    bool trains() const { return is_prompt_method(method); }
    std::string label() const { return dataset + "/" + method + "/" + std::to_string(shots) + "/seed" + std::to_string(seed); }
};

struct ExperimentPlan {
    std::vector<PlanTask> tasks;

    std::size_t training_cells() const {
        return static_cast<std::size_t>(std::count_if(tasks.begin(), tasks.end(), [](const PlanTask& t) { return t.trains(); }));
    }
};

/// Inputs of a cell beyond the config: backbone digest and the dataset's split digests.
struct PlanDigests {
    std::string backbone;
    std::map<std::string, std::pair<std::string, std::string>> splits;  // dataset -> (train, test)
};

inline std::string task_id(const ExperimentConfig& cfg, const PlanTask& t, const PlanDigests& d) {
    nlohmann::json j{{"dataset", t.dataset}, {"method", t.method}, {"shots", t.shots}, {"seed", t.seed}, {"backbone", d.backbone}};
    if (auto it = d.splits.find(t.dataset); it != d.splits.end()) j["splits"] = {it->second.first, it->second.second};
    if (t.method == "zeroshot") j["template"] = cfg.zeroshot_template;
    if (t.method == "probe") j["probe"] = cfg.to_json()["probe"];
    if (t.trains()) {
        j["method_config"] = cfg.method_config(t.method).to_json();
        j["train"] = cfg.train_config(t.method, t.seed).to_json();
    }
    return sha256_hex(j.dump());
}

/// Cells in config order: datasets, then methods, then shots, then seeds. Zero-shot
/// contributes one cell per dataset.
inline ExperimentPlan build_plan(const ExperimentConfig& cfg, const PlanDigests& digests) {
    ExperimentPlan p;
    for (const auto& d : cfg.datasets)
        for (const auto& m : cfg.methods) {
            if (m == "zeroshot") {
                p.tasks.push_back({d, m, 0, 0, {}});
                continue;
            }
            for (int k : cfg.shots)
                for (int s : cfg.seeds) p.tasks.push_back({d, m, k, s, {}});
        }
    for (auto& t : p.tasks) t.id = task_id(cfg, t, digests);
    return p;
}

inline PlanDigests workspace_digests(const Workspace& ws) {
    PlanDigests d{ws.backbone().digest(), {}};
    for (const auto& name : ws.config().datasets) {
        const auto& ds = ws.dataset(name);
        d.splits[name] = {ds.train_digest(), ds.test_digest()};
    }
    return d;
}

inline fs::path task_dir(const ExperimentConfig& cfg, const PlanTask& t) { return cell_dir(cfg.paths.out, t.dataset, t.method, t.shots, t.seed); }

/// True when the cell's marker records this exact task id and its report exists.
inline bool task_done(const ExperimentConfig& cfg, const PlanTask& t) {
    const auto dir = task_dir(cfg, t);
    if (!fs::exists(dir / "done.json") || !fs::exists(dir / "report.json")) return false;
    try {
        return read_json(dir / "done.json").at("task_id") == t.id;
    } catch (const std::exception&) {
        return false;
    }
}

/// Runs one cell and writes its report and completion marker.
inline EvalReport execute_task(const Workspace& ws, const PlanTask& t, unsigned jobs) {
    const auto& cfg = ws.config();
    const auto dir = task_dir(cfg, t);
    fs::create_directories(dir);
    fs::remove(dir / "done.json");
    EvalReport report;
    if (t.method == "zeroshot") {
        report = run_zeroshot(ws, t.dataset, cfg.zeroshot_template, jobs);
    } else if (t.method == "probe") {
        auto r = run_probe_cell(ws, t.dataset, t.shots, t.seed, jobs);
        save_probe(r.model, dir / "probe.safetensors", {{"backbone_digest", ws.backbone().digest()}, {"config_hash", ws.config_hash()}});
        write_json(dir / "c_search.json", r.search.to_json());
        report = r.report;
    } else {
        auto r = run_train_cell(ws, t.dataset, t.method, t.shots, t.seed, dir, jobs);
        if (r.final_report) write_json(dir / "report-final.json", r.final_report->to_json());
        report = r.report;
    }
    report.provenance["task_id"] = t.id;
    write_json(dir / "report.json", report.to_json());
    write_json(dir / "done.json", {{"task_id", t.id}, {"finished", utc_timestamp()}});
    return report;
}

struct RunOptions {
    bool force = false;  // re-execute completed cells
    fs::path report_dir;  // empty: <out>/report
};

struct RunSummary {
    std::size_t executed = 0;
    std::size_t cached = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // task label, error
    std::vector<EvalReport> reports;                            // aggregated over seeds
    std::vector<std::string> written;
};

inline void save_plan_state(const ExperimentConfig& cfg, const ExperimentPlan& plan, const std::vector<std::string>& status) {
    nlohmann::json tasks = nlohmann::json::array();
    for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
        const auto& t = plan.tasks[i];
        tasks.push_back({{"dataset", t.dataset}, {"method", t.method}, {"shots", t.shots}, {"seed", t.seed}, {"task_id", t.id}, {"status", status[i]}});
    }
    write_json(cfg.paths.out / "plan.json", {{"config_hash", cfg.hash()}, {"tasks", tasks}});
}

/// Aggregates per-seed reports into one report per (dataset, method, shots).
inline std::vector<EvalReport> aggregate_by_cell(const std::vector<EvalReport>& per_seed) {
    std::map<std::string, std::vector<EvalReport>> groups;
    for (const auto& r : per_seed) groups[r.key()].push_back(r);
    std::vector<EvalReport> out;
    for (auto& [k, runs] : groups) {
        std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.seeds < b.seeds; });
        out.push_back(aggregate_runs(runs));
    }
    return out;
}

/// Executes every pending cell (in parallel up to `ws.jobs()` cells), persists the plan
/// state, then emits the aggregated report. Failed cells are recorded and skipped.
inline RunSummary run_plan(const Workspace& ws, const ExperimentPlan& plan, const RunOptions& opt = {}) {
    const auto& cfg = ws.config();
    fs::create_directories(cfg.paths.out);
    write_json(cfg.paths.out / "config.json", nlohmann::json{{"config", cfg.to_json()}, {"config_hash", cfg.hash()}});
    std::vector<std::string> status(plan.tasks.size(), "pending");
    std::vector<std::optional<EvalReport>> reports(plan.tasks.size());
    std::vector<std::string> errors(plan.tasks.size());
    for (std::size_t i = 0; i < plan.tasks.size(); ++i)
        if (!opt.force && task_done(cfg, plan.tasks[i])) status[i] = "done";
    save_plan_state(cfg, plan, status);
    const unsigned cell_jobs = std::min<unsigned>(ws.jobs(), static_cast<unsigned>(std::max<std::size_t>(1, plan.tasks.size())));
    const unsigned inner_jobs = std::max(1u, ws.jobs() / cell_jobs);
    std::mutex mu;
    std::atomic<std::size_t> executed{0};
    parallel_for(plan.tasks.size(), cell_jobs, [&](std::size_t i) {
        const auto& t = plan.tasks[i];
        try {
            if (status[i] == "done") {
                reports[i] = EvalReport::from_json(read_json(task_dir(cfg, t) / "report.json"));
                return;
            }
            log::info("running ", t.label());
            reports[i] = execute_task(ws, t, inner_jobs);
            ++executed;
            std::lock_guard lock(mu);
            status[i] = "done";
            save_plan_state(cfg, plan, status);
        } catch (const std::exception& e) {
            std::lock_guard lock(mu);
            status[i] = "failed";
            errors[i] = e.what();
            log::error(t.label(), " failed: ", e.what());
            save_plan_state(cfg, plan, status);
        }
    });
    RunSummary s;
    s.executed = executed;
    std::vector<EvalReport> per_seed;
    for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
        if (status[i] == "failed") s.failures.emplace_back(plan.tasks[i].label(), errors[i]);
        if (reports[i]) per_seed.push_back(*reports[i]);
    }
    s.cached = per_seed.size() - s.executed;
    if (!per_seed.empty()) {
        s.reports = aggregate_by_cell(per_seed);
        s.written = emit_report(s.reports, {}, opt.report_dir.empty() ? cfg.paths.out / "report" : opt.report_dir);
    }
    return s;
}

/// Every cell report stored under `out`.
inline std::vector<EvalReport> collect_reports(const fs::path& out) {
    std::vector<EvalReport> v;
    if (!fs::exists(out)) return v;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file() && e.path().filename() == "report.json" && fs::exists(e.path().parent_path() / "done.json")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) v.push_back(EvalReport::from_json(read_json(f)));
    return v;
}

}  // namespace rsprompt
