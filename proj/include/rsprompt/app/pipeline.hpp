#pragma once

// The experiment cells: zero-shot, linear probe and prompt training on one
// (dataset, shots, seed), plus checkpoint evaluation and cross-dataset transfer.

#include "rsprompt/app/config.hpp"
#include "rsprompt/data/image_io.hpp"
#include "rsprompt/eval/report.hpp"

#include <fstream>
#include <mutex>

namespace rsprompt {

/// Backbone named by `spec`: "micro:<seed>" builds the random test backbone, anything
/// else is a backbone archive path.
inline BackboneBundle<float> open_backbone(const std::string& spec) {
    if (spec.empty()) throw ConfigError("paths.backbone: no backbone given (config, --backbone or RSPROMPT_BACKBONE)");
    if (spec.rfind("micro:", 0) == 0) {
        try {
            return make_micro_backbone<float>(std::stoull(spec.substr(6)));
        } catch (const std::logic_error&) {
            throw ConfigError("paths.backbone: '" + spec + "' needs an integer seed after 'micro:'");
        }
    }
    if (!fs::exists(spec)) throw ConfigError("paths.backbone: " + spec + " does not exist");
    return load_backbone<float>(spec);
}

inline fs::path cell_dir(const fs::path& out, const std::string& dataset, const std::string& method, int shots, int seed) {
    return out / dataset / method / std::to_string(shots) / ("seed" + std::to_string(seed));
}

inline fs::path fewshot_path(const fs::path& out, const std::string& dataset, int k, int seed) {
    return out / "manifests" / dataset / ("k" + std::to_string(k) + "-seed" + std::to_string(seed) + ".tsv");
}

/// Checkpoint a cell's report is computed from: the aggregated state for ensembling
/// methods, the final state otherwise.
inline fs::path primary_checkpoint(const fs::path& dir, const MethodConfig& m) {
    return dir / (m.ensemble ? "checkpoint-ensemble.safetensors" : "checkpoint.safetensors");
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
    fs::create_directories(p.parent_path());
    detail::write_atomically(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot read " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(p.string() + ": " + e.what());
    }
}

/// Shared read-only state of a run: config, backbone and lazily loaded datasets.
class Workspace {
public:
    Workspace(ExperimentConfig cfg, unsigned jobs = 1)
        : cfg_(std::move(cfg)), bb_(open_backbone(cfg_.paths.backbone)), jobs_(std::max(1u, jobs)) {}

    const ExperimentConfig& config() const { return cfg_; }
    const BackboneBundle<float>& backbone() const { return bb_; }
    unsigned jobs() const { return jobs_; }
    const std::string& config_hash() const { return hash_; }

    fs::path dataset_root(const std::string& name) const { return cfg_.paths.data_root / name; }

    const Dataset& dataset(const std::string& name) const {
        std::lock_guard lock(mu_);
        auto it = datasets_.find(name);
        if (it != datasets_.end()) return it->second;
        auto ds = load_dataset(name, dataset_root(name), cfg_.paths.splits, cfg_.data);
        if (auto e = cfg_.expected_digests.find(ds.name()); e != cfg_.expected_digests.end())
            for (const auto& [split, want] : e->second) {
                const auto& got = split == "train" ? ds.train_digest() : ds.test_digest();
                if (got != want)
                    throw DataError(ds.name() + " " + split + " manifest digest " + short_digest(got) + " differs from the configured " + short_digest(want));
            }
        return datasets_.emplace(name, std::move(ds)).first->second;
    }

    std::map<std::string, std::string> provenance(const Dataset& ds) const {
        return {{"config_hash", hash_},
                {"backbone_digest", bb_.digest()},
                {"train_split_digest", ds.train_digest()},
                {"test_split_digest", ds.test_digest()}};
    }

private:
    ExperimentConfig cfg_;
    BackboneBundle<float> bb_;
    unsigned jobs_;
    std::string hash_ = cfg_.hash();
    mutable std::mutex mu_;
    mutable std::map<std::string, Dataset> datasets_;
};

/// The shared few-shot manifest of (dataset, k, seed): written on first use, and any
/// stored copy must match a fresh draw.
inline FewShotManifest shared_fewshot(const Workspace& ws, const Dataset& ds, int k, int seed) {
    auto m = sample_few_shot(ds, k, seed);
    auto p = fewshot_path(ws.config().paths.out, ds.name(), k, seed);
    if (fs::exists(p)) {
        if (FewShotManifest::load(p).digest() != m.digest())
            throw DataError("stored few-shot manifest " + p.string() + " differs from its regeneration");
    } else {
        fs::create_directories(p.parent_path());
        m.save(p);
    }
    return m;
}

/// Test-split predictions in chunks of `chunk` images.
inline std::pair<std::vector<int>, std::vector<int>> predict_test(const Workspace& ws, const Dataset& ds,
                                                                 const std::function<Mat<float>(const std::vector<PixelTensor>&)>& logits,
                                                                 unsigned jobs, std::size_t chunk = 256) {
    auto [ids, labels] = ds.resolve(ds.test());
    std::vector<int> preds;
    std::size_t ties = 0;
    for (std::size_t start = 0; start < ids.size(); start += chunk) {
        std::vector<std::string> part(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                      ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + chunk)));
        auto l = logits(load_pixels(ds.root(), part, ws.backbone().preprocess_spec(), jobs));
        ties += count_argmax_ties(l);
        auto p = argmax_rows(l);
        preds.insert(preds.end(), p.begin(), p.end());
    }
    if (ties) log::info(ds.name(), ": ", ties, " argmax ties broken towards the lowest class index");
    return {preds, labels};
}

inline EvalReport run_zeroshot(const Workspace& ws, const std::string& dataset, const std::string& tmpl, unsigned jobs) {
    const auto& ds = ws.dataset(dataset);
    const auto& bb = ws.backbone();
    auto bank = build_zeroshot_classifier(bb, ds.class_names(), tmpl, jobs);
    auto [preds, labels] = predict_test(ws, ds, [&](const auto& px) { return zeroshot_logits(bank, bb.encode_images(px, jobs), bb.logit_scale()); }, jobs);
    auto prov = ws.provenance(ds);
    prov["template"] = tmpl;
    prov["seed"] = "0";
    return make_report(ds.name(), "zeroshot", 0, 0, preds, labels, ds.class_names(), prov);
}

inline FeatureTable manifest_features(const Workspace& ws, const Dataset& ds, const FewShotManifest& m, const std::string& split_id, unsigned jobs) {
    return extract_features(ws.backbone(), ds.root(), m.ids(), m.labels(), ds.labels().num_classes(), split_id, jobs);
}

struct ProbeCellResult {
    EvalReport report;
    ProbeModel model;
    CSearchResult search;
};

/// Linear probe on the k-shot manifest; C is chosen on a disjoint class-balanced
/// validation draw of min(k, validation_per_class) images per class.
inline ProbeCellResult run_probe_cell(const Workspace& ws, const std::string& dataset, int k, int seed, unsigned jobs) {
    const auto& cfg = ws.config();
    const auto& ds = ws.dataset(dataset);
    auto shots = shared_fewshot(ws, ds, k, seed);
    auto val = sample_validation(ds.train(), ds.labels(), shots, std::min(k, cfg.probe.validation_per_class));
    auto train_t = manifest_features(ws, ds, shots, "train/k" + std::to_string(k) + "-seed" + std::to_string(seed), jobs);
    auto val_t = manifest_features(ws, ds, val, "validation/k" + std::to_string(k) + "-seed" + std::to_string(seed), jobs);
    auto search = search_C(train_t, val_t, cfg.probe.search, cfg.probe.fit);
    auto model = fit_probe(train_t, search.best_C, cfg.probe.fit);
    FeatureCache cache(cfg.paths.cache_dir());
    auto [ids, labels] = ds.resolve(ds.test());
    auto test_t = cache.get_or_extract(ds.name(), "test", ds.test_digest(), ws.backbone().digest(), [&] {
        return extract_features(ws.backbone(), ds.root(), ids, labels, ds.labels().num_classes(), "test", jobs);
    });
    auto preds = probe_predict(model, test_t);
    auto prov = ws.provenance(ds);
    prov["seed"] = std::to_string(seed);
    prov["fewshot_digest"] = shots.digest();
    prov["C_reg"] = nlohmann::json(search.best_C).dump();
    return {make_report(ds.name(), "probe", k, seed, preds, test_t.labels, ds.class_names(), prov), model, search};
}

/// Prompt-model logits on raw pixels, in chunks.
inline Mat<float> prompt_logits(const PromptModel<float>& model, const PromptState<float>& s, const std::vector<PixelTensor>& px, unsigned jobs) {
    return model.predict_logits(prepare_images(model.backbone(), px, model.needs_stems(), jobs), s, jobs);
}

inline EvalReport evaluate_prompt_state(const Workspace& ws, const Dataset& target, const PromptModel<float>& model, const PromptState<float>& s,
                                        int shots, int seed, std::map<std::string, std::string> extra, unsigned jobs) {
    auto [preds, labels] = predict_test(ws, target, [&](const auto& px) { return prompt_logits(model, s, px, jobs); }, jobs);
    auto prov = ws.provenance(target);
    prov["seed"] = std::to_string(seed);
    for (auto& [k, v] : extra) prov[k] = v;
    return make_report(target.name(), to_string(s.method), shots, seed, preds, labels, target.class_names(), prov);
}

struct TrainCellResult {
    EvalReport report;                     // from the primary checkpoint
    std::optional<EvalReport> final_report;  // final-epoch state when the primary is an aggregate
    std::vector<EpochRecord> history;
};

/// Samples, trains and evaluates one prompt-learning cell, writing checkpoints and the
/// training log into `dir`.
inline TrainCellResult run_train_cell(const Workspace& ws, const std::string& dataset, const std::string& method, int k, int seed,
                                      const fs::path& dir, unsigned jobs) {
    const auto& cfg = ws.config();
    const auto& ds = ws.dataset(dataset);
    const auto& bb = ws.backbone();
    auto mcfg = cfg.method_config(method);
    auto tcfg = cfg.train_config(method, seed);
    auto shots = shared_fewshot(ws, ds, k, seed);
    PromptModel<float> model(bb, mcfg, ds.class_names(), {}, jobs);
    ImageBatch<float> batch;
    {
        TestSplitGuard::Scope guard("loading training images");
        batch = prepare_images(bb, load_pixels(ds.root(), shots.ids(), bb.preprocess_spec(), jobs), model.needs_stems(), jobs);
    }
    fs::create_directories(dir);
    std::ofstream log_out(dir / "train_log.jsonl", std::ios::trunc);
    auto res = train_prompts(model, batch, shots.labels(), init_prompt_state(bb, mcfg, static_cast<std::uint64_t>(seed)), tcfg,
                             [&](const nlohmann::json& rec) { log_out << rec.dump() << "\n"; }, shots.ids());
    log_out.close();
    const double last_loss = res.history.empty() ? 0.0 : res.history.back().loss;
    CheckpointRecord rec{tcfg.epochs, last_loss, ws.config_hash(), shots.digest(), bb.digest(), utc_timestamp(), "final", mcfg.to_json(), ds.class_names()};
    save_checkpoint(res.final_state, rec, dir / "checkpoint.safetensors");
    std::map<std::string, std::string> extra{{"fewshot_digest", shots.digest()}};
    TrainCellResult out;
    out.history = res.history;
    auto final_extra = extra;
    final_extra["checkpoint"] = short_digest(sha256_file(dir / "checkpoint.safetensors"));
    final_extra["variant"] = "final";
    auto final_report = evaluate_prompt_state(ws, ds, model, res.final_state, k, seed, final_extra, jobs);
    if (res.ensembled) {
        rec.variant = "ensemble";
        save_checkpoint(*res.ensembled, rec, dir / "checkpoint-ensemble.safetensors");
        extra["checkpoint"] = short_digest(sha256_file(dir / "checkpoint-ensemble.safetensors"));
        extra["variant"] = "ensemble";
        out.report = evaluate_prompt_state(ws, ds, model, *res.ensembled, k, seed, extra, jobs);
        out.final_report = std::move(final_report);
    } else {
        out.report = std::move(final_report);
    }
    return out;
}

/// Evaluates a stored checkpoint on `target`'s test split with the target's class names.
inline EvalReport evaluate_checkpoint(const Workspace& ws, const fs::path& checkpoint, const std::string& target, int shots, unsigned jobs) {
    auto ck = load_checkpoint<float>(checkpoint, ws.backbone().digest(), ws.config_hash());
    const auto& ds = ws.dataset(target);
    PromptModel<float> model(ws.backbone(), MethodConfig::from_json(ck.record.method_config), ds.class_names(), {}, jobs);
    return evaluate_prompt_state(ws, ds, model, ck.state, shots, static_cast<int>(ck.state.seed),
                                 {{"checkpoint", short_digest(sha256_file(checkpoint))}, {"variant", ck.record.variant}}, jobs);
}

/// Source x target accuracy for `method`: each cell is the mean over the configured
/// seeds' source checkpoints. Cells without every checkpoint are missing.
inline TransferMatrix cross_eval(const Workspace& ws, const std::string& method, unsigned jobs) {
    if (!is_prompt_method(method))
        throw ConfigError("crosseval: method '" + method + "' has no class-name prompts to transfer (coop, cocoop, maple or promptsrc)");
    const auto& cfg = ws.config();
    const auto mcfg = cfg.method_config(method);
    auto grid = TransferMatrix::empty(method, cfg.crosseval_sources(), cfg.crosseval_targets());
    for (const auto& src : grid.sources) {
        std::vector<fs::path> cks;
        for (int seed : cfg.seeds) cks.push_back(primary_checkpoint(cell_dir(cfg.paths.out, src, method, cfg.crosseval.shots, seed), mcfg));
        const bool complete = std::all_of(cks.begin(), cks.end(), [](const fs::path& p) { return fs::exists(p); });
        if (!complete) {
            log::warn("crosseval: ", method, " has no complete ", cfg.crosseval.shots, "-shot checkpoint set for ", src, "; its row stays missing");
            continue;
        }
        for (const auto& tgt : grid.targets) {
            double sum = 0;
            for (const auto& ck : cks) sum += evaluate_checkpoint(ws, ck, tgt, cfg.crosseval.shots, jobs).mean_accuracy;
            grid.at(src, tgt) = sum / static_cast<double>(cks.size());
        }
    }
    return grid;
}

}  // namespace rsprompt
