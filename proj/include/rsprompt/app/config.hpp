#pragma once

// Experiment configuration: one JSON document describes a whole experiment. Paths may
// be overridden from the environment; hyper-parameters may not.

#include "rsprompt/data/registry.hpp"
#include "rsprompt/probe/probe.hpp"
#include "rsprompt/train/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace rsprompt {

namespace fs = std::filesystem;

/// Methods accepted in a config: the two baselines plus the four prompt learners.
inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"zeroshot", "probe", "coop", "cocoop", "maple", "promptsrc"};
    return m;
}

inline bool is_prompt_method(const std::string& m) { return m == "coop" || m == "cocoop" || m == "maple" || m == "promptsrc"; }

struct PathConfig {
    std::string backbone;   // archive path, or "micro:<seed>" for the random test backbone
    fs::path data_root = "data";
    fs::path splits = "splits";
    fs::path out = "results";
    fs::path cache;         // empty: <out>/cache

    fs::path cache_dir() const { return cache.empty() ? out / "cache" : cache; }
};

struct SplitConfig {
    double test_fraction = 0.2;
    int seed = 0;
};

struct ProbeConfig {
    CSearchOptions search;
    ProbeOptions fit;
    int validation_per_class = 4;  // the draw is min(k, this) per class
};

struct CrossEvalConfig {
    std::vector<std::string> sources;  // empty: the config's datasets
    std::vector<std::string> targets;  // empty: the config's datasets
    int shots = 16;
};

struct ExperimentConfig {
    std::vector<std::string> datasets;
    std::vector<std::string> methods;
    std::vector<int> shots{1, 2, 4, 8, 16};
    std::vector<int> seeds{1, 2, 3};
    PathConfig paths;
    SplitConfig splits;
    std::string zeroshot_template = "a satellite photo of {}";
    TrainConfig train;                           // lr unused; see learning_rate()
    std::map<std::string, double> lr;            // per-method learning rates
    std::map<std::string, nlohmann::json> method_overrides;
    ProbeConfig probe;
    CrossEvalConfig crosseval;
    LoadOptions data;
    std::map<std::string, std::map<std::string, std::string>> expected_digests;  // dataset -> split -> sha256

    double learning_rate(const std::string& method) const {
        auto it = lr.find(method);
        return it != lr.end() ? it->second : default_learning_rate(parse_method(method));
    }

    MethodConfig method_config(const std::string& method) const {
        nlohmann::json j = nlohmann::json::object();
        if (auto it = method_overrides.find(method); it != method_overrides.end()) j = it->second;
        j["method"] = method;
        return MethodConfig::from_json(j);
    }

    TrainConfig train_config(const std::string& method, int seed) const {
        TrainConfig c = train;
        c.lr = learning_rate(method);
        c.seed = static_cast<std::uint64_t>(seed);
        return c;
    }

    std::vector<std::string> crosseval_sources() const { return crosseval.sources.empty() ? datasets : crosseval.sources; }
    std::vector<std::string> crosseval_targets() const { return crosseval.targets.empty() ? datasets : crosseval.targets; }

    /// Every field except paths, in canonical form.
    nlohmann::json to_json() const {
        nlohmann::json overrides = nlohmann::json::object();
        for (const auto& m : methods)
            if (is_prompt_method(m)) overrides[m] = method_config(m).to_json();
        nlohmann::json lrs = nlohmann::json::object();
        for (const auto& m : methods)
            if (is_prompt_method(m)) lrs[m] = learning_rate(m);
        return {{"datasets", datasets},
                {"methods", methods},
                {"shots", shots},
                {"seeds", seeds},
                {"splits", {{"test_fraction", splits.test_fraction}, {"seed", splits.seed}}},
                {"zeroshot", {{"template", zeroshot_template}}},
                {"train",
                 {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"warmup_lr", train.warmup_lr},
                  {"momentum", train.momentum},
                  {"weight_decay", train.weight_decay},
                  {"lr", lrs}}},
                {"method_overrides", overrides},
                {"probe",
                 {{"grid_points", probe.search.grid_points},
                  {"grid_min", probe.search.grid_min},
                  {"grid_max", probe.search.grid_max},
                  {"refine_steps", probe.search.refine_steps},
                  {"max_iter", probe.fit.max_iter},
                  {"gtol", probe.fit.gtol},
                  {"validation_per_class", probe.validation_per_class}}},
                {"crosseval", {{"sources", crosseval_sources()}, {"targets", crosseval_targets()}, {"shots", crosseval.shots}}},
                {"data", {{"verify_counts", data.verify_counts}, {"verify_files", data.verify_files}}},
                {"expected_digests", expected_digests}};
    }

    /// sha256 of the canonical document; paths do not contribute.
    std::string hash() const { return sha256_hex(to_json().dump()); }

    /// `need_cells` false allows empty dataset and method lists (digest, splits).
    void validate(bool need_cells = true) const;
};

namespace detail {

/// Reads an object, rejecting keys outside `allowed`.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto& [k, v] : j_.items())
            if (!ok.count(k)) throw ConfigError(field("") + "unknown key '" + k + "'");
    }

    bool has(const char* k) const { return j_.contains(k); }
    const nlohmann::json& raw(const char* k) const { return j_.at(k); }

    template <class V>
    void get(const char* k, V& out) const {
        if (!j_.contains(k)) return;
        try {
            out = j_.at(k).template get<V>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(field(k) + "wrong type");
        }
    }

    std::string field(const std::string& k) const {
        std::string f = where_.empty() ? k : (k.empty() ? where_ : where_ + "." + k);
        return f.empty() ? "" : f + ": ";
    }

private:
    const nlohmann::json& j_;
    std::string where_;
};

template <class V>
void require_unique(const std::vector<V>& v, const char* field) {
    std::set<V> seen;
    for (const auto& x : v)
        if (!seen.insert(x).second) {
            std::ostringstream os;
            os << x;
            throw ConfigError(std::string(field) + ": duplicate value " + os.str());
        }
}

inline void require_dataset(const std::string& name, const std::string& field) {
    try {
        find_dataset(name);
    } catch (const DataError& e) {
        throw ConfigError(field + ": " + e.what());
    }
}

}  // namespace detail

inline void ExperimentConfig::validate(bool need_cells) const {
    if (need_cells && datasets.empty()) throw ConfigError("datasets: at least one dataset is required");
    for (const auto& d : datasets) detail::require_dataset(d, "datasets");
    detail::require_unique(datasets, "datasets");
    if (need_cells && methods.empty()) throw ConfigError("methods: at least one method is required");
    for (const auto& m : methods)
        if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
            throw ConfigError("methods: unknown method '" + m + "' (expected zeroshot, probe, coop, cocoop, maple or promptsrc)");
    detail::require_unique(methods, "methods");
    if (shots.empty()) throw ConfigError("shots: at least one shot count is required");
    for (int k : shots)
        if (!is_allowed_shots(k)) throw ConfigError("shots: " + std::to_string(k) + " is not one of 1, 2, 4, 8, 16");
    detail::require_unique(shots, "shots");
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    for (int s : seeds)
        if (s < 0) throw ConfigError("seeds: " + std::to_string(s) + " must be >= 0");
    detail::require_unique(seeds, "seeds");
    if (!(splits.test_fraction > 0 && splits.test_fraction < 1)) throw ConfigError("splits.test_fraction: must be in (0, 1)");
    split_template(zeroshot_template);
    train.validate();
    for (const auto& [m, v] : lr) {
        if (!is_prompt_method(m)) throw ConfigError("train.lr: '" + m + "' is not a prompt method");
        if (!(v > 0)) throw ConfigError("train.lr." + m + ": must be > 0");
    }
    for (const auto& [m, j] : method_overrides)
        if (!is_prompt_method(m)) throw ConfigError("method_overrides: '" + m + "' is not a prompt method");
    for (const auto& m : methods)
        if (is_prompt_method(m)) method_config(m);
    if (probe.search.grid_points < 2) throw ConfigError("probe.grid_points: must be >= 2");
    if (!(probe.search.grid_min > 0 && probe.search.grid_max > probe.search.grid_min))
        throw ConfigError("probe.grid_min/grid_max: need 0 < grid_min < grid_max");
    if (probe.search.refine_steps < 0 || probe.search.refine_steps > 8) throw ConfigError("probe.refine_steps: must be in [0, 8]");
    if (probe.fit.max_iter < 1) throw ConfigError("probe.max_iter: must be >= 1");
    if (probe.validation_per_class < 1) throw ConfigError("probe.validation_per_class: must be >= 1");
    if (!is_allowed_shots(crosseval.shots)) throw ConfigError("crosseval.shots: must be one of 1, 2, 4, 8, 16");
    for (const auto& d : crosseval.sources) detail::require_dataset(d, "crosseval.sources");
    for (const auto& d : crosseval.targets) detail::require_dataset(d, "crosseval.targets");
    for (const auto& [d, m] : expected_digests) {
        detail::require_dataset(d, "expected_digests");
        for (const auto& [split, h] : m)
            if (split != "train" && split != "test") throw ConfigError("expected_digests." + d + ": unknown split '" + split + "'");
    }
}

/// Environment variables that may replace configured paths.
inline const std::vector<std::pair<const char*, fs::path PathConfig::*>>& path_env_overrides() {
    static const std::vector<std::pair<const char*, fs::path PathConfig::*>> v{
        {"RSPROMPT_DATA_ROOT", &PathConfig::data_root},
        {"RSPROMPT_SPLITS", &PathConfig::splits},
        {"RSPROMPT_OUT", &PathConfig::out},
        {"RSPROMPT_CACHE", &PathConfig::cache},
    };
    return v;
}

inline void apply_env_overrides(ExperimentConfig& c) {
    if (const char* b = std::getenv("RSPROMPT_BACKBONE"); b && *b) c.paths.backbone = b;
    for (const auto& [name, member] : path_env_overrides())
        if (const char* v = std::getenv(name); v && *v) c.paths.*member = v;
}

/// Builds a validated config from a document. Relative paths resolve against `base`.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const fs::path& base = {}, bool need_cells = true) {
    using detail::ObjectReader;
    ExperimentConfig c;
    ObjectReader top(j, "");
    top.allow({"datasets", "methods", "shots", "seeds", "paths", "splits", "zeroshot", "train", "method_overrides", "probe",
               "crosseval", "data", "expected_digests"});
    top.get("datasets", c.datasets);
    for (auto& d : c.datasets) d = canonical_dataset_name(d);
    top.get("methods", c.methods);
    top.get("shots", c.shots);
    top.get("seeds", c.seeds);
    if (top.has("paths")) {
        ObjectReader p(top.raw("paths"), "paths");
        p.allow({"backbone", "data_root", "splits", "out", "cache"});
        p.get("backbone", c.paths.backbone);
        std::string s;
        for (auto [k, member] : std::initializer_list<std::pair<const char*, fs::path PathConfig::*>>{
                 {"data_root", &PathConfig::data_root}, {"splits", &PathConfig::splits}, {"out", &PathConfig::out}, {"cache", &PathConfig::cache}})
            if (p.has(k)) {
                s.clear();
                p.get(k, s);
                c.paths.*member = s;
            }
    }
    if (top.has("splits")) {
        ObjectReader s(top.raw("splits"), "splits");
        s.allow({"test_fraction", "seed"});
        s.get("test_fraction", c.splits.test_fraction);
        s.get("seed", c.splits.seed);
    }
    if (top.has("zeroshot")) {
        ObjectReader z(top.raw("zeroshot"), "zeroshot");
        z.allow({"template"});
        z.get("template", c.zeroshot_template);
    }
    if (top.has("train")) {
        ObjectReader t(top.raw("train"), "train");
        t.allow({"epochs", "batch_size", "lr", "warmup_lr", "momentum", "weight_decay"});
        t.get("epochs", c.train.epochs);
        t.get("batch_size", c.train.batch_size);
        t.get("warmup_lr", c.train.warmup_lr);
        t.get("momentum", c.train.momentum);
        t.get("weight_decay", c.train.weight_decay);
        if (t.has("lr")) {
            const auto& lr = t.raw("lr");
            if (lr.is_number()) {
                for (const auto& m : {"coop", "cocoop", "maple", "promptsrc"}) c.lr[m] = lr.get<double>();
            } else {
                ObjectReader l(lr, "train.lr");
                l.allow({"coop", "cocoop", "maple", "promptsrc"});
                for (const auto& [m, v] : lr.items()) l.get(m.c_str(), c.lr[m]);
            }
        }
    }
    if (top.has("method_overrides")) {
        ObjectReader mo(top.raw("method_overrides"), "method_overrides");
        mo.allow({"coop", "cocoop", "maple", "promptsrc"});
        for (const auto& [m, v] : top.raw("method_overrides").items()) {
            if (!v.is_object()) throw ConfigError("method_overrides." + m + ": expected an object");
            if (v.contains("method")) throw ConfigError("method_overrides." + m + ": 'method' is implied by the key");
            c.method_overrides[m] = v;
        }
    }
    if (top.has("probe")) {
        ObjectReader p(top.raw("probe"), "probe");
        p.allow({"grid_points", "grid_min", "grid_max", "refine_steps", "max_iter", "gtol", "validation_per_class"});
        p.get("grid_points", c.probe.search.grid_points);
        p.get("grid_min", c.probe.search.grid_min);
        p.get("grid_max", c.probe.search.grid_max);
        p.get("refine_steps", c.probe.search.refine_steps);
        p.get("max_iter", c.probe.fit.max_iter);
        p.get("gtol", c.probe.fit.gtol);
        p.get("validation_per_class", c.probe.validation_per_class);
    }
    if (top.has("crosseval")) {
        ObjectReader x(top.raw("crosseval"), "crosseval");
        x.allow({"sources", "targets", "shots"});
        x.get("sources", c.crosseval.sources);
        x.get("targets", c.crosseval.targets);
        x.get("shots", c.crosseval.shots);
        for (auto* v : {&c.crosseval.sources, &c.crosseval.targets})
            for (auto& d : *v) d = canonical_dataset_name(d);
    }
    if (top.has("data")) {
        ObjectReader d(top.raw("data"), "data");
        d.allow({"verify_counts", "verify_files"});
        d.get("verify_counts", c.data.verify_counts);
        d.get("verify_files", c.data.verify_files);
    }
    if (top.has("expected_digests")) {
        try {
            c.expected_digests = top.raw("expected_digests").get<std::map<std::string, std::map<std::string, std::string>>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("expected_digests: wrong type");
        }
    }
    auto resolve = [&](fs::path& p) {
        if (!p.empty() && p.is_relative() && !base.empty()) p = base / p;
    };
    resolve(c.paths.data_root);
    resolve(c.paths.splits);
    resolve(c.paths.out);
    resolve(c.paths.cache);
    if (!c.paths.backbone.empty() && c.paths.backbone.rfind("micro:", 0) != 0 && fs::path(c.paths.backbone).is_relative() && !base.empty())
        c.paths.backbone = (base / c.paths.backbone).string();
    apply_env_overrides(c);
    c.validate(need_cells);
    return c;
}

inline nlohmann::json read_config_document(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return j;
}

inline ExperimentConfig parse_config(const fs::path& path) { return config_from_json(read_config_document(path), path.parent_path()); }

}  // namespace rsprompt
