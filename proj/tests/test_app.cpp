#include "rsprompt/app/plan.hpp"

#include "fixtures.hpp"
#include "test_util.hpp"

#include <cstdlib>

using namespace rsprompt;
using rsprompt::testing::TempDir;

namespace {

nlohmann::json doc(const std::string& text) { return nlohmann::json::parse(text); }

std::string config_error(const nlohmann::json& j) {
    try {
        config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

/// A synthetic EuroSAT-shaped dataset (6 images per class) with generated splits,
/// and a config that trains for two epochs on the micro backbone.
struct Bench {
    TempDir dir{"app"};

    Bench() {
        rsprompt::testing::write_scene_dataset(dir.path / "data" / "eurosat", "eurosat", 6);
        rsprompt::testing::write_splits(dir.path / "data", dir.path / "splits", "eurosat", 1.0 / 3);
    }

    nlohmann::json base(const std::string& methods = R"(["coop"])") const {
        auto j = doc(R"({"datasets": ["eurosat"], "shots": [1], "seeds": [1],
                         "paths": {"backbone": "micro:3"}, "train": {"epochs": 2},
                         "method_overrides": {"maple": {"depth": 2}, "promptsrc": {"depth": 2, "n_templates": 4}},
                         "data": {"verify_counts": false}})");
        j["methods"] = nlohmann::json::parse(methods);
        j["paths"]["data_root"] = (dir.path / "data").string();
        j["paths"]["splits"] = (dir.path / "splits").string();
        j["paths"]["out"] = (dir.path / "results").string();
        return j;
    }
};

std::string file_bytes(const fs::path& p) { return detail::read_text(p, "test file"); }

}  // namespace

TEST(Config, DefaultsAndPerMethodLearningRates) {
    auto c = config_from_json(doc(R"({"datasets": ["EuroSAT", "UC-Merced"], "methods": ["coop", "cocoop", "maple", "promptsrc"]})"));
    EXPECT_EQ(c.datasets, (std::vector<std::string>{"eurosat", "ucmerced"}));
    EXPECT_EQ(c.learning_rate("coop"), 0.002);
    EXPECT_EQ(c.learning_rate("cocoop"), 0.002);
    EXPECT_EQ(c.learning_rate("maple"), 0.0035);
    EXPECT_EQ(c.learning_rate("promptsrc"), 0.0025);
    EXPECT_EQ(c.shots, (std::vector<int>{1, 2, 4, 8, 16}));
    EXPECT_EQ(c.seeds, (std::vector<int>{1, 2, 3}));
    auto t = c.train_config("maple", 2);
    EXPECT_EQ(t.epochs, 50);
    EXPECT_EQ(t.batch_size, 4);
    EXPECT_EQ(t.lr, 0.0035);
    EXPECT_EQ(t.seed, 2u);
    EXPECT_EQ(c.zeroshot_template, "a satellite photo of {}");
    EXPECT_EQ(c.method_config("maple").depth, 9);
    auto single = config_from_json(doc(R"({"datasets": ["eurosat"], "methods": ["coop", "maple"], "train": {"lr": 0.01}})"));
    EXPECT_EQ(single.learning_rate("maple"), 0.01);
    auto mixed = config_from_json(doc(R"({"datasets": ["eurosat"], "methods": ["coop", "maple"], "train": {"lr": {"maple": 0.01}}})"));
    EXPECT_EQ(mixed.learning_rate("maple"), 0.01);
    EXPECT_EQ(mixed.learning_rate("coop"), 0.002);
}

TEST(Config, InvalidValuesNameTheField) {
    const auto ok = doc(R"({"datasets": ["eurosat"], "methods": ["coop"]})");
    EXPECT_EQ(config_error(ok), "");
    auto with = [&](const std::string& patch) { return config_error(ok.patch(nlohmann::json::parse(patch))); };
    EXPECT_EQ(with(R"([{"op": "add", "path": "/shots", "value": [1, 3]}])"), "shots: 3 is not one of 1, 2, 4, 8, 16");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/seeds", "value": [1, 2, 1]}])"), "seeds: duplicate value 1");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/epochs", "value": 5}])"), "unknown key 'epochs'");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/train", "value": {"epoch": 5}}])"), "train: unknown key 'epoch'");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/train", "value": {"epochs": "many"}}])"), "train.epochs: wrong type");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/train", "value": {"epochs": 0}}])"), "train.epochs must be >= 1");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/train", "value": {"lr": {"coop": -1}}}])"), "train.lr.coop: must be > 0");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/train", "value": {"lr": {"probe": 1}}}])"), "train.lr: unknown key 'probe'");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/method_overrides", "value": {"coop": {"n_ctxx": 2}}}])"), "method: unknown key 'n_ctxx'");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/method_overrides", "value": {"coop": {"n_ctx": 0}}}])"), "method.n_ctx must be >= 1");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/probe", "value": {"refine_steps": 9}}])"), "probe.refine_steps: must be in [0, 8]");
    EXPECT_EQ(with(R"([{"op": "add", "path": "/zeroshot", "value": {"template": "no placeholder"}}])").find("placeholder") != std::string::npos, true);
    EXPECT_NE(with(R"([{"op": "replace", "path": "/datasets", "value": ["imagenet"]}])").find("datasets: "), std::string::npos);
    EXPECT_NE(with(R"([{"op": "replace", "path": "/methods", "value": ["clip-adapter"]}])").find("methods: unknown method"), std::string::npos);
    EXPECT_EQ(with(R"([{"op": "replace", "path": "/methods", "value": []}])"), "methods: at least one method is required");
    EXPECT_NE(config_error(nlohmann::json::array()), "");
}

TEST(Config, ExampleDocumentMatchesSchemaAndParses) {
    const auto example = nlohmann::json::parse(detail::read_text(asset_path("config/example.json"), "example"));
    const auto schema = nlohmann::json::parse(detail::read_text(asset_path("config/schema.json"), "schema"));
    // every object level of the example lists exactly the keys the schema declares
    std::function<void(const nlohmann::json&, const nlohmann::json&, const std::string&)> same_keys =
        [&](const nlohmann::json& value, const nlohmann::json& s, const std::string& where) {
            if (!s.contains("properties")) return;
            std::set<std::string> a, b;
            for (const auto& [k, v] : value.items()) a.insert(k);
            for (const auto& [k, v] : s.at("properties").items()) b.insert(k);
            if (where.rfind("config.method_overrides.", 0) == 0)
                EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end())) << where;  // per-method subsets
            else
                EXPECT_EQ(a, b) << where;
            for (const auto& [k, v] : value.items())
                if (v.is_object() && s.at("properties").contains(k)) same_keys(v, s.at("properties").at(k), where + "." + k);
        };
    same_keys(example, schema, "config");
    auto c = config_from_json(example);
    EXPECT_EQ(c.methods.size(), 6u);
    // each top-level key is accepted on its own
    for (const auto& [k, v] : schema.at("properties").items()) {
        auto j = doc(R"({"datasets": ["eurosat"], "methods": ["coop"]})");
        j[k] = example.at(k);
        EXPECT_NO_THROW(config_from_json(j)) << k;
    }
}

TEST(Config, EveryMethodTunableIsReachable) {
    for (const auto& m : {"coop", "cocoop", "maple", "promptsrc"}) {
        auto defaults = MethodConfig::defaults(parse_method(m)).to_json();
        for (const auto& [k, v] : defaults.items()) {
            if (k == "method") continue;
            auto j = doc(R"({"datasets": ["eurosat"]})");
            j["methods"] = {m};
            j["method_overrides"][m][k] = v;
            auto c = config_from_json(j);
            EXPECT_EQ(c.method_config(m).to_json(), defaults) << m << "." << k;
        }
    }
    auto j = doc(R"({"datasets": ["eurosat"], "methods": ["promptsrc"],
                     "method_overrides": {"promptsrc": {"lambda1": 3.5, "n_templates": 7, "ensemble_sigma": 2.0}}})");
    auto c = config_from_json(j);
    EXPECT_EQ(c.method_config("promptsrc").lambda1, 3.5);
    EXPECT_EQ(c.method_config("promptsrc").n_templates, 7);
    EXPECT_EQ(c.method_config("promptsrc").ensemble_sigma, 2.0);
    EXPECT_EQ(c.method_config("promptsrc").depth, 9);
}

TEST(Config, HashIsStableAndIgnoresPaths) {
    const auto a = doc(R"({"datasets": ["eurosat"], "methods": ["coop"], "paths": {"out": "x"}})");
    const auto b = doc(R"({"paths": {"out": "elsewhere", "data_root": "/data"}, "methods": ["coop"], "datasets": ["eurosat"]})");
    EXPECT_EQ(config_from_json(a).hash(), config_from_json(a).hash());
    EXPECT_EQ(config_from_json(a).hash(), config_from_json(b).hash());
    EXPECT_EQ(config_from_json(a).hash().size(), 64u);
    auto c = a;
    c["train"] = {{"epochs", 10}};
    EXPECT_NE(config_from_json(c).hash(), config_from_json(a).hash());
    auto d = a;
    d["method_overrides"] = {{"coop", {{"n_ctx", 4}}}};
    EXPECT_EQ(config_from_json(d).hash(), config_from_json(a).hash());  // explicit default
}

TEST(Config, EnvironmentOverridesPathsOnly) {
    const auto j = doc(R"({"datasets": ["eurosat"], "methods": ["coop"], "paths": {"out": "results", "data_root": "data"}})");
    const auto plain = config_from_json(j);
    ::setenv("RSPROMPT_OUT", "/tmp/env-out", 1);
    ::setenv("RSPROMPT_DATA_ROOT", "/tmp/env-data", 1);
    ::setenv("RSPROMPT_BACKBONE", "micro:9", 1);
    ::setenv("RSPROMPT_EPOCHS", "3", 1);
    const auto env = config_from_json(j);
    for (const char* v : {"RSPROMPT_OUT", "RSPROMPT_DATA_ROOT", "RSPROMPT_BACKBONE", "RSPROMPT_EPOCHS"}) ::unsetenv(v);
    EXPECT_EQ(env.paths.out, "/tmp/env-out");
    EXPECT_EQ(env.paths.data_root, "/tmp/env-data");
    EXPECT_EQ(env.paths.backbone, "micro:9");
    EXPECT_EQ(env.train.epochs, 50);
    EXPECT_EQ(env.hash(), plain.hash());
}

TEST(Plan, FullGridEnumerates540TrainingCells) {
    auto j = doc(R"({"methods": ["coop", "cocoop", "maple", "promptsrc"]})");
    j["datasets"] = dataset_names();
    auto cfg = config_from_json(j);
    auto plan = build_plan(cfg, {});
    EXPECT_EQ(plan.tasks.size(), 540u);
    EXPECT_EQ(plan.training_cells(), 540u);
    std::set<std::string> ids;
    for (const auto& t : plan.tasks) ids.insert(t.id);
    EXPECT_EQ(ids.size(), 540u);
    j["methods"] = {"zeroshot", "probe", "coop", "cocoop", "maple", "promptsrc"};
    auto all = build_plan(config_from_json(j), {});
    EXPECT_EQ(all.tasks.size(), 540u + 9u + 9u * 5u * 3u);
    EXPECT_EQ(all.training_cells(), 540u);
}

TEST(Plan, TaskIdentityFollowsInputs) {
    auto j = doc(R"({"datasets": ["eurosat"], "methods": ["zeroshot", "probe", "coop"], "shots": [1], "seeds": [1]})");
    PlanDigests d{"bb", {{"eurosat", {"tr", "te"}}}};
    auto p0 = build_plan(config_from_json(j), d);
    ASSERT_EQ(p0.tasks.size(), 3u);
    EXPECT_EQ(build_plan(config_from_json(j), d).tasks[2].id, p0.tasks[2].id);
    j["train"] = {{"epochs", 7}};
    auto p1 = build_plan(config_from_json(j), d);
    EXPECT_EQ(p1.tasks[0].id, p0.tasks[0].id);
    EXPECT_EQ(p1.tasks[1].id, p0.tasks[1].id);
    EXPECT_NE(p1.tasks[2].id, p0.tasks[2].id);
    auto p2 = build_plan(config_from_json(j), PlanDigests{"other", d.splits});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NE(p2.tasks[i].id, p1.tasks[i].id);
    j["paths"] = {{"out", "moved"}};
    EXPECT_EQ(build_plan(config_from_json(j), d).tasks[2].id, p1.tasks[2].id);
}

TEST(Pipeline, OneCellYieldsCheckpointReportAndProvenance) {
    Bench b;
    Workspace ws(config_from_json(b.base()));
    auto plan = build_plan(ws.config(), workspace_digests(ws));
    ASSERT_EQ(plan.tasks.size(), 1u);
    auto s = run_plan(ws, plan);
    EXPECT_TRUE(s.failures.empty());
    EXPECT_EQ(s.executed, 1u);
    const auto dir = task_dir(ws.config(), plan.tasks[0]);
    for (const char* f : {"checkpoint.safetensors", "report.json", "done.json", "train_log.jsonl"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
    ASSERT_EQ(s.reports.size(), 1u);
    const auto& prov = s.reports[0].provenance;
    EXPECT_EQ(prov.at("config_hash"), ws.config().hash());
    EXPECT_EQ(prov.at("backbone_digest"), ws.backbone().digest());
    EXPECT_EQ(prov.at("train_split_digest"), ws.dataset("eurosat").train_digest());
    EXPECT_EQ(prov.at("test_split_digest"), ws.dataset("eurosat").test_digest());
    EXPECT_EQ(prov.at("seed"), "1");
    EXPECT_EQ(s.reports[0].confusion.total(), 20);
    EXPECT_TRUE(fs::exists(ws.config().paths.out / "report" / "results.csv"));
    // one line per step: two epochs of ten 1-shot images in batches of four
    std::ifstream log(dir / "train_log.jsonl");
    int lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    EXPECT_EQ(lines, 6);
}

TEST(Pipeline, RerunIsIdempotentAndForceIsDeterministic) {
    Bench b;
    Workspace ws(config_from_json(b.base(R"(["zeroshot", "probe", "coop"])")));
    auto plan = build_plan(ws.config(), workspace_digests(ws));
    auto first = run_plan(ws, plan);
    ASSERT_TRUE(first.failures.empty());
    EXPECT_EQ(first.executed, 3u);
    const auto ck = task_dir(ws.config(), plan.tasks[2]) / "checkpoint.safetensors";
    const auto before = load_checkpoint<float>(ck, ws.backbone().digest());
    const auto csv = file_bytes(ws.config().paths.out / "report" / "results.csv");
    const auto stamp = fs::last_write_time(ck);
    auto second = run_plan(ws, plan);
    EXPECT_EQ(second.executed, 0u);
    EXPECT_EQ(second.cached, 3u);
    EXPECT_EQ(fs::last_write_time(ck), stamp);
    EXPECT_EQ(file_bytes(ws.config().paths.out / "report" / "results.csv"), csv);
    RunOptions force;
    force.force = true;
    auto third = run_plan(ws, plan, force);
    EXPECT_EQ(third.executed, 3u);
    const auto after = load_checkpoint<float>(ck, ws.backbone().digest());
    ASSERT_EQ(after.state.params.size(), before.state.params.size());
    for (std::size_t i = 0; i < after.state.params.size(); ++i)
        EXPECT_TRUE(after.state.params[i].second.value() == before.state.params[i].second.value()) << after.state.params[i].first;
    EXPECT_EQ(file_bytes(ws.config().paths.out / "report" / "results.csv"), csv);
    // the probe and the prompt cell consumed the same few-shot manifest
    std::set<std::string> fewshot;
    for (const auto& r : first.reports)
        if (r.provenance.count("fewshot_digest")) fewshot.insert(r.provenance.at("fewshot_digest"));
    EXPECT_EQ(first.reports[0].provenance.count("fewshot_digest") + first.reports[1].provenance.count("fewshot_digest"), 2u);
    EXPECT_EQ(fewshot.size(), 1u);
}

TEST(Pipeline, FailedCellIsRecordedAndOthersComplete) {
    Bench b;
    auto j = b.base(R"(["probe"])");
    j["shots"] = {1, 16};
    Workspace ws(config_from_json(j));
    auto plan = build_plan(ws.config(), workspace_digests(ws));
    auto s = run_plan(ws, plan);
    ASSERT_EQ(s.failures.size(), 1u);
    EXPECT_NE(s.failures[0].second.find("16 required"), std::string::npos);
    auto state = read_json(ws.config().paths.out / "plan.json");
    EXPECT_EQ(state["tasks"][0]["status"], "done");
    EXPECT_EQ(state["tasks"][1]["status"], "failed");
    EXPECT_EQ(s.reports.size(), 1u);
}

TEST(CrossEval, DiagonalEqualsInDomainReports) {
    Bench b;
    auto j = b.base(R"(["cocoop"])");
    j["seeds"] = {1, 2};
    j["crosseval"] = {{"shots", 1}};
    Workspace ws(config_from_json(j));
    auto s = run_plan(ws, build_plan(ws.config(), workspace_digests(ws)));
    ASSERT_EQ(s.reports.size(), 1u);
    auto grid = cross_eval(ws, "cocoop", 1);
    ASSERT_TRUE(grid.at("eurosat", "eurosat").has_value());
    EXPECT_EQ(*grid.at("eurosat", "eurosat"), s.reports[0].mean_accuracy);
    EXPECT_THROW(cross_eval(ws, "probe", 1), ConfigError);
    EXPECT_THROW(cross_eval(ws, "zeroshot", 1), ConfigError);
    auto missing = cross_eval(ws, "coop", 1);
    EXPECT_EQ(missing.missing(), 1u);
}

TEST(CrossEval, TransferMatchesDirectEvaluationWithoutTargetTraining) {
    Bench b;
    // target: UC Merced classes, fresh images; only its test images stay on disk
    rsprompt::testing::write_scene_dataset(b.dir.path / "data" / "ucmerced", "ucmerced", 4, -1, 9);
    auto [train, test] = rsprompt::testing::write_splits(b.dir.path / "data", b.dir.path / "splits", "ucmerced", 0.25);
    for (const auto& it : train.items) fs::remove(b.dir.path / "data" / "ucmerced" / it.id);
    auto j = b.base(R"(["coop"])");
    j["datasets"] = {"eurosat", "ucmerced"};
    j["crosseval"] = {{"shots", 1}, {"sources", {"eurosat"}}, {"targets", {"eurosat", "ucmerced"}}};
    j["data"]["verify_files"] = false;
    auto cfg = config_from_json(j);
    cfg.datasets = {"eurosat"};
    Workspace ws(cfg);
    ASSERT_TRUE(run_plan(ws, build_plan(ws.config(), workspace_digests(ws))).failures.empty());
    auto grid = cross_eval(ws, "coop", 1);
    ASSERT_TRUE(grid.at("eurosat", "ucmerced").has_value());

    // oracle: per-image encoding and explicit cosine argmax with the target class names
    auto ck = load_checkpoint<float>(cell_dir(cfg.paths.out, "eurosat", "coop", 1, 1) / "checkpoint.safetensors", ws.backbone().digest());
    const auto& target = ws.dataset("ucmerced");
    PromptModel<float> model(ws.backbone(), ws.config().method_config("coop"), target.class_names());
    Mat<float> text = model.text_features(ck.state).value();
    int correct = 0;
    for (const auto& it : test.items) {
        auto px = preprocess(load_image(b.dir.path / "data" / "ucmerced" / it.id), ws.backbone().preprocess_spec());
        RowVec<float> img = ws.backbone().encode_image(px).value().row(0);
        int best = 0;
        for (Index c = 1; c < text.rows(); ++c)
            if (img.dot(text.row(c)) > img.dot(text.row(best))) best = static_cast<int>(c);
        correct += best == target.labels().class_id(it.raw_label);
    }
    EXPECT_NEAR(*grid.at("eurosat", "ucmerced"), static_cast<double>(correct) / static_cast<double>(test.items.size()), 1e-12);
}
