#include "rsprompt/methods/prompt_model.hpp"

#include "test_util.hpp"

#include <numeric>

using namespace rsprompt;
using rsprompt::testing::sampled_fd_check;

namespace {

const BackboneBundle<double>& micro() {
    static const auto bb = make_micro_backbone<double>(11);
    return bb;
}

const std::vector<std::string> kClasses{"forest", "river", "dense residential", "airport"};

std::vector<PixelTensor> random_pixels(int n, std::uint64_t seed) {
    Rng r(seed);
    std::vector<PixelTensor> out;
    for (int i = 0; i < n; ++i) {
        PixelTensor px;
        px.size = micro().geometry().image_size;
        px.chw.resize(static_cast<std::size_t>(3 * px.size * px.size));
        for (auto& v : px.chw) v = static_cast<float>(r.normal());
        out.push_back(std::move(px));
    }
    return out;
}

MethodConfig micro_config(Method m) {
    auto c = MethodConfig::defaults(m);
    if (m == Method::maple || m == Method::promptsrc) c.depth = 2;
    if (m == Method::promptsrc) c.n_templates = 5;
    return c;
}

std::vector<std::string> few_templates() { return load_templates(asset_path("templates/diversity_v1.txt"), 5); }

PromptModel<double> model_for(Method m) { return PromptModel<double>(micro(), micro_config(m), kClasses, few_templates()); }

std::vector<ad::Var<double>> all_params(const PromptState<double>& s) {
    std::vector<ad::Var<double>> v;
    for (const auto& [n, p] : s.params) v.push_back(p);
    return v;
}

double max_abs(const Mat<double>& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST(Methods, ParseAndDefaults) {
    for (Method m : prompt_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_THROW(parse_method("kgcoop"), ConfigError);
    EXPECT_EQ(MethodConfig::defaults(Method::coop).n_ctx, 4);
    EXPECT_EQ(MethodConfig::defaults(Method::maple).n_ctx, 2);
    EXPECT_EQ(MethodConfig::defaults(Method::maple).depth, 9);
    EXPECT_EQ(MethodConfig::defaults(Method::promptsrc).depth, 9);
    EXPECT_EQ(MethodConfig::defaults(Method::promptsrc).vision_prompt_len, 4);
    auto bad = MethodConfig::defaults(Method::coop);
    bad.depth = 3;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Methods, InitShapesAndDeterminism) {
    const auto& bb = micro();
    for (Method m : prompt_methods()) {
        auto a = init_prompt_state(bb, micro_config(m), 1);
        auto b = init_prompt_state(bb, micro_config(m), 1);
        auto c = init_prompt_state(bb, micro_config(m), 2);
        EXPECT_TRUE(a.same_values(b)) << to_string(m);
        EXPECT_EQ(a.get("context").rows(), micro_config(m).n_ctx);
        EXPECT_EQ(a.get("context").cols(), bb.text_width());
        if (m != Method::coop) EXPECT_FALSE(a.same_values(c)) << to_string(m);
    }
    auto maple = init_prompt_state(bb, micro_config(Method::maple), 1);
    EXPECT_EQ(maple.series("deep_text").size(), 1u);
    EXPECT_EQ(maple.get("coupling.1.weight").rows(), bb.vision_width());
    EXPECT_EQ(maple.get("coupling.1.weight").cols(), bb.text_width());
    auto src = init_prompt_state(bb, micro_config(Method::promptsrc), 1);
    EXPECT_EQ(src.series("deep_vision").size(), 2u);
    EXPECT_EQ(src.get("deep_vision.0").rows(), 4);
    auto co = init_prompt_state(bb, micro_config(Method::cocoop), 1);
    EXPECT_EQ(co.get("meta.linear1.weight").rows(), bb.embed_dim() / 16);
    EXPECT_EQ(co.get("meta.linear1.weight").cols(), bb.embed_dim());
    EXPECT_EQ(co.get("meta.linear2.weight").rows(), bb.text_width());
}

TEST(Methods, ContextStartsFromTemplateEmbeddings) {
    const auto& bb = micro();
    auto s = init_prompt_state(bb, micro_config(Method::coop), 3);
    auto ids = bb.tokenizer().body("a photo of a");
    ASSERT_EQ(ids.size(), 4u);
    for (Index i = 0; i < 4; ++i) EXPECT_EQ(Mat<double>(s.get("context").value().row(i)), Mat<double>(bb.weights().token_embedding.row(ids[static_cast<std::size_t>(i)])));
    auto maple = init_prompt_state(bb, micro_config(Method::maple), 3);
    for (Index i = 0; i < 2; ++i)
        EXPECT_EQ(Mat<double>(maple.get("context").value().row(i)), Mat<double>(bb.weights().token_embedding.row(ids[static_cast<std::size_t>(2 + i)])));
}

TEST(Methods, InitRejectsBadConfig) {
    const auto& bb = micro();
    auto c = micro_config(Method::coop);
    c.init_template = "a satellite photo of a";
    EXPECT_THROW(init_prompt_state(bb, c, 1), ConfigError);
    auto d = micro_config(Method::maple);
    d.depth = 3;
    EXPECT_THROW(init_prompt_state(bb, d, 1), ConfigError);
    auto r = micro_config(Method::coop);
    r.init_template.clear();
    auto s = init_prompt_state(bb, r, 1);
    EXPECT_LT(std::abs(s.get("context").value().mean()), 0.02);
}

TEST(Methods, ZeroStepCoopEqualsZeroShot) {
    const auto& bb = micro();
    auto model = model_for(Method::coop);
    auto state = init_prompt_state(bb, micro_config(Method::coop), 1);
    auto batch = prepare_images(bb, random_pixels(5, 4), false);
    auto bank = build_zeroshot_classifier(bb, kClasses, "a photo of a {}");
    Mat<double> zs = zeroshot_logits(bank, batch.frozen, bb.logit_scale());
    Mat<double> co = model.predict_logits(batch, state);
    EXPECT_LT(max_abs(zs - co), 1e-10);
    EXPECT_LT(max_abs(bank.embeddings - model.text_features(state.frozen()).value()), 1e-12);
}

TEST(Methods, CocoopWithZeroMetaNetEqualsCoop) {
    const auto& bb = micro();
    auto coop = model_for(Method::coop);
    auto cocoop = model_for(Method::cocoop);
    auto s_coop = init_prompt_state(bb, micro_config(Method::coop), 5);
    auto s_co = init_prompt_state(bb, micro_config(Method::cocoop), 5);
    Rng r(8);
    s_co.params[0].second = ad::parameter<double>(s_coop.get("context").value() + r.normal_matrix<double>(4, bb.text_width(), 0.05));
    s_coop.params[0].second = ad::parameter<double>(s_co.get("context").value());
    for (auto& [n, v] : s_co.params)
        if (n.rfind("meta.linear2", 0) == 0) v = ad::parameter<double>(Mat<double>::Zero(v.rows(), v.cols()));
    auto batch = prepare_images(bb, random_pixels(3, 9), false);
    EXPECT_EQ(coop.predict_logits(batch, s_coop), cocoop.predict_logits(batch, s_co));
}

TEST(Methods, CocoopBatchPermutationEquivariance) {
    const auto& bb = micro();
    auto model = model_for(Method::cocoop);
    auto s = init_prompt_state(bb, micro_config(Method::cocoop), 2);
    auto batch = prepare_images(bb, random_pixels(4, 10), false);
    Mat<double> full = model.forward(batch, s).logits.value();
    std::vector<std::size_t> perm{2, 0, 3, 1};
    Mat<double> permuted = model.forward(batch.select(perm), s).logits.value();
    for (std::size_t i = 0; i < perm.size(); ++i)
        EXPECT_LT(max_abs(permuted.row(static_cast<Index>(i)) - full.row(static_cast<Index>(perm[i]))), 1e-12);
    EXPECT_LT(max_abs(model.predict_logits(batch, s) - full), 1e-12);
}

TEST(Methods, PredictMatchesForward) {
    const auto& bb = micro();
    for (Method m : prompt_methods()) {
        auto model = model_for(m);
        auto s = init_prompt_state(bb, micro_config(m), 4);
        auto batch = prepare_images(bb, random_pixels(3, 12), model.needs_stems());
        EXPECT_LT(max_abs(model.predict_logits(batch, s, 2) - model.forward(batch, s).logits.value()), 1e-12) << to_string(m);
    }
}

TEST(Methods, GradientsMatchFiniteDifferences) {
    const auto& bb = micro();
    std::vector<int> labels{0, 3, 1};
    for (Method m : prompt_methods()) {
        auto model = model_for(m);
        auto s = init_prompt_state(bb, micro_config(m), 6);
        auto batch = prepare_images(bb, random_pixels(3, 13), model.needs_stems());
        auto rep = sampled_fd_check(all_params(s), [&] { return model.loss(model.forward(batch, s), labels).total; }, 40, 77);
        EXPECT_LT(rep.max_rel_error, 1e-5) << to_string(m);
    }
}

TEST(Methods, BackboneReceivesNoGradientAndStaysFixed) {
    const auto& bb = micro();
    const std::string before = bb.compute_digest();
    std::vector<int> labels{1, 2};
    for (Method m : prompt_methods()) {
        auto model = model_for(m);
        auto s = init_prompt_state(bb, micro_config(m), 7);
        auto batch = prepare_images(bb, random_pixels(2, 14), model.needs_stems());
        ad::backward(model.loss(model.forward(batch, s), labels).total);
        for (const auto& [n, v] : s.params) {
            if (m == Method::cocoop && n.rfind("meta", 0) == 0) continue;
            EXPECT_GT(v.grad().size(), 0) << to_string(m) << " " << n;
        }
    }
    EXPECT_EQ(bb.compute_digest(), before);
}

TEST(Methods, MapleVisionPromptsAreCoupledFromText) {
    const auto& bb = micro();
    auto model = model_for(Method::maple);
    auto s = init_prompt_state(bb, micro_config(Method::maple), 8);
    auto inj = model.vision_prompts(s.frozen());
    ASSERT_EQ(inj.layers.size(), 2u);
    std::vector<Mat<double>> text{s.get("context").value(), s.get("deep_text.0").value()};
    for (std::size_t k = 0; k < 2; ++k) {
        const auto& w = s.get("coupling." + std::to_string(k) + ".weight").value();
        const auto& b = s.get("coupling." + std::to_string(k) + ".bias").value();
        Mat<double> want(text[k].rows(), w.rows());
        for (Index i = 0; i < want.rows(); ++i)
            for (Index j = 0; j < want.cols(); ++j) want(i, j) = text[k].row(i).dot(w.row(j)) + b(0, j);
        EXPECT_LT(max_abs(inj.layers[k].value() - want), 1e-12);
    }
    // Changing a text prompt moves the image features; changing only the coupling
    // of an unused layer cannot move the text features.
    auto batch = prepare_images(bb, random_pixels(2, 15), true);
    Mat<double> base_img = model.image_features(batch, s.frozen()).value();
    Mat<double> base_txt = model.text_features(s.frozen()).value();
    auto moved = s.clone();
    moved.params[0].second.node()->value += Rng(5).normal_matrix<double>(2, bb.text_width(), 0.1);
    EXPECT_GT(max_abs(model.image_features(batch, moved.frozen()).value() - base_img), 1e-6);
    auto coup = s.clone();
    for (auto& [n, v] : coup.params)
        if (n == "coupling.1.bias") v.node()->value += Rng(4).normal_matrix<double>(v.rows(), v.cols(), 0.1);
    EXPECT_EQ(model.text_features(coup.frozen()).value(), base_txt);
    EXPECT_GT(max_abs(model.image_features(batch, coup.frozen()).value() - base_img), 1e-6);
}

TEST(Methods, DiversityTargetsAreNormalizedTemplateMeans) {
    const auto& bb = micro();
    auto t = few_templates();
    Mat<double> got = textual_diversity_targets(bb, kClasses, t, 2);
    for (std::size_t c = 0; c < kClasses.size(); ++c) {
        RowVec<double> acc = RowVec<double>::Zero(bb.embed_dim());
        for (const auto& x : t) acc += template_feature(bb, x, kClasses[c]);
        acc.normalize();
        EXPECT_LT(max_abs(got.row(static_cast<Index>(c)) - acc), 1e-12);
    }
    EXPECT_EQ(load_templates(asset_path("templates/diversity_v1.txt")).size(), 60u);
    EXPECT_THROW(load_templates(asset_path("templates/diversity_v1.txt"), 61), ConfigError);
}

TEST(Methods, PromptsrcLossToyOracle) {
    // Two images, three classes, hand-set features; every term computed by hand.
    Mat<double> logits(2, 3), img(2, 2), fimg(2, 2), txt(3, 2), ftxt(3, 2), flog(2, 3);
    logits << 1.0, 0.5, -0.5, 0.0, 2.0, 1.0;
    flog << 0.5, 0.5, 0.0, 1.0, 1.0, 1.0;
    img << 0.6, 0.8, 1.0, 0.0;
    fimg << 0.8, 0.6, 1.0, 0.0;
    txt << 1.0, 0.0, 0.0, 1.0, 0.6, 0.8;
    ftxt << 1.0, 0.0, 0.6, 0.8, 0.6, 0.8;
    std::vector<int> labels{0, 2};
    auto cfg = MethodConfig::defaults(Method::promptsrc);
    auto out = promptsrc_loss<double>(ad::constant(logits), ad::constant(img), ad::constant(txt), fimg, ftxt, flog, labels, cfg);

    auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
    double ce = 0.5 * ((lse(1.0, 0.5, -0.5) - 1.0) + (lse(0.0, 2.0, 1.0) - 1.0));
    double l1i = (0.2 + 0.2 + 0 + 0) / 4.0;
    double l1t = (0 + 0 + 0.6 + 0.2 + 0 + 0) / 6.0;
    double kl = 0;
    for (Index i = 0; i < 2; ++i) {
        double zp = lse(logits(i, 0), logits(i, 1), logits(i, 2)), zf = lse(flog(i, 0), flog(i, 1), flog(i, 2));
        for (Index j = 0; j < 3; ++j) {
            double lp = logits(i, j) - zp, lf = flog(i, j) - zf;
            kl += std::exp(lf) * (lf - lp);
        }
    }
    kl /= 6.0;
    EXPECT_NEAR(out.ce, ce, 1e-14);
    EXPECT_NEAR(out.l1_image, l1i, 1e-14);
    EXPECT_NEAR(out.l1_text, l1t, 1e-14);
    EXPECT_NEAR(out.kl, kl, 1e-14);
    EXPECT_NEAR(out.total.item(), ce + 10.0 * l1i + 25.0 * l1t + 1.0 * kl, 1e-12);
}

TEST(Methods, PromptsrcRegularizersVanishAtIdentity) {
    Mat<double> logits(2, 3), feat(2, 4), txt(3, 4);
    Rng r(3);
    logits = r.normal_matrix<double>(2, 3, 1.0);
    feat = r.normal_matrix<double>(2, 4, 1.0);
    txt = r.normal_matrix<double>(3, 4, 1.0);
    std::vector<int> labels{1, 0};
    auto cfg = MethodConfig::defaults(Method::promptsrc);
    auto out = promptsrc_loss<double>(ad::constant(logits), ad::constant(feat), ad::constant(txt), feat, txt, logits, labels, cfg);
    EXPECT_EQ(out.l1_image, 0.0);
    EXPECT_EQ(out.l1_text, 0.0);
    EXPECT_NEAR(out.kl, 0.0, 1e-15);
    EXPECT_NEAR(out.total.item(), out.ce, 1e-15);
    cfg.lambda1 = cfg.lambda2 = cfg.kl_weight = 0;
    Mat<double> other = feat.array() + 1.0;
    auto ce_only = promptsrc_loss<double>(ad::constant(logits), ad::constant(other), ad::constant(txt), feat, txt, logits, labels, cfg);
    EXPECT_EQ(ce_only.total.item(), ce_only.ce);
}

TEST(Methods, GaussianWeightsClosedForm) {
    auto w = gaussian_weights(50, 30.0, 15.0);
    ASSERT_EQ(w.size(), 50u);
    double z = 0;
    for (int e = 1; e <= 50; ++e) z += std::exp(-0.5 * std::pow((e - 30.0) / 15.0, 2));
    for (int e = 1; e <= 50; ++e) EXPECT_NEAR(w[static_cast<std::size_t>(e - 1)], std::exp(-0.5 * std::pow((e - 30.0) / 15.0, 2)) / z, 1e-15);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-14);
    EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 29);
    auto cfg = MethodConfig::defaults(Method::promptsrc);
    auto d = gaussian_weights(20, cfg);
    auto e = gaussian_weights(20, 10.0, 20 / 3.3);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_DOUBLE_EQ(d[i], e[i]);
    EXPECT_THROW(gaussian_weights(0, 1, 1), ConfigError);
    EXPECT_THROW(gaussian_weights(5, 1, 0), ConfigError);
}

TEST(Methods, AggregateIsWeightedMean) {
    const auto& bb = micro();
    auto cfg = micro_config(Method::promptsrc);
    std::vector<PromptState<double>> snaps;
    for (int k = 0; k < 3; ++k) snaps.push_back(init_prompt_state(bb, cfg, static_cast<std::uint64_t>(10 + k)));
    auto uniform = gaussian_prompt_aggregate(snaps, {1, 1, 1});
    auto weighted = gaussian_prompt_aggregate(snaps, {0.2, 0.5, 0.3});
    auto scaled = gaussian_prompt_aggregate(snaps, {2, 5, 3});
    for (std::size_t i = 0; i < snaps[0].params.size(); ++i) {
        Mat<double> mean = (snaps[0].params[i].second.value() + snaps[1].params[i].second.value() + snaps[2].params[i].second.value()) / 3.0;
        EXPECT_LT(max_abs(uniform.params[i].second.value() - mean), 1e-15);
        Mat<double> wm = 0.2 * snaps[0].params[i].second.value() + 0.5 * snaps[1].params[i].second.value() + 0.3 * snaps[2].params[i].second.value();
        EXPECT_LT(max_abs(weighted.params[i].second.value() - wm), 1e-15);
        EXPECT_LT(max_abs(scaled.params[i].second.value() - wm), 1e-15);
    }
    auto single = gaussian_prompt_aggregate(std::vector<PromptState<double>>{snaps[1]}, {1});
    EXPECT_TRUE(single.same_values(snaps[1]));
    EXPECT_THROW(gaussian_prompt_aggregate(snaps, {1, 1}), ContractError);
    EXPECT_THROW(gaussian_prompt_aggregate(snaps, {0, 0, 0}), ContractError);
    EXPECT_THROW(gaussian_prompt_aggregate(snaps, {1, -1, 1}), ContractError);
    std::vector<PromptState<double>> mixed{snaps[0], init_prompt_state(bb, micro_config(Method::coop), 1)};
    EXPECT_THROW(gaussian_prompt_aggregate(mixed, {1, 1}), ContractError);
}

TEST(Methods, StateMismatchRejected) {
    const auto& bb = micro();
    auto model = model_for(Method::coop);
    auto s = init_prompt_state(bb, micro_config(Method::maple), 1);
    auto batch = prepare_images(bb, random_pixels(1, 16), false);
    EXPECT_THROW(model.predict_logits(batch, s), ConfigError);
    auto maple = model_for(Method::maple);
    EXPECT_THROW(maple.forward(batch, init_prompt_state(bb, micro_config(Method::maple), 1)), ContractError);
    EXPECT_THROW(PromptModel<double>(bb, micro_config(Method::coop), {}), ConfigError);
}
