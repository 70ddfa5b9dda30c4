#include "rsprompt/probe/probe.hpp"

#include "test_util.hpp"

using namespace rsprompt;
using rsprompt::testing::TempDir;

namespace {

FeatureTable table(const Mat<double>& x, std::vector<int> y, int classes) { return {x, std::move(y), classes, "toy", "none"}; }

FeatureTable gaussian_blobs(int classes, int per_class, int dim, double spread, std::uint64_t seed) {
    Rng r(seed);
    Mat<double> centers = r.normal_matrix<double>(classes, dim, 1.0);
    Mat<double> x(classes * per_class, dim);
    std::vector<int> y;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            x.row(c * per_class + i) = centers.row(c) + r.normal_matrix<double>(1, dim, spread);
            y.push_back(c);
        }
    return table(x, y, classes);
}

// Plain full-batch gradient descent on the same objective, written out per coordinate.
std::pair<double, Mat<double>> gd_oracle(const Mat<double>& x, const std::vector<int>& y, int C, double C_reg, int iters, double lr) {
    const Index d = x.cols();
    Mat<double> W = Mat<double>::Zero(C, d);
    std::vector<double> b(static_cast<std::size_t>(C), 0.0);
    auto objective = [&](Mat<double>* gW, std::vector<double>* gb) {
        double f = 0;
        if (gW) gW->setZero(C, d);
        if (gb) gb->assign(static_cast<std::size_t>(C), 0.0);
        for (Index i = 0; i < x.rows(); ++i) {
            std::vector<double> z(static_cast<std::size_t>(C));
            double zmax = -1e300;
            for (int c = 0; c < C; ++c) {
                z[static_cast<std::size_t>(c)] = b[static_cast<std::size_t>(c)];
                for (Index k = 0; k < d; ++k) z[static_cast<std::size_t>(c)] += W(c, k) * x(i, k);
                zmax = std::max(zmax, z[static_cast<std::size_t>(c)]);
            }
            double s = 0;
            for (double v : z) s += std::exp(v - zmax);
            const double lse = zmax + std::log(s);
            f += lse - z[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
            for (int c = 0; c < C; ++c) {
                double g = std::exp(z[static_cast<std::size_t>(c)] - lse) - (c == y[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
                if (gb) (*gb)[static_cast<std::size_t>(c)] += g;
                if (gW)
                    for (Index k = 0; k < d; ++k) (*gW)(c, k) += g * x(i, k);
            }
        }
        for (int c = 0; c < C; ++c)
            for (Index k = 0; k < d; ++k) {
                f += W(c, k) * W(c, k) / (2 * C_reg);
                if (gW) (*gW)(c, k) += W(c, k) / C_reg;
            }
        return f;
    };
    Mat<double> gW;
    std::vector<double> gb;
    for (int it = 0; it < iters; ++it) {
        objective(&gW, &gb);
        W -= lr * gW;
        for (int c = 0; c < C; ++c) b[static_cast<std::size_t>(c)] -= lr * gb[static_cast<std::size_t>(c)];
    }
    return {objective(nullptr, nullptr), W};
}

}  // namespace

TEST(Lbfgs, MinimizesQuadraticAndRosenbrock) {
    auto quad = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        Eigen::VectorXd c(3);
        c << 1, -2, 3;
        Eigen::VectorXd w(3);
        w << 1, 10, 100;
        g = (w.array() * (x - c).array()).matrix();
        return 0.5 * (w.array() * (x - c).array().square()).sum();
    };
    auto r = lbfgs_minimize(quad, Eigen::VectorXd::Zero(3));
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.x(0), 1, 1e-6);
    EXPECT_NEAR(r.x(2), 3, 1e-6);
    auto rosen = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        g.resize(2);
        g(0) = -2 * (1 - x(0)) - 400 * x(0) * (x(1) - x(0) * x(0));
        g(1) = 200 * (x(1) - x(0) * x(0));
        return (1 - x(0)) * (1 - x(0)) + 100 * std::pow(x(1) - x(0) * x(0), 2);
    };
    Eigen::VectorXd x0(2);
    x0 << -1.2, 1;
    auto q = lbfgs_minimize(rosen, x0, {.max_iter = 1000, .gtol = 1e-8});
    EXPECT_NEAR(q.x(0), 1, 1e-5);
    EXPECT_NEAR(q.x(1), 1, 1e-5);
}

TEST(Probe, ObjectiveGradientMatchesFiniteDifferences) {
    auto t = gaussian_blobs(3, 4, 5, 0.5, 1);
    Rng r(2);
    Eigen::VectorXd th(3 * 5 + 3);
    for (Index i = 0; i < th.size(); ++i) th(i) = r.normal() * 0.3;
    Eigen::VectorXd g;
    probe_objective(t, 0.7, th, &g);
    for (Index i = 0; i < th.size(); ++i) {
        auto up = th, dn = th;
        up(i) += 1e-6;
        dn(i) -= 1e-6;
        double num = (probe_objective(t, 0.7, up, nullptr) - probe_objective(t, 0.7, dn, nullptr)) / 2e-6;
        EXPECT_NEAR(g(i), num, 1e-6 * std::max(1.0, std::abs(num)));
    }
}

TEST(Probe, SeparableToyFitsPerfectly) {
    Mat<double> x(6, 2);
    x << -2, 0.1, -1.5, -0.3, -1, 0.2, 1, 0.1, 1.5, -0.2, 2, 0.3;
    auto t = table(x, {0, 0, 0, 1, 1, 1}, 2);
    auto m = fit_probe(t, 1e4);
    EXPECT_EQ(evaluate_probe(m, t), 1.0);
    EXPECT_LE(m.iterations, 1000);
}

TEST(Probe, VanishingRegularizationLimit) {
    auto t = gaussian_blobs(4, 3, 6, 0.3, 3);
    auto m = fit_probe(t, 1e-10);
    EXPECT_LT(m.weight.norm(), 1e-6);
    Mat<double> z = m.logits(t.features);
    for (Index i = 0; i < z.rows(); ++i) EXPECT_LT(z.row(i).maxCoeff() - z.row(i).minCoeff(), 1e-6);
}

TEST(Probe, MatchesGradientDescentOracle) {
    Mat<double> x(4, 2);
    x << 1.0, 0.5, 0.2, -1.0, -0.8, 0.3, -0.1, -0.6;
    std::vector<int> y{0, 1, 0, 1};
    auto m = fit_probe(table(x, y, 2), 1.0, {.max_iter = 1000, .gtol = 1e-10});
    auto [f_oracle, W_oracle] = gd_oracle(x, y, 2, 1.0, 200000, 0.05);
    EXPECT_NEAR(m.objective, f_oracle, 1e-6);
    EXPECT_LT((m.weight - W_oracle).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Probe, WeightNormNonDecreasingInC) {
    auto t = gaussian_blobs(3, 5, 8, 1.0, 4);
    double prev = 0;
    for (double c : {1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0}) {
        auto m = fit_probe(t, c, {.max_iter = 1000, .gtol = 1e-9});
        EXPECT_GE(m.weight.norm(), prev - 1e-9) << c;
        prev = m.weight.norm();
    }
}

TEST(Probe, DeterministicAndPersistent) {
    TempDir dir("probe");
    auto t = gaussian_blobs(3, 4, 6, 0.8, 5);
    auto a = fit_probe(t, 2.0), b = fit_probe(t, 2.0);
    EXPECT_EQ(a.weight, b.weight);
    EXPECT_EQ(a.bias, b.bias);
    save_probe(a, dir.path / "p.safetensors");
    auto c = load_probe(dir.path / "p.safetensors");
    EXPECT_EQ(c.weight, a.weight);
    EXPECT_EQ(c.bias, a.bias);
    EXPECT_EQ(c.C_reg, 2.0);
    EXPECT_EQ(c.iterations, a.iterations);
}

TEST(Probe, ContractErrors) {
    auto t = gaussian_blobs(3, 2, 4, 0.5, 6);
    auto missing = t;
    missing.num_classes = 4;
    EXPECT_THROW(fit_probe(missing, 1.0), ContractError);
    EXPECT_THROW(fit_probe(t, 0.0), ConfigError);
    auto m = fit_probe(t, 1.0);
    auto wrong = gaussian_blobs(3, 2, 5, 0.5, 6);
    EXPECT_THROW(evaluate_probe(m, wrong), ContractError);
}

TEST(Probe, PerfectAndSingleClassEvaluation) {
    auto t = gaussian_blobs(3, 4, 4, 0.01, 7);
    ProbeModel perfect;
    perfect.weight = Mat<double>::Zero(3, 4);
    perfect.bias = RowVec<double>::Zero(3);
    // Nearest-centre predictor built from the (noise-free) class means.
    for (int c = 0; c < 3; ++c) perfect.weight.row(c) = 10 * t.features.row(c * 4);
    for (int c = 0; c < 3; ++c) perfect.bias(c) = -5 * t.features.row(c * 4).squaredNorm();
    EXPECT_EQ(evaluate_probe(perfect, t), 1.0);
    auto single = table(Rng(1).normal_matrix<double>(5, 3, 1.0), {0, 0, 0, 0, 0}, 1);
    EXPECT_EQ(evaluate_probe(fit_probe(single, 1.0), single), 1.0);
}

TEST(CSearch, FlatCurvePicksSmallestGridValue) {
    auto r = search_C([](double) { return 0.5; });
    EXPECT_DOUBLE_EQ(r.best_C, 1e-4);
    EXPECT_LE(r.refine_steps, 8);
}

TEST(CSearch, BisectionConvergesOnUnimodalCurve) {
    const double step = 8.0 / 9.0;
    for (double peak : {1.2345, -2.71, 0.05, 3.3}) {
        auto r = search_C([&](double c) { return -std::pow(std::log10(c) - peak, 2); });
        EXPECT_LE(std::abs(std::log10(r.best_C) - peak), 2 * step / 256.0 + 1e-12) << peak;
        EXPECT_EQ(r.refine_steps, 8);
        EXPECT_LE(r.trace.size(), 10u + 16u);
    }
    auto edge = search_C([](double c) { return -std::abs(std::log10(c) - 4.0); });
    EXPECT_DOUBLE_EQ(edge.best_C, 1e4);
}

TEST(CSearch, OnFeatureTables) {
    auto train = gaussian_blobs(3, 4, 6, 0.7, 8);
    auto val = gaussian_blobs(3, 4, 6, 0.7, 8);
    auto r = search_C(train, val);
    EXPECT_GT(r.best_C, 0);
    EXPECT_GE(r.best_score, 1.0 / 3);
    auto empty = val.select({});
    EXPECT_THROW(search_C(train, empty), ContractError);
}

TEST(FeatureCache, ServesBitIdenticalTables) {
    TempDir dir("cache");
    FeatureCache cache(dir.path);
    auto t = gaussian_blobs(2, 3, 4, 1.0, 9);
    int calls = 0;
    auto a = cache.get_or_extract("eurosat", "train", "abc", "none", [&] { ++calls; return t; });
    auto b = cache.get_or_extract("eurosat", "train", "abc", "none", [&] { ++calls; return t; });
    EXPECT_EQ(calls, 1);
    EXPECT_EQ(a.features, t.features);
    EXPECT_EQ(b.features, t.features);
    EXPECT_EQ(b.labels, t.labels);
    EXPECT_FALSE(cache.get("eurosat", "train", "abd", "none"));
}

TEST(FeatureExtraction, MicroBackboneRows) {
    TempDir dir("extract");
    auto bb = make_micro_backbone<float>(3);
    Rng r(4);
    for (int i = 0; i < 3; ++i) {
        Image img{20, 18, std::vector<std::uint8_t>(20 * 18 * 3)};
        for (auto& v : img.rgb) v = static_cast<std::uint8_t>(r.below(256));
        save_png(img, dir.path / ("i" + std::to_string(i) + ".png"));
    }
    auto t = extract_features(bb, dir.path, {"i0.png", "i1.png", "i0.png", "i2.png"}, {0, 1, 0, 1}, 2, "train", 2, 3);
    EXPECT_EQ(t.size(), 4);
    EXPECT_EQ(t.features.row(0), t.features.row(2));
    for (Index i = 0; i < 4; ++i) EXPECT_NEAR(t.features.row(i).norm(), 1.0, 1e-6);
    EXPECT_EQ(t.backbone_digest, bb.digest());
    EXPECT_THROW(extract_features(bb, dir.path, {"nope.png"}, {0}, 2, "train"), IoError);
}
