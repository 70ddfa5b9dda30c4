#pragma once

// Multinomial logistic regression on frozen image features:
//   minimize  sum_i CE(W x_i + b, y_i) + ||W||^2 / (2 C_reg)
// (bias unpenalized), solved with L-BFGS from a zero start.

#include "rsprompt/backbone/backbone.hpp"
#include "rsprompt/data/image_io.hpp"
#include "rsprompt/eval/metrics.hpp"
#include "rsprompt/probe/lbfgs.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>

namespace rsprompt {

struct FeatureTable {
    Mat<double> features;  // n x d
    std::vector<int> labels;
    int num_classes = 0;
    std::string split_id;
    std::string backbone_digest;

    Index size() const { return features.rows(); }

    void validate() const {
        if (static_cast<std::size_t>(features.rows()) != labels.size())
            throw ContractError("feature table: " + std::to_string(features.rows()) + " rows for " + std::to_string(labels.size()) + " labels");
        if (!all_finite(features)) throw ContractError("feature table " + split_id + ": non-finite features");
        for (int y : labels)
            if (y < 0 || y >= num_classes) throw ContractError("feature table " + split_id + ": label " + std::to_string(y) + " out of range");
    }

    FeatureTable select(const std::vector<std::size_t>& idx) const {
        FeatureTable t{Mat<double>(static_cast<Index>(idx.size()), features.cols()), {}, num_classes, split_id, backbone_digest};
        for (std::size_t i = 0; i < idx.size(); ++i) {
            t.features.row(static_cast<Index>(i)) = features.row(static_cast<Index>(idx[i]));
            t.labels.push_back(labels[idx[i]]);
        }
        return t;
    }
};

/// Images of `ids` (relative to root) through the frozen image encoder, in manifest
/// order, in chunks of `chunk` images. Rows are unit-norm joint embeddings.
template <class T>
FeatureTable extract_features(const BackboneBundle<T>& bb, const std::filesystem::path& root, const std::vector<std::string>& ids,
                              std::vector<int> labels, int num_classes, std::string split_id, unsigned jobs = 1,
                              std::size_t chunk = 256) {
    FeatureTable t{Mat<double>(static_cast<Index>(ids.size()), bb.embed_dim()), std::move(labels), num_classes, std::move(split_id), bb.digest()};
    for (std::size_t start = 0; start < ids.size(); start += chunk) {
        std::vector<std::string> part(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                      ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + chunk)));
        auto px = load_pixels(root, part, bb.preprocess_spec(), jobs);
        t.features.middleRows(static_cast<Index>(start), static_cast<Index>(part.size())) = bb.encode_images(px, jobs).template cast<double>();
    }
    t.validate();
    return t;
}

/// Feature tables on disk keyed by (dataset, split manifest digest, backbone digest).
class FeatureCache {
public:
    explicit FeatureCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::filesystem::path path_for(const std::string& dataset, const std::string& split_digest, const std::string& backbone_digest) const {
        return dir_ / (dataset + "-" + short_digest(sha256_hex(dataset + "\n" + split_digest + "\n" + backbone_digest)) + ".safetensors");
    }

    std::optional<FeatureTable> get(const std::string& dataset, const std::string& split_id, const std::string& split_digest,
                                    const std::string& backbone_digest) const {
        auto p = path_for(dataset, split_digest, backbone_digest);
        if (!std::filesystem::exists(p)) return std::nullopt;
        auto ar = load_archive(p);
        if (ar.metadata.at("backbone_digest") != backbone_digest || ar.metadata.at("split_digest") != split_digest)
            throw IoError("feature cache entry " + p.string() + " does not match its key");
        FeatureTable t;
        t.features = ar.at("features").to_matrix<double>();
        auto lab = ar.at("labels").to_matrix<double>();
        for (Index i = 0; i < lab.cols(); ++i) t.labels.push_back(static_cast<int>(lab(0, i)));
        t.num_classes = std::stoi(ar.metadata.at("num_classes"));
        t.split_id = split_id;
        t.backbone_digest = backbone_digest;
        t.validate();
        return t;
    }

    void put(const std::string& dataset, const std::string& split_digest, const FeatureTable& t) const {
        std::filesystem::create_directories(dir_);
        TensorArchive ar;
        ar.tensors["features"] = RawTensor::from_matrix<double>(t.features);
        Mat<double> lab(1, static_cast<Index>(t.labels.size()));
        for (std::size_t i = 0; i < t.labels.size(); ++i) lab(0, static_cast<Index>(i)) = t.labels[i];
        ar.tensors["labels"] = RawTensor::from_matrix<double>(lab);
        ar.metadata = {{"dataset", dataset}, {"split_digest", split_digest}, {"backbone_digest", t.backbone_digest},
                       {"num_classes", std::to_string(t.num_classes)}, {"split_id", t.split_id}};
        auto p = path_for(dataset, split_digest, t.backbone_digest);
        auto tmp = p;
        tmp += ".tmp";
        save_archive(ar, tmp);
        std::filesystem::rename(tmp, p);
    }

    /// Cached table, or `extract()` stored under the key.
    FeatureTable get_or_extract(const std::string& dataset, const std::string& split_id, const std::string& split_digest,
                                const std::string& backbone_digest, const std::function<FeatureTable()>& extract) const {
        if (auto t = get(dataset, split_id, split_digest, backbone_digest)) return *t;
        auto t = extract();
        put(dataset, split_digest, t);
        return t;
    }

private:
    std::filesystem::path dir_;
};

struct ProbeModel {
    Mat<double> weight;  // C x d
    RowVec<double> bias; // 1 x C
    double C_reg = 1;
    int iterations = 0;
    bool converged = false;
    double objective = 0;

    Mat<double> logits(const Mat<double>& x) const {
        Mat<double> z = row_dots(x, weight);
        z.rowwise() += bias;
        return z;
    }

    nlohmann::json trace() const {
        return {{"C_reg", C_reg}, {"iterations", iterations}, {"converged", converged}, {"objective", objective}};
    }
};

struct ProbeOptions {
    int max_iter = 1000;
    double gtol = 1e-6;
};

/// Objective value and gradient at packed parameters theta = [vec(W) row-major, b].
inline double probe_objective(const FeatureTable& t, double C_reg, const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    const Index C = t.num_classes, d = t.features.cols(), n = t.size();
    Eigen::Map<const Mat<double>> W(theta.data(), C, d);
    Eigen::Map<const RowVec<double>> b(theta.data() + C * d, C);
    Mat<double> z = row_dots(t.features, Mat<double>(W));
    z.rowwise() += b;
    double f = 0;
    for (Index i = 0; i < n; ++i) {
        const double m = z.row(i).maxCoeff();
        const double lse = m + std::log((z.row(i).array() - m).exp().sum());
        f += lse - z(i, t.labels[static_cast<std::size_t>(i)]);
        z.row(i) = (z.row(i).array() - lse).exp();  // softmax
        z(i, t.labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    f += W.squaredNorm() / (2.0 * C_reg);
    if (grad) {
        grad->resize(theta.size());
        Eigen::Map<Mat<double>> gW(grad->data(), C, d);
        gW.noalias() = z.transpose() * t.features;
        gW += W / C_reg;
        Eigen::Map<RowVec<double>>(grad->data() + C * d, C) = z.colwise().sum();
    }
    return f;
}

inline ProbeModel fit_probe(const FeatureTable& t, double C_reg, const ProbeOptions& opt = {}) {
    t.validate();
    if (!(C_reg > 0) || !std::isfinite(C_reg)) throw ConfigError("probe: C_reg must be positive and finite");
    std::vector<int> seen(static_cast<std::size_t>(t.num_classes), 0);
    for (int y : t.labels) seen[static_cast<std::size_t>(y)] = 1;
    for (int c = 0; c < t.num_classes; ++c)
        if (!seen[static_cast<std::size_t>(c)]) throw ContractError("probe: class " + std::to_string(c) + " has no examples in " + t.split_id);
    const Index C = t.num_classes, d = t.features.cols();
    auto res = lbfgs_minimize([&](const Eigen::VectorXd& th, Eigen::VectorXd& g) { return probe_objective(t, C_reg, th, &g); },
                              Eigen::VectorXd::Zero(C * d + C), {.max_iter = opt.max_iter, .gtol = opt.gtol});
    ProbeModel m;
    m.weight = Eigen::Map<const Mat<double>>(res.x.data(), C, d);
    m.bias = Eigen::Map<const RowVec<double>>(res.x.data() + C * d, C);
    m.C_reg = C_reg;
    m.iterations = res.iterations;
    m.converged = res.converged;
    m.objective = res.f;
    if (!all_finite(m.weight) || !m.bias.allFinite()) throw ContractError("probe: non-finite parameters after fitting");
    return m;
}

inline std::vector<int> probe_predict(const ProbeModel& m, const FeatureTable& t) {
    if (t.features.cols() != m.weight.cols() || t.num_classes != m.weight.rows())
        throw ContractError("probe: table " + shape_str(t.size(), t.features.cols()) + " with " + std::to_string(t.num_classes) +
                            " classes does not match the model " + shape_str(m.weight.rows(), m.weight.cols()));
    return argmax_rows(m.logits(t.features));
}

inline double evaluate_probe(const ProbeModel& m, const FeatureTable& t) { return top1(probe_predict(m, t), t.labels); }

// ---------------------------------------------------------------------------
// Regularization search

struct CSearchOptions {
    int grid_points = 10;
    double grid_min = 1e-4;
    double grid_max = 1e4;
    int refine_steps = 8;
};

struct CSearchResult {
    double best_C = 0;
    double best_score = 0;
    std::vector<std::pair<double, double>> trace;  // (C, score) in evaluation order
    int refine_steps = 0;

    nlohmann::json to_json() const {
        nlohmann::json t = nlohmann::json::array();
        for (auto [c, s] : trace) t.push_back({{"C", c}, {"score", s}});
        return {{"best_C", best_C}, {"best_score", best_score}, {"refine_steps", refine_steps}, {"trace", t}};
    }
};

/// Coarse log-spaced grid, then bisection in log space around the best grid point.
/// Each refinement step scores the midpoints towards both bracket ends and keeps the
/// best of the three; ties go to the smallest C.
inline CSearchResult search_C(const std::function<double(double)>& score, const CSearchOptions& opt = {}) {
    if (opt.grid_points < 2 || !(opt.grid_min > 0) || !(opt.grid_max > opt.grid_min) || opt.refine_steps < 0 || opt.refine_steps > 8)
        throw ConfigError("probe C search: need >= 2 grid points, 0 < min < max and 0..8 refinement steps");
    CSearchResult r;
    auto eval = [&](double logc) {
        const double c = std::pow(10.0, logc);
        const double s = score(c);
        r.trace.emplace_back(c, s);
        return s;
    };
    const double lo = std::log10(opt.grid_min), hi = std::log10(opt.grid_max), step = (hi - lo) / (opt.grid_points - 1);
    std::vector<double> grid(static_cast<std::size_t>(opt.grid_points)), scores(grid.size());
    std::size_t best = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        grid[i] = lo + step * static_cast<double>(i);
        scores[i] = eval(grid[i]);
        if (scores[i] > scores[best]) best = i;
    }
    double center = grid[best], center_score = scores[best];
    double left = best > 0 ? grid[best - 1] : center;
    double right = best + 1 < grid.size() ? grid[best + 1] : center;
    for (int k = 0; k < opt.refine_steps; ++k) {
        ++r.refine_steps;
        std::optional<double> ml, mr;
        double sl = 0, sr = 0;
        if (left < center) sl = eval(*(ml = 0.5 * (left + center)));
        if (right > center) sr = eval(*(mr = 0.5 * (center + right)));
        if (ml && sl >= center_score && (!mr || sl >= sr)) {
            right = center;
            center = *ml;
            center_score = sl;
        } else if (mr && sr > center_score) {
            left = center;
            center = *mr;
            center_score = sr;
        } else {
            if (ml) left = *ml;
            if (mr) right = *mr;
        }
    }
    r.best_C = std::pow(10.0, center);
    r.best_score = center_score;
    return r;
}

inline CSearchResult search_C(const FeatureTable& train, const FeatureTable& validation, const CSearchOptions& opt = {},
                              const ProbeOptions& popt = {}) {
    if (validation.size() == 0) throw ContractError("probe C search: empty validation table");
    return search_C([&](double c) { return evaluate_probe(fit_probe(train, c, popt), validation); }, opt);
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_probe(const ProbeModel& m, const std::filesystem::path& path, std::map<std::string, std::string> metadata = {}) {
    TensorArchive ar;
    ar.tensors["weight"] = RawTensor::from_matrix<double>(m.weight);
    ar.tensors["bias"] = RawTensor::from_matrix<double>(Mat<double>(m.bias));
    metadata["format"] = "rsprompt-probe/1";
    metadata["trace"] = m.trace().dump();
    ar.metadata = std::move(metadata);
    save_archive(ar, path);
}

inline ProbeModel load_probe(const std::filesystem::path& path) {
    auto ar = load_archive(path);
    if (!ar.metadata.count("format") || ar.metadata.at("format") != "rsprompt-probe/1") throw IoError(path.string() + " is not a probe archive");
    ProbeModel m;
    m.weight = ar.at("weight").to_matrix<double>();
    m.bias = ar.at("bias").to_matrix<double>();
    auto t = nlohmann::json::parse(ar.metadata.at("trace"));
    m.C_reg = t.at("C_reg");
    m.iterations = t.at("iterations");
    m.converged = t.at("converged");
    m.objective = t.at("objective");
    return m;
}

}  // namespace rsprompt
