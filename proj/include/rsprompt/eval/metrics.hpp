#pragma once

#include "rsprompt/core/tensor.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rsprompt {

/// Row-wise argmax; ties go to the lowest class index.
template <class T>
std::vector<int> argmax_rows(const Mat<T>& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Index i = 0; i < logits.rows(); ++i) {
        Index best = 0;
        for (Index j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

/// Number of rows whose maximum is shared by more than one class.
template <class T>
std::size_t count_argmax_ties(const Mat<T>& logits) {
    std::size_t n = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        const T m = logits.row(i).maxCoeff();
        if ((logits.row(i).array() == m).count() > 1) ++n;
    }
    return n;
}

inline double top1(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size())
        throw ContractError("top1: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(labels.size()) + " labels");
    if (labels.empty()) throw ContractError("top1: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<long>> counts;  // [true][predicted]

    int size() const { return static_cast<int>(counts.size()); }

    long row_total(int t) const { return std::accumulate(counts[static_cast<std::size_t>(t)].begin(), counts[static_cast<std::size_t>(t)].end(), 0L); }

    long total() const {
        long n = 0;
        for (int t = 0; t < size(); ++t) n += row_total(t);
        return n;
    }

    /// Rows divided by the true-class totals; rows without samples stay zero.
    Mat<double> normalized() const {
        Mat<double> m = Mat<double>::Zero(size(), size());
        for (int t = 0; t < size(); ++t) {
            const long n = row_total(t);
            if (n == 0) continue;
            for (int p = 0; p < size(); ++p) m(t, p) = static_cast<double>(counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]) / static_cast<double>(n);
        }
        return m;
    }

    /// Per-class recall (the normalized diagonal); nullopt for classes with no samples.
    std::vector<std::optional<double>> per_class_accuracy() const {
        std::vector<std::optional<double>> out(static_cast<std::size_t>(size()));
        auto n = normalized();
        for (int t = 0; t < size(); ++t)
            if (row_total(t) > 0) out[static_cast<std::size_t>(t)] = n(t, t);
        return out;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.size() != size() || o.classes != classes) throw ContractError("confusion: pooling matrices over different classes");
        for (int t = 0; t < size(); ++t)
            for (int p = 0; p < size(); ++p) counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] += o.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
        return *this;
    }

    nlohmann::json to_json() const { return {{"classes", classes}, {"counts", counts}}; }

    static ConfusionMatrix from_json(const nlohmann::json& j) {
        ConfusionMatrix c{j.at("classes").get<std::vector<std::string>>(), j.at("counts").get<std::vector<std::vector<long>>>()};
        for (const auto& r : c.counts)
            if (r.size() != c.counts.size()) throw ContractError("confusion: counts are not square");
        return c;
    }
};

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, int num_classes,
                                 std::vector<std::string> classes = {}) {
    if (predictions.size() != labels.size()) throw ContractError("confusion: predictions and labels differ in length");
    if (classes.empty())
        for (int c = 0; c < num_classes; ++c) classes.push_back(std::to_string(c));
    if (static_cast<int>(classes.size()) != num_classes) throw ContractError("confusion: class names do not match the class count");
    ConfusionMatrix m{std::move(classes), std::vector<std::vector<long>>(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes), 0))};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes)
            throw ContractError("confusion: class index out of range at sample " + std::to_string(i));
        ++m.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
    }
    return m;
}

/// Accuracy of one (dataset, method, shots) cell over one or more seeds.
struct EvalReport {
    std::string dataset;
    std::string method;
    int shots = 0;
    std::vector<int> seeds;
    std::vector<double> per_seed_accuracy;
    double mean_accuracy = 0;
    std::vector<std::optional<double>> per_class_accuracy;
    ConfusionMatrix confusion;
    std::map<std::string, std::string> provenance;

    std::string key() const { return dataset + "/" + method + "/" + std::to_string(shots); }

    nlohmann::json to_json() const {
        nlohmann::json pc = nlohmann::json::array();
        for (const auto& a : per_class_accuracy) pc.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
        return {{"dataset", dataset},
                {"method", method},
                {"shots", shots},
                {"seeds", seeds},
                {"per_seed_accuracy", per_seed_accuracy},
                {"mean_accuracy", mean_accuracy},
                {"per_class_accuracy", pc},
                {"confusion", confusion.to_json()},
                {"provenance", provenance}};
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.dataset = j.at("dataset");
        r.method = j.at("method");
        r.shots = j.at("shots");
        r.seeds = j.at("seeds").get<std::vector<int>>();
        r.per_seed_accuracy = j.at("per_seed_accuracy").get<std::vector<double>>();
        r.mean_accuracy = j.at("mean_accuracy");
        for (const auto& a : j.at("per_class_accuracy")) r.per_class_accuracy.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
        r.confusion = ConfusionMatrix::from_json(j.at("confusion"));
        r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
        return r;
    }
};

inline EvalReport make_report(std::string dataset, std::string method, int shots, int seed, std::span<const int> predictions,
                              std::span<const int> labels, const std::vector<std::string>& classes,
                              std::map<std::string, std::string> provenance = {}) {
    EvalReport r;
    r.dataset = std::move(dataset);
    r.method = std::move(method);
    r.shots = shots;
    r.seeds = {seed};
    r.confusion = confusion(predictions, labels, static_cast<int>(classes.size()), classes);
    r.per_seed_accuracy = {top1(predictions, labels)};
    r.mean_accuracy = r.per_seed_accuracy[0];
    r.per_class_accuracy = r.confusion.per_class_accuracy();
    r.provenance = std::move(provenance);
    return r;
}

/// Mean over seeds; confusion counts are pooled and renormalized. Provenance entries
/// that differ between runs are kept per seed (`key@seed`).
inline EvalReport aggregate_runs(const std::vector<EvalReport>& runs) {
    if (runs.empty()) throw ContractError("aggregate_runs: no reports");
    EvalReport out = runs.front();
    out.seeds.clear();
    out.per_seed_accuracy.clear();
    out.provenance.clear();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& r = runs[i];
        if (r.key() != out.key()) throw ContractError("aggregate_runs: mismatched keys " + r.key() + " vs " + out.key());
        if (r.seeds.size() != r.per_seed_accuracy.size()) throw ContractError("aggregate_runs: malformed report " + r.key());
        if (i > 0) out.confusion += r.confusion;
        for (std::size_t s = 0; s < r.seeds.size(); ++s) {
            if (std::find(out.seeds.begin(), out.seeds.end(), r.seeds[s]) != out.seeds.end())
                throw ContractError("aggregate_runs: seed " + std::to_string(r.seeds[s]) + " appears twice");
            out.seeds.push_back(r.seeds[s]);
            out.per_seed_accuracy.push_back(r.per_seed_accuracy[s]);
        }
    }
    for (const auto& r : runs)
        for (const auto& [k, v] : r.provenance) {
            bool same = true;
            for (const auto& o : runs) same = same && o.provenance.count(k) && o.provenance.at(k) == v;
            if (same)
                out.provenance[k] = v;
            else
                for (int s : r.seeds) out.provenance[k + "@seed" + std::to_string(s)] = v;
        }
    out.mean_accuracy = std::accumulate(out.per_seed_accuracy.begin(), out.per_seed_accuracy.end(), 0.0) /
                        static_cast<double>(out.per_seed_accuracy.size());
    out.per_class_accuracy = out.confusion.per_class_accuracy();
    return out;
}

}  // namespace rsprompt
