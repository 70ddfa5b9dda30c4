#pragma once

#include "rsprompt/backbone/backbone.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace rsprompt {

template <class T>
struct ClassifierBank {
    std::vector<std::string> classes;
    Mat<T> embeddings;  // classes x d_joint, unit rows
    std::string provenance;

    Index size() const { return embeddings.rows(); }
};

/// Template list asset: one template per line with a `{}` placeholder; '#' lines and
/// blank lines are ignored. Returns at most `limit` templates.
inline std::vector<std::string> load_templates(const std::filesystem::path& path, int limit = -1) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read template list " + path.string());
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        split_template(line);
        out.push_back(line);
        if (limit > 0 && static_cast<int>(out.size()) == limit) break;
    }
    if (limit > 0 && static_cast<int>(out.size()) < limit)
        throw ConfigError("template list " + path.string() + " has " + std::to_string(out.size()) + " templates, " +
                          std::to_string(limit) + " requested");
    return out;
}

/// Frozen text feature of `template` filled with `class_name`.
template <class T>
RowVec<T> template_feature(const BackboneBundle<T>& bb, std::string_view tmpl, const std::string& class_name) {
    auto [pre, suf] = split_template(tmpl);
    return bb.encode_text(bb.embed_tokens(bb.tokenizer().tokenize_prompt(pre, class_name, suf))).vector;
}

template <class T>
ClassifierBank<T> build_zeroshot_classifier(const BackboneBundle<T>& bb, const std::vector<std::string>& classes,
                                            const std::string& tmpl, unsigned jobs = 1) {
    if (classes.empty()) throw ConfigError("zero-shot classifier: empty class vocabulary");
    split_template(tmpl);
    ClassifierBank<T> bank{classes, Mat<T>(static_cast<Index>(classes.size()), bb.embed_dim()), "zeroshot:" + tmpl};
    parallel_for(classes.size(), jobs, [&](std::size_t c) { bank.embeddings.row(static_cast<Index>(c)) = template_feature(bb, tmpl, classes[c]); });
    return bank;
}

/// Per class: mean of the frozen features over all templates, renormalized.
template <class T>
Mat<T> textual_diversity_targets(const BackboneBundle<T>& bb, const std::vector<std::string>& classes,
                                 const std::vector<std::string>& templates, unsigned jobs = 1) {
    if (templates.empty()) throw ConfigError("textual diversity: empty template list");
    if (classes.empty()) throw ConfigError("textual diversity: empty class vocabulary");
    Mat<T> out(static_cast<Index>(classes.size()), bb.embed_dim());
    parallel_for(classes.size(), jobs, [&](std::size_t c) {
        RowVec<T> acc = RowVec<T>::Zero(bb.embed_dim());
        for (const auto& t : templates) acc += template_feature(bb, t, classes[c]);
        acc /= static_cast<T>(templates.size());
        out.row(static_cast<Index>(c)) = acc / acc.norm();
    });
    return out;
}

/// logits = tau * images * bank^T
template <class T>
Mat<T> zeroshot_logits(const ClassifierBank<T>& bank, const Mat<T>& image_features, T tau) {
    return similarity_logits<T>(image_features, bank.embeddings, tau);
}

}  // namespace rsprompt
