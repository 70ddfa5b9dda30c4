#pragma once

// Forward and loss computations of the four prompt methods over a frozen backbone.
//
// Text prompts use the end-position layout [SOS][ctx x M][class tokens][EOS]. Deep
// text prompts replace rows 1..M at the input of blocks 1..J-1. Visual prompts are
// appended to the vision sequence (layer 0) and replaced at blocks 1..J-1.

#include "rsprompt/methods/prompt_state.hpp"
#include "rsprompt/methods/zeroshot.hpp"

#include <optional>
#include <span>

namespace rsprompt {

/// Images as the methods consume them: frozen joint features, plus the vision stem
/// (patch + position embedding) when the method prompts the vision encoder.
template <class T>
struct ImageBatch {
    Mat<T> frozen;               // B x d_joint, unit rows
    std::vector<Mat<T>> stems;   // empty unless needed

    Index size() const { return frozen.rows(); }

    ImageBatch select(const std::vector<std::size_t>& idx) const {
        ImageBatch b;
        b.frozen.resize(static_cast<Index>(idx.size()), frozen.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            b.frozen.row(static_cast<Index>(i)) = frozen.row(static_cast<Index>(idx[i]));
            if (!stems.empty()) b.stems.push_back(stems[idx[i]]);
        }
        return b;
    }
};

inline bool method_needs_stems(Method m) { return m == Method::maple || m == Method::promptsrc; }

template <class T>
ImageBatch<T> prepare_images(const BackboneBundle<T>& bb, const std::vector<PixelTensor>& pixels, bool with_stems,
                             unsigned jobs = 1) {
    ImageBatch<T> b;
    b.frozen.resize(static_cast<Index>(pixels.size()), bb.embed_dim());
    if (with_stems) b.stems.resize(pixels.size());
    parallel_for(pixels.size(), jobs, [&](std::size_t i) {
        Mat<T> stem = bb.vision_stem(pixels[i]);
        b.frozen.row(static_cast<Index>(i)) = bb.encode_image_stem(stem).value();
        if (with_stems) b.stems[i] = std::move(stem);
    });
    return b;
}

template <class T>
struct ForwardOutput {
    ad::Var<T> logits;                 // B x C
    ad::Var<T> image_features;         // B x d_joint (prompted; PromptSRC)
    ad::Var<T> text_features;          // C x d_joint (prompted; PromptSRC)
    Mat<T> frozen_image_features;      // B x d_joint
    Mat<T> frozen_text_targets;        // C x d_joint
    Mat<T> frozen_logits;              // B x C
};

template <class T>
struct LossBreakdown {
    ad::Var<T> total;
    double ce = 0;
    double l1_image = 0;
    double l1_text = 0;
    double kl = 0;
};

/// CE(prompted) + lambda1 * L1(image, frozen image) + lambda2 * L1(text, diversity
/// targets) + kl_weight * KL(frozen logits || prompted logits), each L1 a mean.
template <class T>
LossBreakdown<T> promptsrc_loss(const ad::Var<T>& logits, const ad::Var<T>& image_features, const ad::Var<T>& text_features,
                                const Mat<T>& frozen_image_features, const Mat<T>& frozen_text_targets,
                                const Mat<T>& frozen_logits, std::span<const int> labels, const MethodConfig& cfg) {
    LossBreakdown<T> out;
    auto ce = ad::cross_entropy(logits, labels);
    out.ce = static_cast<double>(ce.item());
    out.total = ce;
    if (cfg.lambda1 > 0) {
        auto l = ad::l1_mean(image_features, ad::constant<T>(frozen_image_features));
        out.l1_image = static_cast<double>(l.item());
        out.total = ad::add(out.total, ad::scale(l, static_cast<T>(cfg.lambda1)));
    }
    if (cfg.lambda2 > 0) {
        auto l = ad::l1_mean(text_features, ad::constant<T>(frozen_text_targets));
        out.l1_text = static_cast<double>(l.item());
        out.total = ad::add(out.total, ad::scale(l, static_cast<T>(cfg.lambda2)));
    }
    if (cfg.kl_weight > 0) {
        auto l = ad::kl_div_logits(logits, ad::constant<T>(frozen_logits));
        out.kl = static_cast<double>(l.item());
        out.total = ad::add(out.total, ad::scale(l, static_cast<T>(cfg.kl_weight)));
    }
    return out;
}

/// A method bound to a backbone and a class vocabulary.
template <class T>
class PromptModel {
public:
    PromptModel(const BackboneBundle<T>& bb, MethodConfig cfg, std::vector<std::string> classes,
                std::vector<std::string> diversity_templates = {}, unsigned jobs = 1)
        : bb_(&bb), cfg_(std::move(cfg)), classes_(std::move(classes)) {
        cfg_.validate();
        if (classes_.empty()) throw ConfigError("prompt model: empty class vocabulary");
        if (cfg_.method == Method::zeroshot) throw ConfigError("prompt model: zeroshot has no learnable prompts");
        const auto& tok = bb.tokenizer();
        const auto& emb = bb.weights().token_embedding;
        for (const auto& c : classes_) {
            auto seq = tok.tokenize_context_prompt(cfg_.n_ctx, c);
            ClassPrompt p;
            p.sos = emb.row(seq.ids[0]);
            const Index first = 1 + cfg_.n_ctx;
            p.suffix.resize(seq.eos_position + 1 - first, bb.text_width());
            for (Index r = first; r <= seq.eos_position; ++r) p.suffix.row(r - first) = emb.row(seq.ids[static_cast<std::size_t>(r)]);
            p.eos = seq.eos_position;
            prompts_.push_back(std::move(p));
        }
        if (cfg_.method == Method::promptsrc) {
            if (diversity_templates.empty())
                diversity_templates = load_templates(asset_path(cfg_.diversity_templates), cfg_.n_templates);
            targets_ = textual_diversity_targets(bb, classes_, diversity_templates, jobs);
        }
    }

    const MethodConfig& config() const { return cfg_; }
    const std::vector<std::string>& classes() const { return classes_; }
    const BackboneBundle<T>& backbone() const { return *bb_; }
    bool needs_stems() const { return method_needs_stems(cfg_.method); }
    const Mat<T>& diversity_targets() const { return targets_; }

    /// Text features (C x d_joint) for a state; `shift` (1 x d_text) is added to every
    /// context row (CoCoOp).
    ad::Var<T> text_features(const PromptState<T>& s, const ad::Var<T>* shift = nullptr) const {
        check_state(s);
        ad::Var<T> ctx = s.get("context");
        if (shift) ctx = ad::add_row(ctx, *shift);
        TextInjection<T> inj{1, s.series("deep_text")};
        std::vector<ad::Var<T>> rows;
        rows.reserve(prompts_.size());
        for (const auto& p : prompts_) {
            auto tokens = ad::concat_rows<T>({ad::constant<T>(p.sos), ctx, ad::constant<T>(p.suffix)});
            rows.push_back(bb_->encode_text(tokens, p.eos, inj));
        }
        return ad::concat_rows<T>(rows);
    }

    /// Per-layer visual prompts: coupled from the text prompts (MaPLe) or learned
    /// directly (PromptSRC).
    VisionInjection<T> vision_prompts(const PromptState<T>& s) const {
        VisionInjection<T> inj;
        if (cfg_.method == Method::maple) {
            std::vector<ad::Var<T>> text{s.get("context")};
            for (const auto& d : s.series("deep_text")) text.push_back(d);
            for (std::size_t k = 0; k < text.size(); ++k) {
                const std::string p = "coupling." + std::to_string(k);
                inj.layers.push_back(ad::linear(text[k], s.get(p + ".weight"), s.get(p + ".bias")));
            }
        } else if (cfg_.method == Method::promptsrc) {
            inj.layers = s.series("deep_vision");
        }
        return inj;
    }

    ad::Var<T> image_features(const ImageBatch<T>& batch, const PromptState<T>& s) const {
        if (!needs_stems()) return ad::constant<T>(batch.frozen);
        if (batch.stems.size() != static_cast<std::size_t>(batch.size()))
            throw ContractError("prompt model: " + to_string(cfg_.method) + " needs vision stems in the batch");
        auto inj = vision_prompts(s);
        std::vector<ad::Var<T>> rows;
        for (const auto& stem : batch.stems) rows.push_back(bb_->encode_image_stem(stem, inj));
        return ad::concat_rows<T>(rows);
    }

    ForwardOutput<T> forward(const ImageBatch<T>& batch, const PromptState<T>& s) const {
        check_state(s);
        if (batch.size() == 0) throw ContractError("prompt model: empty batch");
        const T tau = bb_->logit_scale();
        ForwardOutput<T> out;
        out.frozen_image_features = batch.frozen;
        if (cfg_.method == Method::cocoop) {
            auto h = ad::relu(ad::linear(ad::constant<T>(batch.frozen), s.get("meta.linear1.weight"), s.get("meta.linear1.bias")));
            auto shifts = ad::linear(h, s.get("meta.linear2.weight"), s.get("meta.linear2.bias"));
            std::vector<ad::Var<T>> rows;
            for (Index i = 0; i < batch.size(); ++i) {
                auto pi = ad::slice_rows(shifts, i, 1);
                auto txt = text_features(s, &pi);
                rows.push_back(ad::scale(ad::matmul_nt(ad::constant<T>(Mat<T>(batch.frozen.row(i))), txt), tau));
            }
            out.logits = ad::concat_rows<T>(rows);
            return out;
        }
        out.text_features = text_features(s);
        out.image_features = image_features(batch, s);
        out.logits = ad::scale(ad::matmul_nt(out.image_features, out.text_features), tau);
        if (cfg_.method == Method::promptsrc) {
            out.frozen_text_targets = targets_;
            out.frozen_logits = tau * row_dots(batch.frozen, targets_);
        }
        return out;
    }

    LossBreakdown<T> loss(const ForwardOutput<T>& out, std::span<const int> labels) const {
        if (cfg_.method == Method::promptsrc)
            return promptsrc_loss(out.logits, out.image_features, out.text_features, out.frozen_image_features,
                                  out.frozen_text_targets, out.frozen_logits, labels, cfg_);
        LossBreakdown<T> b;
        b.total = ad::cross_entropy(out.logits, labels);
        b.ce = static_cast<double>(b.total.item());
        return b;
    }

    /// Evaluation logits without recording a graph; processed in chunks.
    Mat<T> predict_logits(const ImageBatch<T>& batch, const PromptState<T>& s, unsigned jobs = 1) const {
        auto fs = s.frozen();
        const T tau = bb_->logit_scale();
        Mat<T> logits(batch.size(), static_cast<Index>(classes_.size()));
        if (cfg_.method == Method::cocoop) {
            parallel_for(static_cast<std::size_t>(batch.size()), jobs, [&](std::size_t i) {
                logits.row(static_cast<Index>(i)) = forward(batch.select({i}), fs).logits.value();
            });
            return logits;
        }
        Mat<T> txt = text_features(fs).value();
        if (!needs_stems()) return tau * row_dots(batch.frozen, txt);
        auto inj = vision_prompts(fs);
        parallel_for(static_cast<std::size_t>(batch.size()), jobs, [&](std::size_t i) {
            logits.row(static_cast<Index>(i)) = tau * row_dots(bb_->encode_image_stem(batch.stems[i], inj).value(), txt);
        });
        return logits;
    }

private:
    struct ClassPrompt {
        Mat<T> sos;     // 1 x d_text
        Mat<T> suffix;  // class tokens + EOS
        Index eos = 0;
    };

    void check_state(const PromptState<T>& s) const {
        if (s.method != cfg_.method)
            throw ConfigError("prompt state is for " + to_string(s.method) + ", model is " + to_string(cfg_.method));
        const auto& c = s.get("context");
        if (c.rows() != cfg_.n_ctx || c.cols() != bb_->text_width())
            throw ConfigError("prompt state context shape " + shape_str(c.rows(), c.cols()) + " does not match the model");
    }

    const BackboneBundle<T>* bb_;
    MethodConfig cfg_;
    std::vector<std::string> classes_;
    std::vector<ClassPrompt> prompts_;
    Mat<T> targets_;
};

}  // namespace rsprompt
