#pragma once

// Frozen dual encoder (CLIP geometry): a causal text transformer pooled at the EOS
// token and a ViT pooled at the class token, both projected into a joint space.
//
// Prompt injection hooks:
//  * text:   learned rows are composed into the token-embedding matrix by the caller;
//            TextInjection::deep[i] replaces rows [start, start + L) at the input of
//            block i + 1.
//  * vision: VisionInjection::layers[0] is appended after the positional embedding
//            (before ln_pre); layers[i > 0] replace those trailing rows at the input
//            of block i.

#include "rsprompt/backbone/preprocess.hpp"
#include "rsprompt/backbone/tokenizer.hpp"
#include "rsprompt/core/assets.hpp"
#include "rsprompt/core/autodiff.hpp"
#include "rsprompt/core/parallel.hpp"
#include "rsprompt/core/rng.hpp"
#include "rsprompt/core/safetensors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rsprompt {

enum class Activation { quick_gelu, gelu };

struct Geometry {
    std::string name = "ViT-B-16";
    int embed_dim = 512;
    int context_length = 77;
    int vocab_size = 49408;
    int text_layers = 12;
    int text_width = 512;
    int text_heads = 8;
    int vision_layers = 12;
    int vision_width = 768;
    int vision_heads = 12;
    int patch_size = 16;
    int image_size = 224;
    Activation activation = Activation::quick_gelu;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }

    static Geometry vit_b16() { return {}; }

    /// Desk-scale geometry with the same interface, for gradient and property tests.
    static Geometry micro() {
        Geometry g;
        g.name = "micro";
        g.embed_dim = 32;
        g.context_length = 77;
        g.vocab_size = 64;
        g.text_layers = 2;
        g.text_width = 32;
        g.text_heads = 4;
        g.vision_layers = 2;
        g.vision_width = 32;
        g.vision_heads = 4;
        g.patch_size = 8;
        g.image_size = 16;
        return g;
    }

    nlohmann::json to_json() const {
        return {{"name", name},
                {"embed_dim", embed_dim},
                {"context_length", context_length},
                {"vocab_size", vocab_size},
                {"text_layers", text_layers},
                {"text_width", text_width},
                {"text_heads", text_heads},
                {"vision_layers", vision_layers},
                {"vision_width", vision_width},
                {"vision_heads", vision_heads},
                {"patch_size", patch_size},
                {"image_size", image_size},
                {"activation", activation == Activation::quick_gelu ? "quick_gelu" : "gelu"}};
    }

    static Geometry from_json(const nlohmann::json& j) {
        Geometry g;
        g.name = j.value("name", std::string("custom"));
        g.embed_dim = j.at("embed_dim").get<int>();
        g.context_length = j.at("context_length").get<int>();
        g.vocab_size = j.at("vocab_size").get<int>();
        g.text_layers = j.at("text_layers").get<int>();
        g.text_width = j.at("text_width").get<int>();
        g.text_heads = j.at("text_heads").get<int>();
        g.vision_layers = j.at("vision_layers").get<int>();
        g.vision_width = j.at("vision_width").get<int>();
        g.vision_heads = j.at("vision_heads").get<int>();
        g.patch_size = j.at("patch_size").get<int>();
        g.image_size = j.at("image_size").get<int>();
        auto act = j.value("activation", std::string("quick_gelu"));
        if (act != "quick_gelu" && act != "gelu") throw ConfigError("geometry: unknown activation " + act);
        g.activation = act == "quick_gelu" ? Activation::quick_gelu : Activation::gelu;
        g.validate();
        return g;
    }

    void validate() const {
        auto pos = [](int v, const char* what) {
            if (v <= 0) throw ConfigError(std::string("geometry: ") + what + " must be positive");
        };
        pos(embed_dim, "embed_dim");
        pos(context_length, "context_length");
        pos(vocab_size, "vocab_size");
        pos(text_layers, "text_layers");
        pos(vision_layers, "vision_layers");
        pos(patch_size, "patch_size");
        if (text_width % text_heads != 0) throw ConfigError("geometry: text_width not divisible by text_heads");
        if (vision_width % vision_heads != 0) throw ConfigError("geometry: vision_width not divisible by vision_heads");
        if (image_size % patch_size != 0) throw ConfigError("geometry: image_size not divisible by patch_size");
    }
};

template <class T>
struct BlockWeights {
    RowVec<T> ln1_g, ln1_b;
    Mat<T> in_proj_w;
    RowVec<T> in_proj_b;
    Mat<T> out_w;
    RowVec<T> out_b;
    RowVec<T> ln2_g, ln2_b;
    Mat<T> fc_w;
    RowVec<T> fc_b;
    Mat<T> proj_w;
    RowVec<T> proj_b;
};

template <class T>
struct BackboneWeights {
    // text tower
    Mat<T> token_embedding;  // vocab x text_width
    Mat<T> text_positional;  // context x text_width
    std::vector<BlockWeights<T>> text_blocks;
    RowVec<T> ln_final_g, ln_final_b;
    Mat<T> text_projection;  // text_width x embed
    // vision tower
    Mat<T> conv;  // vision_width x (3 * patch * patch)
    RowVec<T> class_embedding;
    Mat<T> vision_positional;  // (1 + patches) x vision_width
    RowVec<T> ln_pre_g, ln_pre_b;
    std::vector<BlockWeights<T>> vision_blocks;
    RowVec<T> ln_post_g, ln_post_b;
    Mat<T> vision_projection;  // vision_width x embed
    T logit_scale_log = T(0);
};

template <class T>
struct TextInjection {
    Index start = 1;
    std::vector<ad::Var<T>> deep;
};

template <class T>
struct VisionInjection {
    std::vector<ad::Var<T>> layers;
};

/// Unit-norm (when `normalized`) vector in the joint space.
template <class T>
struct JointEmbedding {
    RowVec<T> vector;
    bool normalized = false;
};

template <class T>
struct EmbeddedPrompt {
    Mat<T> vectors;  // context_length x text_width
    Index eos_position = 0;
    std::vector<bool> learnable_mask;
};

namespace detail {

// Archive names follow the OpenCLIP state-dict layout.
template <class T>
void block_names(std::vector<std::pair<std::string, std::vector<std::int64_t>>>& out, const std::string& prefix, int width,
                 int layers) {
    const std::int64_t w = width;
    for (int l = 0; l < layers; ++l) {
        std::string p = prefix + "transformer.resblocks." + std::to_string(l) + ".";
        out.push_back({p + "ln_1.weight", {w}});
        out.push_back({p + "ln_1.bias", {w}});
        out.push_back({p + "attn.in_proj_weight", {3 * w, w}});
        out.push_back({p + "attn.in_proj_bias", {3 * w}});
        out.push_back({p + "attn.out_proj.weight", {w, w}});
        out.push_back({p + "attn.out_proj.bias", {w}});
        out.push_back({p + "ln_2.weight", {w}});
        out.push_back({p + "ln_2.bias", {w}});
        out.push_back({p + "mlp.c_fc.weight", {4 * w, w}});
        out.push_back({p + "mlp.c_fc.bias", {4 * w}});
        out.push_back({p + "mlp.c_proj.weight", {w, 4 * w}});
        out.push_back({p + "mlp.c_proj.bias", {w}});
    }
}

}  // namespace detail

/// Every tensor name and shape the archive must provide for a geometry.
inline std::vector<std::pair<std::string, std::vector<std::int64_t>>> expected_tensors(const Geometry& g) {
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
    const std::int64_t tw = g.text_width, vw = g.vision_width, e = g.embed_dim, p = g.patch_size;
    out.push_back({"token_embedding.weight", {g.vocab_size, tw}});
    out.push_back({"positional_embedding", {g.context_length, tw}});
    detail::block_names<float>(out, "", g.text_width, g.text_layers);
    out.push_back({"ln_final.weight", {tw}});
    out.push_back({"ln_final.bias", {tw}});
    out.push_back({"text_projection", {tw, e}});
    out.push_back({"logit_scale", {}});
    out.push_back({"visual.conv1.weight", {vw, 3, p, p}});
    out.push_back({"visual.class_embedding", {vw}});
    out.push_back({"visual.positional_embedding", {1 + g.num_patches(), vw}});
    out.push_back({"visual.ln_pre.weight", {vw}});
    out.push_back({"visual.ln_pre.bias", {vw}});
    detail::block_names<float>(out, "visual.", g.vision_width, g.vision_layers);
    out.push_back({"visual.ln_post.weight", {vw}});
    out.push_back({"visual.ln_post.bias", {vw}});
    out.push_back({"visual.proj", {vw, e}});
    return out;
}

template <class T>
class BackboneBundle {
public:
    BackboneBundle(Geometry geometry, std::shared_ptr<const BackboneWeights<T>> weights, PreprocessSpec preprocess,
                   Tokenizer tokenizer)
        : geometry_(std::move(geometry)), weights_(std::move(weights)), preprocess_(preprocess),
          tokenizer_(std::move(tokenizer)) {
        geometry_.validate();
        if (tokenizer_.layout().vocab_size != geometry_.vocab_size ||
            tokenizer_.layout().context_length != geometry_.context_length)
            throw ConfigError("backbone: tokenizer layout does not match geometry");
        digest_ = compute_digest();
    }

    const Geometry& geometry() const { return geometry_; }
    const BackboneWeights<T>& weights() const { return *weights_; }
    const PreprocessSpec& preprocess_spec() const { return preprocess_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    Index text_width() const { return geometry_.text_width; }
    Index vision_width() const { return geometry_.vision_width; }
    Index embed_dim() const { return geometry_.embed_dim; }
    /// tau = exp(stored log scale); frozen.
    T logit_scale() const { return std::exp(weights_->logit_scale_log); }
    /// Digest recorded at construction.
    const std::string& digest() const { return digest_; }

    /// Recomputes the digest from the live weight memory.
    std::string compute_digest() const { return to_archive().digest(); }

    // -----------------------------------------------------------------------
    // Text path

    TokenSequence tokenize(std::string_view text) const { return tokenizer_.tokenize(text); }

    EmbeddedPrompt<T> embed_tokens(const TokenSequence& seq) const {
        EmbeddedPrompt<T> e;
        e.vectors.resize(static_cast<Index>(seq.ids.size()), text_width());
        for (std::size_t i = 0; i < seq.ids.size(); ++i) {
            int id = seq.ids[i];
            if (id < 0 || id >= geometry_.vocab_size)
                throw ContractError("embed_tokens: invalid token id " + std::to_string(id) + " at position " + std::to_string(i));
            e.vectors.row(static_cast<Index>(i)) = weights_->token_embedding.row(id);
        }
        e.eos_position = seq.eos_position;
        e.learnable_mask.assign(seq.ids.size(), false);
        return e;
    }

    /// Encodes token vectors (any row count > eos) and returns the normalized
    /// projected EOS state (1 x embed). Rows after `eos` never influence the result
    /// under causal attention and are not computed.
    ad::Var<T> encode_text(const ad::Var<T>& token_vectors, Index eos, const TextInjection<T>& inj = {}) const {
        const auto& w = *weights_;
        if (token_vectors.cols() != text_width())
            throw ContractError("encode_text: token width " + std::to_string(token_vectors.cols()) + " != " +
                                std::to_string(text_width()));
        if (eos < 0 || eos >= token_vectors.rows() || eos >= geometry_.context_length)
            throw ContractError("encode_text: eos position out of range");
        check_text_injection(inj, eos);
        const Index n = eos + 1;
        ad::Var<T> x = token_vectors.rows() == n ? token_vectors : ad::slice_rows(token_vectors, 0, n);
        x = ad::add_const(x, Mat<T>(w.text_positional.topRows(n)));
        for (int l = 0; l < geometry_.text_layers; ++l) {
            if (l >= 1 && static_cast<std::size_t>(l - 1) < inj.deep.size() && inj.deep[l - 1].rows() > 0)
                x = ad::replace_rows(x, inj.start, inj.deep[l - 1]);
            x = block(x, w.text_blocks[static_cast<std::size_t>(l)], geometry_.text_heads, true);
        }
        ad::Var<T> pooled = ad::slice_rows(x, eos, 1);
        pooled = ad::layer_norm(pooled, w.ln_final_g, w.ln_final_b);
        pooled = ad::matmul_const(pooled, w.text_projection);
        return ad::l2_normalize_rows(pooled);
    }

    JointEmbedding<T> encode_text(const EmbeddedPrompt<T>& prompt, const TextInjection<T>& inj = {}) const {
        auto v = encode_text(ad::constant(Mat<T>(prompt.vectors.topRows(prompt.eos_position + 1))), prompt.eos_position, inj);
        return {v.value().row(0), true};
    }

    /// Frozen text feature of a plain string.
    RowVec<T> encode_text(std::string_view text) const { return encode_text(embed_tokens(tokenize(text))).vector; }

    // -----------------------------------------------------------------------
    // Vision path

    /// Patch embedding + class token + positional embedding; (1 + patches) x width.
    Mat<T> vision_stem(const PixelTensor& px) const {
        const auto& w = *weights_;
        const int s = geometry_.image_size, p = geometry_.patch_size, g = geometry_.grid();
        if (px.size != s || px.chw.size() != static_cast<std::size_t>(3) * s * s)
            throw ContractError("encode_image: expected 3 x " + std::to_string(s) + " x " + std::to_string(s) +
                                " pixels, got size " + std::to_string(px.size));
        Mat<T> patches(g * g, 3 * p * p);
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int c = 0; c < 3; ++c)
                    for (int ky = 0; ky < p; ++ky)
                        for (int kx = 0; kx < p; ++kx)
                            patches(gy * g + gx, (c * p + ky) * p + kx) = static_cast<T>(px.at(c, gy * p + ky, gx * p + kx));
        Mat<T> tokens(1 + g * g, vision_width());
        tokens.row(0) = w.class_embedding;
        tokens.bottomRows(g * g) = patches * w.conv.transpose();
        tokens += w.vision_positional;
        return tokens;
    }

    ad::Var<T> encode_image_stem(const Mat<T>& stem, const VisionInjection<T>& inj = {}) const {
        const auto& w = *weights_;
        check_vision_injection(inj);
        ad::Var<T> x = ad::constant(stem);
        const Index n_prompt = inj.layers.empty() ? 0 : inj.layers[0].rows();
        if (n_prompt > 0) x = ad::concat_rows<T>({x, inj.layers[0]});
        x = ad::layer_norm(x, w.ln_pre_g, w.ln_pre_b);
        for (int l = 0; l < geometry_.vision_layers; ++l) {
            if (l >= 1 && static_cast<std::size_t>(l) < inj.layers.size() && n_prompt > 0)
                x = ad::replace_rows(x, x.rows() - n_prompt, inj.layers[static_cast<std::size_t>(l)]);
            x = block(x, w.vision_blocks[static_cast<std::size_t>(l)], geometry_.vision_heads, false);
        }
        ad::Var<T> cls = ad::slice_rows(x, 0, 1);
        cls = ad::layer_norm(cls, w.ln_post_g, w.ln_post_b);
        cls = ad::matmul_const(cls, w.vision_projection);
        return ad::l2_normalize_rows(cls);
    }

    ad::Var<T> encode_image(const PixelTensor& px, const VisionInjection<T>& inj = {}) const {
        return encode_image_stem(vision_stem(px), inj);
    }

    JointEmbedding<T> encode_image_embedding(const PixelTensor& px) const {
        return {encode_image(px).value().row(0), true};
    }

    /// Frozen image features, one row per image, in input order.
    Mat<T> encode_images(const std::vector<PixelTensor>& images, unsigned jobs = 1) const {
        Mat<T> out(static_cast<Index>(images.size()), embed_dim());
        parallel_for(images.size(), jobs, [&](std::size_t i) { out.row(static_cast<Index>(i)) = encode_image(images[i]).value(); });
        return out;
    }

    // -----------------------------------------------------------------------
    // Serialization

    /// Weights as stored on disk (fp32, OpenCLIP names).
    TensorArchive to_archive() const {
        const auto& w = *weights_;
        const auto& g = geometry_;
        TensorArchive ar;
        auto put = [&](const std::string& name, const auto& m, std::vector<std::int64_t> shape) {
            ar.tensors[name] = RawTensor::from_matrix<float>(Mat<T>(m).template cast<float>(), std::move(shape));
        };
        const std::int64_t tw = g.text_width, vw = g.vision_width, e = g.embed_dim, p = g.patch_size;
        put("token_embedding.weight", w.token_embedding, {g.vocab_size, tw});
        put("positional_embedding", w.text_positional, {g.context_length, tw});
        put_blocks(ar, "", w.text_blocks, tw);
        put("ln_final.weight", w.ln_final_g, {tw});
        put("ln_final.bias", w.ln_final_b, {tw});
        put("text_projection", w.text_projection, {tw, e});
        Mat<T> ls(1, 1);
        ls(0, 0) = w.logit_scale_log;
        put("logit_scale", ls, {});
        put("visual.conv1.weight", w.conv, {vw, 3, p, p});
        put("visual.class_embedding", w.class_embedding, {vw});
        put("visual.positional_embedding", w.vision_positional, {1 + g.num_patches(), vw});
        put("visual.ln_pre.weight", w.ln_pre_g, {vw});
        put("visual.ln_pre.bias", w.ln_pre_b, {vw});
        put_blocks(ar, "visual.", w.vision_blocks, vw);
        put("visual.ln_post.weight", w.ln_post_g, {vw});
        put("visual.ln_post.bias", w.ln_post_b, {vw});
        put("visual.proj", w.vision_projection, {vw, e});
        return ar;
    }

    nlohmann::json metadata() const {
        const auto& L = tokenizer_.layout();
        return {{"format", "rsprompt-backbone/1"},
                {"geometry", geometry_.to_json()},
                {"preprocess", preprocess_.to_json()},
                {"tokens", {{"sos_id", L.sos_id}, {"eos_id", L.eos_id}, {"pad_id", L.pad_id}, {"fold", L.fold}}}};
    }

    /// Writes `<stem>.safetensors` and the metadata document `<stem>.json`.
    void save(const std::filesystem::path& archive_path) const {
        save_archive(to_archive(), archive_path);
        std::ofstream meta(metadata_path(archive_path));
        meta << metadata().dump(2) << "\n";
        if (!meta) throw IoError("cannot write backbone metadata next to " + archive_path.string());
    }

    static std::filesystem::path metadata_path(const std::filesystem::path& archive_path) {
        auto p = archive_path;
        return p.replace_extension(".json");
    }

    template <class U>
    BackboneBundle<U> cast() const {
        auto w = std::make_shared<BackboneWeights<U>>();
        const auto& s = *weights_;
        w->token_embedding = s.token_embedding.template cast<U>();
        w->text_positional = s.text_positional.template cast<U>();
        w->text_blocks = cast_blocks<U>(s.text_blocks);
        w->ln_final_g = s.ln_final_g.template cast<U>();
        w->ln_final_b = s.ln_final_b.template cast<U>();
        w->text_projection = s.text_projection.template cast<U>();
        w->conv = s.conv.template cast<U>();
        w->class_embedding = s.class_embedding.template cast<U>();
        w->vision_positional = s.vision_positional.template cast<U>();
        w->ln_pre_g = s.ln_pre_g.template cast<U>();
        w->ln_pre_b = s.ln_pre_b.template cast<U>();
        w->vision_blocks = cast_blocks<U>(s.vision_blocks);
        w->ln_post_g = s.ln_post_g.template cast<U>();
        w->ln_post_b = s.ln_post_b.template cast<U>();
        w->vision_projection = s.vision_projection.template cast<U>();
        w->logit_scale_log = static_cast<U>(s.logit_scale_log);
        return BackboneBundle<U>(geometry_, std::move(w), preprocess_, tokenizer_);
    }

private:
    ad::Var<T> block(ad::Var<T> x, const BlockWeights<T>& b, int heads, bool causal) const {
        ad::Var<T> h = ad::layer_norm(x, b.ln1_g, b.ln1_b);
        h = ad::linear(h, b.in_proj_w, &b.in_proj_b);
        h = ad::attention(h, heads, causal);
        h = ad::linear(h, b.out_w, &b.out_b);
        x = ad::add(x, h);
        h = ad::layer_norm(x, b.ln2_g, b.ln2_b);
        h = ad::linear(h, b.fc_w, &b.fc_b);
        h = geometry_.activation == Activation::quick_gelu ? ad::quick_gelu(h) : ad::gelu(h);
        h = ad::linear(h, b.proj_w, &b.proj_b);
        return ad::add(x, h);
    }

    void check_text_injection(const TextInjection<T>& inj, Index eos) const {
        if (inj.deep.empty()) return;
        if (static_cast<int>(inj.deep.size()) >= geometry_.text_layers)
            throw ConfigError("text injection depth " + std::to_string(inj.deep.size() + 1) + " exceeds " +
                              std::to_string(geometry_.text_layers) + " encoder layers");
        const Index n = inj.deep.front().rows();
        for (const auto& d : inj.deep) {
            if (d.rows() != n || d.cols() != text_width())
                throw ConfigError("text injection: per-layer prompt shape must be constant " + shape_str(n, text_width()));
        }
        if (inj.start < 1 || inj.start + n > eos)
            throw ConfigError("text injection: prompt rows must lie strictly between SOS and EOS");
    }

    void check_vision_injection(const VisionInjection<T>& inj) const {
        if (inj.layers.empty()) return;
        if (static_cast<int>(inj.layers.size()) > geometry_.vision_layers)
            throw ConfigError("vision injection depth " + std::to_string(inj.layers.size()) + " exceeds " +
                              std::to_string(geometry_.vision_layers) + " encoder layers");
        const Index n = inj.layers.front().rows();
        for (const auto& l : inj.layers)
            if (l.rows() != n || (n > 0 && l.cols() != vision_width()))
                throw ConfigError("vision injection: per-layer prompt shape must be constant " + shape_str(n, vision_width()));
    }

    void put_blocks(TensorArchive& ar, const std::string& prefix, const std::vector<BlockWeights<T>>& blocks, std::int64_t w) const {
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const auto& b = blocks[l];
            std::string p = prefix + "transformer.resblocks." + std::to_string(l) + ".";
            auto put = [&](const std::string& name, const auto& m, std::vector<std::int64_t> shape) {
                ar.tensors[p + name] = RawTensor::from_matrix<float>(Mat<T>(m).template cast<float>(), std::move(shape));
            };
            put("ln_1.weight", b.ln1_g, {w});
            put("ln_1.bias", b.ln1_b, {w});
            put("attn.in_proj_weight", b.in_proj_w, {3 * w, w});
            put("attn.in_proj_bias", b.in_proj_b, {3 * w});
            put("attn.out_proj.weight", b.out_w, {w, w});
            put("attn.out_proj.bias", b.out_b, {w});
            put("ln_2.weight", b.ln2_g, {w});
            put("ln_2.bias", b.ln2_b, {w});
            put("mlp.c_fc.weight", b.fc_w, {4 * w, w});
            put("mlp.c_fc.bias", b.fc_b, {4 * w});
            put("mlp.c_proj.weight", b.proj_w, {w, 4 * w});
            put("mlp.c_proj.bias", b.proj_b, {w});
        }
    }

    template <class U>
    static std::vector<BlockWeights<U>> cast_blocks(const std::vector<BlockWeights<T>>& in) {
        std::vector<BlockWeights<U>> out(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
            const auto& a = in[i];
            auto& b = out[i];
            b.ln1_g = a.ln1_g.template cast<U>();
            b.ln1_b = a.ln1_b.template cast<U>();
            b.in_proj_w = a.in_proj_w.template cast<U>();
            b.in_proj_b = a.in_proj_b.template cast<U>();
            b.out_w = a.out_w.template cast<U>();
            b.out_b = a.out_b.template cast<U>();
            b.ln2_g = a.ln2_g.template cast<U>();
            b.ln2_b = a.ln2_b.template cast<U>();
            b.fc_w = a.fc_w.template cast<U>();
            b.fc_b = a.fc_b.template cast<U>();
            b.proj_w = a.proj_w.template cast<U>();
            b.proj_b = a.proj_b.template cast<U>();
        }
        return out;
    }

    Geometry geometry_;
    std::shared_ptr<const BackboneWeights<T>> weights_;
    PreprocessSpec preprocess_;
    Tokenizer tokenizer_;
    std::string digest_;
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <class T>
RowVec<T> row_of(const RawTensor& t) {
    Mat<T> m = t.to_matrix<T>();
    return Eigen::Map<RowVec<T>>(m.data(), m.size());
}

template <class T>
std::vector<BlockWeights<T>> read_blocks(const TensorArchive& ar, const std::string& prefix, int layers) {
    std::vector<BlockWeights<T>> out(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        auto& b = out[static_cast<std::size_t>(l)];
        std::string p = prefix + "transformer.resblocks." + std::to_string(l) + ".";
        b.ln1_g = row_of<T>(ar.at(p + "ln_1.weight"));
        b.ln1_b = row_of<T>(ar.at(p + "ln_1.bias"));
        b.in_proj_w = ar.at(p + "attn.in_proj_weight").to_matrix<T>();
        b.in_proj_b = row_of<T>(ar.at(p + "attn.in_proj_bias"));
        b.out_w = ar.at(p + "attn.out_proj.weight").to_matrix<T>();
        b.out_b = row_of<T>(ar.at(p + "attn.out_proj.bias"));
        b.ln2_g = row_of<T>(ar.at(p + "ln_2.weight"));
        b.ln2_b = row_of<T>(ar.at(p + "ln_2.bias"));
        b.fc_w = ar.at(p + "mlp.c_fc.weight").to_matrix<T>();
        b.fc_b = row_of<T>(ar.at(p + "mlp.c_fc.bias"));
        b.proj_w = ar.at(p + "mlp.c_proj.weight").to_matrix<T>();
        b.proj_b = row_of<T>(ar.at(p + "mlp.c_proj.bias"));
    }
    return out;
}

}  // namespace detail

/// Checks that the archive holds exactly the tensors the geometry requires.
inline void validate_archive(const TensorArchive& ar, const Geometry& g) {
    auto expected = expected_tensors(g);
    for (const auto& [name, shape] : expected) {
        const auto& t = ar.at(name);
        std::vector<std::int64_t> want = shape;
        if (!(t.shape == want || (want.empty() && t.numel() == 1)))
            throw IoError("archive tensor '" + name + "' has unexpected shape for geometry " + g.name);
    }
    if (ar.tensors.size() != expected.size()) {
        for (const auto& [name, t] : ar.tensors) {
            bool known = false;
            for (const auto& e : expected) known = known || e.first == name;
            if (!known) throw IoError("archive has unexpected tensor '" + name + "'");
        }
    }
}

template <class T>
std::shared_ptr<BackboneWeights<T>> weights_from_archive(const TensorArchive& ar, const Geometry& g) {
    validate_archive(ar, g);
    auto w = std::make_shared<BackboneWeights<T>>();
    w->token_embedding = ar.at("token_embedding.weight").to_matrix<T>();
    w->text_positional = ar.at("positional_embedding").to_matrix<T>();
    w->text_blocks = detail::read_blocks<T>(ar, "", g.text_layers);
    w->ln_final_g = detail::row_of<T>(ar.at("ln_final.weight"));
    w->ln_final_b = detail::row_of<T>(ar.at("ln_final.bias"));
    w->text_projection = ar.at("text_projection").to_matrix<T>();
    w->logit_scale_log = ar.at("logit_scale").to_matrix<T>()(0, 0);
    w->conv = ar.at("visual.conv1.weight").to_matrix<T>();
    w->class_embedding = detail::row_of<T>(ar.at("visual.class_embedding"));
    w->vision_positional = ar.at("visual.positional_embedding").to_matrix<T>();
    w->ln_pre_g = detail::row_of<T>(ar.at("visual.ln_pre.weight"));
    w->ln_pre_b = detail::row_of<T>(ar.at("visual.ln_pre.bias"));
    w->vision_blocks = detail::read_blocks<T>(ar, "visual.", g.vision_layers);
    w->ln_post_g = detail::row_of<T>(ar.at("visual.ln_post.weight"));
    w->ln_post_b = detail::row_of<T>(ar.at("visual.ln_post.bias"));
    w->vision_projection = ar.at("visual.proj").to_matrix<T>();
    return w;
}

inline std::shared_ptr<const BpeTokenizer> shared_bpe(const std::filesystem::path& vocab = default_bpe_vocab()) {
    static std::mutex mu;
    static std::map<std::string, std::shared_ptr<const BpeTokenizer>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[vocab.string()];
    if (!slot) slot = std::make_shared<const BpeTokenizer>(vocab);
    return slot;
}

inline TokenLayout layout_from_metadata(const nlohmann::json& meta, const Geometry& g) {
    TokenLayout L;
    L.context_length = g.context_length;
    L.vocab_size = g.vocab_size;
    const auto& t = meta.at("tokens");
    L.sos_id = t.at("sos_id").get<int>();
    L.eos_id = t.at("eos_id").get<int>();
    L.pad_id = t.value("pad_id", 0);
    L.fold = t.value("fold", false);
    for (int id : {L.sos_id, L.eos_id, L.pad_id})
        if (id < 0 || id >= g.vocab_size) throw ConfigError("token layout: special id out of vocabulary range");
    return L;
}

/// Loads `<path>` (.safetensors) with its metadata document `<path-stem>.json`.
template <class T>
BackboneBundle<T> load_backbone(const std::filesystem::path& archive_path, const std::filesystem::path& bpe_vocab = default_bpe_vocab()) {
    auto meta_path = BackboneBundle<T>::metadata_path(archive_path);
    std::ifstream in(meta_path);
    if (!in) throw IoError("missing backbone metadata document " + meta_path.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw IoError("corrupt backbone metadata " + meta_path.string() + ": " + e.what());
    }
    Geometry g = Geometry::from_json(meta.at("geometry"));
    auto pre = PreprocessSpec::from_json(meta.at("preprocess"));
    if (pre.target_size != g.image_size) throw ConfigError("preprocess target size differs from encoder image size");
    auto ar = load_archive(archive_path);
    auto w = weights_from_archive<T>(ar, g);
    return BackboneBundle<T>(g, std::move(w), pre, Tokenizer(shared_bpe(bpe_vocab), layout_from_metadata(meta, g)));
}

/// Randomly initialised backbone in the micro geometry (or any small geometry).
template <class T>
BackboneBundle<T> make_micro_backbone(std::uint64_t seed, Geometry g = Geometry::micro(),
                                      const std::filesystem::path& bpe_vocab = default_bpe_vocab()) {
    g.validate();
    Rng rng(seed);
    auto w = std::make_shared<BackboneWeights<T>>();
    // values are rounded through fp32 so the archive round-trips exactly
    auto normal = [&](Index r, Index c, double sd) {
        return Mat<T>(rng.normal_matrix<float>(r, c, sd).template cast<T>());
    };
    auto row = [&](Index n, double base, double sd) {
        RowVec<T> v(n);
        for (Index i = 0; i < n; ++i) v(i) = static_cast<T>(static_cast<float>(base + rng.normal() * sd));
        return v;
    };
    auto blocks = [&](int width, int layers) {
        std::vector<BlockWeights<T>> out(static_cast<std::size_t>(layers));
        const double s = 1.0 / std::sqrt(static_cast<double>(width));
        for (auto& b : out) {
            b.ln1_g = row(width, 1.0, 0.1);
            b.ln1_b = row(width, 0.0, 0.1);
            b.in_proj_w = normal(3 * width, width, s);
            b.in_proj_b = row(3 * width, 0.0, 0.05);
            b.out_w = normal(width, width, s);
            b.out_b = row(width, 0.0, 0.05);
            b.ln2_g = row(width, 1.0, 0.1);
            b.ln2_b = row(width, 0.0, 0.1);
            b.fc_w = normal(4 * width, width, s);
            b.fc_b = row(4 * width, 0.0, 0.05);
            b.proj_w = normal(width, 4 * width, 0.5 * s);
            b.proj_b = row(width, 0.0, 0.05);
        }
        return out;
    };
    const int tw = g.text_width, vw = g.vision_width;
    w->token_embedding = normal(g.vocab_size, tw, 0.5);
    w->text_positional = normal(g.context_length, tw, 0.2);
    w->text_blocks = blocks(tw, g.text_layers);
    w->ln_final_g = row(tw, 1.0, 0.1);
    w->ln_final_b = row(tw, 0.0, 0.1);
    w->text_projection = normal(tw, g.embed_dim, 1.0 / std::sqrt(tw));
    w->conv = normal(vw, 3 * g.patch_size * g.patch_size, 1.0 / std::sqrt(3.0 * g.patch_size * g.patch_size));
    w->class_embedding = row(vw, 0.0, 0.5);
    w->vision_positional = normal(1 + g.num_patches(), vw, 0.2);
    w->ln_pre_g = row(vw, 1.0, 0.1);
    w->ln_pre_b = row(vw, 0.0, 0.1);
    w->vision_blocks = blocks(vw, g.vision_layers);
    w->ln_post_g = row(vw, 1.0, 0.1);
    w->ln_post_b = row(vw, 0.0, 0.1);
    w->vision_projection = normal(vw, g.embed_dim, 1.0 / std::sqrt(vw));
    w->logit_scale_log = static_cast<T>(static_cast<float>(std::log(100.0)));
    PreprocessSpec pre;
    pre.target_size = g.image_size;
    return BackboneBundle<T>(g, std::move(w), pre, Tokenizer(shared_bpe(bpe_vocab), TokenLayout::micro(g.vocab_size)));
}

// ---------------------------------------------------------------------------
// Similarity

/// logits[i][c] = tau * <image_i, class_c>; rows of both inputs must be unit norm.
template <class T>
Mat<T> similarity_logits(const Mat<T>& images, const Mat<T>& classes, T tau, T tol = T(1e-4)) {
    if (images.cols() != classes.cols()) throw ContractError("similarity_logits: embedding width mismatch");
    auto check = [tol](const Mat<T>& m, const char* what) {
        for (Index r = 0; r < m.rows(); ++r)
            if (std::abs(m.row(r).norm() - T(1)) > tol)
                throw ContractError(std::string("similarity_logits: ") + what + " row " + std::to_string(r) + " is not normalized");
    };
    check(images, "image");
    check(classes, "class");
    return tau * row_dots(images, classes);
}

}  // namespace rsprompt
