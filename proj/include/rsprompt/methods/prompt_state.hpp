#pragma once

#include "rsprompt/backbone/backbone.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace rsprompt {

enum class Method { zeroshot, coop, cocoop, maple, promptsrc };

inline const std::vector<Method>& prompt_methods() {
    static const std::vector<Method> m{Method::coop, Method::cocoop, Method::maple, Method::promptsrc};
    return m;
}

inline std::string to_string(Method m) {
    switch (m) {
        case Method::zeroshot: return "zeroshot";
        case Method::coop: return "coop";
        case Method::cocoop: return "cocoop";
        case Method::maple: return "maple";
        case Method::promptsrc: return "promptsrc";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::zeroshot, Method::coop, Method::cocoop, Method::maple, Method::promptsrc})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown method '" + s + "' (expected zeroshot, coop, cocoop, maple or promptsrc)");
}

/// Structural and loss hyper-parameters of a prompt method.
struct MethodConfig {
    Method method = Method::coop;
    int n_ctx = 4;                 // learnable text tokens per layer (M, or L for MaPLe)
    int depth = 1;                 // prompted layers J (1 = input layer only)
    int vision_prompt_len = 0;     // PromptSRC visual tokens per layer
    std::string init_template = "a photo of a";
    std::string maple_init_tokens = "last";  // which template tokens seed a shorter prompt
    double init_std = 0.02;
    int meta_bottleneck = 16;      // CoCoOp hidden width = d_joint / meta_bottleneck
    double lambda1 = 10.0;
    double lambda2 = 25.0;
    double kl_weight = 1.0;
    std::string diversity_templates = "templates/diversity_v1.txt";
    int n_templates = 60;
    std::string class_token_position = "end";
    bool ensemble = false;
    double ensemble_mean = -1;     // < 0: epochs / 2
    double ensemble_sigma = -1;    // < 0: epochs / 3.3

    static MethodConfig defaults(Method m) {
        MethodConfig c;
        c.method = m;
        switch (m) {
            case Method::zeroshot:
            case Method::coop:
            case Method::cocoop: break;
            case Method::maple:
                c.n_ctx = 2;
                c.depth = 9;
                break;
            case Method::promptsrc:
                c.depth = 9;
                c.vision_prompt_len = 4;
                c.ensemble = true;
                break;
        }
        return c;
    }

    void validate() const {
        if (n_ctx < 1) throw ConfigError("method.n_ctx must be >= 1");
        if (depth < 1) throw ConfigError("method.depth must be >= 1");
        if ((method == Method::coop || method == Method::cocoop) && depth != 1)
            throw ConfigError("method.depth must be 1 for " + to_string(method));
        if (method == Method::promptsrc && vision_prompt_len < 1) throw ConfigError("method.vision_prompt_len must be >= 1");
        if (lambda1 < 0 || lambda2 < 0 || kl_weight < 0) throw ConfigError("method.lambda1/lambda2/kl_weight must be >= 0");
        if (n_templates < 1) throw ConfigError("method.n_templates must be >= 1");
        if (class_token_position != "end") throw ConfigError("method.class_token_position: only 'end' is supported");
        if (maple_init_tokens != "first" && maple_init_tokens != "last")
            throw ConfigError("method.maple_init_tokens must be 'first' or 'last'");
        if (!(init_std > 0)) throw ConfigError("method.init_std must be > 0");
        if (meta_bottleneck < 1) throw ConfigError("method.meta_bottleneck must be >= 1");
        if (ensemble_sigma == 0) throw ConfigError("method.ensemble_sigma must be non-zero");
    }

    nlohmann::json to_json() const {
        return {{"method", to_string(method)},
                {"n_ctx", n_ctx},
                {"depth", depth},
                {"vision_prompt_len", vision_prompt_len},
                {"init_template", init_template},
                {"maple_init_tokens", maple_init_tokens},
                {"init_std", init_std},
                {"meta_bottleneck", meta_bottleneck},
                {"lambda1", lambda1},
                {"lambda2", lambda2},
                {"kl_weight", kl_weight},
                {"diversity_templates", diversity_templates},
                {"n_templates", n_templates},
                {"class_token_position", class_token_position},
                {"ensemble", ensemble},
                {"ensemble_mean", ensemble_mean},
                {"ensemble_sigma", ensemble_sigma}};
    }

    /// Method defaults overridden by the keys present in `j`; unknown keys are rejected.
    static MethodConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("method: expected an object");
        MethodConfig c = defaults(parse_method(j.value("method", std::string("coop"))));
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto& k = it.key();
            const auto& v = it.value();
            try {
                if (k == "method") continue;
                else if (k == "n_ctx") c.n_ctx = v.get<int>();
                else if (k == "depth") c.depth = v.get<int>();
                else if (k == "vision_prompt_len") c.vision_prompt_len = v.get<int>();
                else if (k == "init_template") c.init_template = v.get<std::string>();
                else if (k == "maple_init_tokens") c.maple_init_tokens = v.get<std::string>();
                else if (k == "init_std") c.init_std = v.get<double>();
                else if (k == "meta_bottleneck") c.meta_bottleneck = v.get<int>();
                else if (k == "lambda1") c.lambda1 = v.get<double>();
                else if (k == "lambda2") c.lambda2 = v.get<double>();
                else if (k == "kl_weight") c.kl_weight = v.get<double>();
                else if (k == "diversity_templates") c.diversity_templates = v.get<std::string>();
                else if (k == "n_templates") c.n_templates = v.get<int>();
                else if (k == "class_token_position") c.class_token_position = v.get<std::string>();
                else if (k == "ensemble") c.ensemble = v.get<bool>();
                else if (k == "ensemble_mean") c.ensemble_mean = v.get<double>();
                else if (k == "ensemble_sigma") c.ensemble_sigma = v.get<double>();
                else throw ConfigError("method: unknown key '" + k + "'");
            } catch (const nlohmann::json::type_error&) {
                throw ConfigError("method." + k + ": wrong type");
            }
        }
        c.validate();
        return c;
    }
};

/// Every learnable tensor of one method, by name.
///   context                      M x d_text, input-layer text prompt
///   deep_text.{k}                M x d_text, replaces the prompt rows at text block k + 1
///   deep_vision.{k}              L_v x d_vision, visual prompt for vision layer k (PromptSRC)
///   coupling.{k}.weight / bias   d_vision x d_text / 1 x d_vision (MaPLe)
///   meta.linear{1,2}.weight/bias CoCoOp meta-network
template <class T>
struct PromptState {
    Method method = Method::zeroshot;
    std::string init_template;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, ad::Var<T>>> params;

    bool has(const std::string& name) const {
        for (const auto& [n, v] : params)
            if (n == name) return true;
        return false;
    }

    const ad::Var<T>& get(const std::string& name) const {
        for (const auto& [n, v] : params)
            if (n == name) return v;
        throw ContractError("prompt state (" + to_string(method) + ") has no tensor '" + name + "'");
    }

    std::vector<ad::Var<T>> series(const std::string& prefix) const {
        std::vector<ad::Var<T>> out;
        for (std::size_t k = 0;; ++k) {
            std::string n = prefix + "." + std::to_string(k);
            if (!has(n)) break;
            out.push_back(get(n));
        }
        return out;
    }

    void add(std::string name, Mat<T> value) { params.emplace_back(std::move(name), ad::parameter<T>(std::move(value))); }

    /// Deep copy with fresh parameter leaves.
    PromptState clone() const {
        PromptState s = *this;
        for (auto& [n, v] : s.params) v = ad::parameter<T>(v.value());
        return s;
    }

    /// Copy whose tensors are constants: forward passes record no graph.
    PromptState frozen() const {
        PromptState s = *this;
        for (auto& [n, v] : s.params) v = ad::constant<T>(v.value());
        return s;
    }

    void zero_grad() {
        for (auto& [n, v] : params) v.node()->grad.resize(0, 0);
    }

    bool all_finite() const {
        for (const auto& [n, v] : params)
            if (!rsprompt::all_finite(v.value())) return false;
        return true;
    }

    std::size_t num_values() const {
        std::size_t k = 0;
        for (const auto& [n, v] : params) k += static_cast<std::size_t>(v.value().size());
        return k;
    }

    bool same_values(const PromptState& o) const {
        if (params.size() != o.params.size() || method != o.method) return false;
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].first != o.params[i].first || params[i].second.value() != o.params[i].second.value()) return false;
        return true;
    }

    template <class U>
    PromptState<U> cast() const {
        PromptState<U> s;
        s.method = method;
        s.init_template = init_template;
        s.seed = seed;
        for (const auto& [n, v] : params) s.add(n, v.value().template cast<U>());
        return s;
    }
};

namespace detail {

template <class T>
Mat<T> uniform_matrix(Rng& rng, Index r, Index c, double bound) {
    Mat<T> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return m;
}

template <class T>
Mat<T> template_rows(const BackboneBundle<T>& bb, const MethodConfig& cfg) {
    std::vector<int> ids = bb.tokenizer().body(cfg.init_template);
    const auto m = static_cast<std::size_t>(cfg.n_ctx);
    if (cfg.method == Method::maple) {
        if (ids.size() < m)
            throw ConfigError("init template '" + cfg.init_template + "' has " + std::to_string(ids.size()) +
                              " tokens, fewer than the prompt length " + std::to_string(m));
        if (cfg.maple_init_tokens == "last")
            ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(m));
        else
            ids.resize(m);
    } else if (ids.size() != m) {
        throw ConfigError("init template '" + cfg.init_template + "' has " + std::to_string(ids.size()) +
                          " tokens but the context length is " + std::to_string(m));
    }
    Mat<T> rows(static_cast<Index>(m), bb.text_width());
    for (std::size_t i = 0; i < m; ++i) rows.row(static_cast<Index>(i)) = bb.weights().token_embedding.row(ids[i]);
    return rows;
}

}  // namespace detail

/// Initial state for a method: context from the init template (random when the
/// template is empty), other prompts N(0, init_std), linear maps U(+-1/sqrt(fan_in)).
template <class T>
PromptState<T> init_prompt_state(const BackboneBundle<T>& bb, const MethodConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto& g = bb.geometry();
    if (cfg.method != Method::zeroshot) {
        if (cfg.depth - 1 > g.text_layers - 1 || cfg.depth > g.vision_layers)
            throw ConfigError("prompt depth " + std::to_string(cfg.depth) + " exceeds the encoder depth (" +
                              std::to_string(g.text_layers) + " text / " + std::to_string(g.vision_layers) + " vision layers)");
        if (cfg.n_ctx > bb.tokenizer().layout().max_body() - 1)
            throw ConfigError("context length leaves no room for class tokens");
    }
    PromptState<T> s;
    s.method = cfg.method;
    s.init_template = cfg.init_template;
    s.seed = seed;
    if (cfg.method == Method::zeroshot) return s;

    Rng rng(derive_seed("prompt-init", seed, static_cast<int>(cfg.method)));
    const Index dt = bb.text_width(), dv = bb.vision_width(), dj = bb.embed_dim(), m = cfg.n_ctx;
    s.add("context", cfg.init_template.empty() ? rng.normal_matrix<T>(m, dt, cfg.init_std) : detail::template_rows(bb, cfg));
    if (cfg.method == Method::maple || cfg.method == Method::promptsrc)
        for (int k = 0; k + 1 < cfg.depth; ++k) s.add("deep_text." + std::to_string(k), rng.normal_matrix<T>(m, dt, cfg.init_std));
    if (cfg.method == Method::promptsrc)
        for (int k = 0; k < cfg.depth; ++k)
            s.add("deep_vision." + std::to_string(k), rng.normal_matrix<T>(cfg.vision_prompt_len, dv, cfg.init_std));
    if (cfg.method == Method::maple) {
        const double b = 1.0 / std::sqrt(static_cast<double>(dt));
        for (int k = 0; k < cfg.depth; ++k) {
            s.add("coupling." + std::to_string(k) + ".weight", detail::uniform_matrix<T>(rng, dv, dt, b));
            s.add("coupling." + std::to_string(k) + ".bias", detail::uniform_matrix<T>(rng, 1, dv, b));
        }
    }
    if (cfg.method == Method::cocoop) {
        const Index h = std::max<Index>(1, dj / cfg.meta_bottleneck);
        const double b1 = 1.0 / std::sqrt(static_cast<double>(dj)), b2 = 1.0 / std::sqrt(static_cast<double>(h));
        s.add("meta.linear1.weight", detail::uniform_matrix<T>(rng, h, dj, b1));
        s.add("meta.linear1.bias", detail::uniform_matrix<T>(rng, 1, h, b1));
        s.add("meta.linear2.weight", detail::uniform_matrix<T>(rng, dt, h, b2));
        s.add("meta.linear2.bias", detail::uniform_matrix<T>(rng, 1, dt, b2));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Self-ensembling

/// Normalized Gaussian weights over epochs 1..E.
inline std::vector<double> gaussian_weights(int epochs, double mean, double sigma) {
    if (epochs < 1) throw ConfigError("gaussian_weights: epochs must be >= 1");
    if (!(sigma > 0)) throw ConfigError("gaussian_weights: sigma must be > 0");
    std::vector<double> w(static_cast<std::size_t>(epochs));
    const double norm = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
    double total = 0;
    for (int e = 1; e <= epochs; ++e) {
        double z = (e - mean) / sigma;
        w[static_cast<std::size_t>(e - 1)] = norm * std::exp(-0.5 * z * z);
        total += w[static_cast<std::size_t>(e - 1)];
    }
    for (double& x : w) x /= total;
    return w;
}

inline std::vector<double> gaussian_weights(int epochs, const MethodConfig& cfg) {
    double mean = cfg.ensemble_mean < 0 ? epochs / 2.0 : cfg.ensemble_mean;
    double sigma = cfg.ensemble_sigma < 0 ? epochs / 3.3 : cfg.ensemble_sigma;
    return gaussian_weights(epochs, mean, sigma);
}

/// Weighted average of every learnable tensor; weights are renormalized to sum 1.
template <class T>
PromptState<T> gaussian_prompt_aggregate(const std::vector<PromptState<T>>& snapshots, std::vector<double> weights) {
    if (snapshots.empty()) throw ContractError("aggregate: no snapshots");
    if (weights.size() != snapshots.size()) throw ContractError("aggregate: one weight per snapshot required");
    double total = 0;
    for (double w : weights) {
        if (!(w >= 0) || !std::isfinite(w)) throw ContractError("aggregate: weights must be finite and non-negative");
        total += w;
    }
    if (!(total > 0)) throw ContractError("aggregate: weights sum to zero");
    for (double& w : weights) w /= total;
    const auto& first = snapshots.front();
    for (const auto& s : snapshots) {
        if (s.params.size() != first.params.size()) throw ContractError("aggregate: snapshot tensor sets differ");
        for (std::size_t i = 0; i < s.params.size(); ++i)
            if (s.params[i].first != first.params[i].first || s.params[i].second.rows() != first.params[i].second.rows() ||
                s.params[i].second.cols() != first.params[i].second.cols())
                throw ContractError("aggregate: shape mismatch in '" + s.params[i].first + "'");
    }
    if (snapshots.size() == 1) return first.clone();
    PromptState<T> out = first;
    for (std::size_t i = 0; i < out.params.size(); ++i) {
        Mat<T> acc = Mat<T>::Zero(first.params[i].second.rows(), first.params[i].second.cols());
        for (std::size_t s = 0; s < snapshots.size(); ++s) acc += static_cast<T>(weights[s]) * snapshots[s].params[i].second.value();
        out.params[i].second = ad::parameter<T>(std::move(acc));
    }
    return out;
}

}  // namespace rsprompt
