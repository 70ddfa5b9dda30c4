#pragma once

#include "rsprompt/core/log.hpp"
#include "rsprompt/data/registry.hpp"
#include "rsprompt/methods/prompt_model.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>

namespace rsprompt {

inline double default_learning_rate(Method m) {
    switch (m) {
        case Method::coop:
        case Method::cocoop: return 0.002;
        case Method::maple: return 0.0035;
        case Method::promptsrc: return 0.0025;
        case Method::zeroshot: return 0;
    }
    return 0;
}

struct TrainConfig {
    int epochs = 50;
    int batch_size = 4;
    double lr = 0.002;
    double warmup_lr = 1e-5;   // constant rate during epoch 1
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int seed = 1;

    static TrainConfig defaults(Method m) {
        TrainConfig c;
        c.lr = default_learning_rate(m);
        return c;
    }

    void validate(bool allow_zero_epochs = false) const {
        if (epochs < (allow_zero_epochs ? 0 : 1)) throw ConfigError("train.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
        if (!(warmup_lr > 0) || !std::isfinite(warmup_lr)) throw ConfigError("train.warmup_lr must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
        if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"warmup_lr", warmup_lr},
                {"momentum", momentum}, {"weight_decay", weight_decay}, {"seed", seed}};
    }
};

/// Learning rate at `progress` in [0, 1] through `epoch` (1-based): the warmup rate for
/// epoch 1, then cosine decay from lr at the start of epoch 2 to 0 at the end of the
/// last epoch.
inline double lr_at(int epoch, double progress, const TrainConfig& cfg) {
    if (epoch < 1 || epoch > cfg.epochs) throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside 1.." + std::to_string(cfg.epochs));
    if (epoch == 1) return cfg.warmup_lr;
    const double t = (epoch - 2 + std::clamp(progress, 0.0, 1.0)) / (cfg.epochs - 1);
    return cfg.lr * 0.5 * (1 + std::cos(std::numbers::pi * t));
}

/// SGD with momentum; weight decay is added to the gradient (g += wd * p). Matches
/// torch.optim.SGD without dampening or Nesterov.
template <class T>
class Sgd {
public:
    Sgd(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

    void step(PromptState<T>& s, double lr) {
        if (buf_.empty()) buf_.resize(s.params.size());
        for (std::size_t i = 0; i < s.params.size(); ++i) {
            auto& node = *s.params[i].second.node();
            Mat<T> g = node.grad.size() ? node.grad : Mat<T>::Zero(node.value.rows(), node.value.cols());
            if (wd_ > 0) g += static_cast<T>(wd_) * node.value;
            if (momentum_ > 0) {
                if (buf_[i].size() == 0)
                    buf_[i] = g;
                else
                    buf_[i] = static_cast<T>(momentum_) * buf_[i] + g;
                node.value -= static_cast<T>(lr) * buf_[i];
            } else {
                node.value -= static_cast<T>(lr) * g;
            }
        }
    }

private:
    double momentum_, wd_;
    std::vector<Mat<T>> buf_;
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0;
    double ce = 0;
    double l1_image = 0;
    double l1_text = 0;
    double kl = 0;
    double lr_last = 0;
};

template <class T>
struct TrainResult {
    PromptState<T> final_state;
    std::vector<PromptState<T>> snapshots;        // one per epoch when ensembling
    std::optional<PromptState<T>> ensembled;      // Gaussian aggregate of the snapshots
    std::vector<EpochRecord> history;
    std::string backbone_digest_before;
    std::string backbone_digest_after;
};

/// Thrown when a step produces a non-finite loss.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using TrainLogSink = std::function<void(const nlohmann::json&)>;

/// Optimizes `init` on the given images. Only prompt tensors change; the test split
/// guard is held for the whole run. `ids` (optional) names the images in diagnostics.
template <class T>
TrainResult<T> train_prompts(const PromptModel<T>& model, const ImageBatch<T>& data, const std::vector<int>& labels, PromptState<T> init,
                             const TrainConfig& cfg, const TrainLogSink& sink = {}, const std::vector<std::string>& ids = {}) {
    TestSplitGuard::Scope guard("training");
    cfg.validate(true);
    if (static_cast<std::size_t>(data.size()) != labels.size()) throw ContractError("train: image and label counts differ");
    if (data.size() == 0) throw ContractError("train: empty training set");
    TrainResult<T> res;
    res.backbone_digest_before = model.backbone().compute_digest();
    PromptState<T> state = init.clone();
    Sgd<T> opt(cfg.momentum, cfg.weight_decay);
    const std::size_t n = labels.size(), B = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps = (n + B - 1) / B;
    std::vector<std::size_t> order(n);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed("batch-order", static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order.begin(), order.end());
        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(step * B),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (step + 1) * B)));
            std::vector<int> y;
            for (auto i : idx) y.push_back(labels[i]);
            const double lr = lr_at(epoch, static_cast<double>(step) / static_cast<double>(steps), cfg);
            auto out = model.forward(data.select(idx), state);
            auto loss = model.loss(out, y);
            const double total = static_cast<double>(loss.total.item());
            if (!std::isfinite(total)) {
                std::string which;
                for (auto i : idx) which += (which.empty() ? "" : ", ") + (ids.empty() ? std::to_string(i) : ids[i]);
                throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                       " (lr " + std::to_string(lr) + ", batch: " + which + ")");
            }
            ad::backward(loss.total);
            opt.step(state, lr);
            state.zero_grad();
            const double w = static_cast<double>(idx.size()) / static_cast<double>(n);
            rec.loss += w * total;
            rec.ce += w * loss.ce;
            rec.l1_image += w * loss.l1_image;
            rec.l1_text += w * loss.l1_text;
            rec.kl += w * loss.kl;
            rec.lr_last = lr;
            if (sink)
                sink({{"epoch", epoch}, {"step", step}, {"lr", lr}, {"loss", total}, {"ce", loss.ce},
                      {"l1_image", loss.l1_image}, {"l1_text", loss.l1_text}, {"kl", loss.kl}});
        }
        if (!state.all_finite()) throw TrainingDiverged("non-finite prompt parameters after epoch " + std::to_string(epoch));
        res.history.push_back(rec);
        if (model.config().ensemble) res.snapshots.push_back(state.clone());
        log::debug("epoch ", epoch, " loss ", rec.loss);
    }
    if (model.config().ensemble && !res.snapshots.empty())
        res.ensembled = gaussian_prompt_aggregate(res.snapshots, gaussian_weights(cfg.epochs, model.config()));
    res.final_state = std::move(state);
    res.backbone_digest_after = model.backbone().compute_digest();
    if (res.backbone_digest_after != res.backbone_digest_before) throw ContractError("train: backbone weights changed during training");
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointRecord {
    int epoch = 0;
    double train_loss = 0;
    std::string config_hash;
    std::string manifest_digest;
    std::string backbone_digest;
    std::string wall_clock;
    std::string variant = "final";   // final | ensemble
    nlohmann::json method_config;
    std::vector<std::string> classes;
};

inline std::string utc_timestamp() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

template <class T>
void save_checkpoint(const PromptState<T>& s, const CheckpointRecord& rec, const std::filesystem::path& path) {
    TensorArchive ar;
    for (const auto& [name, v] : s.params) ar.tensors[name] = RawTensor::from_matrix<T>(v.value());
    ar.metadata = {{"format", "rsprompt-checkpoint/1"},
                   {"method", to_string(s.method)},
                   {"seed", std::to_string(s.seed)},
                   {"init_template", s.init_template},
                   {"epoch", std::to_string(rec.epoch)},
                   {"train_loss", nlohmann::json(rec.train_loss).dump()},
                   {"config_hash", rec.config_hash},
                   {"manifest_digest", rec.manifest_digest},
                   {"backbone_digest", rec.backbone_digest},
                   {"wall_clock", rec.wall_clock},
                   {"variant", rec.variant},
                   {"method_config", rec.method_config.dump()},
                   {"classes", nlohmann::json(rec.classes).dump()},
                   {"tensor_order", [&] {
                        nlohmann::json o = nlohmann::json::array();
                        for (const auto& [name, v] : s.params) o.push_back(name);
                        return o.dump();
                    }()}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    save_archive(ar, tmp);
    std::filesystem::rename(tmp, path);
}

template <class T>
struct LoadedCheckpoint {
    PromptState<T> state;
    CheckpointRecord record;
};

/// Loads a checkpoint. A different backbone digest is refused; a different config
/// hash only warns.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const std::string& expected_backbone_digest,
                                    const std::string& expected_config_hash = "") {
    auto ar = load_archive(path);
    auto meta = [&](const std::string& k) -> const std::string& {
        auto it = ar.metadata.find(k);
        if (it == ar.metadata.end()) throw IoError("checkpoint " + path.string() + " lacks metadata '" + k + "'");
        return it->second;
    };
    if (meta("format") != "rsprompt-checkpoint/1") throw IoError(path.string() + " is not an rsprompt checkpoint");
    LoadedCheckpoint<T> out;
    auto& r = out.record;
    r.backbone_digest = meta("backbone_digest");
    if (!expected_backbone_digest.empty() && r.backbone_digest != expected_backbone_digest)
        throw ConfigError("checkpoint " + path.string() + " was trained on backbone " + short_digest(r.backbone_digest) +
                          ", refusing to load it on " + short_digest(expected_backbone_digest));
    r.config_hash = meta("config_hash");
    if (!expected_config_hash.empty() && r.config_hash != expected_config_hash)
        log::warn("checkpoint ", path.string(), " has config hash ", short_digest(r.config_hash), ", expected ", short_digest(expected_config_hash));
    try {
        r.epoch = std::stoi(meta("epoch"));
        r.train_loss = nlohmann::json::parse(meta("train_loss")).template get<double>();
        r.manifest_digest = meta("manifest_digest");
        r.wall_clock = meta("wall_clock");
        r.variant = meta("variant");
        r.method_config = nlohmann::json::parse(meta("method_config"));
        r.classes = nlohmann::json::parse(meta("classes")).template get<std::vector<std::string>>();
        out.state.method = parse_method(meta("method"));
        out.state.seed = std::stoull(meta("seed"));
        out.state.init_template = meta("init_template");
        for (const auto& name : nlohmann::json::parse(meta("tensor_order"))) out.state.add(name.template get<std::string>(), ar.at(name.template get<std::string>()).template to_matrix<T>());
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + path.string() + ": malformed metadata (" + e.what() + ")");
    } catch (const std::invalid_argument&) {
        throw IoError("checkpoint " + path.string() + ": malformed metadata");
    }
    if (out.state.params.size() != ar.tensors.size()) throw IoError("checkpoint " + path.string() + ": tensor list does not match its index");
    return out;
}

}  // namespace rsprompt
