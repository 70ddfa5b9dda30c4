#pragma once

#include "rsprompt/data/image_io.hpp"
#include "rsprompt/data/registry.hpp"

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

namespace rsprompt::testing {

/// One raw folder label per class, in class order.
inline std::vector<std::string> raw_class_labels(const std::string& dataset) {
    auto labels = load_label_map(find_dataset(dataset));
    std::vector<std::string> raw;
    for (const auto& c : labels.classes)
        for (const auto& [r, n] : labels.to_normalized)
            if (n == c) {
                raw.push_back(r);
                break;
            }
    return raw;
}

/// Class folders of small PNGs under `root`: class c gets a colour of its own plus
/// per-pixel noise, so even a random encoder separates some classes.
inline void write_scene_dataset(const std::filesystem::path& root, const std::string& dataset, int per_class, int classes = -1,
                                std::uint64_t seed = 1, int size = 20) {
    auto raw = raw_class_labels(dataset);
    if (classes > 0) raw.resize(static_cast<std::size_t>(std::min<int>(classes, static_cast<int>(raw.size()))));
    Rng rng(seed);
    for (std::size_t c = 0; c < raw.size(); ++c) {
        std::filesystem::create_directories(root / raw[c]);
        const int base[3] = {static_cast<int>(37 * c % 256), static_cast<int>(101 * c % 256), static_cast<int>(255 - 23 * c % 256)};
        for (int i = 0; i < per_class; ++i) {
            Image img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * size * size))};
            for (std::size_t p = 0; p < img.rgb.size(); ++p)
                img.rgb[p] = static_cast<std::uint8_t>(std::clamp(base[p % 3] + static_cast<int>(rng.normal() * 25), 0, 255));
            save_png(img, root / raw[c] / (raw[c] + "_" + std::to_string(i) + ".png"));
        }
    }
}

/// Writes generated train/test manifests for `dataset` under `splits`.
inline std::pair<SplitManifest, SplitManifest> write_splits(const std::filesystem::path& data_root, const std::filesystem::path& splits,
                                                           const std::string& dataset, double test_fraction = 0.25) {
    auto s = generate_splits(find_dataset(dataset), data_root / dataset, test_fraction, 0);
    s.first.save(split_path(splits, dataset, "train"));
    s.second.save(split_path(splits, dataset, "test"));
    return s;
}

}  // namespace rsprompt::testing
