#pragma once

#include <cstdlib>
#include <filesystem>

#ifndef RSPROMPT_ASSET_DIR
#define RSPROMPT_ASSET_DIR "assets"
#endif

namespace rsprompt {

/// Asset root: $RSPROMPT_ASSETS when set, else the directory baked in at build time.
inline std::filesystem::path asset_dir() {
    if (const char* env = std::getenv("RSPROMPT_ASSETS"); env && *env) return env;
    return RSPROMPT_ASSET_DIR;
}

inline std::filesystem::path asset_path(const std::filesystem::path& rel) { return asset_dir() / rel; }

inline std::filesystem::path default_bpe_vocab() { return asset_path("bpe_simple_vocab_16e6.txt.gz"); }

}  // namespace rsprompt
