#pragma once

// Image preprocessing matching the usual CLIP evaluation transform:
// shortest-side bicubic resize (Pillow fixed-point 8-bit resampler), center crop,
// scaling to [0, 1] and per-channel standardization.

#include "rsprompt/core/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace rsprompt {

/// Interleaved 8-bit RGB image.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Channel-major float tensor (3 x size x size) ready for the vision encoder.
struct PixelTensor {
    int size = 0;
    std::vector<float> chw;

    float at(int c, int y, int x) const { return chw[(static_cast<std::size_t>(c) * size + y) * size + x]; }
};

struct PreprocessSpec {
    int target_size = 224;
    std::string resize = "bicubic-shortest-side";
    std::string crop = "center";
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stddev{0.26862954, 0.26130258, 0.27577711};

    nlohmann::json to_json() const {
        return {{"target_size", target_size}, {"resize", resize}, {"crop", crop}, {"mean", mean}, {"std", stddev}};
    }

    static PreprocessSpec from_json(const nlohmann::json& j) {
        PreprocessSpec p;
        p.target_size = j.at("target_size").get<int>();
        p.resize = j.value("resize", p.resize);
        p.crop = j.value("crop", p.crop);
        p.mean = j.at("mean").get<std::array<double, 3>>();
        p.stddev = j.at("std").get<std::array<double, 3>>();
        if (p.target_size <= 0) throw ConfigError("preprocess: target_size must be positive");
        if (p.resize != "bicubic-shortest-side" || p.crop != "center")
            throw ConfigError("preprocess: only bicubic-shortest-side resize with center crop is supported");
        return p;
    }

    bool operator==(const PreprocessSpec&) const = default;
};

namespace detail {

inline double bicubic_filter(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

struct ResampleCoeffs {
    int taps = 0;
    std::vector<int> bounds;       // per output: xmin, count
    std::vector<std::int32_t> kk;  // per output: taps fixed-point weights
};

constexpr int kPrecisionBits = 32 - 8 - 2;

inline ResampleCoeffs precompute_coeffs(int in_size, int out_size) {
    const double scale = static_cast<double>(in_size) / out_size;
    const double filterscale = std::max(scale, 1.0);
    const double support = 2.0 * filterscale;
    ResampleCoeffs rc;
    rc.taps = static_cast<int>(std::ceil(support)) * 2 + 1;
    rc.bounds.resize(static_cast<std::size_t>(out_size) * 2);
    rc.kk.assign(static_cast<std::size_t>(out_size) * rc.taps, 0);
    std::vector<double> k(static_cast<std::size_t>(rc.taps));
    for (int xx = 0; xx < out_size; ++xx) {
        const double center = (xx + 0.5) * scale;
        const double ss = 1.0 / filterscale;
        int xmin = static_cast<int>(center - support + 0.5);
        if (xmin < 0) xmin = 0;
        int xmax = static_cast<int>(center + support + 0.5);
        if (xmax > in_size) xmax = in_size;
        xmax -= xmin;
        double ww = 0.0;
        for (int x = 0; x < xmax; ++x) {
            double w = bicubic_filter((x + xmin - center + 0.5) * ss);
            k[static_cast<std::size_t>(x)] = w;
            ww += w;
        }
        for (int x = 0; x < xmax; ++x) {
            double v = ww != 0.0 ? k[static_cast<std::size_t>(x)] / ww : k[static_cast<std::size_t>(x)];
            rc.kk[static_cast<std::size_t>(xx) * rc.taps + x] =
                v < 0 ? static_cast<std::int32_t>(-0.5 + v * (1 << kPrecisionBits))
                      : static_cast<std::int32_t>(0.5 + v * (1 << kPrecisionBits));
        }
        rc.bounds[static_cast<std::size_t>(xx) * 2] = xmin;
        rc.bounds[static_cast<std::size_t>(xx) * 2 + 1] = xmax;
    }
    return rc;
}

inline std::uint8_t clip8(std::int64_t ss) {
    std::int64_t v = ss >> kPrecisionBits;
    return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
}

}  // namespace detail

/// Bicubic resize with Pillow's 8-bit fixed-point arithmetic (horizontal pass first).
inline Image resize_bicubic(const Image& in, int out_w, int out_h) {
    if (in.width <= 0 || in.height <= 0) throw ContractError("resize: empty image");
    Image tmp = in;
    if (out_w != in.width) {
        auto rc = detail::precompute_coeffs(in.width, out_w);
        tmp.width = out_w;
        tmp.rgb.assign(static_cast<std::size_t>(out_w) * in.height * 3, 0);
        for (int y = 0; y < in.height; ++y)
            for (int xx = 0; xx < out_w; ++xx) {
                int xmin = rc.bounds[static_cast<std::size_t>(xx) * 2], n = rc.bounds[static_cast<std::size_t>(xx) * 2 + 1];
                const std::int32_t* k = &rc.kk[static_cast<std::size_t>(xx) * rc.taps];
                for (int c = 0; c < 3; ++c) {
                    std::int64_t ss = 1 << (detail::kPrecisionBits - 1);
                    for (int x = 0; x < n; ++x) ss += static_cast<std::int64_t>(in.at(x + xmin, y, c)) * k[x];
                    tmp.rgb[(static_cast<std::size_t>(y) * out_w + xx) * 3 + c] = detail::clip8(ss);
                }
            }
    }
    if (out_h == in.height) return tmp;
    auto rc = detail::precompute_coeffs(in.height, out_h);
    Image out;
    out.width = tmp.width;
    out.height = out_h;
    out.rgb.assign(static_cast<std::size_t>(out.width) * out_h * 3, 0);
    for (int yy = 0; yy < out_h; ++yy) {
        int ymin = rc.bounds[static_cast<std::size_t>(yy) * 2], n = rc.bounds[static_cast<std::size_t>(yy) * 2 + 1];
        const std::int32_t* k = &rc.kk[static_cast<std::size_t>(yy) * rc.taps];
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) {
                std::int64_t ss = 1 << (detail::kPrecisionBits - 1);
                for (int y = 0; y < n; ++y) ss += static_cast<std::int64_t>(tmp.at(x, y + ymin, c)) * k[y];
                out.rgb[(static_cast<std::size_t>(yy) * out.width + x) * 3 + c] = detail::clip8(ss);
            }
    }
    return out;
}

/// Output size of a shortest-side resize to `target`.
inline std::pair<int, int> shortest_side_size(int w, int h, int target) {
    if (w <= h) return {target, static_cast<int>(static_cast<double>(target) * h / w)};
    return {static_cast<int>(static_cast<double>(target) * w / h), target};
}

inline PixelTensor preprocess(const Image& img, const PreprocessSpec& spec) {
    const int s = spec.target_size;
    auto [rw, rh] = shortest_side_size(img.width, img.height, s);
    Image r = (rw == img.width && rh == img.height) ? img : resize_bicubic(img, rw, rh);
    // round-half-to-even, as the reference crop offset uses Python's round()
    const int top = static_cast<int>(std::nearbyint((r.height - s) / 2.0));
    const int left = static_cast<int>(std::nearbyint((r.width - s) / 2.0));
    PixelTensor t;
    t.size = s;
    t.chw.resize(static_cast<std::size_t>(3) * s * s);
    for (int c = 0; c < 3; ++c) {
        const float m = static_cast<float>(spec.mean[c]);
        const float sd = static_cast<float>(spec.stddev[c]);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                float v = static_cast<float>(r.at(x + left, y + top, c)) / 255.0f;
                t.chw[(static_cast<std::size_t>(c) * s + y) * s + x] = (v - m) / sd;
            }
    }
    return t;
}

}  // namespace rsprompt
