#pragma once

#include "rsprompt/backbone/preprocess.hpp"
#include "rsprompt/core/parallel.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace rsprompt {

/// Decodes any format OpenCV reads (jpg, png, tif, bmp) to 8-bit RGB. Grayscale and
/// 16-bit inputs are converted by the decoder.
inline Image load_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot decode image " + path.string());
    Image img;
    img.width = bgr.cols;
    img.height = bgr.rows;
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x) {
            std::uint8_t* px = &img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3];
            px[0] = row[x][2];
            px[1] = row[x][1];
            px[2] = row[x][0];
        }
    }
    return img;
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) bgr.at<cv::Vec3b>(y, x) = cv::Vec3b(img.at(x, y, 2), img.at(x, y, 1), img.at(x, y, 0));
    if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

/// Loads and preprocesses `ids` (paths relative to `root`). Failures name the image id.
inline std::vector<PixelTensor> load_pixels(const std::filesystem::path& root, const std::vector<std::string>& ids,
                                            const PreprocessSpec& spec, unsigned jobs = 1) {
    std::vector<PixelTensor> out(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i) {
        try {
            out[i] = preprocess(load_image(root / ids[i]), spec);
        } catch (const std::exception& e) {
            throw IoError("image '" + ids[i] + "': " + e.what());
        }
    });
    return out;
}

}  // namespace rsprompt
