#pragma once

#include "rsprompt/core/autodiff.hpp"
#include "rsprompt/core/rng.hpp"
#include "rsprompt/core/safetensors.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <string>

namespace rsprompt::testing {

inline std::filesystem::path data_path(const std::string& name) { return std::filesystem::path(RSPROMPT_TEST_DATA) / name; }

inline const TensorArchive& micro_reference() {
    static TensorArchive ar = load_archive(data_path("micro_reference.safetensors"));
    return ar;
}

inline Mat<double> ref(const std::string& name) { return micro_reference().at(name).to_matrix<double>(); }

/// Scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("rsprompt_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

/// Largest relative error between the analytic gradient of `f` at `p` and central
/// differences; relative to max(|a|, |n|, floor).
inline double max_fd_error(ad::Var<double> p, const std::function<ad::Var<double>()>& f, double eps = 1e-5,
                           double floor = 1e-6) {
    p.node()->grad.resize(0, 0);
    auto out = f();
    ad::backward(out);
    Mat<double> analytic = p.grad();
    if (analytic.size() == 0) analytic = Mat<double>::Zero(p.rows(), p.cols());
    double worst = 0;
    auto& v = p.node()->value;
    for (Index i = 0; i < v.size(); ++i) {
        const double keep = v.data()[i];
        v.data()[i] = keep + eps;
        double up = f().item();
        v.data()[i] = keep - eps;
        double dn = f().item();
        v.data()[i] = keep;
        double num = (up - dn) / (2 * eps);
        double a = analytic.data()[i];
        double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
        worst = std::max(worst, err);
    }
    return worst;
}

struct FdReport {
    double max_rel_error = 0;
    std::size_t coords = 0;
};

/// Central-difference check of `f` over `coords` randomly chosen entries of `params`
/// (one backward pass, then two forward evaluations per entry).
inline FdReport sampled_fd_check(const std::vector<ad::Var<double>>& params, const std::function<ad::Var<double>()>& f,
                                 std::size_t coords, std::uint64_t seed, double eps = 1e-5, double floor = 1e-7) {
    for (const auto& p : params) p.node()->grad.resize(0, 0);
    ad::backward(f());
    std::vector<Mat<double>> analytic;
    std::size_t total = 0;
    for (const auto& p : params) {
        analytic.push_back(p.grad().size() ? p.grad() : Mat<double>::Zero(p.rows(), p.cols()));
        total += static_cast<std::size_t>(p.value().size());
    }
    Rng rng(seed);
    FdReport rep;
    for (std::size_t c = 0; c < coords; ++c) {
        std::size_t flat = static_cast<std::size_t>(rng.below(total)), k = 0;
        while (flat >= static_cast<std::size_t>(params[k].value().size())) flat -= static_cast<std::size_t>(params[k++].value().size());
        double& v = params[k].node()->value.data()[flat];
        const double keep = v;
        v = keep + eps;
        double up = f().item();
        v = keep - eps;
        double dn = f().item();
        v = keep;
        double num = (up - dn) / (2 * eps);
        double a = analytic[k].data()[flat];
        rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
        ++rep.coords;
    }
    return rep;
}

}  // namespace rsprompt::testing
