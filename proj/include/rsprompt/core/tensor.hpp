#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace rsprompt {

/// Row-major dense matrix; every tensor in the library is 2-D (rows = tokens or samples).
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// Thrown when tensor shapes or configuration values are inconsistent.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown on violated preconditions of numerical operations (shape, range, normalization).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// I/O and on-disk integrity failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dataset registry lookups and manifest integrity failures.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A test split was requested while training or sampling is in progress.
struct AccessError : std::logic_error {
    using std::logic_error::logic_error;
};

inline std::string shape_str(Index rows, Index cols) {
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

template <class T>
std::string shape_str(const Mat<T>& m) {
    return shape_str(m.rows(), m.cols());
}

template <class T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

template <class U, class T>
Mat<U> cast(const Mat<T>& m) {
    return m.template cast<U>();
}

/// a * b^T with every entry an independent row dot product, so a logit does not
/// depend on how many other rows share the call.
template <class T>
Mat<T> row_dots(const Mat<T>& a, const Mat<T>& b) {
    Mat<T> out(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < b.rows(); ++j) out(i, j) = a.row(i).dot(b.row(j));
    return out;
}

/// Scales every row to unit Euclidean norm.
template <class T>
Mat<T> normalize_rows(const Mat<T>& m) {
    Mat<T> out = m;
    for (Index r = 0; r < out.rows(); ++r) {
        T n = out.row(r).norm();
        if (n > T(0)) out.row(r) /= n;
    }
    return out;
}

}  // namespace rsprompt
