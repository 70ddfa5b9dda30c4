#pragma once

// Flat named-tensor archive in the safetensors layout:
//   u64 little-endian header length | JSON header | raw little-endian tensor bytes
// Header entries: name -> {dtype, shape, data_offsets}; "__metadata__" holds string pairs.

#include "rsprompt/core/digest.hpp"
#include "rsprompt/core/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace rsprompt {

enum class DType { F32, F64, I64 };

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

inline std::string dtype_name(DType t) {
    switch (t) {
        case DType::F32: return "F32";
        case DType::F64: return "F64";
        case DType::I64: return "I64";
    }
    return "?";
}

inline DType parse_dtype(const std::string& s) {
    if (s == "F32") return DType::F32;
    if (s == "F64") return DType::F64;
    if (s == "I64") return DType::I64;
    throw IoError("unsupported tensor dtype " + s);
}

struct RawTensor {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> bytes;

    std::int64_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    }

    /// Views the tensor as a matrix: 1-D -> 1 x n, N-D -> shape[0] x (product of the rest).
    template <class T>
    Mat<T> to_matrix() const {
        Index rows = shape.empty() ? 1 : (shape.size() == 1 ? 1 : shape[0]);
        Index cols = rows == 0 ? 0 : numel() / rows;
        Mat<T> m(rows, cols);
        const std::size_t n = static_cast<std::size_t>(numel());
        if (dtype == DType::F32) {
            const auto* p = reinterpret_cast<const float*>(bytes.data());
            for (std::size_t i = 0; i < n; ++i) m.data()[i] = static_cast<T>(p[i]);
        } else if (dtype == DType::F64) {
            const auto* p = reinterpret_cast<const double*>(bytes.data());
            for (std::size_t i = 0; i < n; ++i) m.data()[i] = static_cast<T>(p[i]);
        } else {
            const auto* p = reinterpret_cast<const std::int64_t*>(bytes.data());
            for (std::size_t i = 0; i < n; ++i) m.data()[i] = static_cast<T>(p[i]);
        }
        return m;
    }

    template <class T>
    static RawTensor from_matrix(const Mat<T>& m, std::vector<std::int64_t> shape = {}) {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        RawTensor t;
        t.dtype = std::is_same_v<T, float> ? DType::F32 : DType::F64;
        t.shape = shape.empty() ? std::vector<std::int64_t>{m.rows(), m.cols()} : std::move(shape);
        t.bytes.resize(static_cast<std::size_t>(m.size()) * sizeof(T));
        if (m.size() > 0) std::memcpy(t.bytes.data(), m.data(), t.bytes.size());
        return t;
    }
};

struct TensorArchive {
    std::map<std::string, RawTensor> tensors;
    std::map<std::string, std::string> metadata;

    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    const RawTensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("archive: missing tensor '" + name + "'");
        return it->second;
    }

    /// SHA-256 over sorted (name, dtype, shape, bytes); independent of file layout.
    std::string digest() const {
        Sha256 h;
        for (const auto& [name, t] : tensors) {
            h.update(name).update(dtype_name(t.dtype));
            for (auto d : t.shape) h.update_pod(d);
            h.update(t.bytes.data(), t.bytes.size());
        }
        return h.hex();
    }
};

inline void save_archive(const TensorArchive& ar, const std::filesystem::path& path) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (!ar.metadata.empty()) {
        nlohmann::ordered_json meta = nlohmann::ordered_json::object();
        for (const auto& [k, v] : ar.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ar.tensors) {
        header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + t.bytes.size()}}};
        offset += t.bytes.size();
    }
    std::string hs = header.dump();
    while (hs.size() % 8 != 0) hs.push_back(' ');
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    std::uint64_t n = hs.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ar.tensors)
        out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive " + path.string());
    const auto file_size = std::filesystem::file_size(path);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in || n > file_size - 8) throw IoError("archive " + path.string() + ": corrupt header length");
    std::string hs(n, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(n));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw IoError("archive " + path.string() + ": corrupt header (" + e.what() + ")");
    }
    const std::uint64_t data_size = file_size - 8 - n;
    std::vector<std::uint8_t> data(data_size);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data_size));
    if (!in) throw IoError("archive " + path.string() + ": truncated data");

    TensorArchive ar;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto m = it->begin(); m != it->end(); ++m) ar.metadata[m.key()] = m->get<std::string>();
            continue;
        }
        RawTensor t;
        try {
            t.dtype = parse_dtype(it->at("dtype").get<std::string>());
            t.shape = it->at("shape").get<std::vector<std::int64_t>>();
            auto off = it->at("data_offsets").get<std::vector<std::uint64_t>>();
            if (off.size() != 2 || off[1] < off[0] || off[1] > data_size ||
                off[1] - off[0] != static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype))
                throw IoError("bad offsets");
            t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off[0]), data.begin() + static_cast<std::ptrdiff_t>(off[1]));
        } catch (const std::exception& e) {
            throw IoError("archive " + path.string() + ": corrupt entry '" + it.key() + "' (" + e.what() + ")");
        }
        ar.tensors.emplace(it.key(), std::move(t));
    }
    return ar;
}

}  // namespace rsprompt
