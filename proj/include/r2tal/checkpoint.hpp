// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary parameter container and JSON file helpers. The container is a flat
// list of named tensors, sorted by name, little-endian throughout; writing a
// loaded store back produces byte-identical files.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "r2tal/errors.hpp"
#include "r2tal/json.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

inline constexpr char kCheckpointMagic[4] = {'R', '2', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(char(v & 0xff));
    buf.push_back(char((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::string& data, std::string path)
        : data_(data), path_(std::move(path)) {}

    std::uint8_t u8() { return std::uint8_t(take(1)[0]); }
    std::uint16_t u16() {
        const char* p = take(2);
        return std::uint16_t(std::uint8_t(p[0])) | std::uint16_t(std::uint8_t(p[1])) << 8;
    }
    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
        return v;
    }
    std::string bytes(std::size_t n) { return std::string(take(n), n); }
    const char* take(std::size_t n) {
        if (pos_ + n > data_.size())
            throw IoError("truncated checkpoint: " + path_);
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file_bytes(const std::string& path, const std::string& data) {
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out.write(data.data(), std::streamsize(data.size()));
    if (!out) throw IoError("short write: " + path);
}

template <typename T>
std::string serialize_checkpoint(const ParameterStore<T>& store) {
    std::string buf;
    buf.append(kCheckpointMagic, 4);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, std::uint32_t(store.size()));
    // std::map iteration order is the sorted-by-name order the format requires.
    for (const auto& [name, t] : store.entries()) {
        if (name.size() > 0xffff) throw IoError("parameter name too long: " + name);
        detail::put_u16(buf, std::uint16_t(name.size()));
        buf.append(name);
        buf.push_back(char(dtype_of<T>()));
        buf.push_back(char(t.rank()));
        for (auto d : t.shape()) detail::put_u32(buf, std::uint32_t(d));
        static_assert(std::endian::native == std::endian::little,
                      "value payload assumes a little-endian host");
        buf.append(reinterpret_cast<const char*>(t.data().data()), t.bytes());
    }
    return buf;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store) {
    write_file_bytes(path, serialize_checkpoint(store));
}

struct CheckpointEntryInfo {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
};

template <typename T>
ParameterStore<T> parse_checkpoint(const std::string& data, const std::string& path) {
    detail::ByteReader r(data, path);
    if (r.bytes(4) != std::string(kCheckpointMagic, 4))
        throw IoError("bad magic, not a checkpoint: " + path);
    if (const auto v = r.u32(); v != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(v) + ": " + path);
    const std::uint32_t count = r.u32();
    ParameterStore<T> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u16());
        const auto dtype = DType(r.u8());
        if (dtype != DType::f32 && dtype != DType::f64)
            throw IoError("entry " + name + " has unknown dtype code: " + path);
        if (dtype != dtype_of<T>())
            throw IoError("entry " + name + " is " + dtype_name(dtype) + ", expected " +
                          dtype_name(dtype_of<T>()) + ": " + path);
        const int rank = r.u8();
        Shape shape(rank);
        for (int d = 0; d < rank; ++d) shape[d] = r.u32();
        const std::size_t n = std::size_t(shape_numel(shape));
        std::vector<T> values(n);
        std::memcpy(values.data(), r.take(n * sizeof(T)), n * sizeof(T));
        if (store.has(name)) throw IoError("duplicate entry " + name + ": " + path);
        store.set(name, Tensor<T>(shape, std::move(values)));
    }
    if (!r.done()) throw IoError("trailing bytes after last entry: " + path);
    return store;
}

template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path) {
    return parse_checkpoint<T>(read_file_bytes(path), path);
}

/// Entry metadata only, without committing to a value type.
inline std::vector<CheckpointEntryInfo> checkpoint_entries(const std::string& path) {
    const std::string data = read_file_bytes(path);
    detail::ByteReader r(data, path);
    if (r.bytes(4) != std::string(kCheckpointMagic, 4))
        throw IoError("bad magic, not a checkpoint: " + path);
    if (const auto v = r.u32(); v != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(v) + ": " + path);
    const std::uint32_t count = r.u32();
    std::vector<CheckpointEntryInfo> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntryInfo e;
        e.name = r.bytes(r.u16());
        e.dtype = DType(r.u8());
        const int rank = r.u8();
        for (int d = 0; d < rank; ++d) e.shape.push_back(r.u32());
        r.take(std::size_t(shape_numel(e.shape)) * (e.dtype == DType::f64 ? 8 : 4));
        out.push_back(std::move(e));
    }
    return out;
}

// --- JSON file helpers ------------------------------------------------------

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in " + path + ": " + e.what());
    }
}

inline void save_json_file(const std::string& path, const nlohmann::json& j) {
    write_file_bytes(path, j.dump(2) + "\n");
}

inline NetworkSpec load_spec_file(const std::string& path) {
    return spec_from_json(load_json_file(path));
}

inline void save_spec_file(const std::string& path, const NetworkSpec& spec) {
    save_json_file(path, spec_to_json(spec));
}

} // namespace r2tal
