// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "comer/model.hpp"

namespace comer {

// Container layout (little-endian):
//   magic "CMRT" | u32 version | u32 entry count
//   per entry: u16 name length | name bytes | u8 rank | u64 dims[rank]
//              | f32 values[prod(dims)]
inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'R', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

namespace detail {

template <typename V>
void write_pod(std::ofstream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& is, const std::string& path) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    check_as<IoError>(bool(is), "checkpoint '" + path + "': truncated file");
    return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check_as<IoError>(bool(os), "cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, 4);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, std::uint32_t(entries.size()));
    for (const auto& e : entries) {
        check_as<UsageError>(e.name.size() <= 0xffff, "checkpoint: entry name too long");
        check_as<DimensionError>(numel(e.shape) == Index(e.values.size()),
                                 "checkpoint: entry '" + e.name + "' shape/value mismatch");
        detail::write_pod(os, std::uint16_t(e.name.size()));
        os.write(e.name.data(), std::streamsize(e.name.size()));
        detail::write_pod(os, std::uint8_t(e.shape.size()));
        for (Index d : e.shape) detail::write_pod(os, std::uint64_t(d));
        os.write(reinterpret_cast<const char*>(e.values.data()), std::streamsize(e.values.size() * sizeof(float)));
    }
    check_as<IoError>(bool(os), "write to '" + path + "' failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check_as<IoError>(bool(is), "cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    check_as<IoError>(bool(is) && std::memcmp(magic, kCheckpointMagic, 4) == 0,
                      "'" + path + "' is not a model checkpoint (bad magic)");
    auto version = detail::read_pod<std::uint32_t>(is, path);
    check_as<IoError>(version == kCheckpointVersion,
                      "checkpoint '" + path + "': unsupported version " + std::to_string(version));
    auto count = detail::read_pod<std::uint32_t>(is, path);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        auto name_len = detail::read_pod<std::uint16_t>(is, path);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        auto rank = detail::read_pod<std::uint8_t>(is, path);
        Index total = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            e.shape.push_back(Index(detail::read_pod<std::uint64_t>(is, path)));
            total *= e.shape.back();
        }
        e.values.resize(size_t(total));
        is.read(reinterpret_cast<char*>(e.values.data()), std::streamsize(e.values.size() * sizeof(float)));
        check_as<IoError>(bool(is), "checkpoint '" + path + "': truncated entry '" + e.name + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

// Model parameters plus running statistics; callers may append extra entries
// (optimizer state, counters) before writing.
template <typename T>
std::vector<CheckpointEntry> model_entries(Model<T>& m) {
    std::vector<CheckpointEntry> out;
    auto put = [&](const std::string& name, const Tensor<T>& t) {
        CheckpointEntry e{name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
        out.push_back(std::move(e));
    };
    m.visit([&](const std::string& name, Tensor<T>& t) { put(name, t); });
    m.visit_norm([&](const std::string& name, NormState<T>& s) {
        put(name + ".running_mean", s.running_mean);
        put(name + ".running_var", s.running_var);
    });
    return out;
}

template <typename T>
void save_model(Model<T>& m, const std::string& path, std::vector<CheckpointEntry> extra = {}) {
    auto entries = model_entries(m);
    for (auto& e : extra) entries.push_back(std::move(e));
    write_checkpoint(path, entries);
}

// Loads parameters and running stats into the model; returns entries that
// did not match any model tensor. Missing or mis-shaped entries are errors.
template <typename T>
std::map<std::string, CheckpointEntry> load_model(Model<T>& m, const std::string& path) {
    std::map<std::string, CheckpointEntry> table;
    for (auto& e : read_checkpoint(path)) table[e.name] = std::move(e);
    auto take = [&](const std::string& name, Tensor<T>& t) {
        auto it = table.find(name);
        check_as<IoError>(it != table.end(), "checkpoint is missing parameter '" + name + "'");
        check_as<DimensionError>(it->second.shape == t.shape(),
                                 "checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape) +
                                     ", model expects " + shape_str(t.shape()));
        auto& dst = t.mutable_values();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = T(it->second.values[i]);
        table.erase(it);
    };
    m.visit([&](const std::string& name, Tensor<T>& t) { take(name, t); });
    m.visit_norm([&](const std::string& name, NormState<T>& s) {
        take(name + ".running_mean", s.running_mean);
        take(name + ".running_var", s.running_var);
        s.initialized = true;
    });
    return table;
}

}  // namespace comer
