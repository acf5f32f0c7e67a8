#ifndef FDIFF_CHECKPOINT_HPP
#define FDIFF_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fdiff/model.hpp"

namespace fdiff {

// Named-tensor checkpoint container. Layout:
//   magic "FDCP" | u32 version | u64 config_len | config text
//   u64 n_entries | per entry: u32 name_len, name, u8 branch, u32 ndim,
//   i32 dims..., u64 payload_offset | f32 little-endian payloads.
// Offsets are relative to the start of the payload section. Round trips are
// bit-exact for f32 tensors.

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Branch branch = Branch::Image;
    std::vector<int> shape;
    uint64_t offset = 0;  // floats, relative to payload start
};

namespace detail {

template <typename V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const std::string& what) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V)))
        throw FormatError("checkpoint truncated while reading " + what + " at byte " +
                          std::to_string(static_cast<long long>(is.tellg())));
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<NamedParam<T>>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write("FDCP", 4);
    detail::write_pod<uint32_t>(os, kCheckpointVersion);
    detail::write_pod<uint64_t>(os, config_text.size());
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    detail::write_pod<uint64_t>(os, params.size());
    uint64_t offset = 0;
    for (const auto& p : params) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(p.branch));
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(p.tensor.shape.size()));
        for (int dmm : p.tensor.shape) detail::write_pod<int32_t>(os, dmm);
        detail::write_pod<uint64_t>(os, offset);
        offset += p.tensor.numel();
    }
    for (const auto& p : params)
        for (T v : *p.tensor.data) detail::write_pod<float>(os, static_cast<float>(v));
    if (!os) throw DataError("write failure on checkpoint: " + path);
}

struct LoadedCheckpoint {
    std::string config_text;
    std::vector<CheckpointEntry> entries;
    std::vector<float> payload;

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FDCP", 4) != 0)
        throw FormatError("not a checkpoint file (bad magic): " + path);
    uint32_t version = detail::read_pod<uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                          std::to_string(kCheckpointVersion) + ")");
    uint64_t clen = detail::read_pod<uint64_t>(is, "config length");
    LoadedCheckpoint ck;
    ck.config_text.resize(clen);
    if (!is.read(ck.config_text.data(), static_cast<std::streamsize>(clen)))
        throw FormatError("checkpoint truncated in config block");
    uint64_t n = detail::read_pod<uint64_t>(is, "entry count");
    uint64_t total = 0;
    for (uint64_t i = 0; i < n; ++i) {
        CheckpointEntry e;
        uint32_t nl = detail::read_pod<uint32_t>(is, "name length");
        e.name.resize(nl);
        if (!is.read(e.name.data(), nl)) throw FormatError("checkpoint truncated in manifest");
        e.branch = static_cast<Branch>(detail::read_pod<uint8_t>(is, "branch"));
        uint32_t nd = detail::read_pod<uint32_t>(is, "rank");
        size_t numel = 1;
        for (uint32_t k = 0; k < nd; ++k) {
            int32_t dim = detail::read_pod<int32_t>(is, "dim");
            e.shape.push_back(dim);
            numel *= static_cast<size_t>(dim);
        }
        e.offset = detail::read_pod<uint64_t>(is, "offset");
        total += numel;
        ck.entries.push_back(std::move(e));
    }
    ck.payload.resize(total);
    if (!is.read(reinterpret_cast<char*>(ck.payload.data()),
                 static_cast<std::streamsize>(total * sizeof(float))))
        throw FormatError("checkpoint truncated in payload (expected " + std::to_string(total) + " floats)");
    return ck;
}

// Copies payloads into an already-built parameter set; shapes and names must
// match exactly.
template <typename T>
void restore_params(const LoadedCheckpoint& ck, std::vector<NamedParam<T>>& params) {
    for (auto& p : params) {
        const CheckpointEntry* e = ck.find(p.name);
        if (!e) throw FormatError("checkpoint missing tensor " + p.name);
        if (e->shape != p.tensor.shape)
            throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_str(e->shape) +
                              ", model expects " + shape_str(p.tensor.shape));
        for (size_t i = 0; i < p.tensor.numel(); ++i)
            (*p.tensor.data)[i] = static_cast<T>(ck.payload[e->offset + i]);
    }
}

}  // namespace fdiff

#endif
