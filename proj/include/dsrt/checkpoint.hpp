// SPDX-License-Identifier: Apache-2.0
//
// "DSRT" tensor container. Byte-exact layout (all integers little-endian):
//
//   offset 0   magic        4 bytes  "DSRT"
//   offset 4   version      u32      (currently 1)
//   offset 8   entry count  u32
//   then per entry, packed:
//     name length  u32
//     name bytes   (no terminator)
//     rank         u32
//     extents      rank x u64
//     dtype tag    u8   (1 = f32, 2 = f64)
//     payload      numel x 4 or 8 bytes, IEEE-754 little-endian
//
// Malformed input raises IoError naming the byte offset of the failure.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dsrt/errors.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
    const std::string& buf;
    size_t off = 0;
    explicit ByteReader(const std::string& b) : buf(b) {}
    void need(size_t n, const char* what) const {
        if (off + n > buf.size()) {
            throw IoError(std::string("checkpoint: truncated while reading ") + what +
                          " at byte offset " + std::to_string(off));
        }
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 8;
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[off++]);
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(off, n);
        off += n;
        return s;
    }
};

}  // namespace detail

template <typename R>
using NamedTensors = std::vector<std::pair<std::string, Tensor<R>>>;

template <typename R>
void save_tensors(const std::filesystem::path& path, const NamedTensors<R>& tensors) {
    std::string out;
    out += "DSRT";
    detail::put_u32(out, 1u);
    detail::put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<uint32_t>(t.rank()));
        for (size_t e : t.shape()) detail::put_u64(out, e);
        out.push_back(sizeof(R) == 4 ? char(1) : char(2));
        const size_t bytes = t.numel() * sizeof(R);
        const size_t off = out.size();
        out.resize(off + bytes);
        std::memcpy(out.data() + off, t.data(), bytes);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open for write: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint: short write: " + path.string());
}

template <typename R>
NamedTensors<R> load_tensors(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PrereqError("checkpoint: missing file: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::ByteReader r(buf);
    if (r.bytes(4, "magic") != "DSRT") {
        throw IoError("checkpoint: bad magic at byte offset 0 in " + path.string());
    }
    const uint32_t version = r.u32("version");
    if (version != 1) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
    }
    const uint32_t count = r.u32("entry count");
    NamedTensors<R> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name bytes");
        const uint32_t rank = r.u32("rank");
        if (rank > 8) {
            throw IoError("checkpoint: implausible rank " + std::to_string(rank) +
                          " at byte offset " + std::to_string(r.off - 4));
        }
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<size_t>(r.u64("extent"));
        const uint8_t tag = r.u8("dtype tag");
        if (tag != 1 && tag != 2) {
            throw IoError("checkpoint: unknown dtype tag " + std::to_string(tag) +
                          " at byte offset " + std::to_string(r.off - 1));
        }
        const size_t numel = shape_numel(shape);
        std::vector<R> data(numel);
        if (tag == 1) {
            std::string payload = r.bytes(numel * 4, "payload");
            for (size_t j = 0; j < numel; ++j) {
                float v;
                std::memcpy(&v, payload.data() + j * 4, 4);
                data[j] = static_cast<R>(v);
            }
        } else {
            std::string payload = r.bytes(numel * 8, "payload");
            for (size_t j = 0; j < numel; ++j) {
                double v;
                std::memcpy(&v, payload.data() + j * 8, 8);
                data[j] = static_cast<R>(v);
            }
        }
        out.emplace_back(std::move(name), Tensor<R>::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace dsrt
