// SPDX-License-Identifier: Apache-2.0
//
// Attention mask construction. Frames and tokens are 1-indexed in every
// predicate; one video frame t is aligned with audio tokens
// r(t-1)+1 .. rt. The cross-modal video<-audio mask with look-ahead window
// W (in video frames) admits key token s for query frame t iff
// s <= r(t+W), clipped at the sequence end. W = 0 recovers the strict
// block-causal pattern. Masks are materialized bitmaps at desk scale.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dsrt/errors.hpp"

namespace dsrt {

struct BlockLayout {
    size_t frames_per_block = 1;   // F
    size_t tokens_per_frame = 5;   // r
    size_t num_video_frames = 16;  // T_v
    size_t lookahead_w = 0;        // W, in video frames

    size_t audio_tokens() const { return tokens_per_frame * num_video_frames; }
    size_t num_blocks() const { return num_video_frames / frames_per_block; }

    void validate() const {
        if (frames_per_block == 0 || tokens_per_frame == 0 || num_video_frames == 0) {
            throw ConfigError("layout: F, r, T_v must be positive");
        }
        if (num_video_frames % frames_per_block != 0) {
            throw ConfigError("layout: T_v=" + std::to_string(num_video_frames) +
                              " not divisible by F=" + std::to_string(frames_per_block));
        }
        if (lookahead_w > num_video_frames) {
            throw ConfigError("layout: W=" + std::to_string(lookahead_w) + " exceeds T_v=" +
                              std::to_string(num_video_frames));
        }
    }
};

enum class MaskKind : uint8_t {
    video_self = 0,
    audio_self = 1,
    cond_cross = 2,
    v_from_a = 3,
    a_from_v = 4,
};

enum class Stream { video, audio };

// Visibility predicates over 1-based absolute indices. These are the single
// source of truth shared by the square builders below and the rectangular
// streaming masks.
inline bool visible_v_from_a(size_t frame, size_t token, size_t r, size_t w) {
    return token <= r * (frame + w);
}
// Audio queries see video receded by the look-ahead window: an audio token
// revealed to video frame t as look-ahead context must not itself embed
// video frames beyond t, or the revelation would leak future video into
// past video outputs through the token's own features. At W = 0 this is
// plain strict causality, frame <= ceil(token / r). During streaming the
// look-ahead span attends exactly the committed-plus-current video, which
// is the same rule.
inline bool visible_a_from_v(size_t token, size_t frame, size_t r, size_t w) {
    const size_t aligned = (token + r - 1) / r;  // ceil(token / r)
    return frame + w <= aligned;
}
inline bool visible_same_or_earlier_block(size_t key, size_t query, size_t block) {
    return (key - 1) / block <= (query - 1) / block;
}

struct Mask {
    MaskKind kind = MaskKind::video_self;
    size_t query_len = 0;
    size_t key_len = 0;
    std::vector<uint8_t> bits;  // row-major, 1 = attend

    static Mask empty(MaskKind kind, size_t q, size_t k) {
        Mask m;
        m.kind = kind;
        m.query_len = q;
        m.key_len = k;
        m.bits.assign(q * k, 0);
        return m;
    }
    static Mask ones(MaskKind kind, size_t q, size_t k) {
        Mask m = empty(kind, q, k);
        for (auto& b : m.bits) b = 1;
        return m;
    }

    bool at(size_t q, size_t k) const { return bits[q * key_len + k] != 0; }
    void set(size_t q, size_t k, bool v) { bits[q * key_len + k] = v ? 1 : 0; }

    size_t count_ones() const {
        size_t n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }

    bool operator==(const Mask& o) const {
        return kind == o.kind && query_len == o.query_len && key_len == o.key_len &&
               bits == o.bits;
    }
};

// Cross-modal mask, video queries over audio keys, with the look-ahead
// window W. Note for single-pass use: if r*(t+W) falls inside an audio
// block, the revealed tokens' features still reflect their unrevealed
// block-mates through within-block bidirectional self-attention; strict
// no-leakage therefore needs W to be a multiple of frames_per_block (always
// true at one token per frame). Streaming clips the look-ahead span, so
// inference never exposes unrevealed tokens at all.
inline Mask cross_modal_mask_v_from_a(const BlockLayout& layout) {
    layout.validate();
    const size_t tv = layout.num_video_frames, ta = layout.audio_tokens();
    Mask m = Mask::empty(MaskKind::v_from_a, tv, ta);
    for (size_t t = 1; t <= tv; ++t) {
        for (size_t s = 1; s <= ta; ++s) {
            m.set(t - 1, s - 1,
                  visible_v_from_a(t, s, layout.tokens_per_frame, layout.lookahead_w));
        }
    }
    return m;
}

// Audio queries over video keys: strictly causal into video, no look-ahead.
inline Mask cross_modal_mask_a_from_v(const BlockLayout& layout) {
    layout.validate();
    const size_t tv = layout.num_video_frames, ta = layout.audio_tokens();
    Mask m = Mask::empty(MaskKind::a_from_v, ta, tv);
    for (size_t s = 1; s <= ta; ++s) {
        for (size_t t = 1; t <= tv; ++t) {
            m.set(s - 1, t - 1,
                  visible_a_from_v(s, t, layout.tokens_per_frame, layout.lookahead_w));
        }
    }
    return m;
}

// Single-stream block-causal mask; attention within a block is bidirectional.
inline Mask self_mask(const BlockLayout& layout, Stream stream) {
    layout.validate();
    const bool video = stream == Stream::video;
    const size_t n = video ? layout.num_video_frames : layout.audio_tokens();
    const size_t block =
        video ? layout.frames_per_block : layout.tokens_per_frame * layout.frames_per_block;
    Mask m = Mask::empty(video ? MaskKind::video_self : MaskKind::audio_self, n, n);
    for (size_t q = 1; q <= n; ++q) {
        for (size_t k = 1; k <= n; ++k) {
            m.set(q - 1, k - 1, visible_same_or_earlier_block(k, q, block));
        }
    }
    return m;
}

// True iff the layout's cross-modal mask equals the strict block-causal
// pattern built independently by per-frame enumeration of synchronous and
// past token ranges.
inline bool strict_equivalence_check(const BlockLayout& layout) {
    layout.validate();
    const size_t tv = layout.num_video_frames, ta = layout.audio_tokens();
    const size_t r = layout.tokens_per_frame;
    Mask strict = Mask::empty(MaskKind::v_from_a, tv, ta);
    for (size_t t = 1; t <= tv; ++t) {
        // frame t sees every token of frames 1..t, nothing later
        for (size_t f = 1; f <= t; ++f) {
            for (size_t s = r * (f - 1) + 1; s <= r * f; ++s) strict.set(t - 1, s - 1, true);
        }
    }
    return cross_modal_mask_v_from_a(layout) == strict;
}

inline Mask cond_mask(size_t query_len, size_t key_len = 1) {
    return Mask::ones(MaskKind::cond_cross, query_len, key_len);
}

// ---------------------------------------------------------------------------
// Mask file: magic "MASK", u32 version (=1), u8 kind, u32 query_len,
// u32 key_len, then a row-major bitmap. Bits are packed LSB-first and each
// row is padded to a byte boundary, so a row occupies ceil(key_len/8) bytes.
// ---------------------------------------------------------------------------

inline void dump_mask(const Mask& m, const std::filesystem::path& path) {
    std::string out;
    auto put_u32 = [&out](uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    out += "MASK";
    put_u32(1u);  // version
    out.push_back(static_cast<char>(m.kind));
    put_u32(static_cast<uint32_t>(m.query_len));
    put_u32(static_cast<uint32_t>(m.key_len));
    const size_t row_bytes = (m.key_len + 7) / 8;
    for (size_t q = 0; q < m.query_len; ++q) {
        for (size_t b = 0; b < row_bytes; ++b) {
            uint8_t byte = 0;
            for (size_t i = 0; i < 8; ++i) {
                const size_t k = b * 8 + i;
                if (k < m.key_len && m.at(q, k)) byte |= static_cast<uint8_t>(1u << i);
            }
            out.push_back(static_cast<char>(byte));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("mask: cannot open for write: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("mask: short write: " + path.string());
}

inline Mask load_mask(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PrereqError("mask: missing file: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    auto need = [&](size_t n, const char* what) {
        if (off + n > buf.size()) {
            throw IoError(std::string("mask: truncated while reading ") + what +
                          " at byte offset " + std::to_string(off));
        }
    };
    need(4, "magic");
    if (buf.substr(0, 4) != "MASK") throw IoError("mask: bad magic at byte offset 0");
    off = 4;
    auto get_u32 = [&](const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        }
        off += 4;
        return v;
    };
    const uint32_t version = get_u32("version");
    if (version != 1) {
        throw IoError("mask: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
    }
    need(1, "kind");
    const uint8_t kind = static_cast<uint8_t>(buf[off++]);
    if (kind > 4) {
        throw IoError("mask: unknown kind tag " + std::to_string(kind) + " at byte offset " +
                      std::to_string(off - 1));
    }
    const uint32_t q = get_u32("query_len");
    const uint32_t k = get_u32("key_len");
    Mask m = Mask::empty(static_cast<MaskKind>(kind), q, k);
    const size_t row_bytes = (static_cast<size_t>(k) + 7) / 8;
    for (size_t qi = 0; qi < q; ++qi) {
        need(row_bytes, "bitmap row");
        for (size_t ki = 0; ki < k; ++ki) {
            const uint8_t byte = static_cast<uint8_t>(buf[off + ki / 8]);
            m.set(qi, ki, (byte >> (ki % 8)) & 1u);
        }
        off += row_bytes;
    }
    return m;
}

}  // namespace dsrt
