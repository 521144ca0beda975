// SPDX-License-Identifier: Apache-2.0
//
// Block-wise asynchronous streaming. At step t the video branch denoises one
// block of video noise while the audio branch denoises an expanded input:
// the current audio block plus W frames of look-ahead noise. The look-ahead
// segment is returned as a provisional block, serves only as cross-modal
// context, and is never committed or cached; its noise realization is the
// same one the next step denoises as its current block, so discarding and
// regenerating it reproduces the committed stream exactly. After each block,
// the committed clean latents are re-encoded under committed-only
// visibility (the W=0 masks) and inserted into the rolling KV cache.
#pragma once

#include <chrono>
#include <functional>
#include <vector>

#include "dsrt/flow.hpp"
#include "dsrt/masks.hpp"
#include "dsrt/model.hpp"

namespace dsrt {

template <typename R>
Tensor<R> video_frame_noise(uint64_t seed, size_t frame_abs, size_t d_v) {
    Rng rng = Rng(seed, 0x766E6F69ull).stream(frame_abs);
    return Tensor<R>::randn({1, d_v}, rng);
}

template <typename R>
Tensor<R> audio_frame_noise(uint64_t seed, size_t frame_abs, size_t r, size_t d_a) {
    Rng rng = Rng(seed, 0x616E6F69ull).stream(frame_abs);
    return Tensor<R>::randn({r, d_a}, rng);
}

// Rectangular masks for a set of active query rows over [history ++ active]
// keys, all indices absolute and 1-based. window_of maps an absolute video
// frame to its look-ahead window (committed rows re-encode with W=0, active
// rows with the configured W).
inline MaskSet build_stream_masks(size_t frames_per_block, size_t tokens_per_frame,
                                  const std::vector<size_t>& q_frames,
                                  const std::vector<size_t>& q_tokens,
                                  const std::vector<size_t>& k_frames,
                                  const std::vector<size_t>& k_tokens,
                                  const std::function<size_t(size_t)>& window_of,
                                  const std::function<size_t(size_t)>& audio_window_of) {
    MaskSet ms;
    const size_t f = frames_per_block, r = tokens_per_frame;
    const size_t fb = r * f;  // audio tokens per block
    ms.video_self = Mask::empty(MaskKind::video_self, q_frames.size(), k_frames.size());
    ms.audio_self = Mask::empty(MaskKind::audio_self, q_tokens.size(), k_tokens.size());
    ms.v_from_a = Mask::empty(MaskKind::v_from_a, q_frames.size(), k_tokens.size());
    ms.a_from_v = Mask::empty(MaskKind::a_from_v, q_tokens.size(), k_frames.size());
    for (size_t q = 0; q < q_frames.size(); ++q) {
        for (size_t k = 0; k < k_frames.size(); ++k) {
            ms.video_self.set(q, k, visible_same_or_earlier_block(k_frames[k], q_frames[q], f));
        }
        const size_t w = window_of(q_frames[q]);
        for (size_t k = 0; k < k_tokens.size(); ++k) {
            ms.v_from_a.set(q, k, visible_v_from_a(q_frames[q], k_tokens[k], r, w));
        }
    }
    for (size_t q = 0; q < q_tokens.size(); ++q) {
        for (size_t k = 0; k < k_tokens.size(); ++k) {
            ms.audio_self.set(q, k, visible_same_or_earlier_block(k_tokens[k], q_tokens[q], fb));
        }
        const size_t aw = audio_window_of(q_tokens[q]);
        for (size_t k = 0; k < k_frames.size(); ++k) {
            ms.a_from_v.set(q, k, visible_a_from_v(q_tokens[q], k_frames[k], r, aw));
        }
    }
    return ms;
}

struct StreamOptions {
    size_t blocks = 4;  // K
    size_t frames_per_block = 1;
    size_t tokens_per_frame = 5;
    size_t window = 1;          // W, in video frames
    size_t capacity_blocks = 8; // 0 = unlimited
    size_t ladder_steps = 4;
    size_t cond_id = 0;
    uint64_t seed = 1;
};

template <typename R>
struct StreamState {
    StreamOptions opts;
    size_t step = 0;  // completed blocks
    KVCache<R> cache;
    std::vector<Tensor<R>> committed_video;  // one tensor per block
    std::vector<Tensor<R>> committed_audio;
    Tensor<R> provisional;  // invalid when absent
    unsigned long long last_step_active_flops = 0;

    static StreamState make(const StreamOptions& o) {
        StreamState s;
        s.opts = o;
        const size_t cap = o.capacity_blocks == 0 ? SIZE_MAX
                                                  : o.capacity_blocks * o.frames_per_block;
        s.cache = KVCache<R>::make(0, o.tokens_per_frame, cap);
        return s;
    }
};

template <typename R>
struct StepOutputs {
    Tensor<R> video;        // committed V_t
    Tensor<R> audio;        // committed A_t
    Tensor<R> provisional;  // look-ahead block, invalid at the final step
};

struct BlockRecord {
    size_t block = 0;
    double wall_ms = 0;
    size_t cache_frames = 0;
    // every attention pair the instrumented ops executed for this block
    unsigned long long attn_flops = 0;
    // analytic attention cost attributed to the block's own query rows
    // (identical to attn_flops on the cached path, where history is never
    // re-queried; the marginal-cost metric for the full-recompute baseline)
    unsigned long long attn_flops_active = 0;
};

// Analytic attention flops for the rows [row0, row0+nrows) of a mask:
// (4*head_dim + 4) per visible (query, key, head) triple, matching the
// instrumented counter in ops.hpp.
inline unsigned long long mask_attention_flops(const Mask& m, size_t row0, size_t nrows,
                                               size_t heads, size_t head_dim) {
    unsigned long long pairs = 0;
    for (size_t q = row0; q < row0 + nrows; ++q) {
        for (size_t k = 0; k < m.key_len; ++k) pairs += m.at(q, k);
    }
    return pairs * heads * (4ull * head_dim + 4ull);
}

// One model call's attention flops attributed to the given active rows,
// including the single-key condition sites.
inline unsigned long long call_attention_flops(const MaskSet& ms, size_t depth, size_t heads,
                                               size_t head_dim, size_t row0_v, size_t nrows_v,
                                               size_t row0_a, size_t nrows_a) {
    unsigned long long per_layer = 0;
    per_layer += mask_attention_flops(ms.video_self, row0_v, nrows_v, heads, head_dim);
    per_layer += mask_attention_flops(ms.audio_self, row0_a, nrows_a, heads, head_dim);
    per_layer += mask_attention_flops(ms.v_from_a, row0_v, nrows_v, heads, head_dim);
    per_layer += mask_attention_flops(ms.a_from_v, row0_a, nrows_a, heads, head_dim);
    per_layer += (nrows_v + nrows_a) * heads * (4ull * head_dim + 4ull);  // cond sites
    return per_layer * depth;
}

namespace detail {
inline std::vector<size_t> iota1(size_t first_abs0, size_t n) {
    std::vector<size_t> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = first_abs0 + i + 1;  // 1-based
    return v;
}
}  // namespace detail

// One streaming step on the rolling cache. Gradients, if a graph is active,
// flow through the block's denoising ladder only; the commit pass runs
// detached, so the cache never carries history gradients.
template <typename R>
StepOutputs<R> stream_step(StreamState<R>& state, const DualStreamModel<R>& model,
                           FlopCounter* fc = nullptr) {
    const auto& o = state.opts;
    if (state.step >= o.blocks) throw Error("stream_step: all blocks already generated");
    if (state.cache.num_layers == 0) {
        state.cache.num_layers = model.cfg.depth;
        state.cache.layers.resize(model.cfg.depth);
    }
    const size_t f = o.frames_per_block, r = o.tokens_per_frame;
    const size_t b = state.step;
    const size_t frame0 = b * f;                      // absolute 0-based
    const size_t total_frames = o.blocks * f;
    const size_t lookahead = std::min(o.window, total_frames - (b + 1) * f);
    const size_t n_active_frames = f + lookahead;     // audio-side frames

    // per-frame noise; the look-ahead realization is re-drawn identically at
    // the next step
    std::vector<Tensor<R>> vno, ano;
    for (size_t i = 0; i < f; ++i) {
        vno.push_back(video_frame_noise<R>(o.seed, frame0 + i, model.cfg.d_v));
    }
    for (size_t i = 0; i < n_active_frames; ++i) {
        ano.push_back(audio_frame_noise<R>(o.seed, frame0 + i, r, model.cfg.d_a));
    }
    Tensor<R> x_v = concat_rows(vno);
    Tensor<R> x_a = concat_rows(ano);

    const auto q_frames = detail::iota1(frame0, f);
    const auto q_tokens = detail::iota1(frame0 * r, n_active_frames * r);
    const size_t hist_f = state.cache.frames;
    std::vector<size_t> k_frames = detail::iota1(state.cache.base_frame, hist_f);
    {
        auto act = detail::iota1(frame0, f);
        k_frames.insert(k_frames.end(), act.begin(), act.end());
    }
    std::vector<size_t> k_tokens = detail::iota1(state.cache.base_frame * r, hist_f * r);
    {
        auto act = detail::iota1(frame0 * r, n_active_frames * r);
        k_tokens.insert(k_tokens.end(), act.begin(), act.end());
    }
    const auto denoise_masks =
        build_stream_masks(f, r, q_frames, q_tokens, k_frames, k_tokens,
                           [&](size_t) { return o.window; },
                           [&](size_t) { return o.window; });
    const size_t dh = model.cfg.model_dim / model.cfg.heads;
    state.last_step_active_flops =
        o.ladder_steps * call_attention_flops(denoise_masks, model.cfg.depth, model.cfg.heads,
                                              dh, 0, f, 0, n_active_frames * r);

    const auto grid = FlowSchedule::grid(o.ladder_steps);
    for (size_t i = 0; i < grid.size(); ++i) {
        const double tau = grid[i];
        const double next = i + 1 < grid.size() ? grid[i + 1] : 0.0;
        StreamInputs<R> in;
        in.video = x_v;
        in.audio = x_a;
        in.video_t.assign(f, tau);
        in.audio_t.assign(n_active_frames * r, tau);
        in.video_idx.assign(q_frames.size(), 0);
        for (size_t j = 0; j < q_frames.size(); ++j) in.video_idx[j] = q_frames[j] - 1;
        in.audio_idx.assign(q_tokens.size(), 0);
        for (size_t j = 0; j < q_tokens.size(); ++j) in.audio_idx[j] = q_tokens[j] - 1;
        in.tokens_per_frame = r;
        in.cond_id = o.cond_id;
        auto v = model.forward_block(state.cache, in, denoise_masks, false, fc);
        x_v = sub(x_v, scale(v.video, tau - next));
        x_a = sub(x_a, scale(v.audio, tau - next));
    }

    StepOutputs<R> out;
    out.video = x_v;
    out.audio = slice_rows(x_a, 0, f * r);
    if (lookahead > 0) out.provisional = slice_rows(x_a, f * r, lookahead * r);

    // commit pass: detached clean latents at t = 0 under committed-only
    // visibility; look-ahead excluded
    {
        NoGradScope ng;
        StreamInputs<R> in;
        in.video = stop_gradient(out.video);
        in.audio = stop_gradient(out.audio);
        in.video_t.assign(f, 0.0);
        in.audio_t.assign(f * r, 0.0);
        in.video_idx.assign(f, 0);
        for (size_t j = 0; j < f; ++j) in.video_idx[j] = frame0 + j;
        in.audio_idx.assign(f * r, 0);
        for (size_t j = 0; j < f * r; ++j) in.audio_idx[j] = frame0 * r + j;
        in.tokens_per_frame = r;
        in.cond_id = o.cond_id;
        const auto commit_tokens = detail::iota1(frame0 * r, f * r);
        std::vector<size_t> ck_tokens = detail::iota1(state.cache.base_frame * r, hist_f * r);
        ck_tokens.insert(ck_tokens.end(), commit_tokens.begin(), commit_tokens.end());
        const auto commit_masks =
            build_stream_masks(f, r, q_frames, commit_tokens, k_frames, ck_tokens,
                               [](size_t) { return size_t(0); },
                               [](size_t) { return size_t(0); });
        state.last_step_active_flops += call_attention_flops(
            commit_masks, model.cfg.depth, model.cfg.heads, dh, 0, f, 0, f * r);
        model.forward_block(state.cache, in, commit_masks, true, fc);
    }
    if (state.cache.frames > state.cache.capacity_frames) {
        evict(state.cache, state.cache.capacity_frames);
    }

    state.committed_video.push_back(out.video);
    state.committed_audio.push_back(out.audio);
    state.provisional = out.provisional;
    state.step += 1;
    return out;
}

template <typename R>
struct StreamResult {
    Tensor<R> video;  // K*F x d_v
    Tensor<R> audio;  // K*F*r x d_a
    std::vector<Tensor<R>> video_blocks, audio_blocks;
    std::vector<BlockRecord> records;
};

enum class StreamMode { cached, full_recompute };

// Full-recompute reference: identical schedule and noise, but every model
// call re-encodes the whole committed prefix from the stored clean latents
// (times 0, committed-only visibility) instead of reading a cache. Per-block
// attention cost therefore grows linearly in the block index.
template <typename R>
StreamResult<R> run_stream_full(const DualStreamModel<R>& model, const StreamOptions& o,
                                FlopCounter* fc = nullptr) {
    NoGradScope ng;
    StreamResult<R> res;
    const size_t f = o.frames_per_block, r = o.tokens_per_frame;
    const size_t total_frames = o.blocks * f;
    std::vector<Tensor<R>> committed_v, committed_a;
    FlopCounter local;
    FlopCounter* counter = fc ? fc : &local;

    for (size_t b = 0; b < o.blocks; ++b) {
        const auto t0 = std::chrono::steady_clock::now();
        const unsigned long long flops0 = counter->attention_flops;
        const size_t frame0 = b * f;
        const size_t lookahead = std::min(o.window, total_frames - (b + 1) * f);
        const size_t n_active_frames = f + lookahead;

        std::vector<Tensor<R>> vno, ano;
        for (size_t i = 0; i < f; ++i) {
            vno.push_back(video_frame_noise<R>(o.seed, frame0 + i, model.cfg.d_v));
        }
        for (size_t i = 0; i < n_active_frames; ++i) {
            ano.push_back(audio_frame_noise<R>(o.seed, frame0 + i, r, model.cfg.d_a));
        }
        Tensor<R> x_v = concat_rows(vno);
        Tensor<R> x_a = concat_rows(ano);

        const size_t nv_all = frame0 + f;                      // committed + current block
        const size_t na_all = (frame0 + n_active_frames) * r;  // committed + current + look-ahead
        const auto all_frames = detail::iota1(0, nv_all);
        const auto all_tokens = detail::iota1(0, na_all);
        const auto masks = build_stream_masks(
            f, r, all_frames, all_tokens, all_frames, all_tokens,
            [&](size_t frame_abs1) { return frame_abs1 > frame0 ? o.window : size_t(0); },
            [&](size_t tok_abs1) { return tok_abs1 > frame0 * r ? o.window : size_t(0); });
        const size_t dh = model.cfg.model_dim / model.cfg.heads;
        const unsigned long long active_flops =
            o.ladder_steps * call_attention_flops(masks, model.cfg.depth, model.cfg.heads, dh,
                                                  frame0, f, frame0 * r, n_active_frames * r);

        const auto grid = FlowSchedule::grid(o.ladder_steps);
        for (size_t i = 0; i < grid.size(); ++i) {
            const double tau = grid[i];
            const double next = i + 1 < grid.size() ? grid[i + 1] : 0.0;
            StreamInputs<R> in;
            std::vector<Tensor<R>> vparts = committed_v;
            vparts.push_back(x_v);
            std::vector<Tensor<R>> aparts = committed_a;
            aparts.push_back(x_a);
            in.video = concat_rows(vparts);
            in.audio = concat_rows(aparts);
            in.video_t.assign(nv_all, 0.0);
            for (size_t j = frame0; j < nv_all; ++j) in.video_t[j] = tau;
            in.audio_t.assign(na_all, 0.0);
            for (size_t j = frame0 * r; j < na_all; ++j) in.audio_t[j] = tau;
            in.video_idx.resize(nv_all);
            for (size_t j = 0; j < nv_all; ++j) in.video_idx[j] = j;
            in.audio_idx.resize(na_all);
            for (size_t j = 0; j < na_all; ++j) in.audio_idx[j] = j;
            in.tokens_per_frame = r;
            in.cond_id = o.cond_id;
            auto v = model.forward_ctx(in, masks, nullptr, false, counter);
            auto v_blk = slice_rows(v.video, frame0, f);
            auto a_blk = slice_rows(v.audio, frame0 * r, n_active_frames * r);
            x_v = sub(x_v, scale(v_blk, tau - next));
            x_a = sub(x_a, scale(a_blk, tau - next));
        }
        committed_v.push_back(x_v);
        committed_a.push_back(slice_rows(x_a, 0, f * r));
        res.video_blocks.push_back(committed_v.back());
        res.audio_blocks.push_back(committed_a.back());

        BlockRecord rec;
        rec.block = b;
        rec.cache_frames = frame0;
        rec.attn_flops = counter->attention_flops - flops0;
        rec.attn_flops_active = active_flops;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        res.records.push_back(rec);
    }
    res.video = concat_rows(committed_v);
    res.audio = concat_rows(committed_a);
    return res;
}

template <typename R>
StreamResult<R> run_stream(const DualStreamModel<R>& model, const StreamOptions& o,
                           StreamMode mode = StreamMode::cached, FlopCounter* fc = nullptr) {
    if (o.blocks == 0) throw ConfigError("stream: blocks must be >= 1");
    if (mode == StreamMode::full_recompute) return run_stream_full(model, o, fc);
    NoGradScope ng;
    StreamResult<R> res;
    auto state = StreamState<R>::make(o);
    FlopCounter local;
    FlopCounter* counter = fc ? fc : &local;
    for (size_t b = 0; b < o.blocks; ++b) {
        const auto t0 = std::chrono::steady_clock::now();
        const unsigned long long flops0 = counter->attention_flops;
        const size_t hist = state.cache.frames;
        stream_step(state, model, counter);
        BlockRecord rec;
        rec.block = b;
        rec.cache_frames = hist;
        rec.attn_flops = counter->attention_flops - flops0;
        rec.attn_flops_active = state.last_step_active_flops;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        res.records.push_back(rec);
    }
    res.video_blocks = state.committed_video;
    res.audio_blocks = state.committed_audio;
    res.video = concat_rows(state.committed_video);
    res.audio = concat_rows(state.committed_audio);
    return res;
}

}  // namespace dsrt
