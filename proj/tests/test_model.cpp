// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "dsrt/grad_check.hpp"
#include "dsrt/model.hpp"

using namespace dsrt;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.depth = 1;
    c.model_dim = 8;
    c.heads = 2;
    c.mlp_mult = 2;
    c.d_v = 3;
    c.d_a = 2;
    c.cond_vocab = 2;
    return c;
}

BlockLayout layout_of(size_t f, size_t r, size_t tv, size_t w) {
    BlockLayout l;
    l.frames_per_block = f;
    l.tokens_per_frame = r;
    l.num_video_frames = tv;
    l.lookahead_w = w;
    return l;
}

struct Latents {
    Tensor<double> video, audio;
};

Latents random_latents(const ModelConfig& mc, const BlockLayout& l, uint64_t seed) {
    Rng r(seed, 1);
    return {Tensor<double>::randn({l.num_video_frames, mc.d_v}, r),
            Tensor<double>::randn({l.audio_tokens(), mc.d_a}, r)};
}

}  // namespace

TEST_CASE("student W=0: future audio and video cannot touch past outputs, bitwise") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 4, 6, 0);
    auto model = DualStreamModel<double>::init(mc, 3);
    auto masks = student_masks(layout);
    auto lat = random_latents(mc, layout, 17);

    auto base = model.forward(lat.video, lat.audio, 0.5, 0.5, 0, masks);

    const size_t t_star = 3;  // 1-based frame bound
    auto video2 = lat.video.clone();
    auto audio2 = lat.audio.clone();
    for (size_t t = t_star; t < layout.num_video_frames; ++t) {
        for (size_t k = 0; k < mc.d_v; ++k) video2.at(t, k) += 1000.0;
    }
    for (size_t s = layout.tokens_per_frame * t_star; s < layout.audio_tokens(); ++s) {
        for (size_t k = 0; k < mc.d_a; ++k) audio2.at(s, k) += 1000.0;
    }
    auto moved = model.forward(video2, audio2, 0.5, 0.5, 0, masks);

    for (size_t t = 0; t < t_star; ++t) {
        for (size_t k = 0; k < mc.d_v; ++k) {
            CHECK(base.video.at(t, k) == moved.video.at(t, k));
        }
    }
    for (size_t s = 0; s < layout.tokens_per_frame * t_star; ++s) {
        for (size_t k = 0; k < mc.d_a; ++k) {
            CHECK(base.audio.at(s, k) == moved.audio.at(s, k));
        }
    }
    // and the perturbed tail did change
    CHECK(max_abs_diff(base.video, moved.video) > 1e-6);
}

TEST_CASE("look-ahead window admits exactly W frames of future audio") {
    auto mc = tiny_config();
    auto model = DualStreamModel<double>::init(mc, 3);
    {
        // zero-initialized residual branches are silent; make every path live
        Rng perturb(123, 0);
        for (auto& t : model.params.tensors) {
            for (size_t i = 0; i < t.numel(); ++i) t.at(i) += 0.05 * perturb.normal();
        }
    }
    auto layout1 = layout_of(1, 4, 6, 1);
    auto masks = student_masks(layout1);
    auto lat = random_latents(mc, layout1, 29);

    auto base = model.forward(lat.video, lat.audio, 0.5, 0.5, 0, masks);
    const size_t t_star = 3;
    // frame t sees audio through r*(t+1); perturb strictly beyond that
    auto audio2 = lat.audio.clone();
    for (size_t s = layout1.tokens_per_frame * (t_star + 1); s < layout1.audio_tokens(); ++s) {
        audio2.at(s, 0) += 500.0;
    }
    auto moved = model.forward(lat.video, audio2, 0.5, 0.5, 0, masks);
    for (size_t k = 0; k < mc.d_v; ++k) {
        CHECK(base.video.at(t_star - 1, k) == moved.video.at(t_star - 1, k));
    }
    // perturbing inside the window does change frame t
    auto audio3 = lat.audio.clone();
    audio3.at(layout1.tokens_per_frame * t_star, 0) += 500.0;  // first token of frame t+1
    auto moved2 = model.forward(lat.video, audio3, 0.5, 0.5, 0, masks);
    double diff = 0;
    for (size_t k = 0; k < mc.d_v; ++k) {
        diff += std::abs(base.video.at(t_star - 1, k) - moved2.video.at(t_star - 1, k));
    }
    CHECK(diff > 1e-9);
}

TEST_CASE("zero-depth config is a passthrough head, independent of masks") {
    auto mc = tiny_config();
    mc.depth = 0;
    auto layout = layout_of(1, 4, 5, 0);
    auto model = DualStreamModel<double>::init(mc, 9);
    auto lat = random_latents(mc, layout, 31);

    auto causal = model.forward(lat.video, lat.audio, 0.25, 0.25, 0, student_masks(layout));
    auto open = model.forward(lat.video, lat.audio, 0.25, 0.25, 0,
                              teacher_masks(layout.num_video_frames, layout.audio_tokens()));
    CHECK(causal.video.bit_equal(open.video));
    CHECK(causal.audio.bit_equal(open.audio));

    // audio output cannot depend on video input at depth 0
    auto video2 = lat.video.clone();
    video2.at(0, 0) += 100.0;
    auto moved = model.forward(video2, lat.audio, 0.25, 0.25, 0, student_masks(layout));
    CHECK(moved.audio.bit_equal(causal.audio));
}

TEST_CASE("teacher equals student when every mask is fully open") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 4, 5, 5);  // W = T_v
    auto model = DualStreamModel<double>::init(mc, 5);
    auto lat = random_latents(mc, layout, 41);

    auto open_cross = cross_modal_mask_v_from_a(layout);
    CHECK(open_cross.count_ones() == layout.num_video_frames * layout.audio_tokens());

    MaskSet student_open{
        Mask::ones(MaskKind::video_self, layout.num_video_frames, layout.num_video_frames),
        Mask::ones(MaskKind::audio_self, layout.audio_tokens(), layout.audio_tokens()),
        open_cross,
        Mask::ones(MaskKind::a_from_v, layout.audio_tokens(), layout.num_video_frames)};
    auto a = model.forward(lat.video, lat.audio, 0.7, 0.7, 1, student_open);
    auto b = model.forward(lat.video, lat.audio, 0.7, 0.7, 1,
                           teacher_masks(layout.num_video_frames, layout.audio_tokens()));
    CHECK(a.video.bit_equal(b.video));
    CHECK(a.audio.bit_equal(b.audio));
}

TEST_CASE("per-stream times change the right stream's conditioning") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 4, 4, 0);
    auto model = DualStreamModel<double>::init(mc, 13);
    auto lat = random_latents(mc, layout, 51);
    auto masks = student_masks(layout);
    auto a = model.forward(lat.video, lat.audio, 1.0, 0.0, 0, masks);
    auto b = model.forward(lat.video, lat.audio, 1.0, 0.5, 0, masks);
    CHECK(max_abs_diff(a.audio, b.audio) > 1e-9);  // audio time moved
}

TEST_CASE("forward_block with an empty cache equals forward on the block alone") {
    auto mc = tiny_config();
    auto layout = layout_of(2, 3, 2, 0);  // a single block
    auto model = DualStreamModel<double>::init(mc, 21);
    auto lat = random_latents(mc, layout, 61);
    auto masks = student_masks(layout);

    auto full = model.forward(lat.video, lat.audio, 0.4, 0.4, 1, masks);

    auto cache = KVCache<double>::make(mc.depth, layout.tokens_per_frame);
    StreamInputs<double> in;
    in.video = lat.video;
    in.audio = lat.audio;
    in.video_t.assign(2, 0.4);
    in.audio_t.assign(6, 0.4);
    in.video_idx = {0, 1};
    in.audio_idx = {0, 1, 2, 3, 4, 5};
    in.tokens_per_frame = 3;
    in.cond_id = 1;
    auto blk = model.forward_block(cache, in, masks, false);
    CHECK(blk.video.bit_equal(full.video));
    CHECK(blk.audio.bit_equal(full.audio));
}

TEST_CASE("two sequential cached calls match the full forward restricted to each block") {
    auto mc = tiny_config();
    const size_t f = 2, r = 3, tv = 4;
    auto layout = layout_of(f, r, tv, 0);
    auto model = DualStreamModel<double>::init(mc, 23);
    auto lat = random_latents(mc, layout, 71);
    auto square = student_masks(layout);
    const double t = 0.37;

    auto full = model.forward(lat.video, lat.audio, t, t, 0, square);

    auto cache = KVCache<double>::make(mc.depth, r);
    Velocities<double> got[2];
    for (size_t b = 0; b < 2; ++b) {
        StreamInputs<double> in;
        NoGradScope ng;
        in.video = slice_rows(lat.video, b * f, f);
        in.audio = slice_rows(lat.audio, b * f * r, f * r);
        in.video_t.assign(f, t);
        in.audio_t.assign(f * r, t);
        for (size_t i = 0; i < f; ++i) in.video_idx.push_back(b * f + i);
        for (size_t i = 0; i < f * r; ++i) in.audio_idx.push_back(b * f * r + i);
        in.tokens_per_frame = r;
        in.cond_id = 0;
        // rect masks = the matching rows of the square masks
        MaskSet rect;
        auto take_rows = [](const Mask& m, size_t row0, size_t nrows, size_t keys) {
            Mask out = Mask::empty(m.kind, nrows, keys);
            for (size_t q = 0; q < nrows; ++q)
                for (size_t k = 0; k < keys; ++k) out.set(q, k, m.at(row0 + q, k));
            return out;
        };
        const size_t kv = (b + 1) * f, ka = (b + 1) * f * r;
        rect.video_self = take_rows(square.video_self, b * f, f, kv);
        rect.audio_self = take_rows(square.audio_self, b * f * r, f * r, ka);
        rect.v_from_a = take_rows(square.v_from_a, b * f, f, ka);
        rect.a_from_v = take_rows(square.a_from_v, b * f * r, f * r, kv);
        got[b] = model.forward_block(cache, in, rect, true);
    }
    CHECK(cache.frames == tv);
    for (size_t b = 0; b < 2; ++b) {
        for (size_t i = 0; i < f; ++i) {
            for (size_t k = 0; k < mc.d_v; ++k) {
                CHECK(std::abs(got[b].video.at(i, k) - full.video.at(b * f + i, k)) <= 1e-10);
            }
        }
        for (size_t i = 0; i < f * r; ++i) {
            for (size_t k = 0; k < mc.d_a; ++k) {
                CHECK(std::abs(got[b].audio.at(i, k) - full.audio.at(b * f * r + i, k)) <= 1e-10);
            }
        }
    }
}

TEST_CASE("corrupted cache and discontiguous positions raise errors") {
    auto mc = tiny_config();
    auto model = DualStreamModel<double>::init(mc, 2);
    auto cache = KVCache<double>::make(mc.depth, 3);
    cache.frames = 5;  // lies: sites are empty
    StreamInputs<double> in;
    Rng r(1, 1);
    in.video = Tensor<double>::randn({1, mc.d_v}, r);
    in.audio = Tensor<double>::randn({3, mc.d_a}, r);
    in.video_t = {0.5};
    in.audio_t = {0.5, 0.5, 0.5};
    in.video_idx = {5};
    in.audio_idx = {15, 16, 17};
    in.tokens_per_frame = 3;
    MaskSet m{Mask::ones(MaskKind::video_self, 1, 6), Mask::ones(MaskKind::audio_self, 3, 18),
              Mask::ones(MaskKind::v_from_a, 1, 18), Mask::ones(MaskKind::a_from_v, 3, 6)};
    CHECK_THROWS_AS(model.forward_block(cache, in, m, false), NumericError);

    auto cache2 = KVCache<double>::make(mc.depth, 3);
    in.video_idx = {4};  // empty cache expects absolute 0
    CHECK_THROWS_AS(model.forward_block(cache2, in, m, false), NumericError);
}

TEST_CASE("mask/sequence shape mismatch raises a shape error") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 4, 4, 0);
    auto model = DualStreamModel<double>::init(mc, 2);
    auto lat = random_latents(mc, layout, 5);
    auto masks = student_masks(layout_of(1, 4, 5, 0));  // wrong T_v
    CHECK_THROWS_AS(model.forward(lat.video, lat.audio, 0.5, 0.5, 0, masks), ShapeError);
}

TEST_CASE("full forward+loss gradients pass the finite-difference oracle") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 2, 3, 1);
    auto model = DualStreamModel<double>::init(mc, 33);
    auto lat = random_latents(mc, layout, 91);
    auto masks = student_masks(layout);
    Rng tr(7, 7);
    auto target_v = Tensor<double>::randn({layout.num_video_frames, mc.d_v}, tr);
    auto target_a = Tensor<double>::randn({layout.audio_tokens(), mc.d_a}, tr);

    auto f = [&]() {
        auto out = model.forward(lat.video, lat.audio, 0.6, 0.3, 1, masks);
        return add(mse(out.video, target_v), mse(out.audio, target_a));
    };
    auto rep = grad_check<double>(f, model.params.tensors, 1e-5, 1e-4);
    INFO("max rel err ", rep.max_rel_err, " at tensor ", rep.worst_tensor, " coord ",
         rep.worst_coord);
    CHECK(rep.pass);
}

TEST_CASE("model save/load round trip and config-hash refusal") {
    auto mc = tiny_config();
    auto model = DualStreamModel<double>::init(mc, 77);
    auto dir = std::filesystem::temp_directory_path() / "dsrt_model_tests";
    std::filesystem::create_directories(dir);
    const auto base = dir / "ckpt";
    save_model(model, base);
    auto back = load_model<double>(base, &mc);
    CHECK(back.params.hash_all() == model.params.hash_all());

    ModelConfig other = mc;
    other.model_dim = 16;
    CHECK_THROWS_AS(load_model<double>(base, &other), ConfigError);
}

TEST_CASE("sinusoidal positional variant runs and differs from rotary") {
    auto mc = tiny_config();
    auto layout = layout_of(1, 4, 4, 0);
    auto rot = DualStreamModel<double>::init(mc, 3);
    auto mc2 = mc;
    mc2.positional = ModelConfig::Positional::sinusoidal;
    auto sin_model = DualStreamModel<double>::init(mc2, 3);  // same seed, same params
    auto lat = random_latents(mc, layout, 15);
    auto masks = student_masks(layout);
    auto a = rot.forward(lat.video, lat.audio, 0.5, 0.5, 0, masks);
    auto b = sin_model.forward(lat.video, lat.audio, 0.5, 0.5, 0, masks);
    CHECK(max_abs_diff(a.video, b.video) > 1e-9);
}
