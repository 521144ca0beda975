// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <iostream>

#include "dsrt/streaming.hpp"

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

DualStreamModel<double> live_model(const ModelConfig& mc, uint64_t seed) {
    auto m = DualStreamModel<double>::init(mc, seed);
    Rng perturb(seed ^ 0xABCDull, 0);
    for (auto& t : m.params.tensors) {
        for (size_t i = 0; i < t.numel(); ++i) t.at(i) += 0.05 * perturb.normal();
    }
    return m;
}

StreamOptions opts(size_t k, size_t f, size_t r, size_t w, uint64_t seed,
                   size_t capacity_blocks = 0) {
    StreamOptions o;
    o.blocks = k;
    o.frames_per_block = f;
    o.tokens_per_frame = r;
    o.window = w;
    o.capacity_blocks = capacity_blocks;
    o.seed = seed;
    return o;
}

}  // namespace

TEST_CASE("first step bookkeeping: outputs and cache growth") {
    auto mc = tiny_config();
    auto model = live_model(mc, 1);
    auto o = opts(3, 2, 3, 1, 11);
    auto state = StreamState<double>::make(o);
    NoGradScope ng;
    auto out = stream_step(state, model);
    CHECK(out.video.rows() == 2);
    CHECK(out.audio.rows() == 6);
    REQUIRE(out.provisional.valid());
    CHECK(out.provisional.rows() == 3);  // W=1 frame of look-ahead tokens
    CHECK(state.cache.frames == 2);
    CHECK(state.cache.layers[0].self_a.len() == 6);
    CHECK(state.step == 1);
}

TEST_CASE("provisional block is regenerated, not committed") {
    auto mc = tiny_config();
    auto model = live_model(mc, 2);
    const size_t runs = 32;
    size_t differing = 0;
    double mean_dev = 0;
    for (size_t s = 0; s < runs; ++s) {
        auto o = opts(4, 1, 3, 1, 100 + s);
        auto state = StreamState<double>::make(o);
        NoGradScope ng;
        auto first = stream_step(state, model);
        REQUIRE(first.provisional.valid());
        auto second = stream_step(state, model);
        const double dev = max_abs_diff(first.provisional, second.audio);
        mean_dev += dev;
        differing += dev > 1e-12;
    }
    mean_dev /= runs;
    // provisional look-ahead is transient conditioning; the commitment pass
    // re-denoises it with one more block of context
    CHECK(differing == runs);
    std::cout << "[info] provisional vs committed mean |diff| over " << runs
              << " runs: " << mean_dev << "\n";
    CHECK(mean_dev > 0);
}

TEST_CASE("deleting the provisional block does not change the committed stream") {
    auto mc = tiny_config();
    auto model = live_model(mc, 3);
    auto o = opts(3, 1, 3, 1, 77);
    NoGradScope ng;
    auto s1 = StreamState<double>::make(o);
    auto s2 = StreamState<double>::make(o);
    stream_step(s1, model);
    stream_step(s2, model);
    // corrupt the stored provisional block of s2
    REQUIRE(s2.provisional.valid());
    for (size_t i = 0; i < s2.provisional.numel(); ++i) s2.provisional.at(i) = -999.0;
    auto a1 = stream_step(s1, model);
    auto a2 = stream_step(s2, model);
    CHECK(a1.video.bit_equal(a2.video));
    CHECK(a1.audio.bit_equal(a2.audio));
}

TEST_CASE("W=0 stream matches an independent strict block-causal reference bit-for-bit") {
    auto mc = tiny_config();
    auto model = live_model(mc, 4);
    const size_t k = 3, f = 1, r = 3;
    auto o = opts(k, f, r, 0, 555);
    auto streamed = run_stream(model, o);

    // reference: plain block loop, no look-ahead machinery, no cache; strict
    // masks built inline, full recompute from committed latents
    NoGradScope ng;
    std::vector<Tensor<double>> cv, ca;
    const auto grid = FlowSchedule::grid(o.ladder_steps);
    for (size_t b = 0; b < k; ++b) {
        Tensor<double> x_v = video_frame_noise<double>(o.seed, b, mc.d_v);
        std::vector<Tensor<double>> an;
        for (size_t i = 0; i < f; ++i) {
            an.push_back(audio_frame_noise<double>(o.seed, b * f + i, r, mc.d_a));
        }
        Tensor<double> x_a = concat_rows(an);
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            const double tau = grid[gi];
            const double next = gi + 1 < grid.size() ? grid[gi + 1] : 0.0;
            std::vector<Tensor<double>> vp = cv;
            vp.push_back(x_v);
            std::vector<Tensor<double>> ap = ca;
            ap.push_back(x_a);
            StreamInputs<double> in;
            in.video = concat_rows(vp);
            in.audio = concat_rows(ap);
            const size_t nv = b + 1, na = (b + 1) * r;
            in.video_t.assign(nv, 0.0);
            in.video_t[b] = tau;
            in.audio_t.assign(na, 0.0);
            for (size_t j = b * r; j < na; ++j) in.audio_t[j] = tau;
            in.video_idx.resize(nv);
            for (size_t j = 0; j < nv; ++j) in.video_idx[j] = j;
            in.audio_idx.resize(na);
            for (size_t j = 0; j < na; ++j) in.audio_idx[j] = j;
            in.tokens_per_frame = r;
            in.cond_id = o.cond_id;
            // strict masks: block-causal self, s <= r t cross, causal a<-v
            MaskSet ms;
            ms.video_self = Mask::empty(MaskKind::video_self, nv, nv);
            for (size_t q = 1; q <= nv; ++q)
                for (size_t kk = 1; kk <= nv; ++kk) ms.video_self.set(q - 1, kk - 1, kk <= q);
            ms.audio_self = Mask::empty(MaskKind::audio_self, na, na);
            for (size_t q = 1; q <= na; ++q) {
                for (size_t kk = 1; kk <= na; ++kk) {
                    ms.audio_self.set(q - 1, kk - 1, (kk - 1) / r <= (q - 1) / r);
                }
            }
            ms.v_from_a = Mask::empty(MaskKind::v_from_a, nv, na);
            for (size_t q = 1; q <= nv; ++q)
                for (size_t s = 1; s <= na; ++s) ms.v_from_a.set(q - 1, s - 1, s <= r * q);
            ms.a_from_v = Mask::empty(MaskKind::a_from_v, na, nv);
            for (size_t s = 1; s <= na; ++s) {
                for (size_t q = 1; q <= nv; ++q) {
                    ms.a_from_v.set(s - 1, q - 1, q <= (s + r - 1) / r);
                }
            }
            auto vel = model.forward_ctx(in, ms, nullptr, false, nullptr);
            auto vb = slice_rows(vel.video, b, 1);
            auto ab = slice_rows(vel.audio, b * r, r);
            x_v = sub(x_v, scale(vb, tau - next));
            x_a = sub(x_a, scale(ab, tau - next));
        }
        cv.push_back(x_v);
        ca.push_back(x_a);
    }
    auto ref_v = concat_rows(cv);
    auto ref_a = concat_rows(ca);
    CHECK(streamed.video.bit_equal(ref_v));
    CHECK(streamed.audio.bit_equal(ref_a));
}

TEST_CASE("streaming with unlimited cache equals the full-recompute reference") {
    auto mc = tiny_config();
    auto model = live_model(mc, 5);
    for (uint64_t seed : {10u, 11u, 12u, 13u}) {
        for (size_t w : {0u, 1u, 2u}) {
            auto o = opts(4, 1, 3, w, seed);
            auto cached = run_stream(model, o, StreamMode::cached);
            auto full = run_stream(model, o, StreamMode::full_recompute);
            CHECK(max_abs_diff(cached.video, full.video) <= 1e-10);
            CHECK(max_abs_diff(cached.audio, full.audio) <= 1e-10);
        }
    }
    // F=2 geometry too
    auto o = opts(3, 2, 3, 1, 99);
    auto cached = run_stream(model, o, StreamMode::cached);
    auto full = run_stream(model, o, StreamMode::full_recompute);
    CHECK(max_abs_diff(cached.video, full.video) <= 1e-10);
    CHECK(max_abs_diff(cached.audio, full.audio) <= 1e-10);
}

TEST_CASE("K=1 equals one non-streaming masked sample restricted to a block") {
    auto mc = tiny_config();
    auto model = live_model(mc, 6);
    const size_t f = 2, r = 3;
    auto o = opts(1, f, r, 1, 31);  // look-ahead clips to zero at the final block
    auto streamed = run_stream(model, o);

    // reference: Euler ladder on the single block with the square student
    // masks, starting from the same per-frame noise
    NoGradScope ng;
    BlockLayout layout;
    layout.frames_per_block = f;
    layout.tokens_per_frame = r;
    layout.num_video_frames = f;
    layout.lookahead_w = std::min<size_t>(1, f);
    auto masks = student_masks(layout);
    std::vector<Tensor<double>> vn, an;
    for (size_t i = 0; i < f; ++i) {
        vn.push_back(video_frame_noise<double>(o.seed, i, mc.d_v));
        an.push_back(audio_frame_noise<double>(o.seed, i, r, mc.d_a));
    }
    auto x_v = concat_rows(vn);
    auto x_a = concat_rows(an);
    const auto grid = FlowSchedule::grid(o.ladder_steps);
    for (size_t i = 0; i < grid.size(); ++i) {
        const double tau = grid[i];
        const double next = i + 1 < grid.size() ? grid[i + 1] : 0.0;
        auto v = model.forward(x_v, x_a, tau, tau, o.cond_id, masks);
        x_v = sub(x_v, scale(v.video, tau - next));
        x_a = sub(x_a, scale(v.audio, tau - next));
    }
    CHECK(max_abs_diff(streamed.video, x_v) <= 1e-10);
    CHECK(max_abs_diff(streamed.audio, x_a) <= 1e-10);
}

TEST_CASE("output lengths and seed determinism") {
    auto mc = tiny_config();
    auto model = live_model(mc, 7);
    auto o = opts(4, 2, 3, 1, 41);
    auto a = run_stream(model, o);
    CHECK(a.video.rows() == 4 * 2);
    CHECK(a.audio.rows() == 4 * 2 * 3);
    auto b = run_stream(model, o);
    CHECK(a.video.bit_equal(b.video));
    CHECK(a.audio.bit_equal(b.audio));
    auto c = run_stream(model, opts(4, 2, 3, 1, 42));
    CHECK_FALSE(a.video.bit_equal(c.video));
}

TEST_CASE("evict keeps suffixes, keep-0 empties, capacity pins cache length") {
    auto mc = tiny_config();
    auto model = live_model(mc, 8);

    SUBCASE("keep all is identity") {
        auto o = opts(3, 1, 3, 0, 5);
        auto state = StreamState<double>::make(o);
        NoGradScope ng;
        stream_step(state, model);
        stream_step(state, model);
        auto before = state.cache.layers[0].self_v.k.clone();
        evict(state.cache, state.cache.frames);
        CHECK(state.cache.layers[0].self_v.k.bit_equal(before));
        CHECK(state.cache.base_frame == 0);
    }
    SUBCASE("keep 0 empties the cache and the stream continues as a fresh start") {
        auto o = opts(3, 1, 3, 0, 5);
        auto state = StreamState<double>::make(o);
        NoGradScope ng;
        stream_step(state, model);
        stream_step(state, model);
        evict(state.cache, 0);
        CHECK(state.cache.frames == 0);
        CHECK(state.cache.base_frame == 2);
        auto out = stream_step(state, model);  // absolute positions continue
        CHECK(out.video.rows() == 1);
        CHECK(state.cache.frames == 1);
    }
    SUBCASE("capacity bounds the retained frames from block capacity+1 onward") {
        auto o = opts(16, 1, 3, 0, 5, 8);
        auto res = run_stream(model, o);
        for (size_t b = 8; b < 16; ++b) {
            CHECK(res.records[b].cache_frames == 8);
        }
        CHECK(res.records[4].cache_frames == 4);
    }
    SUBCASE("evict beyond retained length is an error") {
        auto o = opts(2, 1, 3, 0, 5);
        auto state = StreamState<double>::make(o);
        NoGradScope ng;
        stream_step(state, model);
        CHECK_THROWS_AS(evict(state.cache, 5), NumericError);
    }
}

TEST_CASE("bounded per-block attention flops under a capacity, linear growth without cache") {
    auto mc = tiny_config();
    auto model = live_model(mc, 9);
    const size_t cap = 3;
    auto o = opts(10, 1, 3, 1, 13, cap);
    auto res = run_stream(model, o);
    // per-block flops constant once the cache is pinned at capacity, and the
    // instrumented counter agrees with the analytic mask count exactly
    const auto pinned = res.records[cap + 1].attn_flops;
    for (size_t b = 0; b < 10; ++b) {
        CHECK(res.records[b].attn_flops == res.records[b].attn_flops_active);
    }
    for (size_t b = cap + 1; b + 1 < 10; ++b) {
        CHECK(res.records[b].attn_flops == pinned);
    }
    CHECK(res.records[1].attn_flops < pinned);

    auto full = run_stream(model, o, StreamMode::full_recompute);
    // marginal (active-row) cost grows exactly linearly with the prefix;
    // the total instrumented cost grows faster still because history rows
    // are re-encoded every call
    for (size_t b = 1; b + 2 < 10; ++b) {
        CHECK(full.records[b + 1].attn_flops_active > full.records[b].attn_flops_active);
        CHECK(full.records[b + 1].attn_flops > full.records[b].attn_flops);
    }
    const auto d1 = full.records[2].attn_flops_active - full.records[1].attn_flops_active;
    const auto d2 = full.records[5].attn_flops_active - full.records[4].attn_flops_active;
    CHECK(d1 == d2);
    CHECK(full.records[3].attn_flops >= full.records[3].attn_flops_active);
}

TEST_CASE("rollout mode: gradients flow within a block, not through the cache") {
    auto mc = tiny_config();
    auto model = live_model(mc, 10);
    auto o = opts(3, 1, 3, 1, 21);

    Graph<double> g;
    auto state = StreamState<double>::make(o);
    stream_step(state, model);
    stream_step(state, model);
    auto third = stream_step(state, model);
    auto loss = mse(third.video, Tensor<double>::zeros(third.video.shape()));
    g.backward(loss);

    // block-3 loss reaches parameters through its own ladder
    bool some_param_grad = false;
    for (auto& t : model.params.tensors) {
        if (g.has_grad(t)) {
            auto gr = g.grad(t);
            for (size_t i = 0; i < gr.numel(); ++i) some_param_grad |= gr.at(i) != 0.0;
        }
    }
    CHECK(some_param_grad);
    // but not through committed earlier blocks (stop-gradient at commit)
    CHECK_FALSE(g.has_grad(state.committed_video[0]));
    CHECK_FALSE(g.has_grad(state.committed_audio[0]));
}

TEST_CASE("full functional dependence on parameters spans blocks (finite difference)") {
    auto mc = tiny_config();
    mc.depth = 1;
    auto model = live_model(mc, 12);
    auto o = opts(3, 1, 2, 1, 33);
    auto probe = [&]() {
        auto res = run_stream(model, o);
        double s = 0;
        for (size_t i = 0; i < res.video_blocks[2].numel(); ++i) {
            s += res.video_blocks[2].at(i);
        }
        return s;
    };
    Tensor<double>* w = model.params.find("blocks.0.video.cross.wq");
    REQUIRE(w != nullptr);
    const double keep = w->at(0);
    const double h = 1e-4;
    w->at(0) = keep + h;
    const double fp = probe();
    w->at(0) = keep - h;
    const double fm = probe();
    w->at(0) = keep;
    CHECK(std::abs((fp - fm) / (2 * h)) > 1e-9);  // history coupling is real
}
