// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "dsrt/rewards.hpp"

using namespace dsrt;

namespace {

WorldConfig reward_world() {
    WorldConfig w;
    w.d_a = 4;
    w.d_v = 4;
    w.tokens_per_frame = 5;
    w.num_video_frames = 16;
    w.lead_delta = 1;
    w.ar_coeff = 0.9;
    w.obs_noise = 0.05;
    w.n_conditions = 2;
    return w;
}

RewardVector column(Metric k, const std::vector<double>& vals) {
    RewardVector r;
    for (double v : vals) {
        std::array<double, kNumMetrics> row{0, 0, 0};
        row[static_cast<size_t>(k)] = v;
        r.scores.push_back(row);
    }
    return r;
}

}  // namespace

TEST_CASE("standardization of [1,2,3] reproduces the reference values") {
    auto z = standardize(column(Metric::visual, {1, 2, 3}), 1e-8);
    // reference: mu = 2, population sigma = sqrt(2/3) = 0.816496580927726
    const size_t k = static_cast<size_t>(Metric::visual);
    CHECK(z[0][k] == doctest::Approx(-1.2247448563915893).epsilon(1e-9));
    CHECK(z[1][k] == doctest::Approx(0.0).scale(1).epsilon(1e-12));
    CHECK(z[2][k] == doctest::Approx(1.2247448563915893).epsilon(1e-9));

    // independent recomputation from the written formula
    const double mu = (1.0 + 2.0 + 3.0) / 3.0;
    const double sig = std::sqrt(((1 - mu) * (1 - mu) + 0 + (3 - mu) * (3 - mu)) / 3.0);
    CHECK(z[2][k] == doctest::Approx((3 - mu) / (sig + 1e-8)).epsilon(1e-12));
}

TEST_CASE("constant column standardizes to zeros via the eps guard") {
    auto z = standardize(column(Metric::audio, {5, 5, 5}), 1e-8);
    for (const auto& row : z) CHECK(row[static_cast<size_t>(Metric::audio)] == 0.0);
}

TEST_CASE("standardization is invariant to affine reward changes") {
    RewardVector a = column(Metric::sync, {0.3, -0.1, 0.9, 0.4});
    RewardVector b = a;
    for (auto& row : b.scores) {
        row[static_cast<size_t>(Metric::sync)] =
            2.5 * row[static_cast<size_t>(Metric::sync)] + 7.0;
    }
    auto za = standardize(a, 1e-8);
    auto zb = standardize(b, 1e-8);
    for (size_t i = 0; i < za.size(); ++i) {
        CHECK(za[i][2] == doctest::Approx(zb[i][2]).epsilon(1e-7));  // eps guard bounds the residual
    }
}

TEST_CASE("weights reproduce the beta=2 reference and the neutral cases") {
    RewardConfig cfg;  // beta = 2 everywhere
    std::vector<std::array<double, kNumMetrics>> z = {{-1.2247448563915893, 0.0, 0.0}};
    auto res = weights(z, cfg, {Metric::visual});
    CHECK(res.w[0] == doctest::Approx(0.08633763225049093).epsilon(1e-5));
    CHECK(res.clipped == 0);

    RewardConfig zero;
    zero.beta_visual = zero.beta_audio = zero.beta_sync = 0.0;
    std::vector<std::array<double, kNumMetrics>> z2 = {{1.5, -0.4, 0.2}, {0.1, 2.0, -1.0}};
    auto res2 = weights(z2, zero);
    for (double w : res2.w) CHECK(w == 1.0);

    std::vector<std::array<double, kNumMetrics>> z3 = {{0, 0, 0}};
    CHECK(weights(z3, cfg).w[0] == 1.0);
}

TEST_CASE("weights are clipped to [e^-4, e^4] and clip events are counted") {
    RewardConfig cfg;
    cfg.beta_sync = 8.0;
    std::vector<std::array<double, kNumMetrics>> z = {{0, 0, 3.0}, {0, 0, -3.0}, {0, 0, 0.1}};
    auto res = weights(z, cfg, {Metric::sync});
    CHECK(res.w[0] == doctest::Approx(std::exp(4.0)).epsilon(1e-12));
    CHECK(res.w[1] == doctest::Approx(std::exp(-4.0)).epsilon(1e-12));
    CHECK(res.clipped == 2);
}

TEST_CASE("dominance monotonicity: better on every metric means no smaller weight") {
    Rng rng(17, 0);
    RewardConfig cfg;
    cfg.beta_visual = 1.0;
    cfg.beta_audio = 2.0;
    cfg.beta_sync = 0.5;
    for (int trial = 0; trial < 200; ++trial) {
        RewardVector r;
        const size_t b = 3 + rng.below(5);
        for (size_t i = 0; i < b; ++i) {
            r.scores.push_back({rng.normal(), rng.normal(), rng.normal()});
        }
        auto z = standardize(r, 1e-8);
        auto w = weights(z, cfg);
        for (size_t i = 0; i < b; ++i) {
            for (size_t j = 0; j < b; ++j) {
                bool dominates = true;
                for (size_t k = 0; k < kNumMetrics; ++k) {
                    dominates = dominates && r.scores[i][k] >= r.scores[j][k];
                }
                if (dominates) CHECK(w.w[i] >= w.w[j] - 1e-12);
            }
        }
    }
}

TEST_CASE("final_loss: unit weights give the plain mean; weighting is linear algebra") {
    auto l0 = Tensor<double>::scalar(2.0);
    auto l1 = Tensor<double>::scalar(4.0);
    auto l2 = Tensor<double>::scalar(6.0);
    CHECK(final_loss<double>({1, 1, 1}, {l0, l1, l2}).scalar_value() ==
          doctest::Approx(4.0).epsilon(1e-12));
    CHECK(final_loss<double>({3, 0, 0}, {l0, l1, l2}).scalar_value() ==
          doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("end-to-end scale invariance of the weighted loss") {
    RewardConfig cfg;
    Rng rng(5, 0);
    RewardVector r;
    for (int i = 0; i < 6; ++i) r.scores.push_back({rng.normal(), rng.normal(), rng.normal()});
    RewardVector scaled = r;
    for (auto& row : scaled.scores) {
        for (auto& v : row) v = 3.7 * v;  // positive rescaling of every metric
    }
    std::vector<Tensor<double>> losses;
    for (int i = 0; i < 6; ++i) losses.push_back(Tensor<double>::scalar(0.5 + 0.1 * i));
    auto wa = weights(standardize(r, 1e-8), cfg);
    auto wb = weights(standardize(scaled, 1e-8), cfg);
    for (size_t i = 0; i < 6; ++i) CHECK(wa.w[i] == doctest::Approx(wb.w[i]).epsilon(1e-7));
    CHECK(final_loss<double>(wa.w, losses).scalar_value() ==
          doctest::Approx(final_loss<double>(wb.w, losses).scalar_value()).epsilon(1e-7));
}

TEST_CASE("constant rewards are exactly neutral") {
    RewardConfig cfg;
    RewardVector r;
    for (int i = 0; i < 4; ++i) r.scores.push_back({3.0, -1.0, 0.5});
    auto w = weights(standardize(r, 1e-8), cfg);
    for (double v : w.w) CHECK(v == 1.0);
    std::vector<Tensor<double>> losses;
    for (int i = 0; i < 4; ++i) losses.push_back(Tensor<double>::scalar(1.0 + i));
    auto weighted = final_loss<double>(w.w, losses);
    auto plain = scale(add_all(losses), 0.25);
    CHECK(weighted.scalar_value() == plain.scalar_value());
}

TEST_CASE("generator clips sit at the top of a mixed evaluation population") {
    auto world = reward_world();
    auto ds = generate(world, 6001, 200);
    Rng noise(31, 0);
    size_t degenerate = 0;

    std::vector<double> vis_gen, vis_junk, aud_gen, aud_junk, syn_gen, syn_junk;
    for (size_t i = 0; i < ds.clips.size(); ++i) {
        const auto& clip = ds.clips[i];
        vis_gen.push_back(visual_reward(clip, world, &degenerate));
        aud_gen.push_back(audio_reward(clip, world, &degenerate));
        syn_gen.push_back(sync_reward(clip, world));
        Clip junk = clip;
        junk.video = Tensor<double>::randn(clip.video.shape(), noise, 2.0);
        junk.audio = Tensor<double>::randn(clip.audio.shape(), noise, 2.0);
        vis_junk.push_back(visual_reward(junk, world, &degenerate));
        aud_junk.push_back(audio_reward(junk, world, &degenerate));
        syn_junk.push_back(sync_reward(junk, world));
    }
    CHECK(degenerate == 0);
    auto med = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    CHECK(med(vis_gen) > med(vis_junk));
    CHECK(med(aud_gen) > med(aud_junk));
    CHECK(med(syn_gen) > med(syn_junk));
    // generator clips occupy the top of the pooled population
    {
        std::vector<double> pool = vis_gen;
        pool.insert(pool.end(), vis_junk.begin(), vis_junk.end());
        std::sort(pool.begin(), pool.end());
        const double cut = pool[pool.size() / 2];
        size_t above = 0;
        for (double v : vis_gen) above += v >= cut;
        CHECK(above >= vis_gen.size() * 9 / 10);
    }
}

TEST_CASE("white-noise video scores near zero sync; shuffled audio loses to the true pairing") {
    auto world = reward_world();
    auto ds = generate(world, 777, 120);
    Rng noise(9, 0);
    double acc = 0;
    for (size_t i = 0; i < 40; ++i) {
        Clip junk = ds.clips[i];
        junk.video = Tensor<double>::randn(ds.clips[i].video.shape(), noise);
        acc += sync_reward(junk, world);
    }
    CHECK(std::abs(acc / 40.0) < 0.1);

    size_t wins = 0, trials = 0;
    for (size_t i = 0; i + 2 < ds.clips.size(); ++i) {
        if (ds.clips[i].condition_id != ds.clips[i + 2].condition_id) continue;
        Clip shuffled = ds.clips[i];
        shuffled.audio = ds.clips[i + 2].audio;
        const double true_r = sync_reward(ds.clips[i], world);
        const double shuf_r = sync_reward(shuffled, world);
        wins += true_r > shuf_r;
        ++trials;
    }
    REQUIRE(trials >= 100);
    CHECK(static_cast<double>(wins) / static_cast<double>(trials) >= 0.99);
}

TEST_CASE("degenerate clips get the defined worst score and are logged") {
    auto world = reward_world();
    auto ds = generate(world, 3, 1);
    Clip flat = ds.clips[0];
    flat.video = Tensor<double>::zeros(flat.video.shape());
    size_t log_count = 0;
    CHECK(visual_reward(flat, world, &log_count) == kWorstReward);
    CHECK(log_count == 1);
    Clip silent = ds.clips[0];
    silent.audio = Tensor<double>::zeros(silent.audio.shape());
    CHECK(audio_reward(silent, world, &log_count) == kWorstReward);
    CHECK(log_count == 2);
}

TEST_CASE("oracle registry resolves built-ins and registered customs by name") {
    auto& reg = RewardRegistry::instance();
    CHECK(reg.has("sync"));
    CHECK(reg.has("visual"));
    CHECK(reg.has("audio"));
    CHECK_THROWS_AS(reg.get("nope"), ConfigError);

    reg.register_fn("always_42", [](const Clip&, const WorldConfig&) { return 42.0; });
    auto world = reward_world();
    auto ds = generate(world, 3, 1);
    CHECK(reg.get("always_42")(ds.clips[0], world) == 42.0);
}
