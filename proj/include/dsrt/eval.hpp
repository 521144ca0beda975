// SPDX-License-Identifier: Apache-2.0
//
// Decode-free evaluation probes.
//
// Video reconstruction MSE: the model sees pure video noise (t_v = 1) with
// the clip's clean audio as context (t_a = 0) under the masks of window W,
// and its one-step x0 readout x̂0 = eps - v̂ is scored against the true
// video. For an ideal model this readout is the conditional mean given the
// W-visible audio, whose MSE is exactly synthworld's bayes_floor(W); that is
// the quantity the window ablation compares against.
#pragma once

#include <algorithm>
#include <vector>

#include "dsrt/flow.hpp"
#include "dsrt/model.hpp"
#include "dsrt/streaming.hpp"
#include "dsrt/synthworld.hpp"

namespace dsrt {

inline double median(std::vector<double> v) {
    if (v.empty()) throw Error("median: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Per-clip reconstruction errors; deterministic in seed (one fixed video
// noise per clip).
template <typename R>
std::vector<double> video_recon_errors(const DualStreamModel<R>& model, const MaskSet& masks,
                                       const Dataset& clips, uint64_t seed) {
    NoGradScope ng;
    std::vector<double> errs;
    errs.reserve(clips.clips.size());
    for (size_t i = 0; i < clips.clips.size(); ++i) {
        const auto& clip = clips.clips[i];
        Rng rng = Rng(seed, 0x7265636Full).stream(i);
        auto eps_v = Tensor<R>::randn({clip.video.rows(), clip.video.cols()}, rng);
        auto audio = clip.audio.template cast<R>();
        auto out = model.forward(eps_v, audio, 1.0, 0.0,
                                 static_cast<size_t>(clip.condition_id), masks);
        auto x0_hat = sub(eps_v, out.video);
        errs.push_back(mse(x0_hat, clip.video.template cast<R>()).scalar_value());
    }
    return errs;
}

template <typename R>
double video_recon_mse(const DualStreamModel<R>& model, const MaskSet& masks,
                       const Dataset& clips, uint64_t seed) {
    const auto errs = video_recon_errors(model, masks, clips, seed);
    double s = 0;
    for (double e : errs) s += e;
    return s / static_cast<double>(errs.size());
}

struct SyncEval {
    double median_score = 0;
    double lag_accuracy = 0;  // fraction of clips whose detected lag is the true delta
    std::vector<double> scores;
};

// Streams n_clips sample pairs and scores them with the synthetic sync
// oracle (conditions cycled).
template <typename R>
SyncEval eval_stream_sync(const DualStreamModel<R>& model, const WorldConfig& world,
                          const StreamOptions& base, size_t n_clips, uint64_t seed) {
    SyncEval ev;
    size_t hits = 0;
    for (size_t i = 0; i < n_clips; ++i) {
        StreamOptions o = base;
        o.seed = seed + i;
        o.cond_id = i % world.n_conditions;
        auto res = run_stream(model, o);
        auto sr = sync_lag(res.video.template cast<double>(), res.audio.template cast<double>(),
                           world, static_cast<int>(o.cond_id));
        ev.scores.push_back(sr.score);
        hits += sr.lag == static_cast<int>(world.lead_delta);
    }
    ev.median_score = median(ev.scores);
    ev.lag_accuracy = static_cast<double>(hits) / static_cast<double>(n_clips);
    return ev;
}

// Renoise a held-out clip to tau0 and integrate back with N Euler steps;
// reconstruction error against the original clip. Noise fixed per clip so
// the N-sweep is coupled.
template <typename R>
double partial_renoise_recon(const DualStreamModel<R>& model, const MaskSet& masks,
                             const Dataset& clips, size_t steps, double tau0, uint64_t seed) {
    NoGradScope ng;
    std::vector<double> errs;
    for (size_t i = 0; i < clips.clips.size(); ++i) {
        const auto& clip = clips.clips[i];
        Rng rng = Rng(seed, 0x72656E6Full).stream(i);
        auto x0_v = clip.video.template cast<R>();
        auto x0_a = clip.audio.template cast<R>();
        auto x_v = noise(x0_v, Tensor<R>::randn(x0_v.shape(), rng), tau0);
        auto x_a = noise(x0_a, Tensor<R>::randn(x0_a.shape(), rng), tau0);
        for (size_t s = 0; s < steps; ++s) {
            const double tau = tau0 * static_cast<double>(steps - s) / static_cast<double>(steps);
            const double next = tau0 * static_cast<double>(steps - s - 1) /
                                static_cast<double>(steps);
            auto v = model.forward(x_v, x_a, tau, tau,
                                   static_cast<size_t>(clip.condition_id), masks);
            x_v = sub(x_v, scale(v.video, tau - next));
            x_a = sub(x_a, scale(v.audio, tau - next));
        }
        errs.push_back(0.5 * (mse(x_v, x0_v).scalar_value() + mse(x_a, x0_a).scalar_value()));
    }
    return median(errs);
}

}  // namespace dsrt
