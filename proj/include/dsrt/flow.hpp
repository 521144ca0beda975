// SPDX-License-Identifier: Apache-2.0
//
// Rectified-flow machinery: linear interpolation x_t = (1-t) x0 + t eps with
// velocity target v* = eps - x0, Euler ODE sampling on a uniform descending
// grid, and teacher pretraining on the synthetic world. Training samples the
// two streams' flow times independently by default so that mixed-time
// conditioning (clean audio, noisy video) is in-distribution; sharing one
// time is available as a flag.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "dsrt/jsonl.hpp"
#include "dsrt/model.hpp"
#include "dsrt/ops.hpp"
#include "dsrt/optim.hpp"
#include "dsrt/synthworld.hpp"

namespace dsrt {

struct FlowSchedule {
    enum class TimeSampler { uniform, logit_normal };
    TimeSampler sampler = TimeSampler::logit_normal;
    size_t teacher_steps = 32;
    size_t student_steps = 4;

    // Descending uniform grid 1, (n-1)/n, ..., 1/n; the i-th Euler step
    // integrates from grid[i] to grid[i+1] (0 after the last).
    static std::vector<double> grid(size_t n) {
        if (n == 0) throw ConfigError("flow: sampler steps must be >= 1");
        std::vector<double> g(n);
        for (size_t i = 0; i < n; ++i) {
            g[i] = static_cast<double>(n - i) / static_cast<double>(n);
        }
        return g;
    }

    double sample_time(Rng& rng) const {
        if (sampler == TimeSampler::uniform) return rng.uniform();
        const double z = rng.normal();  // logit-normal(0, 1)
        return 1.0 / (1.0 + std::exp(-z));
    }
};

inline FlowSchedule::TimeSampler time_sampler_from_string(const std::string& s) {
    if (s == "uniform") return FlowSchedule::TimeSampler::uniform;
    if (s == "logit_normal") return FlowSchedule::TimeSampler::logit_normal;
    throw ConfigError("flow: unknown timestep sampler '" + s + "'");
}

// x_t = (1-t) x0 + t eps.
template <typename R>
Tensor<R> noise(const Tensor<R>& x0, const Tensor<R>& eps, double t) {
    if (t < 0.0 || t > 1.0) {
        throw ConfigError("noise: t=" + std::to_string(t) + " outside [0,1]");
    }
    return add(scale(x0, 1.0 - t), scale(eps, t));
}

// Euler integration of a joint velocity field from pure noise at t=1 down to
// t=0. vel(x_v, x_a, tau) must return Velocities<R>.
template <typename R, typename VelFn>
std::pair<Tensor<R>, Tensor<R>> sample_ode(VelFn&& vel, size_t t_v, size_t d_v, size_t t_a,
                                           size_t d_a, size_t steps, Rng& rng) {
    auto x_v = Tensor<R>::randn({t_v, d_v}, rng);
    auto x_a = Tensor<R>::randn({t_a, d_a}, rng);
    const auto grid = FlowSchedule::grid(steps);
    for (size_t i = 0; i < grid.size(); ++i) {
        const double tau = grid[i];
        const double next = i + 1 < grid.size() ? grid[i + 1] : 0.0;
        try {
            auto v = vel(x_v, x_a, tau);
            x_v = sub(x_v, scale(v.video, tau - next));
            x_a = sub(x_a, scale(v.audio, tau - next));
        } catch (const NumericError& e) {
            throw NumericError("sample: non-finite intermediate at step " + std::to_string(i) +
                               " (tau=" + std::to_string(tau) + "): " + e.what());
        }
    }
    return {x_v, x_a};
}

// Model-bound sampler (deterministic in seed).
template <typename R>
std::pair<Tensor<R>, Tensor<R>> sample(const DualStreamModel<R>& model, const MaskSet& masks,
                                       size_t steps, size_t cond_id, uint64_t seed, size_t t_v,
                                       size_t tokens_per_frame, FlopCounter* fc = nullptr) {
    NoGradScope ng;
    Rng rng(seed, 0x73616D70ull);
    return sample_ode<R>(
        [&](const Tensor<R>& xv, const Tensor<R>& xa, double tau) {
            return model.forward(xv, xa, tau, tau, cond_id, masks, fc);
        },
        t_v, model.cfg.d_v, t_v * tokens_per_frame, model.cfg.d_a, steps, rng);
}

struct TrainConfig {
    size_t steps = 2000;
    size_t batch = 8;
    double lr = 1e-3;
    double lr_final = -1;  // linear decay target; < 0 keeps lr constant
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    size_t eval_every = 200;
    bool independent_stream_times = true;
    uint64_t seed = 1;
};

inline double lr_at(double lr0, double lr_final, size_t step, size_t total) {
    if (lr_final < 0 || total <= 1) return lr0;
    const double f = static_cast<double>(step) / static_cast<double>(total - 1);
    return lr0 + (lr_final - lr0) * f;
}

struct StepLog {
    size_t step = 0;
    double loss = 0, loss_v = 0, loss_a = 0;
};

struct TrainResult {
    std::vector<StepLog> logs;
    std::vector<std::pair<size_t, double>> heldout_curve;
    double final_heldout_velocity_mse = 0;
    bool diverged = false;
    size_t steps_done = 0;
};

// Mean velocity-regression error of a model on fixed held-out clips with
// fixed per-clip times and noises (comparable across calls).
template <typename R>
double heldout_velocity_mse(const DualStreamModel<R>& model, const Dataset& heldout,
                            const FlowSchedule& fs, uint64_t seed,
                            bool independent_stream_times) {
    NoGradScope ng;
    const auto masks = teacher_masks(heldout.config.num_video_frames,
                                     heldout.config.audio_tokens());
    double total = 0;
    for (size_t i = 0; i < heldout.clips.size(); ++i) {
        Rng rng = Rng(seed, 0x6576616Cull).stream(i);
        const auto& clip = heldout.clips[i];
        auto x0_v = clip.video.template cast<R>();
        auto x0_a = clip.audio.template cast<R>();
        auto eps_v = Tensor<R>::randn(x0_v.shape(), rng);
        auto eps_a = Tensor<R>::randn(x0_a.shape(), rng);
        const double tv = fs.sample_time(rng);
        const double ta = independent_stream_times ? fs.sample_time(rng) : tv;
        auto out = model.forward(noise(x0_v, eps_v, tv), noise(x0_a, eps_a, ta), tv, ta,
                                 static_cast<size_t>(clip.condition_id), masks);
        total += mse(out.video, sub(eps_v, x0_v)).scalar_value();
        total += mse(out.audio, sub(eps_a, x0_a)).scalar_value();
    }
    return total / (2.0 * static_cast<double>(heldout.clips.size()));
}

// Bidirectional velocity regression on dataset clips. On divergence (any
// non-finite loss), restores the last evaluated snapshot and returns with
// diverged=true.
template <typename R>
TrainResult train_teacher(DualStreamModel<R>& model, const Dataset& train,
                          const Dataset& heldout, const FlowSchedule& fs, const TrainConfig& tc,
                          MetricsWriter* mw = nullptr) {
    if (train.clips.empty()) throw PrereqError("train_teacher: empty dataset");
    const auto masks = teacher_masks(train.config.num_video_frames,
                                     train.config.audio_tokens());
    Adam<R> opt;
    opt.lr = tc.lr;
    opt.beta1 = tc.beta1;
    opt.beta2 = tc.beta2;
    opt.eps = tc.adam_eps;

    TrainResult res;
    Rng rng(tc.seed, 0x747261696Eull);
    NamedTensors<R> snapshot = model.params.named();
    auto snap_values = [&]() {
        snapshot.clear();
        for (size_t i = 0; i < model.params.size(); ++i) {
            snapshot.emplace_back(model.params.names[i], model.params.tensors[i].clone());
        }
    };
    snap_values();

    for (size_t step = 0; step < tc.steps; ++step) {
        opt.lr = lr_at(tc.lr, tc.lr_final, step, tc.steps);
        try {
            Graph<R> g;
            std::vector<Tensor<R>> lv, la;
            for (size_t b = 0; b < tc.batch; ++b) {
                const auto& clip = train.clips[rng.below(train.clips.size())];
                auto x0_v = clip.video.template cast<R>();
                auto x0_a = clip.audio.template cast<R>();
                auto eps_v = Tensor<R>::randn(x0_v.shape(), rng);
                auto eps_a = Tensor<R>::randn(x0_a.shape(), rng);
                const double tv = fs.sample_time(rng);
                const double ta = tc.independent_stream_times ? fs.sample_time(rng) : tv;
                auto out = model.forward(noise(x0_v, eps_v, tv), noise(x0_a, eps_a, ta), tv, ta,
                                         static_cast<size_t>(clip.condition_id), masks);
                lv.push_back(mse(out.video, sub(eps_v, x0_v)));
                la.push_back(mse(out.audio, sub(eps_a, x0_a)));
            }
            auto loss_v = scale(add_all(lv), 1.0 / static_cast<double>(tc.batch));
            auto loss_a = scale(add_all(la), 1.0 / static_cast<double>(tc.batch));
            auto loss = add(loss_v, loss_a);
            g.backward(loss);
            opt.step(model.params, g);

            StepLog log{step, loss.scalar_value(), loss_v.scalar_value(), loss_a.scalar_value()};
            res.logs.push_back(log);
            if (mw) {
                mw->write({{"step", step},
                           {"loss", log.loss},
                           {"loss_v", log.loss_v},
                           {"loss_a", log.loss_a}});
            }
        } catch (const NumericError&) {
            model.params.load_named(snapshot);
            res.diverged = true;
            break;
        }
        res.steps_done = step + 1;
        if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps) {
            const double hm = heldout_velocity_mse(model, heldout, fs, tc.seed ^ 0xE7A1ull,
                                                   tc.independent_stream_times);
            res.heldout_curve.emplace_back(step + 1, hm);
            if (mw) mw->write({{"step", step + 1}, {"heldout_velocity_mse", hm}});
            snap_values();
        }
    }
    if (!res.heldout_curve.empty()) {
        res.final_heldout_velocity_mse = res.heldout_curve.back().second;
    }
    return res;
}

}  // namespace dsrt
