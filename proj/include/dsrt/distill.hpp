// SPDX-License-Identifier: Apache-2.0
//
// Two-stage distillation of the causal streaming student from the
// bidirectional teacher.
//
// Stage 1 regresses the student's velocity prediction to the teacher's on
// the same noised inputs (the student under its causal masks, the teacher
// fully open). Stage 2 rolls the student out autoregressively through its
// own KV cache, renoises the rollout, and applies per-modality
// distribution-matching gradients g_m = (fake_m - real_m) / N_m through a
// stop-gradient surrogate whose adjoint is exactly scale * g. Rewards from
// the synthetic oracles are standardized per batch, exponentiated, and
// scale the per-modality surrogate terms; the video-side pairing is
// {visual, sync}, the audio-side pairing {audio, sync}. The fake score
// network is refit with a flow-matching loss on detached rollouts at a
// fixed update ratio. A final phase freezes every video-side parameter and
// continues audio-only updates.
#pragma once

#include <functional>
#include <vector>

#include "dsrt/eval.hpp"
#include "dsrt/flow.hpp"
#include "dsrt/jsonl.hpp"
#include "dsrt/model.hpp"
#include "dsrt/rewards.hpp"
#include "dsrt/streaming.hpp"

namespace dsrt {

struct DistillConfig {
    double lambda_v = 1.0, lambda_a = 1.0;  // stage-1 stream weights
    double gamma_v = 1.0, gamma_a = 1.0;    // stage-2 stream weights
    double renoise_min = 0.1, renoise_max = 0.9;
    size_t fake_ratio = 5;  // fake-score updates per generator update
    size_t stage1_steps = 300;
    size_t stage2_joint_steps = 200;
    size_t stage2_audio_steps = 200;
    size_t batch = 8;
    double stage1_lr = 1e-3;
    double stage1_lr_final = -1;  // linear decay target; < 0 keeps it constant
    double stage2_lr = 2e-4;
    double fake_lr = 1e-3;
    RewardConfig rewards;
    bool use_global_weight = false;  // optional all-metric global weight, off by default

    void validate() const {
        if (lambda_v < 0 || lambda_a < 0 || gamma_v < 0 || gamma_a < 0) {
            throw ConfigError("distill: stream weights must be >= 0");
        }
        if (fake_ratio < 1) throw ConfigError("distill: fake_ratio must be >= 1");
        if (!(renoise_min >= 0 && renoise_max <= 1 && renoise_min < renoise_max)) {
            throw ConfigError("distill: renoise window must satisfy 0 <= lo < hi <= 1");
        }
        rewards.validate();
    }
};

template <typename R>
struct ScorePair {
    const DualStreamModel<R>* real = nullptr;  // frozen teacher; never mutated
    DualStreamModel<R>* fake = nullptr;        // trainable copy
};

template <typename R>
struct NoisedBatchItem {
    Tensor<R> x_v, x_a;
    double t_v = 0, t_a = 0;
    size_t cond = 0;
};

// lambda_v |v_s^v - v_t^v|^2 + lambda_a |v_s^a - v_t^a|^2, mean over the
// batch; the teacher is evaluated as a constant.
template <typename R>
Tensor<R> stage1_loss(const DualStreamModel<R>& student, const DualStreamModel<R>& teacher,
                      const std::vector<NoisedBatchItem<R>>& batch, const MaskSet& student_ms,
                      const MaskSet& teacher_ms, const DistillConfig& cfg) {
    if (batch.empty()) throw ConfigError("stage1_loss: empty batch");
    std::vector<Tensor<R>> terms;
    for (const auto& item : batch) {
        Velocities<R> t_out;
        {
            NoGradScope ng;
            t_out = teacher.forward(item.x_v, item.x_a, item.t_v, item.t_a, item.cond,
                                    teacher_ms);
        }
        auto s_out = student.forward(item.x_v, item.x_a, item.t_v, item.t_a, item.cond,
                                     student_ms);
        terms.push_back(add(scale(mse(s_out.video, t_out.video), cfg.lambda_v),
                            scale(mse(s_out.audio, t_out.audio), cfg.lambda_a)));
    }
    return scale(add_all(terms), 1.0 / static_cast<double>(batch.size()));
}

struct Stage1Result {
    std::vector<StepLog> logs;
    double start_loss = 0;
    double final_loss = 0;
};

template <typename R>
Stage1Result run_stage1(DualStreamModel<R>& student, const DualStreamModel<R>& teacher,
                        const Dataset& data, const FlowSchedule& fs, const DistillConfig& cfg,
                        const BlockLayout& layout, uint64_t seed, MetricsWriter* mw = nullptr) {
    cfg.validate();
    const auto sm = student_masks(layout);
    const auto tm = teacher_masks(layout.num_video_frames, layout.audio_tokens());
    Adam<R> opt;
    opt.lr = cfg.stage1_lr;
    Rng rng(seed, 0x73746731ull);
    Stage1Result res;
    for (size_t step = 0; step < cfg.stage1_steps; ++step) {
        opt.lr = lr_at(cfg.stage1_lr, cfg.stage1_lr_final, step, cfg.stage1_steps);
        Graph<R> g;
        std::vector<NoisedBatchItem<R>> batch;
        for (size_t b = 0; b < cfg.batch; ++b) {
            const auto& clip = data.clips[rng.below(data.clips.size())];
            auto x0_v = clip.video.template cast<R>();
            auto x0_a = clip.audio.template cast<R>();
            NoisedBatchItem<R> item;
            item.t_v = fs.sample_time(rng);
            item.t_a = fs.sample_time(rng);
            item.x_v = noise(x0_v, Tensor<R>::randn(x0_v.shape(), rng), item.t_v);
            item.x_a = noise(x0_a, Tensor<R>::randn(x0_a.shape(), rng), item.t_a);
            item.cond = static_cast<size_t>(clip.condition_id);
            batch.push_back(std::move(item));
        }
        auto loss = stage1_loss(student, teacher, batch, sm, tm, cfg);
        g.backward(loss);
        opt.step(student.params, g);
        const double lv = loss.scalar_value();
        res.logs.push_back({step, lv, 0, 0});
        if (step == 0) res.start_loss = lv;
        if (mw) mw->write({{"step", step}, {"stage1_loss", lv}});
    }
    if (!res.logs.empty()) res.final_loss = res.logs.back().loss;
    return res;
}

// Autoregressive rollout that keeps the per-block computation graph; the
// commit pass inside stream_step detaches, so gradients stop at block
// boundaries by construction.
template <typename R>
struct RolloutSample {
    Tensor<R> video, audio;  // concatenated committed blocks (graph-carrying)
    StreamState<R> state;
};

template <typename R>
RolloutSample<R> rollout(const DualStreamModel<R>& student, const StreamOptions& o) {
    auto state = StreamState<R>::make(o);
    for (size_t b = 0; b < o.blocks; ++b) stream_step(state, student);
    RolloutSample<R> out;
    out.video = concat_rows(state.committed_video);
    out.audio = concat_rows(state.committed_audio);
    out.state = std::move(state);
    return out;
}

// (scale/2) |x - sg(x - g)|^2 with an adjoint that is exactly scale * g.
template <typename R>
Tensor<R> dmd_surrogate(const Tensor<R>& x_hat, const Tensor<R>& g, double scale_factor) {
    if (!x_hat.same_shape(g)) {
        throw ShapeError("dmd_surrogate: " + shape_str(x_hat.shape()) + " vs " +
                         shape_str(g.shape()));
    }
    double acc = 0;
    for (size_t i = 0; i < x_hat.numel(); ++i) {
        const double target = static_cast<double>(x_hat.at(i)) - static_cast<double>(g.at(i));
        const double d = static_cast<double>(x_hat.at(i)) - target;
        acc += d * d;
    }
    auto out = Tensor<R>::scalar(static_cast<R>(0.5 * scale_factor * acc));
    if (auto* gr = Graph<R>::active(); gr && x_hat.requires_grad()) {
        out.set_requires_grad(true);
        const R sf = static_cast<R>(scale_factor);
        gr->record(out, [x_hat, g, sf](Graph<R>& gg, const std::vector<R>& go) {
            auto& gx = gg.grad_acc(x_hat);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[0] * sf * g.at(i);
        });
    }
    return out;
}

template <typename R>
struct DmdGrads {
    Tensor<R> g_v, g_a;
    double n_v = 0, n_a = 0;
    bool clamped_v = false, clamped_a = false;
};

// Modality-specific normalized score differences at renoise time tau,
// evaluated with both score networks fully open. No gradient flows through
// the result.
template <typename R>
DmdGrads<R> dmd_gradients(const ScorePair<R>& scores, const Tensor<R>& x_hat_v,
                          const Tensor<R>& x_hat_a, const Tensor<R>& renoised_v,
                          const Tensor<R>& renoised_a, double tau, size_t cond) {
    NoGradScope ng;
    const auto tm = teacher_masks(renoised_v.rows(), renoised_a.rows());
    auto fake = scores.fake->forward(renoised_v, renoised_a, tau, tau, cond, tm);
    auto real = scores.real->forward(renoised_v, renoised_a, tau, tau, cond, tm);
    auto x0 = [&](const Tensor<R>& x, const Tensor<R>& v) { return sub(x, scale(v, tau)); };
    auto x0_fake_v = x0(renoised_v, fake.video);
    auto x0_fake_a = x0(renoised_a, fake.audio);
    auto x0_real_v = x0(renoised_v, real.video);
    auto x0_real_a = x0(renoised_a, real.audio);

    auto mean_abs_dev = [](const Tensor<R>& a, const Tensor<R>& b) {
        double s = 0;
        for (size_t i = 0; i < a.numel(); ++i) {
            s += std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i)));
        }
        return s / static_cast<double>(a.numel());
    };

    DmdGrads<R> out;
    out.n_v = mean_abs_dev(x_hat_v, x0_real_v);
    out.n_a = mean_abs_dev(x_hat_a, x0_real_a);
    if (out.n_v < 1e-8) {
        out.n_v = 1e-8;
        out.clamped_v = true;
    }
    if (out.n_a < 1e-8) {
        out.n_a = 1e-8;
        out.clamped_a = true;
    }
    out.g_v = scale(sub(x0_fake_v, x0_real_v), 1.0 / out.n_v);
    out.g_a = scale(sub(x0_fake_a, x0_real_a), 1.0 / out.n_a);
    return out;
}

inline bool video_side(const std::string& name) {
    return name.rfind("video.", 0) == 0 || name.find(".video.") != std::string::npos;
}

struct Stage2StepLog {
    size_t step = 0;
    double l_dmd_v = 0, l_dmd_a = 0;
    double r_v_mean = 0, r_a_mean = 0;
    double w_min = 0, w_max = 0;
    size_t clip_events = 0;
    size_t skipped = 0;
    double fake_loss = 0;
    double audio_probe = -1;  // external audio metric, set by the phase driver
};

template <typename R>
struct Stage2State {
    Adam<R> gen_opt, fake_opt;
    Rng rng;
    size_t step = 0;
};

// One generator update preceded by fake_ratio fake-score updates, with
// reward-weighted per-modality surrogate losses. freeze_video selects the
// audio-only continued-training phase.
template <typename R>
Stage2StepLog stage2_step(DualStreamModel<R>& student, ScorePair<R>& scores,
                          const WorldConfig& world, const DistillConfig& cfg,
                          const StreamOptions& base_opts, Stage2State<R>& st,
                          bool freeze_video) {
    cfg.validate();
    Stage2StepLog log;
    log.step = st.step;

    Graph<R> gen_graph;
    std::vector<RolloutSample<R>> samples;
    std::vector<size_t> conds;
    for (size_t i = 0; i < cfg.batch; ++i) {
        StreamOptions o = base_opts;
        o.cond_id = st.rng.below(student.cfg.cond_vocab);
        o.seed = st.rng.next_u64();
        conds.push_back(o.cond_id);
        samples.push_back(rollout(student, o));
    }

    // detached copies for the fake-score refits, the rewards, and the
    // normalizers
    std::vector<Tensor<R>> det_v, det_a;
    for (auto& s : samples) {
        det_v.push_back(stop_gradient(s.video));
        det_a.push_back(stop_gradient(s.audio));
    }

    // fake-score flow matching on the detached rollouts
    for (size_t u = 0; u < cfg.fake_ratio; ++u) {
        Graph<R> fg;
        std::vector<Tensor<R>> terms;
        for (size_t i = 0; i < cfg.batch; ++i) {
            const double tau = st.rng.uniform(cfg.renoise_min, cfg.renoise_max);
            auto eps_v = Tensor<R>::randn(det_v[i].shape(), st.rng);
            auto eps_a = Tensor<R>::randn(det_a[i].shape(), st.rng);
            auto x_v = noise(det_v[i], eps_v, tau);
            auto x_a = noise(det_a[i], eps_a, tau);
            const auto tm = teacher_masks(x_v.rows(), x_a.rows());
            auto out = scores.fake->forward(x_v, x_a, tau, tau, conds[i], tm);
            terms.push_back(add(mse(out.video, sub(eps_v, det_v[i])),
                                mse(out.audio, sub(eps_a, det_a[i]))));
        }
        auto floss = scale(add_all(terms), 1.0 / static_cast<double>(cfg.batch));
        fg.backward(floss);
        st.fake_opt.lr = cfg.fake_lr;
        st.fake_opt.step(scores.fake->params, fg);
        log.fake_loss = floss.scalar_value();
    }

    // rewards on the decoded (clean-latent) rollouts
    RewardVector rv;
    std::vector<bool> ok(cfg.batch, true);
    auto& registry = RewardRegistry::instance();
    for (size_t i = 0; i < cfg.batch; ++i) {
        Clip clip;
        clip.video = det_v[i].template cast<double>();
        clip.audio = det_a[i].template cast<double>();
        clip.condition_id = static_cast<int>(conds[i]);
        std::array<double, kNumMetrics> row{0, 0, 0};
        try {
            row[static_cast<size_t>(Metric::visual)] = registry.get("visual")(clip, world);
            row[static_cast<size_t>(Metric::audio)] = registry.get("audio")(clip, world);
            row[static_cast<size_t>(Metric::sync)] = registry.get("sync")(clip, world);
        } catch (const Error&) {
            ok[i] = false;
            ++log.skipped;
        }
        rv.scores.push_back(row);
    }
    RewardVector usable;
    std::vector<size_t> usable_idx;
    for (size_t i = 0; i < cfg.batch; ++i) {
        if (ok[i]) {
            usable.scores.push_back(rv.scores[i]);
            usable_idx.push_back(i);
        }
    }
    if (usable.scores.empty()) throw NumericError("stage2: every reward evaluation failed");

    const auto z = standardize(usable, cfg.rewards.eps);
    auto wv = weights(z, cfg.rewards, {Metric::visual, Metric::sync});
    auto wa = weights(z, cfg.rewards, {Metric::audio, Metric::sync});
    WeightResult wg;
    if (cfg.use_global_weight) {
        wg = weights(z, cfg.rewards);
    } else {
        wg.w.assign(usable.scores.size(), 1.0);
    }
    log.clip_events = wv.clipped + wa.clipped + wg.clipped;

    // generator update through the stop-gradient surrogate
    std::vector<Tensor<R>> gen_terms;
    double sum_rv = 0, sum_ra = 0, lsum_v = 0, lsum_a = 0;
    log.w_min = 1e300;
    log.w_max = -1e300;
    for (size_t u = 0; u < usable_idx.size(); ++u) {
        const size_t i = usable_idx[u];
        const double tau = st.rng.uniform(cfg.renoise_min, cfg.renoise_max);
        Tensor<R> ren_v, ren_a;
        {
            NoGradScope ng;
            ren_v = noise(det_v[i], Tensor<R>::randn(det_v[i].shape(), st.rng), tau);
            ren_a = noise(det_a[i], Tensor<R>::randn(det_a[i].shape(), st.rng), tau);
        }
        auto g = dmd_gradients(scores, det_v[i], det_a[i], ren_v, ren_a, tau, conds[i]);
        const double r_v = wv.w[u] * wg.w[u];
        const double r_a = wa.w[u] * wg.w[u];
        sum_rv += r_v;
        sum_ra += r_a;
        log.w_min = std::min({log.w_min, r_v, r_a});
        log.w_max = std::max({log.w_max, r_v, r_a});
        auto lv = dmd_surrogate(samples[i].video, g.g_v, cfg.gamma_v * r_v);
        auto la = dmd_surrogate(samples[i].audio, g.g_a, cfg.gamma_a * r_a);
        lsum_v += lv.scalar_value();
        lsum_a += la.scalar_value();
        gen_terms.push_back(add(lv, la));
    }
    auto gen_loss = scale(add_all(gen_terms), 1.0 / static_cast<double>(usable_idx.size()));
    gen_graph.backward(gen_loss);
    st.gen_opt.lr = cfg.stage2_lr;
    if (freeze_video) {
        st.gen_opt.step(student.params, gen_graph,
                        [](const std::string& n) { return video_side(n); });
    } else {
        st.gen_opt.step(student.params, gen_graph);
    }

    const double nb = static_cast<double>(usable_idx.size());
    log.l_dmd_v = lsum_v / nb;
    log.l_dmd_a = lsum_a / nb;
    log.r_v_mean = sum_rv / nb;
    log.r_a_mean = sum_ra / nb;
    ++st.step;
    return log;
}

struct Stage2Result {
    std::vector<Stage2StepLog> logs;
    uint64_t video_hash_before_audio_phase = 0;
    uint64_t video_hash_after_audio_phase = 0;
};

template <typename R>
Stage2Result run_stage2(DualStreamModel<R>& student, ScorePair<R>& scores,
                        const WorldConfig& world, const DistillConfig& cfg,
                        const StreamOptions& opts, uint64_t seed, MetricsWriter* mw = nullptr,
                        const std::function<double(const DualStreamModel<R>&)>& audio_probe = {}) {
    Stage2Result res;
    Stage2State<R> st;
    st.rng = Rng(seed, 0x73746732ull);
    auto emit = [&](Stage2StepLog log, const char* phase) {
        if (mw) {
            mw->write({{"step", log.step},
                       {"phase", phase},
                       {"L_dmd_v", log.l_dmd_v},
                       {"L_dmd_a", log.l_dmd_a},
                       {"r_v_mean", log.r_v_mean},
                       {"r_a_mean", log.r_a_mean},
                       {"w_min", log.w_min},
                       {"w_max", log.w_max},
                       {"clip_events", log.clip_events},
                       {"skipped", log.skipped},
                       {"fake_loss", log.fake_loss},
                       {"audio_probe", log.audio_probe}});
        }
        res.logs.push_back(std::move(log));
    };
    for (size_t s = 0; s < cfg.stage2_joint_steps; ++s) {
        emit(stage2_step(student, scores, world, cfg, opts, st, false), "joint");
    }
    res.video_hash_before_audio_phase = student.params.hash_where(video_side);
    for (size_t s = 0; s < cfg.stage2_audio_steps; ++s) {
        auto log = stage2_step(student, scores, world, cfg, opts, st, true);
        if (audio_probe) log.audio_probe = audio_probe(student);
        emit(std::move(log), "audio_only");
    }
    res.video_hash_after_audio_phase = student.params.hash_where(video_side);
    return res;
}

// Audio-only continued training (the video stream is frozen throughout).
template <typename R>
Stage2Result continued_training(DualStreamModel<R>& student, ScorePair<R>& scores,
                                const WorldConfig& world, const DistillConfig& cfg,
                                const StreamOptions& opts, uint64_t seed,
                                MetricsWriter* mw = nullptr) {
    DistillConfig c = cfg;
    c.stage2_joint_steps = 0;
    return run_stage2(student, scores, world, c, opts, seed, mw);
}

}  // namespace dsrt
