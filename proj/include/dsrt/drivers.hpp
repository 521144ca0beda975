// SPDX-License-Identifier: Apache-2.0
//
// Subcommand drivers. Every driver materializes a self-describing run
// directory: config.json (the resolved document, directly reusable as
// --config), metrics.jsonl, and summary.json. Summaries carry only
// deterministic quantities so a rerun from config.json reproduces
// summary.json bit-for-bit in 64-bit mode; wall-clock readings go to
// latency.csv / bench_timing.json.
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dsrt/distill.hpp"
#include "dsrt/eval.hpp"
#include "dsrt/runcfg.hpp"

namespace dsrt {

namespace fs = std::filesystem;

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("run: cannot write " + path.string());
    f << j.dump(2) << "\n";
}

inline fs::path prepare_run_dir(const fs::path& out, const RunConfig& cfg) {
    fs::create_directories(out);
    write_json_file(out / "config.json", cfg.raw);
    return out;
}

inline json finish_run(const fs::path& out, const RunConfig& cfg, json summary) {
    summary["config_hash"] = cfg.hash();
    write_json_file(out / "summary.json", summary);
    return summary;
}

template <typename R>
DualStreamModel<R> clone_model(const DualStreamModel<R>& src) {
    auto m = DualStreamModel<R>::init(src.cfg, 0);
    m.params.copy_values_from(src.params);
    return m;
}

struct PipelineData {
    Dataset train, heldout;
};

inline PipelineData make_data(const RunConfig& cfg) {
    PipelineData d;
    d.train = generate(cfg.world, cfg.data.train_seed, cfg.data.train_clips);
    d.heldout = generate(cfg.world, cfg.data.heldout_seed, cfg.data.heldout_clips);
    return d;
}

// ---------------------------------------------------------------------------
// synth / train-teacher / stage1 / stage2 / stream
// ---------------------------------------------------------------------------

template <typename R>
json cmd_synth(const RunConfig& cfg, const fs::path& out) {
    prepare_run_dir(out, cfg);
    auto ds = generate(cfg.world, cfg.data.train_seed, cfg.data.train_clips);
    save_dataset(ds, out / "dataset");
    return finish_run(out, cfg,
                      json{{"clips", ds.clips.size()},
                           {"audio_tokens", cfg.world.audio_tokens()},
                           {"video_frames", cfg.world.num_video_frames}});
}

template <typename R>
json cmd_train_teacher(const RunConfig& cfg, const fs::path& out) {
    prepare_run_dir(out, cfg);
    auto data = make_data(cfg);
    auto model = DualStreamModel<R>::init(cfg.model, cfg.seed);
    MetricsWriter mw(out / "metrics.jsonl");
    auto res = train_teacher(model, data.train, data.heldout, cfg.flow, [&] {
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        return tc;
    }(), &mw);
    save_model(model, out / "teacher");
    json curve = json::array();
    for (auto& [s, v] : res.heldout_curve) curve.push_back({{"step", s}, {"mse", v}});
    return finish_run(out, cfg,
                      json{{"steps", res.steps_done},
                           {"diverged", res.diverged},
                           {"final_heldout_velocity_mse", res.final_heldout_velocity_mse},
                           {"heldout_curve", curve}});
}

template <typename R>
json cmd_stage1(const RunConfig& cfg, const fs::path& out, const fs::path& teacher_base) {
    prepare_run_dir(out, cfg);
    if (!fs::exists(teacher_base.string() + ".dsrt")) {
        throw PrereqError("stage1: missing teacher checkpoint " + teacher_base.string() +
                          ".dsrt (run train-teacher first)");
    }
    auto teacher = load_model<R>(teacher_base, &cfg.model);
    auto data = make_data(cfg);
    auto student = clone_model(teacher);
    MetricsWriter mw(out / "metrics.jsonl");
    auto res = run_stage1(student, teacher, data.train, cfg.flow, cfg.distill,
                          cfg.layout(cfg.stream.window), cfg.seed, &mw);
    save_model(student, out / "student_stage1");
    return finish_run(out, cfg,
                      json{{"stage1_start_loss", res.start_loss},
                           {"stage1_final_loss", res.final_loss},
                           {"window", cfg.stream.window}});
}

template <typename R>
json cmd_stage2(const RunConfig& cfg, const fs::path& out, const fs::path& stage1_base,
                const fs::path& teacher_base) {
    prepare_run_dir(out, cfg);
    if (!fs::exists(stage1_base.string() + ".dsrt")) {
        throw PrereqError("stage2: missing stage-1 checkpoint " + stage1_base.string() +
                          ".dsrt (run stage1 first)");
    }
    if (!fs::exists(teacher_base.string() + ".dsrt")) {
        throw PrereqError("stage2: missing teacher checkpoint " + teacher_base.string() +
                          ".dsrt");
    }
    auto teacher = load_model<R>(teacher_base, &cfg.model);
    auto student = load_model<R>(stage1_base, &cfg.model);
    auto fake = clone_model(teacher);
    ScorePair<R> scores{&teacher, &fake};
    MetricsWriter mw(out / "metrics.jsonl");
    StreamOptions opts = cfg.stream;
    auto res = run_stage2(student, scores, cfg.world, cfg.distill, opts, cfg.seed, &mw);
    save_model(student, out / "student");
    save_model(fake, out / "fake_score");
    size_t clip_events = 0, skipped = 0;
    for (const auto& l : res.logs) {
        clip_events += l.clip_events;
        skipped += l.skipped;
    }
    return finish_run(
        out, cfg,
        json{{"joint_steps", cfg.distill.stage2_joint_steps},
             {"audio_steps", cfg.distill.stage2_audio_steps},
             {"video_frozen_in_audio_phase",
              res.video_hash_before_audio_phase == res.video_hash_after_audio_phase},
             {"clip_events", clip_events},
             {"skipped_samples", skipped}});
}

inline void write_latency_csv(const fs::path& path, const std::vector<BlockRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("run: cannot write " + path.string());
    f << "block_index,wall_ms,cache_frames,flops,flops_active\n";
    for (const auto& r : records) {
        f << r.block << "," << std::setprecision(6) << r.wall_ms << "," << r.cache_frames << ","
          << r.attn_flops << "," << r.attn_flops_active << "\n";
    }
}

template <typename R>
json cmd_stream(const RunConfig& cfg, const fs::path& out, const fs::path& student_base) {
    prepare_run_dir(out, cfg);
    if (!fs::exists(student_base.string() + ".dsrt")) {
        throw PrereqError("stream: missing student checkpoint " + student_base.string() +
                          ".dsrt");
    }
    auto student = load_model<R>(student_base, &cfg.model);
    StreamOptions opts = cfg.stream;
    opts.seed = cfg.seed;
    auto res = run_stream(student, opts);
    NamedTensors<R> payload;
    payload.emplace_back("video", res.video);
    payload.emplace_back("audio", res.audio);
    save_tensors(out / "stream.bin", payload);
    write_latency_csv(out / "latency.csv", res.records);

    WorldConfig eval_world = cfg.world;
    eval_world.num_video_frames = opts.blocks * opts.frames_per_block;
    auto sync = sync_lag(res.video.template cast<double>(), res.audio.template cast<double>(),
                         eval_world, static_cast<int>(opts.cond_id));
    unsigned long long total_flops = 0;
    for (const auto& rec : res.records) total_flops += rec.attn_flops;
    return finish_run(out, cfg,
                      json{{"blocks", opts.blocks},
                           {"frames", opts.blocks * opts.frames_per_block},
                           {"sync_score", sync.score},
                           {"sync_lag", sync.lag},
                           {"total_attention_flops", total_flops}});
}

// ---------------------------------------------------------------------------
// full pipeline runs shared by the ablation drivers
// ---------------------------------------------------------------------------

template <typename R>
struct PipelineArtifacts {
    DualStreamModel<R> student;
    Stage1Result stage1;
    Stage2Result stage2;
};

// teacher -> stage 1 -> stage 2 at window W. The student and the fake score
// network start from the teacher's weights.
template <typename R>
PipelineArtifacts<R> distill_pipeline(const RunConfig& cfg, const DualStreamModel<R>& teacher,
                                      const PipelineData& data, size_t window, uint64_t seed,
                                      MetricsWriter* mw = nullptr) {
    PipelineArtifacts<R> art{clone_model(teacher), {}, {}};
    const auto layout = cfg.layout(window);
    art.stage1 = run_stage1(art.student, teacher, data.train, cfg.flow, cfg.distill, layout,
                            seed, mw);
    auto fake = clone_model(teacher);
    ScorePair<R> scores{&teacher, &fake};
    StreamOptions opts = cfg.stream;
    opts.window = window;

    // audio probe for the continued-training contract: stage-1-style audio
    // regression to the teacher on a fixed held-out mini-batch
    std::vector<NoisedBatchItem<R>> probe_items;
    std::vector<Tensor<R>> probe_targets;
    {
        NoGradScope ng;
        Rng prng(seed ^ 0xA0D10ull, 0);
        const auto tm = teacher_masks(cfg.world.num_video_frames, cfg.world.audio_tokens());
        for (size_t i = 0; i < 4 && i < data.heldout.clips.size(); ++i) {
            const auto& clip = data.heldout.clips[i];
            NoisedBatchItem<R> item;
            item.t_v = 0.5;
            item.t_a = 0.5;
            auto x0_v = clip.video.template cast<R>();
            auto x0_a = clip.audio.template cast<R>();
            item.x_v = noise(x0_v, Tensor<R>::randn(x0_v.shape(), prng), item.t_v);
            item.x_a = noise(x0_a, Tensor<R>::randn(x0_a.shape(), prng), item.t_a);
            item.cond = static_cast<size_t>(clip.condition_id);
            auto t_out = teacher.forward(item.x_v, item.x_a, item.t_v, item.t_a, item.cond, tm);
            probe_targets.push_back(t_out.audio);
            probe_items.push_back(std::move(item));
        }
    }
    const auto sm = student_masks(layout);
    std::function<double(const DualStreamModel<R>&)> audio_probe =
        [&, sm](const DualStreamModel<R>& s) {
            NoGradScope ng;
            double total = 0;
            for (size_t i = 0; i < probe_items.size(); ++i) {
                const auto& item = probe_items[i];
                auto out = s.forward(item.x_v, item.x_a, item.t_v, item.t_a, item.cond, sm);
                total += mse(out.audio, probe_targets[i]).scalar_value();
            }
            return total / static_cast<double>(probe_items.size());
        };
    art.stage2 = run_stage2(art.student, scores, cfg.world, cfg.distill, opts, seed ^ 0x5747ull,
                            mw, audio_probe);
    return art;
}

inline double moving_average_delta(const std::vector<Stage2StepLog>& logs, size_t window,
                                   double Stage2StepLog::*field) {
    std::vector<double> vals;
    for (const auto& l : logs) vals.push_back(l.*field);
    if (vals.size() < 2 * window) window = std::max<size_t>(1, vals.size() / 2);
    double head = 0, tail = 0;
    for (size_t i = 0; i < window; ++i) {
        head += vals[i];
        tail += vals[vals.size() - window + i];
    }
    return tail / static_cast<double>(window) - head / static_cast<double>(window);
}

// ---------------------------------------------------------------------------
// window ablation: teacher per seed, pipeline per (seed, W)
// ---------------------------------------------------------------------------

template <typename R>
json cmd_ablate_window(const RunConfig& cfg, const fs::path& out) {
    prepare_run_dir(out, cfg);
    auto data = make_data(cfg);
    MetricsWriter mw(out / "metrics.jsonl");

    std::ofstream csv(out / "window_ablation.csv", std::ios::trunc);
    csv << "window,seed,video_mse,sync_score,lag_accuracy,bayes_floor,video_frozen,"
           "audio_dmd_ma_delta,audio_probe_ma_delta\n";

    json rows = json::array();
    for (size_t w : cfg.ablation.w_list) {
        std::vector<double> mses, syncs, lags;
        std::vector<double> dmd_deltas, probe_deltas;
        bool all_frozen = true;
        for (uint64_t seed : cfg.ablation.seeds) {
            RunConfig scfg = cfg;
            scfg.train.seed = seed;
            auto teacher = DualStreamModel<R>::init(cfg.model, seed);
            train_teacher(teacher, data.train, data.heldout, cfg.flow, scfg.train);
            auto art = distill_pipeline(scfg, teacher, data, w, seed, &mw);

            const auto layout = cfg.layout(w);
            const double mse_v = video_recon_mse(art.student, student_masks(layout),
                                                 data.heldout, 0xE7A1u + seed);
            StreamOptions so = cfg.stream;
            so.window = w;
            auto sync = eval_stream_sync(art.student, cfg.world, so,
                                         cfg.ablation.stream_eval_clips, 0x5EEDu + seed);
            const double floor = bayes_floor(cfg.world, w);
            const bool frozen = art.stage2.video_hash_before_audio_phase ==
                                art.stage2.video_hash_after_audio_phase;
            all_frozen = all_frozen && frozen;

            std::vector<Stage2StepLog> audio_logs(
                art.stage2.logs.end() -
                    static_cast<long>(std::min(cfg.distill.stage2_audio_steps,
                                               art.stage2.logs.size())),
                art.stage2.logs.end());
            const double dmd_delta =
                moving_average_delta(audio_logs, 100, &Stage2StepLog::l_dmd_a);
            const double probe_delta =
                moving_average_delta(audio_logs, 100, &Stage2StepLog::audio_probe);
            dmd_deltas.push_back(dmd_delta);
            probe_deltas.push_back(probe_delta);

            mses.push_back(mse_v);
            syncs.push_back(sync.median_score);
            lags.push_back(sync.lag_accuracy);
            csv << w << "," << seed << "," << std::setprecision(10) << mse_v << ","
                << sync.median_score << "," << sync.lag_accuracy << "," << floor << ","
                << (frozen ? 1 : 0) << "," << dmd_delta << "," << probe_delta << "\n";
        }
        rows.push_back(json{{"window", w},
                            {"video_mse_median", median(mses)},
                            {"video_mse_seeds", mses},
                            {"sync_score_median", median(syncs)},
                            {"lag_accuracy_median", median(lags)},
                            {"bayes_floor", bayes_floor(cfg.world, w)},
                            {"video_frozen_all_seeds", all_frozen},
                            {"audio_dmd_ma_delta_median", median(dmd_deltas)},
                            {"audio_probe_ma_delta_median", median(probe_deltas)}});
    }
    return finish_run(out, cfg, json{{"rows", rows}});
}

// ---------------------------------------------------------------------------
// reward-coefficient ablation: stage-1 student shared per seed, stage 2 per
// (seed, beta) with the target metric only
// ---------------------------------------------------------------------------

template <typename R>
struct StreamRewardEval {
    double visual = 0, audio = 0, sync = 0;  // medians over sampled streams
};

template <typename R>
StreamRewardEval<R> eval_stream_rewards(const DualStreamModel<R>& model,
                                        const WorldConfig& world, const StreamOptions& base,
                                        size_t n_clips, uint64_t seed) {
    std::vector<double> vis, aud, syn;
    for (size_t i = 0; i < n_clips; ++i) {
        StreamOptions o = base;
        o.seed = seed + i;
        o.cond_id = i % world.n_conditions;
        auto res = run_stream(model, o);
        Clip clip;
        clip.video = res.video.template cast<double>();
        clip.audio = res.audio.template cast<double>();
        clip.condition_id = static_cast<int>(o.cond_id);
        WorldConfig ew = world;
        ew.num_video_frames = o.blocks * o.frames_per_block;
        vis.push_back(visual_reward(clip, ew));
        aud.push_back(audio_reward(clip, ew));
        syn.push_back(sync_reward(clip, ew));
    }
    return {median(vis), median(aud), median(syn)};
}

template <typename R>
json cmd_ablate_beta(const RunConfig& cfg, const fs::path& out) {
    prepare_run_dir(out, cfg);
    auto data = make_data(cfg);
    MetricsWriter mw(out / "metrics.jsonl");

    std::ofstream csv(out / "beta_ablation.csv", std::ios::trunc);
    csv << "beta,seed,target_reward,video_mse,clip_rate,sync_score\n";

    const std::string metric = cfg.ablation.metric;
    json rows = json::array();
    std::vector<json> per_beta;

    // per-seed shared prefixes
    struct SeedPrefix {
        DualStreamModel<R> teacher, stage1_student;
    };
    std::vector<SeedPrefix> prefixes;
    for (uint64_t seed : cfg.ablation.seeds) {
        RunConfig scfg = cfg;
        scfg.train.seed = seed;
        auto teacher = DualStreamModel<R>::init(cfg.model, seed);
        train_teacher(teacher, data.train, data.heldout, cfg.flow, scfg.train);
        auto student = clone_model(teacher);
        run_stage1(student, teacher, data.train, cfg.flow, cfg.distill,
                   cfg.layout(cfg.stream.window), seed, nullptr);
        prefixes.push_back(SeedPrefix{std::move(teacher), std::move(student)});
    }

    for (double beta : cfg.ablation.beta_list) {
        std::vector<double> targets, mses, rates, syncs;
        for (size_t si = 0; si < cfg.ablation.seeds.size(); ++si) {
            const uint64_t seed = cfg.ablation.seeds[si];
            auto student = clone_model(prefixes[si].stage1_student);
            auto fake = clone_model(prefixes[si].teacher);
            ScorePair<R> scores{&prefixes[si].teacher, &fake};
            DistillConfig dc = cfg.distill;
            dc.rewards.beta_visual = metric == "visual" ? beta : 0.0;
            dc.rewards.beta_audio = metric == "audio" ? beta : 0.0;
            dc.rewards.beta_sync = metric == "sync" ? beta : 0.0;
            auto res = run_stage2(student, scores, cfg.world, dc, cfg.stream, seed ^ 0xBE7Aull,
                                  &mw);
            size_t clip_events = 0, weighted = 0;
            for (const auto& l : res.logs) {
                clip_events += l.clip_events;
                weighted += 2 * (cfg.distill.batch - l.skipped);
            }
            const double rate =
                weighted ? static_cast<double>(clip_events) / static_cast<double>(weighted) : 0;

            auto rewards = eval_stream_rewards(student, cfg.world, cfg.stream,
                                               cfg.ablation.stream_eval_clips, 0xBE7A + seed);
            const double target = metric == "visual" ? rewards.visual
                                  : metric == "audio" ? rewards.audio
                                                      : rewards.sync;
            const double mse_v =
                video_recon_mse(student, student_masks(cfg.layout(cfg.stream.window)),
                                data.heldout, 0xE7A1u + seed);
            targets.push_back(target);
            mses.push_back(mse_v);
            rates.push_back(rate);
            syncs.push_back(rewards.sync);
            csv << beta << "," << seed << "," << std::setprecision(10) << target << "," << mse_v
                << "," << rate << "," << rewards.sync << "\n";
        }
        rows.push_back(json{{"beta", beta},
                            {"target_reward_median", median(targets)},
                            {"target_reward_seeds", targets},
                            {"video_mse_median", median(mses)},
                            {"video_mse_seeds", mses},
                            {"clip_rate_median", median(rates)},
                            {"sync_score_median", median(syncs)}});
    }
    return finish_run(out, cfg, json{{"metric", metric}, {"rows", rows}});
}

// ---------------------------------------------------------------------------
// bench: streaming vs full recompute
// ---------------------------------------------------------------------------

template <typename R>
json cmd_bench(const RunConfig& cfg, const fs::path& out, const fs::path& student_base) {
    prepare_run_dir(out, cfg);
    if (!fs::exists(student_base.string() + ".dsrt")) {
        throw PrereqError("bench: missing student checkpoint " + student_base.string() +
                          ".dsrt");
    }
    auto student = load_model<R>(student_base, &cfg.model);

    json flops_rows = json::array();
    json timing_rows = json::array();
    for (size_t k : cfg.bench.k_list) {
        StreamOptions o = cfg.stream;
        o.blocks = k;
        o.seed = cfg.seed;

        auto steady = [&](const StreamResult<R>& res) {
            std::vector<double> tail;
            for (size_t b = res.records.size() / 2; b < res.records.size(); ++b) {
                tail.push_back(res.records[b].wall_ms);
            }
            return median(tail);
        };
        for (size_t wup = 0; wup < cfg.bench.warmup; ++wup) run_stream(student, o);
        std::vector<double> first_c, steady_c, first_f, steady_f;
        StreamResult<R> last_cached, last_full;
        for (size_t rep = 0; rep < cfg.bench.reps; ++rep) {
            last_cached = run_stream(student, o, StreamMode::cached);
            first_c.push_back(last_cached.records[0].wall_ms);
            steady_c.push_back(steady(last_cached));
            last_full = run_stream(student, o, StreamMode::full_recompute);
            first_f.push_back(last_full.records[0].wall_ms);
            steady_f.push_back(steady(last_full));
        }
        write_latency_csv(out / ("latency_k" + std::to_string(k) + "_cached.csv"),
                          last_cached.records);
        write_latency_csv(out / ("latency_k" + std::to_string(k) + "_full.csv"),
                          last_full.records);

        json fl_cached = json::array(), fl_full = json::array();
        for (const auto& rec : last_cached.records) fl_cached.push_back(rec.attn_flops);
        for (const auto& rec : last_full.records) fl_full.push_back(rec.attn_flops_active);
        flops_rows.push_back(json{{"k", k},
                                  {"streaming_per_block_flops", fl_cached},
                                  {"full_recompute_active_flops", fl_full}});
        const double total_c = [&] {
            double t = 0;
            for (auto& rec : last_cached.records) t += rec.wall_ms;
            return t;
        }();
        timing_rows.push_back(json{{"k", k},
                                   {"streaming_first_block_ms", median(first_c)},
                                   {"streaming_steady_ms", median(steady_c)},
                                   {"streaming_total_ms", total_c},
                                   {"full_first_block_ms", median(first_f)},
                                   {"full_steady_ms", median(steady_f)},
                                   {"blocks_per_sec", 1000.0 / std::max(1e-9, median(steady_c))}});
    }
    write_json_file(out / "bench_timing.json", json{{"rows", timing_rows}});
    return finish_run(out, cfg, json{{"flops", flops_rows}});
}

}  // namespace dsrt
