// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with world / model / flow / train /
// distill / rewards / stream / data / ablation / bench sections. The schema
// is validated before any compute; violations name the JSON pointer of the
// offending key. The resolved document is written into every run directory
// and its FNV hash is recorded in the outputs.
#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrt/distill.hpp"
#include "dsrt/flow.hpp"
#include "dsrt/model.hpp"
#include "dsrt/streaming.hpp"
#include "dsrt/synthworld.hpp"

namespace dsrt {

using json = nlohmann::json;

namespace detail {

inline void check_keys(const json& j, const std::string& ptr,
                       const std::set<std::string>& allowed) {
    if (!j.is_object()) {
        throw ConfigError("config: expected an object at " + (ptr.empty() ? "/" : ptr));
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("config: unknown key at " + ptr + "/" + it.key());
        }
    }
}

template <typename T>
T get_as(const json& j, const std::string& ptr, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value type at " + ptr + "/" + key);
    }
}

}  // namespace detail

struct RunConfig {
    json raw;
    uint64_t seed = 1;
    std::string run_id = "run";

    WorldConfig world;
    ModelConfig model;
    FlowSchedule flow;
    TrainConfig train;
    DistillConfig distill;
    StreamOptions stream;

    struct Data {
        size_t train_clips = 256;
        size_t heldout_clips = 64;
        uint64_t train_seed = 1001;
        uint64_t heldout_seed = 2002;
    } data;

    struct Ablation {
        std::vector<size_t> w_list{0, 1, 2, 3};
        std::vector<double> beta_list{0, 1, 2, 4, 8};
        std::string metric = "sync";
        std::vector<uint64_t> seeds{1, 2, 3};
        size_t eval_clips = 64;
        size_t stream_eval_clips = 16;
    } ablation;

    struct Bench {
        std::vector<size_t> k_list{2, 32};
        size_t reps = 20;
        size_t warmup = 2;
    } bench;

    BlockLayout layout(size_t window) const {
        BlockLayout l;
        l.frames_per_block = stream.frames_per_block;
        l.tokens_per_frame = world.tokens_per_frame;
        l.num_video_frames = world.num_video_frames;
        l.lookahead_w = window;
        l.validate();
        return l;
    }

    uint64_t hash() const {
        const std::string s = raw.dump();
        return fnv1a(s.data(), s.size());
    }
};

inline RunConfig parse_run_config(const json& j) {
    detail::check_keys(j, "",
                       {"run_id", "seed", "world", "model", "flow", "train", "distill",
                        "rewards", "stream", "data", "ablation", "bench"});
    RunConfig c;
    c.raw = j;
    c.seed = detail::get_as<uint64_t>(j, "", "seed", 1);
    c.run_id = detail::get_as<std::string>(j, "", "run_id", "run");

    if (j.contains("world")) {
        const auto& w = j.at("world");
        detail::check_keys(w, "/world",
                           {"d_a", "d_v", "tokens_per_frame", "num_video_frames", "lead_delta",
                            "ar_coeff", "obs_noise", "mixing_seed", "n_conditions", "mix_scale"});
        try {
            c.world = world_from_json(w);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: /world: ") + e.what());
        }
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, "/model",
                           {"depth", "model_dim", "heads", "mlp_mult", "d_v", "d_a",
                            "cond_vocab", "positional", "rope_base"});
        try {
            c.model = model_from_json(m);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: /model: ") + e.what());
        }
    } else {
        c.model.d_v = c.world.d_v;
        c.model.d_a = c.world.d_a;
        c.model.cond_vocab = c.world.n_conditions;
    }
    if (j.contains("flow")) {
        const auto& f = j.at("flow");
        detail::check_keys(f, "/flow", {"sampler", "teacher_steps", "student_steps"});
        c.flow.sampler = time_sampler_from_string(
            detail::get_as<std::string>(f, "/flow", "sampler", "logit_normal"));
        c.flow.teacher_steps = detail::get_as<size_t>(f, "/flow", "teacher_steps", 32);
        c.flow.student_steps = detail::get_as<size_t>(f, "/flow", "student_steps", 4);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, "/train",
                           {"steps", "batch", "lr", "lr_final", "eval_every",
                            "independent_stream_times"});
        c.train.steps = detail::get_as<size_t>(t, "/train", "steps", c.train.steps);
        c.train.batch = detail::get_as<size_t>(t, "/train", "batch", c.train.batch);
        c.train.lr = detail::get_as<double>(t, "/train", "lr", c.train.lr);
        c.train.lr_final = detail::get_as<double>(t, "/train", "lr_final", c.train.lr_final);
        c.train.eval_every = detail::get_as<size_t>(t, "/train", "eval_every",
                                                    c.train.eval_every);
        c.train.independent_stream_times = detail::get_as<bool>(
            t, "/train", "independent_stream_times", c.train.independent_stream_times);
    }
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        detail::check_keys(
            d, "/distill",
            {"lambda_v", "lambda_a", "gamma_v", "gamma_a", "renoise_min", "renoise_max",
             "fake_ratio", "stage1_steps", "stage2_joint_steps", "stage2_audio_steps", "batch",
             "stage1_lr", "stage1_lr_final", "stage2_lr", "fake_lr", "use_global_weight"});
        auto& dc = c.distill;
        dc.lambda_v = detail::get_as<double>(d, "/distill", "lambda_v", dc.lambda_v);
        dc.lambda_a = detail::get_as<double>(d, "/distill", "lambda_a", dc.lambda_a);
        dc.gamma_v = detail::get_as<double>(d, "/distill", "gamma_v", dc.gamma_v);
        dc.gamma_a = detail::get_as<double>(d, "/distill", "gamma_a", dc.gamma_a);
        dc.renoise_min = detail::get_as<double>(d, "/distill", "renoise_min", dc.renoise_min);
        dc.renoise_max = detail::get_as<double>(d, "/distill", "renoise_max", dc.renoise_max);
        dc.fake_ratio = detail::get_as<size_t>(d, "/distill", "fake_ratio", dc.fake_ratio);
        dc.stage1_steps = detail::get_as<size_t>(d, "/distill", "stage1_steps", dc.stage1_steps);
        dc.stage2_joint_steps =
            detail::get_as<size_t>(d, "/distill", "stage2_joint_steps", dc.stage2_joint_steps);
        dc.stage2_audio_steps =
            detail::get_as<size_t>(d, "/distill", "stage2_audio_steps", dc.stage2_audio_steps);
        dc.batch = detail::get_as<size_t>(d, "/distill", "batch", dc.batch);
        dc.stage1_lr = detail::get_as<double>(d, "/distill", "stage1_lr", dc.stage1_lr);
        dc.stage1_lr_final =
            detail::get_as<double>(d, "/distill", "stage1_lr_final", dc.stage1_lr_final);
        dc.stage2_lr = detail::get_as<double>(d, "/distill", "stage2_lr", dc.stage2_lr);
        dc.fake_lr = detail::get_as<double>(d, "/distill", "fake_lr", dc.fake_lr);
        dc.use_global_weight =
            detail::get_as<bool>(d, "/distill", "use_global_weight", dc.use_global_weight);
    }
    if (j.contains("rewards")) {
        const auto& r = j.at("rewards");
        detail::check_keys(r, "/rewards",
                           {"beta_visual", "beta_audio", "beta_sync", "eps"});
        auto& rc = c.distill.rewards;
        rc.beta_visual = detail::get_as<double>(r, "/rewards", "beta_visual", rc.beta_visual);
        rc.beta_audio = detail::get_as<double>(r, "/rewards", "beta_audio", rc.beta_audio);
        rc.beta_sync = detail::get_as<double>(r, "/rewards", "beta_sync", rc.beta_sync);
        rc.eps = detail::get_as<double>(r, "/rewards", "eps", rc.eps);
    }
    if (j.contains("stream")) {
        const auto& s = j.at("stream");
        detail::check_keys(s, "/stream",
                           {"blocks", "frames_per_block", "window", "capacity_blocks",
                            "ladder_steps", "cond_id"});
        c.stream.blocks = detail::get_as<size_t>(s, "/stream", "blocks", c.stream.blocks);
        c.stream.frames_per_block =
            detail::get_as<size_t>(s, "/stream", "frames_per_block", c.stream.frames_per_block);
        c.stream.window = detail::get_as<size_t>(s, "/stream", "window", c.stream.window);
        c.stream.capacity_blocks =
            detail::get_as<size_t>(s, "/stream", "capacity_blocks", c.stream.capacity_blocks);
        c.stream.ladder_steps =
            detail::get_as<size_t>(s, "/stream", "ladder_steps", c.stream.ladder_steps);
        c.stream.cond_id = detail::get_as<size_t>(s, "/stream", "cond_id", c.stream.cond_id);
    }
    c.stream.tokens_per_frame = c.world.tokens_per_frame;
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d, "/data",
                           {"train_clips", "heldout_clips", "train_seed", "heldout_seed"});
        c.data.train_clips = detail::get_as<size_t>(d, "/data", "train_clips",
                                                    c.data.train_clips);
        c.data.heldout_clips =
            detail::get_as<size_t>(d, "/data", "heldout_clips", c.data.heldout_clips);
        c.data.train_seed = detail::get_as<uint64_t>(d, "/data", "train_seed",
                                                     c.data.train_seed);
        c.data.heldout_seed =
            detail::get_as<uint64_t>(d, "/data", "heldout_seed", c.data.heldout_seed);
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        detail::check_keys(a, "/ablation",
                           {"w_list", "beta_list", "metric", "seeds", "eval_clips",
                            "stream_eval_clips"});
        c.ablation.w_list = detail::get_as<std::vector<size_t>>(a, "/ablation", "w_list",
                                                                c.ablation.w_list);
        c.ablation.beta_list = detail::get_as<std::vector<double>>(a, "/ablation", "beta_list",
                                                                   c.ablation.beta_list);
        c.ablation.metric = detail::get_as<std::string>(a, "/ablation", "metric",
                                                        c.ablation.metric);
        c.ablation.seeds = detail::get_as<std::vector<uint64_t>>(a, "/ablation", "seeds",
                                                                 c.ablation.seeds);
        c.ablation.eval_clips = detail::get_as<size_t>(a, "/ablation", "eval_clips",
                                                       c.ablation.eval_clips);
        c.ablation.stream_eval_clips = detail::get_as<size_t>(
            a, "/ablation", "stream_eval_clips", c.ablation.stream_eval_clips);
        if (c.ablation.metric != "sync" && c.ablation.metric != "visual" &&
            c.ablation.metric != "audio") {
            throw ConfigError("config: /ablation/metric must be sync, visual, or audio");
        }
    }
    if (j.contains("bench")) {
        const auto& b = j.at("bench");
        detail::check_keys(b, "/bench", {"k_list", "reps", "warmup"});
        c.bench.k_list = detail::get_as<std::vector<size_t>>(b, "/bench", "k_list",
                                                             c.bench.k_list);
        c.bench.reps = detail::get_as<size_t>(b, "/bench", "reps", c.bench.reps);
        c.bench.warmup = detail::get_as<size_t>(b, "/bench", "warmup", c.bench.warmup);
    }

    // cross-section consistency
    c.world.validate();
    if (c.model.d_v != c.world.d_v || c.model.d_a != c.world.d_a) {
        throw ConfigError("config: model latent dims must match the world (d_v, d_a)");
    }
    if (c.model.cond_vocab < c.world.n_conditions) {
        throw ConfigError("config: model cond_vocab smaller than world n_conditions");
    }
    c.model.validate();
    c.distill.validate();
    if (c.stream.blocks * c.stream.frames_per_block != c.world.num_video_frames) {
        throw ConfigError(
            "config: stream blocks * frames_per_block must equal world num_video_frames");
    }
    return c;
}

// Dotted-path override: "--set distill.stage1_steps=50". Values parse as
// JSON when possible, otherwise as strings.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("config: --set expects key=value, got '" + assignment + "'");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json* node = &j;
    size_t pos = 0;
    while (true) {
        const auto dot = path.find('.', pos);
        const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (key.empty()) throw ConfigError("config: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

}  // namespace dsrt
