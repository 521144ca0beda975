// SPDX-License-Identifier: Apache-2.0
//
// Synthetic coupled latent world. Audio tokens follow a stationary AR(1)
// per latent dimension (unit marginal variance); video frame t is a fixed
// linear image of the mean over audio tokens aligned with frames
// t .. t+delta plus observation noise:
//
//     video[t] = G_c * mean(tokens of frames t..min(t+delta, T_v)) + sigma * xi
//
// The lead time delta and the linear-Gaussian structure make the minimum
// achievable video-prediction error under an audio visibility window W a
// closed-form quantity (bayes_floor), which is what the window ablation is
// checked against.
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrt/checkpoint.hpp"
#include "dsrt/errors.hpp"
#include "dsrt/rng.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

struct WorldConfig {
    size_t d_a = 8;
    size_t d_v = 8;
    size_t tokens_per_frame = 5;  // r
    size_t num_video_frames = 16; // T_v per clip
    size_t lead_delta = 1;        // audio->video lead, in frames
    double ar_coeff = 0.9;        // rho
    double obs_noise = 0.05;      // sigma
    uint64_t mixing_seed = 7;
    size_t n_conditions = 4;      // world variants (distinct mixing matrices)
    double mix_scale = 1.0;       // row norm of every mixing matrix

    size_t audio_tokens() const { return tokens_per_frame * num_video_frames; }

    void validate() const {
        if (d_a == 0 || d_v == 0 || tokens_per_frame == 0 || num_video_frames == 0 ||
            n_conditions == 0) {
            throw ConfigError("world: dims, r, T_v, n_conditions must be positive");
        }
        if (lead_delta + 1 > num_video_frames) {
            throw ConfigError("world: lead_delta=" + std::to_string(lead_delta) +
                              " must be <= T_v-1=" + std::to_string(num_video_frames - 1));
        }
        if (ar_coeff < 0.0 || ar_coeff >= 1.0) {
            throw ConfigError("world: ar_coeff must be in [0,1)");
        }
        if (obs_noise < 0.0) throw ConfigError("world: obs_noise must be >= 0");
    }
};

struct Clip {
    Tensor<double> audio;  // T_a x d_a
    Tensor<double> video;  // T_v x d_v
    int condition_id = 0;
};

struct Dataset {
    WorldConfig config;
    std::vector<Clip> clips;
};

// Condition-specific mixing matrix; rows normalized to exactly mix_scale so
// the floor formula below is uniform across output dimensions.
inline Tensor<double> mixing_matrix(const WorldConfig& cfg, int condition_id) {
    Rng rng(cfg.mixing_seed, static_cast<uint64_t>(condition_id));
    auto g = Tensor<double>::randn({cfg.d_v, cfg.d_a}, rng);
    for (size_t i = 0; i < cfg.d_v; ++i) {
        double n2 = 0;
        for (size_t j = 0; j < cfg.d_a; ++j) n2 += g.at(i, j) * g.at(i, j);
        const double s = cfg.mix_scale / std::sqrt(n2);
        for (size_t j = 0; j < cfg.d_a; ++j) g.at(i, j) *= s;
    }
    return g;
}

// Mean over the audio tokens of 1-based frames [f0, f1].
inline void pool_frames(const Tensor<double>& audio, size_t r, size_t f0, size_t f1,
                        std::vector<double>& out) {
    const size_t d = audio.cols();
    out.assign(d, 0.0);
    const size_t s0 = r * (f0 - 1), s1 = r * f1;  // 0-based token range [s0, s1)
    for (size_t s = s0; s < s1; ++s) {
        for (size_t j = 0; j < d; ++j) out[j] += audio.at(s, j);
    }
    for (size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(s1 - s0);
}

inline Clip generate_clip(const WorldConfig& cfg, const Tensor<double>& g, Rng rng,
                          int condition_id) {
    const size_t ta = cfg.audio_tokens();
    Clip clip;
    clip.condition_id = condition_id;
    clip.audio = Tensor<double>::zeros({ta, cfg.d_a});
    const double rho = cfg.ar_coeff;
    const double innov = std::sqrt(1.0 - rho * rho);
    for (size_t j = 0; j < cfg.d_a; ++j) {
        double x = rng.normal();
        clip.audio.at(0, j) = x;
        for (size_t s = 1; s < ta; ++s) {
            x = rho * x + innov * rng.normal();
            clip.audio.at(s, j) = x;
        }
    }
    clip.video = Tensor<double>::zeros({cfg.num_video_frames, cfg.d_v});
    std::vector<double> pooled;
    for (size_t t = 1; t <= cfg.num_video_frames; ++t) {
        const size_t f1 = std::min(t + cfg.lead_delta, cfg.num_video_frames);
        pool_frames(clip.audio, cfg.tokens_per_frame, t, f1, pooled);
        for (size_t k = 0; k < cfg.d_v; ++k) {
            double v = 0;
            for (size_t j = 0; j < cfg.d_a; ++j) v += g.at(k, j) * pooled[j];
            clip.video.at(t - 1, k) = v + cfg.obs_noise * rng.normal();
        }
    }
    return clip;
}

// Deterministic in (config, seed): clip i uses child stream i and condition
// i mod n_conditions.
inline Dataset generate(const WorldConfig& cfg, uint64_t seed, size_t n_clips) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.clips.reserve(n_clips);
    std::vector<Tensor<double>> gs;
    for (size_t c = 0; c < cfg.n_conditions; ++c) gs.push_back(mixing_matrix(cfg, static_cast<int>(c)));
    Rng root(seed, 0);
    for (size_t i = 0; i < n_clips; ++i) {
        const int cond = static_cast<int>(i % cfg.n_conditions);
        ds.clips.push_back(generate_clip(cfg, gs[cond], root.stream(i + 1), cond));
    }
    return ds;
}

// Minimum achievable per-element video MSE when predicting video[t] from all
// audio tokens s <= r(t+W). The AR(1) chain is Markov, so conditioning on
// the visible prefix equals conditioning on the last visible token; the
// conditional covariance of hidden tokens i,j steps ahead is
//   c(i,j) = (1-rho^2) * sum_{l=1..min(i,j)} rho^{(i-l)+(j-l)}
// and the pooled hidden mass propagates through the (row-normalized) mixing
// matrix as a factor mix_scale^2. Monotone non-increasing in W and exactly
// flat for W >= delta.
inline double bayes_floor(const WorldConfig& cfg, size_t window_w) {
    cfg.validate();
    const double rho = cfg.ar_coeff;
    const size_t r = cfg.tokens_per_frame;
    double acc = 0;
    for (size_t t = 1; t <= cfg.num_video_frames; ++t) {
        const size_t delta_eff = std::min(cfg.lead_delta, cfg.num_video_frames - t);
        const size_t m_pool = r * (delta_eff + 1);
        if (window_w >= delta_eff) continue;  // everything pooled is visible
        const size_t m_hidden = r * (delta_eff - window_w);
        double v = 0;
        for (size_t i = 1; i <= m_hidden; ++i) {
            for (size_t j = 1; j <= m_hidden; ++j) {
                const size_t lmax = std::min(i, j);
                double c = 0;
                for (size_t l = 1; l <= lmax; ++l) {
                    c += std::pow(rho, static_cast<double>(i - l)) *
                         std::pow(rho, static_cast<double>(j - l));
                }
                v += (1.0 - rho * rho) * c;
            }
        }
        acc += v / (static_cast<double>(m_pool) * static_cast<double>(m_pool));
    }
    acc /= static_cast<double>(cfg.num_video_frames);
    return cfg.mix_scale * cfg.mix_scale * acc + cfg.obs_noise * cfg.obs_noise;
}

struct SyncResult {
    int lag = 0;
    double score = 0;
    std::array<double, 7> correlations{};  // k = -3..3
};

// Correlation of video[t] against the projected single-frame audio pool at
// frame t+k, for k in [-3, 3]. Population correlations tie exactly across
// lags 0..delta (mean pooling), so the argmax reports the largest lag within
// a small epsilon of the peak: the lead time, not the earliest match.
inline SyncResult sync_lag(const Tensor<double>& video, const Tensor<double>& audio,
                           const WorldConfig& cfg, int condition_id = 0) {
    const size_t tv = video.rows(), dv = video.cols();
    if (audio.rows() != cfg.tokens_per_frame * tv || audio.cols() != cfg.d_a || dv != cfg.d_v) {
        throw ShapeError("sync_lag: clip shapes " + shape_str(video.shape()) + " / " +
                         shape_str(audio.shape()) + " do not match the world config");
    }
    const auto g = mixing_matrix(cfg, condition_id);
    // projected per-frame pools
    Tensor<double> proj = Tensor<double>::zeros({tv, dv});
    std::vector<double> pooled;
    for (size_t f = 1; f <= tv; ++f) {
        pool_frames(audio, cfg.tokens_per_frame, f, f, pooled);
        for (size_t k = 0; k < dv; ++k) {
            double v = 0;
            for (size_t j = 0; j < cfg.d_a; ++j) v += g.at(k, j) * pooled[j];
            proj.at(f - 1, k) = v;
        }
    }

    auto pearson = [&](int k) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        size_t n = 0;
        for (size_t t = 0; t < tv; ++t) {
            const long long u = static_cast<long long>(t) + k;
            if (u < 0 || u >= static_cast<long long>(tv)) continue;
            for (size_t c = 0; c < dv; ++c) {
                const double x = video.at(t, c);
                const double y = proj.at(static_cast<size_t>(u), c);
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
                ++n;
            }
        }
        const double nn = static_cast<double>(n);
        const double vx = sxx - sx * sx / nn;
        const double vy = syy - sy * sy / nn;
        if (vx <= 0.0 || vy <= 0.0) {
            throw NumericError("sync_lag: zero-variance input");
        }
        return (sxy - sx * sy / nn) / std::sqrt(vx * vy);
    };

    SyncResult res;
    double best = -2;
    for (int k = -3; k <= 3; ++k) {
        const double c = pearson(k);
        res.correlations[static_cast<size_t>(k + 3)] = c;
        best = std::max(best, c);
    }
    const double tie_eps = std::max(0.01, 0.02 * std::abs(best));
    for (int k = -3; k <= 3; ++k) {
        if (res.correlations[static_cast<size_t>(k + 3)] >= best - tie_eps) res.lag = k;
    }
    double off = 0;
    const double at_delta = res.correlations[static_cast<size_t>(
        static_cast<int>(cfg.lead_delta) + 3)];
    for (int k = -3; k <= 3; ++k) {
        if (k != static_cast<int>(cfg.lead_delta)) off += res.correlations[static_cast<size_t>(k + 3)];
    }
    res.score = at_delta - off / 6.0;
    return res;
}

// ---------------------------------------------------------------------------
// Dataset files: a JSONL index (one clip descriptor per line) next to a DSRT
// tensor container holding the payloads.
// ---------------------------------------------------------------------------

inline nlohmann::json world_to_json(const WorldConfig& c) {
    return nlohmann::json{{"d_a", c.d_a},
                          {"d_v", c.d_v},
                          {"tokens_per_frame", c.tokens_per_frame},
                          {"num_video_frames", c.num_video_frames},
                          {"lead_delta", c.lead_delta},
                          {"ar_coeff", c.ar_coeff},
                          {"obs_noise", c.obs_noise},
                          {"mixing_seed", c.mixing_seed},
                          {"n_conditions", c.n_conditions},
                          {"mix_scale", c.mix_scale}};
}

inline WorldConfig world_from_json(const nlohmann::json& j) {
    WorldConfig c;
    c.d_a = j.value("d_a", c.d_a);
    c.d_v = j.value("d_v", c.d_v);
    c.tokens_per_frame = j.value("tokens_per_frame", c.tokens_per_frame);
    c.num_video_frames = j.value("num_video_frames", c.num_video_frames);
    c.lead_delta = j.value("lead_delta", c.lead_delta);
    c.ar_coeff = j.value("ar_coeff", c.ar_coeff);
    c.obs_noise = j.value("obs_noise", c.obs_noise);
    c.mixing_seed = j.value("mixing_seed", c.mixing_seed);
    c.n_conditions = j.value("n_conditions", c.n_conditions);
    c.mix_scale = j.value("mix_scale", c.mix_scale);
    c.validate();
    return c;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    NamedTensors<double> payload;
    std::ofstream idx(dir / "clips.jsonl", std::ios::trunc);
    if (!idx) throw IoError("dataset: cannot write " + (dir / "clips.jsonl").string());
    for (size_t i = 0; i < ds.clips.size(); ++i) {
        const std::string base = "clip" + std::to_string(i);
        payload.emplace_back(base + "/audio", ds.clips[i].audio);
        payload.emplace_back(base + "/video", ds.clips[i].video);
        nlohmann::json line{{"clip", i},
                            {"condition_id", ds.clips[i].condition_id},
                            {"audio", base + "/audio"},
                            {"video", base + "/video"}};
        idx << line.dump() << "\n";
    }
    std::ofstream meta(dir / "world.json", std::ios::trunc);
    meta << world_to_json(ds.config).dump(2) << "\n";
    save_tensors(dir / "clips.dsrt", payload);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "world.json");
    if (!meta) throw PrereqError("dataset: missing " + (dir / "world.json").string());
    Dataset ds;
    ds.config = world_from_json(nlohmann::json::parse(meta));
    auto payload = load_tensors<double>(dir / "clips.dsrt");
    auto find = [&payload](const std::string& name) -> const Tensor<double>& {
        for (const auto& [n, t] : payload) {
            if (n == name) return t;
        }
        throw IoError("dataset: index references missing payload entry " + name);
    };
    std::ifstream idx(dir / "clips.jsonl");
    if (!idx) throw PrereqError("dataset: missing " + (dir / "clips.jsonl").string());
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        Clip clip;
        clip.condition_id = j.at("condition_id").get<int>();
        clip.audio = find(j.at("audio").get<std::string>());
        clip.video = find(j.at("video").get<std::string>());
        ds.clips.push_back(std::move(clip));
    }
    return ds;
}

}  // namespace dsrt
