// SPDX-License-Identifier: Apache-2.0
//
// Reward machinery for preference-weighted distillation: per-sample scores
// for K = 3 metrics (visual, audio, sync), batch standardization with the
// population (1/B) standard deviation, exponential aggregation into sample
// weights, and synthetic oracles that stand in for pretrained reward models
// at latent level. Weights are clipped to [e^-4, e^4] and clip events are
// counted so reward-hacking onset stays visible.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dsrt/ops.hpp"
#include "dsrt/synthworld.hpp"

namespace dsrt {

enum class Metric : size_t { visual = 0, audio = 1, sync = 2 };
inline constexpr size_t kNumMetrics = 3;

struct RewardConfig {
    double beta_visual = 2.0;
    double beta_audio = 2.0;
    double beta_sync = 2.0;
    double eps = 1e-8;
    double clip_lo = std::exp(-4.0);
    double clip_hi = std::exp(4.0);

    double beta(Metric k) const {
        switch (k) {
            case Metric::visual: return beta_visual;
            case Metric::audio: return beta_audio;
            default: return beta_sync;
        }
    }
    void validate() const {
        if (beta_visual < 0 || beta_audio < 0 || beta_sync < 0) {
            throw ConfigError("rewards: beta coefficients must be >= 0");
        }
        if (eps <= 0) throw ConfigError("rewards: eps must be > 0");
    }
};

struct RewardVector {
    std::vector<std::array<double, kNumMetrics>> scores;  // [i][k]
    size_t batch() const { return scores.size(); }
};

// z[i][k] = (R[i][k] - mu_k) / (sigma_k + eps), sigma_k the population
// standard deviation over the batch.
inline std::vector<std::array<double, kNumMetrics>> standardize(const RewardVector& r,
                                                                double eps) {
    const size_t b = r.batch();
    if (b == 0) throw ConfigError("standardize: empty batch");
    std::vector<std::array<double, kNumMetrics>> z(b);
    for (size_t k = 0; k < kNumMetrics; ++k) {
        double mu = 0;
        for (size_t i = 0; i < b; ++i) mu += r.scores[i][k];
        mu /= static_cast<double>(b);
        double var = 0;
        for (size_t i = 0; i < b; ++i) {
            var += (r.scores[i][k] - mu) * (r.scores[i][k] - mu);
        }
        var /= static_cast<double>(b);
        const double denom = std::sqrt(var) + eps;
        for (size_t i = 0; i < b; ++i) z[i][k] = (r.scores[i][k] - mu) / denom;
    }
    return z;
}

struct WeightResult {
    std::vector<double> w;
    size_t clipped = 0;
};

// w_i = exp(sum_k beta_k z[i][k]), clipped to the configured range. A subset
// of metrics can be selected (per-modality pairings use {visual,sync} and
// {audio,sync}).
inline WeightResult weights(const std::vector<std::array<double, kNumMetrics>>& z,
                            const RewardConfig& cfg,
                            const std::vector<Metric>& subset = {Metric::visual, Metric::audio,
                                                                 Metric::sync}) {
    cfg.validate();
    WeightResult res;
    res.w.reserve(z.size());
    const double lo = std::log(cfg.clip_lo), hi = std::log(cfg.clip_hi);
    for (const auto& zi : z) {
        double e = 0;
        for (Metric k : subset) e += cfg.beta(k) * zi[static_cast<size_t>(k)];
        if (e < lo) {
            e = lo;
            ++res.clipped;
        } else if (e > hi) {
            e = hi;
            ++res.clipped;
        }
        res.w.push_back(std::exp(e));
    }
    return res;
}

// Mean over the batch of w_i * loss_i (graph-carrying).
template <typename R>
Tensor<R> final_loss(const std::vector<double>& w,
                     const std::vector<Tensor<R>>& per_sample_losses) {
    if (w.size() != per_sample_losses.size()) {
        throw ShapeError("final_loss: " + std::to_string(w.size()) + " weights vs " +
                         std::to_string(per_sample_losses.size()) + " losses");
    }
    std::vector<Tensor<R>> scaled;
    scaled.reserve(w.size());
    for (size_t i = 0; i < w.size(); ++i) scaled.push_back(scale(per_sample_losses[i], w[i]));
    return scale(add_all(scaled), 1.0 / static_cast<double>(w.size()));
}

// ---------------------------------------------------------------------------
// Synthetic oracles. Deterministic, evaluated on detached clean latents.
// ---------------------------------------------------------------------------

inline constexpr double kWorstReward = -1e9;

// Sync: the synthetic-world alignment score.
inline double sync_reward(const Clip& clip, const WorldConfig& world) {
    return sync_lag(clip.video, clip.audio, world, clip.condition_id).score;
}

namespace detail {

// Analytic second moments of generator video at an interior frame.
struct VideoMoments {
    double variance = 0;
    double lag1_corr = 0;
};

inline VideoMoments video_reference_moments(const WorldConfig& w) {
    const double rho = w.ar_coeff;
    const size_t r = w.tokens_per_frame;
    const size_t m = r * (w.lead_delta + 1);
    auto cov_tokens = [&](long long i, long long j) { return std::pow(rho, std::abs(i - j)); };
    double var_pool = 0, cov_pool = 0;
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < m; ++j) {
            var_pool += cov_tokens(static_cast<long long>(i), static_cast<long long>(j));
            cov_pool += cov_tokens(static_cast<long long>(i),
                                   static_cast<long long>(j + r));  // next frame's window
        }
    }
    var_pool /= static_cast<double>(m * m);
    cov_pool /= static_cast<double>(m * m);
    VideoMoments out;
    const double mix2 = w.mix_scale * w.mix_scale;
    out.variance = mix2 * var_pool + w.obs_noise * w.obs_noise;
    out.lag1_corr = mix2 * cov_pool / out.variance;
    return out;
}

}  // namespace detail

// Visual: negative squared deviation of the clip's variance and lag-1
// autocorrelation from the world's analytic interior-frame moments.
inline double visual_reward(const Clip& clip, const WorldConfig& world,
                            size_t* degenerate_log = nullptr) {
    const size_t tv = clip.video.rows(), dv = clip.video.cols();
    double mu = 0;
    for (size_t i = 0; i < clip.video.numel(); ++i) mu += clip.video.at(i);
    mu /= static_cast<double>(clip.video.numel());
    double var = 0, lag = 0, lag_n = 0;
    for (size_t k = 0; k < dv; ++k) {
        for (size_t t = 0; t < tv; ++t) {
            const double x = clip.video.at(t, k) - mu;
            var += x * x;
            if (t + 1 < tv) {
                lag += x * (clip.video.at(t + 1, k) - mu);
                lag_n += 1;
            }
        }
    }
    var /= static_cast<double>(clip.video.numel());
    if (var < 1e-12) {
        if (degenerate_log) ++*degenerate_log;
        return kWorstReward;
    }
    const double ac = (lag / lag_n) / var;
    const auto ref = detail::video_reference_moments(world);
    const double dv_ = var - ref.variance;
    const double da_ = ac - ref.lag1_corr;
    return -(dv_ * dv_ + da_ * da_);
}

// Audio: negative divergence between the clip's periodogram band shares and
// the AR(rho) prior spectrum S(w) = (1-rho^2) / (1 - 2 rho cos w + rho^2),
// both restricted to four equal bands over (0, pi].
inline double audio_reward(const Clip& clip, const WorldConfig& world,
                           size_t* degenerate_log = nullptr) {
    const size_t n = clip.audio.rows(), d = clip.audio.cols();
    const size_t kmax = n / 2;
    if (kmax < 4) throw ConfigError("audio_reward: clip too short for band analysis");
    constexpr size_t kBands = 4;
    const double rho = world.ar_coeff;

    std::array<double, kBands> prior{};
    double prior_total = 0;
    for (size_t k = 1; k <= kmax; ++k) {
        const double wfreq = 2.0 * 3.14159265358979323846 * static_cast<double>(k) / static_cast<double>(n);
        const double s = (1 - rho * rho) / (1 - 2 * rho * std::cos(wfreq) + rho * rho);
        prior[(k - 1) * kBands / kmax] += s;
        prior_total += s;
    }
    for (auto& p : prior) p /= prior_total;

    std::array<double, kBands> emp{};
    double emp_total = 0;
    for (size_t j = 0; j < d; ++j) {
        for (size_t k = 1; k <= kmax; ++k) {
            double re = 0, im = 0;
            for (size_t s = 0; s < n; ++s) {
                const double ang = -2.0 * 3.14159265358979323846 * static_cast<double>(k * s) /
                                   static_cast<double>(n);
                re += clip.audio.at(s, j) * std::cos(ang);
                im += clip.audio.at(s, j) * std::sin(ang);
            }
            const double p = re * re + im * im;
            emp[(k - 1) * kBands / kmax] += p;
            emp_total += p;
        }
    }
    if (emp_total < 1e-12) {
        if (degenerate_log) ++*degenerate_log;
        return kWorstReward;
    }
    for (auto& e : emp) e /= emp_total;
    double div = 0;
    for (size_t b = 0; b < kBands; ++b) div += (emp[b] - prior[b]) * (emp[b] - prior[b]);
    return -div;
}

// Named oracle registry; custom oracles are one function (clip in, scalar
// out, world config available for reference statistics).
using RewardFn = std::function<double(const Clip&, const WorldConfig&)>;

class RewardRegistry {
public:
    static RewardRegistry& instance() {
        static RewardRegistry reg;
        return reg;
    }

    void register_fn(const std::string& name, RewardFn fn) { fns_[name] = std::move(fn); }

    RewardFn get(const std::string& name) const {
        auto it = fns_.find(name);
        if (it == fns_.end()) throw ConfigError("rewards: unknown oracle '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return fns_.count(name) > 0; }

private:
    RewardRegistry() {
        fns_["sync"] = [](const Clip& c, const WorldConfig& w) { return sync_reward(c, w); };
        fns_["visual"] = [](const Clip& c, const WorldConfig& w) { return visual_reward(c, w); };
        fns_["audio"] = [](const Clip& c, const WorldConfig& w) { return audio_reward(c, w); };
    }
    std::map<std::string, RewardFn> fns_;
};

}  // namespace dsrt
