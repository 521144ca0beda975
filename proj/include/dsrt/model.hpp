// SPDX-License-Identifier: Apache-2.0
//
// Dual-stream transformer: parallel video and audio branches joined by
// fusion blocks. Each block applies, in order: per-stream block-causal
// self-attention, condition cross-attention, cross-modal attention (video
// queries audio, then audio queries video), and a per-stream MLP. Timestep
// conditioning is an additive sinusoidal embedding plus per-site scale/shift
// modulation of the pre-attention layer norm; times are carried per token so
// committed history (t = 0) and the active block (t = tau) can coexist in
// one call. The same forward path serves the bidirectional teacher (all-ones
// masks), the masked student, and both score networks.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrt/checkpoint.hpp"
#include "dsrt/errors.hpp"
#include "dsrt/masks.hpp"
#include "dsrt/ops.hpp"
#include "dsrt/optim.hpp"
#include "dsrt/rng.hpp"

namespace dsrt {

struct ModelConfig {
    size_t depth = 4;
    size_t model_dim = 64;
    size_t heads = 4;
    size_t mlp_mult = 4;
    size_t d_v = 8;
    size_t d_a = 8;
    size_t cond_vocab = 4;
    enum class Positional { rotary, sinusoidal };
    Positional positional = Positional::rotary;
    double rope_base = 10000.0;

    void validate() const {
        if (model_dim == 0 || heads == 0 || d_v == 0 || d_a == 0 || cond_vocab == 0 ||
            mlp_mult == 0) {
            throw ConfigError("model: dims, heads, cond_vocab, mlp_mult must be positive");
        }
        if (model_dim % heads != 0) {
            throw ConfigError("model: model_dim " + std::to_string(model_dim) +
                              " not divisible by heads " + std::to_string(heads));
        }
        if (positional == Positional::rotary && (model_dim / heads) % 2 != 0) {
            throw ConfigError("model: rotary positions need an even head dim, got " +
                              std::to_string(model_dim / heads));
        }
    }
};

inline nlohmann::json model_to_json(const ModelConfig& c) {
    return nlohmann::json{
        {"depth", c.depth},
        {"model_dim", c.model_dim},
        {"heads", c.heads},
        {"mlp_mult", c.mlp_mult},
        {"d_v", c.d_v},
        {"d_a", c.d_a},
        {"cond_vocab", c.cond_vocab},
        {"positional", c.positional == ModelConfig::Positional::rotary ? "rotary" : "sinusoidal"},
        {"rope_base", c.rope_base}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.depth = j.value("depth", c.depth);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.heads = j.value("heads", c.heads);
    c.mlp_mult = j.value("mlp_mult", c.mlp_mult);
    c.d_v = j.value("d_v", c.d_v);
    c.d_a = j.value("d_a", c.d_a);
    c.cond_vocab = j.value("cond_vocab", c.cond_vocab);
    const std::string pos = j.value("positional", std::string("rotary"));
    if (pos == "rotary") {
        c.positional = ModelConfig::Positional::rotary;
    } else if (pos == "sinusoidal") {
        c.positional = ModelConfig::Positional::sinusoidal;
    } else {
        throw ConfigError("model: unknown positional scheme '" + pos + "'");
    }
    c.rope_base = j.value("rope_base", c.rope_base);
    c.validate();
    return c;
}

inline uint64_t model_config_hash(const ModelConfig& c) {
    const std::string s = model_to_json(c).dump();
    return fnv1a(s.data(), s.size());
}

// The four attention masks a forward pass consumes. Rows are the query
// positions of the call; keys span [cached history ++ active block].
struct MaskSet {
    Mask video_self;
    Mask audio_self;
    Mask v_from_a;
    Mask a_from_v;
};

inline MaskSet teacher_masks(size_t t_v, size_t t_a) {
    return MaskSet{Mask::ones(MaskKind::video_self, t_v, t_v),
                   Mask::ones(MaskKind::audio_self, t_a, t_a),
                   Mask::ones(MaskKind::v_from_a, t_v, t_a),
                   Mask::ones(MaskKind::a_from_v, t_a, t_v)};
}

inline MaskSet student_masks(const BlockLayout& layout) {
    return MaskSet{self_mask(layout, Stream::video), self_mask(layout, Stream::audio),
                   cross_modal_mask_v_from_a(layout), cross_modal_mask_a_from_v(layout)};
}

// Rolling committed-history cache. Holds post-projection (rope applied),
// per-layer, per-site key/value rows for committed tokens only; the
// provisional look-ahead block is never written here.
template <typename R>
struct KVCache {
    struct SiteKV {
        Tensor<R> k, v;  // invalid when empty
        size_t len() const { return k.valid() ? k.rows() : 0; }
    };
    struct LayerKV {
        SiteKV self_v, self_a, vfa, afv;
    };

    size_t num_layers = 0;
    size_t tokens_per_frame = 1;
    size_t capacity_frames = SIZE_MAX;
    size_t base_frame = 0;  // absolute index of the first retained frame
    size_t frames = 0;      // retained frames
    std::vector<LayerKV> layers;

    static KVCache make(size_t depth, size_t r, size_t capacity_frames = SIZE_MAX) {
        KVCache c;
        c.num_layers = depth;
        c.tokens_per_frame = r;
        c.capacity_frames = capacity_frames;
        c.layers.resize(depth);
        return c;
    }

    size_t video_len() const { return frames; }
    size_t audio_len() const { return frames * tokens_per_frame; }
    size_t committed_frames_abs() const { return base_frame + frames; }

    void validate() const {
        if (layers.size() != num_layers) {
            throw NumericError("cache: layer count " + std::to_string(layers.size()) +
                               " does not match depth " + std::to_string(num_layers));
        }
        for (const auto& l : layers) {
            if (l.self_v.len() != frames || l.afv.len() != frames ||
                l.self_a.len() != frames * tokens_per_frame ||
                l.vfa.len() != frames * tokens_per_frame) {
                throw NumericError("cache: corrupted site lengths (frames=" +
                                   std::to_string(frames) + ")");
            }
        }
    }
};

// Drop the oldest frames, keeping the last keep_last_frames; absolute
// positions of the survivors are unchanged (rope phases were applied at
// insert time from absolute indices).
template <typename R>
void evict(KVCache<R>& cache, size_t keep_last_frames) {
    if (keep_last_frames > cache.frames) {
        throw NumericError("evict: keep " + std::to_string(keep_last_frames) + " > retained " +
                           std::to_string(cache.frames));
    }
    const size_t drop = cache.frames - keep_last_frames;
    if (drop == 0) return;
    const size_t drop_tok = drop * cache.tokens_per_frame;
    NoGradScope ng;
    auto cut = [](typename KVCache<R>::SiteKV& s, size_t n) {
        if (n == 0) return;
        const size_t keep = s.k.rows() - n;
        if (keep == 0) {
            s.k = Tensor<R>();
            s.v = Tensor<R>();
        } else {
            s.k = slice_rows(s.k, n, keep);
            s.v = slice_rows(s.v, n, keep);
        }
    };
    for (auto& l : cache.layers) {
        cut(l.self_v, drop);
        cut(l.afv, drop);
        cut(l.self_a, drop_tok);
        cut(l.vfa, drop_tok);
    }
    cache.base_frame += drop;
    cache.frames = keep_last_frames;
}

// Sinusoidal features of a scalar sequence; used for flow time (scaled by
// 1000) and for the sinusoidal positional option. Fixed frequency ladder
// base^( -2j / dim ).
template <typename R>
Tensor<R> sinusoid_features(const std::vector<double>& s, size_t dim, double base = 10000.0) {
    const size_t half = dim / 2;
    Tensor<R> out = Tensor<R>::zeros({s.size(), dim});
    for (size_t i = 0; i < s.size(); ++i) {
        for (size_t j = 0; j < half; ++j) {
            const double w = std::pow(base, -2.0 * static_cast<double>(j) /
                                                static_cast<double>(dim));
            out.at(i, j) = static_cast<R>(std::sin(s[i] * w));
            out.at(i, half + j) = static_cast<R>(std::cos(s[i] * w));
        }
        if (dim % 2) out.at(i, dim - 1) = R(1);
    }
    return out;
}

// Per-call inputs. Index vectors are absolute (0-based) frame/token
// positions; they define rope phases and are validated against the cache.
template <typename R>
struct StreamInputs {
    Tensor<R> video;  // n_v x d_v
    Tensor<R> audio;  // n_a x d_a
    std::vector<double> video_t;  // flow time per video row
    std::vector<double> audio_t;  // flow time per audio row
    std::vector<size_t> video_idx;
    std::vector<size_t> audio_idx;
    size_t tokens_per_frame = 0;  // r; 0 = derive from shapes
    size_t cond_id = 0;
};

template <typename R>
struct Velocities {
    Tensor<R> video;
    Tensor<R> audio;
};

template <typename R>
class DualStreamModel {
public:
    ModelConfig cfg;
    ParamStore<R> params;

    static DualStreamModel init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        DualStreamModel m;
        m.cfg = cfg;
        Rng root(seed, 0x6D6F64656Cull);
        const size_t d = cfg.model_dim;
        auto w = [&](const std::string& name, Shape shape, double stddev) {
            Rng r = root.stream(fnv1a(name.data(), name.size()));
            m.params.add(name, stddev == 0.0 ? Tensor<R>::zeros(shape)
                                             : Tensor<R>::randn(shape, r, stddev));
        };
        auto mod = [&](const std::string& p) {
            w(p + ".scale_w", {d, d}, 0.0);
            w(p + ".scale_b", {1, d}, 0.0);
            w(p + ".shift_w", {d, d}, 0.0);
            w(p + ".shift_b", {1, d}, 0.0);
        };
        auto attn_site = [&](const std::string& p) {
            w(p + ".wq", {d, d}, 0.02);
            w(p + ".wk", {d, d}, 0.02);
            w(p + ".wv", {d, d}, 0.02);
            w(p + ".wo", {d, d}, 0.0);  // residual branches start silent
            w(p + ".bo", {1, d}, 0.0);
            mod(p + "_mod");
        };
        for (const char* stream : {"video", "audio"}) {
            const std::string s(stream);
            const size_t din = s == "video" ? cfg.d_v : cfg.d_a;
            w(s + ".in_proj.w", {din, d}, 0.02);
            w(s + ".in_proj.b", {1, d}, 0.0);
            w(s + ".time.w1", {d, d}, 0.02);
            w(s + ".time.b1", {1, d}, 0.0);
            w(s + ".time.w2", {d, d}, 0.02);
            w(s + ".time.b2", {1, d}, 0.0);
            w(s + ".cond_emb", {cfg.cond_vocab, d}, 0.02);
            mod(s + ".head_mod");
            w(s + ".head.w", {d, din}, 0.02);
            w(s + ".head.b", {1, din}, 0.0);
            // time-gated linear input skip: layer norms drop the row scale of
            // the latent, but the velocity target carries the input linearly
            // (v = eps - x0), so the head needs a direct path to it
            w(s + ".skip.w", {din, din}, 0.02);
            w(s + ".skip.gate_w", {d, din}, 0.0);
            w(s + ".skip.gate_b", {1, din}, 0.0);
        }
        for (size_t l = 0; l < cfg.depth; ++l) {
            for (const char* stream : {"video", "audio"}) {
                const std::string p = "blocks." + std::to_string(l) + "." + stream;
                attn_site(p + ".self");
                attn_site(p + ".cond");
                attn_site(p + ".cross");
                w(p + ".mlp.w1", {d, d * cfg.mlp_mult}, 0.02);
                w(p + ".mlp.b1", {1, d * cfg.mlp_mult}, 0.0);
                w(p + ".mlp.w2", {d * cfg.mlp_mult, d}, 0.0);
                w(p + ".mlp.b2", {1, d}, 0.0);
                mod(p + ".mlp_mod");
            }
        }
        return m;
    }

    // Full-sequence forward with one flow time per stream.
    Velocities<R> forward(const Tensor<R>& video, const Tensor<R>& audio, double t_video,
                          double t_audio, size_t cond_id, const MaskSet& masks,
                          FlopCounter* fc = nullptr) const {
        StreamInputs<R> in;
        in.video = video;
        in.audio = audio;
        in.video_t.assign(video.rows(), t_video);
        in.audio_t.assign(audio.rows(), t_audio);
        in.video_idx.resize(video.rows());
        in.audio_idx.resize(audio.rows());
        for (size_t i = 0; i < video.rows(); ++i) in.video_idx[i] = i;
        for (size_t i = 0; i < audio.rows(); ++i) in.audio_idx[i] = i;
        in.tokens_per_frame = video.rows() ? audio.rows() / video.rows() : 1;
        in.cond_id = cond_id;
        return forward_ctx(in, masks, nullptr, false, fc);
    }

    // Streaming forward over [cache ++ active]; append=true re-encodes the
    // active rows into the cache (commit pass).
    Velocities<R> forward_block(KVCache<R>& cache, const StreamInputs<R>& in,
                                const MaskSet& masks, bool append, FlopCounter* fc = nullptr) const {
        return forward_ctx(in, masks, &cache, append, fc);
    }

    Velocities<R> forward_ctx(const StreamInputs<R>& in, const MaskSet& masks, KVCache<R>* cache,
                              bool append, FlopCounter* fc) const {
        const size_t d = cfg.model_dim;
        const size_t nv = in.video.rows(), na = in.audio.rows();
        const size_t r = in.tokens_per_frame ? in.tokens_per_frame
                                             : (cache ? cache->tokens_per_frame : 1);

        if (in.video.cols() != cfg.d_v || in.audio.cols() != cfg.d_a) {
            throw ShapeError("forward: latents " + shape_str(in.video.shape()) + "/" +
                             shape_str(in.audio.shape()) + " do not match model dims");
        }
        if (in.video_t.size() != nv || in.audio_t.size() != na || in.video_idx.size() != nv ||
            in.audio_idx.size() != na) {
            throw ShapeError("forward: per-token time/index vectors do not match latents");
        }
        if (in.cond_id >= cfg.cond_vocab) {
            throw ConfigError("forward: condition id " + std::to_string(in.cond_id) +
                              " out of vocab " + std::to_string(cfg.cond_vocab));
        }
        size_t hv = 0, ha = 0;
        if (cache) {
            cache->validate();
            hv = cache->video_len();
            ha = cache->audio_len();
            if (nv && in.video_idx[0] != cache->committed_frames_abs()) {
                throw NumericError("forward: cache/position discontinuity (video starts at " +
                                   std::to_string(in.video_idx[0]) + ", cache ends at " +
                                   std::to_string(cache->committed_frames_abs()) + ")");
            }
            if (na && in.audio_idx[0] != cache->committed_frames_abs() * r) {
                throw NumericError("forward: cache/position discontinuity (audio)");
            }
        }
        auto check_mask = [](const Mask& m, size_t q, size_t k, const char* name) {
            if (m.query_len != q || m.key_len != k) {
                throw ShapeError(std::string("forward: mask ") + name + " is " +
                                 std::to_string(m.query_len) + "x" + std::to_string(m.key_len) +
                                 ", expected " + std::to_string(q) + "x" + std::to_string(k));
            }
        };
        check_mask(masks.video_self, nv, hv + nv, "video_self");
        check_mask(masks.audio_self, na, ha + na, "audio_self");
        check_mask(masks.v_from_a, nv, ha + na, "v_from_a");
        check_mask(masks.a_from_v, na, hv + nv, "a_from_v");

        auto P = [this](const std::string& name) -> const Tensor<R>& {
            const Tensor<R>* t = params.find(name);
            if (!t) throw Error("forward: missing parameter " + name);
            return *t;
        };

        // rope phases from absolute indices; audio shares the frame scale
        const double rr = static_cast<double>(r);
        std::vector<double> phase_v(nv), phase_a(na);
        for (size_t i = 0; i < nv; ++i) phase_v[i] = static_cast<double>(in.video_idx[i]);
        for (size_t i = 0; i < na; ++i) phase_a[i] = static_cast<double>(in.audio_idx[i]) / rr;

        // per-token time embeddings (times scaled by 1000 before the ladder)
        std::vector<double> sv(nv), sa(na);
        for (size_t i = 0; i < nv; ++i) sv[i] = 1000.0 * in.video_t[i];
        for (size_t i = 0; i < na; ++i) sa[i] = 1000.0 * in.audio_t[i];
        Tensor<R> temb_v, temb_a;
        {
            auto tf_v = sinusoid_features<R>(sv, d);
            auto tf_a = sinusoid_features<R>(sa, d);
            auto mlp2 = [&](const Tensor<R>& x, const std::string& s) {
                auto h = gelu(add_rowwise(matmul(x, P(s + ".time.w1")), P(s + ".time.b1")));
                return add_rowwise(matmul(h, P(s + ".time.w2")), P(s + ".time.b2"));
            };
            temb_v = mlp2(tf_v, "video");
            temb_a = mlp2(tf_a, "audio");
        }

        Tensor<R> xv = add(add_rowwise(matmul(in.video, P("video.in_proj.w")),
                                       P("video.in_proj.b")),
                           temb_v);
        Tensor<R> xa = add(add_rowwise(matmul(in.audio, P("audio.in_proj.w")),
                                       P("audio.in_proj.b")),
                           temb_a);
        if (cfg.positional == ModelConfig::Positional::sinusoidal) {
            xv = add(xv, sinusoid_features<R>(phase_v, d));
            xa = add(xa, sinusoid_features<R>(phase_a, d));
        }
        const bool use_rope = cfg.positional == ModelConfig::Positional::rotary;
        const size_t dh = d / cfg.heads;

        auto modulated = [&](const Tensor<R>& x, const Tensor<R>& temb, const std::string& mp) {
            auto sc = add_rowwise(matmul(temb, P(mp + ".scale_w")), P(mp + ".scale_b"));
            auto sh = add_rowwise(matmul(temb, P(mp + ".shift_w")), P(mp + ".shift_b"));
            return add(mul(layer_norm(x), add_scalar(sc, 1.0)), sh);
        };

        auto apply_rope = [&](Tensor<R> t, const std::vector<double>& phases) {
            return use_rope ? rope(t, phases, dh, cfg.rope_base) : t;
        };

        // generic attention site over [hist ++ active] keys. Cross-modal
        // values project the raw residual stream: normalizing every source
        // token by its own scale would distort the pooled mixture the video
        // stream depends on linearly.
        auto site = [&](Tensor<R>& x, const Tensor<R>& temb, const std::string& p,
                        const Tensor<R>& key_src, const std::vector<double>& qph,
                        const std::vector<double>& kph, const Mask& mask,
                        typename KVCache<R>::SiteKV* hist, bool allow_empty = false) {
            auto xn = modulated(x, temb, p + "_mod");
            auto q = apply_rope(matmul(xn, P(p + ".wq")), qph);
            const bool self = key_src.id() == x.id();
            auto src_n = self ? xn : layer_norm(key_src);
            auto k_act = apply_rope(matmul(src_n, P(p + ".wk")), kph);
            auto v_act = matmul(self ? xn : key_src, P(p + ".wv"));
            Tensor<R> K = (hist && hist->len() > 0) ? concat_rows<R>({hist->k, k_act}) : k_act;
            Tensor<R> V = (hist && hist->len() > 0) ? concat_rows<R>({hist->v, v_act}) : v_act;
            MaskView mv{mask.bits.data(), mask.query_len, mask.key_len};
            auto att = attention(q, K, V, mv, cfg.heads, fc, allow_empty);
            x = add(x, add_rowwise(matmul(att, P(p + ".wo")), P(p + ".bo")));
            if (hist && append) {
                hist->k = K;
                hist->v = V;
            }
        };

        auto cond_site = [&](Tensor<R>& x, const Tensor<R>& temb, const std::string& p,
                             const std::string& stream, size_t n) {
            auto xn = modulated(x, temb, p + "_mod");
            auto q = matmul(xn, P(p + ".wq"));
            auto row = embedding_row(P(stream + ".cond_emb"), in.cond_id);
            auto k = matmul(row, P(p + ".wk"));
            auto v = matmul(row, P(p + ".wv"));
            Mask ones = Mask::ones(MaskKind::cond_cross, n, 1);
            MaskView mv{ones.bits.data(), n, 1};
            auto att = attention(q, k, v, mv, cfg.heads, fc);
            x = add(x, add_rowwise(matmul(att, P(p + ".wo")), P(p + ".bo")));
        };

        auto mlp_site = [&](Tensor<R>& x, const Tensor<R>& temb, const std::string& p) {
            auto xn = modulated(x, temb, p + "_mod");
            auto h = gelu(add_rowwise(matmul(xn, P(p + ".w1")), P(p + ".b1")));
            x = add(x, add_rowwise(matmul(h, P(p + ".w2")), P(p + ".b2")));
        };

        for (size_t l = 0; l < cfg.depth; ++l) {
            const std::string bv = "blocks." + std::to_string(l) + ".video";
            const std::string ba = "blocks." + std::to_string(l) + ".audio";
            typename KVCache<R>::LayerKV* ck = cache ? &cache->layers[l] : nullptr;

            site(xv, temb_v, bv + ".self", xv, phase_v, phase_v, masks.video_self,
                 ck ? &ck->self_v : nullptr);
            site(xa, temb_a, ba + ".self", xa, phase_a, phase_a, masks.audio_self,
                 ck ? &ck->self_a : nullptr);
            cond_site(xv, temb_v, bv + ".cond", "video", nv);
            cond_site(xa, temb_a, ba + ".cond", "audio", na);
            site(xv, temb_v, bv + ".cross", xa, phase_v, phase_a, masks.v_from_a,
                 ck ? &ck->vfa : nullptr);
            site(xa, temb_a, ba + ".cross", xv, phase_a, phase_v, masks.a_from_v,
                 ck ? &ck->afv : nullptr, /*allow_empty=*/true);
            mlp_site(xv, temb_v, bv + ".mlp");
            mlp_site(xa, temb_a, ba + ".mlp");
        }

        auto head = [&](const Tensor<R>& x, const Tensor<R>& temb, const Tensor<R>& latent,
                        const std::string& s) {
            auto core = add_rowwise(matmul(modulated(x, temb, s + ".head_mod"), P(s + ".head.w")),
                                    P(s + ".head.b"));
            auto gate = add_rowwise(matmul(temb, P(s + ".skip.gate_w")), P(s + ".skip.gate_b"));
            return add(core, mul(matmul(latent, P(s + ".skip.w")), gate));
        };
        Velocities<R> out;
        out.video = head(xv, temb_v, in.video, "video");
        out.audio = head(xa, temb_a, in.audio, "audio");
        if (cache && append) cache->frames += nv;
        return out;
    }
};

// Checkpoint pair: <base>.dsrt (parameters) + <base>.json sidecar carrying
// the config and its hash; loads refuse a sidecar whose hash does not match
// its own config block or the expected config.
template <typename R>
void save_model(const DualStreamModel<R>& m, const std::filesystem::path& base) {
    save_tensors(std::filesystem::path(base.string() + ".dsrt"), m.params.named());
    nlohmann::json side{{"model", model_to_json(m.cfg)},
                        {"config_hash", model_config_hash(m.cfg)}};
    std::ofstream f(base.string() + ".json", std::ios::trunc);
    if (!f) throw IoError("model: cannot write sidecar " + base.string() + ".json");
    f << side.dump(2) << "\n";
}

template <typename R>
DualStreamModel<R> load_model(const std::filesystem::path& base,
                              const ModelConfig* expected = nullptr) {
    std::ifstream f(base.string() + ".json");
    if (!f) throw PrereqError("model: missing checkpoint sidecar " + base.string() + ".json");
    auto side = nlohmann::json::parse(f);
    ModelConfig cfg = model_from_json(side.at("model"));
    const uint64_t declared = side.at("config_hash").get<uint64_t>();
    if (declared != model_config_hash(cfg)) {
        throw ConfigError("model: sidecar hash does not match its config block: " +
                          base.string());
    }
    if (expected && model_config_hash(*expected) != declared) {
        throw ConfigError("model: checkpoint config mismatch for " + base.string());
    }
    auto m = DualStreamModel<R>::init(cfg, 0);
    m.params.load_named(load_tensors<R>(std::filesystem::path(base.string() + ".dsrt")));
    return m;
}

}  // namespace dsrt
