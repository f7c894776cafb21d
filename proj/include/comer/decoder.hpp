// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "comer/attention.hpp"
#include "comer/positional.hpp"

namespace comer {

// Source of the coverage signal feeding the attention refinement:
//   none   - no refinement
//   self   - a layer's own raw cross-attention
//   cross  - the refined cross-attention of the previous layer
//   fusion - both, stacked on the channel axis
enum class CoverageMode { none, self, cross, fusion };

inline const char* to_string(CoverageMode m) {
    switch (m) {
        case CoverageMode::none: return "none";
        case CoverageMode::self: return "self";
        case CoverageMode::cross: return "cross";
        case CoverageMode::fusion: return "fusion";
    }
    return "?";
}

inline CoverageMode coverage_mode_from(const std::string& s) {
    if (s == "none") return CoverageMode::none;
    if (s == "self") return CoverageMode::self;
    if (s == "cross") return CoverageMode::cross;
    if (s == "fusion") return CoverageMode::fusion;
    throw ConfigError("unknown coverage mode '" + s + "' (expected none|self|cross|fusion)");
}

struct DecoderConfig {
    Index d_model = 256;
    Index heads = 8;
    Index layers = 3;
    Index d_ff = 1024;
    double dropout = 0.3;
    Index vocab = 0;
    CoverageMode mode = CoverageMode::fusion;
    Index arm_kernel = 5;
    Index arm_channels = 32;
    Index arm_start_layer = 1;  // refinement applies to layers >= this index
    bool arm_shared = true;
    bool scale_embedding = true;

    Index arm_h_in() const { return mode == CoverageMode::fusion ? 2 * heads : heads; }
};

template <typename T>
struct DecoderLayerParams {
    MhaParams<T> self_attn, cross_attn;
    LinearParams<T> ff1, ff2;
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;

    DecoderLayerParams(Index d, Index heads, Index d_ff)
        : self_attn(MhaParams<T>::zeros(d, heads)),
          cross_attn(MhaParams<T>::zeros(d, heads)),
          ff1(LinearParams<T>::zeros(d, d_ff)),
          ff2(LinearParams<T>::zeros(d_ff, d)),
          ln1_g(Tensor<T>::ones({d})),
          ln1_b(Tensor<T>::zeros({d})),
          ln2_g(Tensor<T>::ones({d})),
          ln2_b(Tensor<T>::zeros({d})),
          ln3_g(Tensor<T>::ones({d})),
          ln3_b(Tensor<T>::zeros({d})) {}

    template <typename Fn>
    void visit(const std::string& p, Fn&& fn) {
        auto mha = [&](const std::string& q, MhaParams<T>& m) {
            fn(q + ".q.w", m.q.w);
            fn(q + ".q.b", m.q.b);
            fn(q + ".k.w", m.k.w);
            fn(q + ".k.b", m.k.b);
            fn(q + ".v.w", m.v.w);
            fn(q + ".v.b", m.v.b);
            fn(q + ".o.w", m.o.w);
            fn(q + ".o.b", m.o.b);
        };
        mha(p + ".self", self_attn);
        mha(p + ".cross", cross_attn);
        fn(p + ".ff1.w", ff1.w);
        fn(p + ".ff1.b", ff1.b);
        fn(p + ".ff2.w", ff2.w);
        fn(p + ".ff2.b", ff2.b);
        fn(p + ".ln1.gamma", ln1_g);
        fn(p + ".ln1.beta", ln1_b);
        fn(p + ".ln2.gamma", ln2_g);
        fn(p + ".ln2.beta", ln2_b);
        fn(p + ".ln3.gamma", ln3_g);
        fn(p + ".ln3.beta", ln3_b);
    }
};

template <typename T>
struct DecoderParams {
    DecoderConfig cfg;
    Tensor<T> embed;  // [vocab, d_model]
    std::vector<DecoderLayerParams<T>> layers;
    LinearParams<T> out_proj;  // [d_model, vocab]
    std::vector<ArmParams<T>> arms;

    explicit DecoderParams(const DecoderConfig& c)
        : cfg(c), embed(Tensor<T>::zeros({c.vocab, c.d_model})), out_proj(LinearParams<T>::zeros(c.d_model, c.vocab)) {
        check_as<ConfigError>(c.vocab > 0, "decoder: vocabulary size not set");
        check_as<ConfigError>(c.layers >= 1, "decoder: need at least one layer");
        if (c.mode == CoverageMode::cross || c.mode == CoverageMode::fusion)
            check_as<ConfigError>(c.arm_start_layer >= 1,
                                  "decoder: cross/fusion coverage needs a preceding layer, start layer must be >= 1");
        if (c.mode != CoverageMode::none)
            check_as<ConfigError>(c.arm_start_layer < c.layers, "decoder: refinement start layer beyond last layer");
        for (Index j = 0; j < c.layers; ++j) layers.emplace_back(c.d_model, c.heads, c.d_ff);
        if (c.mode != CoverageMode::none) {
            Index n = c.arm_shared ? 1 : c.layers - c.arm_start_layer;
            for (Index i = 0; i < n; ++i) arms.emplace_back(c.arm_kernel, c.arm_h_in(), c.arm_channels, c.heads);
        }
    }

    bool layer_uses_arm(Index j) const { return cfg.mode != CoverageMode::none && j >= cfg.arm_start_layer; }
    ArmParams<T>& arm_for(Index j) {
        check_as<StateError>(layer_uses_arm(j), "decoder: layer has no refinement");
        return cfg.arm_shared ? arms[0] : arms[size_t(j - cfg.arm_start_layer)];
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".embed", embed);
        for (size_t j = 0; j < layers.size(); ++j) layers[j].visit(prefix + ".layer" + std::to_string(j), fn);
        for (size_t i = 0; i < arms.size(); ++i) {
            std::string p = prefix + ".arm" + std::to_string(i);
            fn(p + ".kernel", arms[i].kernel);
            fn(p + ".bias", arms[i].bias);
            fn(p + ".proj", arms[i].proj);
            fn(p + ".bn.gamma", arms[i].bn_gamma);
            fn(p + ".bn.beta", arms[i].bn_beta);
        }
        fn(prefix + ".out.w", out_proj.w);
        fn(prefix + ".out.b", out_proj.b);
    }

    template <typename Fn>
    void visit_norm(const std::string& prefix, Fn&& fn) {
        for (size_t i = 0; i < arms.size(); ++i) fn(prefix + ".arm" + std::to_string(i) + ".bn", arms[i].bn);
    }
};

// Per-layer cross-attention record of a decode pass: [batch, heads, T, L]
// each; refinement holds the subtracted term R (undefined where no
// refinement ran).
template <typename T>
struct DecodeTrace {
    std::vector<Tensor<T>> raw;
    std::vector<Tensor<T>> refined;
    std::vector<Tensor<T>> refinement;
};

namespace detail {

template <typename T>
struct ProjectedHeads {
    Tensor<T> q, k, v;
};

template <typename T>
ProjectedHeads<T> project_qkv(const MhaParams<T>& p, const Tensor<T>& q_in, const Tensor<T>& kv_in) {
    return {split_heads(linear(q_in, p.q), p.heads), split_heads(linear(kv_in, p.k), p.heads),
            split_heads(linear(kv_in, p.v), p.heads)};
}

template <typename T>
struct CrossOut {
    Tensor<T> out;         // [batch, T, d_model]
    Tensor<T> refined;     // == raw when no refinement ran
    Tensor<T> refinement;  // undefined when no refinement ran
};

// Applies the (optional) coverage refinement to masked scores and attends.
// cov is the exclusive coverage of the refinement source on the image grid,
// [batch * T, h_img, w_img, h_in].
template <typename T>
CrossOut<T> refine_and_attend(DecoderParams<T>& dec, Index layer, const Tensor<T>& e_masked, const Tensor<T>& raw,
                              const Tensor<T>& v_proj, const BoolMask& key, const std::optional<Tensor<T>>& cov,
                              bool training) {
    Tensor<T> refined = raw;
    Tensor<T> refinement;
    if (cov.has_value()) {
        Index b = raw.dim(0), steps = raw.dim(2), l = raw.dim(3);
        ArmParams<T>& arm = dec.arm_for(layer);
        Tensor<T> r = arm_phi(arm, *cov, training);  // [batch*T, h_img, w_img, heads]
        refinement = permute(reshape(r, {b, steps, l, arm.heads()}), {0, 3, 1, 2});
        refined = softmax(apply_mask(sub(e_masked, refinement), key), -1);
    }
    Tensor<T> out = linear(merge_heads(matmul(refined, v_proj)), dec.layers[size_t(layer)].cross_attn.o);
    return {out, refined, refinement};
}

// Refinement source stack for one layer, from its own raw attention and the
// previous layer's refined attention (both [batch, heads, T, L]).
template <typename T>
Tensor<T> coverage_source(CoverageMode mode, const Tensor<T>& raw, const Tensor<T>& prev_refined) {
    switch (mode) {
        case CoverageMode::self: return raw;
        case CoverageMode::cross: return prev_refined;
        case CoverageMode::fusion: return concat({raw, prev_refined}, 1);
        case CoverageMode::none: break;
    }
    throw StateError("coverage_source: no refinement in mode none");
}

}  // namespace detail

// Teacher-forced decode of `steps` tokens per batch row (row-major flat ids).
// memory: [batch, L, d_model]; key: [batch, 1, 1, L]; the attention grid is
// h_img x w_img with h_img * w_img == L. Returns logits [batch, steps, vocab].
template <typename T>
Tensor<T> decode_parallel(DecoderParams<T>& dec, const Tensor<T>& memory, const BoolMask& key, Index h_img,
                          Index w_img, const std::vector<Index>& tokens, Index steps, bool training, Rng& rng,
                          DecodeTrace<T>* trace = nullptr) {
    const DecoderConfig& cfg = dec.cfg;
    check_as<DimensionError>(memory.rank() == 3 && memory.dim(2) == cfg.d_model,
                             "decode: memory must be [batch, L, d_model]");
    Index batch = memory.dim(0), l = memory.dim(1);
    check_as<DimensionError>(h_img * w_img == l, "decode: attention grid does not cover memory length");
    check_as<UsageError>(steps >= 1 && Index(tokens.size()) == batch * steps, "decode: token buffer mismatch");

    Tensor<T> x = reshape(embedding(dec.embed, tokens), {batch, steps, cfg.d_model});
    if (cfg.scale_embedding) x = scale(x, T(std::sqrt(double(cfg.d_model))));
    x = add(x, word_pe<T>(steps, cfg.d_model));
    x = dropout(x, cfg.dropout, training, rng);

    BoolMask causal = causal_mask(steps);
    Tensor<T> prev_refined;  // refined attention of the previous layer
    for (Index j = 0; j < cfg.layers; ++j) {
        auto& lp = dec.layers[size_t(j)];
        // self attention over the prefix
        auto sh = detail::project_qkv(lp.self_attn, x, x);
        Tensor<T> sa = softmax(apply_mask(attention_scores(sh.q, sh.k), causal), -1);
        Tensor<T> so = linear(merge_heads(matmul(sa, sh.v)), lp.self_attn.o);
        x = layernorm(add(x, dropout(so, cfg.dropout, training, rng)), lp.ln1_g, lp.ln1_b);

        // cross attention with coverage refinement
        auto ch = detail::project_qkv(lp.cross_attn, x, memory);
        Tensor<T> e = apply_mask(attention_scores(ch.q, ch.k), key);
        Tensor<T> raw = softmax(e, -1);
        std::optional<Tensor<T>> cov;
        if (dec.layer_uses_arm(j)) {
            Tensor<T> src = detail::coverage_source(cfg.mode, raw, prev_refined);
            Tensor<T> c = cumsum_exclusive(permute(src, {0, 2, 3, 1}), 1);  // [batch, steps, L, h_in]
            cov = reshape(c, {batch * steps, h_img, w_img, cfg.arm_h_in()});
        }
        auto co = detail::refine_and_attend(dec, j, e, raw, ch.v, key, cov, training);
        prev_refined = co.refined;
        if (trace) {
            trace->raw.push_back(raw);
            trace->refined.push_back(co.refined);
            trace->refinement.push_back(co.refinement);
        }
        x = layernorm(add(x, dropout(co.out, cfg.dropout, training, rng)), lp.ln2_g, lp.ln2_b);

        // position-wise feed-forward
        Tensor<T> f = linear(relu(linear(x, lp.ff1)), lp.ff2);
        x = layernorm(add(x, dropout(f, cfg.dropout, training, rng)), lp.ln3_g, lp.ln3_b);
    }
    return linear(x, dec.out_proj);
}

// ---------------------------------------------------------------------------
// Incremental decoding. The cache carries, per layer, the growing self-
// attention keys/values, the fixed projected memory, and the running
// coverage sum of the refinement source over past steps (exclusive of the
// current one). decode_step at position t reproduces column t of
// decode_parallel in eval mode.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerCache {
    Tensor<T> self_k, self_v;    // [batch, heads, t, d_k]
    Tensor<T> cross_k, cross_v;  // [batch, heads, L, d_k]
    Tensor<T> cov_sum;           // [batch, L, h_in]
};

template <typename T>
struct DecodeCache {
    std::vector<LayerCache<T>> layers;
    Index t = 0;
    Index batch = 0;

    // Hypothesis reordering: keep the given batch rows (repetition allowed).
    void reorder(const std::vector<Index>& rows) {
        NoGradGuard ng;
        for (auto& lc : layers) {
            if (lc.self_k.defined()) {
                lc.self_k = index_select0(lc.self_k, rows);
                lc.self_v = index_select0(lc.self_v, rows);
            }
            lc.cross_k = index_select0(lc.cross_k, rows);
            lc.cross_v = index_select0(lc.cross_v, rows);
            if (lc.cov_sum.defined()) lc.cov_sum = index_select0(lc.cov_sum, rows);
        }
        batch = Index(rows.empty() ? 0 : rows.size());
    }
};

template <typename T>
DecodeCache<T> make_decode_cache(DecoderParams<T>& dec, const Tensor<T>& memory) {
    NoGradGuard ng;
    DecodeCache<T> cache;
    cache.batch = memory.dim(0);
    Index l = memory.dim(1);
    for (Index j = 0; j < dec.cfg.layers; ++j) {
        auto& lp = dec.layers[size_t(j)];
        LayerCache<T> lc;
        lc.cross_k = split_heads(linear(memory, lp.cross_attn.k), dec.cfg.heads);
        lc.cross_v = split_heads(linear(memory, lp.cross_attn.v), dec.cfg.heads);
        if (dec.layer_uses_arm(j)) lc.cov_sum = Tensor<T>::zeros({cache.batch, l, dec.cfg.arm_h_in()});
        cache.layers.push_back(std::move(lc));
    }
    return cache;
}

// One decode step: consumes one token per batch row, returns [batch, vocab]
// logits for the next position. Eval-mode only; records no graph.
template <typename T>
Tensor<T> decode_step(DecoderParams<T>& dec, DecodeCache<T>& cache, const BoolMask& key, Index h_img, Index w_img,
                      const std::vector<Index>& token_batch, DecodeTrace<T>* trace = nullptr) {
    NoGradGuard ng;
    const DecoderConfig& cfg = dec.cfg;
    Index batch = cache.batch;
    check_as<UsageError>(Index(token_batch.size()) == batch, "decode_step: one token per batch row required");
    check_as<StateError>(!cache.layers.empty(), "decode_step: cache not built");
    Index l = cache.layers[0].cross_k.dim(2);
    check_as<DimensionError>(h_img * w_img == l, "decode_step: attention grid does not cover memory length");

    Tensor<T> x = reshape(embedding(dec.embed, token_batch), {batch, 1, cfg.d_model});
    if (cfg.scale_embedding) x = scale(x, T(std::sqrt(double(cfg.d_model))));
    Tensor<T> pe = word_pe<T>(cache.t + 1, cfg.d_model);
    x = add(x, narrow(pe, 0, cache.t, 1));

    Tensor<T> prev_refined;  // [batch, heads, 1, L]
    for (Index j = 0; j < cfg.layers; ++j) {
        auto& lp = dec.layers[size_t(j)];
        auto& lc = cache.layers[size_t(j)];

        Tensor<T> q = split_heads(linear(x, lp.self_attn.q), cfg.heads);
        Tensor<T> k1 = split_heads(linear(x, lp.self_attn.k), cfg.heads);
        Tensor<T> v1 = split_heads(linear(x, lp.self_attn.v), cfg.heads);
        lc.self_k = lc.self_k.defined() ? concat({lc.self_k, k1}, 2) : k1;
        lc.self_v = lc.self_v.defined() ? concat({lc.self_v, v1}, 2) : v1;
        // every cached key is at or before the current step: no mask needed
        Tensor<T> sa = softmax(attention_scores(q, lc.self_k), -1);
        Tensor<T> so = linear(merge_heads(matmul(sa, lc.self_v)), lp.self_attn.o);
        x = layernorm(add(x, so), lp.ln1_g, lp.ln1_b);

        Tensor<T> cq = split_heads(linear(x, lp.cross_attn.q), cfg.heads);
        Tensor<T> e = apply_mask(attention_scores(cq, lc.cross_k), key);
        Tensor<T> raw = softmax(e, -1);
        std::optional<Tensor<T>> cov;
        if (dec.layer_uses_arm(j)) cov = reshape(lc.cov_sum, {batch, h_img, w_img, cfg.arm_h_in()});
        auto co = detail::refine_and_attend(dec, j, e, raw, lc.cross_v, key, cov, false);
        if (dec.layer_uses_arm(j)) {
            Tensor<T> src = detail::coverage_source(cfg.mode, raw, prev_refined);  // [batch, h_in, 1, L]
            lc.cov_sum = add(lc.cov_sum, reshape(permute(src, {0, 2, 3, 1}), {batch, l, cfg.arm_h_in()}));
        }
        prev_refined = co.refined;
        if (trace) {
            trace->raw.push_back(raw);
            trace->refined.push_back(co.refined);
            trace->refinement.push_back(co.refinement);
        }
        x = layernorm(add(x, co.out), lp.ln2_g, lp.ln2_b);

        Tensor<T> f = linear(relu(linear(x, lp.ff1)), lp.ff2);
        x = layernorm(add(x, f), lp.ln3_g, lp.ln3_b);
    }
    cache.t += 1;
    return reshape(linear(x, dec.out_proj), {batch, cfg.vocab});
}

}  // namespace comer
