#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "peswap/config.hpp"
#include "peswap/kernels.hpp"
#include "peswap/positional.hpp"
#include "peswap/rng.hpp"
#include "peswap/tape.hpp"
#include "peswap/tensor.hpp"

namespace peswap {

// Additive mask value for blocked attention positions. Large but finite so
// masked rows never produce NaNs.
inline constexpr double kMaskedScore = -1e30;

template <class Real>
struct LoRASite {
    Parameter<Real>* a = nullptr; // [rank, d_in]
    Parameter<Real>* b = nullptr; // [d_out, rank]
    double scale = 1.0;
    double dropout = 0.0;
};

template <class Real>
struct LinearLayer {
    Parameter<Real>* w = nullptr; // [d_out, d_in]
    Parameter<Real>* b = nullptr; // optional
    std::unique_ptr<LoRASite<Real>> lora;
};

template <class Real>
struct LayerNormParams {
    Parameter<Real>* gamma = nullptr;
    Parameter<Real>* beta = nullptr;
};

template <class Real>
struct AttentionParams {
    LinearLayer<Real> q, k, v, out;
};

template <class Real>
struct EncoderLayerParams {
    AttentionParams<Real> self_attn;
    LayerNormParams<Real> self_norm;
    LinearLayer<Real> ffn_in, ffn_out;
    LayerNormParams<Real> ffn_norm;
};

template <class Real>
struct DecoderLayerParams {
    AttentionParams<Real> self_attn;
    LayerNormParams<Real> self_norm;
    AttentionParams<Real> cross_attn;
    LayerNormParams<Real> cross_norm;
    LinearLayer<Real> ffn_in, ffn_out;
    LayerNormParams<Real> ffn_norm;
};

// Positional state, always derived from (pe_kind, config); never serialized.
template <class Real>
struct PEModule {
    PEKind kind = PEKind::sine;
    SinusoidTable<Real> sine;
    RopeState rope;
    AlibiSlopes alibi;
};

template <class Real>
PEModule<Real> make_pe_module(const ModelConfig& cfg) {
    PEModule<Real> pe;
    pe.kind = cfg.pe_kind;
    switch (cfg.pe_kind) {
    case PEKind::sine:
        pe.sine = SinusoidTable<Real>(std::max(cfg.max_positions.first, cfg.max_positions.second),
                                      cfg.d_model);
        break;
    case PEKind::rope: pe.rope = RopeState(cfg.d_head()); break;
    case PEKind::alibi: pe.alibi = alibi_slopes(cfg.n_heads); break;
    case PEKind::nope: break;
    }
    return pe;
}

// Which adapters are attached, if any.
template <class Real>
struct AdapterState {
    Strategy strategy = Strategy::fft;
    LoRAConfig config;
    std::vector<std::string> sites; // adapted projection names, e.g. "...q_proj"
    bool merged = false;
};

constexpr double kLayerNormEps = 1e-5;

template <class Real>
struct TransformerModel {
    ModelConfig cfg;
    ParamStore<Real> params;
    Parameter<Real>* src_embed = nullptr;
    Parameter<Real>* tgt_embed = nullptr; // also the tied output projection
    std::vector<EncoderLayerParams<Real>> enc_layers;
    std::vector<DecoderLayerParams<Real>> dec_layers;
    LayerNormParams<Real> enc_final; // pre-norm only
    LayerNormParams<Real> dec_final;
    PEModule<Real> pe;
    std::unique_ptr<AdapterState<Real>> adapters;

    TransformerModel() = default;
    TransformerModel(TransformerModel&&) = default;
    TransformerModel& operator=(TransformerModel&&) = default;
    TransformerModel(const TransformerModel&) = delete;
    TransformerModel& operator=(const TransformerModel&) = delete;

    bool has_adapters() const { return adapters != nullptr && !adapters->merged; }
};

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
Tensor<Real> gaussian_init(Shape shape, double sigma, RngStream& rng) {
    Tensor<Real> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(rng.gaussian() * sigma);
    return t;
}

template <class Real>
LinearLayer<Real> make_linear(ParamStore<Real>& store, const std::string& name, int64_t d_out,
                              int64_t d_in, bool bias, RngStream& rng) {
    LinearLayer<Real> l;
    const double sigma = std::sqrt(2.0 / double(d_in + d_out));
    l.w = store.add(name + ".weight", gaussian_init<Real>(Shape{d_out, d_in}, sigma, rng));
    if (bias) l.b = store.add(name + ".bias", Tensor<Real>(Shape{d_out}));
    return l;
}

template <class Real>
LayerNormParams<Real> make_norm(ParamStore<Real>& store, const std::string& name, int64_t d) {
    LayerNormParams<Real> n;
    n.gamma = store.add(name + ".gamma", Tensor<Real>::full(Shape{d}, Real(1)));
    n.beta = store.add(name + ".beta", Tensor<Real>(Shape{d}));
    return n;
}

template <class Real>
AttentionParams<Real> make_attention(ParamStore<Real>& store, const std::string& name, int64_t d,
                                     bool bias, RngStream& rng) {
    AttentionParams<Real> a;
    a.q = make_linear(store, name + ".q_proj", d, d, bias, rng);
    a.k = make_linear(store, name + ".k_proj", d, d, bias, rng);
    a.v = make_linear(store, name + ".v_proj", d, d, bias, rng);
    a.out = make_linear(store, name + ".out_proj", d, d, bias, rng);
    return a;
}

} // namespace detail

template <class Real>
TransformerModel<Real> build_model(const ModelConfig& cfg, RngStream rng) {
    cfg.validate();
    TransformerModel<Real> m;
    m.cfg = cfg;
    const int64_t d = cfg.d_model;
    m.src_embed = m.params.add(
        "src_embed.weight",
        detail::gaussian_init<Real>(Shape{cfg.src_vocab, d}, 1.0 / std::sqrt(double(d)), rng));
    m.tgt_embed = m.params.add(
        "tgt_embed.weight",
        detail::gaussian_init<Real>(Shape{cfg.tgt_vocab, d}, 1.0 / std::sqrt(double(d)), rng));
    for (int64_t i = 0; i < cfg.enc_layers; ++i) {
        const std::string base = "encoder.layer" + std::to_string(i);
        EncoderLayerParams<Real> layer;
        layer.self_attn = detail::make_attention(m.params, base + ".self_attn", d, cfg.use_bias, rng);
        layer.self_norm = detail::make_norm(m.params, base + ".self_attn_norm", d);
        layer.ffn_in = detail::make_linear(m.params, base + ".ffn.in_proj", cfg.ffn_dim, d,
                                           cfg.use_bias, rng);
        layer.ffn_out = detail::make_linear(m.params, base + ".ffn.out_proj", d, cfg.ffn_dim,
                                            cfg.use_bias, rng);
        layer.ffn_norm = detail::make_norm(m.params, base + ".ffn_norm", d);
        m.enc_layers.push_back(std::move(layer));
    }
    for (int64_t i = 0; i < cfg.dec_layers; ++i) {
        const std::string base = "decoder.layer" + std::to_string(i);
        DecoderLayerParams<Real> layer;
        layer.self_attn = detail::make_attention(m.params, base + ".self_attn", d, cfg.use_bias, rng);
        layer.self_norm = detail::make_norm(m.params, base + ".self_attn_norm", d);
        layer.cross_attn =
            detail::make_attention(m.params, base + ".cross_attn", d, cfg.use_bias, rng);
        layer.cross_norm = detail::make_norm(m.params, base + ".cross_attn_norm", d);
        layer.ffn_in = detail::make_linear(m.params, base + ".ffn.in_proj", cfg.ffn_dim, d,
                                           cfg.use_bias, rng);
        layer.ffn_out = detail::make_linear(m.params, base + ".ffn.out_proj", d, cfg.ffn_dim,
                                            cfg.use_bias, rng);
        layer.ffn_norm = detail::make_norm(m.params, base + ".ffn_norm", d);
        m.dec_layers.push_back(std::move(layer));
    }
    if (cfg.norm_order == NormOrder::pre) {
        m.enc_final = detail::make_norm(m.params, "encoder.final_norm", d);
        m.dec_final = detail::make_norm(m.params, "decoder.final_norm", d);
    }
    m.pe = make_pe_module<Real>(cfg);
    return m;
}

/// Replace the positional scheme in place. Never touches parameter tensors.
template <class Real>
void set_pe_kind(TransformerModel<Real>& m, PEKind kind) {
    ModelConfig cfg = m.cfg;
    cfg.pe_kind = kind;
    cfg.validate();
    m.cfg = cfg;
    m.pe = make_pe_module<Real>(cfg);
}

template <class Real>
int64_t count_params(const TransformerModel<Real>& m, bool trainable_only = false) {
    return m.params.count_scalars(trainable_only);
}

// Closed-form scalar count for an unadapted model (tied output projection).
inline int64_t expected_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t bias = cfg.use_bias ? 1 : 0;
    const int64_t attn = 4 * (d * d + bias * d);
    const int64_t ffn = d * cfg.ffn_dim + bias * cfg.ffn_dim + cfg.ffn_dim * d + bias * d;
    const int64_t norm = 2 * d;
    int64_t total = (cfg.src_vocab + cfg.tgt_vocab) * d;
    total += cfg.enc_layers * (attn + norm + ffn + norm);
    total += cfg.dec_layers * (2 * (attn + norm) + ffn + norm);
    if (cfg.norm_order == NormOrder::pre) total += 2 * norm;
    return total;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

using TokenSeq = std::vector<int32_t>;

struct TokenBatch {
    int64_t batch = 0;
    int64_t src_len = 0; // padded length
    int64_t tgt_len = 0;
    std::vector<int32_t> src;    // [batch, src_len]
    std::vector<int32_t> tgt_in; // [batch, tgt_len], starts with bos
    std::vector<int32_t> tgt_out; // [batch, tgt_len], ends with eos
    std::vector<int32_t> src_lens;
    std::vector<int32_t> tgt_lens;
    std::vector<uint8_t> tgt_mask; // 1 where tgt_out is a real token

    int64_t real_tokens() const {
        int64_t n = 0;
        for (int32_t l : tgt_lens) n += l;
        return n;
    }
};

/// Pads source/target id sequences (targets must already end in eos).
inline TokenBatch make_batch(const std::vector<TokenSeq>& srcs, const std::vector<TokenSeq>& tgts,
                             int32_t pad_id, int32_t bos_id) {
    if (srcs.size() != tgts.size() || srcs.empty())
        throw std::invalid_argument("make_batch: need equal, non-zero sequence counts");
    TokenBatch b;
    b.batch = static_cast<int64_t>(srcs.size());
    for (const auto& s : srcs) b.src_len = std::max<int64_t>(b.src_len, s.size());
    for (const auto& t : tgts) b.tgt_len = std::max<int64_t>(b.tgt_len, t.size());
    b.src.assign(static_cast<size_t>(b.batch * b.src_len), pad_id);
    b.tgt_in.assign(static_cast<size_t>(b.batch * b.tgt_len), pad_id);
    b.tgt_out.assign(static_cast<size_t>(b.batch * b.tgt_len), pad_id);
    b.tgt_mask.assign(static_cast<size_t>(b.batch * b.tgt_len), 0);
    for (int64_t i = 0; i < b.batch; ++i) {
        const auto& s = srcs[static_cast<size_t>(i)];
        const auto& t = tgts[static_cast<size_t>(i)];
        b.src_lens.push_back(static_cast<int32_t>(s.size()));
        b.tgt_lens.push_back(static_cast<int32_t>(t.size()));
        std::copy(s.begin(), s.end(), b.src.begin() + i * b.src_len);
        b.tgt_in[static_cast<size_t>(i * b.tgt_len)] = bos_id;
        for (size_t j = 0; j + 1 < t.size(); ++j)
            b.tgt_in[static_cast<size_t>(i * b.tgt_len) + j + 1] = t[j];
        std::copy(t.begin(), t.end(), b.tgt_out.begin() + i * b.tgt_len);
        std::fill_n(b.tgt_mask.begin() + i * b.tgt_len, t.size(), uint8_t(1));
    }
    return b;
}

// ---------------------------------------------------------------------------
// forward (training graph)
// ---------------------------------------------------------------------------

namespace detail {

// Combined additive attention bias [B*H, Tq, Tk]: padding + causal masking,
// plus the ALiBi distance term for self-attention under that scheme.
template <class Real>
Tensor<Real> attention_bias(const TransformerModel<Real>& m, int64_t batch, int64_t tq, int64_t tk,
                            const std::vector<int32_t>& key_lens, bool causal, bool self_attn) {
    const int64_t H = m.cfg.n_heads;
    Tensor<Real> bias(Shape{batch * H, tq, tk});
    const bool use_alibi = self_attn && m.pe.kind == PEKind::alibi;
    for (int64_t b = 0; b < batch; ++b) {
        const int64_t klen = key_lens.empty() ? tk : key_lens[static_cast<size_t>(b)];
        for (int64_t h = 0; h < H; ++h) {
            Real* p = bias.data() + ((b * H + h) * tq) * tk;
            const double slope = use_alibi ? m.pe.alibi.slopes[static_cast<size_t>(h)] : 0.0;
            for (int64_t i = 0; i < tq; ++i)
                for (int64_t j = 0; j < tk; ++j) {
                    double v = 0;
                    if (j >= klen || (causal && j > i)) {
                        v = kMaskedScore;
                    } else if (use_alibi) {
                        const int64_t dist = causal ? i - j : std::llabs(i - j);
                        v = -slope * double(dist);
                    }
                    p[i * tk + j] = static_cast<Real>(v);
                }
        }
    }
    return bias;
}

template <class Real>
typename Tape<Real>::Var linear_fwd(Tape<Real>& tape, typename Tape<Real>::Var x,
                                    const LinearLayer<Real>& l, bool train, RngStream& rng) {
    using V = typename Tape<Real>::Var;
    V y = tape.linear(x, tape.param(*l.w), l.b ? tape.param(*l.b) : V{});
    if (l.lora) {
        V xin = (train && l.lora->dropout > 0) ? tape.dropout(x, l.lora->dropout, rng) : x;
        V u = tape.linear(xin, tape.param(*l.lora->a));
        V delta = tape.linear(u, tape.param(*l.lora->b));
        y = tape.add(y, tape.scale(delta, static_cast<Real>(l.lora->scale)));
    }
    return y;
}

// [B,T,D] -> [B*H, T, dh]
template <class Real>
typename Tape<Real>::Var split_heads(Tape<Real>& tape, typename Tape<Real>::Var x, int64_t B,
                                     int64_t T, int64_t H, int64_t dh) {
    auto v = tape.reshape(x, Shape{B, T, H, dh});
    v = tape.permute_0213(v);
    return tape.reshape(v, Shape{B * H, T, dh});
}

// [B*H, T, dh] -> [B,T,D]
template <class Real>
typename Tape<Real>::Var merge_heads(Tape<Real>& tape, typename Tape<Real>::Var x, int64_t B,
                                     int64_t T, int64_t H, int64_t dh) {
    auto v = tape.reshape(x, Shape{B, H, T, dh});
    v = tape.permute_0213(v);
    return tape.reshape(v, Shape{B, T, H * dh});
}

template <class Real>
typename Tape<Real>::Var attention_fwd(Tape<Real>& tape, const TransformerModel<Real>& m,
                                       const AttentionParams<Real>& attn,
                                       typename Tape<Real>::Var q_in,
                                       typename Tape<Real>::Var kv_in, int64_t B, int64_t tq,
                                       int64_t tk, const Tensor<Real>& bias, bool self_attn,
                                       bool train, RngStream& rng) {
    const int64_t H = m.cfg.n_heads, dh = m.cfg.d_head();
    auto q = split_heads(tape, linear_fwd(tape, q_in, attn.q, train, rng), B, tq, H, dh);
    auto k = split_heads(tape, linear_fwd(tape, kv_in, attn.k, train, rng), B, tk, H, dh);
    auto v = split_heads(tape, linear_fwd(tape, kv_in, attn.v, train, rng), B, tk, H, dh);
    if (self_attn && m.pe.kind == PEKind::rope) {
        std::vector<int64_t> pos_q(static_cast<size_t>(tq)), pos_k(static_cast<size_t>(tk));
        for (int64_t i = 0; i < tq; ++i) pos_q[static_cast<size_t>(i)] = i;
        for (int64_t i = 0; i < tk; ++i) pos_k[static_cast<size_t>(i)] = i;
        q = rope_rotate(tape, q, pos_q, m.pe.rope);
        k = rope_rotate(tape, k, pos_k, m.pe.rope);
    }
    auto scores = tape.scale(tape.bmm_nt(q, k), static_cast<Real>(1.0 / std::sqrt(double(dh))));
    scores = tape.add_const(scores, bias);
    auto probs = tape.softmax_lastdim(scores);
    auto ctx = merge_heads(tape, tape.bmm_nn(probs, v), B, tq, H, dh);
    return linear_fwd(tape, ctx, attn.out, train, rng);
}

template <class Real>
typename Tape<Real>::Var maybe_dropout(Tape<Real>& tape, typename Tape<Real>::Var x, bool train,
                                       double p, RngStream& rng) {
    return (train && p > 0) ? tape.dropout(x, p, rng) : x;
}

// One residual sublayer with the configured norm placement.
template <class Real, class SubF>
typename Tape<Real>::Var sublayer(Tape<Real>& tape, const TransformerModel<Real>& m,
                                  typename Tape<Real>::Var x, const LayerNormParams<Real>& norm,
                                  bool train, RngStream& rng, SubF&& sub) {
    const Real eps = static_cast<Real>(kLayerNormEps);
    if (m.cfg.norm_order == NormOrder::pre) {
        auto h = tape.layer_norm(x, tape.param(*norm.gamma), tape.param(*norm.beta), eps);
        auto y = maybe_dropout(tape, sub(h), train, m.cfg.dropout, rng);
        return tape.add(x, y);
    }
    auto y = maybe_dropout(tape, sub(x), train, m.cfg.dropout, rng);
    return tape.layer_norm(tape.add(x, y), tape.param(*norm.gamma), tape.param(*norm.beta), eps);
}

template <class Real>
typename Tape<Real>::Var embed_tokens(Tape<Real>& tape, const TransformerModel<Real>& m,
                                      Parameter<Real>& table, const std::vector<int32_t>& ids,
                                      int64_t B, int64_t T, bool train, RngStream& rng) {
    auto e = tape.embedding(ids, tape.param(table));
    e = tape.scale(e, static_cast<Real>(std::sqrt(double(m.cfg.d_model))));
    e = tape.reshape(e, Shape{B, T, m.cfg.d_model});
    if (m.pe.kind == PEKind::sine) {
        std::vector<int64_t> pos(static_cast<size_t>(T));
        for (int64_t i = 0; i < T; ++i) pos[static_cast<size_t>(i)] = i;
        e = tape.add_rows(e, tape.input(m.pe.sine.embed(pos)));
    }
    return maybe_dropout(tape, e, train, m.cfg.dropout, rng);
}

} // namespace detail

/// Encoder stack over a padded batch; returns [B, Ts, D].
template <class Real>
typename Tape<Real>::Var encode(Tape<Real>& tape, const TransformerModel<Real>& m,
                                const std::vector<int32_t>& src_ids, int64_t B, int64_t Ts,
                                const std::vector<int32_t>& src_lens, bool train, RngStream& rng) {
    if (Ts > m.cfg.max_positions.first)
        throw std::out_of_range("source length " + std::to_string(Ts) + " exceeds max positions " +
                                std::to_string(m.cfg.max_positions.first));
    auto x = detail::embed_tokens(tape, m, *m.src_embed, src_ids, B, Ts, train, rng);
    const Tensor<Real> bias = detail::attention_bias(m, B, Ts, Ts, src_lens, false, true);
    for (const auto& layer : m.enc_layers) {
        x = detail::sublayer(tape, m, x, layer.self_norm, train, rng, [&](auto h) {
            return detail::attention_fwd(tape, m, layer.self_attn, h, h, B, Ts, Ts, bias, true,
                                         train, rng);
        });
        x = detail::sublayer(tape, m, x, layer.ffn_norm, train, rng, [&](auto h) {
            auto f = tape.relu(detail::linear_fwd(tape, h, layer.ffn_in, train, rng));
            return detail::linear_fwd(tape, f, layer.ffn_out, train, rng);
        });
    }
    if (m.cfg.norm_order == NormOrder::pre)
        x = tape.layer_norm(x, tape.param(*m.enc_final.gamma), tape.param(*m.enc_final.beta),
                            static_cast<Real>(kLayerNormEps));
    return x;
}

/// Teacher-forced forward; returns logits [B, Tt, tgt_vocab].
template <class Real>
typename Tape<Real>::Var forward_teacher_forced(Tape<Real>& tape, const TransformerModel<Real>& m,
                                                const TokenBatch& batch, bool train,
                                                RngStream& rng) {
    const int64_t B = batch.batch, Ts = batch.src_len, Tt = batch.tgt_len;
    if (Tt > m.cfg.max_positions.second)
        throw std::out_of_range("target length " + std::to_string(Tt) + " exceeds max positions " +
                                std::to_string(m.cfg.max_positions.second));
    auto enc = encode(tape, m, batch.src, B, Ts, batch.src_lens, train, rng);
    auto x = detail::embed_tokens(tape, m, *m.tgt_embed, batch.tgt_in, B, Tt, train, rng);
    const Tensor<Real> self_bias = detail::attention_bias(m, B, Tt, Tt, batch.tgt_lens, true, true);
    const Tensor<Real> cross_bias =
        detail::attention_bias(m, B, Tt, Ts, batch.src_lens, false, false);
    for (const auto& layer : m.dec_layers) {
        x = detail::sublayer(tape, m, x, layer.self_norm, train, rng, [&](auto h) {
            return detail::attention_fwd(tape, m, layer.self_attn, h, h, B, Tt, Tt, self_bias,
                                         true, train, rng);
        });
        x = detail::sublayer(tape, m, x, layer.cross_norm, train, rng, [&](auto h) {
            return detail::attention_fwd(tape, m, layer.cross_attn, h, enc, B, Tt, Ts, cross_bias,
                                         false, train, rng);
        });
        x = detail::sublayer(tape, m, x, layer.ffn_norm, train, rng, [&](auto h) {
            auto f = tape.relu(detail::linear_fwd(tape, h, layer.ffn_in, train, rng));
            return detail::linear_fwd(tape, f, layer.ffn_out, train, rng);
        });
    }
    if (m.cfg.norm_order == NormOrder::pre)
        x = tape.layer_norm(x, tape.param(*m.dec_final.gamma), tape.param(*m.dec_final.beta),
                            static_cast<Real>(kLayerNormEps));
    return tape.linear(x, tape.param(*m.tgt_embed)); // tied output projection
}

// ---------------------------------------------------------------------------
// cached inference
// ---------------------------------------------------------------------------

namespace detail {

// y = W x (+ b) for a single row vector x of length d_in, plus adapter delta.
template <class Real>
void linear_row(const LinearLayer<Real>& l, const Real* x, Real* y) {
    const int64_t d_out = l.w->value.dim(0), d_in = l.w->value.dim(1);
    for (int64_t o = 0; o < d_out; ++o) y[o] = l.b ? l.b->value[o] : Real(0);
    kernels::gemm_nt(x, l.w->value.data(), y, 1, d_in, d_out);
    if (l.lora) {
        const int64_t r = l.lora->a->value.dim(0);
        std::vector<Real> u(static_cast<size_t>(r), Real(0));
        kernels::gemm_nt(x, l.lora->a->value.data(), u.data(), 1, d_in, r);
        std::vector<Real> delta(static_cast<size_t>(d_out), Real(0));
        kernels::gemm_nt(u.data(), l.lora->b->value.data(), delta.data(), 1, r, d_out);
        const Real s = static_cast<Real>(l.lora->scale);
        for (int64_t o = 0; o < d_out; ++o) y[o] += s * delta[static_cast<size_t>(o)];
    }
}

// Matrix form: x [rows, d_in] -> y [rows, d_out].
template <class Real>
void linear_rows(const LinearLayer<Real>& l, const Real* x, Real* y, int64_t rows) {
    const int64_t d_out = l.w->value.dim(0), d_in = l.w->value.dim(1);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t o = 0; o < d_out; ++o) y[i * d_out + o] = l.b ? l.b->value[o] : Real(0);
    kernels::gemm_nt(x, l.w->value.data(), y, rows, d_in, d_out);
    if (l.lora) {
        const int64_t r = l.lora->a->value.dim(0);
        std::vector<Real> u(static_cast<size_t>(rows * r), Real(0));
        kernels::gemm_nt(x, l.lora->a->value.data(), u.data(), rows, d_in, r);
        std::vector<Real> delta(static_cast<size_t>(rows * d_out), Real(0));
        kernels::gemm_nt(u.data(), l.lora->b->value.data(), delta.data(), rows, r, d_out);
        const Real s = static_cast<Real>(l.lora->scale);
        for (int64_t i = 0; i < rows * d_out; ++i) y[i] += s * delta[static_cast<size_t>(i)];
    }
}

template <class Real>
void layer_norm_row(const LayerNormParams<Real>& n, const Real* x, Real* y, int64_t d) {
    kernels::layer_norm_rows(x, n.gamma->value.data(), n.beta->value.data(),
                             static_cast<Real>(kLayerNormEps), y, 1, d);
}

} // namespace detail

/// Encoder output and per-layer cross-attention keys/values for one source.
template <class Real>
struct EncodedSource {
    int64_t src_len = 0;
    Tensor<Real> enc_out;               // [Ts, D]
    std::vector<Tensor<Real>> cross_k;  // per decoder layer, [H, Ts, dh]
    std::vector<Tensor<Real>> cross_v;
};

template <class Real>
std::shared_ptr<const EncodedSource<Real>> encode_source(const TransformerModel<Real>& m,
                                                         const TokenSeq& src_ids) {
    const int64_t Ts = static_cast<int64_t>(src_ids.size());
    const int64_t D = m.cfg.d_model, H = m.cfg.n_heads, dh = m.cfg.d_head();
    if (Ts < 1) throw std::invalid_argument("encode_source: empty source");
    if (Ts > m.cfg.max_positions.first)
        throw std::out_of_range("source length " + std::to_string(Ts) + " exceeds max positions " +
                                std::to_string(m.cfg.max_positions.first));
    // embeddings
    Tensor<Real> x(Shape{Ts, D});
    const Real emb_scale = static_cast<Real>(std::sqrt(double(D)));
    for (int64_t t = 0; t < Ts; ++t) {
        const int32_t id = src_ids[static_cast<size_t>(t)];
        if (id < 0 || id >= m.cfg.src_vocab)
            throw std::out_of_range("encode_source: token id " + std::to_string(id) +
                                    " outside vocab");
        const Real* row = m.src_embed->value.data() + int64_t(id) * D;
        for (int64_t j = 0; j < D; ++j) x[t * D + j] = row[j] * emb_scale;
    }
    if (m.pe.kind == PEKind::sine) {
        std::vector<int64_t> pos(static_cast<size_t>(Ts));
        for (int64_t i = 0; i < Ts; ++i) pos[static_cast<size_t>(i)] = i;
        const Tensor<Real> pe = m.pe.sine.embed(pos);
        for (int64_t i = 0; i < x.size(); ++i) x[i] += pe[i];
    }

    const Tensor<Real> bias = detail::attention_bias(m, 1, Ts, Ts, {}, false, true);
    std::vector<Real> buf_a(static_cast<size_t>(Ts * std::max(D, m.cfg.ffn_dim)));
    std::vector<Real> q(static_cast<size_t>(Ts * D)), k(q.size()), v(q.size()), ctx(q.size());
    std::vector<Real> scores(static_cast<size_t>(Ts * Ts));
    std::vector<int64_t> all_pos(static_cast<size_t>(Ts));
    for (int64_t i = 0; i < Ts; ++i) all_pos[static_cast<size_t>(i)] = i;

    for (const auto& layer : m.enc_layers) {
        // self-attention sublayer
        const Real* attn_in;
        if (m.cfg.norm_order == NormOrder::pre) {
            kernels::layer_norm_rows(x.data(), layer.self_norm.gamma->value.data(),
                                     layer.self_norm.beta->value.data(),
                                     static_cast<Real>(kLayerNormEps), buf_a.data(), Ts, D);
            attn_in = buf_a.data();
        } else {
            attn_in = x.data();
        }
        detail::linear_rows(layer.self_attn.q, attn_in, q.data(), Ts);
        detail::linear_rows(layer.self_attn.k, attn_in, k.data(), Ts);
        detail::linear_rows(layer.self_attn.v, attn_in, v.data(), Ts);
        const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(double(dh)));
        for (int64_t h = 0; h < H; ++h) {
            // per-head views with stride D
            for (int64_t i = 0; i < Ts; ++i) {
                Real* qr = q.data() + i * D + h * dh;
                Real* kr = k.data() + i * D + h * dh;
                if (m.pe.kind == PEKind::rope) {
                    rope_rotate_row(m.pe.rope, i, qr, qr);
                    rope_rotate_row(m.pe.rope, i, kr, kr);
                }
            }
            for (int64_t i = 0; i < Ts; ++i)
                for (int64_t j = 0; j < Ts; ++j) {
                    Real acc{};
                    const Real* qr = q.data() + i * D + h * dh;
                    const Real* kr = k.data() + j * D + h * dh;
#pragma omp simd reduction(+ : acc)
                    for (int64_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                    scores[static_cast<size_t>(i * Ts + j)] =
                        acc * inv_sqrt + bias[(h * Ts + i) * Ts + j];
                }
            kernels::softmax_rows(scores.data(), scores.data(), Ts, Ts);
            for (int64_t i = 0; i < Ts; ++i) {
                Real* cr = ctx.data() + i * D + h * dh;
                for (int64_t c = 0; c < dh; ++c) cr[c] = Real(0);
                for (int64_t j = 0; j < Ts; ++j) {
                    const Real p = scores[static_cast<size_t>(i * Ts + j)];
                    const Real* vr = v.data() + j * D + h * dh;
                    for (int64_t c = 0; c < dh; ++c) cr[c] += p * vr[c];
                }
            }
        }
        std::vector<Real> attn_out(static_cast<size_t>(Ts * D));
        detail::linear_rows(layer.self_attn.out, ctx.data(), attn_out.data(), Ts);
        for (int64_t i = 0; i < Ts * D; ++i) x[i] += attn_out[static_cast<size_t>(i)];
        if (m.cfg.norm_order == NormOrder::post)
            kernels::layer_norm_rows(x.data(), layer.self_norm.gamma->value.data(),
                                     layer.self_norm.beta->value.data(),
                                     static_cast<Real>(kLayerNormEps), x.data(), Ts, D);

        // feed-forward sublayer
        const Real* ffn_in_ptr;
        if (m.cfg.norm_order == NormOrder::pre) {
            kernels::layer_norm_rows(x.data(), layer.ffn_norm.gamma->value.data(),
                                     layer.ffn_norm.beta->value.data(),
                                     static_cast<Real>(kLayerNormEps), buf_a.data(), Ts, D);
            ffn_in_ptr = buf_a.data();
        } else {
            ffn_in_ptr = x.data();
        }
        std::vector<Real> hidden(static_cast<size_t>(Ts * m.cfg.ffn_dim));
        detail::linear_rows(layer.ffn_in, ffn_in_ptr, hidden.data(), Ts);
        kernels::relu(hidden.data(), hidden.data(), Ts * m.cfg.ffn_dim);
        std::vector<Real> ffn_out(static_cast<size_t>(Ts * D));
        detail::linear_rows(layer.ffn_out, hidden.data(), ffn_out.data(), Ts);
        for (int64_t i = 0; i < Ts * D; ++i) x[i] += ffn_out[static_cast<size_t>(i)];
        if (m.cfg.norm_order == NormOrder::post)
            kernels::layer_norm_rows(x.data(), layer.ffn_norm.gamma->value.data(),
                                     layer.ffn_norm.beta->value.data(),
                                     static_cast<Real>(kLayerNormEps), x.data(), Ts, D);
    }
    if (m.cfg.norm_order == NormOrder::pre)
        kernels::layer_norm_rows(x.data(), m.enc_final.gamma->value.data(),
                                 m.enc_final.beta->value.data(), static_cast<Real>(kLayerNormEps),
                                 x.data(), Ts, D);

    auto enc = std::make_shared<EncodedSource<Real>>();
    enc->src_len = Ts;
    enc->enc_out = std::move(x);
    std::vector<Real> proj(static_cast<size_t>(Ts * D));
    for (const auto& layer : m.dec_layers) {
        Tensor<Real> ck(Shape{H, Ts, dh}), cv(Shape{H, Ts, dh});
        detail::linear_rows(layer.cross_attn.k, enc->enc_out.data(), proj.data(), Ts);
        for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < Ts; ++t)
                for (int64_t c = 0; c < dh; ++c)
                    ck[(h * Ts + t) * dh + c] = proj[static_cast<size_t>(t * D + h * dh + c)];
        detail::linear_rows(layer.cross_attn.v, enc->enc_out.data(), proj.data(), Ts);
        for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < Ts; ++t)
                for (int64_t c = 0; c < dh; ++c)
                    cv[(h * Ts + t) * dh + c] = proj[static_cast<size_t>(t * D + h * dh + c)];
        enc->cross_k.push_back(std::move(ck));
        enc->cross_v.push_back(std::move(cv));
    }
    return enc;
}

/// Incremental decoder state for one hypothesis: per-layer cached self-attention
/// keys/values, stored per step as [H*dh] rows.
template <class Real>
struct DecodeState {
    std::shared_ptr<const EncodedSource<Real>> src;
    std::vector<std::vector<Real>> self_k; // per layer: pos * (H*dh)
    std::vector<std::vector<Real>> self_v;
    int64_t pos = 0;
};

/// Step-wise scorer over the model with KV caching; states are value types and
/// may be copied freely (beam search relies on that).
template <class Real>
class ModelStepper {
public:
    ModelStepper(const TransformerModel<Real>& m, std::shared_ptr<const EncodedSource<Real>> src)
        : m_(m), src_(std::move(src)) {}

    int64_t vocab() const { return m_.cfg.tgt_vocab; }

    DecodeState<Real> start() const {
        DecodeState<Real> st;
        st.src = src_;
        st.self_k.resize(m_.dec_layers.size());
        st.self_v.resize(m_.dec_layers.size());
        return st;
    }

    // Feeds `token` at the next position and returns logits for the following one.
    std::vector<Real> step(DecodeState<Real>& st, int32_t token) const {
        const ModelConfig& cfg = m_.cfg;
        const int64_t D = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
        const int64_t t = st.pos;
        if (t >= cfg.max_positions.second)
            throw std::out_of_range("decode position " + std::to_string(t) +
                                    " exceeds max positions");
        if (token < 0 || token >= cfg.tgt_vocab)
            throw std::out_of_range("decode: token id " + std::to_string(token) +
                                    " outside vocab");
        std::vector<Real> x(static_cast<size_t>(D));
        const Real emb_scale = static_cast<Real>(std::sqrt(double(D)));
        const Real* row = m_.tgt_embed->value.data() + int64_t(token) * D;
        for (int64_t j = 0; j < D; ++j) x[static_cast<size_t>(j)] = row[j] * emb_scale;
        if (m_.pe.kind == PEKind::sine) {
            const Tensor<Real> pe = m_.pe.sine.embed({t});
            for (int64_t j = 0; j < D; ++j) x[static_cast<size_t>(j)] += pe[j];
        }

        std::vector<Real> norm_buf(static_cast<size_t>(std::max(D, cfg.ffn_dim)));
        std::vector<Real> q(static_cast<size_t>(D)), k(static_cast<size_t>(D)),
            v(static_cast<size_t>(D)), ctx(static_cast<size_t>(D)), out(static_cast<size_t>(D));
        const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(double(dh)));

        for (size_t li = 0; li < m_.dec_layers.size(); ++li) {
            const auto& layer = m_.dec_layers[li];
            // self-attention over cached positions 0..t
            const Real* attn_in = x.data();
            if (cfg.norm_order == NormOrder::pre) {
                detail::layer_norm_row(layer.self_norm, x.data(), norm_buf.data(), D);
                attn_in = norm_buf.data();
            }
            detail::linear_row(layer.self_attn.q, attn_in, q.data());
            detail::linear_row(layer.self_attn.k, attn_in, k.data());
            detail::linear_row(layer.self_attn.v, attn_in, v.data());
            if (m_.pe.kind == PEKind::rope)
                for (int64_t h = 0; h < H; ++h) {
                    rope_rotate_row(m_.pe.rope, t, q.data() + h * dh, q.data() + h * dh);
                    rope_rotate_row(m_.pe.rope, t, k.data() + h * dh, k.data() + h * dh);
                }
            auto& ck = st.self_k[li];
            auto& cv = st.self_v[li];
            ck.insert(ck.end(), k.begin(), k.end());
            cv.insert(cv.end(), v.begin(), v.end());
            const int64_t steps = t + 1;
            std::vector<Real> probs(static_cast<size_t>(steps));
            for (int64_t h = 0; h < H; ++h) {
                const double slope =
                    m_.pe.kind == PEKind::alibi ? m_.pe.alibi.slopes[static_cast<size_t>(h)] : 0.0;
                for (int64_t j = 0; j < steps; ++j) {
                    const Real* kr = ck.data() + j * D + h * dh;
                    const Real* qr = q.data() + h * dh;
                    Real acc{};
#pragma omp simd reduction(+ : acc)
                    for (int64_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                    probs[static_cast<size_t>(j)] =
                        acc * inv_sqrt + static_cast<Real>(-slope * double(t - j));
                }
                kernels::softmax_rows(probs.data(), probs.data(), 1, steps);
                Real* cr = ctx.data() + h * dh;
                for (int64_t c = 0; c < dh; ++c) cr[c] = Real(0);
                for (int64_t j = 0; j < steps; ++j) {
                    const Real p = probs[static_cast<size_t>(j)];
                    const Real* vr = cv.data() + j * D + h * dh;
                    for (int64_t c = 0; c < dh; ++c) cr[c] += p * vr[c];
                }
            }
            detail::linear_row(layer.self_attn.out, ctx.data(), out.data());
            for (int64_t j = 0; j < D; ++j) x[static_cast<size_t>(j)] += out[static_cast<size_t>(j)];
            if (cfg.norm_order == NormOrder::post)
                detail::layer_norm_row(layer.self_norm, x.data(), x.data(), D);

            // cross-attention over the encoded source
            attn_in = x.data();
            if (cfg.norm_order == NormOrder::pre) {
                detail::layer_norm_row(layer.cross_norm, x.data(), norm_buf.data(), D);
                attn_in = norm_buf.data();
            }
            detail::linear_row(layer.cross_attn.q, attn_in, q.data());
            const int64_t Ts = st.src->src_len;
            std::vector<Real> cprobs(static_cast<size_t>(Ts));
            const Tensor<Real>& ckx = st.src->cross_k[li];
            const Tensor<Real>& cvx = st.src->cross_v[li];
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t j = 0; j < Ts; ++j) {
                    const Real* kr = ckx.data() + (h * Ts + j) * dh;
                    const Real* qr = q.data() + h * dh;
                    Real acc{};
#pragma omp simd reduction(+ : acc)
                    for (int64_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                    cprobs[static_cast<size_t>(j)] = acc * inv_sqrt;
                }
                kernels::softmax_rows(cprobs.data(), cprobs.data(), 1, Ts);
                Real* cr = ctx.data() + h * dh;
                for (int64_t c = 0; c < dh; ++c) cr[c] = Real(0);
                for (int64_t j = 0; j < Ts; ++j) {
                    const Real p = cprobs[static_cast<size_t>(j)];
                    const Real* vr = cvx.data() + (h * Ts + j) * dh;
                    for (int64_t c = 0; c < dh; ++c) cr[c] += p * vr[c];
                }
            }
            detail::linear_row(layer.cross_attn.out, ctx.data(), out.data());
            for (int64_t j = 0; j < D; ++j) x[static_cast<size_t>(j)] += out[static_cast<size_t>(j)];
            if (cfg.norm_order == NormOrder::post)
                detail::layer_norm_row(layer.cross_norm, x.data(), x.data(), D);

            // feed-forward
            attn_in = x.data();
            if (cfg.norm_order == NormOrder::pre) {
                detail::layer_norm_row(layer.ffn_norm, x.data(), norm_buf.data(), D);
                attn_in = norm_buf.data();
            }
            std::vector<Real> hidden(static_cast<size_t>(cfg.ffn_dim));
            detail::linear_row(layer.ffn_in, attn_in, hidden.data());
            kernels::relu(hidden.data(), hidden.data(), cfg.ffn_dim);
            detail::linear_row(layer.ffn_out, hidden.data(), out.data());
            for (int64_t j = 0; j < D; ++j) x[static_cast<size_t>(j)] += out[static_cast<size_t>(j)];
            if (cfg.norm_order == NormOrder::post)
                detail::layer_norm_row(layer.ffn_norm, x.data(), x.data(), D);
        }
        if (cfg.norm_order == NormOrder::pre)
            detail::layer_norm_row(m_.dec_final, x.data(), x.data(), D);

        std::vector<Real> logits(static_cast<size_t>(cfg.tgt_vocab), Real(0));
        kernels::gemm_nt(x.data(), m_.tgt_embed->value.data(), logits.data(), 1, D,
                         cfg.tgt_vocab);
        st.pos += 1;
        return logits;
    }

private:
    const TransformerModel<Real>& m_;
    std::shared_ptr<const EncodedSource<Real>> src_;
};

// ---------------------------------------------------------------------------
// decoding
// ---------------------------------------------------------------------------

struct BeamConfig {
    int beam = 5;
    double max_len_factor = 1.5;
    int max_len_slack = 10;
    double length_penalty = 1.0; // GNMT ((5+len)/6)^alpha
};

namespace detail {

inline double length_norm(double logp, int64_t len, double alpha) {
    return logp / std::pow((5.0 + double(len)) / 6.0, alpha);
}

} // namespace detail

/// Length-normalized beam search. The stepper contract: `start()` yields a
/// fresh state; `step(state, token)` feeds one token and returns next-token
/// logits. Returns the output ids ending in `eos` (bos excluded).
template <class Real, class Stepper>
TokenSeq beam_search(Stepper& stepper, int32_t bos, int32_t eos, int64_t src_len,
                     const BeamConfig& bc) {
    if (bc.beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
    const int64_t max_len =
        std::max<int64_t>(1, static_cast<int64_t>(bc.max_len_factor * double(src_len)) +
                                 bc.max_len_slack);

    struct Hyp {
        decltype(stepper.start()) state;
        TokenSeq toks;
        double logp = 0;
    };
    struct Finished {
        TokenSeq toks;
        double score;
    };
    std::vector<Hyp> live;
    live.push_back(Hyp{stepper.start(), {}, 0.0});
    std::vector<Finished> finished;

    const int64_t V = stepper.vocab();
    std::vector<Real> logprobs(static_cast<size_t>(V));
    struct Cand {
        size_t hyp;
        int32_t tok;
        double logp;
    };
    std::vector<Cand> cands;

    for (int64_t t = 0; t < max_len && !live.empty(); ++t) {
        cands.clear();
        for (size_t i = 0; i < live.size(); ++i) {
            const int32_t prev = live[i].toks.empty() ? bos : live[i].toks.back();
            std::vector<Real> logits = stepper.step(live[i].state, prev);
            kernels::log_softmax_rows(logits.data(), logprobs.data(), 1, V);
            for (int64_t vtok = 0; vtok < V; ++vtok)
                cands.push_back(Cand{i, static_cast<int32_t>(vtok),
                                     live[i].logp +
                                         static_cast<double>(logprobs[static_cast<size_t>(vtok)])});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            if (a.hyp != b.hyp) return a.hyp < b.hyp;
            return a.tok < b.tok;
        });
        const size_t take = std::min<size_t>(static_cast<size_t>(bc.beam), cands.size());
        std::vector<Hyp> next;
        for (size_t c = 0; c < take; ++c) {
            const Cand& cand = cands[c];
            Hyp h;
            h.state = live[cand.hyp].state; // copy: several candidates may share a parent
            h.toks = live[cand.hyp].toks;
            h.toks.push_back(cand.tok);
            h.logp = cand.logp;
            if (cand.tok == eos) {
                finished.push_back(Finished{
                    h.toks, detail::length_norm(h.logp, static_cast<int64_t>(h.toks.size()),
                                                bc.length_penalty)});
            } else {
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
        if (static_cast<int>(finished.size()) >= bc.beam) break;
    }
    // Force-finish anything still live at the length cap.
    for (auto& h : live) {
        const int32_t prev = h.toks.empty() ? bos : h.toks.back();
        std::vector<Real> logits = stepper.step(h.state, prev);
        kernels::log_softmax_rows(logits.data(), logprobs.data(), 1, V);
        h.logp += static_cast<double>(logprobs[static_cast<size_t>(eos)]);
        h.toks.push_back(eos);
        finished.push_back(Finished{
            h.toks,
            detail::length_norm(h.logp, static_cast<int64_t>(h.toks.size()), bc.length_penalty)});
    }
    size_t best = 0;
    for (size_t i = 1; i < finished.size(); ++i)
        if (finished[i].score > finished[best].score) best = i;
    return finished[best].toks;
}

/// Greedy argmax decode (first index wins ties); matches beam_search at beam=1.
template <class Real, class Stepper>
TokenSeq greedy_decode(Stepper& stepper, int32_t bos, int32_t eos, int64_t src_len,
                       const BeamConfig& bc) {
    const int64_t max_len =
        std::max<int64_t>(1, static_cast<int64_t>(bc.max_len_factor * double(src_len)) +
                                 bc.max_len_slack);
    auto state = stepper.start();
    TokenSeq toks;
    int32_t prev = bos;
    for (int64_t t = 0; t < max_len; ++t) {
        std::vector<Real> logits = stepper.step(state, prev);
        int32_t arg = 0;
        for (size_t v = 1; v < logits.size(); ++v)
            if (logits[v] > logits[static_cast<size_t>(arg)]) arg = static_cast<int32_t>(v);
        toks.push_back(arg);
        if (arg == eos) return toks;
        prev = arg;
    }
    toks.push_back(eos);
    return toks;
}

/// Convenience wrapper: encode + beam decode one source sequence.
template <class Real>
TokenSeq translate_sequence(const TransformerModel<Real>& m, const TokenSeq& src, int32_t bos,
                            int32_t eos, const BeamConfig& bc) {
    ModelStepper<Real> stepper(m, encode_source(m, src));
    return beam_search<Real>(stepper, bos, eos, static_cast<int64_t>(src.size()), bc);
}

} // namespace peswap
