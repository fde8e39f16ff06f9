#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peswap/config.hpp"
#include "peswap/model.hpp"
#include "peswap/rng.hpp"

namespace peswap {

enum class SiteClass { self_attn, cross_attn, ffn };

namespace detail {

inline std::string linear_base_name(const std::string& weight_name) {
    // "...q_proj.weight" -> "...q_proj"
    return weight_name.substr(0, weight_name.rfind('.'));
}

// Visit every linear projection in a fixed order (construction order).
template <class Real, class F>
void for_each_linear(TransformerModel<Real>& m, F&& f) {
    for (auto& layer : m.enc_layers) {
        f(layer.self_attn.q, SiteClass::self_attn);
        f(layer.self_attn.k, SiteClass::self_attn);
        f(layer.self_attn.v, SiteClass::self_attn);
        f(layer.self_attn.out, SiteClass::self_attn);
        f(layer.ffn_in, SiteClass::ffn);
        f(layer.ffn_out, SiteClass::ffn);
    }
    for (auto& layer : m.dec_layers) {
        f(layer.self_attn.q, SiteClass::self_attn);
        f(layer.self_attn.k, SiteClass::self_attn);
        f(layer.self_attn.v, SiteClass::self_attn);
        f(layer.self_attn.out, SiteClass::self_attn);
        f(layer.cross_attn.q, SiteClass::cross_attn);
        f(layer.cross_attn.k, SiteClass::cross_attn);
        f(layer.cross_attn.v, SiteClass::cross_attn);
        f(layer.cross_attn.out, SiteClass::cross_attn);
        f(layer.ffn_in, SiteClass::ffn);
        f(layer.ffn_out, SiteClass::ffn);
    }
}

inline bool strategy_targets(Strategy s, SiteClass c) {
    switch (s) {
    case Strategy::fft: return false;
    case Strategy::lora: return true; // every linear projection
    case Strategy::minlora: return c == SiteClass::self_attn;
    }
    return false;
}

} // namespace detail

/// Attach adapters (or, for fft, just mark everything trainable). The model
/// must not already carry adapters. A starts Gaussian with sigma = 1/sqrt(r),
/// B starts zero, so injection is an exact forward no-op.
template <class Real>
void inject(TransformerModel<Real>& m, Strategy strategy, const LoRAConfig& cfg, RngStream rng) {
    if (m.adapters)
        throw std::logic_error("inject: model already has a fine-tuning strategy attached");
    cfg.validate();
    auto state = std::make_unique<AdapterState<Real>>();
    state->strategy = strategy;
    state->config = cfg;

    if (strategy == Strategy::fft) {
        for (auto* p : m.params.all()) p->trainable = true;
        m.adapters = std::move(state);
        return;
    }

    for (auto* p : m.params.all()) p->trainable = false;
    const double sigma = 1.0 / std::sqrt(double(cfg.rank));
    detail::for_each_linear(m, [&](LinearLayer<Real>& l, SiteClass c) {
        if (!detail::strategy_targets(strategy, c)) return;
        const std::string base = detail::linear_base_name(l.w->name);
        const int64_t d_out = l.w->value.dim(0), d_in = l.w->value.dim(1);
        auto site = std::make_unique<LoRASite<Real>>();
        site->a = m.params.add(base + ".lora_a",
                               detail::gaussian_init<Real>(Shape{cfg.rank, d_in}, sigma, rng));
        site->b = m.params.add(base + ".lora_b", Tensor<Real>(Shape{d_out, cfg.rank}));
        site->scale = cfg.scale();
        site->dropout = cfg.dropout;
        l.lora = std::move(site);
        state->sites.push_back(base);
    });
    m.adapters = std::move(state);
}

struct TrainableReport {
    int64_t trainable = 0;
    int64_t total = 0;
    double fraction = 0;
};

template <class Real>
TrainableReport trainable_report(const TransformerModel<Real>& m) {
    TrainableReport r;
    r.trainable = m.params.count_scalars(true);
    r.total = m.params.count_scalars(false);
    r.fraction = r.total > 0 ? double(r.trainable) / double(r.total) : 0.0;
    return r;
}

/// Fold W' = W + scale * B * A into each adapted projection, drop the adapter
/// parameters and return the model to plain fully-trainable form.
template <class Real>
void merge(TransformerModel<Real>& m) {
    if (!m.adapters) throw std::logic_error("merge: model has no adapters");
    if (m.adapters->strategy == Strategy::fft)
        throw std::logic_error("merge: fft attaches no adapters, nothing to merge");
    detail::for_each_linear(m, [&](LinearLayer<Real>& l, SiteClass) {
        if (!l.lora) return;
        const Tensor<Real>& A = l.lora->a->value; // [r, d_in]
        const Tensor<Real>& B = l.lora->b->value; // [d_out, r]
        const int64_t r = A.dim(0), d_in = A.dim(1), d_out = B.dim(0);
        Tensor<Real> delta(Shape{d_out, d_in});
        kernels::gemm_nn(B.data(), A.data(), delta.data(), d_out, r, d_in);
        const Real s = static_cast<Real>(l.lora->scale);
        Real* w = l.w->value.data();
        for (int64_t i = 0; i < d_out * d_in; ++i) w[i] += s * delta[i];
        m.params.remove(l.lora->a->name);
        m.params.remove(l.lora->b->name);
        l.lora.reset();
    });
    m.adapters.reset();
    for (auto* p : m.params.all()) p->trainable = true;
}

/// Names of adapter parameters currently attached, in site order.
template <class Real>
std::vector<std::string> adapter_param_names(const TransformerModel<Real>& m) {
    std::vector<std::string> out;
    if (!m.adapters) return out;
    for (const auto& site : m.adapters->sites) {
        out.push_back(site + ".lora_a");
        out.push_back(site + ".lora_b");
    }
    return out;
}

} // namespace peswap
