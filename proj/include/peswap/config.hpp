#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "peswap/positional.hpp"

namespace peswap {

enum class NormOrder { pre, post };

inline const char* norm_order_name(NormOrder n) { return n == NormOrder::pre ? "pre" : "post"; }
inline NormOrder parse_norm_order(const std::string& s) {
    if (s == "pre") return NormOrder::pre;
    if (s == "post") return NormOrder::post;
    throw std::invalid_argument("unknown norm order '" + s + "' (expected pre|post)");
}

struct ModelConfig {
    int64_t enc_layers = 2;
    int64_t dec_layers = 2;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t ffn_dim = 256;
    int64_t src_vocab = 0;
    int64_t tgt_vocab = 0;
    PEKind pe_kind = PEKind::sine;
    std::pair<int64_t, int64_t> max_positions = {4096, 4096};
    double dropout = 0.0;
    NormOrder norm_order = NormOrder::pre;
    bool use_bias = true;

    int64_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        if (src_vocab < 1 || tgt_vocab < 1)
            throw std::invalid_argument("model config: vocab sizes must be positive");
        if (enc_layers < 0 || dec_layers < 0 || ffn_dim < 1)
            throw std::invalid_argument("model config: bad layer/ffn sizes");
        if (dropout < 0 || dropout >= 1)
            throw std::invalid_argument("model config: dropout must be in [0,1)");
        if (max_positions.first < 1 || max_positions.second < 1)
            throw std::invalid_argument("model config: max positions must be >= 1");
        if (pe_kind == PEKind::rope && d_head() % 2 != 0)
            throw std::invalid_argument("model config: rope needs an even head dim, got " +
                                        std::to_string(d_head()));
    }

    bool operator==(const ModelConfig&) const = default;
};

// Adapter hyperparameters; defaults mirror the fine-tuning recipe.
struct LoRAConfig {
    int64_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
    bool rank_scaled = true;

    double scale() const {
        return rank_scaled ? alpha / std::sqrt(double(rank)) : alpha / double(rank);
    }

    void validate() const {
        if (rank < 1) throw std::invalid_argument("lora config: rank must be >= 1");
        if (dropout < 0 || dropout >= 1)
            throw std::invalid_argument("lora config: dropout must be in [0,1)");
    }

    bool operator==(const LoRAConfig&) const = default;
};

// Fine-tuning strategies: full fine-tune, adapters on every linear projection,
// or adapters on self-attention projections only.
enum class Strategy { fft, lora, minlora };

inline const char* strategy_name(Strategy s) {
    switch (s) {
    case Strategy::fft: return "fft";
    case Strategy::lora: return "lora";
    case Strategy::minlora: return "minlora";
    }
    return "?";
}

inline std::optional<Strategy> strategy_from_string(const std::string& s) {
    if (s == "fft") return Strategy::fft;
    if (s == "lora") return Strategy::lora;
    if (s == "minlora") return Strategy::minlora;
    return std::nullopt;
}

inline Strategy parse_strategy(const std::string& s) {
    if (auto v = strategy_from_string(s)) return *v;
    throw std::invalid_argument("unknown strategy '" + s + "' (expected fft|lora|minlora)");
}

} // namespace peswap
