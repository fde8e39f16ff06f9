#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peswap/tape.hpp"
#include "peswap/tensor.hpp"

namespace peswap {

// The four positional schemes. Serialized as lowercase strings in manifests
// and CLI flags.
enum class PEKind { sine, rope, alibi, nope };

const char* pe_kind_name(PEKind k);
std::optional<PEKind> pe_kind_from_string(const std::string& s);
PEKind parse_pe_kind(const std::string& s); // throws invalid_argument naming the token
std::vector<PEKind> all_pe_kinds();

// ---------------------------------------------------------------------------
// Sinusoidal absolute embeddings
// ---------------------------------------------------------------------------

// Interleaved layout: row[2i] = sin(pos / base^(2i/d)), row[2i+1] = cos(same).
template <class Real>
class SinusoidTable {
public:
    SinusoidTable() = default;
    SinusoidTable(int64_t max_positions, int64_t d_model)
        : max_positions_(max_positions), d_model_(d_model), table_(Shape{max_positions, d_model}) {
        if (max_positions < 1 || d_model < 2 || d_model % 2 != 0)
            throw std::invalid_argument("sinusoid table: bad dims (" +
                                        std::to_string(max_positions) + ", " +
                                        std::to_string(d_model) + ")");
        for (int64_t pos = 0; pos < max_positions; ++pos) {
            Real* row = table_.data() + pos * d_model;
            for (int64_t i = 0; i < d_model / 2; ++i) {
                const double rate = std::pow(10000.0, -2.0 * double(i) / double(d_model));
                row[2 * i] = static_cast<Real>(std::sin(double(pos) * rate));
                row[2 * i + 1] = static_cast<Real>(std::cos(double(pos) * rate));
            }
        }
    }

    int64_t max_positions() const { return max_positions_; }
    int64_t d_model() const { return d_model_; }
    const Tensor<Real>& table() const { return table_; }

    // Rows for the given positions.
    Tensor<Real> embed(const std::vector<int64_t>& positions) const {
        Tensor<Real> out(Shape{static_cast<int64_t>(positions.size()), d_model_});
        for (size_t i = 0; i < positions.size(); ++i) {
            const int64_t pos = positions[i];
            if (pos < 0 || pos >= max_positions_)
                throw std::out_of_range("sinusoidal position " + std::to_string(pos) +
                                        " outside [0, " + std::to_string(max_positions_) + ")");
            const Real* src = table_.data() + pos * d_model_;
            Real* dst = out.data() + static_cast<int64_t>(i) * d_model_;
            for (int64_t j = 0; j < d_model_; ++j) dst[j] = src[j];
        }
        return out;
    }

private:
    int64_t max_positions_ = 0;
    int64_t d_model_ = 0;
    Tensor<Real> table_;
};

template <class Real>
Tensor<Real> sinusoidal_embed(const std::vector<int64_t>& positions, int64_t d_model,
                              int64_t max_positions = 4096) {
    return SinusoidTable<Real>(max_positions, d_model).embed(positions);
}

// ---------------------------------------------------------------------------
// Rotary embeddings (queries/keys only)
// ---------------------------------------------------------------------------

// Pairs adjacent dimensions (2i, 2i+1); angle_i = theta_base^(-2i/d_head).
struct RopeState {
    double theta_base = 10000.0;
    int64_t d_head = 0;
    std::vector<double> angles; // d_head/2 rates, strictly decreasing

    RopeState() = default;
    RopeState(int64_t d_head_, double theta_base_ = 10000.0)
        : theta_base(theta_base_), d_head(d_head_) {
        if (d_head < 2 || d_head % 2 != 0)
            throw std::invalid_argument("rope: head dim must be even, got " +
                                        std::to_string(d_head));
        angles.resize(static_cast<size_t>(d_head / 2));
        for (int64_t i = 0; i < d_head / 2; ++i)
            angles[static_cast<size_t>(i)] =
                std::pow(theta_base, -2.0 * double(i) / double(d_head));
    }
};

// Rotate one row of length d_head at `position`, writing to dst (may alias src).
template <class Real>
void rope_rotate_row(const RopeState& st, int64_t position, const Real* src, Real* dst) {
    for (size_t i = 0; i < st.angles.size(); ++i) {
        const double a = double(position) * st.angles[i];
        const Real c = static_cast<Real>(std::cos(a));
        const Real s = static_cast<Real>(std::sin(a));
        const Real x0 = src[2 * i], x1 = src[2 * i + 1];
        dst[2 * i] = x0 * c - x1 * s;
        dst[2 * i + 1] = x0 * s + x1 * c;
    }
}

// x: [seq, d_head] or [batch, seq, d_head]; positions has length seq and may be
// negative (relative offsets). Returns the rotated tensor.
template <class Real>
Tensor<Real> rope_rotate(const Tensor<Real>& x, const std::vector<int64_t>& positions,
                         const RopeState& st) {
    const int64_t d = x.dim(x.rank() - 1);
    if (d != st.d_head)
        throw std::invalid_argument("rope: last dim " + std::to_string(d) + " != d_head " +
                                    std::to_string(st.d_head));
    const int64_t seq = x.dim(x.rank() - 2);
    if (static_cast<int64_t>(positions.size()) != seq)
        throw std::invalid_argument("rope: positions length " + std::to_string(positions.size()) +
                                    " != seq " + std::to_string(seq));
    const int64_t batch = x.size() / (seq * d);
    Tensor<Real> y(x.shape());
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < seq; ++t) {
            const int64_t off = (b * seq + t) * d;
            rope_rotate_row(st, positions[static_cast<size_t>(t)], x.data() + off, y.data() + off);
        }
    return y;
}

// Tape op: differentiable rotation (the adjoint rotates by the negated angle).
template <class Real>
typename Tape<Real>::Var rope_rotate(Tape<Real>& tape, typename Tape<Real>::Var x,
                                     const std::vector<int64_t>& positions, const RopeState& st) {
    Tensor<Real> y = rope_rotate(tape.value(x), positions, st);
    const int32_t ix = x.id;
    auto pos = std::make_shared<std::vector<int64_t>>(positions);
    auto state = std::make_shared<RopeState>(st);
    return tape.custom(std::move(y), {x}, [ix, pos, state](Tape<Real>& t, const Tensor<Real>& g) {
        const Tensor<Real>& gv = g;
        Tensor<Real>& gx = t.grad_ref(ix);
        const int64_t d = state->d_head;
        const int64_t seq = static_cast<int64_t>(pos->size());
        const int64_t batch = gv.size() / (seq * d);
        std::vector<Real> tmp(static_cast<size_t>(d));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t2 = 0; t2 < seq; ++t2) {
                const int64_t off = (b * seq + t2) * d;
                rope_rotate_row(*state, -(*pos)[static_cast<size_t>(t2)], gv.data() + off,
                                tmp.data());
                for (int64_t j = 0; j < d; ++j) gx[off + j] += tmp[static_cast<size_t>(j)];
            }
    });
}

// ---------------------------------------------------------------------------
// ALiBi linear attention biases
// ---------------------------------------------------------------------------

struct AlibiSlopes {
    int64_t n_heads = 0;
    std::vector<double> slopes;
};

// Geometric slopes 2^(-8(h+1)/n) for power-of-two head counts; otherwise the
// closest power-of-two sequence plus every other slope of the doubled one.
AlibiSlopes alibi_slopes(int64_t n_heads);

// bias[h][i][j]: causal = -slope_h * (i - j) for j <= i (0 above the diagonal;
// the causal -inf mask is applied separately); bidirectional = -slope_h * |i - j|.
template <class Real>
Tensor<Real> alibi_bias(const AlibiSlopes& slopes, int64_t q_len, int64_t k_len, bool causal) {
    if (q_len < 1 || k_len < 1)
        throw std::invalid_argument("alibi_bias: lengths must be >= 1");
    Tensor<Real> out(Shape{slopes.n_heads, q_len, k_len});
    for (int64_t h = 0; h < slopes.n_heads; ++h) {
        const double m = slopes.slopes[static_cast<size_t>(h)];
        Real* ph = out.data() + h * q_len * k_len;
        for (int64_t i = 0; i < q_len; ++i)
            for (int64_t j = 0; j < k_len; ++j) {
                const int64_t dist = causal ? (j <= i ? i - j : 0) : std::abs(i - j);
                ph[i * k_len + j] = static_cast<Real>(-m * double(dist));
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// NoPE
// ---------------------------------------------------------------------------

template <class Real>
const Tensor<Real>& nope_apply(const Tensor<Real>& x) {
    return x; // no positional signal anywhere
}

} // namespace peswap
