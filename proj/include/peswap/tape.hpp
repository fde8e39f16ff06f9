#pragma once

#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "peswap/kernels.hpp"
#include "peswap/rng.hpp"
#include "peswap/tensor.hpp"

namespace peswap {

/// A named weight with an optionally populated gradient buffer.
template <class Real>
struct Parameter {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad; // allocated on first accumulation
    bool trainable = true;
    bool has_grad = false;

    void zero_grad() {
        has_grad = false;
        if (!grad.empty()) grad.fill(Real(0));
    }

    void accumulate_grad(const Tensor<Real>& g) {
        if (!g.same_shape(value))
            throw std::invalid_argument("grad shape " + shape_str(g.shape()) +
                                        " != value shape " + shape_str(value.shape()) + " for " + name);
        if (grad.empty()) grad = Tensor<Real>(value.shape());
        Real* pd = grad.data();
        const Real* ps = g.data();
        for (int64_t i = 0; i < g.size(); ++i) pd[i] += ps[i];
        has_grad = true;
    }
};

/// Owns parameters with stable addresses and unique dotted names.
template <class Real>
class ParamStore {
public:
    Parameter<Real>* add(std::string name, Tensor<Real> value, bool trainable = true) {
        if (by_name_.count(name))
            throw std::invalid_argument("duplicate parameter name: " + name);
        params_.push_back(Parameter<Real>{name, std::move(value), {}, trainable, false});
        Parameter<Real>* p = &params_.back();
        by_name_.emplace(std::move(name), p);
        return p;
    }

    Parameter<Real>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }
    const Parameter<Real>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    void remove(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::invalid_argument("no such parameter: " + name);
        params_.remove_if([&](const Parameter<Real>& p) { return &p == it->second; });
        by_name_.erase(it);
    }

    std::vector<Parameter<Real>*> all() {
        std::vector<Parameter<Real>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }
    std::vector<const Parameter<Real>*> all() const {
        std::vector<const Parameter<Real>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    size_t count() const { return params_.size(); }

    int64_t count_scalars(bool trainable_only) const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::list<Parameter<Real>> params_; // list: stable addresses across add/remove
    std::unordered_map<std::string, Parameter<Real>*> by_name_;
};

/// Reverse-mode gradient tape. One tape records one forward computation;
/// backward() may run once and accumulates into trainable Parameters.
template <class Real>
class Tape {
public:
    struct Var {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    using BackFn = std::function<void(Tape&, const Tensor<Real>&)>;

    // ---- leaves ----

    Var input(Tensor<Real> value) { return push(std::move(value), {}, nullptr, nullptr); }

    Var param(Parameter<Real>& p) { return push(p.value, {}, nullptr, &p); }

    // ---- elementwise / broadcast ----

    Var add(Var a, Var b) {
        const Tensor<Real>&ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb))
            throw std::invalid_argument("add: shape mismatch " + shape_str(ta.shape()) + " vs " +
                                        shape_str(tb.shape()));
        Tensor<Real> y(ta.shape());
        for (int64_t i = 0; i < y.size(); ++i) y[i] = ta[i] + tb[i];
        const int32_t ia = a.id, ib = b.id;
        return push(std::move(y), {a, b}, [ia, ib](Tape& t, const Tensor<Real>& g) {
            t.accum_flat(ia, g);
            t.accum_flat(ib, g);
        });
    }

    // x[..., d] + bias[d]
    Var add_bias(Var x, Var bias) {
        const Tensor<Real>&tx = val(x), &tb = val(bias);
        const int64_t d = tx.dim(tx.rank() - 1);
        if (tb.rank() != 1 || tb.dim(0) != d)
            throw std::invalid_argument("add_bias: bias " + shape_str(tb.shape()) + " for " +
                                        shape_str(tx.shape()));
        Tensor<Real> y(tx.shape());
        const int64_t rows = tx.size() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) y[r * d + j] = tx[r * d + j] + tb[j];
        const int32_t ix = x.id, ib = bias.id;
        return push(std::move(y), {x, bias}, [ix, ib, rows, d](Tape& t, const Tensor<Real>& g) {
            t.accum_flat(ix, g);
            Tensor<Real>& gb = t.grad_ref(ib);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        });
    }

    // x[..., t, d] + rows[t, d], broadcast over leading dims.
    Var add_rows(Var x, Var rows) {
        const Tensor<Real>&tx = val(x), &tr = val(rows);
        if (tr.rank() != 2 || tx.rank() < 2 || tx.dim(tx.rank() - 1) != tr.dim(1) ||
            tx.dim(tx.rank() - 2) != tr.dim(0))
            throw std::invalid_argument("add_rows: " + shape_str(tx.shape()) + " vs " +
                                        shape_str(tr.shape()));
        const int64_t block = tr.size();
        const int64_t reps = tx.size() / block;
        Tensor<Real> y(tx.shape());
        for (int64_t r = 0; r < reps; ++r)
            for (int64_t i = 0; i < block; ++i) y[r * block + i] = tx[r * block + i] + tr[i];
        const int32_t ix = x.id, ir = rows.id;
        return push(std::move(y), {x, rows}, [ix, ir, reps, block](Tape& t, const Tensor<Real>& g) {
            t.accum_flat(ix, g);
            Tensor<Real>& gr = t.grad_ref(ir);
            for (int64_t r = 0; r < reps; ++r)
                for (int64_t i = 0; i < block; ++i) gr[i] += g[r * block + i];
        });
    }

    // x + c where c carries no gradient (masks, attention biases).
    Var add_const(Var x, const Tensor<Real>& c) {
        const Tensor<Real>& tx = val(x);
        if (!tx.same_shape(c))
            throw std::invalid_argument("add_const: shape mismatch " + shape_str(tx.shape()) +
                                        " vs " + shape_str(c.shape()));
        Tensor<Real> y(tx.shape());
        for (int64_t i = 0; i < y.size(); ++i) y[i] = tx[i] + c[i];
        const int32_t ix = x.id;
        return push(std::move(y), {x},
                    [ix](Tape& t, const Tensor<Real>& g) { t.accum_flat(ix, g); });
    }

    Var scale(Var x, Real s) {
        const Tensor<Real>& tx = val(x);
        Tensor<Real> y(tx.shape());
        for (int64_t i = 0; i < y.size(); ++i) y[i] = tx[i] * s;
        const int32_t ix = x.id;
        return push(std::move(y), {x}, [ix, s](Tape& t, const Tensor<Real>& g) {
            Tensor<Real>& gx = t.grad_ref(ix);
            for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
        });
    }

    Var relu(Var x) {
        const Tensor<Real>& tx = val(x);
        Tensor<Real> y(tx.shape());
        kernels::relu(tx.data(), y.data(), tx.size());
        const int32_t ix = x.id;
        return push(std::move(y), {x}, [ix](Tape& t, const Tensor<Real>& g) {
            const Tensor<Real>& xin = t.val_by_id(ix);
            Tensor<Real>& gx = t.grad_ref(ix);
            for (int64_t i = 0; i < g.size(); ++i)
                if (xin[i] > Real(0)) gx[i] += g[i];
        });
    }

    // Inverted dropout; identity when p == 0. Mask is drawn from `rng`.
    Var dropout(Var x, double p, RngStream& rng) {
        if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p must be in [0,1)");
        if (p == 0) return x;
        const Tensor<Real>& tx = val(x);
        auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(tx.size()));
        const Real keep_scale = Real(1.0 / (1.0 - p));
        Tensor<Real> y(tx.shape());
        for (int64_t i = 0; i < tx.size(); ++i) {
            const bool keep = rng.uniform() >= p;
            (*mask)[static_cast<size_t>(i)] = keep;
            y[i] = keep ? tx[i] * keep_scale : Real(0);
        }
        const int32_t ix = x.id;
        return push(std::move(y), {x}, [ix, mask, keep_scale](Tape& t, const Tensor<Real>& g) {
            Tensor<Real>& gx = t.grad_ref(ix);
            for (int64_t i = 0; i < g.size(); ++i)
                if ((*mask)[static_cast<size_t>(i)]) gx[i] += g[i] * keep_scale;
        });
    }

    // ---- shape ----

    Var reshape(Var x, Shape s) {
        Tensor<Real> y = val(x).reshaped(std::move(s)); // shares buffer
        const int32_t ix = x.id;
        return push(std::move(y), {x},
                    [ix](Tape& t, const Tensor<Real>& g) { t.accum_flat(ix, g); });
    }

    // [a,b,c,d] -> [a,c,b,d]
    Var permute_0213(Var x) {
        const Tensor<Real>& tx = val(x);
        if (tx.rank() != 4) throw std::invalid_argument("permute_0213: need rank 4, got " +
                                                        shape_str(tx.shape()));
        const int64_t a = tx.dim(0), b = tx.dim(1), c = tx.dim(2), d = tx.dim(3);
        Tensor<Real> y(Shape{a, c, b, d});
        kernels::permute_0213(tx.data(), y.data(), a, b, c, d);
        const int32_t ix = x.id;
        return push(std::move(y), {x}, [ix, a, b, c, d](Tape& t, const Tensor<Real>& g) {
            Tensor<Real> gi(Shape{a, b, c, d});
            kernels::permute_0213(g.data(), gi.data(), a, c, b, d);
            t.accum_flat(ix, gi);
        });
    }

    // ---- matmul family ----

    // Plain product: 2-D x 2-D or batched 3-D x 3-D.
    Var matmul(Var a, Var b) {
        const Tensor<Real>&ta = val(a), &tb = val(b);
        const auto bad = [&] {
            return std::invalid_argument("matmul: incompatible shapes " + shape_str(ta.shape()) +
                                         " x " + shape_str(tb.shape()));
        };
        if (ta.rank() == 2 && tb.rank() == 2) {
            if (ta.dim(1) != tb.dim(0)) throw bad();
            const int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
            Tensor<Real> y(Shape{m, n});
            kernels::gemm_nn(ta.data(), tb.data(), y.data(), m, k, n);
            const int32_t ia = a.id, ib = b.id;
            return push(std::move(y), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor<Real>& g) {
                const Tensor<Real>&va = t.val_by_id(ia), &vb = t.val_by_id(ib);
                kernels::gemm_nt(g.data(), vb.data(), t.grad_ref(ia).data(), m, n, k);
                kernels::gemm_tn(va.data(), g.data(), t.grad_ref(ib).data(), m, k, n);
            });
        }
        if (ta.rank() == 3 && tb.rank() == 3) {
            if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1)) throw bad();
            return bmm_nn(a, b);
        }
        throw bad();
    }

    // [N,A,D] x [N,B,D] -> [N,A,B]  (scores = q k^T)
    Var bmm_nt(Var a, Var b) {
        const Tensor<Real>&ta = val(a), &tb = val(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2))
            throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(ta.shape()) +
                                        " x " + shape_str(tb.shape()));
        const int64_t N = ta.dim(0), A = ta.dim(1), D = ta.dim(2), B = tb.dim(1);
        Tensor<Real> y(Shape{N, A, B});
        for (int64_t i = 0; i < N; ++i)
            kernels::gemm_nt(ta.data() + i * A * D, tb.data() + i * B * D, y.data() + i * A * B, A,
                             D, B);
        const int32_t ia = a.id, ib = b.id;
        return push(std::move(y), {a, b}, [ia, ib, N, A, B, D](Tape& t, const Tensor<Real>& g) {
            const Tensor<Real>&va = t.val_by_id(ia), &vb = t.val_by_id(ib);
            Tensor<Real>&ga = t.grad_ref(ia), &gb = t.grad_ref(ib);
            for (int64_t i = 0; i < N; ++i) {
                // dA = g @ B ; dB = g^T @ A
                kernels::gemm_nn(g.data() + i * A * B, vb.data() + i * B * D,
                                 ga.data() + i * A * D, A, B, D);
                kernels::gemm_tn(g.data() + i * A * B, va.data() + i * A * D,
                                 gb.data() + i * B * D, A, B, D);
            }
        });
    }

    // [N,A,B] x [N,B,C] -> [N,A,C]  (context = probs v)
    Var bmm_nn(Var a, Var b) {
        const Tensor<Real>&ta = val(a), &tb = val(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1))
            throw std::invalid_argument("bmm_nn: incompatible shapes " + shape_str(ta.shape()) +
                                        " x " + shape_str(tb.shape()));
        const int64_t N = ta.dim(0), A = ta.dim(1), B = ta.dim(2), C = tb.dim(2);
        Tensor<Real> y(Shape{N, A, C});
        for (int64_t i = 0; i < N; ++i)
            kernels::gemm_nn(ta.data() + i * A * B, tb.data() + i * B * C, y.data() + i * A * C, A,
                             B, C);
        const int32_t ia = a.id, ib = b.id;
        return push(std::move(y), {a, b}, [ia, ib, N, A, B, C](Tape& t, const Tensor<Real>& g) {
            const Tensor<Real>&va = t.val_by_id(ia), &vb = t.val_by_id(ib);
            Tensor<Real>&ga = t.grad_ref(ia), &gb = t.grad_ref(ib);
            for (int64_t i = 0; i < N; ++i) {
                // dA = g @ B^T ; dB = A^T @ g
                kernels::gemm_nt(g.data() + i * A * C, vb.data() + i * B * C,
                                 ga.data() + i * A * B, A, C, B);
                kernels::gemm_tn(va.data() + i * A * B, g.data() + i * A * C,
                                 gb.data() + i * B * C, A, B, C);
            }
        });
    }

    // y = x @ w^T (+ bias); w is [d_out, d_in], x is [..., d_in].
    Var linear(Var x, Var w, Var bias = Var{}) {
        const Tensor<Real>&tx = val(x), &tw = val(w);
        if (tw.rank() != 2 || tx.dim(tx.rank() - 1) != tw.dim(1))
            throw std::invalid_argument("linear: x " + shape_str(tx.shape()) + " w " +
                                        shape_str(tw.shape()));
        const int64_t d_in = tw.dim(1), d_out = tw.dim(0);
        const int64_t rows = tx.size() / d_in;
        Shape out_shape(tx.shape());
        out_shape.back() = d_out;
        Tensor<Real> y(out_shape);
        kernels::gemm_nt(tx.data(), tw.data(), y.data(), rows, d_in, d_out);
        if (bias.valid()) {
            const Tensor<Real>& tb = val(bias);
            if (tb.rank() != 1 || tb.dim(0) != d_out)
                throw std::invalid_argument("linear: bias " + shape_str(tb.shape()));
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d_out; ++j) y[r * d_out + j] += tb[j];
        }
        const int32_t ix = x.id, iw = w.id, ib = bias.id;
        std::vector<Var> parents{x, w};
        if (bias.valid()) parents.push_back(bias);
        return push(std::move(y), std::move(parents),
                    [ix, iw, ib, rows, d_in, d_out](Tape& t, const Tensor<Real>& g) {
                        const Tensor<Real>&vx = t.val_by_id(ix), &vw = t.val_by_id(iw);
                        kernels::gemm_nn(g.data(), vw.data(), t.grad_ref(ix).data(), rows, d_out,
                                         d_in);
                        kernels::gemm_tn(g.data(), vx.data(), t.grad_ref(iw).data(), rows, d_out,
                                         d_in);
                        if (ib >= 0) {
                            Tensor<Real>& gb = t.grad_ref(ib);
                            for (int64_t r = 0; r < rows; ++r)
                                for (int64_t j = 0; j < d_out; ++j) gb[j] += g[r * d_out + j];
                        }
                    });
    }

    // Row gather: out[i,:] = table[ids[i],:]. Throws on out-of-range ids.
    Var embedding(const std::vector<int32_t>& ids, Var table) {
        const Tensor<Real>& tt = val(table);
        if (tt.rank() != 2) throw std::invalid_argument("embedding: table must be 2-D");
        const int64_t v = tt.dim(0), d = tt.dim(1);
        Tensor<Real> y(Shape{static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            const int32_t id = ids[i];
            if (id < 0 || id >= v)
                throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                        " outside vocab of " + std::to_string(v));
            const Real* src = tt.data() + int64_t(id) * d;
            Real* dst = y.data() + int64_t(i) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        const int32_t it = table.id;
        auto idv = std::make_shared<std::vector<int32_t>>(ids);
        return push(std::move(y), {table}, [it, idv, d](Tape& t, const Tensor<Real>& g) {
            Tensor<Real>& gt = t.grad_ref(it);
            for (size_t i = 0; i < idv->size(); ++i) {
                Real* dst = gt.data() + int64_t((*idv)[i]) * d;
                const Real* src = g.data() + int64_t(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }

    // ---- normalization ----

    Var softmax_lastdim(Var x) {
        const Tensor<Real>& tx = val(x);
        const int64_t cols = tx.dim(tx.rank() - 1);
        const int64_t rows = tx.size() / cols;
        Tensor<Real> y(tx.shape());
        kernels::softmax_rows(tx.data(), y.data(), rows, cols);
        const int32_t ix = x.id;
        const int32_t self = next_id();
        return push(std::move(y), {x}, [ix, self, rows, cols](Tape& t, const Tensor<Real>& g) {
            const Tensor<Real>& p = t.val_by_id(self);
            Tensor<Real>& gx = t.grad_ref(ix);
            for (int64_t r = 0; r < rows; ++r) {
                const Real* pr = p.data() + r * cols;
                const Real* gr = g.data() + r * cols;
                Real dot{};
                for (int64_t j = 0; j < cols; ++j) dot += gr[j] * pr[j];
                Real* gxr = gx.data() + r * cols;
                for (int64_t j = 0; j < cols; ++j) gxr[j] += pr[j] * (gr[j] - dot);
            }
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, Real eps) {
        const Tensor<Real>&tx = val(x), &tg = val(gamma), &tb = val(beta);
        const int64_t cols = tx.dim(tx.rank() - 1);
        if (tg.size() != cols || tb.size() != cols)
            throw std::invalid_argument("layer_norm: gamma/beta must match last dim " +
                                        std::to_string(cols));
        const int64_t rows = tx.size() / cols;
        Tensor<Real> y(tx.shape());
        auto xhat = std::make_shared<Tensor<Real>>(tx.shape());
        auto inv_std = std::make_shared<std::vector<Real>>(static_cast<size_t>(rows));
        kernels::layer_norm_rows(tx.data(), tg.data(), tb.data(), eps, y.data(), rows, cols,
                                 xhat->data(), inv_std->data());
        const int32_t ix = x.id, ig = gamma.id, ib = beta.id;
        return push(std::move(y), {x, gamma, beta},
                    [ix, ig, ib, xhat, inv_std, rows, cols](Tape& t, const Tensor<Real>& g) {
                        const Tensor<Real>& vg = t.val_by_id(ig);
                        Tensor<Real>& gx = t.grad_ref(ix);
                        Tensor<Real>& gg = t.grad_ref(ig);
                        Tensor<Real>& gb = t.grad_ref(ib);
                        std::vector<Real> tmp(static_cast<size_t>(cols));
                        for (int64_t r = 0; r < rows; ++r) {
                            const Real* gr = g.data() + r * cols;
                            const Real* hr = xhat->data() + r * cols;
                            Real mean_t{}, mean_th{};
                            for (int64_t j = 0; j < cols; ++j) {
                                tmp[static_cast<size_t>(j)] = gr[j] * vg[j];
                                mean_t += tmp[static_cast<size_t>(j)];
                                mean_th += tmp[static_cast<size_t>(j)] * hr[j];
                                gg[j] += gr[j] * hr[j];
                                gb[j] += gr[j];
                            }
                            mean_t /= Real(cols);
                            mean_th /= Real(cols);
                            const Real inv = (*inv_std)[static_cast<size_t>(r)];
                            Real* gxr = gx.data() + r * cols;
                            for (int64_t j = 0; j < cols; ++j)
                                gxr[j] += inv * (tmp[static_cast<size_t>(j)] - mean_t -
                                                 hr[j] * mean_th);
                        }
                    });
    }

    // ---- reductions ----

    Var sum_all(Var x) {
        const Tensor<Real>& tx = val(x);
        Real s{};
        for (int64_t i = 0; i < tx.size(); ++i) s += tx[i];
        const int32_t ix = x.id;
        return push(Tensor<Real>::scalar(s), {x}, [ix](Tape& t, const Tensor<Real>& g) {
            Tensor<Real>& gx = t.grad_ref(ix);
            for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        });
    }

    Var mean_all(Var x) {
        const int64_t n = val(x).size();
        return scale(sum_all(x), Real(1) / Real(n));
    }

    // Escape hatch for fused composite ops (losses, rotations).
    Var custom(Tensor<Real> value, std::vector<Var> parents, BackFn back) {
        return push(std::move(value), std::move(parents), std::move(back));
    }

    // ---- access / backward ----

    const Tensor<Real>& value(Var v) const { return val(v); }

    /// Gradient of a node (valid after backward; zeros if unreached).
    Tensor<Real> grad(Var v) const {
        const Node& n = node_at(v.id);
        if (n.grad.empty()) return Tensor<Real>(n.value.shape());
        return n.grad;
    }

    size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Accumulates into trainable parameters.
    void backward(Var loss) {
        if (!loss.valid() || loss.id >= static_cast<int32_t>(nodes_.size()))
            throw std::logic_error("backward: variable does not belong to this tape");
        if (backward_done_) throw std::logic_error("backward: tape already consumed");
        if (val(loss).size() != 1)
            throw std::logic_error("backward: loss must be scalar, got " +
                                   shape_str(val(loss).shape()));
        grad_ref(loss.id).fill(Real(1));
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.has_grad) continue;
            if (n.back) n.back(*this, n.grad);
            if (n.bound && n.bound->trainable) n.bound->accumulate_grad(n.grad);
        }
        backward_done_ = true;
    }

    // Internal helpers used by op closures.
    Tensor<Real>& grad_ref(int32_t id) {
        Node& n = nodes_.at(static_cast<size_t>(id));
        if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape());
        n.has_grad = true;
        return n.grad;
    }
    const Tensor<Real>& val_by_id(int32_t id) const {
        return nodes_.at(static_cast<size_t>(id)).value;
    }
    void accum_flat(int32_t id, const Tensor<Real>& g) {
        Tensor<Real>& gx = grad_ref(id);
        Real* pd = gx.data();
        const Real* ps = g.data();
        for (int64_t i = 0; i < g.size(); ++i) pd[i] += ps[i];
    }

private:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;
        bool has_grad = false;
        BackFn back;
        Parameter<Real>* bound = nullptr;
    };

    int32_t next_id() const { return static_cast<int32_t>(nodes_.size()); }

    Var push(Tensor<Real> value, std::vector<Var> parents, BackFn back,
             Parameter<Real>* bound = nullptr) {
        for (Var p : parents)
            if (!p.valid() || p.id >= next_id())
                throw std::logic_error("tape: parent variable not on this tape");
        Node n;
        n.value = std::move(value);
        n.back = std::move(back);
        n.bound = bound;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    const Tensor<Real>& val(Var v) const { return node_at(v.id).value; }
    const Node& node_at(int32_t id) const {
        if (id < 0 || id >= static_cast<int32_t>(nodes_.size()))
            throw std::logic_error("tape: variable does not belong to this tape");
        return nodes_[static_cast<size_t>(id)];
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

template <class Real>
using Var = typename Tape<Real>::Var;

struct FiniteDiffReport {
    double max_rel_error = 0;
    int samples_checked = 0;
    std::vector<std::string> warnings;
};

/// Central-difference check of tape gradients. `loss_fn` must build a fresh
/// tape, run backward, and return the scalar loss; it must be deterministic
/// (dropout off) and leave gradients in the parameters it received.
template <class Real, class LossFn>
FiniteDiffReport finite_diff_check(LossFn&& loss_fn, std::span<Parameter<Real>* const> params,
                                   double h, int samples, RngStream& rng) {
    FiniteDiffReport report;
    for (auto* p : params) p->zero_grad();
    const double l1 = loss_fn();
    for (auto* p : params) p->zero_grad();
    const double l2 = loss_fn();
    if (l1 != l2)
        throw std::logic_error("finite_diff_check: forward is not deterministic (" +
                               std::to_string(l1) + " vs " + std::to_string(l2) + ")");

    std::vector<Parameter<Real>*> trainable;
    int64_t total = 0;
    for (auto* p : params)
        if (p->trainable && p->value.size() > 0) {
            trainable.push_back(p);
            total += p->value.size();
        }
    if (samples <= 0 || total == 0) {
        report.warnings.push_back("finite_diff_check: nothing sampled (samples=" +
                                  std::to_string(samples) + ", scalars=" + std::to_string(total) +
                                  ")");
        return report;
    }

    // Analytic gradients from one tape pass.
    for (auto* p : params) p->zero_grad();
    loss_fn();
    std::vector<Tensor<Real>> saved;
    saved.reserve(trainable.size());
    for (auto* p : trainable) {
        if (!p->has_grad)
            saved.push_back(Tensor<Real>(p->value.shape()));
        else
            saved.push_back(p->grad.clone());
    }

    for (int s = 0; s < samples; ++s) {
        int64_t flat = static_cast<int64_t>(rng.below(static_cast<uint64_t>(total)));
        size_t pi = 0;
        while (flat >= trainable[pi]->value.size()) {
            flat -= trainable[pi]->value.size();
            ++pi;
        }
        Parameter<Real>& p = *trainable[pi];
        const Real w0 = p.value[flat];
        p.value[flat] = w0 + static_cast<Real>(h);
        const double fp = loss_fn();
        p.value[flat] = w0 - static_cast<Real>(h);
        const double fm = loss_fn();
        p.value[flat] = w0;

        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic = static_cast<double>(saved[pi][flat]);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-10});
        const double rel =
            (std::abs(numeric) < 1e-10 && std::abs(analytic) < 1e-10)
                ? 0.0
                : std::abs(numeric - analytic) / denom;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.samples_checked;
    }
    return report;
}

} // namespace peswap
