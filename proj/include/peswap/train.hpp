#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "peswap/checkpoint.hpp"
#include "peswap/config.hpp"
#include "peswap/metrics.hpp"
#include "peswap/model.hpp"
#include "peswap/tape.hpp"

namespace peswap {

struct TrainConfig {
    double base_lr = 7e-4;
    int64_t warmup_steps = 4000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    double label_smoothing = 0.1;
    double dropout = 0.2;
    int64_t max_tokens_per_batch = 4096;
    int64_t checkpoint_every = 1000;
    int eval_beam = 5;
    int patience = 10;
    int64_t max_steps = 0; // 0 = rely on early stopping only
};

/// Fine-tuning recipe; FFT and the LoRA strategies differ in lr, betas,
/// smoothing and dropout.
inline TrainConfig finetune_preset(Strategy s) {
    TrainConfig c;
    c.warmup_steps = 2000;
    c.checkpoint_every = 1000;
    c.eval_beam = 5;
    c.patience = 10;
    c.clip_norm = 1.0;
    if (s == Strategy::fft) {
        c.base_lr = 6e-5;
        c.beta1 = 0.9;
        c.beta2 = 0.98;
        c.label_smoothing = 0.1;
        c.dropout = 0.2;
    } else {
        c.base_lr = 1e-4;
        c.beta1 = 0.9;
        c.beta2 = 0.999;
        c.label_smoothing = 0.0;
        c.dropout = 0.0;
    }
    return c;
}

inline TrainConfig scratch_preset() {
    TrainConfig c;
    c.base_lr = 7e-4;
    c.warmup_steps = 4000;
    c.beta1 = 0.9;
    c.beta2 = 0.98;
    c.label_smoothing = 0.1;
    c.dropout = 0.2;
    c.clip_norm = 1.0;
    c.checkpoint_every = 1000;
    c.eval_beam = 5;
    c.patience = 10;
    return c;
}

/// Inverse-square-root schedule with linear warmup.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 1) throw std::invalid_argument("lr_at: step starts at 1");
    if (step <= cfg.warmup_steps)
        return cfg.base_lr * double(step) / double(cfg.warmup_steps);
    return cfg.base_lr * std::sqrt(double(cfg.warmup_steps) / double(step));
}

// ---------------------------------------------------------------------------
// label-smoothed cross entropy (fused tape op)
// ---------------------------------------------------------------------------

/// Token-mean smoothed CE over logits [..., V]. `targets` and `mask` are flat
/// over the leading dims; mask==0 rows are excluded. Smoothing distributes
/// epsilon uniformly: loss = (1-eps) * nll + eps * mean_v(-log p_v).
template <class Real>
typename Tape<Real>::Var smoothed_ce(Tape<Real>& tape, typename Tape<Real>::Var logits,
                                     const std::vector<int32_t>& targets,
                                     const std::vector<uint8_t>& mask, double epsilon) {
    if (epsilon < 0 || epsilon >= 1)
        throw std::invalid_argument("smoothed_ce: epsilon must be in [0,1)");
    const Tensor<Real>& tl = tape.value(logits);
    const int64_t V = tl.dim(tl.rank() - 1);
    const int64_t rows = tl.size() / V;
    if (static_cast<int64_t>(targets.size()) != rows)
        throw std::invalid_argument("smoothed_ce: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(rows) + " rows");
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != rows)
        throw std::invalid_argument("smoothed_ce: mask length mismatch");
    int64_t n_real = 0;
    for (int64_t r = 0; r < rows; ++r)
        if (mask.empty() || mask[static_cast<size_t>(r)]) ++n_real;
    if (n_real == 0) throw std::invalid_argument("smoothed_ce: every position is padding");

    auto probs = std::make_shared<Tensor<Real>>(tl.shape());
    double loss = 0;
    std::vector<Real> logp(static_cast<size_t>(V));
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask.empty() && !mask[static_cast<size_t>(r)]) continue;
        const Real* row = tl.data() + r * V;
        kernels::log_softmax_rows(row, logp.data(), 1, V);
        Real* prow = probs->data() + r * V;
        double mean_nll = 0;
        for (int64_t v = 0; v < V; ++v) {
            prow[v] = std::exp(logp[static_cast<size_t>(v)]);
            mean_nll -= static_cast<double>(logp[static_cast<size_t>(v)]);
        }
        mean_nll /= double(V);
        const int32_t t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= V)
            throw std::out_of_range("smoothed_ce: target " + std::to_string(t) +
                                    " outside vocab of " + std::to_string(V));
        loss += (1.0 - epsilon) * -static_cast<double>(logp[static_cast<size_t>(t)]) +
                epsilon * mean_nll;
    }
    loss /= double(n_real);

    auto tgt = std::make_shared<std::vector<int32_t>>(targets);
    auto msk = std::make_shared<std::vector<uint8_t>>(mask);
    const int32_t il = logits.id;
    return tape.custom(
        Tensor<Real>::scalar(static_cast<Real>(loss)), {logits},
        [il, probs, tgt, msk, epsilon, rows, V, n_real](Tape<Real>& t, const Tensor<Real>& g) {
            Tensor<Real>& gl = t.grad_ref(il);
            const Real go = g[0];
            const Real inv_n = static_cast<Real>(1.0 / double(n_real));
            const Real eps_v = static_cast<Real>(epsilon / double(V));
            const Real one_m = static_cast<Real>(1.0 - epsilon);
            for (int64_t r = 0; r < rows; ++r) {
                if (!msk->empty() && !(*msk)[static_cast<size_t>(r)]) continue;
                const Real* prow = probs->data() + r * V;
                Real* grow = gl.data() + r * V;
                const int32_t tv = (*tgt)[static_cast<size_t>(r)];
                for (int64_t v = 0; v < V; ++v) {
                    Real q = eps_v;
                    if (v == tv) q += one_m;
                    grow[v] += go * inv_n * (prow[v] - q);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <class Real>
class Adam {
public:
    struct Slot {
        Tensor<Real> m, v;
    };

    int64_t step_count() const { return step_; }

    /// Bias-corrected Adam over the trainable parameters. Frozen parameters
    /// are never touched; the return value counts frozen parameters that
    /// carried a stray gradient. Missing gradients on trainable parameters
    /// are a usage error.
    int step(const std::vector<Parameter<Real>*>& params, double lr, const TrainConfig& cfg) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_));
        int stray = 0;
        for (Parameter<Real>* p : params) {
            if (!p->trainable) {
                if (p->has_grad) ++stray;
                continue;
            }
            if (!p->has_grad)
                throw std::logic_error("adam: trainable parameter " + p->name + " has no gradient");
            Slot& slot = slots_[p->name];
            if (slot.m.empty()) {
                slot.m = Tensor<Real>(p->value.shape());
                slot.v = Tensor<Real>(p->value.shape());
            }
            Real* w = p->value.data();
            const Real* g = p->grad.data();
            Real* m = slot.m.data();
            Real* v = slot.v.data();
            const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
            for (int64_t i = 0; i < p->value.size(); ++i) {
                m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
                v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
                const double mhat = double(m[i]) / bc1;
                const double vhat = double(v[i]) / bc2;
                w[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
            }
        }
        return stray;
    }

    std::vector<std::pair<std::string, const Slot*>> slots() const {
        std::vector<std::pair<std::string, const Slot*>> out;
        for (const auto& [k, s] : slots_) out.emplace_back(k, &s);
        std::sort(out.begin(), out.end());
        return out;
    }

    void restore_slot(const std::string& name, Tensor<Real> m, Tensor<Real> v) {
        slots_[name] = Slot{std::move(m), std::move(v)};
    }
    void set_step_count(int64_t s) { step_ = s; }

private:
    std::unordered_map<std::string, Slot> slots_;
    int64_t step_ = 0;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// applied scale (1.0 when nothing was clipped).
template <class Real>
double clip_global_norm(const std::vector<Parameter<Real>*>& params, double max_norm) {
    if (max_norm <= 0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
    double sq = 0;
    for (const Parameter<Real>* p : params) {
        if (!p->trainable || !p->has_grad) continue;
        for (int64_t i = 0; i < p->grad.size(); ++i) {
            const double g = static_cast<double>(p->grad[i]);
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (Parameter<Real>* p : params) {
        if (!p->trainable || !p->has_grad) continue;
        for (int64_t i = 0; i < p->grad.size(); ++i)
            p->grad[i] = static_cast<Real>(p->grad[i] * scale);
    }
    return scale;
}

// ---------------------------------------------------------------------------
// optimizer state persistence (sibling file, never inside the model checkpoint)
// ---------------------------------------------------------------------------

template <class Real>
void save_optimizer_state(const Adam<Real>& adam, const std::string& path) {
    Manifest man;
    man.kind = "optimizer";
    man.config.src_vocab = 1;
    man.config.tgt_vocab = 1;
    std::vector<TensorBlob> blobs;
    Tensor<Real> step_t = Tensor<Real>::scalar(static_cast<Real>(adam.step_count()));
    blobs.push_back(TensorBlob{"adam.step", step_t.shape(), dtype_of<Real>(),
                               detail::tensor_to_le(step_t)});
    for (const auto& [name, slot] : adam.slots()) {
        blobs.push_back(TensorBlob{"adam.m." + name, slot->m.shape(), dtype_of<Real>(),
                                   detail::tensor_to_le(slot->m)});
        blobs.push_back(TensorBlob{"adam.v." + name, slot->v.shape(), dtype_of<Real>(),
                                   detail::tensor_to_le(slot->v)});
    }
    write_checkpoint_file(path, std::move(man), std::move(blobs));
}

template <class Real>
Adam<Real> load_optimizer_state(const std::string& path) {
    LoadedCheckpoint lc = read_checkpoint_file(path);
    if (lc.manifest.kind != "optimizer")
        throw checkpoint_error(CkptError::schema, "not an optimizer state file: " + path);
    Adam<Real> adam;
    std::unordered_map<std::string, Tensor<Real>> loaded;
    for (size_t i = 0; i < lc.manifest.tensors.size(); ++i) {
        const auto& rec = lc.manifest.tensors[i];
        loaded.emplace(rec.name, detail::tensor_from_le<Real>(rec.shape, lc.tensor_bytes[i]));
    }
    auto it = loaded.find("adam.step");
    if (it == loaded.end())
        throw checkpoint_error(CkptError::schema, "optimizer state missing step counter");
    adam.set_step_count(static_cast<int64_t>(it->second[0]));
    for (auto& [name, t] : loaded) {
        if (name.rfind("adam.m.", 0) != 0) continue;
        const std::string pname = name.substr(7);
        auto vit = loaded.find("adam.v." + pname);
        if (vit == loaded.end())
            throw checkpoint_error(CkptError::schema, "optimizer state missing v for " + pname);
        adam.restore_slot(pname, t.clone(), vit->second.clone());
    }
    return adam;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct SpecialIds {
    int32_t pad = 0;
    int32_t bos = 1;
    int32_t eos = 2;
};

struct TrainLogRow {
    int64_t step = 0;
    double lr = 0;
    double train_loss = 0;
    double dev_bleu = 0;
    double dev_chrfpp = 0;
};

struct TrainResult {
    double best_score = -std::numeric_limits<double>::infinity();
    int64_t best_step = 0;
    int64_t steps_run = 0;
    std::string stop_reason;
    std::vector<TrainLogRow> log;
    std::string best_path;
};

struct train_divergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainOptions {
    std::string out_dir;    // empty: keep everything in memory
    std::vector<std::string> languages;
    // Replaces beam-decode + BLEU dev scoring (tests use this to probe the
    // early-stopping rule).
    std::function<double(TransformerModel<float>*, int64_t)> dev_score_override_f32;
};

using IdPair = std::pair<TokenSeq, TokenSeq>;

namespace detail {

// Greedy token-budget packing over length-sorted, seed-shuffled pairs.
inline std::vector<std::vector<size_t>> make_batches(const std::vector<IdPair>& pairs,
                                                     int64_t max_tokens, RngStream& rng) {
    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t(0));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return pairs[a].first.size() < pairs[b].first.size();
    });
    std::vector<std::vector<size_t>> batches;
    std::vector<size_t> cur;
    int64_t src_max = 0, tgt_max = 0;
    for (size_t idx : order) {
        const int64_t s = std::max<int64_t>(src_max, static_cast<int64_t>(pairs[idx].first.size()));
        const int64_t t =
            std::max<int64_t>(tgt_max, static_cast<int64_t>(pairs[idx].second.size()));
        const int64_t cost = (s + t) * static_cast<int64_t>(cur.size() + 1);
        if (!cur.empty() && cost > max_tokens) {
            batches.push_back(cur);
            cur.clear();
            src_max = tgt_max = 0;
            cur.push_back(idx);
            src_max = static_cast<int64_t>(pairs[idx].first.size());
            tgt_max = static_cast<int64_t>(pairs[idx].second.size());
        } else {
            cur.push_back(idx);
            src_max = s;
            tgt_max = t;
        }
    }
    if (!cur.empty()) batches.push_back(cur);
    for (size_t i = batches.size(); i > 1; --i)
        std::swap(batches[i - 1], batches[rng.below(i)]);
    return batches;
}

template <class Real>
std::vector<Tensor<Real>> snapshot_params(TransformerModel<Real>& m) {
    std::vector<Tensor<Real>> out;
    for (auto* p : m.params.all()) out.push_back(p->value.clone());
    return out;
}

template <class Real>
void restore_params(TransformerModel<Real>& m, const std::vector<Tensor<Real>>& snap) {
    auto params = m.params.all();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i].clone();
}

} // namespace detail

/// Decode every source with beam search and score against references.
struct DevScores {
    double bleu = 0;
    double chrfpp = 0;
};

template <class Real>
DevScores score_dev(const TransformerModel<Real>& m, const std::vector<IdPair>& dev,
                    const SpecialIds& ids, int beam,
                    const std::function<std::string(const TokenSeq&)>& detok) {
    BeamConfig bc;
    bc.beam = beam;
    std::vector<std::string> hyps, refs;
    for (const auto& [src, tgt] : dev) {
        TokenSeq out = translate_sequence(m, src, ids.bos, ids.eos, bc);
        hyps.push_back(detok(out));
        refs.push_back(detok(tgt));
    }
    DevScores s;
    s.bleu = bleu(hyps, refs);
    s.chrfpp = chrfpp(hyps, refs);
    return s;
}

inline std::string default_detok(const TokenSeq& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(ids[i]);
    }
    return out;
}

/// The fine-tuning/training recipe: Adam + inverse-sqrt schedule + clipping +
/// label-smoothed CE, dev BLEU at beam `eval_beam` every `checkpoint_every`
/// steps, patience-based early stopping. Returns with the best-scoring
/// weights restored into `model`.
template <class Real>
TrainResult train_loop(TransformerModel<Real>& model, const std::vector<IdPair>& train_pairs,
                       const std::vector<IdPair>& dev_pairs, const TrainConfig& cfg, RngStream rng,
                       const TrainOptions& opts = {}, const SpecialIds& ids = {},
                       std::function<std::string(const TokenSeq&)> detok = default_detok) {
    if (dev_pairs.empty() && !opts.dev_score_override_f32)
        throw std::invalid_argument("train_loop: dev set must not be empty");
    if (train_pairs.empty()) throw std::invalid_argument("train_loop: no training pairs");

    const bool to_disk = !opts.out_dir.empty();
    if (to_disk) std::filesystem::create_directories(opts.out_dir);

    Adam<Real> adam;
    TrainResult result;
    RngStream dropout_rng = rng.fork(1);
    RngStream batch_rng = rng.fork(2);

    // strict-improvement early stopping; ties keep the earlier checkpoint
    double best = -std::numeric_limits<double>::infinity();
    int64_t best_step = 0;
    int evals_since_best = 0;
    std::vector<Tensor<Real>> best_snapshot;

    auto params = model.params.all();
    int64_t step = 0;
    double loss_accum = 0;
    int64_t loss_count = 0;
    std::vector<std::vector<size_t>> batches;
    size_t batch_idx = 0;
    int64_t epoch = 0;
    bool stop = false;

    while (!stop) {
        if (batch_idx >= batches.size()) {
            RngStream epoch_rng = batch_rng.fork(static_cast<uint64_t>(epoch++));
            batches = detail::make_batches(train_pairs, cfg.max_tokens_per_batch, epoch_rng);
            batch_idx = 0;
        }
        std::vector<TokenSeq> srcs, tgts;
        for (size_t idx : batches[batch_idx++]) {
            srcs.push_back(train_pairs[idx].first);
            tgts.push_back(train_pairs[idx].second);
        }
        TokenBatch batch = make_batch(srcs, tgts, ids.pad, ids.bos);

        ++step;
        model.params.zero_grads();
        Tape<Real> tape;
        auto logits = forward_teacher_forced(tape, model, batch, true, dropout_rng);
        auto loss = smoothed_ce(tape, logits, batch.tgt_out, batch.tgt_mask, cfg.label_smoothing);
        const double loss_value = static_cast<double>(tape.value(loss)[0]);
        if (!std::isfinite(loss_value))
            throw train_divergence("training diverged: loss " + std::to_string(loss_value) +
                                   " at step " + std::to_string(step));
        tape.backward(loss);
        clip_global_norm(params, cfg.clip_norm);
        const double lr = lr_at(step, cfg);
        adam.step(params, lr, cfg);
        loss_accum += loss_value;
        ++loss_count;

        if (step % cfg.checkpoint_every == 0) {
            double dev_bleu = 0, dev_chrf = 0;
            if (opts.dev_score_override_f32) {
                TransformerModel<float>* fp = nullptr;
                if constexpr (std::is_same_v<Real, float>) fp = &model;
                dev_bleu = opts.dev_score_override_f32(fp, step);
            } else {
                auto s = score_dev(model, dev_pairs, ids, cfg.eval_beam, detok);
                dev_bleu = s.bleu;
                dev_chrf = s.chrfpp;
            }
            TrainLogRow row{step, lr, loss_accum / double(std::max<int64_t>(1, loss_count)),
                            dev_bleu, dev_chrf};
            result.log.push_back(row);
            loss_accum = 0;
            loss_count = 0;

            if (to_disk) {
                const std::string ckpt =
                    opts.out_dir + "/step" + std::to_string(step) + ".ckpt";
                save_checkpoint(model, ckpt, opts.languages);
                save_optimizer_state(adam, ckpt + ".opt");
            }
            if (dev_bleu > best) {
                best = dev_bleu;
                best_step = step;
                evals_since_best = 0;
                best_snapshot = detail::snapshot_params(model);
                if (to_disk) {
                    save_checkpoint(model, opts.out_dir + "/best.ckpt", opts.languages);
                    result.best_path = opts.out_dir + "/best.ckpt";
                }
            } else {
                ++evals_since_best;
                if (evals_since_best >= cfg.patience) {
                    result.stop_reason = "patience";
                    stop = true;
                }
            }
        }
        if (cfg.max_steps > 0 && step >= cfg.max_steps && !stop) {
            result.stop_reason = "max_steps";
            stop = true;
        }
    }

    if (!best_snapshot.empty()) detail::restore_params(model, best_snapshot);
    result.best_score = best;
    result.best_step = best_step;
    result.steps_run = step;

    if (to_disk) {
        std::ofstream log(opts.out_dir + "/train.log");
        for (const auto& row : result.log) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld\t%.8g\t%.6f\t%.4f\t%.4f\n",
                          static_cast<long long>(row.step), row.lr, row.train_loss, row.dev_bleu,
                          row.dev_chrfpp);
            log << buf;
        }
    }
    return result;
}

} // namespace peswap
