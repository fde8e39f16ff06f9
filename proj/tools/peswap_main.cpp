// Command-line harness: every subcommand is a thin flag-driven wrapper over
// one library operation. Errors come out as a single machine-parseable line
// on stderr with a nonzero exit code.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peswap/adapters.hpp"
#include "peswap/checkpoint.hpp"
#include "peswap/corpus.hpp"
#include "peswap/experiment.hpp"
#include "peswap/metrics.hpp"
#include "peswap/model.hpp"
#include "peswap/train.hpp"

namespace {

using namespace peswap;

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

Vocab vocab_for_manifest(const Manifest& man) {
    std::vector<std::string> langs = man.languages;
    if (langs.empty()) langs = {"xx", "yy"};
    return Vocab::toy(man.config.src_vocab, langs);
}

struct DataFlags {
    std::string train_tsv, dev_tsv;
    std::string task = "mapped-translate";
    int64_t vocab = 200;
    int64_t n_train = 20000, n_dev = 128;
    std::pair<int64_t, int64_t> len{5, 20};

    void attach(CLI::App* cmd) {
        cmd->add_option("--train-tsv", train_tsv, "training pairs (TSV with src/tgt columns)");
        cmd->add_option("--dev-tsv", dev_tsv, "dev pairs TSV; required with --train-tsv");
        cmd->add_option("--task", task, "toy task when no TSV given: copy|reverse|mapped-translate");
        cmd->add_option("--vocab", vocab, "toy vocabulary size");
        cmd->add_option("--n-train", n_train, "toy training pairs");
        cmd->add_option("--n-dev", n_dev, "toy dev pairs");
        cmd->add_option("--min-len", len.first, "toy minimum source length");
        cmd->add_option("--max-len", len.second, "toy maximum source length");
    }

    // Returns (train, dev, vocab). Toy data is seeded from `seed`.
    std::tuple<std::vector<IdPair>, std::vector<IdPair>, Vocab> load(uint64_t seed) const {
        Vocab v = Vocab::toy(vocab, {"xx", "yy"});
        std::vector<ParallelPair> train_pairs, dev_pairs;
        if (!train_tsv.empty()) {
            if (dev_tsv.empty()) throw std::runtime_error("--train-tsv requires --dev-tsv");
            train_pairs = read_pairs_tsv(train_tsv);
            dev_pairs = read_pairs_tsv(dev_tsv);
        } else {
            const ToyKind kind = parse_toy_kind(task);
            train_pairs = gen_toy_task(kind, vocab, len, n_train, RngStream(seed, 11));
            dev_pairs = gen_toy_task(kind, vocab, len, n_dev, RngStream(seed, 13));
        }
        return {encode_pairs(v, train_pairs, "xx", "yy"), encode_pairs(v, dev_pairs, "xx", "yy"),
                v};
    }
};

TrainConfig apply_common_train_flags(TrainConfig cfg, int64_t max_steps, int64_t warmup,
                                     double lr, int64_t checkpoint_every, int patience,
                                     int64_t max_tokens) {
    if (max_steps > 0) cfg.max_steps = max_steps;
    if (warmup > 0) cfg.warmup_steps = warmup;
    if (lr > 0) cfg.base_lr = lr;
    if (checkpoint_every > 0) cfg.checkpoint_every = checkpoint_every;
    if (patience > 0) cfg.patience = patience;
    if (max_tokens > 0) cfg.max_tokens_per_batch = max_tokens;
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"positional-embedding swap toolkit for encoder-decoder transformers"};
    app.require_subcommand(1);
    app.failure_message([](const CLI::App* a, const CLI::Error& e) {
        return std::string("error: usage: ") + e.what() + " (see " + a->get_name() + " --help)\n";
    });

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
    std::string pe_flag = "sine", out_dir = "train_out", preset = "scratch";
    uint64_t seed = 1;
    int64_t max_steps = 0, warmup = 0, checkpoint_every = 0, max_tokens = 0;
    double lr = 0;
    int patience = 0;
    int64_t enc_layers = 2, dec_layers = 2, d_model = 64, n_heads = 4, ffn_dim = 256;
    DataFlags train_data;
    train_cmd->add_option("--pe", pe_flag, "positional scheme: sine|rope|alibi|nope");
    train_cmd->add_option("--preset", preset, "training preset: scratch|finetune");
    train_cmd->add_option("--seed", seed, "random seed");
    train_cmd->add_option("--max-steps", max_steps, "step cap (0 = early stopping only)");
    train_cmd->add_option("--warmup", warmup, "override warmup steps");
    train_cmd->add_option("--lr", lr, "override base learning rate");
    train_cmd->add_option("--checkpoint-every", checkpoint_every, "eval/checkpoint cadence");
    train_cmd->add_option("--patience", patience, "early stopping patience");
    train_cmd->add_option("--max-tokens", max_tokens, "token budget per batch");
    train_cmd->add_option("--out", out_dir, "output directory");
    train_cmd->add_option("--enc-layers", enc_layers);
    train_cmd->add_option("--dec-layers", dec_layers);
    train_cmd->add_option("--d-model", d_model);
    train_cmd->add_option("--heads", n_heads);
    train_cmd->add_option("--ffn", ffn_dim);
    train_data.attach(train_cmd);
    train_cmd->callback([&]() {
        auto [train_pairs, dev_pairs, vocab] = train_data.load(seed);
        ModelConfig mc;
        mc.enc_layers = enc_layers;
        mc.dec_layers = dec_layers;
        mc.d_model = d_model;
        mc.n_heads = n_heads;
        mc.ffn_dim = ffn_dim;
        mc.src_vocab = vocab.size();
        mc.tgt_vocab = vocab.size();
        mc.pe_kind = parse_pe_kind(pe_flag);
        auto model = build_model<float>(mc, RngStream(seed, 1));
        if (preset != "scratch" && preset != "finetune")
            throw std::runtime_error("unknown preset '" + preset + "'");
        TrainConfig tc = preset == "finetune" ? finetune_preset(Strategy::fft) : scratch_preset();
        tc = apply_common_train_flags(tc, max_steps, warmup, lr, checkpoint_every, patience,
                                      max_tokens);
        TrainOptions opts;
        opts.out_dir = out_dir;
        opts.languages = vocab.languages();
        auto detok = [&vocab](const TokenSeq& ids) { return vocab.decode(ids); };
        model.cfg.dropout = tc.dropout;
        TrainResult r = train_loop(model, train_pairs, dev_pairs, tc, RngStream(seed, 2), opts,
                                   vocab.specials(), detok);
        std::printf("trained %lld steps; best dev BLEU %.4f at step %lld; best checkpoint %s\n",
                    static_cast<long long>(r.steps_run), r.best_score,
                    static_cast<long long>(r.best_step), r.best_path.c_str());
    });

    // ---- finetune ----
    auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a checkpoint (optionally with LoRA)");
    std::string ft_model, ft_strategy = "fft", ft_out = "finetune_out";
    uint64_t ft_seed = 1;
    int64_t ft_max_steps = 0, ft_warmup = 0, ft_ckpt_every = 0, ft_max_tokens = 0;
    double ft_lr = 0;
    int ft_patience = 0;
    int64_t lora_rank = 16;
    double lora_alpha = 32.0, lora_dropout = 0.05;
    bool lora_rank_scaled = true;
    DataFlags ft_data;
    ft_cmd->add_option("--model", ft_model, "input checkpoint")->required();
    ft_cmd->add_option("--strategy", ft_strategy, "fft|lora|minlora");
    ft_cmd->add_option("--seed", ft_seed, "random seed");
    ft_cmd->add_option("--max-steps", ft_max_steps, "step cap");
    ft_cmd->add_option("--warmup", ft_warmup, "override warmup steps");
    ft_cmd->add_option("--lr", ft_lr, "override base learning rate");
    ft_cmd->add_option("--checkpoint-every", ft_ckpt_every, "eval/checkpoint cadence");
    ft_cmd->add_option("--patience", ft_patience, "early stopping patience");
    ft_cmd->add_option("--max-tokens", ft_max_tokens, "token budget per batch");
    ft_cmd->add_option("--out", ft_out, "output directory");
    ft_cmd->add_option("--lora-rank", lora_rank);
    ft_cmd->add_option("--lora-alpha", lora_alpha);
    ft_cmd->add_option("--lora-dropout", lora_dropout);
    ft_cmd->add_flag("--lora-rank-scaled,!--no-lora-rank-scaled", lora_rank_scaled,
                     "scale adapters by alpha/sqrt(rank)");
    ft_data.attach(ft_cmd);
    ft_cmd->callback([&]() {
        const Strategy strat = parse_strategy(ft_strategy);
        auto model = load_checkpoint<float>(ft_model);
        LoRAConfig lc{lora_rank, lora_alpha, lora_dropout, lora_rank_scaled};
        inject(model, strat, lc, RngStream(ft_seed, 3));
        const TrainableReport rep = trainable_report(model);
        std::printf("strategy %s: %lld / %lld trainable (%.2f%%)\n", strategy_name(strat),
                    static_cast<long long>(rep.trainable), static_cast<long long>(rep.total),
                    100.0 * rep.fraction);
        auto [train_pairs, dev_pairs, vocab] = ft_data.load(ft_seed);
        TrainConfig tc = apply_common_train_flags(finetune_preset(strat), ft_max_steps, ft_warmup,
                                                  ft_lr, ft_ckpt_every, ft_patience,
                                                  ft_max_tokens);
        TrainOptions opts;
        opts.out_dir = ft_out;
        opts.languages = vocab.languages();
        auto detok = [&vocab](const TokenSeq& ids) { return vocab.decode(ids); };
        model.cfg.dropout = tc.dropout;
        TrainResult r = train_loop(model, train_pairs, dev_pairs, tc, RngStream(ft_seed, 4), opts,
                                   vocab.specials(), detok);
        std::printf("fine-tuned %lld steps; best dev BLEU %.4f at step %lld; best checkpoint %s\n",
                    static_cast<long long>(r.steps_run), r.best_score,
                    static_cast<long long>(r.best_step), r.best_path.c_str());
    });

    // ---- swap ----
    auto* swap_cmd = app.add_subcommand("swap", "replace the positional scheme of a checkpoint");
    std::string swap_pe, swap_in, swap_out;
    swap_cmd->add_option("--pe", swap_pe, "new scheme: sine|rope|alibi|nope")->required();
    swap_cmd->add_option("input", swap_in, "input checkpoint")->required();
    swap_cmd->add_option("output", swap_out, "output checkpoint")->required();
    swap_cmd->callback([&]() {
        const SwapReport r = swap_pe_checkpoint(swap_in, parse_pe_kind(swap_pe), swap_out);
        std::printf("swap: %s -> %s; tensors_changed=%lld; wrote %s\n", pe_kind_name(r.old_pe),
                    pe_kind_name(r.new_pe), static_cast<long long>(r.tensors_changed),
                    swap_out.c_str());
    });

    // ---- diff ----
    auto* diff_cmd = app.add_subcommand("diff", "compare two checkpoints");
    std::string diff_a, diff_b;
    diff_cmd->add_option("a", diff_a)->required();
    diff_cmd->add_option("b", diff_b)->required();
    diff_cmd->callback([&]() {
        const DiffReport r = diff_checkpoints(diff_a, diff_b);
        if (r.empty()) {
            std::printf("identical\n");
            return;
        }
        for (const auto& f : r.manifest_fields) std::printf("manifest\t%s\n", f.c_str());
        for (const auto& t : r.tensors_changed) std::printf("tensor-changed\t%s\n", t.c_str());
        for (const auto& t : r.only_in_a) std::printf("only-in-a\t%s\n", t.c_str());
        for (const auto& t : r.only_in_b) std::printf("only-in-b\t%s\n", t.c_str());
    });

    // ---- translate ----
    auto* tr_cmd = app.add_subcommand("translate", "decode a file of source lines");
    std::string tr_model, tr_input;
    int tr_beam = 5;
    bool tr_greedy = false;
    double tr_len_penalty = 1.0;
    tr_cmd->add_option("--model", tr_model, "model checkpoint")->required();
    tr_cmd->add_option("--input", tr_input, "source text, one segment per line")->required();
    tr_cmd->add_option("--beam", tr_beam, "beam size");
    tr_cmd->add_flag("--greedy", tr_greedy, "greedy decoding (equals --beam 1)");
    tr_cmd->add_option("--length-penalty", tr_len_penalty, "length penalty alpha");
    tr_cmd->callback([&]() {
        const Manifest man = read_manifest(tr_model);
        auto model = load_checkpoint<float>(tr_model);
        const Vocab vocab = vocab_for_manifest(man);
        const auto& langs = vocab.languages();
        BeamConfig bc;
        bc.beam = tr_greedy ? 1 : tr_beam;
        bc.length_penalty = tr_len_penalty;
        for (const std::string& line : read_lines(tr_input)) {
            const TokenSeq src = vocab.encode_source(line, langs.at(0), langs.at(1));
            TokenSeq out;
            if (tr_greedy) {
                ModelStepper<float> stepper(model, encode_source(model, src));
                out = greedy_decode<float>(stepper, vocab.bos_id(), vocab.eos_id(),
                                           static_cast<int64_t>(src.size()), bc);
            } else {
                out = translate_sequence(model, src, vocab.bos_id(), vocab.eos_id(), bc);
            }
            std::printf("%s\n", vocab.decode(out).c_str());
        }
    });

    // ---- score ----
    auto* score_cmd = app.add_subcommand("score", "score hypotheses against references");
    std::string metric = "chrfpp", hyp_path, ref_path;
    score_cmd->add_option("--metric", metric, "chrfpp|bleu");
    score_cmd->add_option("hypotheses", hyp_path)->required();
    score_cmd->add_option("references", ref_path)->required();
    score_cmd->callback([&]() {
        const std::vector<std::string> hyps = read_lines(hyp_path);
        const std::vector<std::string> refs = read_lines(ref_path);
        double value = 0;
        if (metric == "chrfpp")
            value = chrfpp(hyps, refs);
        else if (metric == "bleu")
            value = bleu(hyps, refs);
        else
            throw std::runtime_error("unknown metric '" + metric + "' (expected chrfpp|bleu)");
        std::printf("%s\t%.4f\n", metric.c_str(), value);
    });

    // ---- build-docs ----
    auto* docs_cmd = app.add_subcommand("build-docs", "merge sentence pairs into document units");
    std::string docs_mode = "flores", docs_in, docs_out;
    int64_t docs_window = 3;
    docs_cmd->add_option("--mode", docs_mode, "flores|conversations");
    docs_cmd->add_option("--window", docs_window, "sentences per unit (flores mode)");
    docs_cmd->add_option("input", docs_in)->required();
    docs_cmd->add_option("output", docs_out)->required();
    docs_cmd->callback([&]() {
        std::vector<RejectedPair> rejected;
        const std::vector<ParallelPair> pairs = read_pairs_tsv(docs_in, &rejected);
        std::vector<DocUnit> units;
        if (docs_mode == "flores") {
            FloresDocsResult r = build_flores_docs(pairs, {"url", "domain", "topic"}, docs_window);
            units = std::move(r.units);
            for (const auto& rej : r.rejected) rejected.push_back(rej);
        } else if (docs_mode == "conversations") {
            units = merge_conversations(pairs);
        } else {
            throw std::runtime_error("unknown mode '" + docs_mode +
                                     "' (expected flores|conversations)");
        }
        write_docs_tsv(docs_out, units);
        std::printf("wrote %zu units to %s (%zu pairs rejected)\n", units.size(),
                    docs_out.c_str(), rejected.size());
        for (const auto& rej : rejected)
            std::fprintf(stderr, "rejected row %lld: %s\n", static_cast<long long>(rej.index),
                         rej.reason.c_str());
    });

    // ---- select ----
    auto* sel_cmd = app.add_subcommand("select", "rank pairs by score and keep the top k");
    std::string sel_in, sel_out;
    int64_t sel_k = 150000;
    uint64_t sel_seed = 1;
    sel_cmd->add_option("--k", sel_k, "pairs to keep");
    sel_cmd->add_option("--seed", sel_seed, "seed for the unscored fallback draw");
    sel_cmd->add_option("input", sel_in)->required();
    sel_cmd->add_option("output", sel_out)->required();
    sel_cmd->callback([&]() {
        const std::vector<ParallelPair> pairs = read_pairs_tsv(sel_in);
        const std::vector<ParallelPair> kept = select_top_k(pairs, sel_k, RngStream(sel_seed, 5));
        write_pairs_tsv(sel_out, kept);
        std::printf("kept %zu of %zu pairs\n", kept.size(), pairs.size());
    });

    // ---- gradcheck ----
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the gradients");
    std::string gc_pe = "sine";
    int gc_samples = 50;
    double gc_h = 1e-4;
    uint64_t gc_seed = 1;
    gc_cmd->add_option("--pe", gc_pe, "positional scheme to check");
    gc_cmd->add_option("--samples", gc_samples, "sampled scalar weights");
    gc_cmd->add_option("--delta", gc_h, "central difference step");
    gc_cmd->add_option("--seed", gc_seed, "random seed");
    gc_cmd->callback([&]() {
        ModelConfig mc;
        mc.enc_layers = 1;
        mc.dec_layers = 1;
        mc.d_model = 16;
        mc.n_heads = 2;
        mc.ffn_dim = 32;
        mc.src_vocab = 24;
        mc.tgt_vocab = 24;
        mc.pe_kind = parse_pe_kind(gc_pe);
        auto model = build_model<double>(mc, RngStream(gc_seed, 1));
        const Vocab vocab = Vocab::toy(24, {"xx", "yy"});
        auto pairs = encode_pairs(
            vocab, gen_toy_task(ToyKind::mapped_translate, 24, {4, 7}, 3, RngStream(gc_seed, 2)),
            "xx", "yy");
        std::vector<TokenSeq> srcs, tgts;
        for (auto& [s, t] : pairs) {
            srcs.push_back(s);
            tgts.push_back(t);
        }
        const TokenBatch batch = make_batch(srcs, tgts, vocab.pad_id(), vocab.bos_id());
        RngStream noise(gc_seed, 6);
        auto loss_fn = [&]() {
            Tape<double> tape;
            auto logits = forward_teacher_forced(tape, model, batch, false, noise);
            auto loss = smoothed_ce(tape, logits, batch.tgt_out, batch.tgt_mask, 0.1);
            const double v = tape.value(loss)[0];
            tape.backward(loss);
            return v;
        };
        auto params = model.params.all();
        RngStream pick(gc_seed, 7);
        const FiniteDiffReport rep = finite_diff_check<double>(
            loss_fn, std::span<Parameter<double>* const>(params.data(), params.size()), gc_h,
            gc_samples, pick);
        for (const auto& w : rep.warnings) std::fprintf(stderr, "%s\n", w.c_str());
        std::printf("pe=%s samples=%d max_rel_error=%.3e\n", gc_pe.c_str(), rep.samples_checked,
                    rep.max_rel_error);
        if (rep.max_rel_error >= 1e-3) throw std::runtime_error("gradcheck failed");
    });

    // ---- experiment ----
    auto* ex_cmd = app.add_subcommand("experiment", "run the full swap/fine-tune arm matrix");
    ExperimentConfig ex;
    std::string ex_task = "mapped-translate";
    ex_cmd->add_option("--task", ex_task, "copy|reverse|mapped-translate");
    ex_cmd->add_option("--seeds", ex.seeds, "number of seeds");
    ex_cmd->add_option("--seed", ex.base_seed, "base seed");
    ex_cmd->add_option("--vocab", ex.vocab);
    ex_cmd->add_option("--d-model", ex.d_model);
    ex_cmd->add_option("--heads", ex.n_heads);
    ex_cmd->add_option("--ffn", ex.ffn_dim);
    ex_cmd->add_option("--enc-layers", ex.enc_layers);
    ex_cmd->add_option("--dec-layers", ex.dec_layers);
    ex_cmd->add_option("--n-train", ex.n_train);
    ex_cmd->add_option("--n-dev", ex.n_dev);
    ex_cmd->add_option("--n-test", ex.n_test);
    ex_cmd->add_option("--min-len", ex.train_len.first);
    ex_cmd->add_option("--max-len", ex.train_len.second);
    ex_cmd->add_option("--long-min-len", ex.long_len.first);
    ex_cmd->add_option("--long-max-len", ex.long_len.second);
    ex_cmd->add_option("--max-steps", ex.tune_steps, "step budget per fine-tuning arm");
    ex_cmd->add_option("--scratch-steps", ex.scratch_steps, "step budget per from-scratch arm");
    ex_cmd->add_option("--warmup-scratch", ex.warmup_scratch);
    ex_cmd->add_option("--warmup-tune", ex.warmup_tune);
    ex_cmd->add_option("--lr-scratch", ex.scratch_lr);
    ex_cmd->add_option("--lr-fft", ex.tune_lr_fft);
    ex_cmd->add_option("--lr-lora", ex.tune_lr_lora);
    ex_cmd->add_option("--max-tokens", ex.max_tokens);
    ex_cmd->add_option("--checkpoint-every", ex.checkpoint_every);
    ex_cmd->add_option("--patience", ex.patience);
    ex_cmd->add_option("--beam", ex.eval_beam);
    ex_cmd->add_option("--out", ex.out_dir, "output directory for arm checkpoints/logs");
    ex_cmd->add_option("--report", ex.report_path, "report TSV path");
    ex_cmd->add_option("--threads", ex.threads, "worker cap (also PESWAP_THREADS)");
    ex_cmd->callback([&]() {
        ex.task = parse_toy_kind(ex_task);
        const ExperimentReport rep = run_experiment(ex);
        std::fputs(rep.table_text.c_str(), stdout);
        std::printf("report written to %s\n",
                    ex.report_path.empty() ? (ex.out_dir + "/report.tsv").c_str()
                                           : ex.report_path.c_str());
        bool all = true;
        for (const auto& o : rep.orderings) all = all && o.pass;
        if (!all) throw std::runtime_error("one or more qualitative orderings failed");
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const peswap::checkpoint_error& e) {
        std::fprintf(stderr, "error: checkpoint: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        return 2;
    } catch (const std::out_of_range& e) {
        std::fprintf(stderr, "error: range: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
