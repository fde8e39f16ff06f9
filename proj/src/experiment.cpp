#include "peswap/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "peswap/adapters.hpp"
#include "peswap/checkpoint.hpp"
#include "peswap/metrics.hpp"
#include "peswap/train.hpp"

namespace peswap {

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

constexpr const char* kSrcLang = "xx";
constexpr const char* kTgtLang = "yy";

struct SeedData {
    Vocab vocab{Vocab::toy(16, {kSrcLang, kTgtLang})};
    std::vector<IdPair> train, dev, test_in, test_long;
};

SeedData make_seed_data(const ExperimentConfig& cfg, int seed_idx) {
    SeedData d;
    d.vocab = Vocab::toy(cfg.vocab, {kSrcLang, kTgtLang});
    const uint64_t seed = cfg.base_seed + static_cast<uint64_t>(seed_idx);
    auto enc = [&](std::vector<ParallelPair> pairs) {
        return encode_pairs(d.vocab, pairs, kSrcLang, kTgtLang);
    };
    d.train = enc(gen_toy_task(cfg.task, cfg.vocab, cfg.train_len, cfg.n_train,
                               RngStream(seed, fnv1a("data.train"))));
    d.dev = enc(gen_toy_task(cfg.task, cfg.vocab, cfg.train_len, cfg.n_dev,
                             RngStream(seed, fnv1a("data.dev"))));
    d.test_in = enc(gen_toy_task(cfg.task, cfg.vocab, cfg.train_len, cfg.n_test,
                                 RngStream(seed, fnv1a("data.test_in"))));
    d.test_long = enc(gen_toy_task(cfg.task, cfg.vocab, cfg.long_len, cfg.n_test,
                                   RngStream(seed, fnv1a("data.test_long"))));
    return d;
}

ModelConfig base_model_config(const ExperimentConfig& cfg, PEKind pe) {
    ModelConfig mc;
    mc.enc_layers = cfg.enc_layers;
    mc.dec_layers = cfg.dec_layers;
    mc.d_model = cfg.d_model;
    mc.n_heads = cfg.n_heads;
    mc.ffn_dim = cfg.ffn_dim;
    mc.src_vocab = cfg.vocab;
    mc.tgt_vocab = cfg.vocab;
    mc.pe_kind = pe;
    return mc;
}

TrainConfig scratch_config(const ExperimentConfig& cfg) {
    TrainConfig tc = scratch_preset();
    tc.base_lr = cfg.scratch_lr;
    tc.warmup_steps = cfg.warmup_scratch;
    tc.max_steps = cfg.scratch_steps;
    tc.max_tokens_per_batch = cfg.max_tokens;
    tc.checkpoint_every = cfg.checkpoint_every;
    tc.patience = cfg.patience;
    tc.eval_beam = cfg.eval_beam;
    return tc;
}

TrainConfig tune_config(const ExperimentConfig& cfg, Strategy s) {
    TrainConfig tc = finetune_preset(s);
    tc.base_lr = s == Strategy::fft ? cfg.tune_lr_fft : cfg.tune_lr_lora;
    tc.warmup_steps = cfg.warmup_tune;
    tc.max_steps = cfg.tune_steps;
    tc.max_tokens_per_batch = cfg.max_tokens;
    tc.checkpoint_every = cfg.checkpoint_every;
    tc.patience = cfg.patience;
    tc.eval_beam = cfg.eval_beam;
    return tc;
}

ArmScores eval_model(const TransformerModel<float>& model, const SeedData& data,
                     const std::vector<IdPair>& set, int beam) {
    BeamConfig bc;
    bc.beam = beam;
    std::vector<TokenSeq> hyps, refs;
    std::vector<std::string> hyp_text, ref_text;
    for (const auto& [src, tgt] : set) {
        TokenSeq out = translate_sequence(model, src, data.vocab.bos_id(), data.vocab.eos_id(), bc);
        hyps.push_back(out);
        refs.push_back(tgt);
        hyp_text.push_back(data.vocab.decode(out));
        ref_text.push_back(data.vocab.decode(tgt));
    }
    ArmScores s;
    s.exact = exact_accuracy(hyps, refs);
    s.token = token_accuracy(hyps, refs);
    s.chrf = chrfpp(hyp_text, ref_text);
    return s;
}

struct ArmTask {
    std::string arm;
    int seed_idx = 0;
    int phase = 0; // 0: independent, 1: needs the base checkpoint
    std::function<ArmResult()> run;
};

std::string seed_dir(const ExperimentConfig& cfg, int seed_idx, const std::string& arm) {
    return cfg.out_dir + "/seed" + std::to_string(seed_idx) + "/" + arm;
}

std::string rel_seed_dir(int seed_idx, const std::string& arm) {
    return "seed" + std::to_string(seed_idx) + "/" + arm;
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

} // namespace

double exact_accuracy(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
    if (hyps.size() != refs.size() || hyps.empty())
        throw std::invalid_argument("exact_accuracy: size mismatch");
    int64_t hit = 0;
    for (size_t i = 0; i < hyps.size(); ++i)
        if (hyps[i] == refs[i]) ++hit;
    return 100.0 * double(hit) / double(hyps.size());
}

double token_accuracy(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
    if (hyps.size() != refs.size() || hyps.empty())
        throw std::invalid_argument("token_accuracy: size mismatch");
    int64_t match = 0, total = 0;
    for (size_t i = 0; i < hyps.size(); ++i) {
        const size_t n = std::min(hyps[i].size(), refs[i].size());
        for (size_t j = 0; j < n; ++j)
            if (hyps[i][j] == refs[i][j]) ++match;
        total += static_cast<int64_t>(refs[i].size());
    }
    return total == 0 ? 0.0 : 100.0 * double(match) / double(total);
}

ArmScores mean_scores(const std::vector<ArmResult>& rows, const std::string& arm, bool long_len) {
    std::vector<double> e, t, c;
    for (const ArmResult& r : rows) {
        if (r.arm != arm) continue;
        const ArmScores& s = long_len ? r.long_len : r.in_len;
        if (r.failed) {
            e.push_back(std::nan(""));
        } else {
            e.push_back(s.exact);
            t.push_back(s.token);
            c.push_back(s.chrf);
        }
    }
    ArmScores out;
    out.exact = mean_of(e);
    out.token = mean_of(t);
    out.chrf = mean_of(c);
    return out;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    if (cfg.seeds < 1) throw std::invalid_argument("experiment: seeds must be >= 1");
    std::filesystem::create_directories(cfg.out_dir);

    const std::vector<PEKind> relative = {PEKind::nope, PEKind::rope, PEKind::alibi};
    const std::vector<Strategy> strategies = {Strategy::fft, Strategy::lora, Strategy::minlora};

    std::vector<std::string> arm_order = {"base-sine", "untrained"};
    for (PEKind pe : relative) arm_order.push_back(std::string("swap-") + pe_kind_name(pe));
    for (Strategy s : strategies)
        for (PEKind pe : all_pe_kinds())
            arm_order.push_back(std::string("tune-") + strategy_name(s) + "-" + pe_kind_name(pe));
    for (PEKind pe : relative) arm_order.push_back(std::string("scratch-") + pe_kind_name(pe));

    // Per-seed data generated up front so every arm within a seed sees the
    // same corpus.
    std::vector<SeedData> data;
    for (int s = 0; s < cfg.seeds; ++s) data.push_back(make_seed_data(cfg, s));

    std::vector<std::string> base_ckpts(static_cast<size_t>(cfg.seeds));
    for (int s = 0; s < cfg.seeds; ++s)
        base_ckpts[static_cast<size_t>(s)] = seed_dir(cfg, s, "base-sine") + "/best.ckpt";

    auto arm_rng = [&](const std::string& arm, int seed_idx) {
        return RngStream(cfg.base_seed + static_cast<uint64_t>(seed_idx), fnv1a(arm));
    };

    auto train_arm = [&](const std::string& arm, int seed_idx, TransformerModel<float>& model,
                         const TrainConfig& tc) {
        const SeedData& d = data[static_cast<size_t>(seed_idx)];
        TrainOptions opts;
        opts.out_dir = seed_dir(cfg, seed_idx, arm);
        opts.languages = {kSrcLang, kTgtLang};
        auto detok = [&d](const TokenSeq& ids) { return d.vocab.decode(ids); };
        model.cfg.dropout = tc.dropout;
        train_loop(model, d.train, d.dev, tc, arm_rng(arm, seed_idx).fork(7), opts, d.vocab.specials(),
                   detok);
    };

    auto finish_arm = [&](ArmResult& r, const TransformerModel<float>& model, int seed_idx,
                          const std::string& ckpt_rel, const std::string& log_rel) {
        const SeedData& d = data[static_cast<size_t>(seed_idx)];
        r.in_len = eval_model(model, d, d.test_in, cfg.eval_beam);
        r.long_len = eval_model(model, d, d.test_long, cfg.eval_beam);
        r.ckpt_rel = ckpt_rel;
        r.log_rel = log_rel;
    };

    std::vector<ArmTask> tasks;
    for (int s = 0; s < cfg.seeds; ++s) {
        tasks.push_back(ArmTask{"base-sine", s, 0, [&, s]() {
            ArmResult r{"base-sine", s, {}, {}, "", "", false, ""};
            auto model = build_model<float>(base_model_config(cfg, PEKind::sine),
                                            arm_rng("base-sine", s));
            train_arm("base-sine", s, model, scratch_config(cfg));
            finish_arm(r, model, s, rel_seed_dir(s, "base-sine") + "/best.ckpt",
                       rel_seed_dir(s, "base-sine") + "/train.log");
            return r;
        }});
        tasks.push_back(ArmTask{"untrained", s, 0, [&, s]() {
            ArmResult r{"untrained", s, {}, {}, "", "", false, ""};
            auto model = build_model<float>(base_model_config(cfg, PEKind::sine),
                                            arm_rng("untrained", s));
            const std::string dir = seed_dir(cfg, s, "untrained");
            std::filesystem::create_directories(dir);
            save_checkpoint(model, dir + "/model.ckpt", {kSrcLang, kTgtLang});
            finish_arm(r, model, s, rel_seed_dir(s, "untrained") + "/model.ckpt", "");
            return r;
        }});
        for (PEKind pe : relative) {
            const std::string arm = std::string("scratch-") + pe_kind_name(pe);
            tasks.push_back(ArmTask{arm, s, 0, [&, s, pe, arm]() {
                ArmResult r{arm, s, {}, {}, "", "", false, ""};
                auto model = build_model<float>(base_model_config(cfg, pe), arm_rng(arm, s));
                train_arm(arm, s, model, scratch_config(cfg));
                finish_arm(r, model, s, rel_seed_dir(s, arm) + "/best.ckpt",
                           rel_seed_dir(s, arm) + "/train.log");
                return r;
            }});
        }
        for (PEKind pe : relative) {
            const std::string arm = std::string("swap-") + pe_kind_name(pe);
            tasks.push_back(ArmTask{arm, s, 1, [&, s, pe, arm]() {
                ArmResult r{arm, s, {}, {}, "", "", false, ""};
                const std::string dir = seed_dir(cfg, s, arm);
                std::filesystem::create_directories(dir);
                const std::string out = dir + "/model.ckpt";
                swap_pe_checkpoint(base_ckpts[static_cast<size_t>(s)], pe, out);
                auto model = load_checkpoint<float>(out);
                finish_arm(r, model, s, rel_seed_dir(s, arm) + "/model.ckpt", "");
                return r;
            }});
        }
        for (Strategy strat : strategies)
            for (PEKind pe : all_pe_kinds()) {
                const std::string arm =
                    std::string("tune-") + strategy_name(strat) + "-" + pe_kind_name(pe);
                tasks.push_back(ArmTask{arm, s, 1, [&, s, strat, pe, arm]() {
                    ArmResult r{arm, s, {}, {}, "", "", false, ""};
                    const std::string dir = seed_dir(cfg, s, arm);
                    std::filesystem::create_directories(dir);
                    const std::string swapped = dir + "/swapped.ckpt";
                    swap_pe_checkpoint(base_ckpts[static_cast<size_t>(s)], pe, swapped);
                    auto model = load_checkpoint<float>(swapped);
                    inject(model, strat, cfg.lora, arm_rng(arm, s).fork(3));
                    train_arm(arm, s, model, tune_config(cfg, strat));
                    finish_arm(r, model, s, rel_seed_dir(s, arm) + "/best.ckpt",
                               rel_seed_dir(s, arm) + "/train.log");
                    return r;
                }});
            }
    }

    // Run phase 0 tasks, then phase 1; each task is single-threaded and fully
    // seeded, so results do not depend on the worker count.
    int threads = cfg.threads;
    if (threads <= 0) {
        if (const char* env = std::getenv("PESWAP_THREADS")) threads = std::atoi(env);
        if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
        if (threads <= 0) threads = 1;
    }
    std::map<std::pair<std::string, int>, ArmResult> results;
    for (int phase = 0; phase <= 1; ++phase) {
        std::vector<ArmTask*> phase_tasks;
        for (ArmTask& t : tasks)
            if (t.phase == phase) phase_tasks.push_back(&t);
        std::vector<ArmResult> phase_results(phase_tasks.size());
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            while (true) {
                const size_t i = next.fetch_add(1);
                if (i >= phase_tasks.size()) break;
                ArmTask& t = *phase_tasks[i];
                try {
                    phase_results[i] = t.run();
                } catch (const std::exception& e) {
                    ArmResult r{t.arm, t.seed_idx, {}, {}, "", "", true, e.what()};
                    phase_results[i] = r;
                }
            }
        };
        const int n_workers =
            std::max(1, std::min<int>(threads, static_cast<int>(phase_tasks.size())));
        std::vector<std::thread> pool;
        for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
        worker();
        for (auto& th : pool) th.join();
        for (size_t i = 0; i < phase_tasks.size(); ++i)
            results[{phase_tasks[i]->arm, phase_tasks[i]->seed_idx}] = phase_results[i];
    }

    ExperimentReport report;
    report.arm_order = arm_order;
    for (const std::string& arm : arm_order)
        for (int s = 0; s < cfg.seeds; ++s) report.rows.push_back(results.at({arm, s}));

    // ---- qualitative orderings on seed means ----
    auto mean_in = [&](const std::string& arm) { return mean_scores(report.rows, arm, false); };
    auto mean_long = [&](const std::string& arm) { return mean_scores(report.rows, arm, true); };
    auto any_failed = [&](std::initializer_list<std::string> arms) {
        for (const auto& a : arms)
            for (const ArmResult& r : report.rows)
                if (r.arm == a && r.failed) return true;
        return false;
    };
    auto add_ordering = [&](const std::string& name, bool pass, const std::string& detail) {
        report.orderings.push_back(OrderingResult{name, pass, detail});
    };

    {
        const double v = mean_in("base-sine").exact;
        add_ordering("a-base-floor", !any_failed({"base-sine"}) && v >= cfg.base_floor,
                     "base-sine exact=" + fmt(v) + " floor=" + fmt(cfg.base_floor));
    }
    {
        bool pass = true;
        std::string detail;
        const double base = mean_in("base-sine").exact;
        const double untrained_tok = mean_in("untrained").token;
        for (PEKind pe : relative) {
            const std::string arm = std::string("swap-") + pe_kind_name(pe);
            const ArmScores s = mean_in(arm);
            const bool drop_ok = base - s.exact >= cfg.swap_drop;
            const bool above = s.token > untrained_tok;
            pass = pass && drop_ok && above && !any_failed({arm});
            detail += arm + " exact=" + fmt(s.exact) + " token=" + fmt(s.token) + "; ";
        }
        detail += "base exact=" + fmt(base) + " untrained token=" + fmt(untrained_tok);
        add_ordering("b-swap-drops-not-collapse", pass, detail);
    }
    {
        bool pass = true;
        std::string detail;
        for (Strategy st : strategies) {
            const std::string sine_arm = std::string("tune-") + strategy_name(st) + "-sine";
            const double sine_v = mean_in(sine_arm).exact;
            for (PEKind pe : {PEKind::rope, PEKind::alibi}) {
                const std::string arm =
                    std::string("tune-") + strategy_name(st) + "-" + pe_kind_name(pe);
                const double v = mean_in(arm).exact;
                pass = pass && v >= sine_v - cfg.recover_margin && !any_failed({arm, sine_arm});
                detail += arm + "=" + fmt(v) + " vs " + sine_arm + "=" + fmt(sine_v) + "; ";
            }
        }
        add_ordering("c-finetune-recovers", pass, detail);
    }
    {
        bool pass = true;
        std::string detail;
        for (PEKind pe : {PEKind::sine, PEKind::rope, PEKind::alibi}) {
            const std::string ml = std::string("tune-minlora-") + pe_kind_name(pe);
            const std::string ff = std::string("tune-fft-") + pe_kind_name(pe);
            const double mv = mean_in(ml).exact, fv = mean_in(ff).exact;
            pass = pass && mv >= fv - cfg.recover_margin && !any_failed({ml, ff});
            detail += std::string(pe_kind_name(pe)) + ": minlora=" + fmt(mv) + " fft=" + fmt(fv) +
                      "; ";
        }
        add_ordering("d-minlora-sufficient", pass, detail);
    }
    {
        bool pass = true;
        std::string detail;
        for (Strategy st : strategies) {
            const std::string rope_arm = std::string("tune-") + strategy_name(st) + "-rope";
            const std::string nope_arm = std::string("tune-") + strategy_name(st) + "-nope";
            const double rv = mean_in(rope_arm).exact, nv = mean_in(nope_arm).exact;
            pass = pass && rv - nv >= cfg.nope_gap && !any_failed({rope_arm, nope_arm});
            detail += std::string(strategy_name(st)) + ": rope=" + fmt(rv) + " nope=" + fmt(nv) +
                      "; ";
        }
        const double srv = mean_in("scratch-rope").exact, snv = mean_in("scratch-nope").exact;
        pass = pass && srv - snv >= cfg.nope_gap && !any_failed({"scratch-rope", "scratch-nope"});
        detail += "scratch: rope=" + fmt(srv) + " nope=" + fmt(snv);
        add_ordering("e-nope-trails-rope", pass, detail);
    }
    {
        const double av = mean_long("tune-fft-alibi").token;
        const double sv = mean_long("tune-fft-sine").token;
        add_ordering("f-alibi-extrapolates", av >= sv &&
                         !any_failed({"tune-fft-alibi", "tune-fft-sine"}),
                     "2x-length token acc: alibi=" + fmt(av) + " sine=" + fmt(sv));
    }

    // ---- report text ----
    std::ostringstream tsv;
    tsv << "# peswap experiment report\n";
    tsv << "# task=" << toy_kind_name(cfg.task) << " seeds=" << cfg.seeds << " seed="
        << cfg.base_seed << " model=" << cfg.enc_layers << "+" << cfg.dec_layers << "x"
        << cfg.d_model << "h" << cfg.n_heads << "f" << cfg.ffn_dim << " vocab=" << cfg.vocab
        << " train_len=" << cfg.train_len.first << "-" << cfg.train_len.second << " long_len="
        << cfg.long_len.first << "-" << cfg.long_len.second << " n_train=" << cfg.n_train
        << " scratch_steps=" << cfg.scratch_steps << " tune_steps=" << cfg.tune_steps << "\n";
    tsv << "arm\teval\texact_mean\texact_sd\ttoken_mean\ttoken_sd\tchrfpp_mean\tchrfpp_sd\t"
           "checkpoints\tlogs\n";
    for (const std::string& arm : arm_order) {
        for (int pass_long = 0; pass_long <= 1; ++pass_long) {
            std::vector<double> e, t, c;
            std::vector<std::string> ckpts, logs;
            bool failed = false;
            for (const ArmResult& r : report.rows) {
                if (r.arm != arm) continue;
                failed = failed || r.failed;
                const ArmScores& s = pass_long ? r.long_len : r.in_len;
                e.push_back(s.exact);
                t.push_back(s.token);
                c.push_back(s.chrf);
                if (!pass_long) {
                    ckpts.push_back(r.ckpt_rel);
                    logs.push_back(r.log_rel.empty() ? "-" : r.log_rel);
                }
            }
            tsv << arm << '\t' << (pass_long ? "2x" : "in");
            if (failed) {
                tsv << "\tfailed\tfailed\tfailed\tfailed\tfailed\tfailed";
            } else {
                tsv << '\t' << fmt(mean_of(e)) << '\t' << fmt(sd_of(e)) << '\t' << fmt(mean_of(t))
                    << '\t' << fmt(sd_of(t)) << '\t' << fmt(mean_of(c)) << '\t' << fmt(sd_of(c));
            }
            if (!pass_long) {
                tsv << '\t';
                for (size_t i = 0; i < ckpts.size(); ++i) tsv << (i ? ";" : "") << ckpts[i];
                tsv << '\t';
                for (size_t i = 0; i < logs.size(); ++i) tsv << (i ? ";" : "") << logs[i];
            } else {
                tsv << "\t-\t-";
            }
            tsv << '\n';
        }
    }
    for (const OrderingResult& o : report.orderings)
        tsv << "ordering\t" << o.name << '\t' << (o.pass ? "PASS" : "FAIL") << '\t' << o.detail
            << '\n';
    report.tsv_text = tsv.str();

    std::ostringstream table;
    table << "arm                  |   in: exact  token  chrf++ |   2x: exact  token  chrf++\n";
    table << "---------------------+-----------------------------+---------------------------\n";
    for (const std::string& arm : arm_order) {
        const ArmScores i = mean_scores(report.rows, arm, false);
        const ArmScores l = mean_scores(report.rows, arm, true);
        char line[160];
        std::snprintf(line, sizeof(line),
                      "%-21s|%12.2f %6.2f %7.2f |%12.2f %6.2f %7.2f\n", arm.c_str(), i.exact,
                      i.token, i.chrf, l.exact, l.token, l.chrf);
        table << line;
    }
    for (const OrderingResult& o : report.orderings)
        table << (o.pass ? "PASS " : "FAIL ") << o.name << "\n";
    report.table_text = table.str();

    const std::string report_path =
        cfg.report_path.empty() ? cfg.out_dir + "/report.tsv" : cfg.report_path;
    std::ofstream out(report_path);
    if (!out) throw std::runtime_error("cannot write report to " + report_path);
    out << report.tsv_text;
    return report;
}

} // namespace peswap
