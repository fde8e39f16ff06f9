#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "peswap/corpus.hpp"

namespace peswap {

/// One-shot harness reproducing the qualitative swap/fine-tune result matrix
/// on a synthetic task: a sine baseline, direct swaps, swap+fine-tune arms for
/// every strategy x scheme, and from-scratch arms for the relative schemes.
struct ExperimentConfig {
    ToyKind task = ToyKind::mapped_translate;
    int seeds = 3;
    uint64_t base_seed = 1;

    // toy model
    int64_t enc_layers = 2, dec_layers = 2;
    int64_t d_model = 64, n_heads = 4, ffn_dim = 256;
    int64_t vocab = 200;

    // data
    std::pair<int64_t, int64_t> train_len = {5, 20};
    std::pair<int64_t, int64_t> long_len = {21, 40}; // ~2x eval lengths
    int64_t n_train = 20000;
    int64_t n_dev = 128;
    int64_t n_test = 256;

    // budgets; presets supply optimizer shape, these rescale it to desk size
    int64_t scratch_steps = 3000;
    int64_t tune_steps = 3000;
    int64_t warmup_scratch = 400;
    int64_t warmup_tune = 100;
    double scratch_lr = 7e-4;
    double tune_lr_fft = 3e-4;
    double tune_lr_lora = 1e-3;
    int64_t max_tokens = 4096;
    int64_t checkpoint_every = 150;
    int patience = 10;
    int eval_beam = 5;
    LoRAConfig lora;

    // qualitative thresholds (percent points)
    double base_floor = 95.0;
    double swap_drop = 20.0;
    double recover_margin = 2.0;
    double nope_gap = 5.0;

    std::string out_dir = "experiment_out";
    std::string report_path; // empty: out_dir + "/report.tsv"
    int threads = 0;         // 0: PESWAP_THREADS env or hardware count
};

struct ArmScores {
    double exact = 0; // exact-sequence accuracy, percent
    double token = 0; // positional token accuracy, percent
    double chrf = 0;
};

struct ArmResult {
    std::string arm;
    int seed_index = 0;
    ArmScores in_len;
    ArmScores long_len;
    std::string ckpt_rel;
    std::string log_rel;
    bool failed = false;
    std::string fail_reason;
};

struct OrderingResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct ExperimentReport {
    std::vector<std::string> arm_order;
    std::vector<ArmResult> rows; // arm-major, seed-minor
    std::vector<OrderingResult> orderings;
    std::string tsv_text;   // written to report_path
    std::string table_text; // aligned summary table
};

ExperimentReport run_experiment(const ExperimentConfig& cfg);

/// Mean scores per arm over seeds (NaN-propagating when an arm failed).
ArmScores mean_scores(const std::vector<ArmResult>& rows, const std::string& arm, bool long_len);

// Sequence metrics used by the harness (exposed for tests).
double exact_accuracy(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);
double token_accuracy(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);

} // namespace peswap
