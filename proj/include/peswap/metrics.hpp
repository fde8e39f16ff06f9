#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace peswap {

// Character 6-gram + word 2-gram F-score with recall-weighted beta = 2.
struct ChrFConfig {
    int char_order = 6;
    int word_order = 2;
    double beta = 2.0;
};

/// Corpus-level ChrF++ in [0, 100]. Char n-grams run over whitespace-stripped
/// codepoints; word n-grams over whitespace tokens with punctuation separated.
/// Statistics are pooled over all segments before the per-order F-scores;
/// orders with no n-grams on either side are excluded from the mean.
double chrfpp(const std::vector<std::string>& hypotheses,
              const std::vector<std::string>& references, const ChrFConfig& cfg = {});

/// Corpus BLEU-4 in [0, 100]: clipped n-gram precisions, strict geometric
/// mean (no smoothing), brevity penalty exp(1 - r/h) when the hypothesis side
/// is shorter.
double bleu(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references);

// Shared text helpers (exposed for tests).
std::vector<uint32_t> decode_utf8(const std::string& text);
bool is_punct_codepoint(uint32_t cp);
std::vector<std::string> tokenize_words(const std::string& text);

} // namespace peswap
