#include "peswap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <unordered_map>

namespace peswap {

std::vector<uint32_t> decode_utf8(const std::string& text) {
    std::vector<uint32_t> cps;
    cps.reserve(text.size());
    size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        uint32_t cp = 0xFFFD;
        size_t len = 1;
        if (c < 0x80) {
            cp = c;
        } else if ((c >> 5) == 0x6 && i + 1 < text.size()) {
            cp = (uint32_t(c & 0x1F) << 6) | (text[i + 1] & 0x3F);
            len = 2;
        } else if ((c >> 4) == 0xE && i + 2 < text.size()) {
            cp = (uint32_t(c & 0x0F) << 12) | (uint32_t(text[i + 1] & 0x3F) << 6) |
                 (text[i + 2] & 0x3F);
            len = 3;
        } else if ((c >> 3) == 0x1E && i + 3 < text.size()) {
            cp = (uint32_t(c & 0x07) << 18) | (uint32_t(text[i + 1] & 0x3F) << 12) |
                 (uint32_t(text[i + 2] & 0x3F) << 6) | (text[i + 3] & 0x3F);
            len = 4;
        }
        cps.push_back(cp);
        i += len;
    }
    return cps;
}

bool is_punct_codepoint(uint32_t cp) {
    if (cp < 0x80)
        return (cp >= '!' && cp <= '/') || (cp >= ':' && cp <= '@') || (cp >= '[' && cp <= '`') ||
               (cp >= '{' && cp <= '~');
    if (cp >= 0xA1 && cp <= 0xBF) return true;      // Latin-1 punctuation block
    if (cp >= 0x2010 && cp <= 0x2027) return true;  // dashes, quotes, daggers
    if (cp >= 0x2030 && cp <= 0x205E) return true;  // per-mille .. general punctuation
    if (cp >= 0x3001 && cp <= 0x3011) return true;  // CJK punctuation
    return false;
}

namespace {

bool is_space_cp(uint32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v';
}

std::string encode_utf8(uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

} // namespace

std::vector<std::string> tokenize_words(const std::string& text) {
    const std::vector<uint32_t> cps = decode_utf8(text);
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < cps.size()) {
        while (i < cps.size() && is_space_cp(cps[i])) ++i;
        size_t j = i;
        while (j < cps.size() && !is_space_cp(cps[j])) ++j;
        if (j == i) break;
        // peel leading/trailing punctuation into standalone tokens
        size_t lo = i, hi = j;
        std::vector<std::string> lead;
        while (lo < hi && is_punct_codepoint(cps[lo])) lead.push_back(encode_utf8(cps[lo++]));
        std::vector<std::string> trail;
        while (hi > lo && is_punct_codepoint(cps[hi - 1])) trail.push_back(encode_utf8(cps[--hi]));
        for (auto& t : lead) tokens.push_back(std::move(t));
        if (hi > lo) {
            std::string word;
            for (size_t k = lo; k < hi; ++k) word += encode_utf8(cps[k]);
            tokens.push_back(std::move(word));
        }
        for (auto it = trail.rbegin(); it != trail.rend(); ++it) tokens.push_back(std::move(*it));
        i = j;
    }
    return tokens;
}

namespace {

struct OrderStats {
    int64_t matched = 0;
    int64_t hyp_total = 0;
    int64_t ref_total = 0;
};

using GramCounts = std::unordered_map<std::u32string, int64_t>;

// Items are pre-hashed to char32_t symbols so char and word n-grams share one
// counting path.
GramCounts count_symbol_ngrams(const std::vector<char32_t>& syms, int n) {
    GramCounts out;
    if (static_cast<int>(syms.size()) < n) return out;
    for (size_t i = 0; i + static_cast<size_t>(n) <= syms.size(); ++i)
        out[std::u32string(syms.begin() + static_cast<std::ptrdiff_t>(i),
                           syms.begin() + static_cast<std::ptrdiff_t>(i) + n)] += 1;
    return out;
}

void accumulate(OrderStats& st, const std::vector<char32_t>& hyp, const std::vector<char32_t>& ref,
                int n) {
    const GramCounts hc = count_symbol_ngrams(hyp, n);
    const GramCounts rc = count_symbol_ngrams(ref, n);
    for (const auto& [gram, count] : hc) {
        st.hyp_total += count;
        auto it = rc.find(gram);
        if (it != rc.end()) st.matched += std::min(count, it->second);
    }
    for (const auto& [gram, count] : rc) st.ref_total += count;
}

std::vector<char32_t> char_symbols(const std::string& text) {
    std::vector<char32_t> out;
    for (uint32_t cp : decode_utf8(text))
        if (!is_space_cp(cp)) out.push_back(static_cast<char32_t>(cp));
    return out;
}

std::vector<char32_t> word_symbols(const std::string& text) {
    // Distinct words map to symbols so char and word n-grams share the same
    // counting path; the mapping is consistent process-wide.
    std::vector<char32_t> out;
    static thread_local std::unordered_map<std::string, char32_t> table;
    for (const std::string& w : tokenize_words(text)) {
        auto it = table.find(w);
        if (it == table.end())
            it = table.emplace(w, static_cast<char32_t>(table.size() + 1)).first;
        out.push_back(it->second);
    }
    return out;
}

} // namespace

double chrfpp(const std::vector<std::string>& hypotheses,
              const std::vector<std::string>& references, const ChrFConfig& cfg) {
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("chrfpp: " + std::to_string(hypotheses.size()) +
                                    " hypotheses vs " + std::to_string(references.size()) +
                                    " references");
    if (hypotheses.empty()) throw std::invalid_argument("chrfpp: empty corpus");
    if (cfg.char_order < 1 || cfg.word_order < 0)
        throw std::invalid_argument("chrfpp: bad n-gram orders");

    const int total_orders = cfg.char_order + cfg.word_order;
    std::vector<OrderStats> stats(static_cast<size_t>(total_orders));
    bool warned_empty_ref = false;
    for (size_t s = 0; s < hypotheses.size(); ++s) {
        const std::vector<char32_t> hc = char_symbols(hypotheses[s]);
        const std::vector<char32_t> rc = char_symbols(references[s]);
        if (rc.empty() && !warned_empty_ref) {
            std::cerr << "chrfpp: warning: empty reference segment " << s
                      << " contributes zero counts\n";
            warned_empty_ref = true;
        }
        for (int n = 1; n <= cfg.char_order; ++n)
            accumulate(stats[static_cast<size_t>(n - 1)], hc, rc, n);
        const std::vector<char32_t> hw = word_symbols(hypotheses[s]);
        const std::vector<char32_t> rw = word_symbols(references[s]);
        for (int n = 1; n <= cfg.word_order; ++n)
            accumulate(stats[static_cast<size_t>(cfg.char_order + n - 1)], hw, rw, n);
    }

    const double b2 = cfg.beta * cfg.beta;
    double sum = 0;
    int effective = 0;
    for (const OrderStats& st : stats) {
        if (st.hyp_total == 0 || st.ref_total == 0) continue; // order unpopulated
        ++effective;
        if (st.matched == 0) continue; // F contributes 0
        const double p = double(st.matched) / double(st.hyp_total);
        const double r = double(st.matched) / double(st.ref_total);
        sum += (1.0 + b2) * p * r / (b2 * p + r);
    }
    if (effective == 0) return 0.0;
    return 100.0 * sum / double(effective);
}

double bleu(const std::vector<std::string>& hypotheses,
            const std::vector<std::string>& references) {
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) +
                                    " hypotheses vs " + std::to_string(references.size()) +
                                    " references");
    if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");

    constexpr int kMaxOrder = 4;
    std::vector<OrderStats> stats(kMaxOrder);
    int64_t hyp_len = 0, ref_len = 0;
    for (size_t s = 0; s < hypotheses.size(); ++s) {
        const std::vector<char32_t> h = word_symbols(hypotheses[s]);
        const std::vector<char32_t> r = word_symbols(references[s]);
        hyp_len += static_cast<int64_t>(h.size());
        ref_len += static_cast<int64_t>(r.size());
        for (int n = 1; n <= kMaxOrder; ++n)
            accumulate(stats[static_cast<size_t>(n - 1)], h, r, n);
    }
    if (hyp_len == 0) return 0.0;

    double log_sum = 0;
    for (const OrderStats& st : stats) {
        if (st.hyp_total == 0 || st.matched == 0) return 0.0; // strict geometric mean
        log_sum += std::log(double(st.matched) / double(st.hyp_total));
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
    return 100.0 * bp * std::exp(log_sum / double(kMaxOrder));
}

} // namespace peswap
