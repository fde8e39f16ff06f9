#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "peswap/metrics.hpp"
#include "peswap/rng.hpp"

using namespace peswap;

namespace {

// ---------------------------------------------------------------------------
// Brute-force oracle: an independent n-gram counter over codepoint substrings
// and word-token vectors using ordered maps, with the aggregation re-derived.
// ---------------------------------------------------------------------------

std::vector<std::string> oracle_codepoints(const std::string& s) {
    // split a UTF-8 string into codepoint-sized byte chunks, dropping spaces
    std::vector<std::string> cps;
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if ((c >> 5) == 0x6) len = 2;
        else if ((c >> 4) == 0xE) len = 3;
        else if ((c >> 3) == 0x1E) len = 4;
        const std::string chunk = s.substr(i, len);
        if (chunk != " " && chunk != "\t" && chunk != "\n" && chunk != "\r") cps.push_back(chunk);
        i += len;
    }
    return cps;
}

using OracleCounts = std::map<std::vector<std::string>, long>;

OracleCounts oracle_ngrams(const std::vector<std::string>& units, int n) {
    OracleCounts out;
    for (size_t i = 0; i + size_t(n) <= units.size(); ++i)
        out[std::vector<std::string>(units.begin() + long(i), units.begin() + long(i) + n)] += 1;
    return out;
}

struct OracleOrder {
    long matched = 0, hyp = 0, ref = 0;
};

void oracle_accumulate(OracleOrder& o, const std::vector<std::string>& h,
                       const std::vector<std::string>& r, int n) {
    const OracleCounts hc = oracle_ngrams(h, n);
    const OracleCounts rc = oracle_ngrams(r, n);
    for (const auto& [g, c] : hc) {
        o.hyp += c;
        auto it = rc.find(g);
        if (it != rc.end()) o.matched += std::min(c, it->second);
    }
    for (const auto& [g, c] : rc) o.ref += c;
}

double oracle_chrfpp(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    std::vector<OracleOrder> orders(8); // 6 char + 2 word
    for (size_t s = 0; s < hyps.size(); ++s) {
        const auto hc = oracle_codepoints(hyps[s]);
        const auto rc = oracle_codepoints(refs[s]);
        for (int n = 1; n <= 6; ++n) oracle_accumulate(orders[size_t(n - 1)], hc, rc, n);
        const auto hw = tokenize_words(hyps[s]); // shared tokenizer, counted independently
        const auto rw = tokenize_words(refs[s]);
        for (int n = 1; n <= 2; ++n) oracle_accumulate(orders[size_t(5 + n)], hw, rw, n);
    }
    double total = 0;
    int used = 0;
    for (const OracleOrder& o : orders) {
        if (o.hyp == 0 || o.ref == 0) continue;
        ++used;
        if (o.matched == 0) continue;
        const double p = double(o.matched) / double(o.hyp);
        const double r = double(o.matched) / double(o.ref);
        total += 5.0 * p * r / (4.0 * p + r); // beta = 2
    }
    return used == 0 ? 0.0 : 100.0 * total / used;
}

std::string random_segment(RngStream& rng) {
    static const std::string alphabet = "abcdefg hij,k.lm!?";
    const int len = 1 + int(rng.below(28));
    std::string s;
    for (int i = 0; i < len; ++i) s += alphabet[size_t(rng.below(alphabet.size()))];
    if (s.find_first_not_of(" .,!?") == std::string::npos) s += "x";
    return s;
}

} // namespace

TEST_CASE("chrfpp: identity scores 100, even for segments shorter than the max order") {
    CHECK(chrfpp({"the cat sat on the mat"}, {"the cat sat on the mat"}) ==
          doctest::Approx(100.0));
    CHECK(chrfpp({"ab"}, {"ab"}) == doctest::Approx(100.0));
    CHECK(chrfpp({"hello world", "ab"}, {"hello world", "ab"}) == doctest::Approx(100.0));
}

TEST_CASE("chrfpp: fully disjoint corpora score 0") {
    CHECK(chrfpp({"aaaa"}, {"bbbb"}) == doctest::Approx(0.0));
}

TEST_CASE("chrfpp: mixed case matches the brute-force oracle") {
    const std::vector<std::string> h = {"ab"};
    const std::vector<std::string> r = {"abc"};
    CHECK(chrfpp(h, r) == doctest::Approx(oracle_chrfpp(h, r)).epsilon(1e-9));
    CHECK(std::abs(chrfpp(h, r) - oracle_chrfpp(h, r)) <= 0.01);
}

TEST_CASE("chrfpp: randomized corpora agree with the oracle") {
    RngStream rng(77, 1);
    for (int corpus = 0; corpus < 25; ++corpus) {
        const int n = 1 + int(rng.below(6));
        std::vector<std::string> hyps, refs;
        for (int s = 0; s < n; ++s) {
            hyps.push_back(random_segment(rng));
            // half the time make the reference related to the hypothesis
            if (rng.below(2) == 0) {
                std::string r = hyps.back();
                if (!r.empty() && rng.below(2) == 0) r[r.size() / 2] = 'z';
                refs.push_back(r);
            } else {
                refs.push_back(random_segment(rng));
            }
        }
        const double got = chrfpp(hyps, refs);
        const double want = oracle_chrfpp(hyps, refs);
        CHECK(std::abs(got - want) <= 0.01);
    }
}

TEST_CASE("chrfpp: corpus accumulation is segment-order invariant") {
    const std::vector<std::string> h = {"one two", "three", "four five six"};
    const std::vector<std::string> r = {"one twa", "threes", "four5 six"};
    const double a = chrfpp(h, r);
    const std::vector<std::string> h2 = {h[2], h[0], h[1]};
    const std::vector<std::string> r2 = {r[2], r[0], r[1]};
    CHECK(a == doctest::Approx(chrfpp(h2, r2)).epsilon(1e-12));
}

TEST_CASE("chrfpp: appending a perfect pair never lowers an imperfect corpus score") {
    RngStream rng(78, 2);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<std::string> hyps = {random_segment(rng)};
        std::vector<std::string> refs = {random_segment(rng)};
        const double before = chrfpp(hyps, refs);
        if (before >= 100.0) continue;
        const std::string perfect = random_segment(rng);
        hyps.push_back(perfect);
        refs.push_back(perfect);
        CHECK(chrfpp(hyps, refs) >= before - 1e-9);
    }
}

TEST_CASE("chrfpp: usage errors") {
    CHECK_THROWS_AS(chrfpp({"a", "b"}, {"a"}), std::invalid_argument);
    CHECK_THROWS_AS(chrfpp({}, {}), std::invalid_argument);
    // empty reference contributes zero counts but does not throw
    CHECK(chrfpp({"abc", "x"}, {"abc", ""}) > 0.0);
}

TEST_CASE("bleu: identity and disjoint corpora") {
    CHECK(bleu({"the cat sat on the mat"}, {"the cat sat on the mat"}) == doctest::Approx(100.0));
    CHECK(bleu({"a b c d e"}, {"v w x y z"}) == doctest::Approx(0.0));
}

TEST_CASE("bleu: brevity penalty on a perfect-precision shorter hypothesis") {
    // hyp = first 4 tokens of a 5-token reference: all clipped precisions are
    // 1, so the score is exactly 100 * exp(1 - 5/4)
    const double got = bleu({"a b c d"}, {"a b c d e"});
    CHECK(got == doctest::Approx(100.0 * std::exp(1.0 - 5.0 / 4.0)).epsilon(1e-4));
}

TEST_CASE("bleu: no 4-gram overlap anywhere scores 0 under the strict geometric mean") {
    // trigrams overlap, 4-grams never do
    CHECK(bleu({"a b c x a b c"}, {"a b c y a b c"}) == doctest::Approx(0.0));
    // a 3-token hypothesis has no 4-grams at all
    CHECK(bleu({"a b c"}, {"a b c d"}) == doctest::Approx(0.0));
}

TEST_CASE("bleu: longer hypotheses get no brevity penalty") {
    const double got = bleu({"a b c d e f"}, {"a b c d e"});
    // precisions: 5/6, 4/5, 3/4, 2/3; BP = 1
    const double want =
        100.0 * std::exp((std::log(5.0 / 6) + std::log(4.0 / 5) + std::log(3.0 / 4) +
                          std::log(2.0 / 3)) /
                         4.0);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("word tokenizer separates leading/trailing punctuation") {
    const auto toks = tokenize_words("\"hello, world!\" (yes)");
    const std::vector<std::string> want = {"\"", "hello", ",", "world", "!", "\"",
                                           "(",  "yes",   ")"};
    CHECK(toks == want);
    CHECK(tokenize_words("  spaced   out  ") == std::vector<std::string>{"spaced", "out"});
    CHECK(tokenize_words("...") == std::vector<std::string>{".", ".", "."});
}

TEST_CASE("utf8 decoding handles multibyte codepoints") {
    const auto cps = decode_utf8("aé中");
    REQUIRE(cps.size() == 3);
    CHECK(cps[0] == uint32_t('a'));
    CHECK(cps[1] == 0xE9);
    CHECK(cps[2] == 0x4E2D);
    // multibyte text scores like any other text
    CHECK(chrfpp({"café"}, {"café"}) == doctest::Approx(100.0));
}
