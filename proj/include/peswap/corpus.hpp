#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "peswap/model.hpp"
#include "peswap/rng.hpp"
#include "peswap/train.hpp"

namespace peswap {

/// One sentence-level translation pair with optional similarity score and
/// free-form metadata (url, domain, topic, conversation_id, turn_index,
/// language).
struct ParallelPair {
    std::string src;
    std::string tgt;
    std::optional<double> score;
    std::map<std::string, std::string> meta;
};

/// Consecutive sentences merged into one translation segment.
struct DocUnit {
    std::string src_doc;
    std::string tgt_doc;
    int64_t n_sentences = 0;
    std::vector<int64_t> provenance; // input pair indices, in order
};

struct RejectedPair {
    int64_t index = 0;
    std::string reason;
};

struct FloresDocsResult {
    std::vector<DocUnit> units;
    std::vector<RejectedPair> rejected;
};

/// Partition pairs by (url, domain, topic) metadata preserving order, then
/// join consecutive windows of `window` sentences with single spaces. A
/// trailing remainder smaller than the window becomes a smaller unit.
FloresDocsResult build_flores_docs(const std::vector<ParallelPair>& pairs,
                                   const std::vector<std::string>& group_keys = {"url", "domain",
                                                                                 "topic"},
                                   int64_t window = 3);

/// One DocUnit per conversation_id, turns ordered by turn_index. Throws on
/// duplicate (conversation_id, turn_index); output is sorted by id so the
/// result is independent of input order.
std::vector<DocUnit> merge_conversations(const std::vector<ParallelPair>& pairs);

/// Scored pairs ranked descending (ties keep input order); if fewer than k
/// carry scores, the shortfall is filled by a seeded uniform draw from the
/// unscored pairs.
std::vector<ParallelPair> select_top_k(const std::vector<ParallelPair>& pairs, int64_t k,
                                       RngStream rng);

enum class ToyKind { copy, reverse, mapped_translate };

const char* toy_kind_name(ToyKind k);
ToyKind parse_toy_kind(const std::string& s);

/// Synthetic parallel data over a closed vocabulary. mapped_translate applies
/// a fixed bijective token map and then swaps each adjacent pair, so the task
/// cannot be solved without positional information.
std::vector<ParallelPair> gen_toy_task(ToyKind kind, int64_t vocab,
                                       std::pair<int64_t, int64_t> len_range, int64_t n,
                                       RngStream rng);

// ---------------------------------------------------------------------------
// TSV ingestion (UTF-8, header row, tab-separated)
// ---------------------------------------------------------------------------

std::vector<ParallelPair> read_pairs_tsv(const std::string& path,
                                         std::vector<RejectedPair>* rejected = nullptr);
void write_pairs_tsv(const std::string& path, const std::vector<ParallelPair>& pairs);
void write_docs_tsv(const std::string& path, const std::vector<DocUnit>& units);

// ---------------------------------------------------------------------------
// closed-vocabulary whitespace tokenizer
// ---------------------------------------------------------------------------

/// Toy tokenizer: ids 0..3 are pad/bos/eos/unk, then one tag per language
/// ("__xx__"), then content words "w0".."w{n}". Sources get the two language
/// tags prefixed; every sequence ends with eos.
class Vocab {
public:
    static Vocab toy(int64_t size, std::vector<std::string> languages);

    int64_t size() const { return size_; }
    const std::vector<std::string>& languages() const { return languages_; }

    SpecialIds specials() const { return SpecialIds{0, 1, 2}; }
    int32_t pad_id() const { return 0; }
    int32_t bos_id() const { return 1; }
    int32_t eos_id() const { return 2; }
    int32_t unk_id() const { return 3; }

    int32_t tag_id(const std::string& language) const;
    int32_t token_id(const std::string& token) const; // unk when unknown
    const std::string& token(int32_t id) const;
    int64_t content_tokens() const { return size_ - 4 - static_cast<int64_t>(languages_.size()); }

    TokenSeq encode_source(const std::string& text, const std::string& src_lang,
                           const std::string& tgt_lang) const;
    TokenSeq encode_target(const std::string& text) const;
    std::string decode(const TokenSeq& ids) const; // drops specials and tags

private:
    int64_t size_ = 0;
    std::vector<std::string> languages_;
    std::vector<std::string> id_to_token_;
    std::map<std::string, int32_t> token_to_id_;
};

/// Encode a pair corpus for the model: sources as [src_tag, tgt_tag, w..., eos],
/// targets as [w..., eos].
std::vector<IdPair> encode_pairs(const Vocab& vocab, const std::vector<ParallelPair>& pairs,
                                 const std::string& src_lang, const std::string& tgt_lang);

} // namespace peswap
