#include "peswap/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace peswap {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

} // namespace

FloresDocsResult build_flores_docs(const std::vector<ParallelPair>& pairs,
                                   const std::vector<std::string>& group_keys, int64_t window) {
    if (window < 1) throw std::invalid_argument("build_flores_docs: window must be >= 1");
    FloresDocsResult result;
    std::vector<std::string> group_order;
    std::map<std::string, std::vector<int64_t>> groups;
    for (int64_t i = 0; i < static_cast<int64_t>(pairs.size()); ++i) {
        const ParallelPair& p = pairs[static_cast<size_t>(i)];
        std::string key;
        bool ok = true;
        for (const std::string& k : group_keys) {
            auto it = p.meta.find(k);
            if (it == p.meta.end()) {
                result.rejected.push_back({i, "missing group key '" + k + "'"});
                ok = false;
                break;
            }
            key += it->second;
            key += '\x1f';
        }
        if (!ok) continue;
        if (!groups.count(key)) group_order.push_back(key);
        groups[key].push_back(i);
    }
    for (const std::string& key : group_order) {
        const std::vector<int64_t>& members = groups[key];
        for (size_t start = 0; start < members.size(); start += static_cast<size_t>(window)) {
            const size_t end = std::min(members.size(), start + static_cast<size_t>(window));
            DocUnit unit;
            for (size_t j = start; j < end; ++j) {
                const ParallelPair& p = pairs[static_cast<size_t>(members[j])];
                if (!unit.src_doc.empty()) unit.src_doc += ' ';
                if (!unit.tgt_doc.empty()) unit.tgt_doc += ' ';
                unit.src_doc += p.src;
                unit.tgt_doc += p.tgt;
                unit.provenance.push_back(members[j]);
            }
            unit.n_sentences = static_cast<int64_t>(unit.provenance.size());
            result.units.push_back(std::move(unit));
        }
    }
    return result;
}

std::vector<DocUnit> merge_conversations(const std::vector<ParallelPair>& pairs) {
    struct Turn {
        int64_t turn_index;
        int64_t pair_index;
    };
    std::map<std::string, std::vector<Turn>> convs;
    for (int64_t i = 0; i < static_cast<int64_t>(pairs.size()); ++i) {
        const ParallelPair& p = pairs[static_cast<size_t>(i)];
        auto cid = p.meta.find("conversation_id");
        auto tix = p.meta.find("turn_index");
        if (cid == p.meta.end() || tix == p.meta.end())
            throw std::invalid_argument("merge_conversations: pair " + std::to_string(i) +
                                        " lacks conversation_id/turn_index");
        int64_t turn = 0;
        try {
            turn = std::stoll(tix->second);
        } catch (const std::exception&) {
            throw std::invalid_argument("merge_conversations: bad turn_index '" + tix->second +
                                        "' at pair " + std::to_string(i));
        }
        convs[cid->second].push_back({turn, i});
    }
    std::vector<DocUnit> out;
    for (auto& [cid, turns] : convs) {
        std::sort(turns.begin(), turns.end(),
                  [](const Turn& a, const Turn& b) { return a.turn_index < b.turn_index; });
        for (size_t j = 1; j < turns.size(); ++j)
            if (turns[j].turn_index == turns[j - 1].turn_index)
                throw std::runtime_error("merge_conversations: duplicate turn " +
                                         std::to_string(turns[j].turn_index) +
                                         " in conversation '" + cid + "'");
        DocUnit unit;
        for (const Turn& t : turns) {
            const ParallelPair& p = pairs[static_cast<size_t>(t.pair_index)];
            if (!unit.src_doc.empty()) unit.src_doc += ' ';
            if (!unit.tgt_doc.empty()) unit.tgt_doc += ' ';
            unit.src_doc += p.src;
            unit.tgt_doc += p.tgt;
            unit.provenance.push_back(t.pair_index);
        }
        unit.n_sentences = static_cast<int64_t>(unit.provenance.size());
        out.push_back(std::move(unit));
    }
    return out; // std::map keys: sorted by conversation_id
}

std::vector<ParallelPair> select_top_k(const std::vector<ParallelPair>& pairs, int64_t k,
                                       RngStream rng) {
    if (k < 0) throw std::invalid_argument("select_top_k: k must be >= 0");
    std::vector<size_t> scored, unscored;
    for (size_t i = 0; i < pairs.size(); ++i)
        (pairs[i].score ? scored : unscored).push_back(i);
    std::stable_sort(scored.begin(), scored.end(),
                     [&](size_t a, size_t b) { return *pairs[a].score > *pairs[b].score; });

    std::vector<ParallelPair> out;
    const size_t want = std::min<size_t>(static_cast<size_t>(k), pairs.size());
    for (size_t i = 0; i < scored.size() && out.size() < want; ++i)
        out.push_back(pairs[scored[i]]);
    // shortfall: seeded uniform draw without replacement from the unscored pool
    size_t need = want - out.size();
    for (size_t i = 0; i < need; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(unscored.size() - i));
        std::swap(unscored[i], unscored[j]);
        out.push_back(pairs[unscored[i]]);
    }
    return out;
}

const char* toy_kind_name(ToyKind k) {
    switch (k) {
    case ToyKind::copy: return "copy";
    case ToyKind::reverse: return "reverse";
    case ToyKind::mapped_translate: return "mapped-translate";
    }
    return "?";
}

ToyKind parse_toy_kind(const std::string& s) {
    if (s == "copy") return ToyKind::copy;
    if (s == "reverse") return ToyKind::reverse;
    if (s == "mapped-translate" || s == "mapped_translate") return ToyKind::mapped_translate;
    throw std::invalid_argument("unknown toy task '" + s +
                                "' (expected copy|reverse|mapped-translate)");
}

std::vector<ParallelPair> gen_toy_task(ToyKind kind, int64_t vocab,
                                       std::pair<int64_t, int64_t> len_range, int64_t n,
                                       RngStream rng) {
    if (vocab < 4) throw std::invalid_argument("gen_toy_task: vocab must be >= 4");
    const int64_t content = vocab - 4 - 2; // specials + two language tags
    if (content < 2)
        throw std::invalid_argument("gen_toy_task: vocab " + std::to_string(vocab) +
                                    " leaves no content tokens after specials and tags");
    if (len_range.first < 1 || len_range.second < len_range.first)
        throw std::invalid_argument("gen_toy_task: bad length range [" +
                                    std::to_string(len_range.first) + ", " +
                                    std::to_string(len_range.second) + "]");
    std::vector<ParallelPair> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t len =
            len_range.first +
            static_cast<int64_t>(rng.below(static_cast<uint64_t>(len_range.second -
                                                                 len_range.first + 1)));
        std::vector<int64_t> src(static_cast<size_t>(len));
        for (auto& t : src) t = static_cast<int64_t>(rng.below(static_cast<uint64_t>(content)));
        std::vector<int64_t> tgt(src);
        switch (kind) {
        case ToyKind::copy: break;
        case ToyKind::reverse: std::reverse(tgt.begin(), tgt.end()); break;
        case ToyKind::mapped_translate: {
            // fixed bijection f(w) = content-1-w, then swap adjacent positions
            for (auto& t : tgt) t = content - 1 - t;
            for (size_t j = 0; j + 1 < tgt.size(); j += 2) std::swap(tgt[j], tgt[j + 1]);
            break;
        }
        }
        ParallelPair p;
        for (size_t j = 0; j < src.size(); ++j) {
            if (j) p.src += ' ';
            p.src += "w" + std::to_string(src[j]);
        }
        for (size_t j = 0; j < tgt.size(); ++j) {
            if (j) p.tgt += ' ';
            p.tgt += "w" + std::to_string(tgt[j]);
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// TSV
// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string> kKnownMeta = {"url",    "domain",          "topic",
                                             "language", "conversation_id", "turn_index"};
}

std::vector<ParallelPair> read_pairs_tsv(const std::string& path,
                                         std::vector<RejectedPair>* rejected) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty TSV file: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split_tabs(line);
    int src_col = -1, tgt_col = -1, score_col = -1;
    std::map<int, std::string> meta_cols;
    for (int c = 0; c < static_cast<int>(header.size()); ++c) {
        const std::string h = trim(header[static_cast<size_t>(c)]);
        if (h == "src") src_col = c;
        else if (h == "tgt") tgt_col = c;
        else if (h == "score") score_col = c;
        else if (std::find(kKnownMeta.begin(), kKnownMeta.end(), h) != kKnownMeta.end())
            meta_cols[c] = h;
    }
    if (src_col < 0 || tgt_col < 0)
        throw std::runtime_error("TSV header must contain 'src' and 'tgt' columns: " + path);

    std::vector<ParallelPair> out;
    int64_t row = 0;
    auto reject = [&](const std::string& why) {
        if (rejected) rejected->push_back({row, why});
    };
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> cols = split_tabs(line);
        auto col = [&](int c) -> std::string {
            return c >= 0 && c < static_cast<int>(cols.size()) ? cols[static_cast<size_t>(c)] : "";
        };
        ParallelPair p;
        p.src = trim(col(src_col));
        p.tgt = trim(col(tgt_col));
        if (p.src.empty() || p.tgt.empty()) {
            reject("empty src or tgt");
            continue;
        }
        const std::string sc = trim(col(score_col));
        if (!sc.empty()) {
            try {
                p.score = std::stod(sc);
            } catch (const std::exception&) {
                reject("bad score '" + sc + "'");
                continue;
            }
        }
        for (const auto& [c, name] : meta_cols) {
            const std::string v = trim(col(c));
            if (!v.empty()) p.meta[name] = v;
        }
        const bool has_cid = p.meta.count("conversation_id") > 0;
        const bool has_turn = p.meta.count("turn_index") > 0;
        if (has_cid != has_turn) {
            reject("conversation_id and turn_index must appear together");
            continue;
        }
        out.push_back(std::move(p));
    }
    return out;
}

void write_pairs_tsv(const std::string& path, const std::vector<ParallelPair>& pairs) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "src\ttgt\tscore\turl\tdomain\ttopic\tlanguage\tconversation_id\tturn_index\n";
    auto meta = [](const ParallelPair& p, const char* k) -> std::string {
        auto it = p.meta.find(k);
        return it == p.meta.end() ? "" : it->second;
    };
    for (const ParallelPair& p : pairs) {
        out << p.src << '\t' << p.tgt << '\t';
        if (p.score) out << *p.score;
        out << '\t' << meta(p, "url") << '\t' << meta(p, "domain") << '\t' << meta(p, "topic")
            << '\t' << meta(p, "language") << '\t' << meta(p, "conversation_id") << '\t'
            << meta(p, "turn_index") << '\n';
    }
}

void write_docs_tsv(const std::string& path, const std::vector<DocUnit>& units) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "src_doc\ttgt_doc\tn_sentences\tprovenance\n";
    for (const DocUnit& u : units) {
        out << u.src_doc << '\t' << u.tgt_doc << '\t' << u.n_sentences << '\t';
        for (size_t i = 0; i < u.provenance.size(); ++i) {
            if (i) out << ',';
            out << u.provenance[i];
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// vocab
// ---------------------------------------------------------------------------

Vocab Vocab::toy(int64_t size, std::vector<std::string> languages) {
    if (size < 4 + static_cast<int64_t>(languages.size()) + 1)
        throw std::invalid_argument("vocab size " + std::to_string(size) +
                                    " too small for specials, tags and content");
    Vocab v;
    v.size_ = size;
    v.languages_ = std::move(languages);
    v.id_to_token_ = {"<pad>", "<s>", "</s>", "<unk>"};
    for (const std::string& lang : v.languages_) v.id_to_token_.push_back("__" + lang + "__");
    const int64_t content = size - static_cast<int64_t>(v.id_to_token_.size());
    for (int64_t i = 0; i < content; ++i) v.id_to_token_.push_back("w" + std::to_string(i));
    for (size_t i = 0; i < v.id_to_token_.size(); ++i)
        v.token_to_id_[v.id_to_token_[i]] = static_cast<int32_t>(i);
    return v;
}

int32_t Vocab::tag_id(const std::string& language) const {
    auto it = token_to_id_.find("__" + language + "__");
    if (it == token_to_id_.end())
        throw std::invalid_argument("vocab has no language tag for '" + language + "'");
    return it->second;
}

int32_t Vocab::token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocab::token(int32_t id) const {
    if (id < 0 || id >= static_cast<int32_t>(id_to_token_.size()))
        throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<size_t>(id)];
}

namespace {
std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> toks;
    std::istringstream ss(text);
    std::string t;
    while (ss >> t) toks.push_back(t);
    return toks;
}
} // namespace

TokenSeq Vocab::encode_source(const std::string& text, const std::string& src_lang,
                              const std::string& tgt_lang) const {
    TokenSeq ids{tag_id(src_lang), tag_id(tgt_lang)};
    for (const std::string& t : whitespace_tokens(text)) ids.push_back(token_id(t));
    ids.push_back(eos_id());
    return ids;
}

TokenSeq Vocab::encode_target(const std::string& text) const {
    TokenSeq ids;
    for (const std::string& t : whitespace_tokens(text)) ids.push_back(token_id(t));
    ids.push_back(eos_id());
    return ids;
}

std::string Vocab::decode(const TokenSeq& ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (id == pad_id() || id == bos_id() || id == eos_id()) continue;
        const std::string& tok = token(id);
        if (tok.size() >= 4 && tok.rfind("__", 0) == 0) continue; // language tag
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

std::vector<IdPair> encode_pairs(const Vocab& vocab, const std::vector<ParallelPair>& pairs,
                                 const std::string& src_lang, const std::string& tgt_lang) {
    std::vector<IdPair> out;
    out.reserve(pairs.size());
    for (const ParallelPair& p : pairs)
        out.emplace_back(vocab.encode_source(p.src, src_lang, tgt_lang),
                         vocab.encode_target(p.tgt));
    return out;
}

} // namespace peswap
