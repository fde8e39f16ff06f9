#include "peswap/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace peswap {

using nlohmann::json;

uint32_t crc32_ieee(const std::byte* data, size_t n) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i)
        crc = table[(crc ^ static_cast<uint32_t>(data[i])) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// manifest json
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"enc_layers", c.enc_layers},
                {"dec_layers", c.dec_layers},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"ffn_dim", c.ffn_dim},
                {"src_vocab", c.src_vocab},
                {"tgt_vocab", c.tgt_vocab},
                {"pe_kind", pe_kind_name(c.pe_kind)},
                {"max_positions", {c.max_positions.first, c.max_positions.second}},
                {"dropout", c.dropout},
                {"norm_order", norm_order_name(c.norm_order)},
                {"use_bias", c.use_bias}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.enc_layers = j.at("enc_layers").get<int64_t>();
    c.dec_layers = j.at("dec_layers").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.ffn_dim = j.at("ffn_dim").get<int64_t>();
    c.src_vocab = j.at("src_vocab").get<int64_t>();
    c.tgt_vocab = j.at("tgt_vocab").get<int64_t>();
    c.pe_kind = parse_pe_kind(j.at("pe_kind").get<std::string>());
    c.max_positions = {j.at("max_positions").at(0).get<int64_t>(),
                       j.at("max_positions").at(1).get<int64_t>()};
    c.dropout = j.at("dropout").get<double>();
    c.norm_order = parse_norm_order(j.at("norm_order").get<std::string>());
    c.use_bias = j.at("use_bias").get<bool>();
    return c;
}

} // namespace

std::string manifest_to_json(const Manifest& m) {
    json j;
    j["schema_version"] = m.schema_version;
    j["created_by"] = m.created_by;
    j["kind"] = m.kind;
    j["adapters_only"] = m.adapters_only;
    j["base_checkpoint"] = m.base_checkpoint;
    j["config"] = config_to_json(m.config);
    j["languages"] = m.languages;
    if (m.lora) {
        j["lora"] = json{{"rank", m.lora->config.rank},
                         {"alpha", m.lora->config.alpha},
                         {"dropout", m.lora->config.dropout},
                         {"rank_scaled", m.lora->config.rank_scaled},
                         {"strategy", strategy_name(m.lora->strategy)}};
    } else {
        j["lora"] = nullptr;
    }
    json tensors = json::array();
    for (const auto& t : m.tensors) {
        tensors.push_back(json{{"name", t.name},
                               {"shape", t.shape},
                               {"dtype", dtype_name(t.dtype)},
                               {"byte_offset", t.byte_offset},
                               {"byte_length", t.byte_length},
                               {"crc32", t.crc32}});
    }
    j["tensors"] = std::move(tensors);
    return j.dump();
}

Manifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw checkpoint_error(CkptError::corrupt_manifest,
                               std::string("manifest is not valid JSON: ") + e.what());
    }
    try {
        Manifest m;
        m.schema_version = j.at("schema_version").get<int>();
        m.created_by = j.at("created_by").get<std::string>();
        m.kind = j.at("kind").get<std::string>();
        m.adapters_only = j.at("adapters_only").get<bool>();
        m.base_checkpoint = j.at("base_checkpoint").get<std::string>();
        m.config = config_from_json(j.at("config"));
        m.languages = j.at("languages").get<std::vector<std::string>>();
        if (!j.at("lora").is_null()) {
            ManifestLoRA l;
            const json& jl = j.at("lora");
            l.config.rank = jl.at("rank").get<int64_t>();
            l.config.alpha = jl.at("alpha").get<double>();
            l.config.dropout = jl.at("dropout").get<double>();
            l.config.rank_scaled = jl.at("rank_scaled").get<bool>();
            l.strategy = parse_strategy(jl.at("strategy").get<std::string>());
            m.lora = l;
        }
        for (const auto& jt : j.at("tensors")) {
            TensorRecord r;
            r.name = jt.at("name").get<std::string>();
            r.shape = jt.at("shape").get<Shape>();
            auto dt = dtype_from_name(jt.at("dtype").get<std::string>());
            if (!dt)
                throw checkpoint_error(CkptError::corrupt_manifest,
                                       "unknown dtype for tensor " + r.name);
            r.dtype = *dt;
            r.byte_offset = jt.at("byte_offset").get<uint64_t>();
            r.byte_length = jt.at("byte_length").get<uint64_t>();
            r.crc32 = jt.at("crc32").get<uint32_t>();
            m.tensors.push_back(std::move(r));
        }
        return m;
    } catch (const json::exception& e) {
        throw checkpoint_error(CkptError::corrupt_manifest,
                               std::string("manifest missing required fields: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// container io
// ---------------------------------------------------------------------------

namespace {

void validate_layout(const Manifest& m, uint64_t payload_size) {
    uint64_t expect = 0;
    std::map<std::string, int> seen;
    for (const auto& t : m.tensors) {
        if (seen[t.name]++)
            throw checkpoint_error(CkptError::layout, "duplicate tensor name: " + t.name);
        if (t.byte_offset != expect)
            throw checkpoint_error(CkptError::layout,
                                   "tensor " + t.name + " offset " +
                                       std::to_string(t.byte_offset) + " overlaps or leaves a gap");
        const uint64_t want =
            static_cast<uint64_t>(numel(t.shape)) * dtype_width(t.dtype);
        if (t.byte_length != want)
            throw checkpoint_error(CkptError::layout, "tensor " + t.name + " length " +
                                                          std::to_string(t.byte_length) +
                                                          " != shape size " + std::to_string(want));
        expect += t.byte_length;
    }
    if (payload_size < expect)
        throw checkpoint_error(CkptError::truncated,
                               "payload truncated: have " + std::to_string(payload_size) +
                                   " bytes, manifest describes " + std::to_string(expect));
    if (payload_size > expect)
        throw checkpoint_error(CkptError::layout,
                               "payload has " + std::to_string(payload_size - expect) +
                                   " trailing bytes beyond the manifest");
}

std::vector<std::byte> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw checkpoint_error(CkptError::corrupt_header, "cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff n = in.tellg();
    in.seekg(0);
    std::vector<std::byte> buf(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), n);
    if (!in) throw checkpoint_error(CkptError::truncated, "short read on " + path);
    return buf;
}

uint64_t read_u64_le(const std::byte* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<uint64_t>(p[i]);
    return v;
}

void write_u64_le(std::byte* p, uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

struct RawFile {
    Manifest manifest;
    std::vector<std::byte> payload;
};

RawFile parse_file(const std::string& path) {
    const std::vector<std::byte> buf = read_all(path);
    if (buf.size() < 16 ||
        std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw checkpoint_error(CkptError::corrupt_header, "bad magic in " + path);
    const uint64_t man_len = read_u64_le(buf.data() + 8);
    if (16 + man_len > buf.size())
        throw checkpoint_error(CkptError::truncated,
                               "manifest extends past end of file in " + path);
    const std::string man_text(reinterpret_cast<const char*>(buf.data()) + 16,
                               static_cast<size_t>(man_len));
    RawFile rf;
    rf.manifest = manifest_from_json(man_text);
    rf.payload.assign(buf.begin() + 16 + static_cast<std::ptrdiff_t>(man_len), buf.end());
    validate_layout(rf.manifest, rf.payload.size());
    return rf;
}

void check_crcs(const RawFile& rf, const std::string& path) {
    for (const auto& t : rf.manifest.tensors) {
        const uint32_t crc =
            crc32_ieee(rf.payload.data() + t.byte_offset, static_cast<size_t>(t.byte_length));
        if (crc != t.crc32)
            throw checkpoint_error(CkptError::checksum, "checksum mismatch for tensor " + t.name +
                                                            " in " + path);
    }
}

void write_file_atomic(const std::string& path, const Manifest& manifest,
                       const std::vector<std::byte>& payload) {
    const std::string man_text = manifest_to_json(manifest);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        std::byte lenbuf[8];
        write_u64_le(lenbuf, man_text.size());
        out.write(reinterpret_cast<const char*>(lenbuf), 8);
        out.write(man_text.data(), static_cast<std::streamsize>(man_text.size()));
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

} // namespace

void write_checkpoint_file(const std::string& path, Manifest manifest,
                           std::vector<TensorBlob> tensors) {
    std::sort(tensors.begin(), tensors.end(),
              [](const TensorBlob& a, const TensorBlob& b) { return a.name < b.name; });
    manifest.tensors.clear();
    std::vector<std::byte> payload;
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        TensorRecord rec;
        rec.name = t.name;
        rec.shape = t.shape;
        rec.dtype = t.dtype;
        rec.byte_offset = offset;
        rec.byte_length = t.bytes.size();
        rec.crc32 = crc32_ieee(t.bytes.data(), t.bytes.size());
        manifest.tensors.push_back(std::move(rec));
        payload.insert(payload.end(), t.bytes.begin(), t.bytes.end());
        offset += t.bytes.size();
    }
    write_file_atomic(path, manifest, payload);
}

LoadedCheckpoint read_checkpoint_file(const std::string& path) {
    RawFile rf = parse_file(path);
    check_crcs(rf, path);
    LoadedCheckpoint lc;
    lc.manifest = std::move(rf.manifest);
    for (const auto& t : lc.manifest.tensors)
        lc.tensor_bytes.emplace_back(rf.payload.begin() + static_cast<std::ptrdiff_t>(t.byte_offset),
                                     rf.payload.begin() +
                                         static_cast<std::ptrdiff_t>(t.byte_offset + t.byte_length));
    return lc;
}

Manifest read_manifest(const std::string& path) { return parse_file(path).manifest; }

void verify_checkpoint(const std::string& path) {
    RawFile rf = parse_file(path);
    check_crcs(rf, path);
}

SwapReport swap_pe_checkpoint(const std::string& in_path, PEKind new_pe,
                              const std::string& out_path) {
    RawFile rf = parse_file(in_path);
    check_crcs(rf, in_path);
    if (rf.manifest.kind != "model")
        throw checkpoint_error(CkptError::schema, "not a model checkpoint: " + in_path);
    SwapReport report;
    report.old_pe = rf.manifest.config.pe_kind;
    report.new_pe = new_pe;

    Manifest out = rf.manifest;
    out.config.pe_kind = new_pe;
    out.config.validate(); // e.g. rope requires an even head dim
    out.created_by = kToolVersion;
    write_file_atomic(out_path, out, rf.payload);

    // Re-read and count actual byte differences; the contract is zero.
    RawFile check = parse_file(out_path);
    check_crcs(check, out_path);
    for (const auto& t : check.manifest.tensors) {
        const auto* a = rf.payload.data() + t.byte_offset;
        const auto* b = check.payload.data() + t.byte_offset;
        if (std::memcmp(a, b, static_cast<size_t>(t.byte_length)) != 0) ++report.tensors_changed;
    }
    return report;
}

DiffReport diff_checkpoints(const std::string& path_a, const std::string& path_b) {
    RawFile a = parse_file(path_a);
    RawFile b = parse_file(path_b);
    DiffReport report;

    json ja = json::parse(manifest_to_json(a.manifest));
    json jb = json::parse(manifest_to_json(b.manifest));
    ja.erase("tensors");
    jb.erase("tensors");
    const json fa = ja.flatten(), fb = jb.flatten();
    auto dotted = [](std::string key) {
        // "/config/pe_kind" -> "config.pe_kind"
        std::string out;
        for (char c : key.substr(1)) out += (c == '/') ? '.' : c;
        return out;
    };
    for (const auto& [k, v] : fa.items()) {
        if (!fb.contains(k) || fb.at(k) != v) report.manifest_fields.push_back(dotted(k));
    }
    for (const auto& [k, v] : fb.items())
        if (!fa.contains(k)) report.manifest_fields.push_back(dotted(k));
    std::sort(report.manifest_fields.begin(), report.manifest_fields.end());

    std::map<std::string, const TensorRecord*> in_a, in_b;
    for (const auto& t : a.manifest.tensors) in_a[t.name] = &t;
    for (const auto& t : b.manifest.tensors) in_b[t.name] = &t;
    for (const auto& [name, ta] : in_a) {
        auto it = in_b.find(name);
        if (it == in_b.end()) {
            report.only_in_a.push_back(name);
            continue;
        }
        const TensorRecord* tb = it->second;
        bool same = ta->shape == tb->shape && ta->dtype == tb->dtype &&
                    ta->byte_length == tb->byte_length;
        if (same)
            same = std::memcmp(a.payload.data() + ta->byte_offset,
                               b.payload.data() + tb->byte_offset,
                               static_cast<size_t>(ta->byte_length)) == 0;
        if (!same) report.tensors_changed.push_back(name);
    }
    for (const auto& [name, tb] : in_b)
        if (!in_a.count(name)) report.only_in_b.push_back(name);
    return report;
}

} // namespace peswap
