#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peswap/adapters.hpp"
#include "peswap/config.hpp"
#include "peswap/model.hpp"
#include "peswap/tensor.hpp"

namespace peswap {

// On-disk layout: 8-byte magic, u64-LE manifest byte length, UTF-8 JSON
// manifest, then the raw little-endian IEEE-754 payload. Tensor offsets are
// relative to the payload start, ascending and contiguous; each record carries
// a CRC-32 of its bytes. Positional state is never stored: a PE swap is a pure
// manifest edit.
inline constexpr char kCheckpointMagic[8] = {'P', 'E', 'S', 'W', 'C', 'K', 'P', '1'};
inline constexpr const char* kToolVersion = "peswap 0.1.0";

enum class CkptError {
    corrupt_header,
    corrupt_manifest,
    layout,
    truncated,
    checksum,
    schema,
    dtype,
};

struct checkpoint_error : std::runtime_error {
    CkptError kind;
    checkpoint_error(CkptError k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct TensorRecord {
    std::string name;
    Shape shape;
    Dtype dtype = Dtype::f32;
    uint64_t byte_offset = 0;
    uint64_t byte_length = 0;
    uint32_t crc32 = 0;
};

struct ManifestLoRA {
    LoRAConfig config;
    Strategy strategy = Strategy::lora;
};

struct Manifest {
    int schema_version = 1;
    std::string created_by = kToolVersion;
    std::string kind = "model"; // "model" | "optimizer"
    bool adapters_only = false;
    std::string base_checkpoint; // provenance for adapter-only files
    ModelConfig config;
    std::vector<std::string> languages;
    std::optional<ManifestLoRA> lora;
    std::vector<TensorRecord> tensors;
};

struct TensorBlob {
    std::string name;
    Shape shape;
    Dtype dtype = Dtype::f32;
    std::vector<std::byte> bytes;
};

struct LoadedCheckpoint {
    Manifest manifest;
    std::vector<std::vector<std::byte>> tensor_bytes; // aligned with manifest.tensors
};

// ---- file-level operations (implemented in checkpoint.cpp) ----

uint32_t crc32_ieee(const std::byte* data, size_t n);

/// Writes atomically (temp file + rename). Blobs are sorted by name; offsets
/// and checksums are filled in here.
void write_checkpoint_file(const std::string& path, Manifest manifest,
                           std::vector<TensorBlob> tensors);

LoadedCheckpoint read_checkpoint_file(const std::string& path);

Manifest read_manifest(const std::string& path);

/// Structural + checksum validation; throws checkpoint_error on any defect.
void verify_checkpoint(const std::string& path);

struct SwapReport {
    PEKind old_pe = PEKind::sine;
    PEKind new_pe = PEKind::sine;
    int64_t tensors_changed = 0;
};

/// The post-hoc PE swap: rewrites only the manifest's pe_kind; every tensor
/// payload byte is carried over verbatim (and re-verified after the write).
SwapReport swap_pe_checkpoint(const std::string& in_path, PEKind new_pe,
                              const std::string& out_path);

struct DiffReport {
    std::vector<std::string> manifest_fields; // dotted manifest paths that differ
    std::vector<std::string> tensors_changed; // same name, different bytes/shape/dtype
    std::vector<std::string> only_in_a;
    std::vector<std::string> only_in_b;
    bool empty() const {
        return manifest_fields.empty() && tensors_changed.empty() && only_in_a.empty() &&
               only_in_b.empty();
    }
};

DiffReport diff_checkpoints(const std::string& path_a, const std::string& path_b);

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);

// ---- byte conversion ----

namespace detail {

template <class Real>
std::vector<std::byte> tensor_to_le(const Tensor<Real>& t) {
    std::vector<std::byte> out(static_cast<size_t>(t.size()) * sizeof(Real));
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), t.data(), out.size());
    } else {
        for (int64_t i = 0; i < t.size(); ++i) {
            Real v = t[i];
            auto* src = reinterpret_cast<const std::byte*>(&v);
            for (size_t b = 0; b < sizeof(Real); ++b)
                out[static_cast<size_t>(i) * sizeof(Real) + b] = src[sizeof(Real) - 1 - b];
        }
    }
    return out;
}

template <class Real>
Tensor<Real> tensor_from_le(const Shape& shape, const std::vector<std::byte>& bytes) {
    Tensor<Real> t(shape);
    if (bytes.size() != static_cast<size_t>(t.size()) * sizeof(Real))
        throw checkpoint_error(CkptError::layout, "payload size mismatch for " + shape_str(shape));
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(t.data(), bytes.data(), bytes.size());
    } else {
        for (int64_t i = 0; i < t.size(); ++i) {
            Real v;
            auto* dst = reinterpret_cast<std::byte*>(&v);
            for (size_t b = 0; b < sizeof(Real); ++b)
                dst[b] = bytes[static_cast<size_t>(i) * sizeof(Real) + sizeof(Real) - 1 - b];
            t[i] = v;
        }
    }
    return t;
}

} // namespace detail

// ---- model persistence ----

template <class Real>
void save_checkpoint(const TransformerModel<Real>& m, const std::string& path,
                     const std::vector<std::string>& languages = {}) {
    Manifest man;
    man.config = m.cfg;
    man.languages = languages;
    if (m.adapters && m.adapters->strategy != Strategy::fft)
        man.lora = ManifestLoRA{m.adapters->config, m.adapters->strategy};
    std::vector<TensorBlob> blobs;
    for (const auto* p : m.params.all())
        blobs.push_back(TensorBlob{p->name, p->value.shape(), dtype_of<Real>(),
                                   detail::tensor_to_le(p->value)});
    write_checkpoint_file(path, std::move(man), std::move(blobs));
}

/// Adapter-only checkpoint: just the LoRA tensors plus base provenance.
template <class Real>
void save_adapter_checkpoint(const TransformerModel<Real>& m, const std::string& path,
                             const std::string& base_ref,
                             const std::vector<std::string>& languages = {}) {
    if (!m.adapters || m.adapters->strategy == Strategy::fft)
        throw std::logic_error("save_adapter_checkpoint: model has no adapters");
    Manifest man;
    man.config = m.cfg;
    man.languages = languages;
    man.adapters_only = true;
    man.base_checkpoint = base_ref;
    man.lora = ManifestLoRA{m.adapters->config, m.adapters->strategy};
    std::vector<TensorBlob> blobs;
    for (const auto& name : adapter_param_names(m)) {
        const auto* p = m.params.find(name);
        blobs.push_back(TensorBlob{p->name, p->value.shape(), dtype_of<Real>(),
                                   detail::tensor_to_le(p->value)});
    }
    write_checkpoint_file(path, std::move(man), std::move(blobs));
}

inline Dtype checkpoint_dtype(const Manifest& m) {
    return m.tensors.empty() ? Dtype::f32 : m.tensors.front().dtype;
}

template <class Real>
TransformerModel<Real> load_checkpoint(const std::string& path) {
    LoadedCheckpoint lc = read_checkpoint_file(path);
    if (lc.manifest.kind != "model")
        throw checkpoint_error(CkptError::schema, "not a model checkpoint: " + path);
    if (lc.manifest.adapters_only)
        throw checkpoint_error(CkptError::schema,
                               "adapter-only checkpoint needs a base model: " + path);
    for (const auto& rec : lc.manifest.tensors)
        if (rec.dtype != dtype_of<Real>())
            throw checkpoint_error(CkptError::dtype, "tensor " + rec.name + " is " +
                                                         dtype_name(rec.dtype) + ", expected " +
                                                         dtype_name(dtype_of<Real>()));
    TransformerModel<Real> m = build_model<Real>(lc.manifest.config, RngStream(0));
    if (lc.manifest.lora)
        inject(m, lc.manifest.lora->strategy, lc.manifest.lora->config, RngStream(0));
    size_t filled = 0;
    for (size_t i = 0; i < lc.manifest.tensors.size(); ++i) {
        const auto& rec = lc.manifest.tensors[i];
        auto* p = m.params.find(rec.name);
        if (!p)
            throw checkpoint_error(CkptError::schema,
                                   "tensor " + rec.name + " does not exist in the model");
        if (p->value.shape() != rec.shape)
            throw checkpoint_error(CkptError::schema, "tensor " + rec.name + " shape " +
                                                          shape_str(rec.shape) + " != model " +
                                                          shape_str(p->value.shape()));
        p->value = detail::tensor_from_le<Real>(rec.shape, lc.tensor_bytes[i]);
        ++filled;
    }
    if (filled != m.params.count())
        throw checkpoint_error(CkptError::schema,
                               "checkpoint covers " + std::to_string(filled) + " of " +
                                   std::to_string(m.params.count()) + " model tensors");
    return m;
}

/// Applies an adapter-only checkpoint onto a model that already carries the
/// matching injected adapters.
template <class Real>
void load_adapter_checkpoint(TransformerModel<Real>& m, const std::string& path) {
    LoadedCheckpoint lc = read_checkpoint_file(path);
    if (!lc.manifest.adapters_only)
        throw checkpoint_error(CkptError::schema, "not an adapter-only checkpoint: " + path);
    for (size_t i = 0; i < lc.manifest.tensors.size(); ++i) {
        const auto& rec = lc.manifest.tensors[i];
        auto* p = m.params.find(rec.name);
        if (!p)
            throw checkpoint_error(CkptError::schema,
                                   "adapter tensor " + rec.name + " not present in model");
        if (rec.dtype != dtype_of<Real>())
            throw checkpoint_error(CkptError::dtype, "adapter tensor dtype mismatch: " + rec.name);
        if (p->value.shape() != rec.shape)
            throw checkpoint_error(CkptError::schema, "adapter tensor shape mismatch: " + rec.name);
        p->value = detail::tensor_from_le<Real>(rec.shape, lc.tensor_bytes[i]);
    }
}

/// Calls fn with the checkpoint loaded at its stored precision.
template <class Fn>
auto dispatch_checkpoint(const std::string& path, Fn&& fn) {
    const Manifest man = read_manifest(path);
    if (checkpoint_dtype(man) == Dtype::f64)
        return fn(load_checkpoint<double>(path), man);
    return fn(load_checkpoint<float>(path), man);
}

} // namespace peswap
