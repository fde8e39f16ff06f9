#include "peswap/positional.hpp"

#include <cmath>

namespace peswap {

const char* pe_kind_name(PEKind k) {
    switch (k) {
    case PEKind::sine: return "sine";
    case PEKind::rope: return "rope";
    case PEKind::alibi: return "alibi";
    case PEKind::nope: return "nope";
    }
    return "?";
}

std::optional<PEKind> pe_kind_from_string(const std::string& s) {
    if (s == "sine") return PEKind::sine;
    if (s == "rope") return PEKind::rope;
    if (s == "alibi") return PEKind::alibi;
    if (s == "nope") return PEKind::nope;
    return std::nullopt;
}

PEKind parse_pe_kind(const std::string& s) {
    if (auto k = pe_kind_from_string(s)) return *k;
    throw std::invalid_argument("unknown positional scheme '" + s +
                                "' (expected sine|rope|alibi|nope)");
}

std::vector<PEKind> all_pe_kinds() {
    return {PEKind::sine, PEKind::rope, PEKind::alibi, PEKind::nope};
}

namespace {

std::vector<double> power_of_two_slopes(int64_t n) {
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t h = 0; h < n; ++h)
        out[static_cast<size_t>(h)] = std::pow(2.0, -8.0 * double(h + 1) / double(n));
    return out;
}

} // namespace

AlibiSlopes alibi_slopes(int64_t n_heads) {
    if (n_heads < 1)
        throw std::invalid_argument("alibi_slopes: need at least one head");
    AlibiSlopes out;
    out.n_heads = n_heads;
    if ((n_heads & (n_heads - 1)) == 0) {
        out.slopes = power_of_two_slopes(n_heads);
        return out;
    }
    int64_t p = 1;
    while (p * 2 <= n_heads) p *= 2;
    out.slopes = power_of_two_slopes(p);
    const std::vector<double> doubled = power_of_two_slopes(2 * p);
    for (int64_t i = 0; out.slopes.size() < static_cast<size_t>(n_heads); i += 2)
        out.slopes.push_back(doubled[static_cast<size_t>(i)]);
    return out;
}

} // namespace peswap
