#pragma once

// Parameter accounting, clustering agreement (NMI), neighbor preservation
// and inspection of symbols that share a code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdcode/codec.hpp"
#include "kdcode/composer.hpp"
#include "kdcode/numerics.hpp"

namespace kdcode {

struct ParamCount {
    std::uint64_t code_embedding_params = 0;
    std::uint64_t composer_params = 0;
    std::uint64_t total = 0;
    std::uint64_t conventional_baseline = 0;  // N x d one-hot embedding table
};

/// Counts exactly what the composers implement: D·K·d' code embeddings, plus
/// d'·d for the projection, plus 4(d'² + d') for the recurrent gates.
inline ParamCount param_count(const KdSpec& spec, std::uint64_t code_width, std::uint64_t out_width,
                              ComposerVariant variant) {
    ParamCount pc;
    pc.code_embedding_params = spec.code_dims() * spec.cardinality() * code_width;
    pc.composer_params = code_width * out_width;
    if (variant == ComposerVariant::lstm) pc.composer_params += 4 * (code_width * code_width + code_width);
    pc.total = pc.code_embedding_params + pc.composer_params;
    pc.conventional_baseline = spec.symbols() * out_width;
    return pc;
}

inline double compression_rate(const ParamCount& pc, bool include_composer) {
    if (pc.conventional_baseline == 0) throw std::invalid_argument("compression_rate: empty baseline");
    const std::uint64_t kd = include_composer ? pc.total : pc.code_embedding_params;
    return static_cast<double>(kd) / static_cast<double>(pc.conventional_baseline);
}

enum class NmiNorm { geometric, arithmetic, max };

inline const char* to_string(NmiNorm n) {
    switch (n) {
        case NmiNorm::geometric: return "geometric";
        case NmiNorm::arithmetic: return "arithmetic";
        case NmiNorm::max: return "max";
    }
    return "unknown";
}

namespace detail {

inline double entropy(std::span<const std::uint32_t> labels) {
    std::map<std::uint32_t, std::uint64_t> counts;
    for (auto l : labels) ++counts[l];
    std::vector<double> terms;
    const double n = static_cast<double>(labels.size());
    for (const auto& [_, c] : counts) {
        const double p = static_cast<double>(c) / n;
        terms.push_back(-p * std::log(p));
    }
    std::sort(terms.begin(), terms.end());
    double h = 0.0;
    for (double t : terms) h += t;
    return h;
}

}  // namespace detail

/// Normalized mutual information between two labelings of the same items.
/// Terms are summed in sorted order so nmi(a, b) == nmi(b, a) bit for bit.
inline double nmi(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                  NmiNorm norm = NmiNorm::geometric) {
    if (a.size() != b.size()) throw std::invalid_argument("nmi: labelings have different lengths");
    if (a.empty()) throw std::invalid_argument("nmi: empty labelings");
    const double ha = detail::entropy(a);
    const double hb = detail::entropy(b);
    if (ha == 0.0 && hb == 0.0) return 1.0;
    if (ha == 0.0 || hb == 0.0) return 0.0;

    std::map<std::uint32_t, std::uint64_t> ca, cb;
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> joint;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++ca[a[i]];
        ++cb[b[i]];
        ++joint[{a[i], b[i]}];
    }
    const double n = static_cast<double>(a.size());
    std::vector<double> terms;
    terms.reserve(joint.size());
    for (const auto& [key, c] : joint) {
        const double nab = static_cast<double>(c);
        const double na = static_cast<double>(ca[key.first]);
        const double nb = static_cast<double>(cb[key.second]);
        terms.push_back(nab / n * std::log(n * nab / (na * nb)));
    }
    std::sort(terms.begin(), terms.end());
    double mi = 0.0;
    for (double t : terms) mi += t;

    double denom = 0.0;
    switch (norm) {
        case NmiNorm::geometric: denom = std::sqrt(ha * hb); break;
        case NmiNorm::arithmetic: denom = 0.5 * (ha + hb); break;
        case NmiNorm::max: denom = std::max(ha, hb); break;
    }
    return std::clamp(mi / denom, 0.0, 1.0);
}

/// Dense partition ids for a codebook: symbols with the same full code share an id.
inline std::vector<std::uint32_t> code_partition(const CodeBook& codebook) {
    std::map<std::vector<std::uint32_t>, std::uint32_t> ids;
    std::vector<std::uint32_t> out(codebook.size());
    for (std::size_t i = 0; i < codebook.size(); ++i) {
        const auto c = codebook.code(i);
        auto [it, _] = ids.try_emplace(std::vector<std::uint32_t>(c.begin(), c.end()),
                                       static_cast<std::uint32_t>(ids.size()));
        out[i] = it->second;
    }
    return out;
}

enum class Similarity { cosine, euclidean };

inline const char* to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "euclidean"; }

namespace detail {

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = std::sqrt(squared_norm(a)), nb = std::sqrt(squared_norm(b));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

/// Top-k most similar other rows of `m` for row i; ties go to the lower index.
inline std::vector<std::size_t> top_neighbors(const Matrix& m, std::size_t i, std::size_t k, Similarity sim,
                                              std::vector<std::pair<double, std::size_t>>& scratch) {
    scratch.clear();
    for (std::size_t j = 0; j < m.rows(); ++j) {
        if (j == i) continue;
        const double score = sim == Similarity::cosine ? cosine(m.row(i), m.row(j))
                                                       : -squared_distance(m.row(i), m.row(j));
        scratch.emplace_back(score, j);
    }
    auto better = [](const auto& x, const auto& y) { return x.first > y.first || (x.first == y.first && x.second < y.second); };
    std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end(), better);
    std::vector<std::size_t> out(k);
    for (std::size_t t = 0; t < k; ++t) out[t] = scratch[t].second;
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// Mean over symbols of |top-k(original) ∩ top-k(reconstructed)| / k, self excluded.
inline double neighbor_preservation(const Matrix& original, const Matrix& reconstructed, std::size_t k,
                                    Similarity sim = Similarity::cosine) {
    if (!original.same_shape(reconstructed))
        throw std::invalid_argument("neighbor_preservation: matrices must have the same shape");
    if (k == 0 || k >= original.rows())
        throw std::invalid_argument("neighbor_preservation: k must satisfy 0 < k < N");
    std::vector<std::pair<double, std::size_t>> scratch;
    double total = 0.0;
    for (std::size_t i = 0; i < original.rows(); ++i) {
        const auto a = detail::top_neighbors(original, i, k, sim, scratch);
        const auto b = detail::top_neighbors(reconstructed, i, k, sim, scratch);
        std::vector<std::size_t> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        total += static_cast<double>(both.size()) / static_cast<double>(k);
    }
    return total / static_cast<double>(original.rows());
}

struct CodeGroup {
    std::vector<std::uint32_t> code;
    std::vector<std::string> labels;
    std::vector<std::size_t> symbols;
};

struct CodeGroupReport {
    std::vector<CodeGroup> groups;  // size descending, then code ascending
};

inline CodeGroupReport code_groups(const CodeBook& codebook, const std::vector<std::string>& labels) {
    if (labels.size() != codebook.size())
        throw std::invalid_argument("code_groups: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(codebook.size()) + " symbols");
    std::map<std::vector<std::uint32_t>, CodeGroup> by_code;
    for (std::size_t i = 0; i < codebook.size(); ++i) {
        const auto c = codebook.code(i);
        std::vector<std::uint32_t> key(c.begin(), c.end());
        auto& g = by_code[key];
        if (g.code.empty()) g.code = key;
        g.labels.push_back(labels[i]);
        g.symbols.push_back(i);
    }
    CodeGroupReport report;
    for (auto& [_, g] : by_code) report.groups.push_back(std::move(g));
    std::stable_sort(report.groups.begin(), report.groups.end(),
                     [](const CodeGroup& x, const CodeGroup& y) { return x.symbols.size() > y.symbols.size(); });
    return report;
}

struct GroupCohesion {
    double intra_group_mean = 0.0;  // over pairs sharing a code
    double global_mean = 0.0;       // over all pairs
    std::uint64_t intra_group_pairs = 0;
};

/// Mean pairwise cosine similarity within code groups versus over all pairs.
inline GroupCohesion group_cohesion(const Matrix& embeddings, const CodeBook& codebook) {
    if (embeddings.rows() != codebook.size())
        throw std::invalid_argument("group_cohesion: embedding count does not match the codebook");
    const auto part = code_partition(codebook);
    GroupCohesion out;
    double intra = 0.0, all = 0.0;
    std::uint64_t all_pairs = 0;
    for (std::size_t i = 0; i < embeddings.rows(); ++i)
        for (std::size_t j = i + 1; j < embeddings.rows(); ++j) {
            const double c = detail::cosine(embeddings.row(i), embeddings.row(j));
            all += c;
            ++all_pairs;
            if (part[i] == part[j]) {
                intra += c;
                ++out.intra_group_pairs;
            }
        }
    out.global_mean = all_pairs ? all / static_cast<double>(all_pairs) : 0.0;
    out.intra_group_mean = out.intra_group_pairs ? intra / static_cast<double>(out.intra_group_pairs) : 0.0;
    return out;
}

}  // namespace kdcode
