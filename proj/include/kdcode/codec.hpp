#pragma once

// K-way D-dimensional codes: code-space arithmetic, relaxed code logits,
// the tempering-softmax straight-through estimator and the temperature
// schedule.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdcode/numerics.hpp"

namespace kdcode {

namespace detail {

/// K^D as an exact integer, or nullopt when it exceeds uint64.
inline std::optional<std::uint64_t> exact_power(std::uint64_t base, std::uint64_t exponent) {
    std::uint64_t result = 1;
    for (std::uint64_t i = 0; i < exponent; ++i) {
        if (result > std::numeric_limits<std::uint64_t>::max() / base) return std::nullopt;
        result *= base;
    }
    return result;
}

inline double log_code_space(std::uint64_t k, std::uint64_t d) {
    return static_cast<double>(d) * std::log(static_cast<double>(k));
}

/// True when K^D >= N, decided exactly.
inline bool code_space_covers(std::uint64_t n, std::uint64_t k, std::uint64_t d) {
    const auto space = exact_power(k, d);
    return !space || *space >= n;
}

}  // namespace detail

/// Shape of a code system: N symbols, each a D-sequence over K values.
/// Construction enforces K >= 2, D >= 1, N >= 1. K^D < N is representable
/// (codes must then collide); covers_symbols() reports it.
class KdSpec {
public:
    KdSpec(std::uint64_t cardinality, std::uint64_t code_dims, std::uint64_t symbols)
        : k_(cardinality), d_(code_dims), n_(symbols) {
        if (k_ < 2) throw std::invalid_argument("KdSpec: K must be at least 2");
        if (d_ < 1) throw std::invalid_argument("KdSpec: D must be at least 1");
        if (n_ < 1) throw std::invalid_argument("KdSpec: N must be at least 1");
    }

    /// K^D >= N, so every symbol can get a distinct code.
    bool covers_symbols() const { return detail::code_space_covers(n_, k_, d_); }

    /// Throws unless K^D >= N.
    void require_distinct_codes() const {
        if (!covers_symbols())
            throw std::invalid_argument("code space too small: K^D = " + std::to_string(k_) + "^" +
                                        std::to_string(d_) + " < N = " + std::to_string(n_) +
                                        "; a code system needs K^D >= N (pass allow-collisions to cluster instead)");
    }

    std::size_t cardinality() const { return k_; }
    std::size_t code_dims() const { return d_; }
    std::size_t symbols() const { return n_; }

    /// K^D == N: no slack in the code space.
    bool is_compact() const {
        const auto space = detail::exact_power(k_, d_);
        return space && *space == n_;
    }

    friend bool operator==(const KdSpec&, const KdSpec&) = default;

private:
    std::uint64_t k_;
    std::uint64_t d_;
    std::uint64_t n_;
};

/// Smallest D >= 1 with K^D >= N.
inline std::size_t min_code_dim(std::uint64_t n, std::uint64_t k) {
    if (k < 2) throw std::invalid_argument("min_code_dim: K must be at least 2");
    if (n < 1) throw std::invalid_argument("min_code_dim: N must be at least 1");
    std::size_t d = 1;
    std::uint64_t capacity = k;
    while (capacity < n) {
        ++d;
        if (capacity > std::numeric_limits<std::uint64_t>::max() / k) break;
        capacity *= k;
    }
    return d;
}

struct CollisionEstimate {
    enum class Method { exact_product, exponential_approximation, exceeds_code_space };
    double probability;
    Method method;
};

inline const char* to_string(CollisionEstimate::Method m) {
    switch (m) {
        case CollisionEstimate::Method::exact_product: return "exact_product";
        case CollisionEstimate::Method::exponential_approximation: return "exponential_approximation";
        case CollisionEstimate::Method::exceeds_code_space: return "exceeds_code_space";
    }
    return "unknown";
}

inline constexpr std::uint64_t kExactCollisionLimit = 1'000'000;

/// Probability that N uniform draws from the K^D code space are all distinct.
inline CollisionEstimate collision_free_probability(std::uint64_t n, std::uint64_t k, std::uint64_t d) {
    if (k < 2 || n < 1) throw std::invalid_argument("collision_free_probability: need K >= 2 and N >= 1");
    if (!detail::code_space_covers(n, k, d)) return {0.0, CollisionEstimate::Method::exceeds_code_space};
    const double log_space = detail::log_code_space(k, d);
    if (n <= kExactCollisionLimit) {
        // Σ log(1 - i/M), with i/M formed in log space so huge M stays accurate.
        double log_p = 0.0;
        for (std::uint64_t i = 1; i < n; ++i)
            log_p += std::log1p(-std::exp(std::log(static_cast<double>(i)) - log_space));
        return {std::exp(log_p), CollisionEstimate::Method::exact_product};
    }
    const double nd = static_cast<double>(n);
    const double exponent = std::log(nd) + std::log(nd - 1.0) - std::log(2.0) - log_space;
    return {std::exp(-std::exp(exponent)), CollisionEstimate::Method::exponential_approximation};
}

/// N / K^D. Exactly 1.0 for a compact code.
inline double code_space_utilization(std::uint64_t n, std::uint64_t k, std::uint64_t d) {
    if (k < 2 || n < 1 || d < 1) throw std::invalid_argument("code_space_utilization: invalid K, D or N");
    if (!detail::code_space_covers(n, k, d))
        throw std::invalid_argument("code_space_utilization: N exceeds K^D, not a valid code system");
    if (const auto space = detail::exact_power(k, d); space && *space == n) return 1.0;
    return std::exp(std::log(static_cast<double>(n)) - detail::log_code_space(k, d));
}

/// Learned mapping symbol -> code. Codes are stored flat, N rows of D entries.
class CodeBook {
public:
    explicit CodeBook(KdSpec spec) : spec_(spec), codes_(spec.symbols() * spec.code_dims(), 0) {}
    CodeBook(KdSpec spec, std::vector<std::uint32_t> codes, std::vector<std::string> labels = {})
        : spec_(spec), codes_(std::move(codes)), labels_(std::move(labels)) {
        if (codes_.size() != spec_.symbols() * spec_.code_dims())
            throw std::invalid_argument("CodeBook: code table size does not match N x D");
        for (auto c : codes_)
            if (c >= spec_.cardinality()) throw std::invalid_argument("CodeBook: code component out of range");
        if (!labels_.empty() && labels_.size() != spec_.symbols())
            throw std::invalid_argument("CodeBook: label count does not match N");
    }

    const KdSpec& spec() const { return spec_; }
    std::size_t size() const { return spec_.symbols(); }

    std::span<const std::uint32_t> code(std::size_t symbol) const {
        return {codes_.data() + symbol * spec_.code_dims(), spec_.code_dims()};
    }
    void set_code(std::size_t symbol, std::span<const std::uint32_t> code) {
        if (code.size() != spec_.code_dims()) throw std::invalid_argument("CodeBook: code length must equal D");
        for (std::size_t j = 0; j < code.size(); ++j) {
            if (code[j] >= spec_.cardinality()) throw std::invalid_argument("CodeBook: code component out of range");
            codes_[symbol * spec_.code_dims() + j] = code[j];
        }
    }

    std::span<const std::uint32_t> codes() const { return codes_; }

    bool has_labels() const { return !labels_.empty(); }
    const std::vector<std::string>& labels() const { return labels_; }
    void set_labels(std::vector<std::string> labels) {
        if (!labels.empty() && labels.size() != spec_.symbols())
            throw std::invalid_argument("CodeBook: label count does not match N");
        labels_ = std::move(labels);
    }

    friend bool operator==(const CodeBook&, const CodeBook&) = default;

private:
    KdSpec spec_;
    std::vector<std::uint32_t> codes_;
    std::vector<std::string> labels_;
};

/// "3-1-0-4"
inline std::string render_code(std::span<const std::uint32_t> code) {
    std::string out;
    for (std::size_t j = 0; j < code.size(); ++j) {
        if (j) out += '-';
        out += std::to_string(code[j]);
    }
    return out;
}

/// Relaxed code logits, N x D x K.
class CodeLogits {
public:
    explicit CodeLogits(KdSpec spec)
        : spec_(spec), values_(spec.symbols() * spec.code_dims() * spec.cardinality(), 0.0) {}
    CodeLogits(KdSpec spec, std::vector<double> values) : spec_(spec), values_(std::move(values)) {
        if (values_.size() != spec_.symbols() * spec_.code_dims() * spec_.cardinality())
            throw std::invalid_argument("CodeLogits: value count does not match N x D x K");
        if (!all_finite(values_)) throw std::invalid_argument("CodeLogits: non-finite logit");
    }

    /// i.i.d. Gaussian logits.
    static CodeLogits random(KdSpec spec, Rng& rng, double stddev = 0.01) {
        CodeLogits out(spec);
        rng.fill_normal(out.values_, 0.0, stddev);
        return out;
    }

    const KdSpec& spec() const { return spec_; }

    std::span<double> row(std::size_t symbol, std::size_t dim) {
        return {values_.data() + (symbol * spec_.code_dims() + dim) * spec_.cardinality(), spec_.cardinality()};
    }
    std::span<const double> row(std::size_t symbol, std::size_t dim) const {
        return {values_.data() + (symbol * spec_.code_dims() + dim) * spec_.cardinality(), spec_.cardinality()};
    }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    friend bool operator==(const CodeLogits&, const CodeLogits&) = default;

private:
    KdSpec spec_;
    std::vector<double> values_;
};

struct TemperatureSchedule {
    enum class Mode { scheduled, constant };
    double t0 = 1.0;
    double decay_rate = 1.0;
    Mode mode = Mode::scheduled;
};

/// T0 / (1 + decay_rate * t), or T0 in constant mode.
inline double temperature_at(const TemperatureSchedule& schedule, std::uint64_t t) {
    if (!(schedule.t0 > 0.0)) throw std::invalid_argument("temperature schedule: T0 must be positive");
    if (schedule.decay_rate < 0.0) throw std::invalid_argument("temperature schedule: decay rate must be >= 0");
    if (schedule.mode == TemperatureSchedule::Mode::constant) return schedule.t0;
    return schedule.t0 / (1.0 + schedule.decay_rate * static_cast<double>(t));
}

struct SteOutput {
    Vector hard;  // one-hot at argmax of the logits
    Vector soft;  // tempering softmax
};

/// Forward half of o = stop_gradient(hard - soft) + soft. Downstream consumes
/// `hard`; ste_backward routes the gradient through `soft`.
inline SteOutput ste_forward(std::span<const double> logits_row, double temperature) {
    SteOutput out;
    out.soft = stable_softmax(logits_row, temperature);
    out.hard.assign(logits_row.size(), 0.0);
    out.hard[argmax(logits_row)] = 1.0;
    return out;
}

/// Vector-Jacobian product of the tempering softmax evaluated at `soft`:
/// g_k = soft_k (u_k - Σ soft_k' u_k') / T.
inline Vector ste_backward(std::span<const double> soft, std::span<const double> upstream, double temperature) {
    if (soft.size() != upstream.size()) throw std::invalid_argument("ste_backward: length mismatch");
    if (!(temperature > 0.0)) throw std::invalid_argument("ste_backward: temperature must be positive");
    const double mean = dot(soft, upstream);
    Vector grad(soft.size());
    for (std::size_t k = 0; k < soft.size(); ++k) grad[k] = soft[k] * (upstream[k] - mean) / temperature;
    return grad;
}

inline std::uint32_t extract_code_component(std::span<const double> logits_row) {
    return static_cast<std::uint32_t>(argmax(logits_row));
}

/// Discrete codes: argmax over K per (symbol, dimension), ties to the lowest index.
inline CodeBook extract_codes(const CodeLogits& logits) {
    const auto& spec = logits.spec();
    std::vector<std::uint32_t> codes(spec.symbols() * spec.code_dims());
    for (std::size_t i = 0; i < spec.symbols(); ++i)
        for (std::size_t j = 0; j < spec.code_dims(); ++j)
            codes[i * spec.code_dims() + j] = extract_code_component(logits.row(i, j));
    return CodeBook(spec, std::move(codes));
}

}  // namespace kdcode
