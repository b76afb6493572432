#pragma once

// Composition functions f: (x_1, ..., x_D) -> symbol embedding, where x_j is
// the code embedding for code dimension j. Both variants end with a
// projection v = sᵀ H onto the target width.
//
// The recurrent variant follows the gate equations
//   f_j = σ(x_j + U_f h_{j-1} + b_f)
//   i_j = σ(x_j + U_i h_{j-1} + b_i)
//   o_j = σ(x_j + U_o h_{j-1} + b_o)
//   m_j = f_j ∘ m_{j-1} + i_j ∘ tanh(x_j + U_m h_{j-1} + b_m)
//   h_j = o_j ∘ tanh(m_j)
// with s = Σ_j h_j. There is no input weight matrix: x_j enters every gate.

#include <array>
#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <variant>
#include <vector>

#include "kdcode/numerics.hpp"

namespace kdcode {

/// W^1..W^D, each K x d'.
struct CodeEmbeddingTables {
    std::vector<Matrix> tables;

    std::size_t code_dims() const { return tables.size(); }
    std::size_t cardinality() const { return tables.empty() ? 0 : tables.front().rows(); }
    std::size_t width() const { return tables.empty() ? 0 : tables.front().cols(); }

    static CodeEmbeddingTables zeros(std::size_t d, std::size_t k, std::size_t width) {
        return {std::vector<Matrix>(d, Matrix(k, width))};
    }

    void validate() const {
        for (const auto& t : tables)
            if (!t.same_shape(tables.front()))
                throw std::invalid_argument("CodeEmbeddingTables: all tables must be K x d'");
    }

    friend bool operator==(const CodeEmbeddingTables&, const CodeEmbeddingTables&) = default;
};

struct LinearComposerParams {
    Matrix projection;  // d' x d

    std::size_t code_width() const { return projection.rows(); }
    std::size_t output_width() const { return projection.cols(); }

    friend bool operator==(const LinearComposerParams&, const LinearComposerParams&) = default;
};

enum Gate : std::size_t { kForget = 0, kInput = 1, kOutput = 2, kCell = 3 };
inline constexpr std::size_t kGateCount = 4;

struct LstmComposerParams {
    std::array<Matrix, kGateCount> recurrence;  // d' x d' each
    std::array<Vector, kGateCount> bias;        // d' each
    Matrix projection;                          // d' x d

    std::size_t code_width() const { return projection.rows(); }
    std::size_t output_width() const { return projection.cols(); }

    static LstmComposerParams zeros(std::size_t width, std::size_t out_width) {
        LstmComposerParams p;
        for (std::size_t g = 0; g < kGateCount; ++g) {
            p.recurrence[g] = Matrix(width, width);
            p.bias[g] = Vector(width, 0.0);
        }
        p.projection = Matrix(width, out_width);
        return p;
    }

    friend bool operator==(const LstmComposerParams&, const LstmComposerParams&) = default;
};

enum class ComposerVariant { linear, lstm };

using ComposerParams = std::variant<LinearComposerParams, LstmComposerParams>;

inline ComposerVariant variant_of(const ComposerParams& p) {
    return std::holds_alternative<LinearComposerParams>(p) ? ComposerVariant::linear : ComposerVariant::lstm;
}

inline const char* to_string(ComposerVariant v) { return v == ComposerVariant::linear ? "linear" : "lstm"; }

inline std::size_t code_width(const ComposerParams& p) {
    return std::visit([](const auto& q) { return q.code_width(); }, p);
}
inline std::size_t output_width(const ComposerParams& p) {
    return std::visit([](const auto& q) { return q.output_width(); }, p);
}

inline ComposerParams zero_composer(ComposerVariant variant, std::size_t width, std::size_t out_width) {
    if (variant == ComposerVariant::linear) return LinearComposerParams{Matrix(width, out_width)};
    return LstmComposerParams::zeros(width, out_width);
}

/// Visits every parameter array in a fixed order. The order defines the
/// flattened layout used by SGD, gradient checks and checkpoints.
template <class Params, class Fn>
void for_each_array(Params& params, Fn&& fn)
    requires std::same_as<std::remove_const_t<Params>, ComposerParams>
{
    std::visit(
        [&](auto& p) {
            using P = std::remove_cvref_t<decltype(p)>;
            if constexpr (std::is_same_v<P, LstmComposerParams>) {
                for (std::size_t g = 0; g < kGateCount; ++g) fn(p.recurrence[g].values());
                for (std::size_t g = 0; g < kGateCount; ++g) fn(std::span(p.bias[g]));
            }
            fn(p.projection.values());
        },
        params);
}

/// (o)ᵀ W: a row lookup for one-hot o, a convex mix for a soft o.
inline Vector embed_code_dimension(std::span<const double> weights, const Matrix& table) {
    if (weights.size() != table.rows())
        throw std::invalid_argument("embed_code_dimension: weight vector length must equal K");
    return left_multiply(weights, table);
}

namespace detail {

inline void require_width(const Matrix& code_vectors, std::size_t width) {
    if (code_vectors.rows() == 0) throw std::invalid_argument("composer: empty code sequence");
    if (code_vectors.cols() != width)
        throw std::invalid_argument("composer: code vector width does not match the composer width");
}

inline Vector sum_rows(const Matrix& m) {
    Vector s(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) s[c] += row[c];
    }
    return s;
}

}  // namespace detail

/// v = (Σ_j x_j)ᵀ H. code_vectors is D x d'.
inline Vector compose_linear(const Matrix& code_vectors, const LinearComposerParams& params) {
    detail::require_width(code_vectors, params.code_width());
    return left_multiply(detail::sum_rows(code_vectors), params.projection);
}

struct LstmStepRecord {
    Vector h_prev, m_prev;
    std::array<Vector, kGateCount> gate;  // f, i, o activations and tanh candidate
    Vector m, tanh_m, h;
};

struct LstmTape {
    std::vector<LstmStepRecord> steps;
    Vector hidden_sum;
};

struct LstmStateOut {
    Vector h, m;
};

inline LstmStepRecord lstm_step_recorded(std::span<const double> x, std::span<const double> h_prev,
                                         std::span<const double> m_prev, const LstmComposerParams& params) {
    const std::size_t w = params.code_width();
    if (x.size() != w || h_prev.size() != w || m_prev.size() != w)
        throw std::invalid_argument("lstm_step: input widths must equal d'");
    LstmStepRecord rec;
    rec.h_prev.assign(h_prev.begin(), h_prev.end());
    rec.m_prev.assign(m_prev.begin(), m_prev.end());
    for (std::size_t g = 0; g < kGateCount; ++g) {
        Vector pre = right_multiply(params.recurrence[g], h_prev);
        for (std::size_t r = 0; r < w; ++r) pre[r] += x[r] + params.bias[g][r];
        for (double& a : pre) {
            a = (g == kCell) ? std::tanh(a) : sigmoid(a);
            const bool in_range = g == kCell ? (a >= -1.0 && a <= 1.0) : (a >= 0.0 && a <= 1.0);
            if (!in_range) throw std::domain_error("lstm_step: gate activation out of range (non-finite input?)");
        }
        rec.gate[g] = std::move(pre);
    }
    rec.m.resize(w);
    rec.tanh_m.resize(w);
    rec.h.resize(w);
    for (std::size_t r = 0; r < w; ++r) {
        rec.m[r] = rec.gate[kForget][r] * m_prev[r] + rec.gate[kInput][r] * rec.gate[kCell][r];
        rec.tanh_m[r] = std::tanh(rec.m[r]);
        rec.h[r] = rec.gate[kOutput][r] * rec.tanh_m[r];
    }
    return rec;
}

inline LstmStateOut lstm_step(std::span<const double> x, std::span<const double> h_prev,
                              std::span<const double> m_prev, const LstmComposerParams& params) {
    auto rec = lstm_step_recorded(x, h_prev, m_prev, params);
    return {std::move(rec.h), std::move(rec.m)};
}

struct LstmForward {
    Vector output;
    LstmTape tape;
};

/// Runs the recurrence over j = 1..D from zero state and projects Σ h_j.
inline LstmForward compose_lstm_recorded(const Matrix& code_vectors, const LstmComposerParams& params) {
    detail::require_width(code_vectors, params.code_width());
    const std::size_t w = params.code_width();
    LstmForward out;
    out.tape.hidden_sum.assign(w, 0.0);
    Vector h(w, 0.0), m(w, 0.0);
    for (std::size_t j = 0; j < code_vectors.rows(); ++j) {
        auto rec = lstm_step_recorded(code_vectors.row(j), h, m, params);
        h = rec.h;
        m = rec.m;
        for (std::size_t r = 0; r < w; ++r) out.tape.hidden_sum[r] += h[r];
        out.tape.steps.push_back(std::move(rec));
    }
    out.output = left_multiply(out.tape.hidden_sum, params.projection);
    return out;
}

inline Vector compose_lstm(const Matrix& code_vectors, const LstmComposerParams& params) {
    return compose_lstm_recorded(code_vectors, params).output;
}

/// Forward pass of either variant, keeping whatever the backward pass needs.
struct ComposerForward {
    Vector output;
    std::optional<LstmTape> tape;  // set for the recurrent variant
};

inline ComposerForward compose(const Matrix& code_vectors, const ComposerParams& params) {
    if (const auto* lin = std::get_if<LinearComposerParams>(&params)) return {compose_linear(code_vectors, *lin), {}};
    auto fwd = compose_lstm_recorded(code_vectors, std::get<LstmComposerParams>(params));
    return {std::move(fwd.output), std::move(fwd.tape)};
}

struct ComposerGradients {
    Matrix code_vectors;  // D x d'
    ComposerParams params;
};

/// Gradients of (upstreamᵀ v) with respect to the code vectors and every
/// composer parameter.
inline ComposerGradients composer_backward(const Matrix& code_vectors, const ComposerParams& params,
                                           const std::optional<LstmTape>& tape, std::span<const double> upstream) {
    const std::size_t w = code_width(params);
    detail::require_width(code_vectors, w);
    if (upstream.size() != output_width(params))
        throw std::invalid_argument("composer_backward: upstream gradient width must equal d");
    ComposerGradients grads{Matrix(code_vectors.rows(), w), zero_composer(variant_of(params), w, output_width(params))};

    if (const auto* lin = std::get_if<LinearComposerParams>(&params)) {
        auto& g = std::get<LinearComposerParams>(grads.params);
        add_outer(g.projection, detail::sum_rows(code_vectors), upstream);
        const Vector gx = right_multiply(lin->projection, upstream);
        for (std::size_t j = 0; j < code_vectors.rows(); ++j)
            std::copy(gx.begin(), gx.end(), grads.code_vectors.row(j).begin());
        return grads;
    }

    const auto& p = std::get<LstmComposerParams>(params);
    if (!tape || tape->steps.size() != code_vectors.rows())
        throw std::invalid_argument("composer_backward: recurrent variant needs the forward tape");
    auto& g = std::get<LstmComposerParams>(grads.params);

    add_outer(g.projection, tape->hidden_sum, upstream);
    const Vector g_sum = right_multiply(p.projection, upstream);

    Vector dh_next(w, 0.0), dm_next(w, 0.0);
    std::array<Vector, kGateCount> da;
    for (auto& v : da) v.assign(w, 0.0);
    for (std::size_t step = code_vectors.rows(); step-- > 0;) {
        const auto& rec = tape->steps[step];
        for (std::size_t r = 0; r < w; ++r) {
            const double dh = g_sum[r] + dh_next[r];
            const double f = rec.gate[kForget][r], in = rec.gate[kInput][r], o = rec.gate[kOutput][r];
            const double c = rec.gate[kCell][r];
            const double dm = dm_next[r] + dh * o * (1.0 - rec.tanh_m[r] * rec.tanh_m[r]);
            da[kOutput][r] = dh * rec.tanh_m[r] * o * (1.0 - o);
            da[kForget][r] = dm * rec.m_prev[r] * f * (1.0 - f);
            da[kInput][r] = dm * c * in * (1.0 - in);
            da[kCell][r] = dm * in * (1.0 - c * c);
            dm_next[r] = dm * f;
        }
        auto gx = grads.code_vectors.row(step);
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t gate = 0; gate < kGateCount; ++gate) {
            add_outer(g.recurrence[gate], da[gate], rec.h_prev);
            for (std::size_t r = 0; r < w; ++r) {
                g.bias[gate][r] += da[gate][r];
                gx[r] += da[gate][r];
            }
            const Vector back = left_multiply(da[gate], p.recurrence[gate]);
            for (std::size_t r = 0; r < w; ++r) dh_next[r] += back[r];
        }
    }
    return grads;
}

}  // namespace kdcode
