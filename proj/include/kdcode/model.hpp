#pragma once

// Code embedding tables plus a composer: the full map from per-dimension
// code weights (one-hot or relaxed) to a reconstructed symbol embedding.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "kdcode/codec.hpp"
#include "kdcode/composer.hpp"
#include "kdcode/numerics.hpp"

namespace kdcode {

struct KdModel {
    CodeEmbeddingTables tables;
    ComposerParams composer;

    std::size_t code_dims() const { return tables.code_dims(); }
    std::size_t cardinality() const { return tables.cardinality(); }
    std::size_t code_width() const { return tables.width(); }
    std::size_t output_width() const { return kdcode::output_width(composer); }
    ComposerVariant variant() const { return variant_of(composer); }

    void validate() const {
        tables.validate();
        if (tables.code_dims() == 0) throw std::invalid_argument("KdModel: no code embedding tables");
        if (kdcode::code_width(composer) != tables.width())
            throw std::invalid_argument("KdModel: composer width does not match code embedding width");
    }

    static KdModel zeros(ComposerVariant variant, std::size_t k, std::size_t d, std::size_t code_width,
                         std::size_t out_width) {
        return {CodeEmbeddingTables::zeros(d, k, code_width), zero_composer(variant, code_width, out_width)};
    }

    friend bool operator==(const KdModel&, const KdModel&) = default;
};

template <class Model, class Fn>
void for_each_array(Model& model, Fn&& fn)
    requires std::same_as<std::remove_const_t<Model>, KdModel>
{
    for (auto& t : model.tables.tables) fn(t.values());
    for_each_array(model.composer, fn);
}

inline std::size_t parameter_count(const KdModel& model) {
    std::size_t n = 0;
    for_each_array(model, [&](std::span<const double> a) { n += a.size(); });
    return n;
}

inline Vector flatten(const KdModel& model) {
    Vector out;
    for_each_array(model, [&](std::span<const double> a) { out.insert(out.end(), a.begin(), a.end()); });
    return out;
}

inline void unflatten(KdModel& model, std::span<const double> flat) {
    std::size_t at = 0;
    for_each_array(model, [&](std::span<double> a) {
        if (at + a.size() > flat.size()) throw std::invalid_argument("unflatten: too few values");
        std::copy_n(flat.begin() + at, a.size(), a.begin());
        at += a.size();
    });
    if (at != flat.size()) throw std::invalid_argument("unflatten: too many values");
}

/// model -= learning_rate * grads, array by array.
inline void apply_sgd(KdModel& model, const KdModel& grads, double learning_rate) {
    std::vector<std::span<const double>> g;
    for_each_array(grads, [&](std::span<const double> a) { g.push_back(a); });
    std::size_t at = 0;
    for_each_array(model, [&](std::span<double> a) { sgd_update(a, g.at(at++), learning_rate); });
}

/// Code tables ~ N(0, 1/√d'), recurrence ~ N(0, 1/√d'), biases 0, projection ~ N(0, 1/√d).
inline KdModel init_model(ComposerVariant variant, std::size_t k, std::size_t d, std::size_t code_width,
                          std::size_t out_width, Rng& rng) {
    KdModel model = KdModel::zeros(variant, k, d, code_width, out_width);
    const double table_std = 1.0 / std::sqrt(static_cast<double>(code_width));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(out_width));
    for (auto& t : model.tables.tables) rng.fill_normal(t.values(), 0.0, table_std);
    std::visit(
        [&](auto& p) {
            using P = std::remove_cvref_t<decltype(p)>;
            if constexpr (std::is_same_v<P, LstmComposerParams>)
                for (auto& u : p.recurrence) rng.fill_normal(u.values(), 0.0, table_std);
            rng.fill_normal(p.projection.values(), 0.0, proj_std);
        },
        model.composer);
    return model;
}

struct ModelForward {
    Matrix code_vectors;  // D x d'
    ComposerForward composed;

    std::span<const double> output() const { return composed.output; }
};

/// code_weights is D x K: row j is the one-hot or soft vector o^j.
inline ModelForward model_forward(const KdModel& model, const Matrix& code_weights) {
    if (code_weights.rows() != model.code_dims() || code_weights.cols() != model.cardinality())
        throw std::invalid_argument("model_forward: code weights must be D x K");
    ModelForward fwd{Matrix(model.code_dims(), model.code_width()), {}};
    for (std::size_t j = 0; j < model.code_dims(); ++j) {
        const Vector x = embed_code_dimension(code_weights.row(j), model.tables.tables[j]);
        std::copy(x.begin(), x.end(), fwd.code_vectors.row(j).begin());
    }
    fwd.composed = compose(fwd.code_vectors, model.composer);
    return fwd;
}

inline Matrix one_hot_weights(std::span<const std::uint32_t> code, std::size_t k) {
    Matrix w(code.size(), k);
    for (std::size_t j = 0; j < code.size(); ++j) w(j, code[j]) = 1.0;
    return w;
}

inline Vector reconstruct(const KdModel& model, std::span<const std::uint32_t> code) {
    return model_forward(model, one_hot_weights(code, model.cardinality())).composed.output;
}

/// Reconstructs every symbol of a codebook, N x d.
inline Matrix reconstruct_all(const KdModel& model, const CodeBook& codebook) {
    if (codebook.spec().code_dims() != model.code_dims() || codebook.spec().cardinality() != model.cardinality())
        throw std::invalid_argument("reconstruct_all: codebook K/D do not match the model");
    Matrix out(codebook.size(), model.output_width());
    for (std::size_t i = 0; i < codebook.size(); ++i) {
        const Vector v = reconstruct(model, codebook.code(i));
        std::copy(v.begin(), v.end(), out.row(i).begin());
    }
    return out;
}

/// Accumulates into `grads` the gradient of (upstreamᵀ v) and returns the
/// gradient with respect to the code weights (D x K). When
/// `want_weight_grads` is false the returned matrix is empty.
inline Matrix model_backward(const KdModel& model, const Matrix& code_weights, const ModelForward& fwd,
                             std::span<const double> upstream, KdModel& grads, bool want_weight_grads = true) {
    const auto cg = composer_backward(fwd.code_vectors, model.composer, fwd.composed.tape, upstream);
    for (std::size_t j = 0; j < model.code_dims(); ++j)
        add_outer(grads.tables.tables[j], code_weights.row(j), cg.code_vectors.row(j));

    std::visit(
        [&](const auto& delta) {
            using P = std::remove_cvref_t<decltype(delta)>;
            auto& acc = std::get<P>(grads.composer);
            if constexpr (std::is_same_v<P, LstmComposerParams>) {
                for (std::size_t g = 0; g < kGateCount; ++g) {
                    add_scaled(acc.recurrence[g].values(), delta.recurrence[g].values());
                    add_scaled(acc.bias[g], delta.bias[g]);
                }
            }
            add_scaled(acc.projection.values(), delta.projection.values());
        },
        cg.params);

    if (!want_weight_grads) return {};
    Matrix weight_grads(model.code_dims(), model.cardinality());
    for (std::size_t j = 0; j < model.code_dims(); ++j) {
        const Vector g = right_multiply(model.tables.tables[j], cg.code_vectors.row(j));
        std::copy(g.begin(), g.end(), weight_grads.row(j).begin());
    }
    return weight_grads;
}

}  // namespace kdcode
