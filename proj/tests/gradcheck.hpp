#pragma once

// Finite-difference oracles for the hand-derived backward passes. Shared by
// the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "kdcode/codec.hpp"
#include "kdcode/model.hpp"
#include "kdcode/numerics.hpp"
#include "kdcode/trainer.hpp"

namespace kdcode::oracle {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kFdStep = 1e-5;

struct GradCheckResult {
    double worst = 0.0;
    std::size_t checked = 0;
    std::string worst_where;

    void record(double err, const std::string& where) {
        ++checked;
        if (err > worst) {
            worst = err;
            worst_where = where;
        }
    }
    void merge(const GradCheckResult& o) {
        checked += o.checked;
        if (o.worst > worst) {
            worst = o.worst;
            worst_where = o.worst_where;
        }
    }
    bool ok() const { return worst <= kGradTolerance; }
};

/// Denominator floor for entries at the roundoff scale of a central
/// difference of f at step h: the oracle itself is only good to ε·|f|/h.
inline double noise_floor(double f) {
    const double noise = std::numeric_limits<double>::epsilon() * std::max(std::abs(f), 1.0) / kFdStep;
    return std::max(1e-6, noise / kGradTolerance);
}

inline GradCheckResult compare(const Vector& analytic, const Vector& numeric, double f, const std::string& tag) {
    GradCheckResult r;
    const double floor = noise_floor(f);
    for (std::size_t i = 0; i < analytic.size(); ++i)
        r.record(relative_error(analytic[i], numeric[i], floor), tag + "[" + std::to_string(i) + "]");
    return r;
}

inline void randomize(KdModel& model, Rng& rng, double scale) {
    for_each_array(model, [&](std::span<double> a) { rng.fill_normal(a, 0.0, scale); });
}

/// Softmax-path (upstream · softmax(x / T)) checked against ste_backward.
inline GradCheckResult check_softmax(Rng& rng) {
    const std::size_t k = 2 + rng.below(9);
    Vector logits(k), upstream(k);
    for (double& x : logits) x = rng.normal(0.0, 1.5);
    for (double& x : upstream) x = rng.normal(0.0, 1.0);
    const double t = 0.2 + 2.0 * rng.uniform();
    const auto analytic = ste_backward(stable_softmax(logits, t), upstream, t);
    const auto f = [&](std::span<const double> x) { return dot(upstream, stable_softmax(x, t)); };
    return compare(analytic, finite_diff_gradient(f, logits, kFdStep), f(logits), "softmax");
}

/// Composer-only check: d(uᵀ f(X; θ)) w.r.t. X and every θ entry.
inline GradCheckResult check_composer(ComposerVariant variant, std::size_t d, std::size_t width, std::size_t out,
                                      Rng& rng) {
    ComposerParams params = zero_composer(variant, width, out);
    for_each_array(params, [&](std::span<double> a) { rng.fill_normal(a, 0.0, 0.5); });
    Matrix x(d, width);
    rng.fill_normal(x.values(), 0.0, 1.0);
    Vector upstream(out);
    rng.fill_normal(upstream, 0.0, 1.0);

    const auto fwd = compose(x, params);
    const auto grads = composer_backward(x, params, fwd.tape, upstream);

    GradCheckResult result;
    const auto fx = [&](std::span<const double> flat) {
        Matrix xs(d, width, Vector(flat.begin(), flat.end()));
        return dot(upstream, compose(xs, params).output);
    };
    result.merge(compare(Vector(grads.code_vectors.values().begin(), grads.code_vectors.values().end()),
                         finite_diff_gradient(fx, x.values(), kFdStep), fx(x.values()), "inputs"));

    Vector flat_params, flat_grads;
    for_each_array(params, [&](std::span<const double> a) { flat_params.insert(flat_params.end(), a.begin(), a.end()); });
    for_each_array(grads.params, [&](std::span<const double> a) { flat_grads.insert(flat_grads.end(), a.begin(), a.end()); });
    const auto fp = [&](std::span<const double> flat) {
        ComposerParams p = params;
        std::size_t at = 0;
        for_each_array(p, [&](std::span<double> a) {
            std::copy_n(flat.begin() + at, a.size(), a.begin());
            at += a.size();
        });
        return dot(upstream, compose(x, p).output);
    };
    result.merge(compare(flat_grads, finite_diff_gradient(fp, flat_params, kFdStep), fp(flat_params), "params"));
    return result;
}

/// Full pipeline: Σ_i ‖v_i − f(o_i)‖² differentiated w.r.t. every model
/// parameter and every logit. For the straight-through path the oracle
/// freezes (hard − soft) at the evaluation point, which is exactly what
/// stop_gradient means, and differentiates the remaining soft term.
inline GradCheckResult check_pipeline(ComposerVariant variant, CodeMode mode, std::size_t n, std::size_t k,
                                      std::size_t d, std::size_t width, std::size_t out, Rng& rng) {
    const KdSpec spec(k, d, n);
    TrainState state{CodeLogits::random(spec, rng, 1.0), KdModel::zeros(variant, k, d, width, out)};
    randomize(state.model, rng, 0.5);
    Matrix targets(n, out);
    rng.fill_normal(targets.values(), 0.0, 1.0);
    const double t = 0.3 + 1.5 * rng.uniform();

    KdModel grads = KdModel::zeros(variant, k, d, width, out);
    Vector logit_grads(n * d * k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto sg = symbol_gradient(state, targets.row(i), i, mode, t, grads);
        std::copy(sg.logit_grads.values().begin(), sg.logit_grads.values().end(),
                  logit_grads.begin() + static_cast<std::ptrdiff_t>(i * d * k));
    }

    // Frozen straight-through offsets (hard − soft) per symbol.
    std::vector<Matrix> offsets(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Matrix soft = soft_weights(state.logits, i, t);
        offsets[i] = Matrix(d, k);
        if (mode == CodeMode::ste)
            for (std::size_t j = 0; j < d; ++j) {
                offsets[i](j, argmax(state.logits.row(i, j))) += 1.0;
                for (std::size_t c = 0; c < k; ++c) offsets[i](j, c) -= soft(j, c);
            }
    }
    const auto loss = [&](const KdModel& model, const CodeLogits& logits) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Matrix w = soft_weights(logits, i, t);
            for (std::size_t e = 0; e < w.size(); ++e) w.values()[e] += offsets[i].values()[e];
            total += squared_distance(targets.row(i), model_forward(model, w).output());
        }
        return total;
    };

    GradCheckResult result;
    const Vector params = flatten(state.model);
    const auto fp = [&](std::span<const double> flat) {
        KdModel m = state.model;
        unflatten(m, flat);
        return loss(m, state.logits);
    };
    result.merge(compare(flatten(grads), finite_diff_gradient(fp, params, kFdStep), fp(params), "params"));

    const auto fl = [&](std::span<const double> flat) {
        return loss(state.model, CodeLogits(spec, Vector(flat.begin(), flat.end())));
    };
    const Vector logits(state.logits.values().begin(), state.logits.values().end());
    result.merge(compare(logit_grads, finite_diff_gradient(fl, logits, kFdStep), fl(logits), "logits"));
    return result;
}

}  // namespace kdcode::oracle
