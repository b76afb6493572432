#pragma once

// Code learning by SGD on the squared reconstruction loss
//   Σ_i ‖v_i − f(W^1 o^1_i, ..., W^D o^D_i; θ)‖²
// where o^j_i is the straight-through one-hot code (forward) backed by the
// tempering softmax of the code logits (backward), and the follow-up phase
// that re-learns the code embeddings with the codes held fixed.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdcode/codec.hpp"
#include "kdcode/model.hpp"
#include "kdcode/numerics.hpp"

namespace kdcode {

enum class CodeMode {
    ste,     // hard one-hot forward, softmax gradient backward
    soft,    // softmax output used directly as a continuous code
    random,  // frozen uniformly random codes; logits untouched
};

inline const char* to_string(CodeMode m) {
    switch (m) {
        case CodeMode::ste: return "ste";
        case CodeMode::soft: return "soft";
        case CodeMode::random: return "random";
    }
    return "unknown";
}

struct TrainConfig {
    double learning_rate = 0.01;
    std::size_t epochs = 50;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    TemperatureSchedule schedule{};
    ComposerVariant composer = ComposerVariant::linear;
    CodeMode code_mode = CodeMode::ste;
    std::size_t code_width = 0;  // d'; 0 means "same as the target width"
    bool shuffle = true;
    double logit_init_std = 0.01;
    double logit_lr_scale = 1.0;    // logits step with learning_rate * logit_lr_scale
    bool allow_collisions = false;  // permit K^D < N (codes then act as cluster ids)

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("TrainConfig: learning rate must be finite and non-negative");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be at least 1");
        if (!(schedule.t0 > 0.0)) throw std::invalid_argument("TrainConfig: T0 must be positive");
        if (schedule.decay_rate < 0.0) throw std::invalid_argument("TrainConfig: decay rate must be non-negative");
    }

    std::size_t resolved_code_width(std::size_t target_width) const {
        return code_width == 0 ? target_width : code_width;
    }
};

/// Raised when the loss turns non-finite or explodes.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, std::size_t symbol, double temperature)
        : std::runtime_error(what), symbol_(symbol), temperature_(temperature) {}
    std::size_t symbol() const { return symbol_; }
    double temperature() const { return temperature_; }

private:
    std::size_t symbol_;
    double temperature_;
};

inline constexpr double kDivergenceFactor = 1e6;

/// Independent random streams for the pieces of a run, so that changing the
/// code mode does not change the model initialization.
namespace streams {
inline Rng model(std::uint64_t seed) { return Rng(Rng(seed ^ 0x6d6f64656cULL).next_u64()); }
inline Rng codes(std::uint64_t seed) { return Rng(Rng(seed ^ 0x636f646573ULL).next_u64()); }
inline Rng order(std::uint64_t seed) { return Rng(Rng(seed ^ 0x6f72646572ULL).next_u64()); }
}  // namespace streams

namespace detail {

inline void require_targets(const Matrix& targets, std::size_t n, const KdModel& model) {
    if (targets.rows() != n) throw std::invalid_argument("trainer: target count does not match N");
    if (targets.cols() != model.output_width())
        throw std::invalid_argument("trainer: target width does not match the composer output width");
}

inline double residual(std::span<const double> out, std::span<const double> target, Vector& r) {
    r.resize(out.size());
    double loss = 0.0;
    for (std::size_t c = 0; c < out.size(); ++c) {
        r[c] = out[c] - target[c];
        loss += r[c] * r[c];
    }
    return loss;
}

}  // namespace detail

/// Σ_i ‖v_i − f(code_i)‖² with hard codes.
inline double reconstruction_loss(const Matrix& targets, const CodeBook& codebook, const KdModel& model) {
    detail::require_targets(targets, codebook.size(), model);
    double total = 0.0;
    for (std::size_t i = 0; i < codebook.size(); ++i)
        total += squared_distance(targets.row(i), reconstruct(model, codebook.code(i)));
    return total;
}

/// Softmax weights of the logits of one symbol, D x K.
inline Matrix soft_weights(const CodeLogits& logits, std::size_t symbol, double temperature) {
    const auto& spec = logits.spec();
    Matrix w(spec.code_dims(), spec.cardinality());
    for (std::size_t j = 0; j < spec.code_dims(); ++j) {
        const Vector s = stable_softmax(logits.row(symbol, j), temperature);
        std::copy(s.begin(), s.end(), w.row(j).begin());
    }
    return w;
}

/// Σ_i ‖v_i − f(softmax(ô_i / T))‖² with continuous codes.
inline double relaxed_reconstruction_loss(const Matrix& targets, const CodeLogits& logits, double temperature,
                                          const KdModel& model) {
    detail::require_targets(targets, logits.spec().symbols(), model);
    double total = 0.0;
    for (std::size_t i = 0; i < logits.spec().symbols(); ++i)
        total += squared_distance(targets.row(i),
                                  model_forward(model, soft_weights(logits, i, temperature)).output());
    return total;
}

struct TrainState {
    CodeLogits logits;
    KdModel model;
};

struct TrainReport {
    std::vector<double> loss;           // mean per-symbol training loss along the mode's forward path
    std::vector<double> temperature;
    std::vector<double> codes_changed;  // fraction of symbols whose code changed during the epoch
    std::vector<double> hard_loss;      // mean per-symbol loss with extracted codes at epoch end
    double initial_hard_loss = 0.0;
    CodeBook codebook;
    TrainState state;
};

inline bool is_exact_one_hot(std::span<const double> v) {
    std::size_t ones = 0;
    for (double x : v) {
        if (x == 1.0) ++ones;
        else if (x != 0.0) return false;
    }
    return ones == 1;
}

/// Code weights fed forward for one symbol: one-hot codes for ste/random,
/// the softmax itself for soft.
inline Matrix forward_code_weights(const CodeLogits& logits, std::size_t symbol, CodeMode mode, const Matrix& soft) {
    if (mode == CodeMode::soft) return soft;
    const auto& spec = logits.spec();
    Matrix weights(spec.code_dims(), spec.cardinality());
    for (std::size_t j = 0; j < spec.code_dims(); ++j) {
        weights(j, argmax(logits.row(symbol, j))) = 1.0;
        if (!is_exact_one_hot(weights.row(j)))
            throw std::logic_error("straight-through forward must consume one-hot codes");
    }
    return weights;
}

struct SymbolGradient {
    double loss = 0.0;
    Matrix logit_grads;  // D x K; empty in random mode
};

/// Loss ‖v_i − f(o_i)‖² of one symbol. Adds its parameter gradient into
/// `grads` and returns the logit gradient routed through the softmax.
inline SymbolGradient symbol_gradient(const TrainState& state, std::span<const double> target, std::size_t symbol,
                                      CodeMode mode, double temperature, KdModel& grads) {
    const Matrix soft = soft_weights(state.logits, symbol, temperature);
    const Matrix weights = forward_code_weights(state.logits, symbol, mode, soft);
    const auto fwd = model_forward(state.model, weights);
    Vector r;
    SymbolGradient out;
    out.loss = detail::residual(fwd.output(), target, r);
    for (double& g : r) g *= 2.0;
    const bool train_logits = mode != CodeMode::random;
    const Matrix weight_grads = model_backward(state.model, weights, fwd, r, grads, train_logits);
    if (!train_logits) return out;
    out.logit_grads = Matrix(soft.rows(), soft.cols());
    for (std::size_t j = 0; j < soft.rows(); ++j) {
        const Vector g = ste_backward(soft.row(j), weight_grads.row(j), temperature);
        std::copy(g.begin(), g.end(), out.logit_grads.row(j).begin());
    }
    return out;
}

/// One pass over all symbols at a fixed temperature. Returns the mean
/// per-symbol loss measured before each symbol's update.
inline double train_epoch(TrainState& state, const Matrix& targets, const TrainConfig& config, double temperature,
                          Rng& order_rng, double divergence_reference = 0.0) {
    const auto& spec = state.logits.spec();
    const std::size_t n = spec.symbols();
    detail::require_targets(targets, n, state.model);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (config.shuffle) order_rng.shuffle(order);

    KdModel grads = KdModel::zeros(state.model.variant(), spec.cardinality(), spec.code_dims(),
                                   state.model.code_width(), state.model.output_width());
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
        const std::size_t stop = std::min(n, start + config.batch_size);
        const double step = config.learning_rate / static_cast<double>(stop - start);
        for_each_array(grads, [](std::span<double> a) { std::fill(a.begin(), a.end(), 0.0); });

        for (std::size_t b = start; b < stop; ++b) {
            const std::size_t i = order[b];
            const auto sg = symbol_gradient(state, targets.row(i), i, config.code_mode, temperature, grads);
            if (!std::isfinite(sg.loss)) {
                std::ostringstream msg;
                msg << "training diverged: non-finite loss at symbol " << i << ", temperature " << temperature;
                throw TrainingDiverged(msg.str(), i, temperature);
            }
            total += sg.loss;
            // Each symbol's logits only feed its own loss, so they can be
            // stepped immediately without changing the batch semantics.
            if (!sg.logit_grads.empty())
                for (std::size_t j = 0; j < spec.code_dims(); ++j)
                    sgd_update(state.logits.row(i, j), sg.logit_grads.row(j), step * config.logit_lr_scale);
        }
        apply_sgd(state.model, grads, step);
    }
    const double mean = total / static_cast<double>(n);
    if (divergence_reference > 0.0 && mean > kDivergenceFactor * divergence_reference) {
        std::ostringstream msg;
        msg << "training diverged: epoch loss " << mean << " exceeds " << kDivergenceFactor
            << "x the initial loss " << divergence_reference << " at temperature " << temperature;
        throw TrainingDiverged(msg.str(), n, temperature);
    }
    return mean;
}

inline double changed_fraction(const CodeBook& before, const CodeBook& after) {
    std::size_t changed = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto a = before.code(i), b = after.code(i);
        if (!std::equal(a.begin(), a.end(), b.begin())) ++changed;
    }
    return static_cast<double>(changed) / static_cast<double>(before.size());
}

inline CodeBook random_codebook(const KdSpec& spec, Rng& rng) {
    std::vector<std::uint32_t> codes(spec.symbols() * spec.code_dims());
    for (auto& c : codes) c = static_cast<std::uint32_t>(rng.below(spec.cardinality()));
    return CodeBook(spec, std::move(codes));
}

/// Fresh logits and model for a run.
inline TrainState initial_state(const Matrix& targets, const KdSpec& spec, const TrainConfig& config) {
    Rng model_rng = streams::model(config.seed);
    Rng code_rng = streams::codes(config.seed);
    KdModel model = init_model(config.composer, spec.cardinality(), spec.code_dims(),
                               config.resolved_code_width(targets.cols()), targets.cols(), model_rng);
    if (config.code_mode != CodeMode::random)
        return {CodeLogits::random(spec, code_rng, config.logit_init_std), std::move(model)};
    // Random codes live in the logits as one-hot rows so extraction recovers them.
    CodeLogits logits(spec);
    const CodeBook codes = random_codebook(spec, code_rng);
    for (std::size_t i = 0; i < spec.symbols(); ++i)
        for (std::size_t j = 0; j < spec.code_dims(); ++j) logits.row(i, j)[codes.code(i)[j]] = 1.0;
    return {std::move(logits), std::move(model)};
}

/// Runs `config.epochs` epochs with temperature_at(schedule, epoch) and
/// extracts the final codes.
inline TrainReport learn_codes(const Matrix& targets, const KdSpec& spec, const TrainConfig& config) {
    config.validate();
    if (targets.rows() != spec.symbols()) throw std::invalid_argument("learn_codes: target count does not match N");
    if (!all_finite(targets.values())) throw std::invalid_argument("learn_codes: non-finite target embedding");
    if (!config.allow_collisions) spec.require_distinct_codes();

    TrainState state = initial_state(targets, spec, config);
    Rng order_rng = streams::order(config.seed);

    CodeBook codes = extract_codes(state.logits);
    const double n = static_cast<double>(spec.symbols());
    const double initial = reconstruction_loss(targets, codes, state.model) / n;

    std::vector<double> losses, temps, changed, hard;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double t = temperature_at(config.schedule, epoch);
        losses.push_back(train_epoch(state, targets, config, t, order_rng, initial));
        temps.push_back(t);
        CodeBook next = extract_codes(state.logits);
        changed.push_back(changed_fraction(codes, next));
        codes = std::move(next);
        hard.push_back(reconstruction_loss(targets, codes, state.model) / n);
    }
    return {std::move(losses), std::move(temps), std::move(changed), std::move(hard), initial, std::move(codes),
            std::move(state)};
}

struct RetrainResult {
    KdModel model;
    std::vector<double> loss;  // mean per-symbol hard-code loss at each epoch end
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Re-learns fresh code embeddings and composer parameters for fixed codes.
inline RetrainResult retrain_code_embeddings(const Matrix& targets, const CodeBook& codebook,
                                             const TrainConfig& config) {
    config.validate();
    const auto& spec = codebook.spec();
    if (targets.rows() != spec.symbols())
        throw std::invalid_argument("retrain: codebook has " + std::to_string(spec.symbols()) + " symbols but " +
                                    std::to_string(targets.rows()) + " embeddings were given");

    // Fixed codes as one-hot logits; random mode never updates them.
    TrainConfig fixed = config;
    fixed.code_mode = CodeMode::random;
    Rng model_rng = streams::model(config.seed);
    TrainState state{CodeLogits(spec), init_model(config.composer, spec.cardinality(), spec.code_dims(),
                                                  config.resolved_code_width(targets.cols()), targets.cols(),
                                                  model_rng)};
    for (std::size_t i = 0; i < spec.symbols(); ++i)
        for (std::size_t j = 0; j < spec.code_dims(); ++j) state.logits.row(i, j)[codebook.code(i)[j]] = 1.0;

    Rng order_rng = streams::order(config.seed);
    const double n = static_cast<double>(spec.symbols());
    RetrainResult result;
    result.initial_loss = reconstruction_loss(targets, codebook, state.model) / n;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        train_epoch(state, targets, fixed, 1.0, order_rng, result.initial_loss);
        result.loss.push_back(reconstruction_loss(targets, codebook, state.model) / n);
    }
    result.final_loss = result.loss.empty() ? result.initial_loss : result.loss.back();
    result.model = std::move(state.model);
    return result;
}

}  // namespace kdcode
