#pragma once

// Dense double-precision storage, activations, plain SGD, a counter-based
// seeded generator and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kdcode {

using Vector = std::vector<double>;

/// Row-major dense matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: value count does not match shape");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

inline bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

/// y = xᵀ M  (x has M.rows() entries, y has M.cols() entries).
inline Vector left_multiply(std::span<const double> x, const Matrix& m) {
    if (x.size() != m.rows())
        throw std::invalid_argument("left_multiply: vector length does not match matrix rows");
    Vector y(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (x[r] == 0.0) continue;
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) y[c] += x[r] * row[c];
    }
    return y;
}

/// y = M x  (x has M.cols() entries).
inline Vector right_multiply(const Matrix& m, std::span<const double> x) {
    if (x.size() != m.cols())
        throw std::invalid_argument("right_multiply: vector length does not match matrix cols");
    Vector y(m.rows(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
    return y;
}

/// M += a ⊗ b
inline void add_outer(Matrix& m, std::span<const double> a, std::span<const double> b) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (a[r] == 0.0) continue;
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] += a[r] * b[c];
    }
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> xs) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < xs.size(); ++k)
        if (xs[k] > xs[best]) best = k;
    return best;
}

/// Tempering softmax exp(x_k/T) / Σ exp(x_k'/T), evaluated after max subtraction.
inline Vector stable_softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw std::invalid_argument("stable_softmax: temperature must be positive and finite");
    if (logits.empty()) throw std::invalid_argument("stable_softmax: empty logits");
    Vector out(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        if (!std::isfinite(logits[k]))
            throw std::invalid_argument("stable_softmax: non-finite logit at index " + std::to_string(k));
        out[k] = logits[k] / temperature;
    }
    const double top = *std::max_element(out.begin(), out.end());
    double total = 0.0;
    for (double& v : out) {
        v = std::exp(v - top);
        total += v;
    }
    for (double& v : out) v /= total;
    return out;
}

inline void sgd_update(std::span<double> params, std::span<const double> grads, double learning_rate) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sgd_step: parameter and gradient sizes differ");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * grads[i];
}

/// dst += alpha * src
inline void add_scaled(std::span<double> dst, std::span<const double> src, double alpha = 1.0) {
    if (dst.size() != src.size()) throw std::invalid_argument("add_scaled: size mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

inline Matrix sgd_step(const Matrix& params, const Matrix& grads, double learning_rate) {
    if (!params.same_shape(grads)) throw std::invalid_argument("sgd_step: shape mismatch");
    Matrix out = params;
    sgd_update(out.values(), grads.values(), learning_rate);
    return out;
}

/// Central differences: (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate k.
template <class ScalarFn>
Vector finite_diff_gradient(ScalarFn&& f, std::span<const double> point, double step = 1e-5) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_gradient: step must be positive");
    Vector x(point.begin(), point.end());
    Vector grad(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double saved = x[k];
        x[k] = saved + step;
        const double up = f(std::span<const double>(x));
        x[k] = saved - step;
        const double down = f(std::span<const double>(x));
        x[k] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            std::ostringstream msg;
            msg << "finite_diff_gradient: non-finite function value at coordinate " << k;
            throw std::domain_error(msg.str());
        }
        grad[k] = (up - down) / (2.0 * step);
    }
    return grad;
}

/// Relative error with a floor on the denominator so that gradients at
/// roundoff scale are compared absolutely.
inline double relative_error(double a, double b, double floor = 1e-6) {
    const double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

/// SplitMix64 over an explicit counter. Copying the state forks the stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Box-Muller (cosine branch only).
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    void fill_normal(std::span<double> out, double mean, double stddev) {
        for (double& v : out) v = normal(mean, stddev);
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    friend bool operator==(const Rng&, const Rng&) = default;

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace kdcode
