#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace scpnet {

using Vector = std::vector<double>;

// Lower/upper clamp applied to every probability before a log is taken.
inline constexpr double kProbEps = 1e-7;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : init) {
            if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(std::span<const double> xs) noexcept {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> xs, const char* what) {
    if (!all_finite(xs)) throw NumericError(std::string(what) + ": non-finite value");
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    // i-k-j order; each output entry accumulates in increasing k.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    require_finite(out.data(), "matmul");
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
    Vector out(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double acc = 0.0;
        auto r = a.row(i);
        for (std::size_t j = 0; j < x.size(); ++j) acc += r[j] * x[j];
        out[i] = acc;
    }
    require_finite(out, "matvec");
    return out;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

inline double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("frobenius: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw DegenerateError("cosine_sim: zero-norm vector");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// Row-wise softmax restricted to the nonzero entries of each row.
///
/// Zero entries stay exactly zero; nonzero entries e become
/// exp(e / temperature) normalized over the nonzero support of their row.
inline Matrix masked_row_softmax(const Matrix& m, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("masked_row_softmax: temperature must be > 0");
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto in = m.row(i);
        double peak = -INFINITY;
        bool any = false;
        for (double e : in) {
            if (e != 0.0) {
                peak = std::max(peak, e / temperature);
                any = true;
            }
        }
        if (!any) throw DegenerateError("masked_row_softmax: row " + std::to_string(i) + " is all zero");
        auto o = out.row(i);
        double total = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            if (in[j] != 0.0) {
                o[j] = std::exp(in[j] / temperature - peak);
                total += o[j];
            }
        }
        for (double& x : o) x /= total;
    }
    require_finite(out.data(), "masked_row_softmax");
    return out;
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) noexcept {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

// log(1 - sigmoid(x)).
inline double log1m_sigmoid(double x) noexcept { return log_sigmoid(-x); }

inline double clamp_prob(double p) noexcept { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

inline double leaky_relu(double x, double slope) noexcept { return x > 0.0 ? x : slope * x; }

inline double leaky_relu_grad(double x, double slope) noexcept { return x > 0.0 ? 1.0 : slope; }

/// Compares an analytic gradient against central differences.
///
/// Returns the largest componentwise relative error, where the denominator
/// is max(|analytic|, |numeric|, 1e-8).
template <class F>
double grad_check(F&& f, std::span<const double> analytic, Vector point, double step = 1e-5) {
    if (!(step > 0.0)) throw ParameterError("grad_check: step must be > 0");
    if (analytic.size() != point.size()) throw ShapeError("grad_check: gradient/point length mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double x0 = point[i];
        point[i] = x0 + step;
        const double up = f(std::as_const(point));
        point[i] = x0 - step;
        const double down = f(std::as_const(point));
        point[i] = x0;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("grad_check: non-finite probe at component " + std::to_string(i));
        }
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) noexcept {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace scpnet
