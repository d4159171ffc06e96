#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "numcore.hpp"
#include "prior.hpp"

namespace scpnet {

// Per-class annotation: +1 positive, 0 annotated negative, -1 unknown.
using LabelVector = std::vector<int>;

inline constexpr int kPositive = 1;
inline constexpr int kNegative = 0;
inline constexpr int kUnknown = -1;

inline void validate_labels(std::span<const int> y) {
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] != kPositive && y[i] != kNegative && y[i] != kUnknown)
            throw ValidationError("label " + std::to_string(i) + " has value " + std::to_string(y[i]) +
                                  " (expected +1, 0 or -1)");
}

struct LossWeights {
    double lambda_cst = 1.0 / 8.0;
    double lambda_dstl = 1.0 / 8.0;
    double alpha = 2.0;  // focal exponent
    double beta = 0.6;   // pseudo-positive threshold for unannotated labels
    double margin = 1.0; // subtracted from the positive-branch logit
    std::size_t K_conf = 3;

    void validate() const {
        if (lambda_cst < 0.0 || lambda_dstl < 0.0) throw ParameterError("loss weights must be >= 0");
        if (!(beta > 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in (0, 1]");
        if (margin < 0.0) throw ParameterError("margin must be >= 0");
        if (K_conf < 1) throw ParameterError("K_conf must be >= 1");
    }
};

/// Loss value together with its gradient w.r.t. the loss input.
struct LossValue {
    double value = 0.0;
    Vector grad;
};

namespace detail {
// d/dq of -(1-q)^a log q.
inline double focal_pos_grad(double q, double a) {
    return a * std::pow(1.0 - q, a - 1.0) * std::log(q) - std::pow(1.0 - q, a) / q;
}
// d/dq of -q^a log(1-q).
inline double focal_neg_grad(double q, double a) {
    return -a * std::pow(q, a - 1.0) * std::log(1.0 - q) + std::pow(q, a) / (1.0 - q);
}
// Derivative of clamp_prob(sigmoid(x)) w.r.t. x.
inline double clamped_sigmoid_grad(double raw) {
    return (raw > kProbEps && raw < 1.0 - kProbEps) ? raw * (1.0 - raw) : 0.0;
}
} // namespace detail

/// Focal-weighted classification loss with the pseudo-positive correction
/// for unannotated classes. Takes the raw logits (cosine / tau) and returns
/// the gradient on them.
///
/// Positives use the margin-shifted probability sigmoid(logit - m). Classes
/// annotated negative or unknown are treated as negatives while p <= beta and
/// flipped to positives above it.
inline LossValue splc_focal_loss(std::span<const double> logits, std::span<const int> y, const LossWeights& w) {
    if (logits.size() != y.size()) throw ShapeError("splc_focal_loss: logits/labels length mismatch");
    LossValue out;
    out.grad.assign(logits.size(), 0.0);
    const double a = w.alpha;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        if (y[c] == kPositive) {
            const double raw = sigmoid(logits[c] - w.margin);
            const double q = clamp_prob(raw);
            out.value += -std::pow(1.0 - q, a) * std::log(q);
            out.grad[c] = detail::focal_pos_grad(q, a) * detail::clamped_sigmoid_grad(raw);
        } else {
            const double raw = sigmoid(logits[c]);
            const double p = clamp_prob(raw);
            if (p <= w.beta) {
                out.value += -std::pow(p, a) * std::log(1.0 - p);
                out.grad[c] = detail::focal_neg_grad(p, a) * detail::clamped_sigmoid_grad(raw);
            } else {
                out.value += -std::pow(1.0 - p, a) * std::log(p);
                out.grad[c] = detail::focal_pos_grad(p, a) * detail::clamped_sigmoid_grad(raw);
            }
        }
    }
    return out;
}

inline bool is_row_stochastic(const Matrix& W, double tol = 1e-9) {
    for (std::size_t i = 0; i < W.rows(); ++i) {
        auto r = W.row(i);
        if (std::any_of(r.begin(), r.end(), [](double x) { return x < 0.0; })) return false;
        if (std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) > tol) return false;
    }
    return true;
}

/// Structure-aware calibration: each likelihood becomes the W-weighted
/// combination of its neighbours' likelihoods.
inline Vector sasc(std::span<const double> p, const Matrix& W) {
    if (W.rows() != W.cols() || W.cols() != p.size()) throw ShapeError("sasc: W must be n x n with n = |p|");
    if (!is_row_stochastic(W)) throw ValidationError("sasc: calibration matrix is not row-stochastic");
    return matvec(W, p);
}

/// Per-class dynamic confidence thresholds.
///
/// During an epoch, `hits` counts weak-view probabilities above `T_base`.
/// At the end of the epoch each class threshold is rescaled by its hit count
/// relative to the best-learned class and floored at `T_min`.
struct ThresholdState {
    Vector T;
    std::vector<std::uint64_t> hits;
    double T_base = 0.9;
    double T_min = 0.5;

    static ThresholdState make(std::size_t n, double T_base = 0.9, double T_min = 0.5) {
        if (!(T_base > 0.0 && T_base <= 1.0)) throw ParameterError("T_base must lie in (0, 1]");
        if (!(T_min >= 0.0 && T_min <= T_base)) throw ParameterError("T_min must lie in [0, T_base]");
        return ThresholdState{Vector(n, T_base), std::vector<std::uint64_t>(n, 0), T_base, T_min};
    }
};

/// Counts confident weak-view predictions of one sample.
inline void accumulate_hits(ThresholdState& state, std::span<const double> p_weak) {
    if (p_weak.size() != state.hits.size()) throw ShapeError("accumulate_hits: length mismatch");
    for (std::size_t c = 0; c < p_weak.size(); ++c)
        if (p_weak[c] > state.T_base) ++state.hits[c];
}

inline void finish_epoch(ThresholdState& state) {
    const std::uint64_t top = std::max<std::uint64_t>(*std::max_element(state.hits.begin(), state.hits.end()), 1);
    for (std::size_t c = 0; c < state.T.size(); ++c) {
        const double rate = static_cast<double>(state.hits[c]) / static_cast<double>(top);
        state.T[c] = std::max(state.T_min, rate * state.T_base);
    }
    std::fill(state.hits.begin(), state.hits.end(), 0);
}

/// Hit accumulation for a batch of weak-view probability vectors; when
/// `end_of_epoch` is set the thresholds are recomputed and hits reset.
inline ThresholdState update_thresholds(ThresholdState state, std::span<const Vector> batch_p_weak,
                                        bool end_of_epoch) {
    for (const auto& p : batch_p_weak) accumulate_hits(state, p);
    if (end_of_epoch) finish_epoch(state);
    return state;
}

struct ConfidentSet {
    std::vector<std::size_t> indices; // ascending by rank (highest probability first)

    bool contains(std::size_t c) const {
        return std::find(indices.begin(), indices.end(), c) != indices.end();
    }
};

/// Classes among the K_conf most probable whose probability exceeds their
/// class threshold. Ties rank the lower index first.
inline ConfidentSet confident_set(std::span<const double> p_weak, std::span<const double> T, std::size_t K_conf) {
    if (K_conf < 1) throw ParameterError("confident_set: K_conf must be >= 1");
    if (T.size() != p_weak.size()) throw ShapeError("confident_set: threshold length mismatch");
    std::vector<std::size_t> order(p_weak.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t k = std::min(K_conf, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (p_weak[a] != p_weak[b]) return p_weak[a] > p_weak[b];
                          return a < b;
                      });
    ConfidentSet out;
    for (std::size_t i = 0; i < k; ++i)
        if (p_weak[order[i]] > T[order[i]]) out.indices.push_back(order[i]);
    return out;
}

/// Binary cross-entropy of the strong view against the confident set;
/// gradient is w.r.t. p_strong.
inline LossValue consistency_loss(std::span<const double> p_strong, const ConfidentSet& O) {
    LossValue out;
    out.grad.assign(p_strong.size(), 0.0);
    std::vector<char> in_set(p_strong.size(), 0);
    for (std::size_t c : O.indices) {
        if (c >= p_strong.size()) throw ShapeError("consistency_loss: confident index out of range");
        in_set[c] = 1;
    }
    for (std::size_t c = 0; c < p_strong.size(); ++c) {
        const double q = clamp_prob(p_strong[c]);
        const bool active = p_strong[c] > kProbEps && p_strong[c] < 1.0 - kProbEps;
        if (in_set[c]) {
            out.value -= std::log(q);
            out.grad[c] = active ? -1.0 / q : 0.0;
        } else {
            out.value -= std::log(1.0 - q);
            out.grad[c] = active ? 1.0 / (1.0 - q) : 0.0;
        }
    }
    return out;
}

/// Sum of per-class binary KL(q_weak || p_strong). The teacher q_weak is
/// treated as a constant; the gradient is w.r.t. p_strong.
inline LossValue distill_loss(std::span<const double> q_weak, std::span<const double> p_strong) {
    if (q_weak.size() != p_strong.size()) throw ShapeError("distill_loss: length mismatch");
    LossValue out;
    out.grad.assign(p_strong.size(), 0.0);
    for (std::size_t c = 0; c < p_strong.size(); ++c) {
        const double qw = clamp_prob(q_weak[c]);
        const double qs = clamp_prob(p_strong[c]);
        const double term = qw * std::log(qw / qs) + (1.0 - qw) * std::log((1.0 - qw) / (1.0 - qs));
        out.value += std::max(term, 0.0);
        const bool active = p_strong[c] > kProbEps && p_strong[c] < 1.0 - kProbEps;
        out.grad[c] = active ? -qw / qs + (1.0 - qw) / (1.0 - qs) : 0.0;
    }
    return out;
}

struct PesslTerms {
    double cst = 0.0;  // lambda_cst * L_cst
    double dstl = 0.0; // lambda_dstl * L_dstl
    double total = 0.0;
    Vector grad_p_strong;
    ConfidentSet confident;
};

/// Weighted consistency plus calibrated self-distillation. A term whose
/// weight is zero is skipped entirely.
inline PesslTerms pessl_loss(std::span<const double> p_weak, std::span<const double> p_strong,
                             const PriorGraph& graph, const ThresholdState& state, const LossWeights& w) {
    if (p_weak.size() != p_strong.size()) throw ShapeError("pessl_loss: view length mismatch");
    PesslTerms out;
    out.grad_p_strong.assign(p_strong.size(), 0.0);
    if (w.lambda_cst > 0.0) {
        out.confident = confident_set(p_weak, state.T, w.K_conf);
        const LossValue l = consistency_loss(p_strong, out.confident);
        out.cst = w.lambda_cst * l.value;
        for (std::size_t c = 0; c < l.grad.size(); ++c) out.grad_p_strong[c] += w.lambda_cst * l.grad[c];
    }
    if (w.lambda_dstl > 0.0) {
        const Vector q_weak = sasc(p_weak, graph.A_star);
        const LossValue l = distill_loss(q_weak, p_strong);
        out.dstl = w.lambda_dstl * l.value;
        for (std::size_t c = 0; c < l.grad.size(); ++c) out.grad_p_strong[c] += w.lambda_dstl * l.grad[c];
    }
    out.total = out.cst + out.dstl;
    return out;
}

struct TotalLoss {
    double cls = 0.0;
    double cst = 0.0;
    double dstl = 0.0;
    double total = 0.0;
    Vector grad_logits_weak;
    Vector grad_logits_strong;
    ConfidentSet confident;
};

/// Classification loss on the weak view plus the self-supervised terms,
/// with gradients on both views' logits. The weak view receives gradient
/// only from the classification loss.
inline TotalLoss total_loss(std::span<const double> logits_weak, std::span<const double> logits_strong,
                            std::span<const int> y, const PriorGraph& graph, const ThresholdState& state,
                            const LossWeights& w) {
    if (logits_weak.size() != logits_strong.size()) throw ShapeError("total_loss: view length mismatch");
    TotalLoss out;
    LossValue cls = splc_focal_loss(logits_weak, y, w);
    out.cls = cls.value;
    out.grad_logits_weak = std::move(cls.grad);
    out.grad_logits_strong.assign(logits_strong.size(), 0.0);
    if (w.lambda_cst > 0.0 || w.lambda_dstl > 0.0) {
        Vector p_weak(logits_weak.size()), p_strong(logits_strong.size());
        for (std::size_t c = 0; c < p_weak.size(); ++c) {
            p_weak[c] = sigmoid(logits_weak[c]);
            p_strong[c] = sigmoid(logits_strong[c]);
        }
        PesslTerms pessl = pessl_loss(p_weak, p_strong, graph, state, w);
        out.cst = pessl.cst;
        out.dstl = pessl.dstl;
        out.confident = std::move(pessl.confident);
        for (std::size_t c = 0; c < p_strong.size(); ++c)
            out.grad_logits_strong[c] = pessl.grad_p_strong[c] * p_strong[c] * (1.0 - p_strong[c]);
    }
    out.total = out.cls + out.cst + out.dstl;
    return out;
}

} // namespace scpnet
