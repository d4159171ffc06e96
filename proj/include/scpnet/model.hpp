#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "numcore.hpp"
#include "prior.hpp"

namespace scpnet {

inline constexpr double kDefaultTau = 0.05;
inline constexpr double kDefaultLeakySlope = 0.2;
inline constexpr std::size_t kDefaultGcnLayers = 3;

/// Learnable state: the label table (first GCN input) and one square weight
/// per GCN layer.
struct ModelParams {
    Matrix Z0;
    std::vector<Matrix> W;
    double tau = kDefaultTau;
    double leaky_slope = kDefaultLeakySlope;

    std::size_t labels() const noexcept { return Z0.rows(); }
    std::size_t dim() const noexcept { return Z0.cols(); }
    std::size_t layers() const noexcept { return W.size(); }

    void validate() const {
        if (W.empty()) throw ParameterError("model: need at least one GCN layer");
        if (!(tau > 0.0)) throw ParameterError("model: tau must be > 0");
        for (const auto& w : W)
            if (w.rows() != dim() || w.cols() != dim()) throw ShapeError("model: GCN weights must be d x d");
    }

    bool operator==(const ModelParams&) const = default;
};

struct Prediction {
    Vector p;
    Vector logits;
};

struct ModelGrads {
    Matrix dZ0;
    std::vector<Matrix> dW;
    Vector df;
};

inline ModelParams init_model(const LabelEmbeddings& emb, std::size_t L, double tau, std::uint64_t seed,
                              double leaky_slope = kDefaultLeakySlope) {
    if (L == 0) throw ParameterError("init_model: L must be >= 1");
    if (!(tau > 0.0)) throw ParameterError("init_model: tau must be > 0");
    emb.validate();
    ModelParams params;
    params.Z0 = emb.E;
    params.tau = tau;
    params.leaky_slope = leaky_slope;
    const std::size_t d = emb.dim();
    const double bound = std::sqrt(6.0 / (2.0 * static_cast<double>(d)));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-bound, bound);
    params.W.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
        Matrix w(d, d);
        for (double& x : w.data()) x = uni(rng);
        params.W.push_back(std::move(w));
    }
    return params;
}

/// Intermediate values of the GCN stack, kept for the backward pass.
struct SamTrace {
    std::vector<Matrix> H;   // H[0] = Z0 ... H[L]
    std::vector<Matrix> AH;  // A* H[l]
    std::vector<Matrix> pre; // A* H[l] W[l], before the nonlinearity
    Matrix Z_star;
};

inline SamTrace sam_forward_traced(const ModelParams& params, const PriorGraph& graph) {
    params.validate();
    if (graph.size() != params.labels())
        throw ShapeError("sam_forward: graph has " + std::to_string(graph.size()) + " labels, model has " +
                         std::to_string(params.labels()));
    SamTrace t;
    t.H.push_back(params.Z0);
    for (const auto& w : params.W) {
        t.AH.push_back(matmul(graph.A_star, t.H.back()));
        t.pre.push_back(matmul(t.AH.back(), w));
        Matrix next = t.pre.back();
        for (double& x : next.data()) x = leaky_relu(x, params.leaky_slope);
        t.H.push_back(std::move(next));
    }
    t.Z_star = params.Z0;
    const auto& top = t.H.back();
    for (std::size_t i = 0; i < t.Z_star.size(); ++i) t.Z_star.data()[i] += top.data()[i];
    require_finite(t.Z_star.data(), "sam_forward");
    return t;
}

/// Refined label table: Z0 plus the output of the L-layer GCN.
inline Matrix sam_forward(const ModelParams& params, const PriorGraph& graph) {
    return sam_forward_traced(params, graph).Z_star;
}

/// Backpropagates dL/dZ* through the GCN stack. A* is a constant.
inline void sam_backward(const ModelParams& params, const PriorGraph& graph, const SamTrace& trace,
                         const Matrix& dZ_star, Matrix& dZ0, std::vector<Matrix>& dW) {
    const std::size_t L = params.layers();
    dW.assign(L, Matrix(params.dim(), params.dim()));
    const Matrix At = transpose(graph.A_star);
    Matrix dH = dZ_star;
    for (std::size_t l = L; l-- > 0;) {
        Matrix dP = dH;
        const auto& pre = trace.pre[l];
        for (std::size_t i = 0; i < dP.size(); ++i) dP.data()[i] *= leaky_relu_grad(pre.data()[i], params.leaky_slope);
        dW[l] = matmul(transpose(trace.AH[l]), dP);
        dH = matmul(At, matmul(dP, transpose(params.W[l])));
    }
    dZ0 = dZ_star;
    for (std::size_t i = 0; i < dZ0.size(); ++i) dZ0.data()[i] += dH.data()[i];
}

inline Prediction predict(std::span<const double> f, const Matrix& Z_star, double tau) {
    if (f.size() != Z_star.cols()) throw ShapeError("predict: feature dimension mismatch");
    if (!(tau > 0.0)) throw ParameterError("predict: tau must be > 0");
    if (norm(f) == 0.0) throw DegenerateError("predict: zero-norm feature");
    Prediction out;
    out.logits.resize(Z_star.rows());
    out.p.resize(Z_star.rows());
    for (std::size_t i = 0; i < Z_star.rows(); ++i) {
        out.logits[i] = cosine_sim(f, Z_star.row(i)) / tau;
        out.p[i] = sigmoid(out.logits[i]);
    }
    return out;
}

/// Accumulates the gradient of the logits w.r.t. the feature and the
/// refined label table, given upstream dL/dlogits.
inline void predict_backward(std::span<const double> f, const Matrix& Z_star, double tau,
                             std::span<const double> dlogits, Matrix& dZ_star, std::span<double> df) {
    const double nf = norm(f);
    for (std::size_t i = 0; i < Z_star.rows(); ++i) {
        if (dlogits[i] == 0.0) continue;
        auto z = Z_star.row(i);
        const double nz = norm(z);
        const double c = dot(f, z) / (nf * nz);
        const double g = dlogits[i] / tau;
        auto dz = dZ_star.row(i);
        for (std::size_t k = 0; k < f.size(); ++k) {
            df[k] += g * (z[k] / (nf * nz) - c * f[k] / (nf * nf));
            dz[k] += g * (f[k] / (nf * nz) - c * z[k] / (nz * nz));
        }
    }
}

/// Exact gradients of the composed map (SAM, then cosine likelihood) for one
/// feature, given upstream dL/dp.
inline ModelGrads model_backward(const ModelParams& params, const PriorGraph& graph, std::span<const double> f,
                                 std::span<const double> dp) {
    const SamTrace trace = sam_forward_traced(params, graph);
    const Prediction pred = predict(f, trace.Z_star, params.tau);
    if (dp.size() != pred.p.size()) throw ShapeError("model_backward: upstream gradient length mismatch");
    Vector dlogits(dp.size());
    for (std::size_t i = 0; i < dp.size(); ++i) dlogits[i] = dp[i] * pred.p[i] * (1.0 - pred.p[i]);
    ModelGrads g;
    g.df.assign(f.size(), 0.0);
    Matrix dZ_star(params.labels(), params.dim());
    predict_backward(f, trace.Z_star, params.tau, dlogits, dZ_star, g.df);
    sam_backward(params, graph, trace, dZ_star, g.dZ0, g.dW);
    return g;
}

// Checkpoint: `n d L tau leaky_slope`, then the n rows of Z0, then each W
// row-major (d rows of d floats per layer).
inline void write_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    params.validate();
    std::ostringstream os;
    os << std::setprecision(17);
    os << params.labels() << ' ' << params.dim() << ' ' << params.layers() << ' ' << params.tau << ' '
       << params.leaky_slope << '\n';
    auto put = [&](const Matrix& m) {
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
            os << '\n';
        }
    };
    put(params.Z0);
    for (const auto& w : params.W) put(w);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << os.str();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline ModelParams read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    std::size_t lineno = 0;
    auto next_line = [&](const char* what) -> std::istringstream {
        ++lineno;
        if (!std::getline(in, line))
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": missing " + what);
        return std::istringstream(line);
    };
    std::size_t n = 0, d = 0, L = 0;
    ModelParams params;
    {
        auto hs = next_line("header");
        if (!(hs >> n >> d >> L >> params.tau >> params.leaky_slope) || n == 0 || d == 0 || L == 0)
            throw ParseError(path.string() + ":1: expected `n d L tau leaky_slope`");
    }
    auto get = [&](std::size_t rows, const char* what) {
        Matrix m(rows, d);
        for (std::size_t i = 0; i < rows; ++i) {
            auto rs = next_line(what);
            for (std::size_t j = 0; j < d; ++j)
                if (!(rs >> m(i, j)))
                    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(d) +
                                     " values");
            std::string extra;
            if (rs >> extra) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": too many values");
        }
        return m;
    };
    params.Z0 = get(n, "label table row");
    for (std::size_t l = 0; l < L; ++l) params.W.push_back(get(d, "GCN weight row"));
    require_finite(params.Z0.data(), "checkpoint");
    for (const auto& w : params.W) require_finite(w.data(), "checkpoint");
    params.validate();
    return params;
}

} // namespace scpnet
