#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "numcore.hpp"

namespace scpnet {

/// Named per-label vectors; row i of `E` is the embedding of `names[i]`.
struct LabelEmbeddings {
    std::vector<std::string> names;
    Matrix E;

    std::size_t size() const noexcept { return names.size(); }
    std::size_t dim() const noexcept { return E.cols(); }

    void validate() const {
        if (names.size() != E.rows())
            throw ValidationError("embeddings: " + std::to_string(names.size()) + " names for " +
                                  std::to_string(E.rows()) + " rows");
        if (names.size() < 2) throw ValidationError("embeddings: need at least 2 labels");
        std::unordered_set<std::string> seen;
        for (const auto& n : names) {
            if (n.empty()) throw ValidationError("embeddings: empty label name");
            if (!seen.insert(n).second) throw ValidationError("embeddings: duplicate label name '" + n + "'");
        }
        require_finite(E.data(), "embeddings");
        for (std::size_t i = 0; i < E.rows(); ++i)
            if (norm(E.row(i)) == 0.0)
                throw DegenerateError("embeddings: row " + std::to_string(i) + " ('" + names[i] + "') has zero norm");
    }
};

enum class GraphMode { Static, Dynamic, None };

inline const char* to_string(GraphMode m) noexcept {
    switch (m) {
        case GraphMode::Static: return "static";
        case GraphMode::Dynamic: return "dynamic";
        case GraphMode::None: return "none";
    }
    return "?";
}

inline GraphMode parse_graph_mode(const std::string& s) {
    if (s == "static") return GraphMode::Static;
    if (s == "dynamic") return GraphMode::Dynamic;
    if (s == "none") return GraphMode::None;
    throw ParameterError("unknown graph mode '" + s + "' (expected static, dynamic or none)");
}

/// Row-stochastic label graph plus the intermediate matrices it was built from.
struct PriorGraph {
    Matrix A;        // clamped cosine correlation
    Matrix A_prime;  // top-K sparsified
    Matrix A_bar;    // re-weighted
    Matrix A_star;   // masked softmax, the graph used downstream
    std::size_t K = 0;
    double s = 0.2;
    double tau_prime = 1.0;
    GraphMode mode = GraphMode::Static;

    std::size_t size() const noexcept { return A_star.rows(); }
};

inline Matrix build_correlation(const Matrix& E) {
    const std::size_t n = E.rows();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = norm(E.row(i));
        if (norms[i] == 0.0) throw DegenerateError("build_correlation: row " + std::to_string(i) + " has zero norm");
    }
    Matrix A(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        A(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = std::clamp(dot(E.row(i), E.row(j)) / (norms[i] * norms[j]), -1.0, 1.0);
            A(i, j) = A(j, i) = std::max(0.0, c);
        }
    }
    return A;
}

inline Matrix build_correlation(const LabelEmbeddings& emb) { return build_correlation(emb.E); }

/// Keeps the K largest off-diagonal entries of each row; the diagonal is
/// always kept. Ties go to the lower column index.
inline Matrix sparsify_topk(const Matrix& A, std::size_t K) {
    const std::size_t n = A.rows();
    if (A.cols() != n) throw ShapeError("sparsify_topk: matrix must be square");
    if (K < 1 || K > n) throw ParameterError("sparsify_topk: K=" + std::to_string(K) + " outside [1, " + std::to_string(n) + "]");
    Matrix out(n, n);
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < n; ++i) {
        cols.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cols.push_back(j);
        const std::size_t keep = std::min(K, cols.size());
        std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(keep), cols.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (A(i, a) != A(i, b)) return A(i, a) > A(i, b);
                              return a < b;
                          });
        out(i, i) = A(i, i);
        for (std::size_t k = 0; k < keep; ++k) out(i, cols[k]) = A(i, cols[k]);
    }
    return out;
}

/// Diagonal becomes 1 - s; off-diagonal entries are rescaled to sum to s.
/// A row with no off-diagonal weight keeps a diagonal of 1.
inline Matrix reweight(const Matrix& A_prime, double s) {
    if (!(s > 0.0 && s < 1.0)) throw ParameterError("reweight: s must lie in (0, 1)");
    const std::size_t n = A_prime.rows();
    if (A_prime.cols() != n) throw ShapeError("reweight: matrix must be square");
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double off = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) off += A_prime(i, j);
        if (off == 0.0) {
            out(i, i) = 1.0;
            continue;
        }
        const double scale = s / off;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) out(i, j) = scale * A_prime(i, j);
        out(i, i) = 1.0 - s;
    }
    return out;
}

inline Matrix normalize_graph(const Matrix& A_bar, double tau_prime) {
    if (!(tau_prime > 0.0)) throw ParameterError("normalize_graph: tau_prime must be > 0");
    return masked_row_softmax(A_bar, tau_prime);
}

namespace detail {
inline PriorGraph build_graph_from(const Matrix& E, std::size_t K, double s, double tau_prime, GraphMode mode) {
    PriorGraph g;
    g.K = K;
    g.s = s;
    g.tau_prime = tau_prime;
    g.mode = mode;
    g.A = build_correlation(E);
    g.A_prime = sparsify_topk(g.A, K);
    g.A_bar = reweight(g.A_prime, s);
    g.A_star = normalize_graph(g.A_bar, tau_prime);
    return g;
}
} // namespace detail

inline PriorGraph build_prior(const LabelEmbeddings& emb, std::size_t K, double s, double tau_prime = 1.0) {
    emb.validate();
    return detail::build_graph_from(emb.E, K, s, tau_prime, GraphMode::Static);
}

/// Same pipeline as build_prior, sourced from the model's live label table.
inline PriorGraph dynamic_graph(const Matrix& Z_current, std::size_t K, double s, double tau_prime = 1.0) {
    return detail::build_graph_from(Z_current, K, s, tau_prime, GraphMode::Dynamic);
}

inline PriorGraph identity_graph(std::size_t n) {
    PriorGraph g;
    g.A = g.A_prime = g.A_bar = g.A_star = Matrix::identity(n);
    g.mode = GraphMode::None;
    return g;
}

// Adjacency text format: `n`, then n rows of n floats, then n label names
// (one per line).
inline void write_adjacency(std::ostream& os, const Matrix& A, const std::vector<std::string>& names) {
    if (A.rows() != A.cols() || names.size() != A.rows()) throw ShapeError("write_adjacency: shape mismatch");
    os << A.rows() << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < A.rows(); ++i) {
        for (std::size_t j = 0; j < A.cols(); ++j) os << (j ? " " : "") << A(i, j);
        os << '\n';
    }
    for (const auto& n : names) os << n << '\n';
}

inline void write_adjacency(const std::filesystem::path& path, const Matrix& A, const std::vector<std::string>& names) {
    std::ostringstream buf;
    write_adjacency(buf, A, names);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << buf.str();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

struct Adjacency {
    Matrix A;
    std::vector<std::string> names;
};

inline Adjacency read_adjacency(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw ParseError(path.string() + ":1: missing header");
    std::size_t n = 0;
    {
        std::istringstream hs(line);
        std::string extra;
        if (!(hs >> n) || n == 0 || (hs >> extra)) throw ParseError(path.string() + ":1: expected a single positive count");
    }
    Adjacency adj{Matrix(n, n), {}};
    for (std::size_t i = 0; i < n; ++i) {
        ++lineno;
        if (!std::getline(in, line)) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": missing matrix row");
        std::istringstream rs(line);
        for (std::size_t j = 0; j < n; ++j)
            if (!(rs >> adj.A(i, j)))
                throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(n) + " values");
        std::string extra;
        if (rs >> extra) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": too many values");
    }
    for (std::size_t i = 0; i < n; ++i) {
        ++lineno;
        if (!std::getline(in, line) || line.empty())
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": missing label name");
        adj.names.push_back(line);
    }
    require_finite(adj.A.data(), "read_adjacency");
    return adj;
}

/// Wraps an externally supplied row-stochastic matrix as a static graph.
inline PriorGraph graph_from_adjacency(const Matrix& A_star, double tol = 1e-9) {
    if (A_star.rows() != A_star.cols()) throw ShapeError("graph_from_adjacency: matrix must be square");
    for (std::size_t i = 0; i < A_star.rows(); ++i) {
        auto r = A_star.row(i);
        const double sum = std::accumulate(r.begin(), r.end(), 0.0);
        if (std::abs(sum - 1.0) > tol || std::any_of(r.begin(), r.end(), [](double x) { return x < 0.0; }))
            throw ValidationError("graph_from_adjacency: row " + std::to_string(i) + " is not stochastic");
    }
    PriorGraph g;
    g.A = g.A_prime = g.A_bar = g.A_star = A_star;
    g.mode = GraphMode::Static;
    return g;
}

} // namespace scpnet
