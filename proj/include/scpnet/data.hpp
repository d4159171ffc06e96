#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "losses.hpp"
#include "numcore.hpp"
#include "prior.hpp"

namespace scpnet {

struct Sample {
    Vector f_base;
    Vector f_weak;
    Vector f_strong;
    LabelVector y;
    std::optional<LabelVector> y_full;

    bool operator==(const Sample&) const = default;
};

struct Dataset {
    std::size_t n_labels = 0;
    std::size_t d = 0;
    std::vector<std::string> names;
    std::vector<Sample> samples;

    void validate() const {
        if (names.size() != n_labels) throw ValidationError("dataset: label-name count differs from n_labels");
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            const std::string where = "dataset sample " + std::to_string(i);
            for (const Vector* v : {&s.f_base, &s.f_weak, &s.f_strong}) {
                if (v->size() != d) throw ValidationError(where + ": feature length " + std::to_string(v->size()) +
                                                          ", expected " + std::to_string(d));
                require_finite(*v, where.c_str());
                if (norm(*v) == 0.0) throw DegenerateError(where + ": zero-norm feature");
            }
            if (s.y.size() != n_labels) throw ValidationError(where + ": label vector length mismatch");
            validate_labels(s.y);
            if (s.y_full) {
                if (s.y_full->size() != n_labels) throw ValidationError(where + ": y_full length mismatch");
                validate_labels(*s.y_full);
            }
        }
    }

    bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------- file I/O

namespace detail {
inline std::string at(const std::filesystem::path& p, std::size_t line) {
    return p.string() + ":" + std::to_string(line) + ": ";
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}
} // namespace detail

/// Embedding file: `<n> <d>` then n lines `<name> <d floats>`.
inline void write_embeddings(std::ostream& os, const LabelEmbeddings& emb) {
    os << emb.size() << ' ' << emb.dim() << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < emb.size(); ++i) {
        os << emb.names[i];
        for (double x : emb.E.row(i)) os << ' ' << x;
        os << '\n';
    }
}

inline void write_embeddings(const std::filesystem::path& path, const LabelEmbeddings& emb) {
    emb.validate();
    std::ostringstream os;
    write_embeddings(os, emb);
    detail::write_text_file(path, os.str());
}

inline LabelEmbeddings read_embeddings(std::istream& in, const std::filesystem::path& path = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(detail::at(path, 1) + "missing `<n> <d>` header");
    std::size_t n = 0, d = 0;
    {
        std::istringstream hs(line);
        std::string extra;
        if (!(hs >> n >> d) || n == 0 || d == 0 || (hs >> extra))
            throw ParseError(detail::at(path, 1) + "expected `<n> <d>` header");
    }
    LabelEmbeddings emb{{}, Matrix(n, d)};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lineno = i + 2;
        if (!std::getline(in, line))
            throw ParseError(detail::at(path, lineno) + "header declares " + std::to_string(n) + " rows, found " +
                             std::to_string(i));
        std::istringstream rs(line);
        std::string name;
        if (!(rs >> name)) throw ParseError(detail::at(path, lineno) + "row " + std::to_string(i) + " is empty");
        std::size_t got = 0;
        double x = 0.0;
        while (got < d && (rs >> x)) emb.E(i, got++) = x;
        std::string extra;
        if (got != d || (rs >> extra))
            throw ParseError(detail::at(path, lineno) + "row " + std::to_string(i) + " ('" + name + "') has " +
                             (got != d ? std::to_string(got) : std::string("more than ") + std::to_string(d)) +
                             " values, expected " + std::to_string(d));
        emb.names.push_back(std::move(name));
    }
    emb.validate();
    return emb;
}

inline LabelEmbeddings read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return read_embeddings(in, path);
}

/// Dataset file: header `<n_samples> <n_labels> <d> <name>...`, then one
/// JSON object per sample.
inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
    ds.validate();
    std::ostringstream os;
    os << ds.samples.size() << ' ' << ds.n_labels << ' ' << ds.d;
    for (const auto& n : ds.names) os << ' ' << n;
    os << '\n';
    for (const auto& s : ds.samples) {
        nlohmann::ordered_json rec;
        rec["f_base"] = s.f_base;
        rec["f_weak"] = s.f_weak;
        rec["f_strong"] = s.f_strong;
        rec["y"] = s.y;
        if (s.y_full) rec["y_full"] = *s.y_full;
        os << rec.dump() << '\n';
    }
    detail::write_text_file(path, os.str());
}

inline Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError(detail::at(path, 1) + "missing header");
    Dataset ds;
    std::size_t count = 0;
    {
        std::istringstream hs(line);
        if (!(hs >> count >> ds.n_labels >> ds.d) || ds.n_labels == 0 || ds.d == 0)
            throw ParseError(detail::at(path, 1) + "expected `<n_samples> <n_labels> <d> <names...>`");
        std::string name;
        while (hs >> name) ds.names.push_back(name);
        if (ds.names.size() != ds.n_labels)
            throw ParseError(detail::at(path, 1) + "expected " + std::to_string(ds.n_labels) + " label names, found " +
                             std::to_string(ds.names.size()));
    }
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t lineno = i + 2;
        if (!std::getline(in, line))
            throw ParseError(detail::at(path, lineno) + "header declares " + std::to_string(count) +
                             " samples, found " + std::to_string(i));
        try {
            const auto rec = nlohmann::json::parse(line);
            Sample s;
            rec.at("f_base").get_to(s.f_base);
            rec.at("f_weak").get_to(s.f_weak);
            rec.at("f_strong").get_to(s.f_strong);
            rec.at("y").get_to(s.y);
            if (rec.contains("y_full")) s.y_full = rec.at("y_full").get<LabelVector>();
            ds.samples.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(detail::at(path, lineno) + e.what());
        }
    }
    try {
        ds.validate();
    } catch (const Error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return ds;
}

// ---------------------------------------------------------------- masking

/// Keeps one uniformly chosen positive; every other class becomes unknown.
inline LabelVector mask_single_positive(std::span<const int> y_full, std::uint64_t seed) {
    std::vector<std::size_t> pos;
    for (std::size_t c = 0; c < y_full.size(); ++c)
        if (y_full[c] == kPositive) pos.push_back(c);
    if (pos.empty()) throw ValidationError("mask_single_positive: no positive label");
    std::mt19937_64 rng(seed);
    const std::size_t keep = pos[std::uniform_int_distribution<std::size_t>(0, pos.size() - 1)(rng)];
    LabelVector y(y_full.size(), kUnknown);
    y[keep] = kPositive;
    return y;
}

/// Keeps round(ratio * n) uniformly chosen annotations; the rest become unknown.
inline LabelVector mask_partial(std::span<const int> y_full, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ParameterError("mask_partial: ratio must lie in (0, 1]");
    const std::size_t n = y_full.size();
    const auto keep = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    LabelVector y(n, kUnknown);
    for (std::size_t i = 0; i < std::min(keep, n); ++i) y[order[i]] = y_full[order[i]];
    return y;
}

enum class MaskMode { None, SinglePositive, Partial };

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "none") return MaskMode::None;
    if (s == "single") return MaskMode::SinglePositive;
    if (s == "partial") return MaskMode::Partial;
    throw ParameterError("unknown mask mode '" + s + "' (expected none, single or partial)");
}

/// Re-derives every sample's `y` from its `y_full`.
inline void apply_mask(Dataset& ds, MaskMode mode, double ratio, std::uint64_t seed) {
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        auto& s = ds.samples[i];
        if (!s.y_full) throw ValidationError("apply_mask: sample " + std::to_string(i) + " has no ground truth");
        switch (mode) {
            case MaskMode::None: s.y = *s.y_full; break;
            case MaskMode::SinglePositive: s.y = mask_single_positive(*s.y_full, mix_seed(seed, 11, i)); break;
            case MaskMode::Partial: s.y = mask_partial(*s.y_full, ratio, mix_seed(seed, 12, i)); break;
        }
    }
}

// ---------------------------------------------------------------- augmentation

// Noise levels are expected noise norms: each coordinate gets sigma / sqrt(d),
// so the perturbation size relative to the unit-norm feature does not grow with d.
struct AugmentConfig {
    double sigma_weak = 0.05;
    double sigma_strong = 0.2;
    double dropout_strong = 0.2;

    void validate() const {
        if (sigma_weak < 0.0 || sigma_strong < sigma_weak)
            throw ParameterError("augment: need 0 <= sigma_weak <= sigma_strong");
        if (!(dropout_strong >= 0.0 && dropout_strong < 1.0))
            throw ParameterError("augment: dropout rate must lie in [0, 1)");
    }
};

inline void normalize_in_place(Vector& v) {
    const double n = norm(v);
    if (n == 0.0) throw DegenerateError("normalize: zero-norm vector");
    for (double& x : v) x /= n;
}

/// Feature-space weak/strong views: weak adds small Gaussian noise, strong
/// applies dropout and larger noise. Both are returned unit-norm.
inline std::pair<Vector, Vector> augment(std::span<const double> f_base, const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (norm(f_base) == 0.0) throw DegenerateError("augment: zero-norm base feature");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t d = f_base.size();
    const double per_coord = 1.0 / std::sqrt(static_cast<double>(d));

    Vector weak(f_base.begin(), f_base.end());
    for (double& x : weak) x += cfg.sigma_weak * per_coord * gauss(rng);

    Vector strong(d);
    std::bernoulli_distribution drop(cfg.dropout_strong);
    for (;;) {
        for (std::size_t k = 0; k < d; ++k) strong[k] = drop(rng) ? 0.0 : f_base[k];
        if (norm(strong) > 0.0) break;
    }
    for (double& x : strong) x += cfg.sigma_strong * per_coord * gauss(rng);

    // Noise can in principle cancel the signal exactly; fall back to the base.
    for (Vector* v : {&weak, &strong}) {
        if (norm(*v) == 0.0) v->assign(f_base.begin(), f_base.end());
        normalize_in_place(*v);
    }
    return {std::move(weak), std::move(strong)};
}

// ---------------------------------------------------------------- synthetic data

struct SynthConfig {
    std::size_t n_labels = 20;
    std::size_t d = 64;
    std::size_t n_clusters = 4;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    double noise = 0.3;     // feature noise norm (relative to a unit feature)
    double emb_noise = 0.6; // per-label deviation from its cluster centre
    double p_in = 0.5;
    double p_out = 0.02;
    AugmentConfig augment;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_labels < 2) throw ParameterError("synth: need at least 2 labels");
        if (d == 0) throw ParameterError("synth: d must be >= 1");
        if (n_clusters < 1 || n_clusters > n_labels) throw ParameterError("synth: need 1 <= n_clusters <= n_labels");
        if (n_train == 0) throw ParameterError("synth: n_train must be >= 1");
        if (noise < 0.0 || emb_noise < 0.0) throw ParameterError("synth: noise levels must be >= 0");
        if (!(p_in > 0.0 && p_in <= 1.0)) throw ParameterError("synth: p_in must lie in (0, 1]");
        if (!(p_out >= 0.0 && p_out < p_in)) throw ParameterError("synth: need 0 <= p_out < p_in");
        augment.validate();
    }
};

struct SynthData {
    Dataset train;
    Dataset test;
    LabelEmbeddings embeddings;
    Matrix cooccurrence;                // label-pair positive counts over the training split
    std::vector<std::size_t> cluster_of; // planted cluster of each label
};

/// Cluster index of label i: labels are split into contiguous blocks.
inline std::size_t synth_cluster_of(std::size_t label, std::size_t n_labels, std::size_t n_clusters) {
    return label * n_clusters / n_labels;
}

/// Generates label embeddings with planted cluster structure and samples
/// whose positives co-occur mostly within one cluster. Labels are left
/// fully annotated (y = y_full); masking is a separate step.
inline SynthData synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.n_labels, d = cfg.d;
    std::mt19937_64 rng(mix_seed(cfg.seed, 1));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double per_coord = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<Vector> centers(cfg.n_clusters, Vector(d));
    for (auto& c : centers) {
        do {
            for (double& x : c) x = gauss(rng);
        } while (norm(c) == 0.0);
        normalize_in_place(c);
    }

    SynthData out;
    out.embeddings.E = Matrix(n, d);
    out.cluster_of.resize(n);
    std::vector<std::vector<std::size_t>> members(cfg.n_clusters);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = synth_cluster_of(i, n, cfg.n_clusters);
        out.cluster_of[i] = k;
        members[k].push_back(i);
        Vector e = centers[k];
        for (double& x : e) x += cfg.emb_noise * per_coord * gauss(rng);
        if (norm(e) == 0.0) e = centers[k];
        normalize_in_place(e);
        std::copy(e.begin(), e.end(), out.embeddings.E.row(i).begin());
        std::ostringstream name;
        name << "label" << std::setw(2) << std::setfill('0') << i;
        out.embeddings.names.push_back(name.str());
    }

    auto make_split = [&](std::size_t count, std::uint64_t stream) {
        Dataset ds;
        ds.n_labels = n;
        ds.d = d;
        ds.names = out.embeddings.names;
        ds.samples.reserve(count);
        std::mt19937_64 srng(mix_seed(cfg.seed, stream));
        std::uniform_int_distribution<std::size_t> pick_cluster(0, cfg.n_clusters - 1);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t k = pick_cluster(srng);
            LabelVector y(n, kNegative);
            for (std::size_t i = 0; i < n; ++i) {
                const double p = out.cluster_of[i] == k ? cfg.p_in : cfg.p_out;
                if (uni(srng) < p) y[i] = kPositive;
            }
            if (std::none_of(y.begin(), y.end(), [](int v) { return v == kPositive; })) {
                const auto& m = members[k];
                y[m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(srng)]] = kPositive;
            }
            Vector f(d, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                if (y[i] == kPositive)
                    for (std::size_t j = 0; j < d; ++j) f[j] += out.embeddings.E(i, j);
            normalize_in_place(f);
            for (double& x : f) x += cfg.noise * per_coord * gauss(srng);
            if (norm(f) == 0.0) f.assign(d, per_coord);
            normalize_in_place(f);

            Sample smp;
            auto [weak, strong] = augment(f, cfg.augment, mix_seed(cfg.seed, stream + 100, s));
            smp.f_base = std::move(f);
            smp.f_weak = std::move(weak);
            smp.f_strong = std::move(strong);
            smp.y = y;
            smp.y_full = std::move(y);
            ds.samples.push_back(std::move(smp));
        }
        return ds;
    };
    out.train = make_split(cfg.n_train, 2);
    out.test = make_split(cfg.n_test, 3);

    out.cooccurrence = Matrix(n, n);
    for (const auto& s : out.train.samples)
        for (std::size_t i = 0; i < n; ++i)
            if (s.y[i] == kPositive)
                for (std::size_t j = 0; j < n; ++j)
                    if (s.y[j] == kPositive) out.cooccurrence(i, j) += 1.0;
    return out;
}

} // namespace scpnet
