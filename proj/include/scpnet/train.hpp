#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "data.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "numcore.hpp"
#include "prior.hpp"

namespace scpnet {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moments, one slot per parameter tensor (Z0, then each W).
struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::uint64_t t = 0;
};

inline void adam_update(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::uint64_t t, const AdamHyper& h) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols()) throw ShapeError("adam: parameter/gradient shape mismatch");
    if (m.size() != param.size()) {
        m = Matrix(param.rows(), param.cols());
        v = Matrix(param.rows(), param.cols());
    }
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    auto& p = param.data();
    const auto& g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m.data()[i] = h.beta1 * m.data()[i] + (1.0 - h.beta1) * g[i];
        v.data()[i] = h.beta2 * v.data()[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mhat = m.data()[i] / bc1;
        const double vhat = v.data()[i] / bc2;
        p[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

inline void adam_step(ModelParams& params, const Matrix& dZ0, std::span<const Matrix> dW, AdamState& state,
                      const AdamHyper& h) {
    if (dW.size() != params.W.size()) throw ShapeError("adam_step: layer count mismatch");
    const std::size_t slots = 1 + params.W.size();
    state.m.resize(slots);
    state.v.resize(slots);
    ++state.t;
    adam_update(params.Z0, dZ0, state.m[0], state.v[0], state.t, h);
    for (std::size_t l = 0; l < params.W.size(); ++l)
        adam_update(params.W[l], dW[l], state.m[l + 1], state.v[l + 1], state.t, h);
}

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    AdamHyper adam;
    GraphMode graph_mode = GraphMode::Static;
    LossWeights weights;
    std::uint64_t seed = 0;
    bool enable_sam = true;
    bool enable_cst = true;
    bool enable_dstl = true;

    std::size_t gcn_layers = kDefaultGcnLayers;
    double tau = kDefaultTau;
    double leaky_slope = kDefaultLeakySlope;

    std::size_t K = 15;
    double s = 0.2;
    double tau_prime = 1.0;

    double T_base = 0.9;
    double T_min = 0.5;
    // Linear ramp of beta from 1 down to weights.beta over this many epochs; 0 disables.
    std::size_t beta_ramp_epochs = 0;

    // Redraw weak/strong views from f_base every epoch instead of using the stored ones.
    bool reaugment = true;
    AugmentConfig augment;

    void validate() const {
        if (epochs < 1) throw ParameterError("train: epochs must be >= 1");
        if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
        if (!(adam.lr > 0.0)) throw ParameterError("train: learning_rate must be > 0");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
            throw ParameterError("train: adam betas must lie in [0, 1)");
        if (!(adam.eps > 0.0)) throw ParameterError("train: adam eps must be > 0");
        if (gcn_layers < 1) throw ParameterError("train: gcn_layers must be >= 1");
        if (!(tau > 0.0)) throw ParameterError("train: tau must be > 0");
        weights.validate();
        augment.validate();
    }

    LossWeights effective_weights(std::size_t epoch) const {
        LossWeights w = weights;
        if (!enable_cst) w.lambda_cst = 0.0;
        if (!enable_dstl) w.lambda_dstl = 0.0;
        if (beta_ramp_epochs > 0 && epoch < beta_ramp_epochs) {
            const double frac = static_cast<double>(epoch) / static_cast<double>(beta_ramp_epochs);
            w.beta = 1.0 + (weights.beta - 1.0) * frac;
        }
        return w;
    }
};

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double loss_total = 0.0;
    double loss_cls = 0.0;
    double loss_cst = 0.0;
    double loss_dstl = 0.0;
    std::optional<double> pseudo_precision;      // selections from raw weak-view probabilities
    std::optional<double> pseudo_precision_sasc; // selections from calibrated weak-view probabilities
    std::optional<double> test_map;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;

    bool operator==(const TrainLog&) const = default;
};

// CSV with the fixed header below; absent values are written as NA.
inline std::string format_train_log(const TrainLog& log) {
    std::ostringstream os;
    os << std::setprecision(17) << "epoch,loss_total,loss_cls,loss_cst,loss_dstl,pseudo_precision,test_map\n";
    auto opt = [&](const std::optional<double>& v) {
        if (v) os << *v;
        else os << "NA";
    };
    for (const auto& r : log.epochs) {
        os << r.epoch << ',' << r.loss_total << ',' << r.loss_cls << ',' << r.loss_cst << ',' << r.loss_dstl << ',';
        opt(r.pseudo_precision);
        os << ',';
        opt(r.test_map);
        os << '\n';
    }
    return os.str();
}

/// Binary ground truth for evaluation: y_full when present, else the
/// annotated positives of y.
inline ScoreTable score_dataset(const ModelParams& params, const PriorGraph& graph, bool enable_sam,
                                const Dataset& ds) {
    const Matrix Z_star = enable_sam ? sam_forward(params, graph) : params.Z0;
    ScoreTable t{Matrix(ds.samples.size(), ds.n_labels), Matrix(ds.samples.size(), ds.n_labels)};
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        const Prediction pred = predict(s.f_base, Z_star, params.tau);
        const LabelVector& truth = s.y_full ? *s.y_full : s.y;
        for (std::size_t c = 0; c < ds.n_labels; ++c) {
            t.scores(i, c) = pred.p[c];
            t.gt(i, c) = truth[c] == kPositive ? 1.0 : 0.0;
        }
    }
    return t;
}

struct BatchStats {
    double total = 0.0;
    double cls = 0.0;
    double cst = 0.0;
    double dstl = 0.0;
};

/// Owns the parameters, optimizer state, thresholds and current graph for
/// one training run.
class Trainer {
public:
    Trainer(TrainConfig config, const Dataset& train, const LabelEmbeddings& emb, const Dataset* test = nullptr)
        : cfg_(std::move(config)), train_(train), test_(test) {
        cfg_.validate();
        train_.validate();
        emb.validate();
        if (emb.size() != train_.n_labels || emb.dim() != train_.d)
            throw ShapeError("train: embeddings are " + std::to_string(emb.size()) + "x" + std::to_string(emb.dim()) +
                             ", dataset expects " + std::to_string(train_.n_labels) + "x" +
                             std::to_string(train_.d));
        if (test_ && (test_->n_labels != train_.n_labels || test_->d != train_.d))
            throw ShapeError("train: test set dimensions differ from training set");
        params_ = init_model(emb, cfg_.gcn_layers, cfg_.tau, mix_seed(cfg_.seed, 30), cfg_.leaky_slope);
        switch (cfg_.graph_mode) {
            case GraphMode::None: graph_ = identity_graph(emb.size()); break;
            case GraphMode::Static: graph_ = build_prior(emb, cfg_.K, cfg_.s, cfg_.tau_prime); break;
            case GraphMode::Dynamic: graph_ = dynamic_graph(params_.Z0, cfg_.K, cfg_.s, cfg_.tau_prime); break;
        }
        // Calibrated pseudo-label precision is always measured against a real
        // prior, even when the model itself runs without one.
        calibration_ = cfg_.graph_mode == GraphMode::None ? build_prior(emb, cfg_.K, cfg_.s, cfg_.tau_prime) : graph_;
        thresholds_ = ThresholdState::make(emb.size(), cfg_.T_base, cfg_.T_min);
    }

    const ModelParams& params() const noexcept { return params_; }
    const PriorGraph& graph() const noexcept { return graph_; }
    const ThresholdState& thresholds() const noexcept { return thresholds_; }
    const TrainLog& log() const noexcept { return log_; }
    const TrainConfig& config() const noexcept { return cfg_; }

    /// One optimization step over the given sample indices (mean loss).
    BatchStats step(std::span<const std::size_t> batch) {
        if (batch.empty()) throw ParameterError("train: empty batch");
        const LossWeights w = cfg_.effective_weights(epoch_);
        const bool pessl = w.lambda_cst > 0.0 || w.lambda_dstl > 0.0;
        SamTrace trace;
        const Matrix* Z_star = &params_.Z0;
        if (cfg_.enable_sam) {
            trace = sam_forward_traced(params_, graph_);
            Z_star = &trace.Z_star;
        }
        Matrix dZ_star(params_.labels(), params_.dim());
        Vector df(params_.dim());
        BatchStats stats;
        const double inv_b = 1.0 / static_cast<double>(batch.size());

        for (std::size_t idx : batch) {
            const Sample& s = train_.samples.at(idx);
            Vector weak_storage, strong_storage;
            std::span<const double> f_weak = s.f_weak, f_strong = s.f_strong;
            if (cfg_.reaugment) {
                std::tie(weak_storage, strong_storage) =
                    augment(s.f_base, cfg_.augment, mix_seed(mix_seed(cfg_.seed, 40, epoch_), 0, idx));
                f_weak = weak_storage;
                f_strong = strong_storage;
            }
            const Prediction pw = predict(f_weak, *Z_star, params_.tau);
            Prediction ps;
            if (pessl) ps = predict(f_strong, *Z_star, params_.tau);
            const std::span<const double> strong_logits = pessl ? std::span<const double>(ps.logits) : pw.logits;

            TotalLoss loss = total_loss(pw.logits, strong_logits, s.y, graph_, thresholds_, w);
            guard(loss, idx);
            stats.cls += loss.cls * inv_b;
            stats.cst += loss.cst * inv_b;
            stats.dstl += loss.dstl * inv_b;
            stats.total += loss.total * inv_b;

            accumulate_hits(thresholds_, pw.p);
            if (s.y_full) {
                precision_raw_.add(confident_set(pw.p, thresholds_.T, w.K_conf), *s.y_full);
                precision_sasc_.add(confident_set(sasc(pw.p, calibration_.A_star), thresholds_.T, w.K_conf), *s.y_full);
            }

            for (double& g : loss.grad_logits_weak) g *= inv_b;
            predict_backward(f_weak, *Z_star, params_.tau, loss.grad_logits_weak, dZ_star, df);
            if (pessl) {
                for (double& g : loss.grad_logits_strong) g *= inv_b;
                predict_backward(f_strong, *Z_star, params_.tau, loss.grad_logits_strong, dZ_star, df);
            }
        }

        Matrix dZ0;
        std::vector<Matrix> dW;
        if (cfg_.enable_sam) {
            sam_backward(params_, graph_, trace, dZ_star, dZ0, dW);
        } else {
            dZ0 = std::move(dZ_star);
            dW.assign(params_.layers(), Matrix(params_.dim(), params_.dim()));
        }
        adam_step(params_, dZ0, dW, adam_, cfg_.adam);
        require_finite(params_.Z0.data(), "train: label table after update");

        epoch_stats_.total += stats.total * static_cast<double>(batch.size());
        epoch_stats_.cls += stats.cls * static_cast<double>(batch.size());
        epoch_stats_.cst += stats.cst * static_cast<double>(batch.size());
        epoch_stats_.dstl += stats.dstl * static_cast<double>(batch.size());
        epoch_samples_ += batch.size();
        return stats;
    }

    /// Closes the current epoch: thresholds, dynamic graph refresh,
    /// evaluation and the log record.
    const EpochRecord& end_epoch() {
        EpochRecord rec;
        rec.epoch = epoch_ + 1;
        const double denom = epoch_samples_ ? static_cast<double>(epoch_samples_) : 1.0;
        rec.loss_total = epoch_stats_.total / denom;
        rec.loss_cls = epoch_stats_.cls / denom;
        rec.loss_cst = epoch_stats_.cst / denom;
        rec.loss_dstl = epoch_stats_.dstl / denom;
        rec.pseudo_precision = precision_raw_.value();
        rec.pseudo_precision_sasc = precision_sasc_.value();

        finish_epoch(thresholds_);
        if (cfg_.graph_mode == GraphMode::Dynamic) {
            graph_ = dynamic_graph(params_.Z0, cfg_.K, cfg_.s, cfg_.tau_prime);
            calibration_ = graph_;
        }
        if (test_) rec.test_map = mean_ap(score_dataset(params_, graph_, cfg_.enable_sam, *test_)).map;

        epoch_stats_ = {};
        epoch_samples_ = 0;
        precision_raw_ = {};
        precision_sasc_ = {};
        ++epoch_;
        log_.epochs.push_back(rec);
        return log_.epochs.back();
    }

    /// Seeded shuffle of the training set for the current epoch.
    std::vector<std::size_t> epoch_order() const {
        std::vector<std::size_t> order(train_.samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed(cfg_.seed, 20, epoch_));
        std::shuffle(order.begin(), order.end(), rng);
        return order;
    }

    void run_epoch() {
        const auto order = epoch_order();
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
            step(std::span<const std::size_t>(order.data() + start, end - start));
        }
        end_epoch();
    }

    void run() {
        while (epoch_ < cfg_.epochs) run_epoch();
    }

private:
    static void guard(const TotalLoss& loss, std::size_t idx) {
        const char* bad = nullptr;
        if (!std::isfinite(loss.cls)) bad = "loss_cls";
        else if (!std::isfinite(loss.cst)) bad = "loss_cst";
        else if (!std::isfinite(loss.dstl)) bad = "loss_dstl";
        else if (!all_finite(loss.grad_logits_weak) || !all_finite(loss.grad_logits_strong)) bad = "loss gradient";
        if (bad) throw NumericError(std::string("train: non-finite ") + bad + " at sample " + std::to_string(idx));
    }

    TrainConfig cfg_;
    const Dataset& train_;
    const Dataset* test_;
    ModelParams params_;
    PriorGraph graph_;
    PriorGraph calibration_;
    ThresholdState thresholds_;
    AdamState adam_;
    TrainLog log_;
    std::size_t epoch_ = 0;
    BatchStats epoch_stats_;
    std::size_t epoch_samples_ = 0;
    PrecisionCounter precision_raw_;
    PrecisionCounter precision_sasc_;
};

struct TrainResult {
    ModelParams params;
    PriorGraph graph;
    TrainLog log;
};

inline TrainResult train(const TrainConfig& config, const Dataset& train_set, const LabelEmbeddings& emb,
                         const Dataset* test_set = nullptr) {
    Trainer t(config, train_set, emb, test_set);
    t.run();
    return {t.params(), t.graph(), t.log()};
}

} // namespace scpnet
