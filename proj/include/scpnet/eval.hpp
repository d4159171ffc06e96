#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "losses.hpp"
#include "numcore.hpp"

namespace scpnet {

/// Per-sample per-class scores with binary ground truth (rows are samples).
struct ScoreTable {
    Matrix scores;
    Matrix gt;

    void validate() const {
        if (scores.rows() != gt.rows() || scores.cols() != gt.cols()) throw ShapeError("score table: shape mismatch");
        for (double g : gt.data())
            if (g != 0.0 && g != 1.0) throw ValidationError("score table: ground truth must be 0 or 1");
    }
};

/// Average precision of one class: mean over positives of precision at the
/// positive's rank. Samples are ranked by descending score, ties by index.
/// Returns nullopt when there is no positive.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const double> gt) {
    if (scores.size() != gt.size()) throw ShapeError("average_precision: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double hits = 0.0, sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (gt[order[r]] != 0.0) {
            hits += 1.0;
            sum += hits / static_cast<double>(r + 1);
        }
    }
    if (hits == 0.0) return std::nullopt;
    return sum / hits;
}

struct MapReport {
    std::vector<std::optional<double>> per_class; // nullopt: class had no positive and was skipped
    double map = 0.0;

    std::size_t skipped() const {
        return static_cast<std::size_t>(std::count(per_class.begin(), per_class.end(), std::nullopt));
    }
};

inline MapReport mean_ap(const ScoreTable& t) {
    t.validate();
    MapReport rep;
    const std::size_t m = t.scores.rows(), n = t.scores.cols();
    std::vector<double> col(m), g(m);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < m; ++i) {
            col[i] = t.scores(i, c);
            g[i] = t.gt(i, c);
        }
        rep.per_class.push_back(average_precision(col, g));
        if (rep.per_class.back()) {
            sum += *rep.per_class.back();
            ++used;
        }
    }
    if (used == 0) throw ValidationError("mean_ap: no class has a positive sample");
    rep.map = sum / static_cast<double>(used);
    return rep;
}

/// Fraction of selected (sample, class) pairs that are true positives;
/// nullopt when nothing was selected.
inline std::optional<double> pseudo_precision(std::span<const ConfidentSet> selections,
                                              std::span<const LabelVector> y_full) {
    if (selections.size() != y_full.size()) throw ShapeError("pseudo_precision: length mismatch");
    std::size_t total = 0, correct = 0;
    for (std::size_t i = 0; i < selections.size(); ++i) {
        for (std::size_t c : selections[i].indices) {
            ++total;
            if (y_full[i].at(c) == kPositive) ++correct;
        }
    }
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
}

/// Running tally for pseudo_precision when selections are not kept around.
struct PrecisionCounter {
    std::size_t selected = 0;
    std::size_t correct = 0;

    void add(const ConfidentSet& O, std::span<const int> y_full) {
        for (std::size_t c : O.indices) {
            ++selected;
            if (y_full[c] == kPositive) ++correct;
        }
    }
    std::optional<double> value() const {
        if (selected == 0) return std::nullopt;
        return static_cast<double>(correct) / static_cast<double>(selected);
    }
};

// CSV: `class,ap` rows (NA for skipped classes) then a final `mAP,<value>` row.
inline std::string format_eval_report(const MapReport& rep, const std::vector<std::string>& names) {
    if (names.size() != rep.per_class.size()) throw ShapeError("eval report: name count mismatch");
    std::ostringstream os;
    os << std::setprecision(17) << "class,ap\n";
    for (std::size_t c = 0; c < names.size(); ++c) {
        os << names[c] << ',';
        if (rep.per_class[c]) os << *rep.per_class[c];
        else os << "NA";
        os << '\n';
    }
    os << "mAP," << rep.map << '\n';
    return os.str();
}

} // namespace scpnet
