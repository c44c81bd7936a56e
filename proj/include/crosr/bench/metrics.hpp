#pragma once

#include <cstddef>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/openset.hpp"
#include "crosr/serialize.hpp"

namespace crosr::bench {

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct SweepRow {
    double theta = 0.0;
    double macro_f1 = 0.0;
};

// Open-set evaluation over N known classes plus the unknown class (index N).
struct EvalReport {
    std::size_t num_classes = 0;
    std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction], (N+1) x (N+1)
    std::vector<ClassScores> per_class;
    double macro_f1 = 0.0;
    std::vector<SweepRow> sweep;

    std::string to_text() const {
        std::ostringstream os;
        os << "macro-F1 over " << num_classes + 1 << " classes: " << std::fixed << std::setprecision(4) << macro_f1
           << "\n\nclass      precision  recall     f1         support\n";
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            const auto& s = per_class[c];
            os << std::left << std::setw(11) << (c == num_classes ? std::string("unknown") : std::to_string(c))
               << std::setw(11) << s.precision << std::setw(11) << s.recall << std::setw(11) << s.f1 << s.support
               << "\n";
        }
        os << "\nconfusion (rows: truth, columns: prediction)\n";
        for (const auto& row : confusion) {
            for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << std::right << std::setw(6) << row[j];
            os << "\n";
        }
        return os.str();
    }

    std::string per_class_csv() const {
        std::ostringstream os;
        os << "class,precision,recall,f1,support\n";
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            os << (c == num_classes ? std::string("unknown") : std::to_string(c)) << ','
               << io::format_double(per_class[c].precision) << ',' << io::format_double(per_class[c].recall) << ','
               << io::format_double(per_class[c].f1) << ',' << per_class[c].support << '\n';
        }
        return os.str();
    }
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "theta,macro_f1\n";
    for (const auto& r : rows) os << io::format_double(r.theta) << ',' << io::format_double(r.macro_f1) << '\n';
    return os.str();
}

// Per-class F1 = 2PR / (P + R) with 0/0 taken as 0; macro-F1 is the
// unweighted mean over all N+1 classes.
inline EvalReport macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> truth,
                           std::size_t num_classes) {
    if (predictions.size() != truth.size()) throw InputError("macro_f1: prediction and label counts differ");
    const std::size_t k = num_classes + 1;
    EvalReport r;
    r.num_classes = num_classes;
    r.confusion.assign(k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= k || predictions[i] >= k) throw InputError("macro_f1: label outside [0, N]");
        ++r.confusion[truth[i]][predictions[i]];
    }
    r.per_class.resize(k);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t tp = r.confusion[c][c], predicted = 0, actual = 0;
        for (std::size_t j = 0; j < k; ++j) {
            predicted += r.confusion[j][c];
            actual += r.confusion[c][j];
        }
        auto& s = r.per_class[c];
        s.support = actual;
        s.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        s.recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
        sum += s.f1;
    }
    r.macro_f1 = sum / static_cast<double>(k);
    return r;
}

// Decisions at threshold theta from cached N+1 probability rows.
inline std::vector<std::size_t> decide_all(const std::vector<std::vector<double>>& probabilities, double theta,
                                           ThresholdRule rule) {
    std::vector<std::size_t> out;
    out.reserve(probabilities.size());
    for (const auto& p : probabilities) out.push_back(decide(p, theta, rule));
    return out;
}

inline EvalReport evaluate(const std::vector<std::vector<double>>& probabilities, std::span<const std::size_t> truth,
                           std::size_t num_classes, double theta, ThresholdRule rule) {
    return macro_f1(decide_all(probabilities, theta, rule), truth, num_classes);
}

// theta in {0, 1/points, ..., (points-1)/points}.
inline std::vector<double> default_theta_grid(std::size_t points = 20) {
    std::vector<double> g(points);
    for (std::size_t i = 0; i < points; ++i) g[i] = static_cast<double>(i) / static_cast<double>(points);
    return g;
}

// Macro-F1 at every threshold, reusing the cached probabilities.
inline std::vector<SweepRow> threshold_sweep(const std::vector<std::vector<double>>& probabilities,
                                             std::span<const std::size_t> truth, std::size_t num_classes,
                                             const std::vector<double>& thetas,
                                             ThresholdRule rule = ThresholdRule::kMaxProbability) {
    std::vector<SweepRow> rows;
    for (double t : thetas) {
        if (!(t >= 0.0 && t <= 1.0)) throw InputError("thresholds must lie in [0, 1]");
        rows.push_back({t, evaluate(probabilities, truth, num_classes, t, rule).macro_f1});
    }
    return rows;
}

}  // namespace crosr::bench
