#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "crosr/error.hpp"

namespace crosr::evt {

// Two-parameter Weibull: CDF(d) = 1 - exp(-(d / scale)^shape).
struct WeibullParams {
    double shape = 1.0;  // m
    double scale = 1.0;  // eta, in distance units

    void validate() const {
        if (!(std::isfinite(shape) && shape > 0.0 && std::isfinite(scale) && scale > 0.0)) {
            throw FitError("Weibull parameters must be positive and finite");
        }
    }

    friend bool operator==(const WeibullParams&, const WeibullParams&) = default;
};

struct TailFitConfig {
    std::size_t tail_size = 20;  // number of extrema defining the tail
    double alpha = 10.0;         // rank-calibration breadth
    bool rank_calibration = false;

    void validate() const {
        if (tail_size < 2) throw ConfigError("tail_size must be at least 2");
        if (!(alpha >= 1.0)) throw ConfigError("alpha must be at least 1");
    }
};

inline double weibull_cdf(double d, const WeibullParams& p) {
    if (!(d >= 0.0)) throw InputError("Weibull CDF needs a nonnegative distance");
    return -std::expm1(-std::pow(d / p.scale, p.shape));
}

inline double log_likelihood(std::span<const double> samples, const WeibullParams& p) {
    double ll = 0.0;
    for (double d : samples) {
        const double r = d / p.scale;
        ll += std::log(p.shape / p.scale) + (p.shape - 1.0) * std::log(r) - std::pow(r, p.shape);
    }
    return ll;
}

namespace detail {

// Profile-likelihood score for the shape parameter on samples normalised to
// (0, 1]: sum(x^m ln x) / sum(x^m) - 1/m - mean(ln x). Increasing in m.
struct ShapeEquation {
    std::span<const double> x;
    std::span<const double> log_x;
    double mean_log = 0.0;

    void eval(double m, double& value, double& slope) const {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double p = std::pow(x[i], m);
            s0 += p;
            s1 += p * log_x[i];
            s2 += p * log_x[i] * log_x[i];
        }
        const double ratio = s1 / s0;
        value = ratio - 1.0 / m - mean_log;
        slope = s2 / s0 - ratio * ratio + 1.0 / (m * m);
    }
};

}  // namespace detail

// Maximum-likelihood fit over all samples. The shape solves the profile
// score equation by Newton's method, started from the coefficient-of-variation
// estimate and safeguarded by bisection; the scale follows in closed form.
inline WeibullParams fit_weibull(std::span<const double> samples) {
    const std::size_t n = samples.size();
    if (n < 2) throw FitError("Weibull fit needs at least two samples");
    const double hi_d = *std::max_element(samples.begin(), samples.end());
    const double lo_d = *std::min_element(samples.begin(), samples.end());
    if (!(lo_d > 0.0) || !std::isfinite(hi_d)) {
        throw FitError("Weibull fit needs positive finite samples (smallest is " + std::to_string(lo_d) + ")");
    }
    if (lo_d == hi_d) throw FitError("degenerate Weibull fit: all samples equal " + std::to_string(lo_d));

    std::vector<double> x(n), log_x(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = samples[i] / hi_d;
        log_x[i] = std::log(x[i]);
    }
    const double mean_log = std::accumulate(log_x.begin(), log_x.end(), 0.0) / static_cast<double>(n);
    const detail::ShapeEquation eq{x, log_x, mean_log};

    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    const double cv = std::sqrt(var) / mean;

    double lo = 0.01, hi = 100.0, g = 0.0, dg = 0.0;
    eq.eval(lo, g, dg);
    if (g > 0.0) throw FitError("Weibull shape below 0.01; tail is not Weibull-like");
    eq.eval(hi, g, dg);
    while (g < 0.0) {
        lo = hi;
        hi *= 10.0;
        if (hi > 1e6) throw FitError("Weibull shape above 1e6; tail is nearly constant");
        eq.eval(hi, g, dg);
    }

    auto finish = [&](double m) {
        double s0 = 0.0;
        for (double v : x) s0 += std::pow(v, m);
        return WeibullParams{m, hi_d * std::pow(s0 / static_cast<double>(n), 1.0 / m)};
    };
    double m = std::clamp(cv > 0.0 ? std::pow(cv, -1.086) : 1.0, lo, hi);
    for (int iter = 0; iter < 100; ++iter) {
        eq.eval(m, g, dg);
        if (g == 0.0) return finish(m);
        if (g < 0.0) lo = m; else hi = m;
        double next = m - g / dg;
        if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
        const double step = std::abs(next - m);
        m = next;
        if (step <= 1e-13 * m || hi - lo <= 1e-13 * m) return finish(m);
    }
    throw NumericalError("Weibull shape iteration did not converge in 100 steps");
}

// Fits the `tail_size` largest distances.
inline WeibullParams fit_weibull_tail(std::span<const double> distances, std::size_t tail_size) {
    if (tail_size < 2) throw ConfigError("tail_size must be at least 2");
    if (distances.size() < tail_size) {
        throw InputError("tail fit needs " + std::to_string(tail_size) + " distances, got " +
                         std::to_string(distances.size()));
    }
    for (double d : distances)
        if (!(d >= 0.0)) throw InputError("distances must be nonnegative");
    std::vector<double> tail(distances.begin(), distances.end());
    std::partial_sort(tail.begin(), tail.begin() + static_cast<std::ptrdiff_t>(tail_size), tail.end(),
                      std::greater<>());
    tail.resize(tail_size);
    return fit_weibull(tail);
}

// R_alpha(rank) = max(0, (alpha - rank) / alpha) for 1-based ranks; 1 when disabled.
inline double rank_calibrator(std::size_t rank, double alpha, bool enabled = true) {
    if (rank < 1) throw InputError("ranks are 1-based");
    if (!enabled) return 1.0;
    return std::max(0.0, (alpha - static_cast<double>(rank)) / alpha);
}

// Probability that a sample at distance d belongs to the class: 1 - R * CDF(d).
inline double class_belongingness(double d, const WeibullParams& p, double r) {
    if (!(r >= 0.0 && r <= 1.0)) throw InputError("rank weight must lie in [0, 1]");
    return 1.0 - r * weibull_cdf(d, p);
}

}  // namespace crosr::evt
