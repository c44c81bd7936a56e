#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/dhrnet.hpp"
#include "crosr/error.hpp"
#include "crosr/evt.hpp"
#include "crosr/serialize.hpp"
#include "crosr/tensor.hpp"
#include "crosr/trainer.hpp"

namespace crosr {

struct ClassProfile {
    std::size_t class_id = 0;
    std::vector<double> mean;
    evt::WeibullParams weibull;

    friend bool operator==(const ClassProfile&, const ClassProfile&) = default;
};

// How the decision threshold is applied to the N+1 probabilities.
//   max-probability: unknown when the unknown class wins or the top probability is at most theta.
//   unknown-probability: unknown when the unknown class wins or its probability reaches theta.
enum class ThresholdRule { kMaxProbability, kUnknownProbability };

inline std::string to_string(ThresholdRule r) {
    return r == ThresholdRule::kMaxProbability ? "max-probability" : "unknown-probability";
}

inline ThresholdRule parse_threshold_rule(const std::string& s) {
    if (s == "max-probability") return ThresholdRule::kMaxProbability;
    if (s == "unknown-probability") return ThresholdRule::kUnknownProbability;
    throw ConfigError("unknown threshold rule '" + s + "'");
}

struct OpenSetConfig {
    FeatureMode mode = FeatureMode::kJoint;
    evt::TailFitConfig tail;
    double threshold = 0.5;
    ThresholdRule rule = ThresholdRule::kMaxProbability;

    // Rank calibration is on only for more than ten known classes.
    static OpenSetConfig defaults_for(std::size_t num_classes, FeatureMode mode) {
        OpenSetConfig c;
        c.mode = mode;
        c.tail.rank_calibration = num_classes > 10;
        return c;
    }
};

struct OpenSetPrediction {
    std::vector<double> probabilities;  // N+1 entries; index N is the unknown class
    std::size_t label = 0;
    double confidence = 0.0;
};

inline double distance(std::span<const double> feature, const ClassProfile& profile) {
    if (feature.size() != profile.mean.size()) {
        throw InputError("feature dimension " + std::to_string(feature.size()) + " does not match class " +
                         std::to_string(profile.class_id) + " mean dimension " + std::to_string(profile.mean.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < feature.size(); ++i) {
        const double d = feature[i] - profile.mean[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Calibrated activation vector: y_i * w_i for known classes, then the
// activation mass removed from them, sum_i y_i (1 - w_i), as the unknown entry.
inline std::vector<double> recalibrate(std::span<const double> y, std::span<const double> w) {
    if (y.size() != w.size()) throw InputError("recalibrate: activation and belongingness lengths differ");
    std::vector<double> out(y.size() + 1, 0.0);
    double unknown = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(w[i] >= 0.0 && w[i] <= 1.0)) throw InputError("recalibrate: belongingness outside [0, 1]");
        out[i] = y[i] * w[i];
        unknown += y[i] * (1.0 - w[i]);
    }
    out[y.size()] = unknown;
    return out;
}

// Checks that recalibration moved activation mass without creating any.
inline bool mass_conservation_check(std::span<const double> y, std::span<const double> w, double abs_tol = 1e-9,
                                    double rel_tol = 1e-12) {
    const auto y_hat = recalibrate(y, w);
    const double before = std::accumulate(y.begin(), y.end(), 0.0);
    const double after = std::accumulate(y_hat.begin(), y_hat.end(), 0.0);
    double scale = 0.0;
    for (double v : y) scale += std::abs(v);
    return std::abs(after - before) <= abs_tol + rel_tol * scale;
}

// 1-based rank of each entry when y is sorted in descending order; ties keep index order.
inline std::vector<std::size_t> descending_ranks(std::span<const double> y) {
    std::vector<std::size_t> order(y.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });
    std::vector<std::size_t> rank(y.size());
    for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;
    return rank;
}

inline std::size_t decide(std::span<const double> probabilities, double threshold, ThresholdRule rule) {
    const std::size_t unknown = probabilities.size() - 1;
    const std::size_t best = argmax(probabilities);
    if (best == unknown) return unknown;
    if (rule == ThresholdRule::kMaxProbability) return probabilities[best] <= threshold ? unknown : best;
    return probabilities[unknown] >= threshold ? unknown : best;
}

class OpenSetModel {
   public:
    OpenSetModel() = default;
    OpenSetModel(DHRNetModel network, OpenSetConfig config, std::vector<ClassProfile> profiles)
        : network_(std::move(network)), config_(config), profiles_(std::move(profiles)) {
        if (profiles_.size() != network_.config().num_classes) {
            throw ConfigError("open-set model needs one profile per known class");
        }
    }

    const DHRNetModel& network() const { return network_; }
    const OpenSetConfig& config() const { return config_; }
    const std::vector<ClassProfile>& profiles() const { return profiles_; }
    std::size_t num_classes() const { return profiles_.size(); }

    void set_threshold(double theta) { config_.threshold = theta; }

    // Open-set probabilities from precomputed activation and feature vectors.
    std::vector<double> probabilities(std::span<const double> y, std::span<const double> feature) const {
        const std::size_t n = profiles_.size();
        if (y.size() != n) throw InputError("activation vector length does not match class count");
        const auto ranks = descending_ranks(y);
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double r = evt::rank_calibrator(ranks[i], config_.tail.alpha, config_.tail.rank_calibration);
            w[i] = evt::class_belongingness(distance(feature, profiles_[i]), profiles_[i].weibull, r);
        }
        return nn::softmax(recalibrate(y, w));
    }

    // Open-set probabilities for every sample of a batch tensor.
    std::vector<std::vector<double>> score(const Tensor& images) const {
        const ForwardOutput out = network_.forward(images, Mode::kEval);
        const std::size_t batch = images.dim(0), n = profiles_.size();
        const std::size_t zd = config_.mode == FeatureMode::kJoint ? out.z.size() / batch : 0;
        if (config_.mode == FeatureMode::kJoint && zd == 0) {
            throw ConfigError("joint features need a decoder; the plain variant has no latent codes");
        }
        std::vector<std::vector<double>> result(batch);
        std::vector<double> feature(n + zd);
        for (std::size_t b = 0; b < batch; ++b) {
            auto y = out.y.data().subspan(b * n, n);
            std::copy(y.begin(), y.end(), feature.begin());
            if (zd) {
                auto z = out.z.data().subspan(b * zd, zd);
                std::copy(z.begin(), z.end(), feature.begin() + static_cast<std::ptrdiff_t>(n));
            }
            result[b] = probabilities(y, feature);
        }
        return result;
    }

    std::vector<OpenSetPrediction> predict(const Tensor& images) const {
        std::vector<OpenSetPrediction> out;
        for (auto& p : score(images)) {
            OpenSetPrediction pred;
            pred.label = decide(p, config_.threshold, config_.rule);
            pred.confidence = *std::max_element(p.begin(), p.end());
            pred.probabilities = std::move(p);
            out.push_back(std::move(pred));
        }
        return out;
    }

    io::Container to_container() const {
        io::Container c = network_.to_container();
        c.header.put("file.kind", "openset");
        c.header.put("openset.mode", to_string(config_.mode));
        c.header.put("openset.alpha", io::format_double(config_.tail.alpha));
        c.header.put("openset.tail_size", config_.tail.tail_size);
        c.header.put("openset.rank_calibration", config_.tail.rank_calibration ? "on" : "off");
        c.header.put("openset.threshold", io::format_double(config_.threshold));
        c.header.put("openset.threshold_rule", to_string(config_.rule));
        c.header.put("openset.profiles", profiles_.size());
        for (const auto& p : profiles_) {
            const std::string base = "profile." + std::to_string(p.class_id);
            c.arrays.push_back({base + ".mean", Tensor(Shape{p.mean.size()}, p.mean)});
            c.arrays.push_back({base + ".weibull", Tensor(Shape{2}, {p.weibull.shape, p.weibull.scale})});
        }
        return c;
    }

    static OpenSetModel from_container(const io::Container& c) {
        if (io::get<std::string>(c.header, "file.kind") != "openset") {
            throw FormatError("file does not hold an open-set model");
        }
        DHRNetModel net = DHRNetModel::from_container(c);
        OpenSetConfig cfg;
        try {
            cfg.mode = parse_feature_mode(io::get<std::string>(c.header, "openset.mode"));
            cfg.rule = parse_threshold_rule(io::get<std::string>(c.header, "openset.threshold_rule"));
        } catch (const ConfigError& e) {
            throw FormatError(e.what());
        }
        cfg.tail.alpha = io::get<double>(c.header, "openset.alpha");
        cfg.tail.tail_size = io::get<std::size_t>(c.header, "openset.tail_size");
        cfg.tail.rank_calibration = io::get<std::string>(c.header, "openset.rank_calibration") == "on";
        cfg.threshold = io::get<double>(c.header, "openset.threshold");
        const auto count = io::get<std::size_t>(c.header, "openset.profiles");
        std::vector<ClassProfile> profiles;
        for (std::size_t i = 0; i < count; ++i) {
            const std::string base = "profile." + std::to_string(i);
            ClassProfile p;
            p.class_id = i;
            const Tensor& mean = c.array(base + ".mean");
            p.mean.assign(mean.data().begin(), mean.data().end());
            const Tensor& wb = c.array(base + ".weibull");
            if (wb.size() != 2) throw FormatError("array '" + base + ".weibull' must hold (shape, scale)");
            p.weibull = {wb[0], wb[1]};
            profiles.push_back(std::move(p));
        }
        if (profiles.size() != net.config().num_classes) {
            throw FormatError("profile count does not match the network's class count");
        }
        return OpenSetModel(std::move(net), cfg, std::move(profiles));
    }

    void save(const std::string& path) const { io::write_file(path, io::encode(to_container())); }
    static OpenSetModel load(const std::string& path) { return from_container(io::decode(io::read_file(path))); }

    friend bool operator==(const OpenSetModel& a, const OpenSetModel& b) {
        return a.network_ == b.network_ && a.profiles_ == b.profiles_ && a.config_.mode == b.config_.mode &&
               a.config_.threshold == b.config_.threshold && a.config_.rule == b.config_.rule &&
               a.config_.tail.alpha == b.config_.tail.alpha && a.config_.tail.tail_size == b.config_.tail.tail_size &&
               a.config_.tail.rank_calibration == b.config_.tail.rank_calibration;
    }

   private:
    DHRNetModel network_;
    OpenSetConfig config_;
    std::vector<ClassProfile> profiles_;
};

// Activation and feature vectors for a dataset, computed in batches.
struct FeatureTable {
    std::vector<std::vector<double>> y;
    std::vector<std::vector<double>> features;
};

inline FeatureTable compute_features(const DHRNetModel& model, const Tensor& images, FeatureMode mode,
                                     std::size_t batch = 256) {
    FeatureTable t;
    const std::size_t total = images.dim(0), n = model.config().num_classes;
    for (std::size_t begin = 0; begin < total; begin += batch) {
        const std::size_t end = std::min(total, begin + batch);
        const Tensor f = extract_features(model, nn::slice_batch(images, begin, end), mode);
        const std::size_t dim = f.dim(1);
        for (std::size_t i = 0; i < end - begin; ++i) {
            auto row = f.data().subspan(i * dim, dim);
            t.features.emplace_back(row.begin(), row.end());
            t.y.emplace_back(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n));
        }
    }
    return t;
}

// Per-class means and tail Weibull fits from feature rows. Only rows whose
// activation arg-max equals the label take part.
inline std::vector<ClassProfile> fit_class_profiles(const FeatureTable& table, std::span<const std::size_t> labels,
                                                    std::size_t num_classes, const evt::TailFitConfig& tail) {
    tail.validate();
    if (table.features.size() != labels.size() || table.y.size() != labels.size()) {
        throw InputError("feature table and label counts differ");
    }
    std::vector<std::vector<std::size_t>> members(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) throw InputError("profile fitting received an unknown-class label");
        if (argmax(table.y[i]) == labels[i]) members[labels[i]].push_back(i);
    }
    std::vector<ClassProfile> profiles;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (members[c].size() <= tail.tail_size) {
            throw FitError("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) +
                           " correctly classified samples; more than tail_size=" + std::to_string(tail.tail_size) +
                           " are required");
        }
        ClassProfile p;
        p.class_id = c;
        const std::size_t dim = table.features[members[c][0]].size();
        p.mean.assign(dim, 0.0);
        for (auto i : members[c])
            for (std::size_t k = 0; k < dim; ++k) p.mean[k] += table.features[i][k];
        for (auto& v : p.mean) v /= static_cast<double>(members[c].size());
        std::vector<double> dists;
        dists.reserve(members[c].size());
        for (auto i : members[c]) dists.push_back(distance(table.features[i], p));
        try {
            p.weibull = evt::fit_weibull_tail(dists, tail.tail_size);
        } catch (const Error& e) {
            throw FitError("class " + std::to_string(c) + ": " + e.what());
        }
        profiles.push_back(std::move(p));
    }
    return profiles;
}

inline OpenSetModel fit_profiles(const DHRNetModel& model, const bench::LabeledDataset& known_train,
                                 const OpenSetConfig& config) {
    const std::size_t n = model.config().num_classes;
    if (known_train.num_classes != n) throw InputError("training data class count does not match the network");
    if (known_train.has_unknowns()) {
        throw InputError("profile fitting received unknown-class samples; only known classes may be used");
    }
    config.tail.validate();
    const FeatureTable table = compute_features(model, known_train.images, config.mode);
    return OpenSetModel(model, config, fit_class_profiles(table, known_train.labels, n, config.tail));
}

// Scores a dataset with `threads` workers; results are independent of the
// thread count.
template <typename Scorer>
std::vector<std::vector<double>> score_parallel(const Scorer& scorer, const Tensor& images, std::size_t threads,
                                                std::size_t batch = 256) {
    const std::size_t total = images.dim(0);
    const std::size_t chunks = (total + batch - 1) / batch;
    std::vector<std::vector<std::vector<double>>> parts(chunks);
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
    std::vector<std::exception_ptr> failures(workers);
    auto work = [&](std::size_t first) {
        try {
            for (std::size_t c = first; c < chunks; c += workers) {
                const std::size_t begin = c * batch, end = std::min(total, begin + batch);
                parts[c] = scorer(nn::slice_batch(images, begin, end));
            }
        } catch (...) {
            failures[first] = std::current_exception();
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t);
    }
    for (auto& f : failures)
        if (f) std::rethrow_exception(f);
    std::vector<std::vector<double>> out;
    out.reserve(total);
    for (auto& p : parts)
        for (auto& row : p) out.push_back(std::move(row));
    return out;
}

// Closed-set softmax over N classes with an always-zero unknown entry, so the
// thresholded-softmax baseline shares the open-set decision code.
inline std::vector<std::vector<double>> softmax_scores(const DHRNetModel& model, const Tensor& images) {
    const Tensor y = model.forward(images, Mode::kEval).y;
    const std::size_t batch = images.dim(0), n = model.config().num_classes;
    std::vector<std::vector<double>> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        out[b] = nn::softmax(y.data().subspan(b * n, n));
        out[b].push_back(0.0);
    }
    return out;
}

}  // namespace crosr
