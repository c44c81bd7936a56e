#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "crosr/bench/desk.hpp"
#include "crosr/bench/idx.hpp"
#include "crosr/bench/metrics.hpp"
#include "crosr/bench/protocols.hpp"
#include "crosr/bench/synthetic.hpp"
#include "crosr/dhrnet.hpp"
#include "crosr/error.hpp"
#include "crosr/openset.hpp"
#include "crosr/serialize.hpp"
#include "crosr/trainer.hpp"

namespace crosr::cli {

struct DataConfig {
    std::string source = "synthetic";  // synthetic | idx
    std::uint64_t seed = 0;            // data generation, class split and outlier sets
    std::size_t known = 6;
    std::size_t train_per_class = 150;
    std::size_t test_per_class = 100;
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t classes = 10;  // label space of the IDX files
};

struct EvalConfig {
    std::vector<std::string> outliers{"noise", "superimposed"};
    std::optional<double> threshold;  // overrides the open-set file's threshold
    bool softmax_baseline = true;
    std::size_t sweep_points = 20;
};

struct RunConfig {
    std::uint64_t seed = 0;  // network initialisation and training
    DataConfig data;
    DHRNetConfig model;
    TrainConfig train;
    OpenSetConfig openset;
    EvalConfig eval;
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& known_keys() {
    static const std::map<std::string, std::set<std::string>> keys{
        {"data",
         {"source", "seed", "known", "train_per_class", "test_per_class", "train_images", "train_labels", "test_images",
          "test_labels", "classes"}},
        {"model", {"variant", "input", "stages", "trunk", "kernel", "bottleneck", "head", "classes", "dropout"}},
        {"train",
         {"epochs", "batch_size", "learning_rate", "decay_points", "lr_decay", "momentum", "lambda_cls", "lambda_rec",
          "dropout", "seed"}},
        {"openset", {"mode", "tail_size", "alpha", "rank_calibration", "threshold", "threshold_rule"}},
        {"eval", {"outliers", "threshold", "softmax_baseline", "sweep_points"}},
    };
    return keys;
}

template <typename T>
T value(const io::KeyValues& kv, const std::string& key, const T& fallback) {
    try {
        return io::get<T>(kv, key, fallback);
    } catch (const FormatError&) {
        throw ConfigError("bad value for '" + key + "': '" + kv.get<std::string>(key, "") + "'");
    }
}

inline bool on_off(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("'" + key + "' must be on or off, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& s) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("'" + key + "' expects a list of numbers, got '" + s + "'");
        }
    }
    return out;
}

inline std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

}  // namespace detail

// Builds the run configuration from key-value text. Defaults depend on the
// data source: the synthetic source uses the small desk network.
inline RunConfig parse_run_config(const io::KeyValues& kv, std::optional<std::uint64_t> seed_override = {}) {
    for (const auto& [section, body] : kv) {
        const auto it = detail::known_keys().find(section);
        if (it == detail::known_keys().end()) throw ConfigError("unknown config section [" + section + "]");
        if (!body.data().empty()) throw ConfigError("key '" + section + "' must live inside a section");
        for (const auto& [key, v] : body) {
            if (!it->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
        }
    }
    RunConfig rc;
    auto& d = rc.data;
    d.source = detail::value<std::string>(kv, "data.source", d.source);
    if (d.source != "synthetic" && d.source != "idx") {
        throw ConfigError("data.source must be synthetic or idx, got '" + d.source + "'");
    }
    d.seed = detail::value<std::uint64_t>(kv, "data.seed", d.seed);
    d.known = detail::value<std::size_t>(kv, "data.known", d.known);
    d.train_per_class = detail::value<std::size_t>(kv, "data.train_per_class", d.train_per_class);
    d.test_per_class = detail::value<std::size_t>(kv, "data.test_per_class", d.test_per_class);
    d.classes = detail::value<std::size_t>(kv, "data.classes", d.classes);
    d.train_images = detail::value<std::string>(kv, "data.train_images", "");
    d.train_labels = detail::value<std::string>(kv, "data.train_labels", "");
    d.test_images = detail::value<std::string>(kv, "data.test_images", "");
    d.test_labels = detail::value<std::string>(kv, "data.test_labels", "");
    if (d.source == "synthetic") d.classes = bench::GlyphGenerator::kClasses;
    if (d.known == 0 || d.known > d.classes) {
        throw ConfigError("data.known must lie in [1, " + std::to_string(d.classes) + "]");
    }
    if (d.source == "idx") {
        for (const auto* p : {&d.train_images, &d.train_labels, &d.test_images, &d.test_labels})
            if (p->empty()) throw ConfigError("the idx source needs train_images, train_labels, test_images and test_labels");
    }

    DHRNetConfig base;
    if (d.source == "synthetic") {
        base = bench::desk_model_config(d.known);
    } else {
        base.num_classes = d.known;
    }
    rc.model = read_config(kv, base);
    if (rc.model.num_classes != d.known) {
        throw ConfigError("model.classes (" + std::to_string(rc.model.num_classes) + ") must equal data.known (" +
                          std::to_string(d.known) + ")");
    }
    rc.model.validate();

    rc.seed = seed_override ? *seed_override : detail::value<std::uint64_t>(kv, "train.seed", 0);
    auto& t = rc.train;
    if (d.source == "synthetic") t = bench::desk_train_config(rc.seed);
    t.seed = derive_seed(rc.seed, bench::kStreamTrain);
    t.epochs = detail::value<std::size_t>(kv, "train.epochs", t.epochs);
    t.batch_size = detail::value<std::size_t>(kv, "train.batch_size", t.batch_size);
    t.learning_rate = detail::value<double>(kv, "train.learning_rate", t.learning_rate);
    if (auto v = kv.get_optional<std::string>("train.decay_points")) {
        t.decay_points = detail::parse_doubles("train.decay_points", *v);
    }
    t.lr_decay = detail::value<double>(kv, "train.lr_decay", t.lr_decay);
    t.momentum = detail::value<double>(kv, "train.momentum", t.momentum);
    t.lambda_cls = detail::value<double>(kv, "train.lambda_cls", t.lambda_cls);
    t.lambda_rec = detail::value<double>(kv, "train.lambda_rec", t.lambda_rec);
    if (kv.get_optional<std::string>("train.dropout")) t.dropout = detail::value<double>(kv, "train.dropout", 0.0);
    if (t.epochs == 0) throw ConfigError("train.epochs must be positive");
    if (t.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(t.learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be nonnegative");

    const auto mode = parse_feature_mode(detail::value<std::string>(kv, "openset.mode", "joint"));
    auto& o = rc.openset;
    o = OpenSetConfig::defaults_for(d.known, mode);
    o.tail.tail_size = detail::value<std::size_t>(kv, "openset.tail_size", o.tail.tail_size);
    o.tail.alpha = detail::value<double>(kv, "openset.alpha", o.tail.alpha);
    const auto rank = detail::value<std::string>(kv, "openset.rank_calibration", "auto");
    if (rank != "auto") o.tail.rank_calibration = detail::on_off("openset.rank_calibration", rank);
    o.threshold = detail::value<double>(kv, "openset.threshold", o.threshold);
    o.rule = parse_threshold_rule(detail::value<std::string>(kv, "openset.threshold_rule", to_string(o.rule)));
    o.tail.validate();
    if (!(o.threshold >= 0.0 && o.threshold <= 1.0)) throw ConfigError("openset.threshold must lie in [0, 1]");

    auto& e = rc.eval;
    if (auto v = kv.get_optional<std::string>("eval.outliers")) e.outliers = detail::split_list(*v);
    for (const auto& name : e.outliers)
        if (name != "noise" && name != "superimposed" && name != "unknown-classes") {
            throw ConfigError("unknown outlier set '" + name + "' (expected noise, superimposed or unknown-classes)");
        }
    if (e.outliers.empty()) throw ConfigError("eval.outliers names no outlier set");
    if (kv.get_optional<std::string>("eval.threshold")) {
        e.threshold = detail::value<double>(kv, "eval.threshold", 0.0);
        if (!(*e.threshold >= 0.0 && *e.threshold <= 1.0)) throw ConfigError("eval.threshold must lie in [0, 1]");
    }
    e.softmax_baseline =
        detail::on_off("eval.softmax_baseline", detail::value<std::string>(kv, "eval.softmax_baseline", "on"));
    e.sweep_points = detail::value<std::size_t>(kv, "eval.sweep_points", e.sweep_points);
    if (e.sweep_points == 0) throw ConfigError("eval.sweep_points must be positive");
    return rc;
}

inline RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
    io::KeyValues kv;
    try {
        kv = io::parse_ini(io::read_file(path));
    } catch (const FormatError& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_run_config(kv, seed_override);
}

// The effective configuration, written next to each output for provenance.
inline io::KeyValues effective_config(const RunConfig& rc) {
    io::KeyValues kv;
    const auto& d = rc.data;
    kv.put("data.source", d.source);
    kv.put("data.seed", d.seed);
    kv.put("data.known", d.known);
    if (d.source == "synthetic") {
        kv.put("data.train_per_class", d.train_per_class);
        kv.put("data.test_per_class", d.test_per_class);
    } else {
        kv.put("data.classes", d.classes);
        kv.put("data.train_images", d.train_images);
        kv.put("data.train_labels", d.train_labels);
        kv.put("data.test_images", d.test_images);
        kv.put("data.test_labels", d.test_labels);
    }
    write_config(rc.model, kv);
    const auto& t = rc.train;
    kv.put("train.seed", rc.seed);
    kv.put("train.epochs", t.epochs);
    kv.put("train.batch_size", t.batch_size);
    kv.put("train.learning_rate", io::format_double(t.learning_rate));
    std::vector<std::string> points;
    for (double p : t.decay_points) points.push_back(io::format_double(p));
    kv.put("train.decay_points", detail::join(points));
    kv.put("train.lr_decay", io::format_double(t.lr_decay));
    kv.put("train.momentum", io::format_double(t.momentum));
    kv.put("train.lambda_cls", io::format_double(t.lambda_cls));
    kv.put("train.lambda_rec", io::format_double(t.lambda_rec));
    if (t.dropout) kv.put("train.dropout", io::format_double(*t.dropout));
    const auto& o = rc.openset;
    kv.put("openset.mode", to_string(o.mode));
    kv.put("openset.tail_size", o.tail.tail_size);
    kv.put("openset.alpha", io::format_double(o.tail.alpha));
    kv.put("openset.rank_calibration", o.tail.rank_calibration ? "on" : "off");
    kv.put("openset.threshold", io::format_double(o.threshold));
    kv.put("openset.threshold_rule", to_string(o.rule));
    kv.put("eval.outliers", detail::join(rc.eval.outliers));
    if (rc.eval.threshold) kv.put("eval.threshold", io::format_double(*rc.eval.threshold));
    kv.put("eval.softmax_baseline", rc.eval.softmax_baseline ? "on" : "off");
    kv.put("eval.sweep_points", rc.eval.sweep_points);
    return kv;
}

struct Datasets {
    bench::LabeledDataset known_train;
    bench::LabeledDataset known_test;
    std::map<std::string, bench::LabeledDataset> outliers;
};

inline Datasets load_datasets(const DataConfig& d) {
    Datasets out;
    if (d.source == "synthetic") {
        bench::DeskOptions opt;
        opt.known = d.known;
        opt.train_per_class = d.train_per_class;
        opt.test_per_class = d.test_per_class;
        auto b = bench::make_desk_benchmark(d.seed, opt);
        out.known_train = std::move(b.split.known_train);
        out.known_test = std::move(b.split.known_test);
        out.outliers["noise"] = std::move(b.noise);
        out.outliers["superimposed"] = std::move(b.superimposed);
        out.outliers["unknown-classes"] = std::move(b.split.unknown_test);
        return out;
    }
    const auto train = bench::load_idx(d.train_images, d.train_labels, d.classes);
    const auto test = bench::load_idx(d.test_images, d.test_labels, d.classes);
    if (d.known < d.classes) {
        auto s = bench::split_classes(train, test, d.known, derive_seed(d.seed, bench::kStreamSplit));
        out.known_train = std::move(s.known_train);
        out.known_test = std::move(s.known_test);
        out.outliers["unknown-classes"] = std::move(s.unknown_test);
    } else {
        out.known_train = train;
        out.known_test = test;
    }
    const auto& img = out.known_test.images;
    out.outliers["noise"] = bench::gen_uniform_noise(out.known_test.size(), {img.dim(1), img.dim(2), img.dim(3)},
                                                     derive_seed(d.seed, bench::kStreamNoise), d.known);
    out.outliers["superimposed"] =
        bench::superimpose_noise(out.known_test, derive_seed(d.seed, bench::kStreamSuperimpose));
    out.outliers["superimposed"].provenance = "superimposed";
    return out;
}

// Scoring parallelism: CROSR_THREADS when set, otherwise the hardware count.
inline std::size_t scoring_threads() {
    if (const char* env = std::getenv("CROSR_THREADS")) {
        try {
            std::size_t used = 0;
            const long long n = std::stoll(env, &used);
            if (used == std::string(env).size() && n > 0) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
        }
        throw ConfigError(std::string("CROSR_THREADS must be a positive integer, got '") + env + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

inline std::string detector_name(const OpenSetModel& m) {
    const Variant v = m.network().config().variant;
    if (m.config().mode == FeatureMode::kAv) return v == Variant::kPlain ? "openmax" : to_string(v) + "+openmax";
    return v == Variant::kDhrnet ? "crosr" : to_string(v) + "+crosr";
}

inline std::string softmax_name(const DHRNetModel& m) {
    const Variant v = m.config().variant;
    return v == Variant::kPlain ? "softmax" : to_string(v) + "+softmax";
}

namespace detail {

inline std::filesystem::path prepare_out(const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + out_dir + "': " + ec.message());
    return out_dir;
}

inline void check_input_shape(const DHRNetConfig& model, const bench::LabeledDataset& d) {
    const auto& s = d.images.shape();
    if (s[1] != model.in_channels || s[2] != model.height || s[3] != model.width) {
        throw ConfigError("model input " + std::to_string(model.in_channels) + "x" + std::to_string(model.height) + "x" +
                          std::to_string(model.width) + " does not match data images " + nn::shape_string(s));
    }
}

struct Detector {
    std::string name;
    std::function<std::vector<std::vector<double>>(const Tensor&)> score;
    double threshold;
    ThresholdRule rule;
};

inline std::vector<Detector> detectors(const RunConfig& rc, const std::vector<OpenSetModel>& models) {
    std::vector<Detector> out;
    std::set<std::string> seen;
    auto add = [&](Detector d) {
        std::string name = d.name;
        for (int k = 2; seen.count(name); ++k) name = d.name + "-" + std::to_string(k);
        d.name = name;
        seen.insert(name);
        out.push_back(std::move(d));
    };
    if (rc.eval.softmax_baseline) {
        std::set<std::string> nets;
        for (const auto& m : models) {
            const std::string name = softmax_name(m.network());
            if (!nets.insert(name).second) continue;
            const DHRNetModel* net = &m.network();
            add({name, [net](const Tensor& x) { return softmax_scores(*net, x); },
                 rc.eval.threshold.value_or(m.config().threshold), ThresholdRule::kMaxProbability});
        }
    }
    for (const auto& m : models) {
        const OpenSetModel* om = &m;
        add({detector_name(m), [om](const Tensor& x) { return om->score(x); },
             rc.eval.threshold.value_or(m.config().threshold), m.config().rule});
    }
    return out;
}

inline std::string file_safe(std::string s) {
    for (auto& c : s)
        if (c == '+') c = '_';
    return s;
}

}  // namespace detail

inline void cmd_train(const RunConfig& rc, const std::string& out_dir, std::ostream& log) {
    const auto dir = detail::prepare_out(out_dir);
    const Datasets data = load_datasets(rc.data);
    detail::check_input_shape(rc.model, data.known_train);
    DHRNetModel model = DHRNetModel::build(rc.model, derive_seed(rc.seed, bench::kStreamInit));
    log << "training " << to_string(rc.model.variant) << " (" << model.parameter_count() << " parameters) on "
        << data.known_train.size() << " samples for " << rc.train.epochs << " epochs\n";
    const TrainLog tl = train(model, data.known_train, rc.train, &data.known_test);
    model.save((dir / "model.crsr").string());
    io::write_file((dir / "train_log.csv").string(), tl.to_csv());
    io::write_file((dir / "train_config.ini").string(), io::to_ini(effective_config(rc)));
    const auto& last = tl.epochs.back();
    log << "final epoch: cls_loss " << io::format_double(last.cls_loss) << ", rec_loss "
        << io::format_double(last.rec_loss) << ", closed-set accuracy " << io::format_double(last.val_acc) << "\n";
}

inline void cmd_fit(const RunConfig& rc, const std::string& model_path, const std::string& out_dir, std::ostream& log) {
    const auto dir = detail::prepare_out(out_dir);
    const DHRNetModel model = DHRNetModel::load(model_path);
    const Datasets data = load_datasets(rc.data);
    detail::check_input_shape(model.config(), data.known_train);
    const OpenSetModel om = fit_profiles(model, data.known_train, rc.openset);
    om.save((dir / "openset.crsr").string());
    std::ostringstream csv;
    csv << "class,shape,scale\n";
    log << "fitted " << om.profiles().size() << " class profiles, mode " << to_string(rc.openset.mode) << ", alpha "
        << io::format_double(rc.openset.tail.alpha) << ", tail_size " << rc.openset.tail.tail_size
        << ", rank calibration " << (rc.openset.tail.rank_calibration ? "on" : "off") << "\n";
    for (const auto& p : om.profiles()) {
        csv << p.class_id << ',' << io::format_double(p.weibull.shape) << ',' << io::format_double(p.weibull.scale)
            << '\n';
        log << "  class " << p.class_id << ": m = " << io::format_double(p.weibull.shape)
            << ", eta = " << io::format_double(p.weibull.scale) << "\n";
    }
    io::write_file((dir / "fit_log.csv").string(), csv.str());
}

namespace detail {

inline std::vector<OpenSetModel> load_models(const std::vector<std::string>& paths) {
    if (paths.empty()) throw ConfigError("at least one open-set model file is required");
    std::vector<OpenSetModel> models;
    for (const auto& p : paths) models.push_back(OpenSetModel::load(p));
    return models;
}

// Runs `body(detector, outlier name, mixed test set, probabilities)` over
// every detector and outlier set.
template <typename Body>
void for_each_evaluation(const RunConfig& rc, const std::vector<OpenSetModel>& models, Body body) {
    const Datasets data = load_datasets(rc.data);
    for (const auto& m : models) {
        check_input_shape(m.network().config(), data.known_test);
        if (m.num_classes() != rc.data.known) {
            throw ConfigError("open-set model has " + std::to_string(m.num_classes()) + " classes, data.known is " +
                              std::to_string(rc.data.known));
        }
    }
    const std::size_t threads = scoring_threads();
    for (const auto& det : detectors(rc, models)) {
        for (const auto& name : rc.eval.outliers) {
            const auto it = data.outliers.find(name);
            if (it == data.outliers.end()) {
                throw ConfigError("outlier set '" + name + "' is unavailable for this data source");
            }
            const auto mix = bench::concat({&data.known_test, &it->second}, "known+" + name);
            body(det, name, mix, score_parallel(det.score, mix.images, threads));
        }
    }
}

}  // namespace detail

inline void cmd_eval(const RunConfig& rc, const std::vector<std::string>& model_paths, const std::string& out_dir,
                     std::ostream& log) {
    const auto dir = detail::prepare_out(out_dir);
    const auto models = detail::load_models(model_paths);
    std::ostringstream rows;
    rows << "detector,outlier_set,macro_f1\n";
    log << std::left << std::setw(20) << "detector" << std::setw(18) << "outlier set" << "macro-F1\n";
    detail::for_each_evaluation(rc, models, [&](const detail::Detector& det, const std::string& set,
                                                const bench::LabeledDataset& mix, const auto& probs) {
        const auto report = bench::evaluate(probs, mix.labels, rc.data.known, det.threshold, det.rule);
        rows << det.name << ',' << set << ',' << io::format_double(report.macro_f1) << '\n';
        std::ostringstream text;
        text << "detector: " << det.name << "\noutlier set: " << set << "\nthreshold: "
             << io::format_double(det.threshold) << " (" << to_string(det.rule) << ")\nsamples: " << mix.size()
             << "\n\n"
             << report.to_text();
        const std::string stem = "report_" + detail::file_safe(det.name) + "_" + set;
        io::write_file((dir / (stem + ".txt")).string(), text.str());
        io::write_file((dir / (stem + "_per_class.csv")).string(), report.per_class_csv());
        log << std::left << std::setw(20) << det.name << std::setw(18) << set << std::fixed << std::setprecision(4)
            << report.macro_f1 << "\n";
    });
    io::write_file((dir / "report.csv").string(), rows.str());
}

inline void cmd_sweep(const RunConfig& rc, const std::vector<std::string>& model_paths, const std::string& out_dir,
                      std::ostream& log) {
    const auto dir = detail::prepare_out(out_dir);
    const auto models = detail::load_models(model_paths);
    const auto grid = bench::default_theta_grid(rc.eval.sweep_points);
    detail::for_each_evaluation(rc, models, [&](const detail::Detector& det, const std::string& set,
                                                const bench::LabeledDataset& mix, const auto& probs) {
        const auto rows = bench::threshold_sweep(probs, mix.labels, rc.data.known, grid, det.rule);
        const std::string file = "sweep_" + detail::file_safe(det.name) + "_" + set + ".csv";
        io::write_file((dir / file).string(), bench::sweep_csv(rows));
        const auto best = std::max_element(rows.begin(), rows.end(),
                                           [](const auto& a, const auto& b) { return a.macro_f1 < b.macro_f1; });
        log << det.name << " on " << set << ": best macro-F1 " << std::fixed << std::setprecision(4) << best->macro_f1
            << " at theta " << std::setprecision(2) << best->theta << " -> " << file << "\n";
    });
}

}  // namespace crosr::cli
