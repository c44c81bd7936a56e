#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/layers.hpp"
#include "crosr/ops.hpp"
#include "crosr/rng.hpp"
#include "crosr/serialize.hpp"
#include "crosr/tape.hpp"
#include "crosr/tensor.hpp"

namespace crosr {

using nn::Mode;
using nn::Shape;
using nn::shape_string;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// dhrnet: compressed laterals; ladder: identity laterals; plain: no decoder.
enum class Variant { kDhrnet, kLadder, kPlain };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::kDhrnet: return "dhrnet";
        case Variant::kLadder: return "ladder";
        case Variant::kPlain: return "plain";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "dhrnet") return Variant::kDhrnet;
    if (s == "ladder") return Variant::kLadder;
    if (s == "plain") return Variant::kPlain;
    throw ConfigError("unknown network variant '" + s + "' (expected dhrnet, ladder or plain)");
}

// `convs` convolution+ReLU layers of width `channels`, then optionally a
// stride-2 max pool. A lateral connection taps the output of every stage.
struct StageSpec {
    std::size_t convs = 1;
    std::size_t channels = 8;
    bool pool = true;

    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct DHRNetConfig {
    std::size_t in_channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;
    std::vector<StageSpec> stages{{2, 100, true}, {2, 100, true}};
    std::vector<std::size_t> trunk_channels{100};  // conv layers after the last stage
    std::size_t kernel = 3;
    std::size_t bottleneck_dim = 32;
    std::vector<std::size_t> head_hidden{500};
    std::size_t num_classes = 10;
    Variant variant = Variant::kDhrnet;
    double dropout = 0.2;

    friend bool operator==(const DHRNetConfig&, const DHRNetConfig&) = default;

    std::size_t laterals() const { return variant == Variant::kPlain ? 0 : stages.size(); }

    Shape input_shape(std::size_t batch) const { return {batch, in_channels, height, width}; }

    // Spatial extent after stage `s` (1-based); stage 0 is the input.
    std::pair<std::size_t, std::size_t> stage_extent(std::size_t s) const {
        std::size_t h = height, w = width;
        for (std::size_t i = 0; i < s; ++i)
            if (stages[i].pool) h /= 2, w /= 2;
        return {h, w};
    }

    std::size_t stage_channels(std::size_t s) const { return s == 0 ? in_channels : stages[s - 1].channels; }

    std::size_t latent_dim() const {
        switch (variant) {
            case Variant::kPlain: return 0;
            case Variant::kDhrnet: return stages.size() * bottleneck_dim;
            case Variant::kLadder: {
                std::size_t n = 0;
                for (const auto& s : stages) n += s.channels;
                return n;
            }
        }
        return 0;
    }

    void validate() const {
        if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("input extents must be positive");
        if (stages.empty()) throw ConfigError("at least one stage is required");
        if (kernel % 2 == 0) throw ConfigError("convolution kernel must be odd");
        if (num_classes < 1) throw ConfigError("at least one class is required");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
        if (variant == Variant::kDhrnet && bottleneck_dim == 0) {
            throw ConfigError("bottleneck_dim must be positive for the dhrnet variant");
        }
        std::size_t h = height, w = width;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto& s = stages[i];
            if (s.convs == 0 || s.channels == 0) {
                throw ConfigError("stage " + std::to_string(i + 1) + " needs at least one conv layer and channel");
            }
            if (!s.pool && i + 1 != stages.size()) {
                throw ConfigError("only the last stage may omit pooling (one lateral per pooling stage)");
            }
            if (s.pool) {
                if (h < 2 || w < 2) {
                    throw ConfigError("stage " + std::to_string(i + 1) + " pools a " + std::to_string(h) + "x" +
                                      std::to_string(w) + " map");
                }
                h /= 2, w /= 2;
            }
        }
        for (auto c : trunk_channels)
            if (c == 0) throw ConfigError("trunk conv layers need at least one channel");
        for (auto u : head_hidden)
            if (u == 0) throw ConfigError("hidden layers need at least one unit");
    }
};

// Weight groups of the network, used for diagnostics and tests.
enum class ParamGroup { kEncoder, kBottleneck, kReprojection, kCombinator, kHead };

struct Parameter {
    std::string name;
    ParamGroup group;
    Tensor value;
};

struct ForwardOutput {
    Tensor y;                       // [B, N] activation vector
    Tensor z;                       // [B, latent_dim], pooled laterals in stage order
    std::optional<Tensor> x_hat;    // reconstruction, absent for the plain variant
    std::vector<Tensor> stage_z;    // per-stage pooled z_l, each [B, dim]
};

// Handles into a tape after a forward pass; used by training and gradient checks.
struct ForwardVars {
    Var y;
    std::optional<Var> x_hat;
    std::vector<Var> pooled_z;
};

enum class FeatureMode { kAv, kJoint };

inline std::string to_string(FeatureMode m) { return m == FeatureMode::kAv ? "av" : "joint"; }

inline FeatureMode parse_feature_mode(const std::string& s) {
    if (s == "av") return FeatureMode::kAv;
    if (s == "joint") return FeatureMode::kJoint;
    throw ConfigError("unknown feature mode '" + s + "' (expected av or joint)");
}

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const auto v = std::stoull(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("expected a comma-separated list of sizes, got '" + s + "'");
        }
    }
    return out;
}

}  // namespace detail

// "2x100p,2x100p": conv count x channels, trailing 'p' when the stage pools.
inline std::string format_stages(const std::vector<StageSpec>& stages) {
    std::string s;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        s += (i ? "," : "") + std::to_string(stages[i].convs) + "x" + std::to_string(stages[i].channels) +
             (stages[i].pool ? "p" : "");
    }
    return s;
}

inline std::vector<StageSpec> parse_stages(const std::string& text) {
    std::vector<StageSpec> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        StageSpec st;
        st.pool = !item.empty() && item.back() == 'p';
        if (st.pool) item.pop_back();
        const auto x = item.find('x');
        if (x == std::string::npos) throw ConfigError("bad stage spec '" + item + "' (expected <convs>x<channels>[p])");
        const auto convs = detail::parse_sizes(item.substr(0, x));
        const auto ch = detail::parse_sizes(item.substr(x + 1));
        if (convs.size() != 1 || ch.size() != 1) throw ConfigError("bad stage spec '" + item + "'");
        st.convs = convs[0];
        st.channels = ch[0];
        out.push_back(st);
    }
    return out;
}

inline void write_config(const DHRNetConfig& c, io::KeyValues& kv, const std::string& section = "model") {
    kv.put(section + ".variant", to_string(c.variant));
    kv.put(section + ".input", std::to_string(c.in_channels) + "x" + std::to_string(c.height) + "x" +
                                   std::to_string(c.width));
    kv.put(section + ".stages", format_stages(c.stages));
    kv.put(section + ".trunk", detail::join_sizes(c.trunk_channels));
    kv.put(section + ".kernel", c.kernel);
    kv.put(section + ".bottleneck", c.bottleneck_dim);
    kv.put(section + ".head", detail::join_sizes(c.head_hidden));
    kv.put(section + ".classes", c.num_classes);
    kv.put(section + ".dropout", io::format_double(c.dropout));
}

// Reads a [model] section; absent keys keep the values already in `c`.
inline DHRNetConfig read_config(const io::KeyValues& kv, DHRNetConfig c = {}, const std::string& section = "model") {
    const auto sec = kv.get_child_optional(section);
    if (!sec) return c;
    const auto& s = *sec;
    if (auto v = s.get_optional<std::string>("variant")) c.variant = parse_variant(*v);
    if (auto v = s.get_optional<std::string>("input")) {
        std::string t = *v;
        for (auto& ch : t)
            if (ch == 'x') ch = ',';
        const auto dims = detail::parse_sizes(t);
        if (dims.size() != 3) throw ConfigError("model.input must be <channels>x<height>x<width>");
        c.in_channels = dims[0], c.height = dims[1], c.width = dims[2];
    }
    if (auto v = s.get_optional<std::string>("stages")) c.stages = parse_stages(*v);
    if (auto v = s.get_optional<std::string>("trunk")) c.trunk_channels = detail::parse_sizes(*v);
    if (auto v = s.get_optional<std::string>("head")) c.head_hidden = detail::parse_sizes(*v);
    try {
        c.kernel = io::get<std::size_t>(s, "kernel", c.kernel);
        c.bottleneck_dim = io::get<std::size_t>(s, "bottleneck", c.bottleneck_dim);
        c.num_classes = io::get<std::size_t>(s, "classes", c.num_classes);
        c.dropout = io::get<double>(s, "dropout", c.dropout);
    } catch (const FormatError& e) {
        throw ConfigError(std::string("[") + section + "]: " + e.what());
    }
    return c;
}

// Classifier with a hierarchical reconstruction decoder. For stage l with
// input x_{l-1} and output x_l:
//   z_l      = conv1x1(relu(x_l))                   (bottleneck)
//   u_l      = conv1x1(z_l)                         (reprojection to width of x_l)
//   s_l      = u_l + x~_{l+1},  x~_{L+1} = 0
//   x~_l     = relu(conv(up(s_l)))                  (combinator, width of x_{l-1})
// where up() undoes the stage's pooling, and x~_1 is the reconstruction. The
// image-level combinator has no ReLU. For the ladder variant both 1x1 convs
// are identities; the plain variant has no decoder.
class DHRNetModel {
   public:
    DHRNetModel() = default;

    static DHRNetModel build(const DHRNetConfig& config, std::uint64_t seed) {
        config.validate();
        DHRNetModel m;
        m.config_ = config;
        // Encoder and head draw from one stream, the decoder from another, so
        // the classifier's initial weights do not depend on the variant.
        Rng rng(seed);
        Rng decoder_rng(seed ^ 0xa5a5a5a55a5a5a5aULL);

        const std::size_t k = config.kernel;
        std::size_t in_ch = config.in_channels;
        for (std::size_t s = 0; s < config.stages.size(); ++s) {
            for (std::size_t c = 0; c < config.stages[s].convs; ++c) {
                const std::string base = "f" + std::to_string(s + 1) + ".conv" + std::to_string(c + 1);
                m.add_conv(base, ParamGroup::kEncoder, config.stages[s].channels, in_ch, k, 2.0, rng);
                in_ch = config.stages[s].channels;
            }
        }
        for (std::size_t t = 0; t < config.trunk_channels.size(); ++t) {
            m.add_conv("trunk.conv" + std::to_string(t + 1), ParamGroup::kEncoder, config.trunk_channels[t], in_ch, k,
                       2.0, rng);
            in_ch = config.trunk_channels[t];
        }
        const auto [h, w] = config.stage_extent(config.stages.size());
        std::size_t units = in_ch * h * w;
        for (std::size_t i = 0; i < config.head_hidden.size(); ++i) {
            m.add_dense("head.fc" + std::to_string(i + 1), config.head_hidden[i], units, 2.0, rng);
            units = config.head_hidden[i];
        }
        m.add_dense("head.out", config.num_classes, units, 1.0, rng);

        if (config.variant != Variant::kPlain) {
            for (std::size_t l = 1; l <= config.stages.size(); ++l) {
                const std::size_t width = config.stage_channels(l);
                const std::string tag = std::to_string(l);
                if (config.variant == Variant::kDhrnet) {
                    m.add_conv("h" + tag, ParamGroup::kBottleneck, config.bottleneck_dim, width, 1, 1.0, decoder_rng);
                    m.add_conv("ht" + tag, ParamGroup::kReprojection, width, config.bottleneck_dim, 1, 1.0,
                               decoder_rng);
                }
                m.add_conv("g" + tag, ParamGroup::kCombinator, config.stage_channels(l - 1), width, k,
                           l == 1 ? kImageGain : 2.0, decoder_rng);
            }
        }
        return m;
    }

    const DHRNetConfig& config() const { return config_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<Parameter>& parameters() { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    const Tensor& parameter(const std::string& name) const { return params_[index_of(name)].value; }

    // Records the network on `tape`. `params` must hold one Var per entry of
    // parameters(), in order.
    ForwardVars forward(Tape& tape, Var x, std::span<const Var> params, Mode mode, Rng* rng) const {
        const auto& c = config_;
        const Shape& xs = tape.value(x).shape();
        if (xs.size() != 4 || xs[1] != c.in_channels || xs[2] != c.height || xs[3] != c.width) {
            throw InputError("input shape " + shape_string(xs) + " does not match model input " +
                             shape_string(c.input_shape(xs.empty() ? 0 : xs[0])));
        }
        std::size_t p = 0;
        auto conv = [&](Var in) {
            Var out = nn::conv2d(tape, in, params[p], params[p + 1]);
            p += 2;
            return out;
        };
        auto fc = [&](Var in) {
            Var out = nn::dense(tape, in, params[p], params[p + 1]);
            p += 2;
            return out;
        };

        std::vector<Var> stage_out;
        Var cur = x;
        for (const auto& st : c.stages) {
            for (std::size_t i = 0; i < st.convs; ++i) {
                cur = nn::dropout(tape, nn::relu(tape, conv(cur)), c.dropout, mode, rng);
            }
            if (st.pool) cur = nn::maxpool2d(tape, cur, 2);
            stage_out.push_back(cur);
        }
        for (std::size_t t = 0; t < c.trunk_channels.size(); ++t) {
            cur = nn::dropout(tape, nn::relu(tape, conv(cur)), c.dropout, mode, rng);
        }
        cur = nn::flatten(tape, cur);
        for (std::size_t i = 0; i < c.head_hidden.size(); ++i) {
            cur = nn::dropout(tape, nn::relu(tape, fc(cur)), c.dropout, mode, rng);
        }
        ForwardVars out;
        out.y = fc(cur);
        if (c.variant == Variant::kPlain) return out;

        const std::size_t levels = c.stages.size();
        std::vector<Var> z(levels), u(levels);
        std::vector<std::size_t> g_at(levels);
        for (std::size_t l = 0; l < levels; ++l) {
            if (c.variant == Variant::kDhrnet) {
                z[l] = conv(nn::relu(tape, stage_out[l]));
                u[l] = conv(z[l]);
            } else {
                z[l] = stage_out[l];
                u[l] = stage_out[l];
            }
            g_at[l] = p;
            p += 2;
        }
        std::optional<Var> top;
        for (std::size_t l = levels; l-- > 0;) {
            Var s = top ? nn::add(tape, u[l], *top) : u[l];
            if (c.stages[l].pool) {
                const auto [h, w] = c.stage_extent(l);
                s = nn::upsample_nearest(tape, s, h, w);
            }
            Var combined = nn::conv2d(tape, s, params[g_at[l]], params[g_at[l] + 1]);
            top = l == 0 ? combined : nn::relu(tape, combined);
        }
        out.x_hat = *top;
        for (std::size_t l = 0; l < levels; ++l) out.pooled_z.push_back(nn::global_max_pool(tape, z[l]));
        return out;
    }

    ForwardOutput forward(const Tensor& x, Mode mode = Mode::kEval, Rng* rng = nullptr) const {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(params_.size());
        Var xv = tape.constant(x);
        for (const auto& prm : params_) vars.push_back(tape.parameter(prm.value));
        const ForwardVars fv = forward(tape, xv, vars, mode, rng);
        ForwardOutput out;
        out.y = tape.value(fv.y);
        const std::size_t batch = x.dim(0);
        std::vector<double> zdata;
        std::size_t zdim = 0;
        for (Var v : fv.pooled_z) {
            out.stage_z.push_back(tape.value(v));
            zdim += tape.value(v).dim(1);
        }
        if (zdim > 0) {
            zdata.reserve(batch * zdim);
            for (std::size_t b = 0; b < batch; ++b)
                for (const auto& sz : out.stage_z) {
                    const std::size_t d = sz.dim(1);
                    zdata.insert(zdata.end(), sz.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                                 sz.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
                }
            out.z = Tensor(Shape{batch, zdim}, std::move(zdata));
        }
        if (fv.x_hat) out.x_hat = tape.value(*fv.x_hat);
        return out;
    }

    io::Container to_container() const {
        io::Container c;
        c.header.put("file.kind", "network");
        write_config(config_, c.header);
        for (const auto& p : params_) c.arrays.push_back({p.name, p.value});
        return c;
    }

    static DHRNetModel from_container(const io::Container& c) {
        DHRNetConfig cfg;
        try {
            cfg = read_config(c.header);
        } catch (const ConfigError& e) {
            throw FormatError(std::string("model header: ") + e.what());
        }
        DHRNetModel m = build(cfg, 0);
        for (auto& p : m.params_) {
            const Tensor& stored = c.array(p.name);
            if (stored.shape() != p.value.shape()) {
                throw FormatError("array '" + p.name + "' has shape " + shape_string(stored.shape()) +
                                  ", expected " + shape_string(p.value.shape()));
            }
            p.value = stored;
        }
        return m;
    }

    void save(const std::string& path) const { io::write_file(path, io::encode(to_container())); }

    static DHRNetModel load(const std::string& path) { return from_container(io::decode(io::read_file(path))); }

    friend bool operator==(const DHRNetModel& a, const DHRNetModel& b) {
        if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i)
            if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
        return true;
    }

   private:
    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        throw ConfigError("no parameter named '" + name + "'");
    }

    // Gain 2 (He) for layers feeding a ReLU, 1 for linear outputs. The
    // image-level combinator starts near zero so the first reconstruction
    // gradients stay small.
    static constexpr double kImageGain = 0.01;
    static Tensor he_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
        Tensor t(std::move(shape));
        const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
        for (auto& v : t.data()) v = rng.normal(0.0, stddev);
        return t;
    }

    void add_conv(const std::string& base, ParamGroup group, std::size_t out, std::size_t in, std::size_t k,
                  double gain, Rng& rng) {
        params_.push_back({base + ".weight", group, he_normal(Shape{out, in, k, k}, in * k * k, gain, rng)});
        params_.push_back({base + ".bias", group, Tensor::zeros(Shape{out})});
    }

    void add_dense(const std::string& base, std::size_t out, std::size_t in, double gain, Rng& rng) {
        params_.push_back({base + ".weight", ParamGroup::kHead, he_normal(Shape{out, in}, in, gain, rng)});
        params_.push_back({base + ".bias", ParamGroup::kHead, Tensor::zeros(Shape{out})});
    }

    DHRNetConfig config_;
    std::vector<Parameter> params_;
};

// Feature vectors for unknown detection: y alone, or the concatenation [y, z].
inline Tensor extract_features(const DHRNetModel& model, const Tensor& x, FeatureMode mode) {
    if (mode == FeatureMode::kJoint && model.config().variant == Variant::kPlain) {
        throw ConfigError("joint features need a decoder; the plain variant has no latent codes");
    }
    const ForwardOutput out = model.forward(x, Mode::kEval);
    if (mode == FeatureMode::kAv) return out.y;
    const std::size_t batch = x.dim(0), n = out.y.dim(1), zd = out.z.dim(1);
    std::vector<double> data;
    data.reserve(batch * (n + zd));
    for (std::size_t b = 0; b < batch; ++b) {
        auto y = out.y.data().subspan(b * n, n);
        auto z = out.z.data().subspan(b * zd, zd);
        data.insert(data.end(), y.begin(), y.end());
        data.insert(data.end(), z.begin(), z.end());
    }
    return Tensor(Shape{batch, n + zd}, std::move(data));
}

}  // namespace crosr
