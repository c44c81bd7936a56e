#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/error.hpp"
#include "crosr/rng.hpp"

namespace crosr::bench {

// 8x8 digit-like glyphs. Each sample is a glyph shifted by up to one pixel,
// with random stroke intensity, partly faded strokes and Gaussian pixel noise.
struct GlyphGenerator {
    static constexpr std::size_t kSide = 8;
    static constexpr std::size_t kClasses = 10;

    double min_intensity = 0.6;
    double fade_probability = 0.1;
    double noise_stddev = 0.08;
    int max_shift = 1;

    static const std::array<std::array<const char*, kSide>, kClasses>& glyphs() {
        static const std::array<std::array<const char*, kSide>, kClasses> g{{
            {"..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"},
            {"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"},
            {"..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.", "........"},
            {".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", ".#####..", "........"},
            {"....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", "........"},
            {".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"},
            {"..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"},
            {".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"},
            {"..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"},
            {"..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..", "........"},
        }};
        return g;
    }

    void draw(std::size_t cls, Rng& rng, double* out) const {
        const auto& g = glyphs()[cls];
        const int span = 2 * max_shift + 1;
        const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - max_shift;
        const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - max_shift;
        const double intensity = rng.uniform(min_intensity, 1.0);
        for (std::size_t i = 0; i < kSide * kSide; ++i) out[i] = 0.0;
        for (int r = 0; r < static_cast<int>(kSide); ++r) {
            for (int c = 0; c < static_cast<int>(kSide); ++c) {
                if (g[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] != '#') continue;
                const int rr = r + dy, cc = c + dx;
                if (rr < 0 || cc < 0 || rr >= static_cast<int>(kSide) || cc >= static_cast<int>(kSide)) continue;
                double v = intensity;
                if (rng.bernoulli(fade_probability)) v *= rng.uniform(0.3, 0.7);
                out[static_cast<std::size_t>(rr) * kSide + static_cast<std::size_t>(cc)] = v;
            }
        }
        for (std::size_t i = 0; i < kSide * kSide; ++i) {
            out[i] = std::clamp(out[i] + rng.normal(0.0, noise_stddev), 0.0, 1.0);
        }
    }

    // `per_class` samples of each of the ten classes, interleaved by class.
    LabeledDataset generate(std::size_t per_class, std::uint64_t seed, const std::string& provenance) const {
        Rng rng(seed);
        const std::size_t n = per_class * kClasses;
        if (n == 0) throw ConfigError("synthetic dataset needs at least one sample per class");
        LabeledDataset d;
        d.images = nn::Tensor(nn::Shape{n, 1, kSide, kSide});
        d.labels.resize(n);
        d.num_classes = kClasses;
        d.provenance = provenance;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t cls = i % kClasses;
            d.labels[i] = cls;
            draw(cls, rng, d.images.data().data() + i * kSide * kSide);
        }
        return d;
    }
};

// i.i.d. Uniform[0,1] pixels, all labelled unknown.
inline LabeledDataset gen_uniform_noise(std::size_t count, const nn::Shape& image_shape, std::uint64_t seed,
                                        std::size_t num_classes) {
    if (count == 0) throw ConfigError("noise dataset needs a positive sample count");
    if (image_shape.size() != 3) throw ConfigError("image shape must be [C,H,W]");
    Rng rng(seed);
    LabeledDataset d;
    d.images = nn::Tensor(nn::Shape{count, image_shape[0], image_shape[1], image_shape[2]});
    for (auto& v : d.images.data()) v = rng.uniform();
    d.labels.assign(count, num_classes);
    d.num_classes = num_classes;
    d.provenance = "noise";
    return d;
}

using Composition = std::function<double(double inlier, double noise)>;

inline double compose_max(double inlier, double noise) { return std::max(inlier, noise); }

// Overlays each inlier image on fresh uniform noise; the result is labelled unknown.
inline LabeledDataset superimpose_noise(const LabeledDataset& inliers, std::uint64_t seed,
                                        const Composition& compose = compose_max) {
    if (inliers.size() == 0) throw ConfigError("superimpose_noise needs a nonempty inlier set");
    Rng rng(seed);
    LabeledDataset d;
    d.images = inliers.images;
    for (auto& v : d.images.data()) v = std::clamp(compose(v, rng.uniform()), 0.0, 1.0);
    d.labels.assign(inliers.size(), inliers.num_classes);
    d.num_classes = inliers.num_classes;
    d.provenance = inliers.provenance + "-noise";
    return d;
}

}  // namespace crosr::bench
