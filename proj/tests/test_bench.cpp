#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "crosr/bench/desk.hpp"
#include "crosr/bench/idx.hpp"
#include "crosr/bench/metrics.hpp"

using namespace crosr;
using namespace crosr::bench;

namespace {

std::string be32(std::uint32_t v) {
    return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

// Two 2x3 images and their labels, written out byte by byte.
std::string fixture_images() {
    std::string b = be32(0x803) + be32(2) + be32(2) + be32(3);
    for (int v : {0, 255, 128, 1, 2, 3, 254, 127, 0, 0, 64, 200}) b.push_back(static_cast<char>(v));
    return b;
}

std::string fixture_labels() { return be32(0x801) + be32(2) + std::string{7, 2}; }

std::filesystem::path temp_file(const std::string& name, const std::string& bytes) {
    const auto p = std::filesystem::temp_directory_path() / name;
    io::write_file(p.string(), bytes);
    return p;
}

// Per-class F1 by counting directly from the two label vectors.
double brute_force_macro_f1(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                            std::size_t n) {
    double sum = 0.0;
    for (std::size_t c = 0; c <= n; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            tp += pred[i] == c && truth[i] == c;
            fp += pred[i] == c && truth[i] != c;
            fn += pred[i] != c && truth[i] == c;
        }
        sum += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    }
    return sum / static_cast<double>(n + 1);
}

}  // namespace

TEST(Idx, FixtureDecodesExactly) {
    const auto img = temp_file("crosr_fixture_images.idx", fixture_images());
    const auto lab = temp_file("crosr_fixture_labels.idx", fixture_labels());
    const auto d = load_idx(img.string(), lab.string());
    EXPECT_EQ(d.images.shape(), (Shape{2, 1, 2, 3}));
    EXPECT_EQ(d.labels, (std::vector<std::size_t>{7, 2}));
    EXPECT_EQ(d.num_classes, 10u);
    const std::vector<int> raw{0, 255, 128, 1, 2, 3, 254, 127, 0, 0, 64, 200};
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(d.images[i], raw[i] / 255.0) << i;
    EXPECT_NO_THROW(d.validate());
    std::filesystem::remove(img);
    std::filesystem::remove(lab);
}

TEST(Idx, BadMagicIsFormatError) {
    auto bytes = fixture_images();
    bytes[3] = 0x01;
    try {
        parse_idx_images(bytes, "x.idx");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
    }
    EXPECT_THROW(parse_idx_labels(fixture_images()), FormatError);
}

TEST(Idx, TruncationIsFormatError) {
    const auto bytes = fixture_images();
    for (std::size_t cut = 0; cut < bytes.size(); ++cut) EXPECT_THROW(parse_idx_images(bytes.substr(0, cut)), FormatError);
    const auto labels = fixture_labels();
    for (std::size_t cut = 0; cut < labels.size(); ++cut) EXPECT_THROW(parse_idx_labels(labels.substr(0, cut)), FormatError);
    EXPECT_THROW(parse_idx_images(bytes + "x"), FormatError);
}

TEST(Idx, HostileHeaderIsFormatError) {
    const std::string huge = be32(0x803) + be32(0xffffffff) + be32(0xffffffff) + be32(0xffffffff) + "abc";
    EXPECT_THROW(parse_idx_images(huge), FormatError);
    const std::string zero = be32(0x803) + be32(0) + be32(2) + be32(3);
    EXPECT_THROW(parse_idx_images(zero), FormatError);
}

TEST(Idx, CountMismatchAndBadLabels) {
    const auto img = temp_file("crosr_fixture_images2.idx", fixture_images());
    const auto lab = temp_file("crosr_fixture_labels2.idx", be32(0x801) + be32(3) + std::string{1, 2, 3});
    EXPECT_THROW(load_idx(img.string(), lab.string()), FormatError);
    const auto big = temp_file("crosr_fixture_labels3.idx", be32(0x801) + be32(2) + std::string{1, 12});
    EXPECT_THROW(load_idx(img.string(), big.string()), FormatError);
    EXPECT_THROW(load_idx(img.string(), "/nonexistent/labels.idx"), IoError);
    const auto empty = temp_file("crosr_empty.idx", "");
    EXPECT_THROW(load_idx(empty.string(), lab.string()), FormatError);
    for (const auto& p : {img, lab, big, empty}) std::filesystem::remove(p);
}

TEST(Synthetic, GlyphsShapeLabelsRange) {
    const GlyphGenerator gen;
    const auto d = gen.generate(5, 1, "g");
    EXPECT_EQ(d.images.shape(), (Shape{50, 1, 8, 8}));
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(d.labels[i], i % 10);
    EXPECT_NO_THROW(d.validate());
    EXPECT_FALSE(d.has_unknowns());
    EXPECT_EQ(d.images, gen.generate(5, 1, "g").images);
    EXPECT_FALSE(d.images == gen.generate(5, 2, "g").images);
    EXPECT_THROW(gen.generate(0, 1, "g"), ConfigError);
}

TEST(Synthetic, GlyphClassesDiffer) {
    // Mean images of different classes are far apart relative to pixel noise.
    const auto d = GlyphGenerator{}.generate(50, 3, "g");
    std::vector<std::vector<double>> mean(10, std::vector<double>(64, 0.0));
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t k = 0; k < 64; ++k) mean[d.labels[i]][k] += d.images[i * 64 + k] / 50.0;
    for (std::size_t a = 0; a < 10; ++a)
        for (std::size_t b = a + 1; b < 10; ++b) {
            double s = 0.0;
            for (std::size_t k = 0; k < 64; ++k) s += std::abs(mean[a][k] - mean[b][k]);
            EXPECT_GT(s, 2.0) << a << " vs " << b;
        }
}

TEST(Synthetic, UniformNoise) {
    const auto d = gen_uniform_noise(15625, {1, 8, 8}, 4, 6);  // 10^6 pixels
    EXPECT_EQ(d.images.shape(), (Shape{15625, 1, 8, 8}));
    double sum = 0.0;
    for (double v : d.images.data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LT(v, 1.0);
        sum += v;
    }
    // Standard error of the mean is sqrt(1/12 / 1e6) ~ 2.9e-4.
    EXPECT_NEAR(sum / 1e6, 0.5, 3 * 2.9e-4);
    for (auto l : d.labels) EXPECT_EQ(l, 6u);
    EXPECT_EQ(d.images, gen_uniform_noise(15625, {1, 8, 8}, 4, 6).images);
    EXPECT_FALSE(d.images == gen_uniform_noise(15625, {1, 8, 8}, 5, 6).images);
    EXPECT_THROW(gen_uniform_noise(0, {1, 8, 8}, 4, 6), ConfigError);
    EXPECT_THROW(gen_uniform_noise(3, {8, 8}, 4, 6), ConfigError);
}

TEST(Synthetic, SuperimposedNoise) {
    const auto inliers = select_known(GlyphGenerator{}.generate(10, 6, "g"), choose_classes(10, 6, 1), "k");
    const auto out = superimpose_noise(inliers, 7);
    ASSERT_EQ(out.images.shape(), inliers.images.shape());
    std::size_t raised = 0;
    for (std::size_t i = 0; i < out.images.size(); ++i) {
        ASSERT_GE(out.images[i], inliers.images[i]);
        ASSERT_LE(out.images[i], 1.0);
        raised += out.images[i] > inliers.images[i];
    }
    EXPECT_GT(raised, out.images.size() / 2);
    for (auto l : out.labels) EXPECT_EQ(l, 6u);
    EXPECT_EQ(out.images, superimpose_noise(inliers, 7).images);
    const auto avg = superimpose_noise(inliers, 7, [](double a, double b) { return 0.5 * (a + b); });
    EXPECT_FALSE(avg.images == out.images);
}

TEST(Protocols, ChooseClasses) {
    const auto s = choose_classes(14, 4, 9);
    EXPECT_EQ(s.known.size(), 4u);
    EXPECT_EQ(s.unknown.size(), 10u);
    std::set<std::size_t> all(s.known.begin(), s.known.end());
    all.insert(s.unknown.begin(), s.unknown.end());
    EXPECT_EQ(all.size(), 14u);
    EXPECT_EQ(choose_classes(14, 4, 9).known, s.known);
    bool differs = false;
    for (std::uint64_t seed = 10; seed < 20; ++seed) differs |= choose_classes(14, 4, seed).known != s.known;
    EXPECT_TRUE(differs);
    EXPECT_THROW(choose_classes(10, 0, 1), ConfigError);
    EXPECT_THROW(choose_classes(10, 10, 1), ConfigError);
}

TEST(Protocols, SplitRemapsKnownLabels) {
    const GlyphGenerator gen;
    const auto train = gen.generate(4, 1, "tr"), test = gen.generate(3, 2, "te");
    const auto s = split_classes(train, test, 6, 5);
    EXPECT_EQ(s.known_train.num_classes, 6u);
    EXPECT_EQ(s.known_train.size(), 24u);
    EXPECT_EQ(s.known_test.size(), 18u);
    EXPECT_EQ(s.unknown_test.size(), 12u);
    // Each known sample keeps its image and maps back to its original class.
    std::size_t j = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto it = std::find(s.spec.known.begin(), s.spec.known.end(), train.labels[i]);
        if (it == s.spec.known.end()) continue;
        EXPECT_EQ(s.known_train.labels[j], static_cast<std::size_t>(it - s.spec.known.begin()));
        for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(s.known_train.images[j * 64 + k], train.images[i * 64 + k]);
        ++j;
    }
    for (auto l : s.unknown_test.labels) EXPECT_EQ(l, 6u);
    EXPECT_FALSE(s.known_test.has_unknowns());
    EXPECT_TRUE(s.unknown_test.has_unknowns());
}

TEST(Protocols, ConcatAndRelabel) {
    const auto a = gen_uniform_noise(3, {1, 8, 8}, 1, 6);
    const auto b = as_unknowns(gen_uniform_noise(2, {1, 8, 8}, 2, 4), 6);
    const auto c = concat({&a, &b}, "ab");
    EXPECT_EQ(c.size(), 5u);
    EXPECT_EQ(c.images.dim(0), 5u);
    for (std::size_t i = 0; i < 5 * 64; ++i) EXPECT_EQ(c.images[i], i < 3 * 64 ? a.images[i] : b.images[i - 3 * 64]);
    const auto wrong = gen_uniform_noise(2, {1, 8, 8}, 2, 4);
    EXPECT_THROW(concat({&a, &wrong}, "x"), InputError);
    const auto other_shape = gen_uniform_noise(2, {1, 4, 4}, 2, 6);
    EXPECT_THROW(concat({&a, &other_shape}, "x"), InputError);
}

TEST(Desk, BenchmarkLayout) {
    const auto b = make_desk_benchmark(1);
    EXPECT_EQ(b.split.known_train.size(), 900u);
    EXPECT_EQ(b.split.known_test.size(), 600u);
    EXPECT_EQ(b.noise.size(), 600u);
    EXPECT_EQ(b.superimposed.size(), 600u);
    EXPECT_EQ(b.split.known_train.num_classes, 6u);
    EXPECT_EQ(make_desk_benchmark(1).noise.images, b.noise.images);
    EXPECT_NO_THROW(desk_model_config().validate());
}

TEST(MacroF1, PerfectPrediction) {
    const std::vector<std::size_t> t{0, 1, 2, 2, 1, 0};
    EXPECT_DOUBLE_EQ(macro_f1(t, t, 2).macro_f1, 1.0);
}

TEST(MacroF1, HandExample) {
    // Two known classes plus unknown; everything predicted as class 0.
    // F1_0 = 2 * (1/3 * 1) / (1/3 + 1) = 1/2; others 0, so macro-F1 = 1/6.
    const std::vector<std::size_t> truth{0, 1, 2}, pred{0, 0, 0};
    const auto r = macro_f1(pred, truth, 2);
    EXPECT_DOUBLE_EQ(r.per_class[0].f1, 0.5);
    EXPECT_DOUBLE_EQ(r.macro_f1, 1.0 / 6.0);
    EXPECT_EQ(r.confusion[1][0], 1u);
    EXPECT_EQ(r.per_class[2].support, 1u);
}

TEST(MacroF1, OneThird) {
    // Each class predicted as the next one except class 0, which is right.
    const std::vector<std::size_t> truth{0, 1, 2}, pred{0, 2, 1};
    EXPECT_DOUBLE_EQ(macro_f1(pred, truth, 2).macro_f1, 1.0 / 3.0);
}

TEST(MacroF1, MatchesBruteForceCount) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng.below(8), m = 1 + rng.below(300);
        std::vector<std::size_t> truth(m), pred(m);
        for (std::size_t i = 0; i < m; ++i) truth[i] = rng.below(n + 1), pred[i] = rng.below(n + 1);
        ASSERT_NEAR(macro_f1(pred, truth, n).macro_f1, brute_force_macro_f1(pred, truth, n), 1e-12);
    }
}

TEST(MacroF1, InvariantUnderSamplePermutation) {
    Rng rng(4);
    std::vector<std::size_t> truth(100), pred(100);
    for (std::size_t i = 0; i < 100; ++i) truth[i] = rng.below(5), pred[i] = rng.below(5);
    const double base = macro_f1(pred, truth, 4).macro_f1;
    std::vector<std::size_t> order(100);
    for (std::size_t i = 0; i < 100; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::size_t> t2, p2;
    for (auto i : order) t2.push_back(truth[i]), p2.push_back(pred[i]);
    EXPECT_DOUBLE_EQ(macro_f1(p2, t2, 4).macro_f1, base);
}

TEST(MacroF1, InputErrors) {
    EXPECT_THROW(macro_f1(std::vector<std::size_t>{0}, std::vector<std::size_t>{0, 1}, 2), InputError);
    EXPECT_THROW(macro_f1(std::vector<std::size_t>{3}, std::vector<std::size_t>{0}, 2), InputError);
}

TEST(Sweep, GridAndEndpoints) {
    const auto grid = default_theta_grid();
    ASSERT_EQ(grid.size(), 20u);
    EXPECT_EQ(grid.front(), 0.0);
    EXPECT_DOUBLE_EQ(grid.back(), 0.95);
    EXPECT_TRUE(std::is_sorted(grid.begin(), grid.end()));

    Rng rng(5);
    const std::size_t n = 3;
    std::vector<std::vector<double>> probs;
    std::vector<std::size_t> truth;
    for (int i = 0; i < 60; ++i) {
        std::vector<double> logits(n + 1);
        for (auto& v : logits) v = rng.uniform(-3, 3);
        probs.push_back(nn::softmax(logits));
        truth.push_back(static_cast<std::size_t>(i) % (n + 1));
    }
    const auto rows = threshold_sweep(probs, truth, n, grid);
    ASSERT_EQ(rows.size(), 20u);
    std::vector<std::size_t> arg;
    for (const auto& p : probs) arg.push_back(argmax(p));
    EXPECT_EQ(rows[0].macro_f1, macro_f1(arg, truth, n).macro_f1);

    // theta = 1 rejects everything: unknown precision = U / total, recall = 1.
    const double u = 15.0, total = 60.0;
    const double f1_unknown = 2.0 * (u / total) / (u / total + 1.0);
    const auto full = threshold_sweep(probs, truth, n, {1.0});
    EXPECT_DOUBLE_EQ(full[0].macro_f1, f1_unknown / 4.0);
    EXPECT_THROW(threshold_sweep(probs, truth, n, {1.5}), InputError);
}

TEST(Sweep, CsvLayout) {
    const std::string csv = sweep_csv({{0.0, 0.5}, {0.05, 0.25}});
    EXPECT_EQ(csv, "theta,macro_f1\n0,0.5\n0.05,0.25\n");
}

TEST(EvalReport, TextAndCsv) {
    const std::vector<std::size_t> truth{0, 1, 2}, pred{0, 2, 2};
    const auto r = macro_f1(pred, truth, 2);
    EXPECT_NE(r.to_text().find("unknown"), std::string::npos);
    const std::string csv = r.per_class_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "class,precision,recall,f1,support");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
