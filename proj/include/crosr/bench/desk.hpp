#pragma once

#include <cstddef>
#include <cstdint>

#include "crosr/bench/dataset.hpp"
#include "crosr/bench/protocols.hpp"
#include "crosr/bench/synthetic.hpp"
#include "crosr/dhrnet.hpp"
#include "crosr/rng.hpp"
#include "crosr/trainer.hpp"

namespace crosr::bench {

// Seed streams of the desk benchmark.
enum DeskStream : std::uint64_t {
    kStreamTrainData = 1,
    kStreamTestData = 2,
    kStreamSplit = 3,
    kStreamNoise = 4,
    kStreamSuperimpose = 5,
    kStreamInit = 6,
    kStreamTrain = 7,
};

struct DeskOptions {
    std::size_t known = 6;
    std::size_t train_per_class = 150;
    std::size_t test_per_class = 100;
};

// Known/unknown split of synthetic glyphs plus the two outlier sets, each the
// same size as the known test set.
struct DeskBenchmark {
    ClassSplit split;
    LabeledDataset noise;
    LabeledDataset superimposed;
};

inline DeskBenchmark make_desk_benchmark(std::uint64_t seed, const DeskOptions& opt = {}) {
    const GlyphGenerator gen;
    const auto train = gen.generate(opt.train_per_class, derive_seed(seed, kStreamTrainData), "glyphs-train");
    const auto test = gen.generate(opt.test_per_class, derive_seed(seed, kStreamTestData), "glyphs-test");
    DeskBenchmark b;
    b.split = split_classes(train, test, opt.known, derive_seed(seed, kStreamSplit));
    const std::size_t n = b.split.known_test.size();
    b.noise = gen_uniform_noise(n, {1, GlyphGenerator::kSide, GlyphGenerator::kSide}, derive_seed(seed, kStreamNoise),
                                opt.known);
    b.superimposed = superimpose_noise(b.split.known_test, derive_seed(seed, kStreamSuperimpose));
    b.superimposed.provenance = "superimposed";
    return b;
}

// Small backbone for 8x8 inputs: two pooled stages, one hidden layer.
inline DHRNetConfig desk_model_config(std::size_t known = 6, Variant variant = Variant::kDhrnet) {
    DHRNetConfig c;
    c.height = c.width = GlyphGenerator::kSide;
    c.stages = {{1, 16, true}, {1, 32, true}};
    c.trunk_channels = {};
    c.head_hidden = {64};
    c.num_classes = known;
    c.bottleneck_dim = 8;
    c.dropout = 0.1;
    c.variant = variant;
    return c;
}

inline TrainConfig desk_train_config(std::uint64_t seed) {
    TrainConfig t;
    t.epochs = 20;
    t.batch_size = 32;
    t.learning_rate = 0.01;
    t.seed = derive_seed(seed, kStreamTrain);
    return t;
}

}  // namespace crosr::bench
