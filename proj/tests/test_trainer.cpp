#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/trainer.hpp"

using namespace crosr;

namespace {

// Two classes of 8x8 images: a bright 3x3 blob near the top-left corner or
// near the bottom-right corner, on a noisy background.
bench::LabeledDataset blobs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    bench::LabeledDataset d;
    d.images = Tensor(Shape{n, 1, 8, 8});
    d.num_classes = 2;
    d.provenance = "blobs";
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % 2;
        d.labels.push_back(cls);
        const std::size_t r0 = (cls == 0 ? 1 : 4) + rng.below(2), c0 = (cls == 0 ? 1 : 4) + rng.below(2);
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 8; ++c) {
                const bool on = r >= r0 && r < r0 + 3 && c >= c0 && c < c0 + 3;
                d.images.at(i, 0, r, c) = std::clamp((on ? 0.8 : 0.1) + 0.1 * rng.normal(), 0.0, 1.0);
            }
    }
    return d;
}

DHRNetConfig small_config(Variant v = Variant::kDhrnet) {
    DHRNetConfig c;
    c.height = c.width = 8;
    c.stages = {{1, 4, true}, {1, 8, true}};
    c.trunk_channels = {};
    c.head_hidden = {16};
    c.num_classes = 2;
    c.bottleneck_dim = 4;
    c.dropout = 0.1;
    c.variant = v;
    return c;
}

TrainConfig short_run(std::size_t epochs = 5) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 16;
    t.learning_rate = 0.01;
    t.seed = 77;
    return t;
}

double total_loss(const DHRNetModel& m, const bench::LabeledDataset& d) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : m.parameters()) vars.push_back(tape.parameter(p.value));
    const auto loss = joint_loss(tape, m, tape.constant(d.images), d.labels, vars, Mode::kEval, nullptr, 1.0, 1.0);
    return tape.value(loss.total).item();
}

}  // namespace

TEST(TrainConfig, StepSchedule) {
    TrainConfig t;
    t.epochs = 20;
    t.learning_rate = 0.1;
    EXPECT_DOUBLE_EQ(t.rate_at(0), 0.1);
    EXPECT_DOUBLE_EQ(t.rate_at(9), 0.1);
    EXPECT_NEAR(t.rate_at(10), 0.01, 1e-15);
    EXPECT_NEAR(t.rate_at(14), 0.01, 1e-15);
    EXPECT_NEAR(t.rate_at(15), 0.001, 1e-15);
    EXPECT_NEAR(t.rate_at(19), 0.001, 1e-15);
}

TEST(Trainer, ZeroLearningRateLeavesWeightsUnchanged) {
    auto m = DHRNetModel::build(small_config(), 1);
    const auto before = m;
    auto cfg = short_run(2);
    cfg.learning_rate = 0.0;
    train(m, blobs(64, 2), cfg);
    EXPECT_TRUE(m == before);
}

TEST(Trainer, LearnsSeparableBlobs) {
    const auto data = blobs(200, 3);
    auto m = DHRNetModel::build(small_config(), 4);
    const double initial = total_loss(m, data);
    const auto log = train(m, data, short_run(30));
    EXPECT_LT(total_loss(m, data), initial);
    EXPECT_GE(closed_set_accuracy(m, data), 0.95);
    EXPECT_GE(closed_set_accuracy(m, blobs(200, 5)), 0.95);
    ASSERT_EQ(log.epochs.size(), 30u);
    EXPECT_LT(log.epochs.back().cls_loss, log.epochs.front().cls_loss);
    EXPECT_LT(log.epochs.back().rec_loss, log.epochs.front().rec_loss);
}

TEST(Trainer, SameSeedSameResult) {
    const auto data = blobs(64, 6);
    auto a = DHRNetModel::build(small_config(), 7);
    auto b = DHRNetModel::build(small_config(), 7);
    const auto la = train(a, data, short_run());
    const auto lb = train(b, data, short_run());
    EXPECT_TRUE(a == b);
    EXPECT_EQ(la.to_csv(), lb.to_csv());
    auto c = DHRNetModel::build(small_config(), 7);
    auto other = short_run();
    other.seed = 78;
    train(c, data, other);
    EXPECT_FALSE(a == c);
}

TEST(Trainer, WithoutReconstructionWeightDecoderVariantsTrainLikePlain) {
    // The classifier weights share their initialisation across variants and
    // the decoder draws no dropout masks, so a zero reconstruction weight
    // leaves exactly the supervised-only updates.
    const auto data = blobs(64, 8);
    auto cfg = short_run();
    cfg.lambda_rec = 0.0;
    auto plain = DHRNetModel::build(small_config(Variant::kPlain), 9);
    auto full = DHRNetModel::build(small_config(Variant::kDhrnet), 9);
    const auto lp = train(plain, data, cfg);
    const auto lf = train(full, data, cfg);
    for (std::size_t e = 0; e < cfg.epochs; ++e) EXPECT_EQ(lp.epochs[e].cls_loss, lf.epochs[e].cls_loss);
    for (const auto& p : plain.parameters()) EXPECT_EQ(p.value, full.parameter(p.name)) << p.name;
}

TEST(Trainer, PlainVariantReportsNoReconstruction) {
    auto m = DHRNetModel::build(small_config(Variant::kPlain), 10);
    const auto log = train(m, blobs(32, 11), short_run(2));
    for (const auto& e : log.epochs) EXPECT_EQ(e.rec_loss, 0.0);
}

TEST(Trainer, RejectsUnknownLabels) {
    auto data = blobs(32, 12);
    data.labels[3] = 2;  // the unknown sentinel for two known classes
    auto m = DHRNetModel::build(small_config(), 13);
    EXPECT_THROW(train(m, data, short_run(1)), InputError);
}

TEST(Trainer, RejectsMismatchedClassCount) {
    auto data = blobs(32, 12);
    data.num_classes = 3;
    auto m = DHRNetModel::build(small_config(), 13);
    EXPECT_THROW(train(m, data, short_run(1)), InputError);
}

TEST(Trainer, RejectsZeroBatch) {
    auto m = DHRNetModel::build(small_config(), 13);
    auto cfg = short_run(1);
    cfg.batch_size = 0;
    EXPECT_THROW(train(m, blobs(8, 1), cfg), ConfigError);
}

TEST(Trainer, DivergenceIsAHardError) {
    auto m = DHRNetModel::build(small_config(), 14);
    auto cfg = short_run(5);
    cfg.learning_rate = 1e6;
    EXPECT_THROW(train(m, blobs(64, 15), cfg), NumericalError);
}

TEST(Trainer, DropoutOverride) {
    auto m = DHRNetModel::build(small_config(), 16);
    auto cfg = short_run(1);
    cfg.dropout = 0.3;
    train(m, blobs(16, 17), cfg);
    EXPECT_DOUBLE_EQ(m.config().dropout, 0.3);
    cfg.dropout = 1.5;
    EXPECT_THROW(train(m, blobs(16, 17), cfg), ConfigError);
}

TEST(TrainLog, CsvLayout) {
    auto m = DHRNetModel::build(small_config(), 18);
    const auto log = train(m, blobs(32, 19), short_run(3));
    std::istringstream in(log.to_csv());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,cls_loss,rec_loss,val_acc");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(line.rfind(std::to_string(rows) + ",", 0), 0u);
    }
    EXPECT_EQ(rows, 3u);
}

TEST(ClosedSetAccuracy, CountsArgmaxHits) {
    const auto data = blobs(10, 20);
    auto m = DHRNetModel::build(small_config(Variant::kPlain), 21);
    const auto y = m.forward(data.images).y;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 10; ++i) hits += (y.data()[2 * i + 1] > y.data()[2 * i]) == (data.labels[i] == 1);
    EXPECT_DOUBLE_EQ(closed_set_accuracy(m, data, 3), static_cast<double>(hits) / 10.0);
    EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0}), 1u);
}
