#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crosr/cli.hpp"

using namespace crosr;
namespace fs = std::filesystem;

namespace {

const std::string kTinyConfig = R"([data]
source = synthetic
seed = 4
known = 4
train_per_class = 40
test_per_class = 15

[train]
epochs = 3
batch_size = 16

[openset]
tail_size = 10
)";

io::KeyValues ini(const std::string& text) { return io::parse_ini(text); }

std::string slurp(const fs::path& p) { return io::read_file(p.string()); }

struct Run {
    int code;
    std::string output;
};

// Runs the command-line tool with stdout and stderr captured together.
Run run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const fs::path log = fs::temp_directory_path() / ("crosr_cli_out_" + std::to_string(::getpid()) + "_" +
                                                      std::to_string(counter++) + ".txt");
    const std::string cmd = env + " '" CROSR_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    Run r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
    fs::remove(log);
    return r;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::vector<std::string> fields(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
    return out;
}

void write_be32(std::string& s, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xff));
}

}  // namespace

TEST(RunConfig, SyntheticDefaultsUseTheDeskNetwork) {
    const auto rc = cli::parse_run_config(ini("[data]\nknown = 5\n"), 9);
    EXPECT_EQ(rc.model, bench::desk_model_config(5));
    EXPECT_EQ(rc.seed, 9u);
    EXPECT_EQ(rc.train.seed, derive_seed(9, bench::kStreamTrain));
    EXPECT_EQ(rc.train.epochs, bench::desk_train_config(9).epochs);
    EXPECT_EQ(rc.openset.mode, FeatureMode::kJoint);
    EXPECT_FALSE(rc.openset.tail.rank_calibration);
    EXPECT_EQ(rc.eval.outliers, (std::vector<std::string>{"noise", "superimposed"}));
    EXPECT_EQ(rc.eval.sweep_points, 20u);
}

TEST(RunConfig, SeedFlagOverridesConfigSeed) {
    EXPECT_EQ(cli::parse_run_config(ini("[train]\nseed = 5\n")).seed, 5u);
    EXPECT_EQ(cli::parse_run_config(ini("[train]\nseed = 5\n"), 6).seed, 6u);
}

TEST(RunConfig, RankCalibrationSwitch) {
    EXPECT_TRUE(cli::parse_run_config(ini("[openset]\nrank_calibration = on\n")).openset.tail.rank_calibration);
    EXPECT_FALSE(cli::parse_run_config(ini("[openset]\nrank_calibration = auto\n")).openset.tail.rank_calibration);
    EXPECT_THROW(cli::parse_run_config(ini("[openset]\nrank_calibration = maybe\n")), ConfigError);
}

TEST(RunConfig, RejectsBadInput) {
    const char* bad[] = {
        "[data]\nbogus = 1\n",
        "[nowhere]\nx = 1\n",
        "[data]\nsource = tape\n",
        "[data]\nknown = 0\n",
        "[data]\nknown = 11\n",
        "[data]\nknown = many\n",
        "[data]\nknown = -3\n",
        "[data]\nseed = 1.5\n",
        "[model]\nkernel = wide\n",
        "[train]\nlearning_rate = fast\n",
        "[data]\nsource = idx\ntrain_images = a\n",
        "[model]\nclasses = 3\n",
        "[model]\ndropout = 1.5\n",
        "[train]\nepochs = 0\n",
        "[train]\ndecay_points = 0.5,x\n",
        "[openset]\nmode = both\n",
        "[openset]\ntail_size = 1\n",
        "[openset]\nthreshold = 2\n",
        "[openset]\nthreshold_rule = vote\n",
        "[eval]\noutliers = noise,cats\n",
        "[eval]\nsweep_points = 0\n",
    };
    for (const char* text : bad) EXPECT_THROW(cli::parse_run_config(ini(text)), ConfigError) << text;
}

TEST(RunConfig, MalformedFileIsAConfigError) {
    const fs::path p = fs::temp_directory_path() / ("crosr_bad_" + std::to_string(::getpid()) + ".ini");
    io::write_file(p.string(), "[data\nknown = 3\n");
    EXPECT_THROW(cli::load_run_config(p.string()), ConfigError);
    fs::remove(p);
    EXPECT_THROW(cli::load_run_config(p.string()), IoError);
}

TEST(RunConfig, EffectiveConfigReparsesToTheSameRun) {
    const auto rc = cli::parse_run_config(ini(kTinyConfig + "[eval]\nthreshold = 0.3\n"), 12);
    const auto back = cli::parse_run_config(cli::effective_config(rc));
    EXPECT_EQ(back.seed, rc.seed);
    EXPECT_EQ(back.model, rc.model);
    EXPECT_EQ(back.train.seed, rc.train.seed);
    EXPECT_EQ(back.train.epochs, rc.train.epochs);
    EXPECT_EQ(back.train.batch_size, rc.train.batch_size);
    EXPECT_EQ(back.train.learning_rate, rc.train.learning_rate);
    EXPECT_EQ(back.train.decay_points, rc.train.decay_points);
    EXPECT_EQ(back.data.seed, rc.data.seed);
    EXPECT_EQ(back.data.train_per_class, rc.data.train_per_class);
    EXPECT_EQ(back.openset.tail.tail_size, rc.openset.tail.tail_size);
    EXPECT_EQ(back.eval.threshold, rc.eval.threshold);
}

TEST(Datasets, SyntheticSourceMatchesTheDeskBenchmark) {
    const auto rc = cli::parse_run_config(ini(kTinyConfig));
    const auto d = cli::load_datasets(rc.data);
    bench::DeskOptions opt;
    opt.known = 4, opt.train_per_class = 40, opt.test_per_class = 15;
    const auto b = bench::make_desk_benchmark(4, opt);
    EXPECT_EQ(d.known_train.images, b.split.known_train.images);
    EXPECT_EQ(d.known_test.labels, b.split.known_test.labels);
    EXPECT_EQ(d.outliers.at("noise").images, b.noise.images);
    EXPECT_EQ(d.outliers.at("superimposed").images, b.superimposed.images);
    EXPECT_EQ(d.outliers.at("unknown-classes").size(), 6u * 15u);
}

TEST(ScoringThreads, ReadsEnvironment) {
    ::setenv("CROSR_THREADS", "3", 1);
    EXPECT_EQ(cli::scoring_threads(), 3u);
    for (const char* bad : {"0", "-2", "two", "3x"}) {
        ::setenv("CROSR_THREADS", bad, 1);
        EXPECT_THROW(cli::scoring_threads(), ConfigError) << bad;
    }
    ::unsetenv("CROSR_THREADS");
    EXPECT_GE(cli::scoring_threads(), 1u);
}

TEST(DetectorNames, VariantPrefixOnlyWhenNonDefault) {
    auto net = [](Variant v) { return DHRNetModel::build(bench::desk_model_config(2, v), 1); };
    auto profiles = [] { return std::vector<ClassProfile>(2, ClassProfile{0, {}, {1.0, 1.0}}); };
    auto model = [&](Variant v, FeatureMode m) {
        return OpenSetModel(net(v), OpenSetConfig::defaults_for(2, m), profiles());
    };
    EXPECT_EQ(cli::detector_name(model(Variant::kDhrnet, FeatureMode::kJoint)), "crosr");
    EXPECT_EQ(cli::detector_name(model(Variant::kLadder, FeatureMode::kJoint)), "ladder+crosr");
    EXPECT_EQ(cli::detector_name(model(Variant::kPlain, FeatureMode::kAv)), "openmax");
    EXPECT_EQ(cli::detector_name(model(Variant::kDhrnet, FeatureMode::kAv)), "dhrnet+openmax");
    EXPECT_EQ(cli::softmax_name(net(Variant::kPlain)), "softmax");
    EXPECT_EQ(cli::softmax_name(net(Variant::kDhrnet)), "dhrnet+softmax");
}

// One tiny end-to-end run through the binary, shared by the tests below.
class CliRun : public ::testing::Test {
   protected:
    static inline fs::path dir;
    static inline fs::path config;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("crosr_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        config = dir / "tiny.ini";
        io::write_file(config.string(), kTinyConfig);
        const std::string c = " --config '" + config.string() + "'";
        ASSERT_EQ(run_cli("train" + c + " --seed 2 --out '" + (dir / "a").string() + "'").code, 0);
        ASSERT_EQ(run_cli("fit" + c + " --model '" + (dir / "a/model.crsr").string() + "' --out '" +
                          (dir / "a").string() + "'")
                      .code,
                  0);
    }

    static void TearDownTestSuite() { fs::remove_all(dir); }

    static std::string cfg() { return " --config '" + config.string() + "'"; }
    static std::string openset() { return " --model '" + (dir / "a/openset.crsr").string() + "'"; }
    static std::string out(const std::string& name) { return " --out '" + (dir / name).string() + "'"; }
};

TEST_F(CliRun, TrainWritesDeclaredOutputs) {
    for (const char* f : {"model.crsr", "train_log.csv", "train_config.ini", "openset.crsr", "fit_log.csv"})
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(lines(slurp(dir / "a/train_log.csv")).size(), 4u);
    const auto fit = lines(slurp(dir / "a/fit_log.csv"));
    ASSERT_EQ(fit.size(), 5u);
    EXPECT_EQ(fit[0], "class,shape,scale");
}

TEST_F(CliRun, ModelFilesRoundTrip) {
    const auto net = DHRNetModel::load((dir / "a/model.crsr").string());
    EXPECT_EQ(io::encode(net.to_container()), slurp(dir / "a/model.crsr"));
    const auto om = OpenSetModel::load((dir / "a/openset.crsr").string());
    EXPECT_EQ(io::encode(om.to_container()), slurp(dir / "a/openset.crsr"));
    EXPECT_TRUE(om.network() == net);
    EXPECT_EQ(om.config().tail.tail_size, 10u);
    EXPECT_DOUBLE_EQ(om.config().tail.alpha, 10.0);
}

TEST_F(CliRun, TrainingIsByteDeterministic) {
    ASSERT_EQ(run_cli("train" + cfg() + " --seed 2" + out("b")).code, 0);
    for (const char* f : {"model.crsr", "train_log.csv", "train_config.ini"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    ASSERT_EQ(run_cli("fit" + cfg() + " --model '" + (dir / "b/model.crsr").string() + "'" + out("b")).code, 0);
    EXPECT_EQ(slurp(dir / "a/openset.crsr"), slurp(dir / "b/openset.crsr"));
    ASSERT_EQ(run_cli("train" + cfg() + " --seed 3" + out("c")).code, 0);
    EXPECT_NE(slurp(dir / "a/model.crsr"), slurp(dir / "c/model.crsr"));
}

TEST_F(CliRun, EvalReportLayout) {
    const std::string before = slurp(dir / "a/openset.crsr");
    ASSERT_EQ(run_cli("eval" + cfg() + openset() + out("e1")).code, 0);
    EXPECT_EQ(slurp(dir / "a/openset.crsr"), before);
    const auto rows = lines(slurp(dir / "e1/report.csv"));
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(rows[0], "detector,outlier_set,macro_f1");
    const std::vector<std::pair<std::string, std::string>> want{
        {"dhrnet+softmax", "noise"}, {"dhrnet+softmax", "superimposed"}, {"crosr", "noise"}, {"crosr", "superimposed"}};
    for (std::size_t i = 0; i < want.size(); ++i) {
        const auto f = fields(rows[i + 1]);
        ASSERT_EQ(f.size(), 3u);
        EXPECT_EQ(f[0], want[i].first);
        EXPECT_EQ(f[1], want[i].second);
        const double v = std::stod(f[2]);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    // Support per class equals the test counts: 15 per known class and one
    // outlier per known test sample.
    const auto per_class = lines(slurp(dir / "e1/report_crosr_noise_per_class.csv"));
    ASSERT_EQ(per_class.size(), 6u);
    for (std::size_t c = 1; c <= 4; ++c) EXPECT_EQ(fields(per_class[c])[4], "15");
    EXPECT_EQ(fields(per_class[5])[0], "unknown");
    EXPECT_EQ(fields(per_class[5])[4], "60");
    EXPECT_NE(slurp(dir / "e1/report_crosr_noise.txt").find("detector: crosr"), std::string::npos);
}

TEST_F(CliRun, EvalIsIndependentOfThreadCount) {
    ASSERT_EQ(run_cli("eval" + cfg() + openset() + out("t1"), "CROSR_THREADS=1").code, 0);
    ASSERT_EQ(run_cli("eval" + cfg() + openset() + out("t4"), "CROSR_THREADS=4").code, 0);
    EXPECT_EQ(slurp(dir / "t1/report.csv"), slurp(dir / "t4/report.csv"));
    EXPECT_EQ(slurp(dir / "t1/report_crosr_superimposed.txt"), slurp(dir / "t4/report_crosr_superimposed.txt"));
    EXPECT_EQ(run_cli("eval" + cfg() + openset() + out("t0"), "CROSR_THREADS=none").code, 3);
}

TEST_F(CliRun, SweepHasTwentyIncreasingThresholds) {
    ASSERT_EQ(run_cli("sweep" + cfg() + openset() + out("s")).code, 0);
    for (const char* f : {"sweep_crosr_noise.csv", "sweep_crosr_superimposed.csv", "sweep_dhrnet_softmax_noise.csv"}) {
        const auto rows = lines(slurp(dir / "s" / f));
        ASSERT_EQ(rows.size(), 21u) << f;
        EXPECT_EQ(rows[0], "theta,macro_f1");
        double prev = -1.0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double theta = std::stod(fields(rows[i])[0]);
            EXPECT_GT(theta, prev);
            prev = theta;
        }
        EXPECT_EQ(fields(rows[1])[0], "0");
        EXPECT_EQ(fields(rows[20])[0], "0.95");
    }
}

TEST_F(CliRun, SweepAtEvalThresholdMatchesEval) {
    ASSERT_EQ(run_cli("eval" + cfg() + openset() + out("m")).code, 0);
    ASSERT_EQ(run_cli("sweep" + cfg() + openset() + out("m")).code, 0);
    const auto sweep = lines(slurp(dir / "m/sweep_crosr_noise.csv"));
    std::string at_half;
    for (const auto& r : sweep)
        if (fields(r)[0] == "0.5") at_half = fields(r)[1];
    EXPECT_EQ(fields(lines(slurp(dir / "m/report.csv"))[3])[2], at_half);
}

TEST_F(CliRun, ExitCodes) {
    EXPECT_EQ(run_cli("--help").code, 0);
    EXPECT_EQ(run_cli("").code, 3);
    EXPECT_EQ(run_cli("train --config x").code, 3);
    EXPECT_EQ(run_cli("train" + cfg() + " --seed abc" + out("x")).code, 3);

    const auto missing = run_cli("train --config '" + (dir / "none.ini").string() + "'" + out("x"));
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.output.find("error[io]"), std::string::npos);

    io::write_file((dir / "idx.ini").string(), "[data]\nsource = idx\ntrain_images = /nonexistent/imgs\n"
                                               "train_labels = b\ntest_images = c\ntest_labels = d\n");
    const auto nodata = run_cli("train --config '" + (dir / "idx.ini").string() + "'" + out("x"));
    EXPECT_EQ(nodata.code, 2);
    EXPECT_NE(nodata.output.find("/nonexistent/imgs"), std::string::npos);

    io::write_file((dir / "typo.ini").string(), "[train]\nepoch = 3\n");
    EXPECT_EQ(run_cli("train --config '" + (dir / "typo.ini").string() + "'" + out("x")).code, 3);

    EXPECT_EQ(run_cli("eval" + cfg() + " --model '" + (dir / "a/model.crsr").string() + "'" + out("x")).code, 4);

    io::write_file((dir / "garbage.crsr").string(), "CRSR but not really");
    EXPECT_EQ(run_cli("eval" + cfg() + " --model '" + (dir / "garbage.crsr").string() + "'" + out("x")).code, 4);

    std::string big = kTinyConfig;
    big.replace(big.find("tail_size = 10"), 14, "tail_size = 60");
    io::write_file((dir / "bigtail.ini").string(), big);
    const auto fit = run_cli("fit --config '" + (dir / "bigtail.ini").string() + "' --model '" +
                             (dir / "a/model.crsr").string() + "'" + out("x"));
    EXPECT_EQ(fit.code, 5);
    EXPECT_NE(fit.output.find("error[fit]"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "x/openset.crsr"));
}

TEST_F(CliRun, IdxSourceTrainsAndEvaluates) {
    // Three classes of 8x8 bars; class c lights row 2c+1.
    auto write = [&](const std::string& stem, std::size_t per_class) {
        std::string img, lab;
        write_be32(img, bench::kIdxImageMagic);
        write_be32(img, static_cast<std::uint32_t>(3 * per_class));
        write_be32(img, 8);
        write_be32(img, 8);
        write_be32(lab, bench::kIdxLabelMagic);
        write_be32(lab, static_cast<std::uint32_t>(3 * per_class));
        for (std::size_t i = 0; i < 3 * per_class; ++i) {
            const std::size_t c = i % 3;
            lab.push_back(static_cast<char>(c));
            for (std::size_t r = 0; r < 8; ++r)
                for (std::size_t k = 0; k < 8; ++k)
                    img.push_back(static_cast<char>(r == 2 * c + 1 ? 200 + (i + k) % 50 : (i * 7 + r + k) % 40));
        }
        io::write_file((dir / (stem + "-images")).string(), img);
        io::write_file((dir / (stem + "-labels")).string(), lab);
    };
    write("train", 30);
    write("test", 10);
    const std::string text = "[data]\nsource = idx\nclasses = 3\nknown = 2\ntrain_images = " +
                             (dir / "train-images").string() + "\ntrain_labels = " + (dir / "train-labels").string() +
                             "\ntest_images = " + (dir / "test-images").string() + "\ntest_labels = " +
                             (dir / "test-labels").string() +
                             "\n[model]\ninput = 1x8x8\nstages = 1x8p,1x8p\ntrunk =\nhead = 16\nbottleneck = 4\n"
                             "[train]\nepochs = 2\n[openset]\ntail_size = 5\n"
                             "[eval]\noutliers = noise,unknown-classes\n";
    io::write_file((dir / "idx_ok.ini").string(), text);
    const std::string c = " --config '" + (dir / "idx_ok.ini").string() + "'";
    ASSERT_EQ(run_cli("train" + c + out("i")).code, 0);
    ASSERT_EQ(run_cli("fit" + c + " --model '" + (dir / "i/model.crsr").string() + "'" + out("i")).code, 0);
    ASSERT_EQ(run_cli("eval" + c + " --model '" + (dir / "i/openset.crsr").string() + "'" + out("i")).code, 0);
    const auto rows = lines(slurp(dir / "i/report.csv"));
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(fields(rows[2])[1], "unknown-classes");
    const auto per_class = lines(slurp(dir / "i/report_crosr_unknown-classes_per_class.csv"));
    EXPECT_EQ(fields(per_class.back())[4], "10");
}
