#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/dhrnet.hpp"
#include "crosr/error.hpp"
#include "crosr/ops.hpp"
#include "crosr/rng.hpp"
#include "crosr/serialize.hpp"

namespace crosr {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    // The rate is multiplied by lr_decay at each listed fraction of the run.
    std::vector<double> decay_points{0.5, 0.75};
    double lr_decay = 0.1;
    double momentum = 0.9;
    double lambda_cls = 1.0;
    double lambda_rec = 1.0;
    std::uint64_t seed = 0;
    // Overrides the model's dropout rate when set.
    std::optional<double> dropout;

    double rate_at(std::size_t epoch) const {
        double lr = learning_rate;
        for (double p : decay_points)
            if (static_cast<double>(epoch) >= std::floor(p * static_cast<double>(epochs))) lr *= lr_decay;
        return lr;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double cls_loss = 0.0;
    double rec_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,cls_loss,rec_loss,val_acc\n";
        for (const auto& e : epochs) {
            os << e.epoch << ',' << io::format_double(e.cls_loss) << ',' << io::format_double(e.rec_loss) << ','
               << io::format_double(e.val_acc) << '\n';
        }
        return os.str();
    }
};

struct LossTerms {
    Var total;
    Var cls;
    std::optional<Var> rec;
};

// lambda_cls * CE(y, labels) + lambda_rec * MSE(x, x_hat); the reconstruction
// term is dropped for networks without a decoder.
inline LossTerms joint_loss(Tape& tape, const DHRNetModel& model, Var x, std::span<const std::size_t> labels,
                            std::span<const Var> params, Mode mode, Rng* rng, double lambda_cls, double lambda_rec) {
    const ForwardVars fv = model.forward(tape, x, params, mode, rng);
    LossTerms out;
    out.cls = nn::softmax_cross_entropy(tape, fv.y, labels);
    if (fv.x_hat) {
        out.rec = nn::l2_reconstruction_loss(tape, x, *fv.x_hat);
        out.total = nn::weighted_sum(tape, out.cls, lambda_cls, *out.rec, lambda_rec);
    } else {
        out.total = nn::weighted_sum(tape, out.cls, lambda_cls, out.cls, 0.0);
    }
    return out;
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// Fraction of samples whose arg-max activation equals the label.
inline double closed_set_accuracy(const DHRNetModel& model, const bench::LabeledDataset& data,
                                  std::size_t batch = 256) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    const std::size_t n = model.config().num_classes;
    for (std::size_t begin = 0; begin < data.size(); begin += batch) {
        const std::size_t end = std::min(data.size(), begin + batch);
        const Tensor y = model.forward(nn::slice_batch(data.images, begin, end), Mode::kEval).y;
        for (std::size_t i = begin; i < end; ++i)
            if (argmax(y.data().subspan((i - begin) * n, n)) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Mini-batch SGD with momentum on the joint objective. Only known-class
// samples are accepted.
inline TrainLog train(DHRNetModel& model, const bench::LabeledDataset& data, const TrainConfig& cfg,
                      const bench::LabeledDataset* validation = nullptr) {
    const std::size_t n_classes = model.config().num_classes;
    if (data.num_classes != n_classes) {
        throw InputError("training data has " + std::to_string(data.num_classes) + " classes, model expects " +
                         std::to_string(n_classes));
    }
    for (auto l : data.labels) {
        if (l >= n_classes) throw InputError("training data contains an unknown or out-of-range label");
    }
    if (data.size() == 0) throw InputError("training data is empty");
    if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
    if (cfg.dropout) {
        auto c = model.config();
        c.dropout = *cfg.dropout;
        c.validate();
        DHRNetModel rebuilt = DHRNetModel::build(c, 0);
        rebuilt.parameters() = model.parameters();
        model = std::move(rebuilt);
    }

    auto& params = model.parameters();
    std::vector<Tensor> velocity;
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.push_back(Tensor::zeros(p.value.shape()));

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainLog log;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.rate_at(epoch);
        rng.shuffle(order.begin(), order.end());
        double cls_sum = 0.0, rec_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::span<const std::size_t> rows(order.data() + begin, end - begin);
            std::vector<std::size_t> labels;
            labels.reserve(rows.size());
            for (auto r : rows) labels.push_back(data.labels[r]);

            Tape tape;
            Var x = tape.constant(nn::gather_batch(data.images, rows));
            std::vector<Var> vars;
            vars.reserve(params.size());
            for (const auto& p : params) vars.push_back(tape.parameter(p.value));
            const LossTerms loss =
                joint_loss(tape, model, x, labels, vars, Mode::kTrain, &rng, cfg.lambda_cls, cfg.lambda_rec);
            const double total = tape.value(loss.total).item();
            if (!std::isfinite(total)) {
                throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch + 1));
            }
            const auto weight = static_cast<double>(rows.size());
            cls_sum += weight * tape.value(loss.cls).item();
            if (loss.rec) rec_sum += weight * tape.value(*loss.rec).item();
            tape.backward(loss.total);

            for (std::size_t i = 0; i < params.size(); ++i) {
                const Tensor g = tape.grad(vars[i]);
                auto v = velocity[i].data();
                auto w = params[i].value.data();
                for (std::size_t j = 0; j < w.size(); ++j) {
                    v[j] = cfg.momentum * v[j] + g[j];
                    w[j] -= lr * v[j];
                }
            }
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.cls_loss = cls_sum / static_cast<double>(data.size());
        rec.rec_loss = rec_sum / static_cast<double>(data.size());
        rec.val_acc = closed_set_accuracy(model, validation ? *validation : data);
        if (!std::isfinite(rec.cls_loss) || !std::isfinite(rec.rec_loss)) {
            throw NumericalError("training diverged at epoch " + std::to_string(rec.epoch));
        }
        log.epochs.push_back(rec);
    }
    return log;
}

}  // namespace crosr
