#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/ops.hpp"

namespace crosr::nn {

enum class LayerKind { kConv2d, kDense, kRelu, kMaxPool2d, kGlobalMaxPool, kDropout, kElementwiseSum };

// One step of a feed-forward block. Convolutions use a square `kernel` and
// same padding; max pooling always strides by its window.
struct LayerSpec {
    LayerKind kind = LayerKind::kRelu;
    std::size_t kernel = 0;
    std::size_t channels = 0;  // output channels (conv) or units (dense)
    std::size_t window = 2;
    double rate = 0.0;

    static LayerSpec conv(std::size_t channels, std::size_t kernel = 3) {
        return {LayerKind::kConv2d, kernel, channels, 0, 0.0};
    }
    static LayerSpec fc(std::size_t units) { return {LayerKind::kDense, 0, units, 0, 0.0}; }
    static LayerSpec relu() { return {LayerKind::kRelu}; }
    static LayerSpec maxpool(std::size_t window = 2) { return {LayerKind::kMaxPool2d, 0, 0, window, 0.0}; }
    static LayerSpec global_max_pool() { return {LayerKind::kGlobalMaxPool}; }
    static LayerSpec drop(double rate) { return {LayerKind::kDropout, 0, 0, 0, rate}; }

    bool has_parameters() const { return kind == LayerKind::kConv2d || kind == LayerKind::kDense; }

    void validate() const {
        switch (kind) {
            case LayerKind::kConv2d:
                if (kernel == 0 || kernel % 2 == 0) {
                    throw ConfigError("conv2d kernel must be odd, got " + std::to_string(kernel));
                }
                if (channels == 0) throw ConfigError("conv2d needs at least one output channel");
                break;
            case LayerKind::kDense:
                if (channels == 0) throw ConfigError("dense layer needs at least one unit");
                break;
            case LayerKind::kMaxPool2d:
                if (window < 2) throw ConfigError("maxpool window must be at least 2");
                break;
            case LayerKind::kDropout:
                if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
                break;
            default:
                break;
        }
    }
};

// Runs a parameter-free layer, or a parameterised one with its (weight, bias).
// Element-wise sums take two operands and are applied by the caller via add().
inline Var apply_layer(Tape& tape, const LayerSpec& spec, Var x, const Var* weight, const Var* bias, Mode mode,
                       Rng* rng) {
    switch (spec.kind) {
        case LayerKind::kConv2d: return conv2d(tape, x, *weight, *bias);
        case LayerKind::kDense: return dense(tape, x, *weight, *bias);
        case LayerKind::kRelu: return relu(tape, x);
        case LayerKind::kMaxPool2d: return maxpool2d(tape, x, spec.window);
        case LayerKind::kGlobalMaxPool: return global_max_pool(tape, x);
        case LayerKind::kDropout: return dropout(tape, x, spec.rate, mode, rng);
        case LayerKind::kElementwiseSum: break;
    }
    throw ConfigError("element-wise sum is a two-operand layer; use add()");
}

}  // namespace crosr::nn
