#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/rng.hpp"
#include "crosr/tape.hpp"
#include "crosr/tensor.hpp"

namespace crosr::nn {

enum class Mode { kTrain, kEval };

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                          shape_string(t.shape()));
    }
}

// Unfolds one sample [C,H,W] into rows (c,kh,kw) x columns (h,w), zero padded.
inline void im2col(const double* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k,
                   std::vector<double>& cols) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t hw = h * w;
    cols.assign(c_in * k * k * hw, 0.0);
    for (std::size_t c = 0; c < c_in; ++c) {
        const double* plane = x + c * hw;
        for (std::size_t kh = 0; kh < k; ++kh) {
            for (std::size_t kw = 0; kw < k; ++kw) {
                double* row = cols.data() + ((c * k + kh) * k + kw) * hw;
                const auto dh = static_cast<std::ptrdiff_t>(kh) - pad;
                const auto dw = static_cast<std::ptrdiff_t>(kw) - pad;
                for (std::size_t i = 0; i < h; ++i) {
                    const auto si = static_cast<std::ptrdiff_t>(i) + dh;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
                    const std::size_t j1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), static_cast<std::ptrdiff_t>(w) - dw));
                    for (std::size_t j = j0; j < j1; ++j) {
                        row[i * w + j] = plane[static_cast<std::size_t>(si) * w +
                                               static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j) + dw)];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters column gradients back onto the sample.
inline void col2im(const std::vector<double>& cols, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t k, double* gx) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < c_in; ++c) {
        double* plane = gx + c * hw;
        for (std::size_t kh = 0; kh < k; ++kh) {
            for (std::size_t kw = 0; kw < k; ++kw) {
                const double* row = cols.data() + ((c * k + kh) * k + kw) * hw;
                const auto dh = static_cast<std::ptrdiff_t>(kh) - pad;
                const auto dw = static_cast<std::ptrdiff_t>(kw) - pad;
                for (std::size_t i = 0; i < h; ++i) {
                    const auto si = static_cast<std::ptrdiff_t>(i) + dh;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
                    const std::size_t j1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), static_cast<std::ptrdiff_t>(w) - dw));
                    for (std::size_t j = j0; j < j1; ++j) {
                        plane[static_cast<std::size_t>(si) * w +
                              static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j) + dw)] += row[i * w + j];
                    }
                }
            }
        }
    }
}

inline std::uint64_t hash_index(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

}  // namespace detail

// Stride-1 convolution with zero "same" padding.
// x: [B,C,H,W], weight: [O,C,K,K] with K odd, bias: [O] -> [B,O,H,W].
inline Var conv2d(Tape& tape, Var x, Var weight, Var bias) {
    const Tensor& xv = tape.value(x);
    const Tensor& wv = tape.value(weight);
    const Tensor& bv = tape.value(bias);
    detail::require_rank(xv, 4, "conv2d");
    detail::require_rank(wv, 4, "conv2d weight");
    const std::size_t batch = xv.dim(0), c_in = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t c_out = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != c_in || wv.dim(3) != k || k % 2 == 0) {
        throw ConfigError("conv2d: weight " + shape_string(wv.shape()) + " incompatible with input " +
                          shape_string(xv.shape()) + " (square odd kernel required)");
    }
    if (bv.size() != c_out) throw ConfigError("conv2d: bias length must equal output channels");

    const std::size_t hw = h * w, rows = c_in * k * k;
    Tensor out(Shape{batch, c_out, h, w});
    std::vector<double> cols;
    for (std::size_t b = 0; b < batch; ++b) {
        detail::im2col(xv.data().data() + b * c_in * hw, c_in, h, w, k, cols);
        double* o = out.data().data() + b * c_out * hw;
        for (std::size_t oc = 0; oc < c_out; ++oc) {
            double* orow = o + oc * hw;
            std::fill(orow, orow + hw, bv[oc]);
            const double* wrow = wv.data().data() + oc * rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const double wr = wrow[r];
                if (wr == 0.0) continue;
                const double* crow = cols.data() + r * hw;
                for (std::size_t i = 0; i < hw; ++i) orow[i] += wr * crow[i];
            }
        }
    }

    return tape.record(std::move(out), {x, weight, bias}, [=](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(weight);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(weight);
        if (t.requires_grad(bias)) {
            auto gb = t.grad_buffer(bias);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t oc = 0; oc < c_out; ++oc) {
                    const double* grow = g.data().data() + (b * c_out + oc) * hw;
                    double s = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) s += grow[i];
                    gb[oc] += s;
                }
        }
        if (!need_x && !need_w) return;
        std::vector<double> cols, cols_t, gcols;
        std::span<double> gw = need_w ? t.grad_buffer(weight) : std::span<double>{};
        std::span<double> gx = need_x ? t.grad_buffer(x) : std::span<double>{};
        for (std::size_t b = 0; b < batch; ++b) {
            const double* gsample = g.data().data() + b * c_out * hw;
            if (need_w) {
                detail::im2col(xv.data().data() + b * c_in * hw, c_in, h, w, k, cols);
                cols_t.assign(hw * rows, 0.0);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < hw; ++i) cols_t[i * rows + r] = cols[r * hw + i];
                for (std::size_t oc = 0; oc < c_out; ++oc) {
                    double* gwrow = gw.data() + oc * rows;
                    const double* grow = gsample + oc * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double gi = grow[i];
                        if (gi == 0.0) continue;
                        const double* ct = cols_t.data() + i * rows;
                        for (std::size_t r = 0; r < rows; ++r) gwrow[r] += gi * ct[r];
                    }
                }
            }
            if (need_x) {
                gcols.assign(rows * hw, 0.0);
                for (std::size_t oc = 0; oc < c_out; ++oc) {
                    const double* wrow = wv.data().data() + oc * rows;
                    const double* grow = gsample + oc * hw;
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double wr = wrow[r];
                        if (wr == 0.0) continue;
                        double* gc = gcols.data() + r * hw;
                        for (std::size_t i = 0; i < hw; ++i) gc[i] += wr * grow[i];
                    }
                }
                detail::col2im(gcols, c_in, h, w, k, gx.data() + b * c_in * hw);
            }
        }
    });
}

// Fully connected layer. x: [B,I], weight: [O,I], bias: [O] -> [B,O].
inline Var dense(Tape& tape, Var x, Var weight, Var bias) {
    const Tensor& xv = tape.value(x);
    const Tensor& wv = tape.value(weight);
    const Tensor& bv = tape.value(bias);
    detail::require_rank(xv, 2, "dense");
    detail::require_rank(wv, 2, "dense weight");
    const std::size_t batch = xv.dim(0), in = xv.dim(1), outn = wv.dim(0);
    if (wv.dim(1) != in || bv.size() != outn) {
        throw ConfigError("dense: weight " + shape_string(wv.shape()) + " incompatible with input " +
                          shape_string(xv.shape()));
    }
    Tensor out(Shape{batch, outn});
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xr = xv.data().data() + b * in;
        for (std::size_t o = 0; o < outn; ++o) {
            const double* wr = wv.data().data() + o * in;
            double s = bv[o];
            for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
            out[b * outn + o] = s;
        }
    }
    return tape.record(std::move(out), {x, weight, bias}, [=](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(weight);
        if (t.requires_grad(bias)) {
            auto gb = t.grad_buffer(bias);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < outn; ++o) gb[o] += g[b * outn + o];
        }
        if (t.requires_grad(weight)) {
            auto gw = t.grad_buffer(weight);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* xr = xv.data().data() + b * in;
                for (std::size_t o = 0; o < outn; ++o) {
                    const double go = g[b * outn + o];
                    if (go == 0.0) continue;
                    double* gwr = gw.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                }
            }
        }
        if (t.requires_grad(x)) {
            auto gx = t.grad_buffer(x);
            for (std::size_t b = 0; b < batch; ++b) {
                double* gxr = gx.data() + b * in;
                for (std::size_t o = 0; o < outn; ++o) {
                    const double go = g[b * outn + o];
                    if (go == 0.0) continue;
                    const double* wr = wv.data().data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                }
            }
        }
    });
}

inline Var relu(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    Tensor out(xv.shape());
    std::uint64_t sig = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const bool on = xv[i] > 0.0;
        out[i] = on ? xv[i] : 0.0;
        sig = detail::hash_index(sig, on);
    }
    tape.mix_signature(sig);
    return tape.record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        auto gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.shape() != bv.shape()) {
        throw ConfigError("add: shape mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
    }
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
        t.accumulate(a, g.data());
        t.accumulate(b, g.data());
    });
}

// wa * a + wb * b for equally shaped values.
inline Var weighted_sum(Tape& tape, Var a, double wa, Var b, double wb) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.shape() != bv.shape()) throw ConfigError("weighted_sum: shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = wa * av[i] + wb * bv[i];
    return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) {
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += wa * g[i];
        }
        if (t.requires_grad(b)) {
            auto gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += wb * g[i];
        }
    });
}

inline Var reshape(Tape& tape, Var x, Shape shape) {
    Tensor out = tape.value(x).reshaped(std::move(shape));
    return tape.record(std::move(out), {x}, [=](Tape& t, const Tensor& g) { t.accumulate(x, g.data()); });
}

// [B, ...] -> [B, prod(...)].
inline Var flatten(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    return reshape(tape, x, Shape{xv.dim(0), xv.size() / xv.dim(0)});
}

// Non-overlapping max pooling; stride equals the window. Trailing rows and
// columns that do not fill a window are dropped.
inline Var maxpool2d(Tape& tape, Var x, std::size_t window = 2) {
    const Tensor& xv = tape.value(x);
    detail::require_rank(xv, 4, "maxpool2d");
    const std::size_t batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    if (window == 0 || oh == 0 || ow == 0) {
        throw ConfigError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                          shape_string(xv.shape()));
    }
    Tensor out(Shape{batch, ch, oh, ow});
    std::vector<std::size_t> argmax(out.size());
    std::uint64_t sig = 0;
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* plane = xv.data().data() + bc * h * w;
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (i * window) * w + j * window;
                for (std::size_t di = 0; di < window; ++di)
                    for (std::size_t dj = 0; dj < window; ++dj) {
                        const std::size_t idx = (i * window + di) * w + j * window + dj;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                const std::size_t o = (bc * oh + i) * ow + j;
                out[o] = plane[best];
                argmax[o] = bc * h * w + best;
                sig = detail::hash_index(sig, best);
            }
    }
    tape.mix_signature(sig);
    return tape.record(std::move(out), {x}, [=, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
    });
}

// [B,C,H,W] -> [B,C], max over the spatial axes. Ties resolve to the first
// position in row-major order, which alone receives the gradient.
inline Var global_max_pool(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    detail::require_rank(xv, 4, "global_max_pool");
    const std::size_t batch = xv.dim(0), ch = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out(Shape{batch, ch});
    std::vector<std::size_t> argmax(batch * ch);
    std::uint64_t sig = 0;
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* plane = xv.data().data() + bc * hw;
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
            if (plane[i] > plane[best]) best = i;
        out[bc] = plane[best];
        argmax[bc] = bc * hw + best;
        sig = detail::hash_index(sig, best);
    }
    tape.mix_signature(sig);
    return tape.record(std::move(out), {x}, [=, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
    });
}

// Nearest-neighbour upsampling to [B,C,out_h,out_w]; output row i reads
// input row min(i / 2, H - 1), and likewise for columns.
inline Var upsample_nearest(Tape& tape, Var x, std::size_t out_h, std::size_t out_w) {
    const Tensor& xv = tape.value(x);
    detail::require_rank(xv, 4, "upsample_nearest");
    const std::size_t batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    std::vector<std::size_t> src(batch * ch * out_h * out_w);
    Tensor out(Shape{batch, ch, out_h, out_w});
    for (std::size_t bc = 0; bc < batch * ch; ++bc)
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                const std::size_t si = std::min(i / 2, h - 1), sj = std::min(j / 2, w - 1);
                const std::size_t o = (bc * out_h + i) * out_w + j;
                src[o] = (bc * h + si) * w + sj;
                out[o] = xv[src[o]];
            }
    return tape.record(std::move(out), {x}, [=, src = std::move(src)](Tape& t, const Tensor& g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
    });
}

// Inverted dropout: identity in eval mode; in train mode each element is
// zeroed with probability `rate` and survivors are scaled by 1 / (1 - rate).
inline Var dropout(Tape& tape, Var x, double rate, Mode mode, Rng* rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::kEval || rate == 0.0) return x;
    if (rng == nullptr) throw ConfigError("dropout in train mode requires a random source");
    const Tensor& xv = tape.value(x);
    const double scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(xv.size());
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng->uniform() < rate ? 0.0 : scale;
        out[i] = xv[i] * mask[i];
    }
    return tape.record(std::move(out), {x}, [=, mask = std::move(mask)](Tape& t, const Tensor& g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
inline Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::size_t> labels) {
    const Tensor& lv = tape.value(logits);
    detail::require_rank(lv, 2, "softmax_cross_entropy");
    const std::size_t batch = lv.dim(0), n = lv.dim(1);
    if (labels.size() != batch) throw InputError("softmax_cross_entropy: label count does not match batch");
    std::vector<double> probs(batch * n);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] >= n) {
            throw InputError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                             " outside [0, " + std::to_string(n) + ")");
        }
        const double* row = lv.data().data() + b * n;
        const double mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
        const double log_sum = std::log(sum);
        for (std::size_t i = 0; i < n; ++i) probs[b * n + i] = std::exp(row[i] - mx - log_sum);
        loss += -(row[labels[b]] - mx - log_sum);
    }
    loss /= static_cast<double>(batch);
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return tape.record(Tensor::scalar(loss), {logits},
                       [=, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Tensor& g) {
                           auto gl = t.grad_buffer(logits);
                           const double s = g[0] / static_cast<double>(batch);
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t i = 0; i < n; ++i)
                                   gl[b * n + i] += s * (probs[b * n + i] - (i == lab[b] ? 1.0 : 0.0));
                       });
}

// Mean over the batch of ||x - x_hat||^2 divided by the per-sample element
// count, i.e. the mean squared error over all elements.
inline Var l2_reconstruction_loss(Tape& tape, Var x, Var x_hat) {
    const Tensor& xv = tape.value(x);
    const Tensor& rv = tape.value(x_hat);
    if (xv.shape() != rv.shape()) {
        throw InputError("l2_reconstruction_loss: shape mismatch " + shape_string(xv.shape()) + " vs " +
                         shape_string(rv.shape()));
    }
    const auto count = static_cast<double>(xv.size());
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double d = rv[i] - xv[i];
        s += d * d;
    }
    return tape.record(Tensor::scalar(s / count), {x, x_hat}, [=](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& rv = t.value(x_hat);
        const double c = 2.0 * g[0] / count;
        if (t.requires_grad(x_hat)) {
            auto gr = t.grad_buffer(x_hat);
            for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += c * (rv[i] - xv[i]);
        }
        if (t.requires_grad(x)) {
            auto gx = t.grad_buffer(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= c * (rv[i] - xv[i]);
        }
    });
}

}  // namespace crosr::nn
