#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/tape.hpp"

namespace crosr::nn {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    // Coordinates whose +/-h probes changed a ReLU mask or a pooling argmax;
    // the loss is not differentiable across such points, so they are excluded.
    std::size_t skipped_nonsmooth = 0;
};

// Builds the loss of a network fragment on a fresh tape. `params` holds one
// Var per checked parameter tensor, in order.
using Fragment = std::function<Var(Tape&, std::span<const Var> params)>;

// Compares reverse-mode gradients with central differences of step `h`:
// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// The fragment must be deterministic.
inline GradCheckResult grad_check(std::span<Tensor* const> params, const Fragment& fragment, double h = 1e-5) {
    auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads, std::uint64_t* signature) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (Tensor* p : params) vars.push_back(tape.parameter(*p));
        Var loss = fragment(tape, vars);
        const double value = tape.value(loss).item();
        if (!std::isfinite(value)) throw NumericalError("grad_check: non-finite loss");
        if (with_grad) {
            tape.backward(loss);
            for (Var v : vars) grads->push_back(tape.grad(v));
        }
        *signature = tape.activation_signature();
        return value;
    };

    std::vector<Tensor> analytic;
    std::uint64_t base_signature = 0;
    evaluate(true, &analytic, &base_signature);

    GradCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t[i];
            std::uint64_t sig_plus = 0, sig_minus = 0;
            t[i] = saved + h;
            const double f_plus = evaluate(false, nullptr, &sig_plus);
            t[i] = saved - h;
            const double f_minus = evaluate(false, nullptr, &sig_minus);
            t[i] = saved;
            if (sig_plus != base_signature || sig_minus != base_signature) {
                ++result.skipped_nonsmooth;
                continue;
            }
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace crosr::nn
