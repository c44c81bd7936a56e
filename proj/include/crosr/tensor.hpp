#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crosr/error.hpp"

namespace crosr::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major array of doubles.
class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_size(shape_)) {
            throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double item() const {
        if (data_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    // 4-d accessor for [B,C,H,W] tensors.
    double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

   private:
    void check_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw ConfigError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

// Rows [begin, end) along the leading axis.
inline Tensor slice_batch(const Tensor& t, std::size_t begin, std::size_t end) {
    const std::size_t stride = t.size() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = end - begin;
    std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                             t.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
    return Tensor(std::move(shape), std::move(data));
}

// Gathers the given leading-axis rows.
inline Tensor gather_batch(const Tensor& t, std::span<const std::size_t> rows) {
    const std::size_t stride = t.size() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = rows.size();
    std::vector<double> data;
    data.reserve(rows.size() * stride);
    for (auto r : rows) {
        auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
        data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
    }
    return Tensor(std::move(shape), std::move(data));
}

// Numerically stable softmax of one row.
inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

}  // namespace crosr::nn
