#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "crosr/error.hpp"
#include "crosr/tensor.hpp"

namespace crosr::bench {

// Images in [0,1] with labels in [0, num_classes]; label == num_classes marks
// a sample from an unknown class.
struct LabeledDataset {
    nn::Tensor images;  // [B,C,H,W]
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string provenance;

    std::size_t size() const { return labels.size(); }
    std::size_t unknown_label() const { return num_classes; }
    bool is_unknown(std::size_t i) const { return labels[i] == num_classes; }

    bool has_unknowns() const {
        return std::any_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == num_classes; });
    }

    void validate() const {
        if (images.rank() != 4 || images.dim(0) != labels.size()) {
            throw InputError("dataset '" + provenance + "': image tensor " + nn::shape_string(images.shape()) +
                             " does not match " + std::to_string(labels.size()) + " labels");
        }
        for (auto l : labels)
            if (l > num_classes) throw InputError("dataset '" + provenance + "': label out of range");
        for (double v : images.data())
            if (!(v >= 0.0 && v <= 1.0)) throw InputError("dataset '" + provenance + "': pixel outside [0,1]");
    }

    LabeledDataset subset(const std::vector<std::size_t>& rows) const {
        return {nn::gather_batch(images, rows), [&] {
                    std::vector<std::size_t> l;
                    l.reserve(rows.size());
                    for (auto r : rows) l.push_back(labels[r]);
                    return l;
                }(),
                num_classes, provenance};
    }
};

// Concatenates datasets with identical image shape and class count.
inline LabeledDataset concat(const std::vector<const LabeledDataset*>& parts, std::string provenance) {
    if (parts.empty()) throw InputError("concat of zero datasets");
    LabeledDataset out;
    out.num_classes = parts.front()->num_classes;
    out.provenance = std::move(provenance);
    nn::Shape shape = parts.front()->images.shape();
    shape[0] = 0;
    std::vector<double> data;
    for (const auto* p : parts) {
        if (p->num_classes != out.num_classes) throw InputError("concat: class counts differ");
        for (std::size_t d = 1; d < 4; ++d)
            if (p->images.dim(d) != shape[d]) throw InputError("concat: image shapes differ");
        shape[0] += p->size();
        data.insert(data.end(), p->images.data().begin(), p->images.data().end());
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    }
    out.images = nn::Tensor(std::move(shape), std::move(data));
    return out;
}

}  // namespace crosr::bench
