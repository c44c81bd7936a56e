#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/error.hpp"
#include "crosr/rng.hpp"

namespace crosr::bench {

struct SplitSpec {
    std::uint64_t seed = 0;
    std::vector<std::size_t> known;    // original class ids, in remapped order
    std::vector<std::size_t> unknown;  // empty under outlier addition
    std::string outlier_source;        // outlier addition only

    void validate() const {
        for (auto k : known)
            if (std::find(unknown.begin(), unknown.end(), k) != unknown.end()) {
                throw ConfigError("class " + std::to_string(k) + " is both known and unknown");
            }
    }
};

struct ClassSplit {
    SplitSpec spec;
    LabeledDataset known_train;
    LabeledDataset known_test;
    LabeledDataset unknown_test;
};

// Chooses `known_count` classes at random as knowns; the rest become unknowns.
inline SplitSpec choose_classes(std::size_t total_classes, std::size_t known_count, std::uint64_t seed) {
    if (known_count == 0 || known_count >= total_classes) {
        throw ConfigError("known class count must lie in [1, " + std::to_string(total_classes) + "), got " +
                          std::to_string(known_count));
    }
    std::vector<std::size_t> classes(total_classes);
    for (std::size_t i = 0; i < total_classes; ++i) classes[i] = i;
    Rng rng(seed);
    rng.shuffle(classes.begin(), classes.end());
    SplitSpec s;
    s.seed = seed;
    s.known.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(known_count));
    std::sort(s.known.begin(), s.known.end());
    s.unknown.assign(classes.begin() + static_cast<std::ptrdiff_t>(known_count), classes.end());
    std::sort(s.unknown.begin(), s.unknown.end());
    return s;
}

// Keeps samples of known classes, relabelled to their index in spec.known.
inline LabeledDataset select_known(const LabeledDataset& d, const SplitSpec& spec, const std::string& provenance) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (std::find(spec.known.begin(), spec.known.end(), d.labels[i]) != spec.known.end()) rows.push_back(i);
    if (rows.empty()) throw InputError("no samples of the known classes in '" + d.provenance + "'");
    LabeledDataset out = d.subset(rows);
    for (auto& l : out.labels)
        l = static_cast<std::size_t>(std::find(spec.known.begin(), spec.known.end(), l) - spec.known.begin());
    out.num_classes = spec.known.size();
    out.provenance = provenance;
    return out;
}

// Samples of unknown classes, all labelled with the unknown sentinel.
inline LabeledDataset select_unknown(const LabeledDataset& d, const SplitSpec& spec, const std::string& provenance) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (std::find(spec.unknown.begin(), spec.unknown.end(), d.labels[i]) != spec.unknown.end()) rows.push_back(i);
    if (rows.empty()) throw InputError("no samples of the unknown classes in '" + d.provenance + "'");
    LabeledDataset out = d.subset(rows);
    out.num_classes = spec.known.size();
    for (auto& l : out.labels) l = out.num_classes;
    out.provenance = provenance;
    return out;
}

// Class-separation protocol over a train/test pair sharing one label space.
inline ClassSplit split_classes(const LabeledDataset& train, const LabeledDataset& test, std::size_t known_count,
                                std::uint64_t seed) {
    if (train.num_classes != test.num_classes) throw InputError("train and test label spaces differ");
    ClassSplit s;
    s.spec = choose_classes(train.num_classes, known_count, seed);
    s.spec.validate();
    s.known_train = select_known(train, s.spec, train.provenance + "-known");
    s.known_test = select_known(test, s.spec, test.provenance + "-known");
    s.unknown_test = select_unknown(test, s.spec, test.provenance + "-unknown");
    return s;
}

// Relabels unknown-marked samples to a different known-class count.
inline LabeledDataset as_unknowns(LabeledDataset d, std::size_t num_classes) {
    d.num_classes = num_classes;
    for (auto& l : d.labels) l = num_classes;
    return d;
}

}  // namespace crosr::bench
