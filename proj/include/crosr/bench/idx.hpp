#pragma once

// IDX files as distributed with MNIST: a big-endian u32 magic
// (0x00000803 for 3-d unsigned-byte images, 0x00000801 for 1-d labels),
// one big-endian u32 per dimension, then the raw bytes.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "crosr/bench/dataset.hpp"
#include "crosr/error.hpp"
#include "crosr/serialize.hpp"

namespace crosr::bench {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& path) {
    if (bytes.size() < offset + 4) {
        throw FormatError("'" + path + "': truncated IDX header at offset " + std::to_string(offset));
    }
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
    return v;
}

inline void check_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
    if (got != want) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x at offset 0 (expected 0x%08x)", got, want);
        throw FormatError("'" + path + "': " + buf);
    }
}

}  // namespace detail

struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(const std::string& bytes, const std::string& path = "<memory>") {
    detail::check_magic(detail::read_be32(bytes, 0, path), kIdxImageMagic, path);
    IdxImages img;
    img.count = detail::read_be32(bytes, 4, path);
    img.rows = detail::read_be32(bytes, 8, path);
    img.cols = detail::read_be32(bytes, 12, path);
    if (img.count == 0 || img.rows == 0 || img.cols == 0) {
        throw FormatError("'" + path + "': zero dimension in IDX header at offset 4");
    }
    const std::size_t per_image = img.rows * img.cols;  // both below 2^32
    if (img.count > (bytes.size() - 16) / per_image) {
        throw FormatError("'" + path + "': header claims " + std::to_string(img.count) + " images of " +
                          std::to_string(img.rows) + "x" + std::to_string(img.cols) + " but only " +
                          std::to_string(bytes.size() - 16) + " pixel bytes follow offset 16");
    }
    const std::size_t need = img.count * per_image;
    if (bytes.size() - 16 != need) {
        throw FormatError("'" + path + "': expected " + std::to_string(need) + " pixel bytes from offset 16, found " +
                          std::to_string(bytes.size() - 16));
    }
    img.pixels.assign(bytes.begin() + 16, bytes.end());
    return img;
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::string& bytes, const std::string& path = "<memory>") {
    detail::check_magic(detail::read_be32(bytes, 0, path), kIdxLabelMagic, path);
    const std::size_t count = detail::read_be32(bytes, 4, path);
    if (bytes.size() - 8 != count) {
        throw FormatError("'" + path + "': expected " + std::to_string(count) + " label bytes from offset 8, found " +
                          std::to_string(bytes.size() - 8));
    }
    return {bytes.begin() + 8, bytes.end()};
}

// Pixels are scaled by 1/255 into [0,1]; images become [count, 1, rows, cols].
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               std::size_t num_classes = 10) {
    const IdxImages img = parse_idx_images(io::read_file(images_path), images_path);
    const auto labels = parse_idx_labels(io::read_file(labels_path), labels_path);
    if (labels.size() != img.count) {
        throw FormatError("image count " + std::to_string(img.count) + " in '" + images_path +
                          "' does not match label count " + std::to_string(labels.size()) + " in '" + labels_path +
                          "'");
    }
    LabeledDataset d;
    d.num_classes = num_classes;
    d.provenance = images_path;
    std::vector<double> px(img.pixels.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(img.pixels[i]) / 255.0;
    d.images = nn::Tensor(nn::Shape{img.count, 1, img.rows, img.cols}, std::move(px));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw FormatError("'" + labels_path + "': label " + std::to_string(labels[i]) + " at offset " +
                              std::to_string(8 + i) + " exceeds class count " + std::to_string(num_classes));
        }
        d.labels.push_back(labels[i]);
    }
    return d;
}

}  // namespace crosr::bench
