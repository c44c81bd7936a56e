#pragma once

// Versioned binary container shared by network and open-set model files.
//
//   bytes 0..3   magic "CRSR"
//   u32          format version
//   u32          header length, then that many bytes of INI-style text
//   u32          array count, then for each array:
//                  u32 name length, name bytes,
//                  u32 rank, rank x u64 extents,
//                  prod(extents) x f64 values
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "crosr/error.hpp"
#include "crosr/tensor.hpp"

namespace crosr::io {

using KeyValues = boost::property_tree::ptree;

inline constexpr std::array<char, 4> kMagic{'C', 'R', 'S', 'R'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedArray {
    std::string name;
    nn::Tensor value;
};

struct Container {
    KeyValues header;
    std::vector<NamedArray> arrays;

    const nn::Tensor& array(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return a.value;
        throw FormatError("missing array '" + name + "'");
    }
};

// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    for (int precision = 15; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string to_ini(const KeyValues& kv) {
    std::ostringstream os;
    boost::property_tree::write_ini(os, kv);
    return os.str();
}

inline KeyValues parse_ini(const std::string& text) {
    std::istringstream is(text);
    KeyValues kv;
    try {
        boost::property_tree::read_ini(is, kv);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError(std::string("malformed key-value text: ") + e.what());
    }
    return kv;
}

namespace detail {

class Writer {
   public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        out_.insert(out_.end(), c, c + n);
    }
    template <typename T>
    void le(T v) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::string take() { return std::move(out_); }

   private:
    std::string out_;
};

class Reader {
   public:
    explicit Reader(const std::string& in) : in_(in) {}

    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, in_.data() + pos_, n);
        pos_ += n;
    }
    template <typename T>
    T le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return in_.size() - pos_; }

   private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) {
            throw FormatError("truncated model file at offset " + std::to_string(pos_) + " (needed " +
                              std::to_string(n) + " bytes, " + std::to_string(in_.size() - pos_) + " left)");
        }
    }
    const std::string& in_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const Container& c) {
    detail::Writer w;
    w.bytes(kMagic.data(), kMagic.size());
    w.le<std::uint32_t>(kFormatVersion);
    const std::string header = to_ini(c.header);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
    w.bytes(header.data(), header.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& a : c.arrays) {
        w.le<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
        w.bytes(a.name.data(), a.name.size());
        w.le<std::uint32_t>(static_cast<std::uint32_t>(a.value.rank()));
        for (auto e : a.value.shape()) w.le<std::uint64_t>(e);
        for (double v : a.value.data()) w.f64(v);
    }
    return w.take();
}

inline Container decode(const std::string& bytes) {
    detail::Reader r(bytes);
    std::array<char, 4> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kMagic) throw FormatError("bad magic at offset 0: not a CRSR model file");
    const auto version = r.le<std::uint32_t>();
    if (version != kFormatVersion) {
        throw FormatError("unsupported format version " + std::to_string(version) + " at offset 4");
    }
    Container c;
    const auto header_len = r.le<std::uint32_t>();
    c.header = parse_ini(r.str(header_len));
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.str(r.le<std::uint32_t>());
        const auto rank = r.le<std::uint32_t>();
        if (rank == 0 || rank > 8) {
            throw FormatError("array '" + a.name + "' has invalid rank " + std::to_string(rank) + " at offset " +
                              std::to_string(r.offset() - 4));
        }
        nn::Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(r.le<std::uint64_t>());
            if (e == 0) throw FormatError("array '" + a.name + "' has a zero extent");
            n *= e;
        }
        if (n > r.remaining() / 8) {
            throw FormatError("truncated model file at offset " + std::to_string(r.offset()) + " in array '" +
                              a.name + "'");
        }
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64();
        a.value = nn::Tensor(std::move(shape), std::move(data));
        c.arrays.push_back(std::move(a));
    }
    if (r.remaining() != 0) {
        throw FormatError("trailing bytes after last array at offset " + std::to_string(r.offset()));
    }
    return c;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

// Typed lookups that turn missing or malformed keys into FormatError.
template <typename T>
T get(const KeyValues& kv, const std::string& key) {
    try {
        return kv.get<T>(key);
    } catch (const boost::property_tree::ptree_error& e) {
        throw FormatError("bad or missing key '" + key + "': " + e.what());
    }
}

// Absent keys take the fallback; present but malformed values are errors.
// The fallback overload of ptree::get would silently hide those.
template <typename T>
T get(const KeyValues& kv, const std::string& key, const T& fallback) {
    const auto text = kv.get_optional<std::string>(key);
    if (!text) return fallback;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (text->find('-') != std::string::npos) throw FormatError("bad value for key '" + key + "': '" + *text + "'");
    }
    return get<T>(kv, key);
}

}  // namespace crosr::io
