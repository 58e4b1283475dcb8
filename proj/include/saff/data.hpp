#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "saff/common.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

// Dataset ingestion and preparation: MNIST IDX (big-endian), the "SFD1" raw
// container for externally converted data, z-score normalization fitted on
// the training split, deterministic seeded splits, and a synthetic blob
// dataset for fast tests.

namespace saff {

struct Normalization {
    double mean = 0.0;
    double std = 1.0;
    bool fitted = false;
};

struct Dataset {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    Normalization normalization;
    std::string name;

    bool has_labels() const { return !labels.empty(); }
    std::size_t size() const { return images.batch(); }

    int num_classes() const {
        int m = -1;
        for (int l : labels) m = std::max(m, l);
        return m + 1;
    }

    double max_pixel() const {
        double m = images[0];
        for (double v : images.vec()) m = std::max(m, v);
        return m;
    }

    Dataset take(std::size_t n) const {
        if (n >= size()) return *this;
        Dataset out;
        out.images = images.slice_batch(0, n);
        if (has_labels()) out.labels.assign(labels.begin(), labels.begin() + static_cast<long>(n));
        out.normalization = normalization;
        out.name = name;
        return out;
    }
};

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(path + ": truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

inline std::ifstream open_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return in;
}

}  // namespace detail

// IDX image file (magic 0x00000803, big-endian dims [N,H,W], u8 pixels)
// -> [N,1,H,W] scaled to [0,1].
inline Tensor load_idx_images(const std::string& path) {
    auto in = detail::open_binary(path);
    const std::uint32_t magic = detail::read_u32_be(in, path);
    if (magic != 0x00000803u) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "expected magic 0x00000803, got 0x%08X", magic);
        throw FormatError(path + ": " + buf);
    }
    const std::size_t n = detail::read_u32_be(in, path);
    const std::size_t h = detail::read_u32_be(in, path);
    const std::size_t w = detail::read_u32_be(in, path);
    std::vector<unsigned char> raw(n * h * w);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw FormatError(path + ": truncated pixel data (need " + std::to_string(raw.size()) +
                          " bytes)");
    Tensor t({n, 1, h, w});
    for (std::size_t i = 0; i < raw.size(); ++i) t[i] = raw[i] / 255.0;
    return t;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
    auto in = detail::open_binary(path);
    const std::uint32_t magic = detail::read_u32_be(in, path);
    if (magic != 0x00000801u) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "expected magic 0x00000801, got 0x%08X", magic);
        throw FormatError(path + ": " + buf);
    }
    const std::size_t n = detail::read_u32_be(in, path);
    std::vector<unsigned char> raw(n);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw FormatError(path + ": truncated label data");
    return std::vector<int>(raw.begin(), raw.end());
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    Dataset ds;
    ds.images = load_idx_images(images_path);
    ds.labels = load_idx_labels(labels_path);
    if (ds.labels.size() != ds.images.batch())
        throw DataError("image/label count mismatch: " + std::to_string(ds.images.batch()) +
                        " images vs " + std::to_string(ds.labels.size()) + " labels");
    ds.name = images_path;
    return ds;
}

// Writers for the same formats (fixtures and round-trip checks). Pixels are
// quantized as round(v*255), the inverse of the reader's scaling.
inline void save_idx_images(const std::string& path, const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != 1)
        throw DimensionError("IDX writer expects [N,1,H,W] images");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    detail::write_u32_be(out, 0x00000803u);
    detail::write_u32_be(out, static_cast<std::uint32_t>(images.dim(0)));
    detail::write_u32_be(out, static_cast<std::uint32_t>(images.dim(2)));
    detail::write_u32_be(out, static_cast<std::uint32_t>(images.dim(3)));
    for (double v : images.vec()) {
        const double q = std::min(255.0, std::max(0.0, std::round(v * 255.0)));
        const unsigned char b = static_cast<unsigned char>(q);
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

inline void save_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    detail::write_u32_be(out, 0x00000801u);
    detail::write_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

// "SFD1" raw container, little-endian: magic, dtype code (0 = f32), N, C, H,
// W as u32, label-presence flag, then f32 pixels, then u16 labels.
inline void save_sfd(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("SFD1", 4);
    const unsigned char dtype = 0;
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    const std::uint32_t dims[4] = {
        static_cast<std::uint32_t>(ds.images.dim(0)), static_cast<std::uint32_t>(ds.images.dim(1)),
        static_cast<std::uint32_t>(ds.images.dim(2)), static_cast<std::uint32_t>(ds.images.dim(3))};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    const unsigned char flag = ds.has_labels() ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&flag), 1);
    for (double v : ds.images.vec()) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    if (flag)
        for (int l : ds.labels) {
            const std::uint16_t u = static_cast<std::uint16_t>(l);
            out.write(reinterpret_cast<const char*>(&u), 2);
        }
}

inline Dataset load_sfd(const std::string& path) {
    auto in = detail::open_binary(path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SFD1", 4) != 0)
        throw FormatError(path + ": expected magic \"SFD1\"");
    unsigned char dtype;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    if (dtype != 0) throw FormatError(path + ": unknown dtype code " + std::to_string(dtype));
    std::uint32_t dims[4];
    if (!in.read(reinterpret_cast<char*>(dims), sizeof dims))
        throw FormatError(path + ": truncated header");
    unsigned char flag;
    if (!in.read(reinterpret_cast<char*>(&flag), 1)) throw FormatError(path + ": truncated header");
    Dataset ds;
    ds.images = Tensor({dims[0], dims[1], dims[2], dims[3]});
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        float f;
        if (!in.read(reinterpret_cast<char*>(&f), 4))
            throw FormatError(path + ": truncated pixel data");
        ds.images[i] = f;
    }
    if (flag) {
        ds.labels.resize(dims[0]);
        for (auto& l : ds.labels) {
            std::uint16_t u;
            if (!in.read(reinterpret_cast<char*>(&u), 2))
                throw FormatError(path + ": truncated label data");
            l = u;
        }
    }
    ds.name = path;
    return ds;
}

// Fits mean/std on every train pixel (population std), then transforms train
// and the other splits with the same statistics.
inline void zscore_fit_apply(Dataset& train, const std::vector<Dataset*>& others = {}) {
    if (train.size() == 0) throw DataError("cannot fit normalization on an empty dataset");
    double mean = 0.0;
    for (double v : train.images.vec()) mean += v;
    mean /= static_cast<double>(train.images.size());
    double var = 0.0;
    for (double v : train.images.vec()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(train.images.size());
    const double sd = std::sqrt(var);
    if (sd <= 0.0) throw DataError("degenerate data: zero pixel variance");
    auto apply = [&](Dataset& ds) {
        for (auto& v : ds.images.vec()) v = (v - mean) / sd;
        ds.normalization = {mean, sd, true};
    };
    apply(train);
    for (Dataset* d : others) apply(*d);
}

namespace detail {

inline void shuffle(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
}

// Cumulative-rounding boundaries; guarantees the sizes sum to n.
inline std::vector<std::size_t> split_sizes(std::size_t n, const std::vector<double>& fractions) {
    double total = 0.0;
    for (double f : fractions) total += f;
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
    std::vector<std::size_t> sizes;
    double cum = 0.0;
    std::size_t prev = 0;
    for (double f : fractions) {
        cum += f;
        const std::size_t edge = static_cast<std::size_t>(std::llround(cum * static_cast<double>(n)));
        sizes.push_back(edge - prev);
        prev = edge;
    }
    return sizes;
}

}  // namespace detail

// Deterministic seeded split. Stratified keeps per-class proportions within
// one sample per class.
inline std::vector<Dataset> split(const Dataset& ds, const std::vector<double>& fractions,
                                  std::uint64_t seed, bool stratified) {
    const std::size_t n = ds.size();
    std::vector<std::vector<std::size_t>> assignment(fractions.size());
    Rng rng(seed);
    if (stratified) {
        if (!ds.has_labels()) throw ConfigError("stratified split needs labels");
        std::vector<std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = static_cast<std::size_t>(ds.labels[i]);
            if (c >= by_class.size()) by_class.resize(c + 1);
            by_class[c].push_back(i);
        }
        for (auto& members : by_class) {
            if (members.empty()) continue;
            detail::shuffle(members, rng);
            const auto sizes = detail::split_sizes(members.size(), fractions);
            std::size_t at = 0;
            for (std::size_t s = 0; s < sizes.size(); ++s)
                for (std::size_t k = 0; k < sizes[s]; ++k) assignment[s].push_back(members[at++]);
        }
        for (auto& a : assignment) detail::shuffle(a, rng);
    } else {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        detail::shuffle(idx, rng);
        const auto sizes = detail::split_sizes(n, fractions);
        std::size_t at = 0;
        for (std::size_t s = 0; s < sizes.size(); ++s)
            for (std::size_t k = 0; k < sizes[s]; ++k) assignment[s].push_back(idx[at++]);
    }
    std::vector<Dataset> out;
    for (std::size_t s = 0; s < assignment.size(); ++s) {
        if (assignment[s].empty())
            throw ConfigError("split fraction " + std::to_string(fractions[s]) +
                              " produces an empty split");
        Dataset part;
        part.images = ds.images.gather_batch(assignment[s]);
        if (ds.has_labels()) {
            part.labels.reserve(assignment[s].size());
            for (std::size_t i : assignment[s]) part.labels.push_back(ds.labels[i]);
        }
        part.normalization = ds.normalization;
        part.name = ds.name + "#" + std::to_string(s);
        out.push_back(std::move(part));
    }
    return out;
}

// size x size images with a bright Gaussian blob in the quadrant indexed by
// the class, plus seeded noise; linearly separable at low noise. Class labels
// are assigned round-robin, so any prefix is balanced within one sample.
inline Dataset synthetic(std::size_t n, int classes, std::size_t size, std::uint64_t seed,
                         double noise = 0.05) {
    if (classes < 1 || classes > 4) throw ConfigError("synthetic dataset supports 1..4 classes");
    if (size < 4) throw ConfigError("synthetic dataset needs size >= 4");
    Dataset ds;
    ds.name = "synthetic";
    ds.images = Tensor({n, 1, size, size});
    ds.labels.resize(n);
    Rng rng(seed);
    const double q = static_cast<double>(size) / 4.0;
    const double centers[4][2] = {{q, q}, {q, 3 * q}, {3 * q, q}, {3 * q, 3 * q}};
    const double sigma = static_cast<double>(size) / 6.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = c;
        const double cy = centers[c][0], cx = centers[c][1];
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                if (noise > 0.0) v += noise * rng.normal();
                ds.images.at(i, 0, y, x) = std::min(1.0, std::max(0.0, v));
            }
    }
    return ds;
}

}  // namespace saff
