#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "saff/data.hpp"
#include "saff/network.hpp"
#include "saff/training.hpp"

// Binary checkpoint: magic "SAFF", format version, architecture descriptor,
// per-layer weights/bias/mask/theta/flags as little-endian f64, dataset
// normalization statistics and the config hash. load(save(net)) is bitwise
// identical; optimizer state is not persisted.

namespace saff {

struct CheckpointData {
    FFNetwork net;
    std::optional<Head> head;
    ArchSpec arch;
    Normalization normalization;
    double max_intensity = 1.0;
    std::string config_hash;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_i32(std::ostream& out, std::int32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}
inline void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}
inline void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_tensor(std::ostream& out, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.vec()) put_f64(out, v);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
    std::uint32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError(path + ": truncated");
    return v;
}
inline std::int32_t get_i32(std::istream& in, const std::string& path) {
    std::int32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError(path + ": truncated");
    return v;
}
inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
    std::uint64_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw FormatError(path + ": truncated");
    return v;
}
inline double get_f64(std::istream& in, const std::string& path) {
    const std::uint64_t bits = get_u64(in, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}
inline std::string get_str(std::istream& in, const std::string& path) {
    const std::uint32_t n = get_u32(in, path);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) throw FormatError(path + ": truncated");
    return s;
}
inline Tensor get_tensor(std::istream& in, const std::string& path) {
    const std::uint32_t rank = get_u32(in, path);
    if (rank < 1 || rank > 4) throw FormatError(path + ": bad tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = get_u64(in, path);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_f64(in, path);
    return t;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write("SAFF", 4);
    detail::put_u32(out, 1);  // format version

    const ArchSpec& a = ckpt.arch;
    detail::put_str(out, a.family);
    detail::put_u32(out, static_cast<std::uint32_t>(a.widths.size()));
    for (std::size_t w : a.widths) detail::put_u64(out, w);
    detail::put_u32(out, static_cast<std::uint32_t>(a.channels.size()));
    for (std::size_t c : a.channels) detail::put_u64(out, c);
    detail::put_u64(out, a.kernel);
    detail::put_i32(out, a.stride);
    detail::put_i32(out, a.padding);
    detail::put_i32(out, a.label_slots);
    detail::put_f64(out, a.theta0_dense);
    detail::put_f64(out, a.theta0_conv);
    detail::put_u32(out, a.theta_trainable ? 1 : 0);

    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.net.input_sample_shape.size()));
    for (std::size_t d : ckpt.net.input_sample_shape) detail::put_u64(out, d);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.net.residual_links.size()));
    for (const auto& [s, t] : ckpt.net.residual_links) {
        detail::put_u64(out, s);
        detail::put_u64(out, t);
    }

    detail::put_f64(out, ckpt.normalization.mean);
    detail::put_f64(out, ckpt.normalization.std);
    detail::put_u32(out, ckpt.normalization.fitted ? 1 : 0);
    detail::put_f64(out, ckpt.max_intensity);
    detail::put_str(out, ckpt.config_hash);

    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.net.layers.size()));
    for (std::size_t i = 0; i < ckpt.net.layers.size(); ++i) {
        const FFLayer& l = ckpt.net.layers[i];
        detail::put_u32(out, l.kind == LayerKind::dense ? 0 : 1);
        detail::put_u32(out, l.theta_trainable ? 1 : 0);
        detail::put_u32(out, ckpt.net.frozen[i] ? 1 : 0);
        detail::put_i32(out, l.stride);
        detail::put_i32(out, l.padding);
        detail::put_f64(out, l.theta);
        detail::put_tensor(out, l.weights);
        detail::put_tensor(out, l.bias);
        detail::put_tensor(out, l.mask);
    }

    detail::put_u32(out, ckpt.head ? 1 : 0);
    if (ckpt.head) {
        detail::put_u32(out, ckpt.head->task == HeadTask::classification ? 0 : 1);
        detail::put_tensor(out, ckpt.head->layer.weights);
        detail::put_tensor(out, ckpt.head->layer.bias);
    }
    if (!out) throw DataError("write failure on checkpoint " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SAFF", 4) != 0)
        throw FormatError(path + ": expected magic \"SAFF\"");
    const std::uint32_t version = detail::get_u32(in, path);
    if (version != 1)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));

    CheckpointData ckpt;
    ArchSpec& a = ckpt.arch;
    a.family = detail::get_str(in, path);
    a.widths.resize(detail::get_u32(in, path));
    for (auto& w : a.widths) w = detail::get_u64(in, path);
    a.channels.resize(detail::get_u32(in, path));
    for (auto& c : a.channels) c = detail::get_u64(in, path);
    a.kernel = detail::get_u64(in, path);
    a.stride = detail::get_i32(in, path);
    a.padding = detail::get_i32(in, path);
    a.label_slots = detail::get_i32(in, path);
    a.theta0_dense = detail::get_f64(in, path);
    a.theta0_conv = detail::get_f64(in, path);
    a.theta_trainable = detail::get_u32(in, path) != 0;

    std::vector<std::size_t> input_shape(detail::get_u32(in, path));
    for (auto& d : input_shape) d = detail::get_u64(in, path);
    std::vector<std::pair<std::size_t, std::size_t>> links(detail::get_u32(in, path));
    for (auto& [s, t] : links) {
        s = detail::get_u64(in, path);
        t = detail::get_u64(in, path);
    }

    ckpt.normalization.mean = detail::get_f64(in, path);
    ckpt.normalization.std = detail::get_f64(in, path);
    ckpt.normalization.fitted = detail::get_u32(in, path) != 0;
    ckpt.max_intensity = detail::get_f64(in, path);
    ckpt.config_hash = detail::get_str(in, path);

    const std::uint32_t n_layers = detail::get_u32(in, path);
    std::vector<FFLayer> layers(n_layers);
    std::vector<bool> frozen(n_layers);
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        FFLayer& l = layers[i];
        l.kind = detail::get_u32(in, path) == 0 ? LayerKind::dense : LayerKind::conv;
        l.theta_trainable = detail::get_u32(in, path) != 0;
        frozen[i] = detail::get_u32(in, path) != 0;
        l.stride = detail::get_i32(in, path);
        l.padding = detail::get_i32(in, path);
        l.theta = detail::get_f64(in, path);
        l.weights = detail::get_tensor(in, path);
        l.bias = detail::get_tensor(in, path);
        l.mask = detail::get_tensor(in, path);
        l.reset_opt();
    }
    ckpt.net = FFNetwork::make(std::move(layers), std::move(links), a.label_slots,
                               std::move(input_shape));
    for (std::uint32_t i = 0; i < n_layers; ++i) ckpt.net.frozen[i] = frozen[i];

    if (detail::get_u32(in, path) != 0) {
        Head head;
        head.task = detail::get_u32(in, path) == 0 ? HeadTask::classification
                                                   : HeadTask::reconstruction;
        head.layer.kind = LayerKind::dense;
        head.layer.theta = 0.0;
        head.layer.theta_trainable = false;
        head.layer.weights = detail::get_tensor(in, path);
        head.layer.bias = detail::get_tensor(in, path);
        head.layer.mask = Tensor::full(head.layer.weights.shape(), 1.0);
        head.layer.reset_opt();
        ckpt.head = std::move(head);
    }
    return ckpt;
}

}  // namespace saff
