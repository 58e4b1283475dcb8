#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "saff/layer.hpp"
#include "saff/sampling.hpp"

namespace saff {

// Ordered forward-forward layers plus optional residual wiring. For a
// residual link (s -> t), layer t reads l2_normalize(forwarded[t-1] +
// forwarded[s]); adding post-normalization activations and re-normalizing
// keeps every layer's unit-norm input contract.
struct FFNetwork {
    std::vector<FFLayer> layers;
    std::vector<std::pair<std::size_t, std::size_t>> residual_links;  // source -> target
    std::vector<bool> frozen;
    int label_slots = 0;
    std::vector<std::size_t> input_sample_shape;                // per-sample, e.g. [784] or [1,28,28]
    std::vector<std::vector<std::size_t>> layer_sample_shapes;  // per-layer output shapes

    static FFNetwork make(std::vector<FFLayer> layers,
                          std::vector<std::pair<std::size_t, std::size_t>> residual_links,
                          int label_slots, std::vector<std::size_t> input_sample_shape) {
        if (layers.empty()) throw ConfigError("network needs at least one layer");
        FFNetwork net;
        net.layers = std::move(layers);
        net.residual_links = std::move(residual_links);
        net.label_slots = label_slots;
        net.input_sample_shape = std::move(input_sample_shape);
        net.frozen.assign(net.layers.size(), false);
        std::vector<std::size_t> shape = net.input_sample_shape;
        for (const auto& l : net.layers) {
            shape = l.output_sample_shape(shape);
            net.layer_sample_shapes.push_back(shape);
        }
        for (const auto& [s, t] : net.residual_links) {
            if (s >= t || t >= net.layers.size())
                throw ConfigError("residual link source must precede its target");
            if (net.layer_sample_shapes[s] != net.layer_sample_shapes[t - 1])
                throw ConfigError("residual link " + std::to_string(s) + "->" + std::to_string(t) +
                                  " joins activations of different shapes " +
                                  shape_str(net.layer_sample_shapes[s]) + " vs " +
                                  shape_str(net.layer_sample_shapes[t - 1]));
        }
        return net;
    }

    std::size_t depth() const { return layers.size(); }

    // Drops layers beyond keep_depth (>=1).
    void truncate(std::size_t keep_depth) {
        if (keep_depth < 1 || keep_depth > layers.size()) throw ConfigError("bad truncation depth");
        layers.resize(keep_depth);
        frozen.resize(keep_depth);
        layer_sample_shapes.resize(keep_depth);
        std::vector<std::pair<std::size_t, std::size_t>> kept;
        for (const auto& link : residual_links)
            if (link.second < keep_depth) kept.push_back(link);
        residual_links.swap(kept);
    }
};

// Input that layer `idx` receives given the forwarded outputs of all earlier
// layers (residual combination included).
inline Tensor network_layer_input(const FFNetwork& net, std::size_t idx, const Tensor& x,
                                  const std::vector<Tensor>& forwarded) {
    Tensor in = idx == 0 ? x : forwarded[idx - 1];
    if (idx > 0) {
        bool combined = false;
        for (const auto& [s, t] : net.residual_links) {
            if (t != idx) continue;
            in = add(in, forwarded[s]);
            combined = true;
        }
        if (combined) in = l2_normalize(in);
    }
    if (net.layers[idx].kind == LayerKind::dense && in.rank() != 2) in = flatten(in);
    return in;
}

// Sequential forward of every layer; returns per-layer (pre_norm, forwarded).
inline std::vector<LayerOutput> network_forward(const FFNetwork& net, const Tensor& x) {
    std::vector<LayerOutput> outs;
    outs.reserve(net.layers.size());
    std::vector<Tensor> forwarded;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Tensor in = network_layer_input(net, i, x, forwarded);
        outs.push_back(layer_forward(net.layers[i], in));
        forwarded.push_back(outs.back().forwarded);
    }
    return outs;
}

struct Classification {
    std::vector<int> pred;  // argmax label per sample, ties broken by smallest index
    Tensor scores;          // [B, n_labels] goodness sums over layers 2..L
};

// Goodness-sum inference over the first `depth` layers: embed every candidate
// label, run the prefix, and score with the summed goodness of all scored
// layers except the first.
inline Classification classify_prefix(const FFNetwork& net, std::size_t depth, const Tensor& x,
                                      int n_labels, const LabelEmbedder& emb) {
    if (depth < 2 || depth > net.depth())
        throw ConfigError("goodness inference needs >= 2 layers (the first is excluded)");
    if (n_labels < 1 || n_labels > emb.n_classes)
        throw ConfigError("cannot score " + std::to_string(n_labels) + " labels with " +
                          std::to_string(emb.n_classes) + " embeddable slots");
    const std::size_t B = x.batch();
    Classification result;
    result.scores = Tensor({B, static_cast<std::size_t>(n_labels)});
    for (int label = 0; label < n_labels; ++label) {
        const std::vector<int> labels(B, label);
        const Tensor embedded = embed_label(x, labels, emb);
        std::vector<Tensor> forwarded;
        for (std::size_t li = 0; li < depth; ++li) {
            const Tensor in = network_layer_input(net, li, embedded, forwarded);
            LayerOutput out = layer_forward(net.layers[li], in);
            if (li >= 1) {
                const Tensor g = goodness(out.pre_norm, net.layers[li].theta);
                for (std::size_t b = 0; b < B; ++b)
                    result.scores.at(b, static_cast<std::size_t>(label)) += g[b];
            }
            forwarded.push_back(std::move(out.forwarded));
        }
    }
    result.pred.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
        int best = 0;
        for (int l = 1; l < n_labels; ++l)
            if (result.scores.at(b, static_cast<std::size_t>(l)) >
                result.scores.at(b, static_cast<std::size_t>(best)))
                best = l;
        result.pred[b] = best;
    }
    return result;
}

inline Classification classify_by_goodness(const FFNetwork& net, const Tensor& x, int n_labels,
                                           const LabelEmbedder& emb) {
    return classify_prefix(net, net.depth(), x, n_labels, emb);
}

// Trainable scalars: unmasked weights + biases + one theta per layer that has
// a trainable threshold.
inline std::size_t count_parameters(const FFNetwork& net) {
    std::size_t n = 0;
    for (const auto& l : net.layers) {
        n += l.weight_count();
        n += l.bias.size();
        n += l.theta_trainable ? 1 : 0;
    }
    return n;
}

// Architecture descriptor, the unit of configuration for building networks,
// warm-up candidates and checkpoints.
struct ArchSpec {
    std::string family = "ffa";            // ffa | cffa | rescffa
    std::vector<std::size_t> widths;       // ffa: dense layer widths
    std::vector<std::size_t> channels;     // cffa/rescffa: conv channels
    std::size_t kernel = 3;
    int stride = 1;
    int padding = 1;
    int label_slots = 10;
    double theta0_dense = 2.0;
    double theta0_conv = 10.0;
    bool theta_trainable = true;

    std::string id() const {
        std::string s = family;
        const auto& dims = family == "ffa" ? widths : channels;
        for (std::size_t d : dims) s += "-" + std::to_string(d);
        return s;
    }
};

// input_sample_shape: [D] for ffa, [C,H,W] for the conv families.
inline FFNetwork build_network(const ArchSpec& spec, std::vector<std::size_t> input_sample_shape,
                               Rng& rng) {
    std::vector<FFLayer> layers;
    std::vector<std::pair<std::size_t, std::size_t>> links;
    if (spec.family == "ffa") {
        if (spec.widths.empty()) throw ConfigError("ffa needs at least one layer width");
        if (input_sample_shape.size() != 1)
            throw ConfigError("ffa expects flattened [D] input samples");
        std::size_t in = input_sample_shape[0];
        for (std::size_t w : spec.widths) {
            layers.push_back(FFLayer::dense(in, w, rng, spec.theta0_dense, spec.theta_trainable));
            in = w;
        }
    } else if (spec.family == "cffa" || spec.family == "rescffa") {
        std::vector<std::size_t> channels = spec.channels;
        if (spec.family == "rescffa" && channels.empty()) channels.assign(5, 64);
        if (channels.empty()) throw ConfigError("cffa needs at least one channel count");
        if (input_sample_shape.size() != 3)
            throw ConfigError(spec.family + " expects [C,H,W] input samples");
        std::size_t cin = input_sample_shape[0];
        for (std::size_t c : channels) {
            layers.push_back(FFLayer::conv(cin, c, spec.kernel, spec.stride, spec.padding, rng,
                                           spec.theta0_conv, spec.theta_trainable));
            cin = c;
        }
        if (spec.family == "rescffa") {
            if (channels.size() < 4)
                throw ConfigError("rescffa needs >= 4 layers for its residual link");
            links.emplace_back(0, 3);  // first hidden layer's output joins the fourth's input
        }
    } else {
        throw ConfigError("unknown architecture family: " + spec.family);
    }
    return FFNetwork::make(std::move(layers), std::move(links), spec.label_slots,
                           std::move(input_sample_shape));
}

}  // namespace saff
