#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "saff/common.hpp"
#include "saff/data.hpp"
#include "saff/losses.hpp"
#include "saff/metrics.hpp"
#include "saff/network.hpp"
#include "saff/sampling.hpp"

// Layer-wise forward-forward training and the self-adaptation controllers:
// early stopping on iterations, epochs and layers, magnitude pruning with
// retraining, warm-up configuration selection, contrastive pretraining and
// downstream heads. NFE accounting follows the forward+backward convention:
// every update step of a layer costs one forward and one backward pass;
// cached prefix activations and validation passes are not counted.

namespace saff {

enum class BatchMode { one_shot, mini_batch, full_batch };
enum class Objective { goodness_contrastive, triplet };
enum class HeadTask { classification, reconstruction };

struct EsIterationsCfg {
    bool enabled = false;
    int patience = 5;
    double min_delta = 1e-4;
    int check_every = 10;
};

struct EsLayersCfg {
    bool enabled = false;
    double min_delta = 1e-3;
};

struct EsEpochsCfg {
    bool enabled = false;
    int patience = 2;
    double min_delta = 1e-4;
};

struct PruneCfg {
    double ratio = 0.0;  // 0 disables
    bool retrain = false;
    int retrain_iterations = 100;
};

struct WarmupCfg {
    bool enabled = false;
    int iterations = 1000;
    std::vector<std::vector<std::size_t>> candidate_widths;  // per candidate, per layer
    std::size_t max_samples = 4096;                          // warm-up subset bound
};

struct TrainConfig {
    int epochs = 10;
    int layer_iterations = 1000;
    BatchMode batch_mode = BatchMode::one_shot;
    std::size_t batch_size = 64;  // mini_batch only
    Objective objective = Objective::goodness_contrastive;
    bool supervised_pairs = true;  // false: neutral/random-slot pair synthesis
    double peer_norm_weight = 0.0;  // 0.03 when the peer term is enabled
    double peer_momentum = 0.9;
    bool theta_trainable = true;
    EsIterationsCfg es_iterations;
    EsLayersCfg es_layers;
    EsEpochsCfg es_epochs;
    PruneCfg prune;
    WarmupCfg warmup;
    std::uint64_t seed = 1;
    double lr_dense = 0.03;
    double lr_conv = 0.01;
    double triplet_margin = 1.0;
    double val_fraction = 0.1;
    double max_intensity = 0.0;  // 0: derive from the training data's max pixel

    void validate() const {
        if (epochs < 1 || layer_iterations < 1) throw ConfigError("epochs/iterations must be >= 1");
        if (batch_mode == BatchMode::mini_batch && batch_size < 1)
            throw ConfigError("mini-batch size must be >= 1");
        if (prune.ratio < 0.0 || prune.ratio >= 1.0)
            throw ConfigError("prune ratio must be in [0,1)");
        if (prune.retrain && prune.retrain_iterations < 1)
            throw ConfigError("retrain iterations must be >= 1");
        if (es_iterations.patience < 1 || es_iterations.check_every < 1 || es_epochs.patience < 1)
            throw ConfigError("patience and check spacing must be >= 1");
        if (val_fraction <= 0.0 || val_fraction >= 0.5)
            throw ConfigError("validation fraction must be in (0, 0.5)");
        if (lr_dense <= 0.0 || lr_conv <= 0.0) throw ConfigError("learning rates must be positive");
        if (warmup.enabled && warmup.iterations < 1)
            throw ConfigError("warm-up iterations must be >= 1");
    }
};

struct NfeCounter {
    long forward_passes = 0;
    long backward_passes = 0;

    long total() const { return forward_passes + backward_passes; }
    double e3() const { return static_cast<double>(total()) / 1000.0; }
    void add(const NfeCounter& o) {
        forward_passes += o.forward_passes;
        backward_passes += o.backward_passes;
    }
};

struct TrainReport {
    NfeCounter nfe;
    std::vector<std::vector<double>> loss_traces;  // per layer, per update step
    int layers_trained = 0;
    int epochs_run = 0;  // most epochs completed by any layer
    std::string selected_config;
    std::size_t parameter_count = 0;
    double pruned_zero_fraction = 0.0;
    double max_intensity = 1.0;  // label-slot intensity used during training
    std::vector<double> es_layer_scores;
};

struct TrainData {
    Tensor images;  // network-input shape: [N,D] dense, [N,C,H,W] conv
    std::vector<int> labels;

    bool has_labels() const { return !labels.empty(); }
    std::size_t size() const { return images.batch(); }
};

inline TrainData to_train_data(const Dataset& ds, const std::string& family) {
    TrainData td;
    td.images = family == "ffa" ? flatten(ds.images) : ds.images;
    td.labels = ds.labels;
    return td;
}

// ---------------------------------------------------------------------------
// Early-stopping predicates

// checks[0] is the validation loss before training; one entry per check
// thereafter. Stops when the best improvement achieved over the last
// `patience` checks, relative to the value at the window start, is below
// min_delta.
inline bool es_checks_should_stop(const std::vector<double>& checks, int patience,
                                  double min_delta) {
    const std::size_t c = checks.empty() ? 0 : checks.size() - 1;
    if (c < static_cast<std::size_t>(patience)) return false;
    const std::size_t start = c - static_cast<std::size_t>(patience);
    double best = checks[start + 1];
    for (std::size_t i = start + 1; i <= c; ++i) best = std::min(best, checks[i]);
    return checks[start] - best < min_delta;
}

// trace: per-iteration loss history, trace[0] recorded before training.
// Checks are the entries spaced check_every iterations apart.
inline bool es_iterations_check(const std::vector<double>& trace, int patience, double min_delta,
                                int check_every) {
    if (trace.empty()) throw InputError("es_iterations_check: empty trace");
    std::vector<double> checks;
    for (std::size_t i = 0; i < trace.size(); i += static_cast<std::size_t>(check_every))
        checks.push_back(trace[i]);
    return es_checks_should_stop(checks, patience, min_delta);
}

// Smallest depth d such that no deeper prefix improves on depth d's score by
// at least min_delta; scores[i] is the validation score at depth i+1.
inline int es_layers_check(const std::vector<double>& val_scores, double min_delta) {
    if (val_scores.empty()) throw InputError("es_layers_check: empty score list");
    const std::size_t L = val_scores.size();
    for (std::size_t d = 0; d < L; ++d) {
        bool improved = false;
        for (std::size_t e = d + 1; e < L; ++e)
            improved |= val_scores[e] - val_scores[d] >= min_delta;
        if (!improved) return static_cast<int>(d + 1);
    }
    return static_cast<int>(L);
}

// ---------------------------------------------------------------------------
// Pruning

// Masks the smallest-magnitude fraction `ratio` of each layer's weights
// (unstructured, layer-local, ties broken by flat index); biases and theta
// are untouched.
inline FFNetwork prune(FFNetwork net, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("prune ratio must be in [0,1)");
    if (ratio == 0.0) return net;
    for (auto& layer : net.layers) {
        const std::size_t n = layer.weights.size();
        const std::size_t k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double ma = std::abs(layer.weights[a]), mb = std::abs(layer.weights[b]);
            return ma != mb ? ma < mb : a < b;
        });
        layer.mask = Tensor::full(layer.weights.shape(), 1.0);
        for (std::size_t i = 0; i < k; ++i) {
            layer.mask[order[i]] = 0.0;
            layer.weights[order[i]] = 0.0;
        }
    }
    return net;
}

inline double zero_fraction(const FFNetwork& net) {
    std::size_t total = 0, masked = 0;
    for (const auto& l : net.layers) {
        total += l.mask.size();
        for (double m : l.mask.vec()) masked += m == 0.0 ? 1 : 0;
    }
    return total == 0 ? 0.0 : static_cast<double>(masked) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Training engine

namespace detail {

// Input tensor that layer `idx` receives, computed in batch chunks to bound
// peak memory on deep conv prefixes.
inline Tensor input_for_layer(const FFNetwork& net, std::size_t idx, const Tensor& x,
                              std::size_t chunk = 512) {
    auto compute = [&](const Tensor& part) {
        std::vector<Tensor> forwarded;
        for (std::size_t i = 0; i < idx; ++i) {
            const Tensor in = network_layer_input(net, i, part, forwarded);
            forwarded.push_back(layer_forward(net.layers[i], in).forwarded);
        }
        return network_layer_input(net, idx, part, forwarded);
    };
    const std::size_t n = x.batch();
    if (idx == 0 || n <= chunk) return compute(x);
    Tensor first = compute(x.slice_batch(0, std::min(chunk, n)));
    std::vector<std::size_t> shape = first.shape();
    shape[0] = n;
    Tensor out(shape);
    const std::size_t ss = first.sample_size();
    std::copy(first.data(), first.data() + first.size(), out.data());
    for (std::size_t lo = chunk; lo < n; lo += chunk) {
        const std::size_t hi = std::min(n, lo + chunk);
        const Tensor part = compute(x.slice_batch(lo, hi));
        std::copy(part.data(), part.data() + part.size(), out.data() + lo * ss);
    }
    return out;
}

// Seeded train/validation index split, stratified when labels exist.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> val_split_indices(
    const TrainData& data, double val_fraction, std::uint64_t seed) {
    const std::size_t n = data.size();
    Rng rng(seed);
    std::vector<std::size_t> train_idx, val_idx;
    if (data.has_labels()) {
        std::vector<std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = static_cast<std::size_t>(data.labels[i]);
            if (c >= by_class.size()) by_class.resize(c + 1);
            by_class[c].push_back(i);
        }
        for (auto& members : by_class) {
            if (members.empty()) continue;
            shuffle(members, rng);
            std::size_t nv = static_cast<std::size_t>(
                std::llround(val_fraction * static_cast<double>(members.size())));
            if (nv == members.size()) nv = members.size() - 1;
            for (std::size_t i = 0; i < members.size(); ++i)
                (i < nv ? val_idx : train_idx).push_back(members[i]);
        }
    } else {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx, rng);
        std::size_t nv =
            static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
        nv = std::min(nv, n - 1);
        val_idx.assign(idx.begin(), idx.begin() + static_cast<long>(nv));
        train_idx.assign(idx.begin() + static_cast<long>(nv), idx.end());
    }
    if (val_idx.empty() || train_idx.empty())
        throw DataError("validation split is degenerate; need more samples");
    shuffle(train_idx, rng);
    shuffle(val_idx, rng);
    return {train_idx, val_idx};
}

inline TrainData gather(const TrainData& data, const std::vector<std::size_t>& idx) {
    TrainData out;
    out.images = data.images.gather_batch(idx);
    if (data.has_labels()) {
        out.labels.reserve(idx.size());
        for (std::size_t i : idx) out.labels.push_back(data.labels[i]);
    }
    return out;
}

enum class StreamMode { supervised, unsupervised, triplet };

// Input-level batch stream for one (layer, epoch): either a pos/neg pair or a
// triplet, plus the slice boundaries the update loop cycles through.
struct EpochStream {
    SamplePair pair;
    Triplet trip;
    std::size_t n = 0;
    std::size_t batch = 0;

    std::size_t n_batches() const { return (n + batch - 1) / batch; }
    std::pair<std::size_t, std::size_t> range(std::size_t step) const {
        const std::size_t b = step % n_batches();
        return {b * batch, std::min(n, (b + 1) * batch)};
    }
};

inline EpochStream make_stream(const TrainData& data, StreamMode mode, const LabelEmbedder& emb,
                               BatchMode batch_mode, std::size_t batch_size, Rng rng) {
    EpochStream s;
    s.n = data.size();
    s.batch = batch_mode == BatchMode::mini_batch ? std::min(batch_size, s.n) : s.n;
    if (mode == StreamMode::triplet) {
        s.trip = make_triplets(data.images, data.labels, rng);
    } else if (mode == StreamMode::supervised) {
        if (!data.has_labels()) throw InputError("supervised pair synthesis needs labels");
        s.pair = make_pairs_supervised(data.images, data.labels, emb, rng);
    } else {
        s.pair = make_pairs_unsupervised(data.images, emb, rng);
    }
    return s;
}

struct LayerStream {
    // layer-input-level tensors; materialized once when they fit in memory
    Tensor pos, neg, anchor, positive, negative;
    bool materialized = false;
};

constexpr std::size_t kMaterializeBudget = std::size_t(1) << 30;  // bytes

}  // namespace detail

class LayerwiseTrainer {
public:
    LayerwiseTrainer(FFNetwork& net, const TrainData& data, const TrainConfig& cfg,
                     detail::StreamMode mode)
        : net_(net), cfg_(cfg), mode_(mode), base_rng_(cfg.seed) {
        cfg_.validate();
        if (data.size() == 0) throw InputError("empty training data");
        report_.max_intensity = cfg_.max_intensity > 0.0 ? cfg_.max_intensity : max_pixel(data);
        emb_ = LabelEmbedder::first_pixels(net_.label_slots, report_.max_intensity);
        if (mode_ != detail::StreamMode::triplet) emb_.validate(data.images.sample_size());
        const bool need_val = cfg_.es_iterations.enabled || cfg_.es_layers.enabled ||
                              cfg_.es_epochs.enabled;
        if (need_val) {
            auto [ti, vi] = detail::val_split_indices(data, cfg_.val_fraction,
                                                      base_rng_.fork(0x7a1).next_u64());
            train_ = detail::gather(data, ti);
            val_ = detail::gather(data, vi);
        } else {
            train_ = data;
        }
        if (cfg_.es_layers.enabled && !val_.has_labels())
            throw ConfigError("early stopping on layers needs labelled validation data");
    }

    TrainReport run() {
        const int epochs = cfg_.batch_mode == BatchMode::one_shot ? 1 : cfg_.epochs;
        if (cfg_.batch_mode == BatchMode::one_shot)
            one_shot_stream_ = detail::make_stream(train_, mode_, emb_, cfg_.batch_mode,
                                                   cfg_.batch_size, base_rng_.fork(0x05));
        std::vector<double> depth_scores;
        for (std::size_t li = 0; li < net_.depth(); ++li) {
            if (net_.frozen[li]) continue;
            train_layer(li, epochs, cfg_.layer_iterations, /*record=*/true);
            report_.layers_trained += 1;
            if (cfg_.es_layers.enabled && li >= 1) {
                const auto cls = classify_prefix(net_, li + 1, val_.images, net_.label_slots, emb_);
                depth_scores.push_back(accuracy(cls.pred, val_.labels));
                report_.es_layer_scores = depth_scores;
                const std::size_t k = depth_scores.size();
                if (k >= 2 &&
                    depth_scores[k - 1] - depth_scores[k - 2] < cfg_.es_layers.min_delta) {
                    const int keep = es_layers_check(depth_scores, cfg_.es_layers.min_delta);
                    net_.truncate(static_cast<std::size_t>(keep) + 1);
                    break;
                }
            }
        }
        if (cfg_.prune.ratio > 0.0) {
            net_ = prune(std::move(net_), cfg_.prune.ratio);
            report_.pruned_zero_fraction = zero_fraction(net_);
            if (cfg_.prune.retrain)
                for (std::size_t li = 0; li < net_.depth(); ++li)
                    if (!net_.frozen[li])
                        train_layer(li, 1, cfg_.prune.retrain_iterations, /*record=*/false);
        }
        report_.parameter_count = count_parameters(net_);
        return report_;
    }

    TrainReport& report() { return report_; }

private:
    static double max_pixel(const TrainData& d) {
        double m = d.images[0];
        for (double v : d.images.vec()) m = std::max(m, v);
        return m;
    }

    AdamParams adam_for(const FFLayer& l) const {
        AdamParams p;
        p.lr = l.kind == LayerKind::dense ? cfg_.lr_dense : cfg_.lr_conv;
        return p;
    }

    // Layer-input tensors for an input-level stream, materialized when small.
    detail::LayerStream layer_stream(std::size_t li, const detail::EpochStream& es) const {
        detail::LayerStream ls;
        const std::size_t per_sample =
            li == 0 ? train_.images.sample_size()
                    : [&] {
                          std::size_t p = 1;
                          for (std::size_t d : net_.layer_sample_shapes[li - 1]) p *= d;
                          return p;
                      }();
        const std::size_t streams = mode_ == detail::StreamMode::triplet ? 3 : 2;
        const std::size_t bytes = es.n * per_sample * sizeof(double) * streams;
        ls.materialized = bytes <= detail::kMaterializeBudget;
        if (!ls.materialized) return ls;
        if (mode_ == detail::StreamMode::triplet) {
            ls.anchor = detail::input_for_layer(net_, li, es.trip.anchor);
            ls.positive = detail::input_for_layer(net_, li, es.trip.positive);
            ls.negative = detail::input_for_layer(net_, li, es.trip.negative);
        } else {
            ls.pos = detail::input_for_layer(net_, li, es.pair.x_pos);
            ls.neg = detail::input_for_layer(net_, li, es.pair.x_neg);
        }
        return ls;
    }

    double objective_loss(const FFLayer& layer, const detail::LayerStream& ls,
                          const detail::EpochStream& es, std::size_t lo, std::size_t hi,
                          std::size_t li) const {
        if (mode_ == detail::StreamMode::triplet) {
            Tensor a = ls.materialized ? ls.anchor.slice_batch(lo, hi)
                                       : detail::input_for_layer(net_, li,
                                                                 es.trip.anchor.slice_batch(lo, hi));
            Tensor p = ls.materialized
                           ? ls.positive.slice_batch(lo, hi)
                           : detail::input_for_layer(net_, li, es.trip.positive.slice_batch(lo, hi));
            Tensor n = ls.materialized
                           ? ls.negative.slice_batch(lo, hi)
                           : detail::input_for_layer(net_, li, es.trip.negative.slice_batch(lo, hi));
            return layer_triplet_loss(layer, a, p, n, cfg_.triplet_margin);
        }
        Tensor xp = ls.materialized ? ls.pos.slice_batch(lo, hi)
                                    : detail::input_for_layer(net_, li, es.pair.x_pos.slice_batch(lo, hi));
        Tensor xn = ls.materialized ? ls.neg.slice_batch(lo, hi)
                                    : detail::input_for_layer(net_, li, es.pair.x_neg.slice_batch(lo, hi));
        return layer_local_loss(layer, xp, xn);
    }

    // Validation loss of the current layer on the held-out stream (objective
    // only, no peer term).
    double validation_loss(std::size_t li, const detail::EpochStream& val_stream,
                           const detail::LayerStream& val_ls) const {
        return objective_loss(net_.layers[li], val_ls, val_stream, 0, val_stream.n, li);
    }

    void train_layer(std::size_t li, int epochs, int iterations, bool record) {
        FFLayer& layer = net_.layers[li];
        const AdamParams adam = adam_for(layer);
        if (record && report_.loss_traces.size() <= li) report_.loss_traces.resize(li + 1);

        // per-layer peer-normalization state
        Tensor peer_rm;
        if (cfg_.peer_norm_weight != 0.0) {
            const std::size_t units =
                layer.kind == LayerKind::dense ? layer.weights.dim(1) : layer.weights.dim(0);
            peer_rm = Tensor({units});
        }

        // held-out stream, fixed per layer
        detail::EpochStream val_stream;
        detail::LayerStream val_ls;
        const bool monitor = cfg_.es_iterations.enabled || cfg_.es_epochs.enabled;
        if (monitor) {
            val_stream = detail::make_stream(val_, mode_, emb_, BatchMode::full_batch, 0,
                                             base_rng_.fork(0xe5 + li));
            val_ls = layer_stream(li, val_stream);
        }

        std::vector<double> epoch_checks;
        if (cfg_.es_epochs.enabled)
            epoch_checks.push_back(validation_loss(li, val_stream, val_ls));
        for (int epoch = 0; epoch < epochs; ++epoch) {
            detail::EpochStream es =
                cfg_.batch_mode == BatchMode::one_shot
                    ? one_shot_stream_
                    : detail::make_stream(train_, mode_, emb_, cfg_.batch_mode, cfg_.batch_size,
                                          base_rng_.fork((li << 20) ^ static_cast<std::size_t>(epoch) ^ 0x9a));
            detail::LayerStream ls = layer_stream(li, es);

            std::vector<double> iter_checks;
            if (cfg_.es_iterations.enabled)
                iter_checks.push_back(validation_loss(li, val_stream, val_ls));
            for (int step = 0; step < iterations; ++step) {
                const auto [lo, hi] = es.range(static_cast<std::size_t>(step));
                LayerGrad grad;
                if (mode_ == detail::StreamMode::triplet) {
                    Tensor a = ls.materialized
                                   ? ls.anchor.slice_batch(lo, hi)
                                   : detail::input_for_layer(net_, li, es.trip.anchor.slice_batch(lo, hi));
                    Tensor p = ls.materialized
                                   ? ls.positive.slice_batch(lo, hi)
                                   : detail::input_for_layer(net_, li, es.trip.positive.slice_batch(lo, hi));
                    Tensor n = ls.materialized
                                   ? ls.negative.slice_batch(lo, hi)
                                   : detail::input_for_layer(net_, li, es.trip.negative.slice_batch(lo, hi));
                    grad = layer_triplet_gradient(layer, a, p, n, cfg_.triplet_margin);
                } else {
                    Tensor xp = ls.materialized
                                    ? ls.pos.slice_batch(lo, hi)
                                    : detail::input_for_layer(net_, li, es.pair.x_pos.slice_batch(lo, hi));
                    Tensor xn = ls.materialized
                                    ? ls.neg.slice_batch(lo, hi)
                                    : detail::input_for_layer(net_, li, es.pair.x_neg.slice_batch(lo, hi));
                    LocalLossConfig lcfg;
                    if (cfg_.peer_norm_weight != 0.0) {
                        lcfg.peer_weight = cfg_.peer_norm_weight;
                        lcfg.peer_momentum = cfg_.peer_momentum;
                        lcfg.peer_running_mean = &peer_rm;
                    }
                    grad = layer_local_gradient(layer, xp, xn, lcfg);
                    if (cfg_.peer_norm_weight != 0.0) peer_rm = grad.peer_running_mean;
                }
                adam_update(layer, grad, adam);
                report_.nfe.forward_passes += 1;
                report_.nfe.backward_passes += 1;
                if (record) report_.loss_traces[li].push_back(grad.loss);

                if (cfg_.es_iterations.enabled &&
                    (step + 1) % cfg_.es_iterations.check_every == 0) {
                    iter_checks.push_back(validation_loss(li, val_stream, val_ls));
                    if (es_checks_should_stop(iter_checks, cfg_.es_iterations.patience,
                                              cfg_.es_iterations.min_delta))
                        break;
                }
            }
            if (record) report_.epochs_run = std::max(report_.epochs_run, epoch + 1);
            if (cfg_.es_epochs.enabled) {
                epoch_checks.push_back(validation_loss(li, val_stream, val_ls));
                if (es_checks_should_stop(epoch_checks, cfg_.es_epochs.patience,
                                          cfg_.es_epochs.min_delta))
                    break;
            }
        }
    }

    FFNetwork& net_;
    TrainConfig cfg_;
    detail::StreamMode mode_;
    Rng base_rng_;
    TrainData train_, val_;
    LabelEmbedder emb_;
    detail::EpochStream one_shot_stream_;
    TrainReport report_;
};

// Layer-wise training with the contrastive goodness objective; supervised
// pair synthesis when the config asks for it and labels exist.
inline TrainReport train_layerwise(FFNetwork& net, const TrainData& data, const TrainConfig& cfg) {
    const auto mode = cfg.supervised_pairs && data.has_labels()
                          ? detail::StreamMode::supervised
                          : detail::StreamMode::unsupervised;
    LayerwiseTrainer trainer(net, data, cfg, mode);
    return trainer.run();
}

// Contrastive pretraining of the encoder; all layers are frozen afterwards.
inline TrainReport pretrain_encoder(FFNetwork& net, const TrainData& data,
                                    const TrainConfig& cfg) {
    detail::StreamMode mode;
    if (cfg.objective == Objective::triplet) {
        if (!data.has_labels()) throw InputError("triplet pretraining needs labels");
        mode = detail::StreamMode::triplet;
    } else {
        mode = cfg.supervised_pairs && data.has_labels() ? detail::StreamMode::supervised
                                                         : detail::StreamMode::unsupervised;
    }
    if (cfg.es_layers.enabled)
        throw ConfigError("early stopping on layers is not defined for pretraining");
    LayerwiseTrainer trainer(net, data, cfg, mode);
    TrainReport report = trainer.run();
    for (std::size_t i = 0; i < net.frozen.size(); ++i) net.frozen[i] = true;
    return report;
}

// ---------------------------------------------------------------------------
// Warm-up configuration selection

struct WarmupResult {
    std::size_t selected = 0;
    std::vector<std::string> candidate_ids;
    std::vector<double> val_accuracy;
    std::vector<double> first_layer_theta;  // trained theta of layer 1 per candidate
    NfeCounter nfe;
    FFNetwork selected_net;
    TrainReport selected_report;
};

// Trains every candidate one-shot for `iterations` steps per layer on a
// warm-up subset and picks the highest validation accuracy; ties go to the
// larger trained first-layer theta.
inline WarmupResult warmup_select(const std::vector<ArchSpec>& candidates, const TrainData& data,
                                  int iterations, const TrainConfig& base_cfg,
                                  const std::vector<std::size_t>& input_sample_shape) {
    if (candidates.empty()) throw ConfigError("warm-up needs at least one candidate");
    if (!data.has_labels()) throw ConfigError("warm-up selection needs labelled data");
    WarmupResult result;

    Rng seed_rng(base_cfg.seed);
    auto [train_idx, val_idx] =
        detail::val_split_indices(data, base_cfg.val_fraction, seed_rng.fork(0x7a1).next_u64());
    TrainData wval = detail::gather(data, val_idx);
    TrainData wtrain = detail::gather(data, train_idx);
    if (wtrain.size() > base_cfg.warmup.max_samples) {
        std::vector<std::size_t> head(base_cfg.warmup.max_samples);
        for (std::size_t i = 0; i < head.size(); ++i) head[i] = i;
        wtrain = detail::gather(wtrain, head);
    }

    bool have_best = false;
    double best_acc = 0.0, best_theta = 0.0;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        TrainConfig cfg = base_cfg;
        cfg.batch_mode = BatchMode::one_shot;
        cfg.epochs = 1;
        cfg.layer_iterations = iterations;
        cfg.es_iterations.enabled = false;
        cfg.es_layers.enabled = false;
        cfg.es_epochs.enabled = false;
        cfg.prune.ratio = 0.0;
        cfg.warmup.enabled = false;
        cfg.seed = Rng(base_cfg.seed).fork(0xca0 + c).next_u64();

        Rng init(Rng(base_cfg.seed).fork(0x171 + c).next_u64());
        FFNetwork net = build_network(candidates[c], input_sample_shape, init);
        LayerwiseTrainer trainer(net, wtrain, cfg, detail::StreamMode::supervised);
        TrainReport rep = trainer.run();
        result.nfe.add(rep.nfe);

        const auto emb = LabelEmbedder::first_pixels(net.label_slots, rep.max_intensity);
        const auto cls = classify_by_goodness(net, wval.images, net.label_slots, emb);
        const double acc = accuracy(cls.pred, wval.labels);
        const double theta1 = net.layers[0].theta;
        result.candidate_ids.push_back(candidates[c].id());
        result.val_accuracy.push_back(acc);
        result.first_layer_theta.push_back(theta1);
        if (!have_best || acc > best_acc || (acc == best_acc && theta1 > best_theta)) {
            have_best = true;
            best_acc = acc;
            best_theta = theta1;
            result.selected = c;
            result.selected_net = std::move(net);
            result.selected_report = std::move(rep);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Downstream heads on a frozen encoder

struct Head {
    HeadTask task = HeadTask::classification;
    FFLayer layer;  // plain dense layer; theta unused
};

// Concatenated normalized activations of every layer except the first.
inline Tensor encoder_features(const FFNetwork& net, const Tensor& x, std::size_t chunk = 512) {
    if (net.depth() < 2) throw ConfigError("encoder features need >= 2 layers");
    std::size_t feat = 0;
    for (std::size_t li = 1; li < net.depth(); ++li) {
        std::size_t p = 1;
        for (std::size_t d : net.layer_sample_shapes[li]) p *= d;
        feat += p;
    }
    const std::size_t n = x.batch();
    Tensor out({n, feat});
    for (std::size_t lo = 0; lo < n; lo += chunk) {
        const std::size_t hi = std::min(n, lo + chunk);
        const auto outs = network_forward(net, x.slice_batch(lo, hi));
        std::size_t off = 0;
        for (std::size_t li = 1; li < net.depth(); ++li) {
            const Tensor& f = outs[li].forwarded;
            const std::size_t ss = f.sample_size();
            for (std::size_t b = lo; b < hi; ++b) {
                const double* src = f.data() + (b - lo) * ss;
                double* dst = out.data() + b * feat + off;
                for (std::size_t i = 0; i < ss; ++i) dst[i] = src[i];
            }
            off += ss;
        }
    }
    return out;
}

inline Tensor head_forward(const Head& head, const Tensor& features) {
    return layer_affine(head.layer, features);
}

// targets: one-hot labels for classification (as int vector), or the tensor
// to reconstruct.
inline double head_loss(const Head& head, const Tensor& features, const std::vector<int>& labels,
                        const Tensor& targets) {
    const Tensor z = head_forward(head, features);
    const std::size_t B = z.dim(0), K = z.dim(1);
    if (head.task == HeadTask::classification) {
        double loss = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            double m = z.at(b, 0);
            for (std::size_t k2 = 1; k2 < K; ++k2) m = std::max(m, z.at(b, k2));
            double lse = 0.0;
            for (std::size_t k2 = 0; k2 < K; ++k2) lse += std::exp(z.at(b, k2) - m);
            loss += m + std::log(lse) - z.at(b, static_cast<std::size_t>(labels[b]));
        }
        return loss / static_cast<double>(B);
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) loss += (z[i] - targets[i]) * (z[i] - targets[i]);
    return loss / static_cast<double>(z.size());
}

inline LayerGrad head_gradient(const Head& head, const Tensor& features,
                               const std::vector<int>& labels, const Tensor& targets) {
    const Tensor z = head_forward(head, features);
    const std::size_t B = z.dim(0), K = z.dim(1);
    Tensor dz(z.shape());
    LayerGrad grad;
    if (head.task == HeadTask::classification) {
        double loss = 0.0;
        const double invb = 1.0 / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
            double m = z.at(b, 0);
            for (std::size_t k2 = 1; k2 < K; ++k2) m = std::max(m, z.at(b, k2));
            double lse = 0.0;
            for (std::size_t k2 = 0; k2 < K; ++k2) lse += std::exp(z.at(b, k2) - m);
            loss += m + std::log(lse) - z.at(b, static_cast<std::size_t>(labels[b]));
            for (std::size_t k2 = 0; k2 < K; ++k2) {
                const double p = std::exp(z.at(b, k2) - m) / lse;
                dz.at(b, k2) = (p - (static_cast<std::size_t>(labels[b]) == k2 ? 1.0 : 0.0)) * invb;
            }
        }
        grad.loss = loss * invb;
    } else {
        double loss = 0.0;
        const double inv = 1.0 / static_cast<double>(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double d = z[i] - targets[i];
            loss += d * d;
            dz[i] = 2.0 * d * inv;
        }
        grad.loss = loss * inv;
    }
    grad.d_weights = matmul_at(features, dz);
    grad.d_bias = Tensor({K});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k2 = 0; k2 < K; ++k2) grad.d_bias[k2] += dz.at(b, k2);
    grad.d_theta = 0.0;
    for (std::size_t i = 0; i < grad.d_weights.size(); ++i)
        grad.d_weights[i] *= head.layer.mask[i];
    return grad;
}

struct HeadTrainResult {
    Head head;
    TrainReport report;
};

// Trains a single dense head on the frozen encoder's concatenated features by
// its own local gradient (softmax cross-entropy or linear MSE).
inline HeadTrainResult train_head(const FFNetwork& net, HeadTask task, const TrainData& data,
                                  const TrainConfig& cfg) {
    cfg.validate();
    for (bool f : net.frozen)
        if (!f) throw ConfigError("encoder must be frozen before head training");
    if (data.size() == 0) throw InputError("empty training data");
    if (task == HeadTask::classification && !data.has_labels())
        throw InputError("classification head needs labels");

    const Tensor features = encoder_features(net, data.images);
    const Tensor targets = flatten(data.images);
    const std::size_t out_dim = task == HeadTask::classification
                                    ? static_cast<std::size_t>(net.label_slots)
                                    : targets.dim(1);
    Rng init(Rng(cfg.seed).fork(0x6ead).next_u64());
    HeadTrainResult result;
    result.head.task = task;
    result.head.layer = FFLayer::dense(features.dim(1), out_dim, init, 0.0, false);

    AdamParams adam;
    adam.lr = cfg.lr_dense;
    const std::size_t n = data.size();
    const std::size_t bs = cfg.batch_mode == BatchMode::mini_batch ? std::min(cfg.batch_size, n) : n;
    const std::size_t n_batches = (n + bs - 1) / bs;
    const int epochs = cfg.batch_mode == BatchMode::one_shot ? 1 : cfg.epochs;
    result.report.loss_traces.resize(1);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (int step = 0; step < cfg.layer_iterations; ++step) {
            const std::size_t b = static_cast<std::size_t>(step) % n_batches;
            const std::size_t lo = b * bs, hi = std::min(n, (b + 1) * bs);
            const Tensor fb = features.slice_batch(lo, hi);
            std::vector<int> lb;
            if (task == HeadTask::classification)
                lb.assign(data.labels.begin() + static_cast<long>(lo),
                          data.labels.begin() + static_cast<long>(hi));
            const Tensor tb = targets.slice_batch(lo, hi);
            const LayerGrad grad = head_gradient(result.head, fb, lb, tb);
            adam_update(result.head.layer, grad, adam);
            result.report.nfe.forward_passes += 1;
            result.report.nfe.backward_passes += 1;
            result.report.loss_traces[0].push_back(grad.loss);
        }
        result.report.epochs_run = epoch + 1;
    }
    result.report.layers_trained = 1;
    result.report.parameter_count =
        result.head.layer.weight_count() + result.head.layer.bias.size();
    return result;
}

}  // namespace saff
