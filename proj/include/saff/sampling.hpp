#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "saff/common.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

// Positive/negative sample synthesis by label encoding, and triplet batches
// for contrastive pretraining. Everything here is a pure function of its
// inputs plus an explicitly passed Rng.

namespace saff {

// Writes class labels into fixed pixel slots of a sample. By default the
// slots are the first n flat pixels; the active slot gets max_intensity and
// the other slots are zeroed, so candidates are comparable at inference and
// no image content leaks through the slot pixels.
struct LabelEmbedder {
    int n_classes = 0;
    std::vector<std::size_t> slot_positions;  // flat indices into a sample
    double max_intensity = 1.0;

    static LabelEmbedder first_pixels(int n_classes, double max_intensity) {
        LabelEmbedder e;
        e.n_classes = n_classes;
        e.max_intensity = max_intensity;
        for (int i = 0; i < n_classes; ++i) e.slot_positions.push_back(static_cast<std::size_t>(i));
        return e;
    }

    void validate(std::size_t sample_size) const {
        if (n_classes < 1 || slot_positions.size() != static_cast<std::size_t>(n_classes))
            throw ConfigError("label embedder needs one slot per class");
        std::vector<bool> seen(sample_size, false);
        for (std::size_t p : slot_positions) {
            if (p >= sample_size)
                throw ConfigError("label slot " + std::to_string(p) +
                                  " outside sample of size " + std::to_string(sample_size));
            if (seen[p]) throw ConfigError("duplicate label slot " + std::to_string(p));
            seen[p] = true;
        }
    }
};

struct SamplePair {
    Tensor x_pos;
    Tensor x_neg;
};

struct Triplet {
    Tensor anchor;
    Tensor positive;
    Tensor negative;
};

inline Tensor embed_label(const Tensor& x, const std::vector<int>& labels,
                          const LabelEmbedder& emb) {
    emb.validate(x.sample_size());
    if (labels.size() != x.batch()) throw InputError("one label per sample required");
    Tensor out = x;
    const std::size_t S = x.sample_size();
    for (std::size_t b = 0; b < x.batch(); ++b) {
        const int label = labels[b];
        if (label < 0 || label >= emb.n_classes)
            throw InputError("label " + std::to_string(label) + " out of range [0," +
                             std::to_string(emb.n_classes) + ")");
        double* s = out.data() + b * S;
        for (int i = 0; i < emb.n_classes; ++i)
            s[emb.slot_positions[static_cast<std::size_t>(i)]] =
                (i == label) ? emb.max_intensity : 0.0;
    }
    return out;
}

// Positive: true label embedded. Negative: a wrong label drawn uniformly from
// the other classes.
inline SamplePair make_pairs_supervised(const Tensor& x, const std::vector<int>& labels,
                                        const LabelEmbedder& emb, Rng& rng) {
    if (emb.n_classes < 2)
        throw ConfigError("supervised pairs need >= 2 classes for meaningful negatives");
    SamplePair pair;
    pair.x_pos = embed_label(x, labels, emb);
    std::vector<int> wrong(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= emb.n_classes)
            throw InputError("label " + std::to_string(labels[i]) + " out of range");
        const int draw = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(emb.n_classes - 1)));
        wrong[i] = draw >= labels[i] ? draw + 1 : draw;
    }
    pair.x_neg = embed_label(x, wrong, emb);
    return pair;
}

// Unsupervised setting: the positive carries a neutral uniform encoding (no
// committed label), the negative a random hard one-hot slot.
inline SamplePair make_pairs_unsupervised(const Tensor& x, const LabelEmbedder& emb, Rng& rng) {
    emb.validate(x.sample_size());
    SamplePair pair;
    pair.x_pos = x;
    const std::size_t S = x.sample_size();
    const double neutral = emb.max_intensity / emb.n_classes;
    for (std::size_t b = 0; b < x.batch(); ++b) {
        double* s = pair.x_pos.data() + b * S;
        for (std::size_t p : emb.slot_positions) s[p] = neutral;
    }
    std::vector<int> random_labels(x.batch());
    for (auto& l : random_labels)
        l = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(emb.n_classes)));
    pair.x_neg = embed_label(x, random_labels, emb);
    return pair;
}

// Anchor = each sample; positive drawn uniformly from the same class (not the
// anchor itself), negative uniformly from a different class.
inline Triplet make_triplets(const Tensor& x, const std::vector<int>& labels, Rng& rng) {
    if (labels.size() != x.batch()) throw InputError("one label per sample required");
    std::vector<std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) throw InputError("negative label");
        if (static_cast<std::size_t>(labels[i]) >= by_class.size())
            by_class.resize(static_cast<std::size_t>(labels[i]) + 1);
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    std::size_t present = 0;
    for (const auto& c : by_class) present += c.empty() ? 0 : 1;
    if (present < 2) throw InputError("triplets need a batch with >= 2 classes");
    for (const auto& c : by_class)
        if (c.size() == 1)
            throw InputError("triplets need >= 2 samples of every class present in the batch");

    std::vector<std::size_t> pos_idx(x.batch()), neg_idx(x.batch());
    for (std::size_t i = 0; i < x.batch(); ++i) {
        const auto& mates = by_class[static_cast<std::size_t>(labels[i])];
        // same class, uniform over the class excluding the anchor itself
        std::size_t k = 0;
        while (mates[k] != i) ++k;
        std::size_t draw_p = rng.uniform_int(mates.size() - 1);
        pos_idx[i] = mates[draw_p >= k ? draw_p + 1 : draw_p];
        // different class, uniform over all samples of other classes
        std::size_t other_total = x.batch() - mates.size();
        std::size_t draw = rng.uniform_int(other_total);
        std::size_t seen = 0;
        for (std::size_t j = 0; j < x.batch(); ++j) {
            if (labels[j] == labels[i]) continue;
            if (seen == draw) {
                neg_idx[i] = j;
                break;
            }
            ++seen;
        }
    }
    Triplet t;
    t.anchor = x;
    t.positive = x.gather_batch(pos_idx);
    t.negative = x.gather_batch(neg_idx);
    return t;
}

}  // namespace saff
