#pragma once

#include <cmath>
#include <cstddef>

#include "saff/layer.hpp"
#include "saff/tensor.hpp"

// Loss functions of the training module, exposed as standalone operations.
// The per-layer gradient code in layer.hpp shares the same internals, so the
// two can never drift apart.

namespace saff {

// Contrastive goodness loss over a positive/negative goodness pair:
// (1/2B) sum_i [softplus(-g_pos_i) + softplus(g_neg_i)].
inline double contrastive_loss(const Tensor& g_pos, const Tensor& g_neg) {
    if (g_pos.rank() != 1 || g_neg.rank() != 1 || g_pos.dim(0) != g_neg.dim(0))
        throw DimensionError("contrastive_loss expects equal-length goodness vectors");
    return detail::contrastive_from_goodness(g_pos, g_neg);
}

struct PeerNormResult {
    double loss = 0.0;
    Tensor running_mean;  // updated state
};

// Pulls each unit's running mean activity toward the layer's mean activity.
// Units are output features for dense activations, channels for conv maps.
inline PeerNormResult peer_norm_loss(const Tensor& pre_norm, const Tensor& running_mean,
                                     double momentum) {
    auto t = detail::peer_term(pre_norm, running_mean, momentum);
    return {t.loss, t.running_mean};
}

// Mean over the batch of max(0, |a-p| - |a-n| + margin), distances in L2 over
// the flattened per-sample features.
inline double triplet_margin_loss(const Tensor& a, const Tensor& p, const Tensor& n,
                                  double margin = 1.0) {
    if (!a.same_shape(p) || !a.same_shape(n))
        throw DimensionError("triplet_margin_loss expects equal shapes");
    const std::size_t B = a.batch(), S = a.sample_size();
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* pa = a.data() + b * S;
        const double* pp = p.data() + b * S;
        const double* pn = n.data() + b * S;
        double dap = 0.0, dan = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            dap += (pa[i] - pp[i]) * (pa[i] - pp[i]);
            dan += (pa[i] - pn[i]) * (pa[i] - pn[i]);
        }
        const double h = std::sqrt(dap) - std::sqrt(dan) + margin;
        if (h > 0.0) acc += h;
    }
    return acc / static_cast<double>(B);
}

}  // namespace saff
