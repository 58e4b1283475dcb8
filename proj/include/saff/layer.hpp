#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "saff/common.hpp"
#include "saff/ops.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

// One forward-forward layer (dense or conv). A layer owns its weights, bias,
// trainable goodness threshold theta, pruning mask and optimizer state, and
// knows how to compute the exact gradient of its local contrastive objective
// in closed form; there is no autodiff anywhere.

namespace saff {

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    // overflow-safe log(1+exp(x))
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

enum class LayerKind { dense, conv };

struct AdamState {
    Tensor m_w, v_w, m_b, v_b;
    double m_theta = 0.0, v_theta = 0.0;
    long step = 0;
};

struct AdamParams {
    double lr = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct FFLayer {
    LayerKind kind = LayerKind::dense;
    Tensor weights;  // dense: [In,Out]; conv: [Cout,Cin,K,K]
    Tensor bias;     // [Out] / [Cout]
    double theta = 2.0;
    bool theta_trainable = true;
    int stride = 1;
    int padding = 0;
    Tensor mask;  // {0,1}, same shape as weights; all-ones until pruned
    AdamState opt;

    static FFLayer dense(std::size_t in, std::size_t out, Rng& rng, double theta0 = 2.0,
                         bool theta_trainable = true) {
        FFLayer l;
        l.kind = LayerKind::dense;
        l.weights = Tensor({in, out});
        init_uniform(l.weights, static_cast<double>(in), rng);
        l.bias = Tensor({out});
        l.theta = theta0;
        l.theta_trainable = theta_trainable;
        l.mask = Tensor::full({in, out}, 1.0);
        l.reset_opt();
        return l;
    }

    static FFLayer conv(std::size_t cin, std::size_t cout, std::size_t k, int stride, int padding,
                        Rng& rng, double theta0 = 10.0, bool theta_trainable = true) {
        if (k % 2 == 0) throw ConfigError("conv kernel size must be odd");
        FFLayer l;
        l.kind = LayerKind::conv;
        l.weights = Tensor({cout, cin, k, k});
        init_uniform(l.weights, static_cast<double>(cin * k * k), rng);
        l.bias = Tensor({cout});
        l.theta = theta0;
        l.theta_trainable = theta_trainable;
        l.stride = stride;
        l.padding = padding;
        l.mask = Tensor::full({cout, cin, k, k}, 1.0);
        l.reset_opt();
        return l;
    }

    void reset_opt() {
        opt.m_w = Tensor(weights.shape());
        opt.v_w = Tensor(weights.shape());
        opt.m_b = Tensor(bias.shape());
        opt.v_b = Tensor(bias.shape());
        opt.m_theta = opt.v_theta = 0.0;
        opt.step = 0;
    }

    // Unmasked weight entries.
    std::size_t weight_count() const {
        std::size_t n = 0;
        for (double m : mask.vec()) n += m != 0.0 ? 1 : 0;
        return n;
    }

    // Per-sample output shape for a per-sample input shape.
    std::vector<std::size_t> output_sample_shape(const std::vector<std::size_t>& in) const {
        if (kind == LayerKind::dense) {
            std::size_t flat = 1;
            for (std::size_t d : in) flat *= d;
            if (flat != weights.dim(0))
                throw DimensionError("dense layer expects " + std::to_string(weights.dim(0)) +
                                     " inputs, got " + std::to_string(flat));
            return {weights.dim(1)};
        }
        if (in.size() != 3 || in[0] != weights.dim(1))
            throw DimensionError("conv layer expects [C,H,W] input with C=" +
                                 std::to_string(weights.dim(1)));
        const auto d = conv2d_output_dims(in[1], in[2], weights.dim(2), stride, padding);
        return {weights.dim(0), d.out_h, d.out_w};
    }

private:
    static void init_uniform(Tensor& w, double fan_in, Rng& rng) {
        const double bound = std::sqrt(1.0 / fan_in);
        for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
    }
};

struct LayerOutput {
    Tensor pre_norm;   // relu(affine(x)); goodness is computed from this
    Tensor forwarded;  // l2_normalize(pre_norm); the next layer's input
};

inline Tensor layer_affine(const FFLayer& layer, const Tensor& x) {
    if (layer.kind == LayerKind::dense) {
        Tensor z = matmul(x, layer.weights);
        const std::size_t B = z.dim(0), N = z.dim(1);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < N; ++j) z.at(b, j) += layer.bias[j];
        return z;
    }
    return conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding);
}

inline LayerOutput layer_forward(const FFLayer& layer, const Tensor& x) {
    LayerOutput out;
    out.pre_norm = relu(layer_affine(layer, x));
    out.forwarded = l2_normalize(out.pre_norm);
    return out;
}

// Eq.-style goodness: per sample, sum of squared activities minus theta.
inline Tensor goodness(const Tensor& pre_norm, double theta) {
    const std::size_t B = pre_norm.batch(), S = pre_norm.sample_size();
    Tensor g({B});
    for (std::size_t b = 0; b < B; ++b) {
        const double* p = pre_norm.data() + b * S;
        double acc = 0.0;
        for (std::size_t i = 0; i < S; ++i) acc += p[i] * p[i];
        g[b] = acc - theta;
    }
    return g;
}

// p(x is real) = logistic(goodness)
inline Tensor probability_real(const Tensor& g) {
    Tensor p = g;
    for (auto& v : p.vec()) v = stable_sigmoid(v);
    return p;
}

// Mean activity per unit (dense: output feature, conv: channel).
inline Tensor unit_mean_activity(const Tensor& pre_norm) {
    if (pre_norm.rank() == 2) {
        const std::size_t B = pre_norm.dim(0), U = pre_norm.dim(1);
        Tensor mu({U});
        for (std::size_t u = 0; u < U; ++u) {
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b) acc += pre_norm.at(b, u);
            mu[u] = acc / static_cast<double>(B);
        }
        return mu;
    }
    const std::size_t B = pre_norm.dim(0), U = pre_norm.dim(1),
                      HW = pre_norm.dim(2) * pre_norm.dim(3);
    Tensor mu({U});
    for (std::size_t u = 0; u < U; ++u) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const double* p = pre_norm.data() + (b * U + u) * HW;
            for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        }
        mu[u] = acc / static_cast<double>(B * HW);
    }
    return mu;
}

// Peer-normalization settings for the local objective. The running mean is
// the state *before* the step; the gradient flows through this step's batch
// mean into the updated running mean.
struct LocalLossConfig {
    double peer_weight = 0.0;  // 0 disables the term
    double peer_momentum = 0.9;
    const Tensor* peer_running_mean = nullptr;  // required when peer_weight > 0
};

struct LayerGrad {
    Tensor d_weights;
    Tensor d_bias;
    double d_theta = 0.0;
    double loss = 0.0;
    Tensor peer_running_mean;  // post-step state; empty when peer term disabled
};

namespace detail {

// Contrastive part: L = (1/2B) sum_i softplus(-g_pos_i) + softplus(g_neg_i).
inline double contrastive_from_goodness(const Tensor& g_pos, const Tensor& g_neg) {
    const std::size_t B = g_pos.dim(0);
    double acc = 0.0;
    for (std::size_t i = 0; i < B; ++i) acc += softplus(-g_pos[i]);
    for (std::size_t i = 0; i < B; ++i) acc += softplus(g_neg[i]);
    return acc / (2.0 * static_cast<double>(B));
}

struct PeerTerm {
    double loss = 0.0;
    Tensor running_mean;   // updated
    Tensor d_mu;           // dLoss/d batch-mean-activity, per unit (without peer_weight factor)
};

inline PeerTerm peer_term(const Tensor& pre_norm_pos, const Tensor& running_mean,
                          double momentum) {
    PeerTerm t;
    const Tensor mu = unit_mean_activity(pre_norm_pos);
    if (!mu.same_shape(running_mean))
        throw DimensionError("peer running mean shape " + shape_str(running_mean.shape()) +
                             " does not match unit count " + shape_str(mu.shape()));
    const std::size_t U = mu.dim(0);
    t.running_mean = Tensor({U});
    for (std::size_t u = 0; u < U; ++u)
        t.running_mean[u] = momentum * running_mean[u] + (1.0 - momentum) * mu[u];
    double mean = 0.0;
    for (std::size_t u = 0; u < U; ++u) mean += t.running_mean[u];
    mean /= static_cast<double>(U);
    t.d_mu = Tensor({U});
    for (std::size_t u = 0; u < U; ++u) {
        const double dev = t.running_mean[u] - mean;
        t.loss += dev * dev;
        t.d_mu[u] = (2.0 / static_cast<double>(U)) * dev * (1.0 - momentum);
    }
    t.loss /= static_cast<double>(U);
    return t;
}

}  // namespace detail

// Loss of the per-layer objective only (no gradients); the finite-difference
// oracle in the tests perturbs parameters and calls this.
inline double layer_local_loss(const FFLayer& layer, const Tensor& x_pos, const Tensor& x_neg,
                               const LocalLossConfig& cfg = {}) {
    if (x_pos.dim(0) != x_neg.dim(0))
        throw DimensionError("positive/negative batch sizes differ");
    const Tensor y_pos = relu(layer_affine(layer, x_pos));
    const Tensor y_neg = relu(layer_affine(layer, x_neg));
    double loss = detail::contrastive_from_goodness(goodness(y_pos, layer.theta),
                                                    goodness(y_neg, layer.theta));
    if (cfg.peer_weight != 0.0) {
        if (!cfg.peer_running_mean) throw ConfigError("peer term enabled without running mean");
        loss += cfg.peer_weight *
                detail::peer_term(y_pos, *cfg.peer_running_mean, cfg.peer_momentum).loss;
    }
    return loss;
}

// Exact gradients of the per-layer objective w.r.t. weights, bias and theta,
// derived through relu and the sum-of-squares goodness. Masked weight
// positions receive zero gradient.
inline LayerGrad layer_local_gradient(const FFLayer& layer, const Tensor& x_pos,
                                      const Tensor& x_neg, const LocalLossConfig& cfg = {}) {
    if (x_pos.dim(0) != x_neg.dim(0))
        throw DimensionError("positive/negative batch sizes differ");
    const std::size_t B = x_pos.dim(0);
    const Tensor y_pos = relu(layer_affine(layer, x_pos));
    const Tensor y_neg = relu(layer_affine(layer, x_neg));
    const Tensor g_pos = goodness(y_pos, layer.theta);
    const Tensor g_neg = goodness(y_neg, layer.theta);

    LayerGrad out;
    out.loss = detail::contrastive_from_goodness(g_pos, g_neg);

    // dL/dg per sample; dtheta = -sum(dL/dg) over both passes
    const double inv2b = 1.0 / (2.0 * static_cast<double>(B));
    std::vector<double> dg_pos(B), dg_neg(B);
    double d_theta = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        dg_pos[i] = -stable_sigmoid(-g_pos[i]) * inv2b;
        dg_neg[i] = stable_sigmoid(g_neg[i]) * inv2b;
        d_theta -= dg_pos[i] + dg_neg[i];
    }

    // dL/dz = dL/dg * 2*y elementwise (relu subgradient folded in: y==0 -> 0)
    Tensor dz_pos(y_pos.shape()), dz_neg(y_neg.shape());
    const std::size_t S = y_pos.sample_size();
    for (std::size_t b = 0; b < B; ++b) {
        const double* yp = y_pos.data() + b * S;
        const double* yn = y_neg.data() + b * S;
        double* zp = dz_pos.data() + b * S;
        double* zn = dz_neg.data() + b * S;
        for (std::size_t i = 0; i < S; ++i) {
            zp[i] = 2.0 * dg_pos[b] * yp[i];
            zn[i] = 2.0 * dg_neg[b] * yn[i];
        }
    }

    if (cfg.peer_weight != 0.0) {
        if (!cfg.peer_running_mean) throw ConfigError("peer term enabled without running mean");
        auto peer = detail::peer_term(y_pos, *cfg.peer_running_mean, cfg.peer_momentum);
        out.loss += cfg.peer_weight * peer.loss;
        out.peer_running_mean = peer.running_mean;
        // route d/d(batch mean activity) back through relu on the positive pass
        if (y_pos.rank() == 2) {
            const std::size_t U = y_pos.dim(1);
            const double invb = 1.0 / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t u = 0; u < U; ++u)
                    if (y_pos.at(b, u) > 0.0)
                        dz_pos.at(b, u) += cfg.peer_weight * peer.d_mu[u] * invb;
        } else {
            const std::size_t U = y_pos.dim(1), HW = y_pos.dim(2) * y_pos.dim(3);
            const double inv = 1.0 / static_cast<double>(B * HW);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t u = 0; u < U; ++u) {
                    const double* yrow = y_pos.data() + (b * U + u) * HW;
                    double* zrow = dz_pos.data() + (b * U + u) * HW;
                    for (std::size_t i = 0; i < HW; ++i)
                        if (yrow[i] > 0.0) zrow[i] += cfg.peer_weight * peer.d_mu[u] * inv;
                }
        }
    }

    if (layer.kind == LayerKind::dense) {
        out.d_weights = add(matmul_at(x_pos, dz_pos), matmul_at(x_neg, dz_neg));
        const std::size_t N = layer.bias.dim(0);
        out.d_bias = Tensor({N});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < N; ++j)
                out.d_bias[j] += dz_pos.at(b, j) + dz_neg.at(b, j);
    } else {
        const std::size_t K = layer.weights.dim(2);
        out.d_weights =
            add(conv2d_grad_weights(x_pos, dz_pos, K, layer.stride, layer.padding),
                conv2d_grad_weights(x_neg, dz_neg, K, layer.stride, layer.padding));
        out.d_bias = add(conv2d_grad_bias(dz_pos), conv2d_grad_bias(dz_neg));
    }
    out.d_theta = d_theta;
    for (std::size_t i = 0; i < out.d_weights.size(); ++i) out.d_weights[i] *= layer.mask[i];
    return out;
}

// Triplet objective on the layer's forwarded (normalized) activations; used
// for contrastive pretraining. Theta is not part of this objective.
inline double layer_triplet_loss(const FFLayer& layer, const Tensor& x_a, const Tensor& x_p,
                                 const Tensor& x_n, double margin) {
    const Tensor f_a = l2_normalize(relu(layer_affine(layer, x_a)));
    const Tensor f_p = l2_normalize(relu(layer_affine(layer, x_p)));
    const Tensor f_n = l2_normalize(relu(layer_affine(layer, x_n)));
    const std::size_t B = f_a.batch(), S = f_a.sample_size();
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double dap = 0.0, dan = 0.0;
        const double* a = f_a.data() + b * S;
        const double* p = f_p.data() + b * S;
        const double* n = f_n.data() + b * S;
        for (std::size_t i = 0; i < S; ++i) {
            dap += (a[i] - p[i]) * (a[i] - p[i]);
            dan += (a[i] - n[i]) * (a[i] - n[i]);
        }
        const double h = std::sqrt(dap) - std::sqrt(dan) + margin;
        if (h > 0.0) acc += h;
    }
    return acc / static_cast<double>(B);
}

inline LayerGrad layer_triplet_gradient(const FFLayer& layer, const Tensor& x_a,
                                        const Tensor& x_p, const Tensor& x_n, double margin) {
    const Tensor y_a = relu(layer_affine(layer, x_a));
    const Tensor y_p = relu(layer_affine(layer, x_p));
    const Tensor y_n = relu(layer_affine(layer, x_n));
    const Tensor f_a = l2_normalize(y_a);
    const Tensor f_p = l2_normalize(y_p);
    const Tensor f_n = l2_normalize(y_n);
    const std::size_t B = f_a.batch(), S = f_a.sample_size();

    LayerGrad out;
    Tensor df_a(f_a.shape()), df_p(f_p.shape()), df_n(f_n.shape());
    double loss = 0.0;
    const double invb = 1.0 / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
        const double* a = f_a.data() + b * S;
        const double* p = f_p.data() + b * S;
        const double* n = f_n.data() + b * S;
        double dap = 0.0, dan = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            dap += (a[i] - p[i]) * (a[i] - p[i]);
            dan += (a[i] - n[i]) * (a[i] - n[i]);
        }
        dap = std::sqrt(dap);
        dan = std::sqrt(dan);
        const double h = dap - dan + margin;
        if (h <= 0.0) continue;
        loss += h;
        double* ga = df_a.data() + b * S;
        double* gp = df_p.data() + b * S;
        double* gn = df_n.data() + b * S;
        for (std::size_t i = 0; i < S; ++i) {
            if (dap > 0.0) {
                const double u = (a[i] - p[i]) / dap * invb;
                ga[i] += u;
                gp[i] -= u;
            }
            if (dan > 0.0) {
                const double v = (a[i] - n[i]) / dan * invb;
                ga[i] -= v;
                gn[i] += v;
            }
        }
    }
    out.loss = loss * invb;

    const Tensor dy_a = l2_normalize_backward(y_a, df_a);
    const Tensor dy_p = l2_normalize_backward(y_p, df_p);
    const Tensor dy_n = l2_normalize_backward(y_n, df_n);
    auto through_relu = [](const Tensor& y, const Tensor& dy) {
        Tensor dz = dy;
        for (std::size_t i = 0; i < dz.size(); ++i)
            if (y[i] <= 0.0) dz[i] = 0.0;
        return dz;
    };
    const Tensor dz_a = through_relu(y_a, dy_a);
    const Tensor dz_p = through_relu(y_p, dy_p);
    const Tensor dz_n = through_relu(y_n, dy_n);

    if (layer.kind == LayerKind::dense) {
        out.d_weights = add(add(matmul_at(x_a, dz_a), matmul_at(x_p, dz_p)), matmul_at(x_n, dz_n));
        const std::size_t N = layer.bias.dim(0);
        out.d_bias = Tensor({N});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < N; ++j)
                out.d_bias[j] += dz_a.at(b, j) + dz_p.at(b, j) + dz_n.at(b, j);
    } else {
        const std::size_t K = layer.weights.dim(2);
        out.d_weights = add(
            add(conv2d_grad_weights(x_a, dz_a, K, layer.stride, layer.padding),
                conv2d_grad_weights(x_p, dz_p, K, layer.stride, layer.padding)),
            conv2d_grad_weights(x_n, dz_n, K, layer.stride, layer.padding));
        out.d_bias = add(add(conv2d_grad_bias(dz_a), conv2d_grad_bias(dz_p)),
                         conv2d_grad_bias(dz_n));
    }
    out.d_theta = 0.0;
    for (std::size_t i = 0; i < out.d_weights.size(); ++i) out.d_weights[i] *= layer.mask[i];
    return out;
}

// Adam step. Masked weights stay exactly zero: their gradient is zero and the
// mask is re-applied after the update.
inline void adam_update(FFLayer& layer, const LayerGrad& grad, const AdamParams& p) {
    auto& o = layer.opt;
    o.step += 1;
    const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(o.step));
    const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(o.step));
    auto step = [&](Tensor& w, Tensor& m, Tensor& v, const Tensor& g) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
            w[i] -= p.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + p.eps);
        }
    };
    step(layer.weights, o.m_w, o.v_w, grad.d_weights);
    step(layer.bias, o.m_b, o.v_b, grad.d_bias);
    if (layer.theta_trainable) {
        o.m_theta = p.beta1 * o.m_theta + (1.0 - p.beta1) * grad.d_theta;
        o.v_theta = p.beta2 * o.v_theta + (1.0 - p.beta2) * grad.d_theta * grad.d_theta;
        layer.theta -= p.lr * (o.m_theta / bc1) / (std::sqrt(o.v_theta / bc2) + p.eps);
    }
    for (std::size_t i = 0; i < layer.weights.size(); ++i) layer.weights[i] *= layer.mask[i];
}

}  // namespace saff
