#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "saff/common.hpp"
#include "saff/tensor.hpp"

// Numeric kernels. All reductions run in a fixed order per output element
// (ascending over the contracted axis), so results are bit-identical across
// runs and across worker-thread counts; parallelism is only ever over output
// elements.

namespace saff {

// [B,M] x [M,N] -> [B,N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t B = a.dim(0), M = a.dim(1), N = b.dim(1);
    Tensor out({B, N});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    parallel_for(B, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            double* orow = po + i * N;
            for (std::size_t k = 0; k < M; ++k) {
                const double aik = pa[i * M + k];
                const double* brow = pb + k * N;
                for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
            }
        }
    });
    return out;
}

// a^T x b with a:[B,M], b:[B,N] -> [M,N]; the batch axis is contracted.
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw DimensionError("matmul_at shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t B = a.dim(0), M = a.dim(1), N = b.dim(1);
    Tensor out({M, N});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    parallel_for(M, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t m = lo; m < hi; ++m) {
            double* orow = po + m * N;
            for (std::size_t k = 0; k < B; ++k) {
                const double amk = pa[k * M + m];
                const double* brow = pb + k * N;
                for (std::size_t j = 0; j < N; ++j) orow[j] += amk * brow[j];
            }
        }
    });
    return out;
}

struct ConvDims {
    std::size_t out_h, out_w;
};

inline ConvDims conv2d_output_dims(std::size_t h, std::size_t w, std::size_t k, int stride,
                                   int padding) {
    if (k % 2 == 0) throw ConfigError("conv kernel size must be odd, got " + std::to_string(k));
    if (stride < 1 || padding < 0) throw ConfigError("conv stride must be >=1 and padding >=0");
    const long hh = static_cast<long>(h) + 2L * padding - static_cast<long>(k);
    const long ww = static_cast<long>(w) + 2L * padding - static_cast<long>(k);
    if (hh < 0 || ww < 0 || hh % stride != 0 || ww % stride != 0)
        throw ConfigError("conv output size is not integral for input " + std::to_string(h) + "x" +
                          std::to_string(w) + ", kernel " + std::to_string(k) + ", stride " +
                          std::to_string(stride) + ", padding " + std::to_string(padding));
    return {static_cast<std::size_t>(hh / stride + 1), static_cast<std::size_t>(ww / stride + 1)};
}

// Cross-correlation (no kernel flip) with zero padding and per-channel bias.
// x:[B,Cin,H,W], kernel:[Cout,Cin,K,K], bias:[Cout] -> [B,Cout,H',W'].
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride,
                     int padding) {
    if (x.rank() != 4 || kernel.rank() != 4)
        throw DimensionError("conv2d expects rank-4 input and kernel, got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    if (x.dim(1) != kernel.dim(1))
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                             ", kernel " + shape_str(kernel.shape()));
    if (kernel.dim(2) != kernel.dim(3)) throw DimensionError("conv2d kernel must be square");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw DimensionError("conv2d bias must have one entry per output channel");
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = kernel.dim(0), K = kernel.dim(2);
    const auto [OH, OW] = conv2d_output_dims(H, W, K, stride, padding);
    Tensor out({B, Cout, OH, OW});
    const double* px = x.data();
    const double* pk = kernel.data();
    const double* pbias = bias.data();
    double* po = out.data();
    parallel_for(B * Cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t bc = lo; bc < hi; ++bc) {
            const std::size_t b = bc / Cout, co = bc % Cout;
            double* omap = po + (b * Cout + co) * OH * OW;
            for (std::size_t i = 0; i < OH * OW; ++i) omap[i] = pbias[co];
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                const double* xmap = px + (b * Cin + ci) * H * W;
                const double* kmap = pk + (co * Cin + ci) * K * K;
                for (std::size_t kh = 0; kh < K; ++kh) {
                    for (std::size_t kw = 0; kw < K; ++kw) {
                        const double kv = kmap[kh * K + kw];
                        for (std::size_t oh = 0; oh < OH; ++oh) {
                            const long ih = static_cast<long>(oh) * stride - padding +
                                            static_cast<long>(kh);
                            if (ih < 0 || ih >= static_cast<long>(H)) continue;
                            const double* xrow = xmap + static_cast<std::size_t>(ih) * W;
                            double* orow = omap + oh * OW;
                            for (std::size_t ow = 0; ow < OW; ++ow) {
                                const long iw = static_cast<long>(ow) * stride - padding +
                                                static_cast<long>(kw);
                                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                                orow[ow] += kv * xrow[static_cast<std::size_t>(iw)];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

// dL/dkernel for conv2d: contracts x with dz over (batch, output positions).
inline Tensor conv2d_grad_weights(const Tensor& x, const Tensor& dz, std::size_t K, int stride,
                                  int padding) {
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = dz.dim(1), OH = dz.dim(2), OW = dz.dim(3);
    Tensor dw({Cout, Cin, K, K});
    const double* px = x.data();
    const double* pz = dz.data();
    double* pd = dw.data();
    parallel_for(Cout * Cin, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t cc = lo; cc < hi; ++cc) {
            const std::size_t co = cc / Cin, ci = cc % Cin;
            double* dmap = pd + (co * Cin + ci) * K * K;
            for (std::size_t kh = 0; kh < K; ++kh) {
                for (std::size_t kw = 0; kw < K; ++kw) {
                    double acc = 0.0;
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* xmap = px + (b * Cin + ci) * H * W;
                        const double* zmap = pz + (b * Cout + co) * OH * OW;
                        for (std::size_t oh = 0; oh < OH; ++oh) {
                            const long ih = static_cast<long>(oh) * stride - padding +
                                            static_cast<long>(kh);
                            if (ih < 0 || ih >= static_cast<long>(H)) continue;
                            const double* xrow = xmap + static_cast<std::size_t>(ih) * W;
                            const double* zrow = zmap + oh * OW;
                            for (std::size_t ow = 0; ow < OW; ++ow) {
                                const long iw = static_cast<long>(ow) * stride - padding +
                                                static_cast<long>(kw);
                                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                                acc += zrow[ow] * xrow[static_cast<std::size_t>(iw)];
                            }
                        }
                    }
                    dmap[kh * K + kw] = acc;
                }
            }
        }
    });
    return dw;
}

inline Tensor conv2d_grad_bias(const Tensor& dz) {
    const std::size_t B = dz.dim(0), Cout = dz.dim(1), HW = dz.dim(2) * dz.dim(3);
    Tensor db({Cout});
    for (std::size_t co = 0; co < Cout; ++co) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const double* zmap = dz.data() + (b * Cout + co) * HW;
            for (std::size_t i = 0; i < HW; ++i) acc += zmap[i];
        }
        db[co] = acc;
    }
    return db;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.vec())
        if (v < 0.0) v = 0.0;
    return out;
}

// Per-sample L2 normalization over all non-batch elements; one scalar norm per
// sample even for conv maps, so relative spatial structure is preserved.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-8) {
    Tensor out = x;
    const std::size_t B = x.batch(), S = x.sample_size();
    double* p = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        double* s = p + b * S;
        double sq = 0.0;
        for (std::size_t i = 0; i < S; ++i) sq += s[i] * s[i];
        const double inv = 1.0 / (std::sqrt(sq) + eps);
        for (std::size_t i = 0; i < S; ++i) s[i] *= inv;
    }
    return out;
}

// Pullback of l2_normalize: given y (the tensor that was normalized) and the
// loss gradient with respect to y/(|y|+eps), returns the gradient w.r.t. y.
inline Tensor l2_normalize_backward(const Tensor& y, const Tensor& grad_out, double eps = 1e-8) {
    if (!y.same_shape(grad_out)) throw DimensionError("l2_normalize_backward shape mismatch");
    Tensor out(y.shape());
    const std::size_t B = y.batch(), S = y.sample_size();
    for (std::size_t b = 0; b < B; ++b) {
        const double* yp = y.data() + b * S;
        const double* gp = grad_out.data() + b * S;
        double* op = out.data() + b * S;
        double sq = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            sq += yp[i] * yp[i];
            dot += gp[i] * yp[i];
        }
        const double n = std::sqrt(sq);
        if (n == 0.0) continue;  // all-zero sample: normalize output is zero everywhere
        const double s = n + eps;
        const double c = dot / (n * s * s);
        for (std::size_t i = 0; i < S; ++i) op[i] = gp[i] / s - yp[i] * c;
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor out = a;
    double* p = out.data();
    const double* q = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) p[i] += q[i];
    return out;
}

inline Tensor flatten(const Tensor& x) {
    return x.reshaped({x.batch(), x.sample_size()});
}

}  // namespace saff
