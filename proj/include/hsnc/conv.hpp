#pragma once

#include <cstdint>
#include <vector>

#include "hsnc/kernels.hpp"
#include "hsnc/tensor.hpp"

namespace hsnc {

namespace detail {

// cols[(ci*k+kh)*k+kw, (b*OH+oh)*OW+ow] = x[b,ci,oh*s+kh-p, ow*s+kw-p] (0 outside).
inline void im2col(const float* x, float* cols, std::int64_t B, std::int64_t Cin, std::int64_t H, std::int64_t W,
                   std::int64_t k, std::int64_t s, std::int64_t p, std::int64_t OH, std::int64_t OW) {
    const std::int64_t Ncols = B * OH * OW;
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
        for (std::int64_t kh = 0; kh < k; ++kh) {
            for (std::int64_t kw = 0; kw < k; ++kw) {
                float* row = cols + ((ci * k + kh) * k + kw) * Ncols;
                for (std::int64_t b = 0; b < B; ++b) {
                    const float* xb = x + (b * Cin + ci) * H * W;
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        const std::int64_t ih = oh * s + kh - p;
                        float* dst = row + (b * OH + oh) * OW;
                        if (ih < 0 || ih >= H) {
                            for (std::int64_t ow = 0; ow < OW; ++ow) dst[ow] = 0.0f;
                            continue;
                        }
                        const float* src = xb + ih * W;
                        for (std::int64_t ow = 0; ow < OW; ++ow) {
                            const std::int64_t iw = ow * s + kw - p;
                            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into the input layout.
inline void col2im_acc(const float* cols, float* gx, std::int64_t B, std::int64_t Cin, std::int64_t H, std::int64_t W,
                       std::int64_t k, std::int64_t s, std::int64_t p, std::int64_t OH, std::int64_t OW) {
    const std::int64_t Ncols = B * OH * OW;
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
        for (std::int64_t kh = 0; kh < k; ++kh) {
            for (std::int64_t kw = 0; kw < k; ++kw) {
                const float* row = cols + ((ci * k + kh) * k + kw) * Ncols;
                for (std::int64_t b = 0; b < B; ++b) {
                    float* gb = gx + (b * Cin + ci) * H * W;
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        const std::int64_t ih = oh * s + kh - p;
                        if (ih < 0 || ih >= H) continue;
                        const float* src = row + (b * OH + oh) * OW;
                        float* dst = gb + ih * W;
                        for (std::int64_t ow = 0; ow < OW; ++ow) {
                            const std::int64_t iw = ow * s + kw - p;
                            if (iw >= 0 && iw < W) dst[iw] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

// Cross-correlation. x:[B,Cin,H,W], weight:[Cout,Cin,k,k], bias:[Cout] (may be
// undefined for none).
inline Tensor conv2d(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias,
                     int stride, int padding) {
    if (x.rank() != 4) throw DimensionError("conv2d: input must be rank 4, got " + shape_str(x.shape()));
    if (weight.rank() != 4) throw DimensionError("conv2d: weight must be rank 4, got " + shape_str(weight.shape()));
    if (weight.dim(2) != weight.dim(3)) throw ConfigError("conv2d: kernel must be square");
    const std::int64_t k = weight.dim(2);
    if (k < 1 || k > 3) throw ConfigError("conv2d: kernel size must be 1, 2 or 3, got " + std::to_string(k));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (weight.dim(1) != x.dim(1)) {
        throw DimensionError("conv2d: weight axis 1 (" + std::to_string(weight.dim(1)) +
                             ") does not match input channel axis 1 (" + std::to_string(x.dim(1)) + ")");
    }
    const bool with_bias = bias.defined();
    if (with_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
        throw DimensionError("conv2d: bias axis 0 must equal weight axis 0 (" + std::to_string(weight.dim(0)) + ")");
    }
    const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = weight.dim(0), s = stride, p = padding;
    const std::int64_t OH = (H + 2 * p - k) / s + 1;
    const std::int64_t OW = (W + 2 * p - k) / s + 1;
    if (H + 2 * p < k || W + 2 * p < k || OH < 1 || OW < 1) {
        throw DimensionError("conv2d: spatial axes " + std::to_string(H) + "x" + std::to_string(W) +
                             " too small for kernel " + std::to_string(k));
    }
    const std::int64_t K = Cin * k * k, Ncols = B * OH * OW;
    std::vector<float> cols(static_cast<std::size_t>(K * Ncols));
    detail::im2col(x.data(), cols.data(), B, Cin, H, W, k, s, p, OH, OW);
    std::vector<float> outmat(static_cast<std::size_t>(Cout * Ncols));
    gemm_nn(weight.data(), cols.data(), outmat.data(), Cout, K, Ncols);
    Tensor out({B, Cout, OH, OW});
    float* po = out.data();
    const std::int64_t OHW = OH * OW;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t co = 0; co < Cout; ++co) {
            const float* src = outmat.data() + co * Ncols + b * OHW;
            float* dst = po + (b * Cout + co) * OHW;
            const float bv = with_bias ? bias.data()[co] : 0.0f;
            for (std::int64_t i = 0; i < OHW; ++i) dst[i] = src[i] + bv;
        }
    }
    const bool need = g.enabled() &&
                      (x.requires_grad() || weight.requires_grad() || (with_bias && bias.requires_grad()));
    if (need) {
        auto sx = x.storage(), sw = weight.storage(), so = out.storage();
        auto sb = with_bias ? bias.storage() : nullptr;
        const bool nx = x.requires_grad(), nw = weight.requires_grad();
        const bool nb = with_bias && bias.requires_grad();
        out.set_requires_grad(true);
        g.record("conv2d", so, [sx, sw, sb, so, nx, nw, nb, B, Cin, H, W, Cout, k, s, p, OH, OW, K, Ncols] {
            const float* gy = so->grad.data();
            const std::int64_t OHW = OH * OW;
            std::vector<float> goutmat(static_cast<std::size_t>(Cout * Ncols));
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t co = 0; co < Cout; ++co)
                    std::copy(gy + (b * Cout + co) * OHW, gy + (b * Cout + co + 1) * OHW,
                              goutmat.data() + co * Ncols + b * OHW);
            if (nb) {
                float* gb = acc_grad(*sb);
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    const float* row = goutmat.data() + co * Ncols;
                    for (std::int64_t i = 0; i < Ncols; ++i) acc += row[i];
                    gb[co] += static_cast<float>(acc);
                }
            }
            if (nw || nx) {
                std::vector<float> cols2(static_cast<std::size_t>(K * Ncols));
                if (nw) {
                    detail::im2col(sx->data.data(), cols2.data(), B, Cin, H, W, k, s, p, OH, OW);
                    gemm_nt(goutmat.data(), cols2.data(), acc_grad(*sw), Cout, Ncols, K, true);
                }
                if (nx) {
                    gemm_tn(sw->data.data(), goutmat.data(), cols2.data(), K, Cout, Ncols, false);
                    detail::col2im_acc(cols2.data(), acc_grad(*sx), B, Cin, H, W, k, s, p, OH, OW);
                }
            }
        });
    }
    maybe_check_finite(out, "conv2d");
    return out;
}

// Transposed convolution (exact adjoint of conv2d with the same stride,
// padding 0). x:[B,Cin,H,W], weight:[Cin,Cout,k,k], bias:[Cout], output
// [B,Cout,(H-1)*stride+k,(W-1)*stride+k].
inline Tensor conv_transpose2d(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
    if (x.rank() != 4) throw DimensionError("conv_transpose2d: input must be rank 4, got " + shape_str(x.shape()));
    if (weight.rank() != 4) throw DimensionError("conv_transpose2d: weight must be rank 4, got " + shape_str(weight.shape()));
    if (weight.dim(2) != weight.dim(3)) throw ConfigError("conv_transpose2d: kernel must be square");
    if (stride < 1) throw ConfigError("conv_transpose2d: stride must be >= 1");
    if (weight.dim(0) != x.dim(1)) {
        throw DimensionError("conv_transpose2d: weight axis 0 (" + std::to_string(weight.dim(0)) +
                             ") does not match input channel axis 1 (" + std::to_string(x.dim(1)) + ")");
    }
    const bool with_bias = bias.defined();
    if (with_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(1))) {
        throw DimensionError("conv_transpose2d: bias axis 0 must equal weight axis 1 (" +
                             std::to_string(weight.dim(1)) + ")");
    }
    const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = weight.dim(1), k = weight.dim(2), s = stride;
    const std::int64_t OH = (H - 1) * s + k, OW = (W - 1) * s + k;
    const std::int64_t HW = H * W, Nin = B * HW, Kck = Cout * k * k;

    // Xmat[ci, (b*H+h)*W+w], cols = weight^T(as [Cin,Cout*k*k]) applied: [Cout*k*k, B*H*W].
    std::vector<float> xmat(static_cast<std::size_t>(Cin * Nin));
    const float* px = x.data();
    for (std::int64_t ci = 0; ci < Cin; ++ci)
        for (std::int64_t b = 0; b < B; ++b)
            std::copy(px + (b * Cin + ci) * HW, px + (b * Cin + ci + 1) * HW,
                      xmat.data() + ci * Nin + b * HW);
    std::vector<float> cols(static_cast<std::size_t>(Kck * Nin));
    gemm_tn(weight.data(), xmat.data(), cols.data(), Kck, Cin, Nin, false);

    Tensor out({B, Cout, OH, OW});
    float* po = out.data();
    const std::int64_t OHW = OH * OW;
    if (with_bias) {
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Cout; ++co) {
                const float bv = bias.data()[co];
                float* dst = po + (b * Cout + co) * OHW;
                for (std::int64_t i = 0; i < OHW; ++i) dst[i] = bv;
            }
    }
    for (std::int64_t co = 0; co < Cout; ++co) {
        for (std::int64_t kh = 0; kh < k; ++kh) {
            for (std::int64_t kw = 0; kw < k; ++kw) {
                const float* row = cols.data() + ((co * k + kh) * k + kw) * Nin;
                for (std::int64_t b = 0; b < B; ++b) {
                    float* ob = po + (b * Cout + co) * OHW;
                    for (std::int64_t h = 0; h < H; ++h) {
                        const float* src = row + (b * H + h) * W;
                        float* dst = ob + (h * s + kh) * OW + kw;
                        for (std::int64_t w = 0; w < W; ++w) dst[w * s] += src[w];
                    }
                }
            }
        }
    }
    const bool need = g.enabled() &&
                      (x.requires_grad() || weight.requires_grad() || (with_bias && bias.requires_grad()));
    if (need) {
        auto sx = x.storage(), sw = weight.storage(), so = out.storage();
        auto sb = with_bias ? bias.storage() : nullptr;
        const bool nx = x.requires_grad(), nw = weight.requires_grad();
        const bool nb = with_bias && bias.requires_grad();
        out.set_requires_grad(true);
        g.record("conv_transpose2d", so, [sx, sw, sb, so, nx, nw, nb, B, Cin, H, W, Cout, k, s, OH, OW, HW, Nin, Kck] {
            const float* gy = so->grad.data();
            const std::int64_t OHW = OH * OW;
            if (nb) {
                float* gb = acc_grad(*sb);
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (std::int64_t b = 0; b < B; ++b) {
                        const float* src = gy + (b * Cout + co) * OHW;
                        for (std::int64_t i = 0; i < OHW; ++i) acc += src[i];
                    }
                    gb[co] += static_cast<float>(acc);
                }
            }
            // dcols is the gather adjoint of the forward scatter.
            std::vector<float> dcols(static_cast<std::size_t>(Kck * Nin));
            for (std::int64_t co = 0; co < Cout; ++co) {
                for (std::int64_t kh = 0; kh < k; ++kh) {
                    for (std::int64_t kw = 0; kw < k; ++kw) {
                        float* row = dcols.data() + ((co * k + kh) * k + kw) * Nin;
                        for (std::int64_t b = 0; b < B; ++b) {
                            const float* gb2 = gy + (b * Cout + co) * OHW;
                            for (std::int64_t h = 0; h < H; ++h) {
                                float* dst = row + (b * H + h) * W;
                                const float* src = gb2 + (h * s + kh) * OW + kw;
                                for (std::int64_t w = 0; w < W; ++w) dst[w] = src[w * s];
                            }
                        }
                    }
                }
            }
            if (nx) {
                std::vector<float> dxmat(static_cast<std::size_t>(Cin * Nin));
                gemm_nn(sw->data.data(), dcols.data(), dxmat.data(), Cin, Kck, Nin);
                float* gx = acc_grad(*sx);
                for (std::int64_t ci = 0; ci < Cin; ++ci)
                    for (std::int64_t b = 0; b < B; ++b) {
                        const float* src = dxmat.data() + ci * Nin + b * HW;
                        float* dst = gx + (b * Cin + ci) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                    }
            }
            if (nw) {
                std::vector<float> xmat2(static_cast<std::size_t>(Cin * Nin));
                const float* vx = sx->data.data();
                for (std::int64_t ci = 0; ci < Cin; ++ci)
                    for (std::int64_t b = 0; b < B; ++b)
                        std::copy(vx + (b * Cin + ci) * HW, vx + (b * Cin + ci + 1) * HW,
                                  xmat2.data() + ci * Nin + b * HW);
                gemm_nt(xmat2.data(), dcols.data(), acc_grad(*sw), Cin, Nin, Kck, true);
            }
        });
    }
    maybe_check_finite(out, "conv_transpose2d");
    return out;
}

} // namespace hsnc
