#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hsnc/kernels.hpp"
#include "hsnc/rng.hpp"
#include "hsnc/tensor.hpp"

namespace hsnc {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

inline std::vector<std::int64_t> row_major_strides(const std::vector<std::int64_t>& shape) {
    std::vector<std::int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    return st;
}

// Visit every position of the permuted output in row-major order, passing
// (out_linear_index, src_linear_index) where out axis i maps to src axis
// perm[i].
template <typename Fn>
void for_each_permuted(const std::vector<std::int64_t>& src_shape, const std::vector<int>& perm, Fn&& fn) {
    const int r = static_cast<int>(src_shape.size());
    std::vector<std::int64_t> src_strides = row_major_strides(src_shape);
    std::vector<std::int64_t> out_shape(static_cast<std::size_t>(r));
    std::vector<std::int64_t> step(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<std::size_t>(i)] = src_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        step[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    std::int64_t total = 1;
    for (auto d : out_shape) total *= d;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t out = 0; out < total; ++out) {
        fn(out, src);
        for (int ax = r - 1; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            src += step[a];
            if (++idx[a] < out_shape[a]) break;
            src -= step[a] * out_shape[a];
            idx[a] = 0;
        }
    }
}

} // namespace detail

// ---- elementwise binary ----

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("add", so, [sa, sb, so, na, nb, n] {
            const float* gy = so->grad.data();
            if (na) {
                float* ga = acc_grad(*sa);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (nb) {
                float* gb = acc_grad(*sb);
                for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i];
            }
        });
    }
    maybe_check_finite(out, "add");
    return out;
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("sub", so, [sa, sb, so, na, nb, n] {
            const float* gy = so->grad.data();
            if (na) {
                float* ga = acc_grad(*sa);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (nb) {
                float* gb = acc_grad(*sb);
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
            }
        });
    }
    maybe_check_finite(out, "sub");
    return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("mul", so, [sa, sb, so, na, nb, n] {
            const float* gy = so->grad.data();
            if (na) {
                float* ga = acc_grad(*sa);
                const float* vb = sb->data.data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] * vb[i];
            }
            if (nb) {
                float* gb = acc_grad(*sb);
                const float* va = sa->data.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i] * va[i];
            }
        });
    }
    maybe_check_finite(out, "mul");
    return out;
}

inline Tensor div(Graph& g, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("div", so, [sa, sb, so, na, nb, n] {
            const float* gy = so->grad.data();
            const float* vb = sb->data.data();
            if (na) {
                float* ga = acc_grad(*sa);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] / vb[i];
            }
            if (nb) {
                float* gb = acc_grad(*sb);
                const float* vy = so->data.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= gy[i] * vy[i] / vb[i];
            }
        });
    }
    maybe_check_finite(out, "div");
    return out;
}

// ---- elementwise with constants ----

inline Tensor add_scalar(Graph& g, const Tensor& x, float c) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] + c;
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("add_scalar", so, [sx, so, n] {
            const float* gy = so->grad.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
        });
    }
    maybe_check_finite(out, "add_scalar");
    return out;
}

inline Tensor mul_scalar(Graph& g, const Tensor& x, float c) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("mul_scalar", so, [sx, so, n, c] {
            const float* gy = so->grad.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += c * gy[i];
        });
    }
    maybe_check_finite(out, "mul_scalar");
    return out;
}

// ---- elementwise unary ----

inline Tensor exp_t(Graph& g, const Tensor& x) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("exp", so, [sx, so, n] {
            const float* gy = so->grad.data();
            const float* vy = so->data.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * vy[i];
        });
    }
    maybe_check_finite(out, "exp");
    return out;
}

inline Tensor log_t(Graph& g, const Tensor& x) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::log(px[i]);
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("log", so, [sx, so, n] {
            const float* gy = so->grad.data();
            const float* vx = sx->data.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] / vx[i];
        });
    }
    maybe_check_finite(out, "log");
    return out;
}

inline Tensor abs_t(Graph& g, const Tensor& x) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::fabs(px[i]);
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("abs", so, [sx, so, n] {
            const float* gy = so->grad.data();
            const float* vx = sx->data.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) {
                const float s = vx[i] > 0.0f ? 1.0f : (vx[i] < 0.0f ? -1.0f : 0.0f);
                gx[i] += gy[i] * s;
            }
        });
    }
    maybe_check_finite(out, "abs");
    return out;
}

inline Tensor clamp(Graph& g, const Tensor& x, float lo, float hi) {
    if (lo > hi) throw ConfigError("clamp: lo > hi");
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::min(std::max(px[i], lo), hi);
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("clamp", so, [sx, so, n, lo, hi] {
            const float* gy = so->grad.data();
            const float* vx = sx->data.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i)
                if (vx[i] >= lo && vx[i] <= hi) gx[i] += gy[i];
        });
    }
    maybe_check_finite(out, "clamp");
    return out;
}

enum class Act { gelu, relu };

// GELU is the exact Gaussian-CDF form x * Phi(x), not the tanh approximation.
inline Tensor activation(Graph& g, const Tensor& x, Act kind) {
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    const float* px = x.data();
    float* po = out.data();
    if (kind == Act::gelu) {
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = px[i];
            po[i] = static_cast<float>(v * 0.5 * (1.0 + std::erf(v * 0.7071067811865475)));
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.0f ? px[i] : 0.0f;
    }
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("activation", so, [sx, so, n, kind] {
            const float* gy = so->grad.data();
            const float* vx = sx->data.data();
            float* gx = acc_grad(*sx);
            if (kind == Act::gelu) {
                constexpr double inv_sqrt2pi = 0.3989422804014327;
                for (std::int64_t i = 0; i < n; ++i) {
                    const double v = vx[i];
                    const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
                    const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                    gx[i] += gy[i] * static_cast<float>(cdf + v * pdf);
                }
            } else {
                for (std::int64_t i = 0; i < n; ++i)
                    if (vx[i] > 0.0f) gx[i] += gy[i];
            }
        });
    }
    maybe_check_finite(out, "activation");
    return out;
}

inline Tensor gelu(Graph& g, const Tensor& x) { return activation(g, x, Act::gelu); }
inline Tensor relu(Graph& g, const Tensor& x) { return activation(g, x, Act::relu); }

// ---- matrix products ----

// y = x * W^T + b, x:[N,Din], W:[Dout,Din], b:[Dout].
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& W, const Tensor& b) {
    if (x.rank() != 2) throw DimensionError("linear: input must be rank 2, got " + shape_str(x.shape()));
    if (W.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(W.shape()));
    if (x.dim(1) != W.dim(1)) {
        throw DimensionError("linear: input feature axis 1 (" + std::to_string(x.dim(1)) +
                             ") does not match weight axis 1 (" + std::to_string(W.dim(1)) + ")");
    }
    const bool with_bias = b.defined();
    if (with_bias && (b.rank() != 1 || b.dim(0) != W.dim(0))) {
        throw DimensionError("linear: bias axis 0 must equal weight axis 0 (" + std::to_string(W.dim(0)) + ")");
    }
    const std::int64_t N = x.dim(0), Din = x.dim(1), Dout = W.dim(0);
    Tensor out({N, Dout});
    gemm_nt(x.data(), W.data(), out.data(), N, Din, Dout);
    if (with_bias) {
        float* po = out.data();
        const float* pb = b.data();
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t j = 0; j < Dout; ++j) po[i * Dout + j] += pb[j];
    }
    const bool need = g.enabled() && (x.requires_grad() || W.requires_grad() || (with_bias && b.requires_grad()));
    if (need) {
        auto sx = x.storage(), sw = W.storage(), so = out.storage();
        auto sb = with_bias ? b.storage() : nullptr;
        const bool nx = x.requires_grad(), nw = W.requires_grad();
        const bool nb = with_bias && b.requires_grad();
        out.set_requires_grad(true);
        g.record("linear", so, [sx, sw, sb, so, nx, nw, nb, N, Din, Dout] {
            const float* gy = so->grad.data();
            if (nx) gemm_nn(gy, sw->data.data(), acc_grad(*sx), N, Dout, Din, true);
            if (nw) gemm_tn(gy, sx->data.data(), acc_grad(*sw), Dout, N, Din, true);
            if (nb) {
                float* gb = acc_grad(*sb);
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t j = 0; j < Dout; ++j) gb[j] += gy[i * Dout + j];
            }
        });
    }
    maybe_check_finite(out, "linear");
    return out;
}

inline Tensor linear_nb(Graph& g, const Tensor& x, const Tensor& W) {
    return linear(g, x, W, Tensor());
}

// y = a * b, a:[M,K], b:[K,N].
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: both operands must be rank 2, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner axes disagree, a axis 1 = " + std::to_string(a.dim(1)) +
                             " vs b axis 0 = " + std::to_string(b.dim(0)));
    }
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out({M, N});
    gemm_nn(a.data(), b.data(), out.data(), M, K, N);
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("matmul", so, [sa, sb, so, na, nb, M, K, N] {
            const float* gy = so->grad.data();
            if (na) gemm_nt(gy, sb->data.data(), acc_grad(*sa), M, N, K, true);
            if (nb) gemm_tn(sa->data.data(), gy, acc_grad(*sb), K, M, N, true);
        });
    }
    maybe_check_finite(out, "matmul");
    return out;
}

// Batched matmul. a:[Bn,M,K]; b:[Bn,K,N], or [Bn,N,K] when trans_b.
inline Tensor bmm(Graph& g, const Tensor& a, const Tensor& b, bool trans_b = false) {
    if (a.rank() != 3 || b.rank() != 3) {
        throw DimensionError("bmm: both operands must be rank 3, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    if (a.dim(0) != b.dim(0)) {
        throw DimensionError("bmm: batch axis 0 disagrees, " + std::to_string(a.dim(0)) +
                             " vs " + std::to_string(b.dim(0)));
    }
    const std::int64_t Bn = a.dim(0), M = a.dim(1), K = a.dim(2);
    const std::int64_t Kb = trans_b ? b.dim(2) : b.dim(1);
    const std::int64_t N = trans_b ? b.dim(1) : b.dim(2);
    if (K != Kb) {
        throw DimensionError("bmm: inner axis disagrees, a axis 2 = " + std::to_string(K) +
                             " vs b axis " + std::to_string(trans_b ? 2 : 1) + " = " + std::to_string(Kb));
    }
    Tensor out({Bn, M, N});
    for (std::int64_t i = 0; i < Bn; ++i) {
        const float* pa = a.data() + i * M * K;
        const float* pb = b.data() + i * K * N;
        float* po = out.data() + i * M * N;
        if (trans_b)
            gemm_nt(pa, pb, po, M, K, N);
        else
            gemm_nn(pa, pb, po, M, K, N);
    }
    if (g.enabled() && (a.requires_grad() || b.requires_grad())) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        out.set_requires_grad(true);
        g.record("bmm", so, [sa, sb, so, na, nb, Bn, M, K, N, trans_b] {
            const float* gy = so->grad.data();
            float* ga = na ? acc_grad(*sa) : nullptr;
            float* gb = nb ? acc_grad(*sb) : nullptr;
            for (std::int64_t i = 0; i < Bn; ++i) {
                const float* gyi = gy + i * M * N;
                const float* pa = sa->data.data() + i * M * K;
                const float* pb = sb->data.data() + i * K * N;
                if (na) {
                    if (trans_b)
                        gemm_nn(gyi, pb, ga + i * M * K, M, N, K, true);
                    else
                        gemm_nt(gyi, pb, ga + i * M * K, M, N, K, true);
                }
                if (nb) {
                    if (trans_b)
                        gemm_tn(gyi, pa, gb + i * N * K, N, M, K, true);
                    else
                        gemm_tn(pa, gyi, gb + i * K * N, K, M, N, true);
                }
            }
        });
    }
    maybe_check_finite(out, "bmm");
    return out;
}

// ---- layout ----

inline Tensor permute(Graph& g, const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) {
        throw DimensionError("permute: perm length " + std::to_string(perm.size()) +
                             " does not match rank " + std::to_string(r));
    }
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
            throw DimensionError("permute: invalid permutation for rank " + std::to_string(r));
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<std::int64_t> out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    Tensor out(out_shape);
    const float* px = x.data();
    float* po = out.data();
    detail::for_each_permuted(x.shape(), perm, [&](std::int64_t o, std::int64_t s) { po[o] = px[s]; });
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        auto xshape = x.shape();
        out.set_requires_grad(true);
        g.record("permute", so, [sx, so, xshape, perm] {
            const float* gy = so->grad.data();
            float* gx = acc_grad(*sx);
            detail::for_each_permuted(xshape, perm, [&](std::int64_t o, std::int64_t s) { gx[s] += gy[o]; });
        });
    }
    return out;
}

// Channel slice [c0, c1) of a [B,C,H,W] tensor.
inline Tensor slice_channels(Graph& g, const Tensor& x, std::int64_t c0, std::int64_t c1) {
    if (x.rank() != 4) throw DimensionError("slice_channels: input must be rank 4, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1) {
        throw DimensionError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") invalid for channel axis 1 of extent " + std::to_string(C));
    }
    const std::int64_t Cs = c1 - c0;
    Tensor out({B, Cs, x.dim(2), x.dim(3)});
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t b = 0; b < B; ++b)
        std::copy(px + (b * C + c0) * HW, px + (b * C + c1) * HW, po + b * Cs * HW);
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("slice_channels", so, [sx, so, B, C, Cs, c0, HW] {
            const float* gy = so->grad.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t b = 0; b < B; ++b) {
                const float* src = gy + b * Cs * HW;
                float* dst = gx + (b * C + c0) * HW;
                for (std::int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// ---- softmax / reductions ----

inline Tensor softmax_lastdim(Graph& g, const Tensor& x) {
    if (x.rank() < 1) throw DimensionError("softmax: rank must be >= 1");
    const std::int64_t S = x.dim(x.rank() - 1);
    const std::int64_t R = x.numel() / S;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t r = 0; r < R; ++r) {
        const float* row = px + r * S;
        float* orow = po + r * S;
        float m = row[0];
        for (std::int64_t j = 1; j < S; ++j) m = std::max(m, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < S; ++j) {
            orow[j] = std::exp(row[j] - m);
            sum += orow[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (std::int64_t j = 0; j < S; ++j) orow[j] *= inv;
    }
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("softmax", so, [sx, so, R, S] {
            const float* gy = so->grad.data();
            const float* p = so->data.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t r = 0; r < R; ++r) {
                const float* gr = gy + r * S;
                const float* pr = p + r * S;
                double dot = 0.0;
                for (std::int64_t j = 0; j < S; ++j) dot += static_cast<double>(gr[j]) * pr[j];
                for (std::int64_t j = 0; j < S; ++j)
                    gx[r * S + j] += pr[j] * (gr[j] - static_cast<float>(dot));
            }
        });
    }
    maybe_check_finite(out, "softmax");
    return out;
}

inline Tensor sum_all(Graph& g, const Tensor& x) {
    const std::int64_t n = x.numel();
    double acc = 0.0;
    const float* px = x.data();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("sum_all", so, [sx, so, n] {
            const float gy = so->grad[0];
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy;
        });
    }
    maybe_check_finite(out, "sum_all");
    return out;
}

inline Tensor mean_all(Graph& g, const Tensor& x) {
    const std::int64_t n = x.numel();
    double acc = 0.0;
    const float* px = x.data();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("mean_all", so, [sx, so, n] {
            const float gy = so->grad[0] / static_cast<float>(n);
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy;
        });
    }
    maybe_check_finite(out, "mean_all");
    return out;
}

// ---- stochastic ----

inline Tensor dropout(Graph& g, const Tensor& x, float p, bool training, Rng& rng) {
    if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0f) return x;
    const std::int64_t n = x.numel();
    const float scale = 1.0f / (1.0f - p);
    auto mask = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
    for (auto& m : *mask) m = rng.uniform() < static_cast<double>(p) ? 0.0f : scale;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[static_cast<std::size_t>(i)];
    if (g.enabled() && x.requires_grad()) {
        auto sx = x.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("dropout", so, [sx, so, mask, n] {
            const float* gy = so->grad.data();
            float* gx = acc_grad(*sx);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * (*mask)[static_cast<std::size_t>(i)];
        });
    }
    maybe_check_finite(out, "dropout");
    return out;
}

// ---- normalization ----

// Population-variance group norm over [B,C,H,W], per (sample, group).
inline Tensor group_norm(Graph& g, const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-6f) {
    if (x.rank() != 4) throw DimensionError("group_norm: input must be rank 4, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups <= 0 || C % groups != 0) {
        throw ConfigError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                          std::to_string(groups));
    }
    if (eps <= 0.0f) throw ConfigError("group_norm: eps must be positive");
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C) {
        throw DimensionError("group_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
    }
    const std::int64_t G = groups, cpg = C / G, HW = H * W, Ng = cpg * HW;
    Tensor out(x.shape());
    auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B * G));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B * G));
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t gi = 0; gi < G; ++gi) {
            const float* base = px + (b * C + gi * cpg) * HW;
            double s = 0.0, s2 = 0.0;
            for (std::int64_t i = 0; i < Ng; ++i) {
                s += base[i];
                s2 += static_cast<double>(base[i]) * base[i];
            }
            const double mu = s / static_cast<double>(Ng);
            const double var = s2 / static_cast<double>(Ng) - mu * mu;
            const float istd = static_cast<float>(1.0 / std::sqrt(std::max(var, 0.0) + eps));
            (*mean)[static_cast<std::size_t>(b * G + gi)] = static_cast<float>(mu);
            (*inv_std)[static_cast<std::size_t>(b * G + gi)] = istd;
            for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const std::int64_t c = gi * cpg + cc;
                const float* xin = px + (b * C + c) * HW;
                float* yout = po + (b * C + c) * HW;
                const float ga = pg[c], be = pb[c], mu_f = static_cast<float>(mu);
                for (std::int64_t i = 0; i < HW; ++i) yout[i] = ga * (xin[i] - mu_f) * istd + be;
            }
        }
    }
    const bool need = g.enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (need) {
        auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), so = out.storage();
        const bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
        out.set_requires_grad(true);
        g.record("group_norm", so, [sx, sg, sb, so, mean, inv_std, nx, ng, nb, B, C, G, cpg, HW, Ng] {
            const float* gy = so->grad.data();
            const float* vx = sx->data.data();
            const float* vg = sg->data.data();
            float* gx = nx ? acc_grad(*sx) : nullptr;
            float* gga = ng ? acc_grad(*sg) : nullptr;
            float* gbe = nb ? acc_grad(*sb) : nullptr;
            std::vector<float> xhat(static_cast<std::size_t>(Ng));
            std::vector<float> dxhat(static_cast<std::size_t>(Ng));
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t gi = 0; gi < G; ++gi) {
                    const float mu = (*mean)[static_cast<std::size_t>(b * G + gi)];
                    const float istd = (*inv_std)[static_cast<std::size_t>(b * G + gi)];
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t cc = 0; cc < cpg; ++cc) {
                        const std::int64_t c = gi * cpg + cc;
                        const float* xin = vx + (b * C + c) * HW;
                        const float* gyc = gy + (b * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            const std::int64_t j = cc * HW + i;
                            xhat[static_cast<std::size_t>(j)] = (xin[i] - mu) * istd;
                            dxhat[static_cast<std::size_t>(j)] = gyc[i] * vg[c];
                            s1 += dxhat[static_cast<std::size_t>(j)];
                            s2 += static_cast<double>(dxhat[static_cast<std::size_t>(j)]) * xhat[static_cast<std::size_t>(j)];
                        }
                        if (gga || gbe) {
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const std::int64_t j = cc * HW + i;
                                if (gga) gga[c] += gyc[i] * xhat[static_cast<std::size_t>(j)];
                                if (gbe) gbe[c] += gyc[i];
                            }
                        }
                    }
                    if (gx) {
                        const float m1 = static_cast<float>(s1 / static_cast<double>(Ng));
                        const float m2 = static_cast<float>(s2 / static_cast<double>(Ng));
                        for (std::int64_t cc = 0; cc < cpg; ++cc) {
                            const std::int64_t c = gi * cpg + cc;
                            float* gxc = gx + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const std::int64_t j = cc * HW + i;
                                gxc[i] += istd * (dxhat[static_cast<std::size_t>(j)] - m1 -
                                                  xhat[static_cast<std::size_t>(j)] * m2);
                            }
                        }
                    }
                }
            }
        });
    }
    maybe_check_finite(out, "group_norm");
    return out;
}

// ---- losses ----

// Mean squared error over positions where target is finite; NaN targets are
// excluded from both the sum and the count. All-NaN target yields 0.
inline Tensor masked_mse(Graph& g, const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "masked_mse");
    const std::int64_t n = pred.numel();
    const float* pp = pred.data();
    const float* pt = target.data();
    double sum = 0.0;
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(pt[i])) continue;
        const double d = static_cast<double>(pp[i]) - pt[i];
        sum += d * d;
        ++count;
    }
    Tensor out = Tensor::scalar(count > 0 ? static_cast<float>(sum / static_cast<double>(count)) : 0.0f);
    if (count > 0 && g.enabled() && pred.requires_grad()) {
        auto sp = pred.storage(), st = target.storage(), so = out.storage();
        out.set_requires_grad(true);
        g.record("masked_mse", so, [sp, st, so, n, count] {
            const float gy = so->grad[0];
            const float* vp = sp->data.data();
            const float* vt = st->data.data();
            float* gp = acc_grad(*sp);
            const float scale = 2.0f * gy / static_cast<float>(count);
            for (std::int64_t i = 0; i < n; ++i)
                if (std::isfinite(vt[i])) gp[i] += scale * (vp[i] - vt[i]);
        });
    }
    return out;
}

} // namespace hsnc
