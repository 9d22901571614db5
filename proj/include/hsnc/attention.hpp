#pragma once

#include <cmath>

#include "hsnc/ops.hpp"

namespace hsnc {

// Multi-head spatial self-attention with residual skip:
// y = x + Wo(concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h), positions flattened
// to a sequence of length H*W, no positional encoding, no projection biases.
inline Tensor self_attention(Graph& g, const Tensor& x, int heads, const Tensor& Wq, const Tensor& Wk,
                             const Tensor& Wv, const Tensor& Wo) {
    if (x.rank() != 4) throw DimensionError("self_attention: input must be rank 4, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (heads <= 0 || C % heads != 0) {
        throw ConfigError("self_attention: channels " + std::to_string(C) + " not divisible by heads " +
                          std::to_string(heads));
    }
    for (const Tensor* w : {&Wq, &Wk, &Wv, &Wo}) {
        if (w->rank() != 2 || w->dim(0) != C || w->dim(1) != C) {
            throw DimensionError("self_attention: projection weights must have shape [" + std::to_string(C) +
                                 "," + std::to_string(C) + "]");
        }
    }
    const std::int64_t S = H * W, dk = C / heads;
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dk)));

    Tensor flat = permute(g, x.reshaped({B, C, S}), {0, 2, 1}).reshaped({B * S, C});
    auto split_heads = [&](const Tensor& t) {
        return permute(g, t.reshaped({B, S, heads, dk}), {0, 2, 1, 3}).reshaped({B * heads, S, dk});
    };
    Tensor q = split_heads(linear_nb(g, flat, Wq));
    Tensor k = split_heads(linear_nb(g, flat, Wk));
    Tensor v = split_heads(linear_nb(g, flat, Wv));

    Tensor att = mul_scalar(g, bmm(g, q, k, true), scale);
    Tensor p = softmax_lastdim(g, att);
    Tensor o = bmm(g, p, v);

    Tensor oc = permute(g, o.reshaped({B, heads, S, dk}), {0, 2, 1, 3}).reshaped({B * S, C});
    Tensor proj = linear_nb(g, oc, Wo);
    Tensor proj4 = permute(g, proj.reshaped({B, S, C}), {0, 2, 1}).reshaped({B, C, H, W});
    return add(g, x, proj4);
}

} // namespace hsnc
