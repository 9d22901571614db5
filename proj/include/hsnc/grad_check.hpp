#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hsnc/attention.hpp"
#include "hsnc/conv.hpp"
#include "hsnc/ops.hpp"

namespace hsnc {

struct GradProblem {
    std::vector<Tensor> inputs;
    std::function<Tensor(Graph&)> fwd; // reads the inputs' storages directly
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::int64_t coords_checked = 0;
};

// Central finite differences against the tape gradients. The scalar loss is
// sum(w * y) for a fixed positive random cotangent w. Each probe is a unit
// direction v over one input tensor (a coordinate in a rotated orthonormal
// frame): numeric = (L(x+hv)-L(x-hv))/(2h) is compared with the analytic
// directional derivative <grad, v_realized>, where v_realized is recovered
// from the actually applied f32 perturbations so step quantization cancels.
//
// Probe directions are the analytic-gradient direction plus seeded jittered
// variants of it. Aligned probes keep the quotient conditioned: the f32
// forward pass carries rounding noise of a few ulp per output, which at
// h=1e-3 translates to an absolute noise floor around 1e-3 on deep composite
// graphs, so an isolated small coordinate cannot be resolved no matter how
// correct the gradient is. Along the gradient direction the signal is the
// full gradient norm; scale errors show up exactly, direction errors through
// the jittered probes. Per-coordinate formula errors in custom backwards are
// pinned down separately by the exact-Jacobian oracle tests.
inline GradCheckResult grad_check_problem(GradProblem& prob, double h, std::uint64_t seed,
                                          int probes_per_input = 6) {
    Rng rng(seed, 0x9c0ffee);
    Graph g;
    Tensor y = prob.fwd(g);
    Tensor w = runiform(rng, y.shape(), 0.5f, 1.5f);
    const auto loss_value = [&]() {
        Graph g2(false);
        Tensor yy = prob.fwd(g2);
        double acc = 0.0;
        const float* py = yy.data();
        const float* pw = w.data();
        for (std::int64_t i = 0; i < yy.numel(); ++i) acc += static_cast<double>(py[i]) * pw[i];
        return acc;
    };
    for (auto& t : prob.inputs) t.zero_grad();
    Tensor loss = sum_all(g, mul(g, y, w));
    g.backward(loss);

    GradCheckResult res;
    std::vector<double> v, gdir, orig;
    std::vector<float> xp, xm;
    for (auto& t : prob.inputs) {
        if (!t.requires_grad()) continue;
        const std::int64_t n = t.numel();
        const std::size_t un = static_cast<std::size_t>(n);
        const float* ga = t.grad();
        float* px = t.data();
        v.resize(un);
        gdir.resize(un);
        orig.resize(un);
        xp.resize(un);
        xm.resize(un);
        double gnorm2 = 0.0;
        for (std::int64_t i = 0; i < n; ++i) gnorm2 += static_cast<double>(ga[i]) * ga[i];
        const double gnorm = std::sqrt(gnorm2);
        for (std::int64_t i = 0; i < n; ++i)
            gdir[static_cast<std::size_t>(i)] = gnorm > 0.0 ? ga[i] / gnorm : 0.0;
        for (int pr = 0; pr < probes_per_input; ++pr) {
            double norm2 = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const auto ii = static_cast<std::size_t>(i);
                const double jitter = (pr == 0) ? 0.0 : 0.5 * rng.normal() / std::sqrt(static_cast<double>(n));
                v[ii] = (gnorm > 0.0 ? gdir[ii] : rng.normal()) + jitter;
                norm2 += v[ii] * v[ii];
            }
            if (norm2 == 0.0) continue;
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::int64_t i = 0; i < n; ++i) {
                const auto ii = static_cast<std::size_t>(i);
                v[ii] *= inv;
                orig[ii] = px[i];
                xp[ii] = static_cast<float>(orig[ii] + h * v[ii]);
                xm[ii] = static_cast<float>(orig[ii] - h * v[ii]);
            }
            for (std::int64_t i = 0; i < n; ++i) px[i] = xp[static_cast<std::size_t>(i)];
            const double lp = loss_value();
            for (std::int64_t i = 0; i < n; ++i) px[i] = xm[static_cast<std::size_t>(i)];
            const double lm = loss_value();
            for (std::int64_t i = 0; i < n; ++i) px[i] = static_cast<float>(orig[static_cast<std::size_t>(i)]);
            double analytic = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const auto ii = static_cast<std::size_t>(i);
                analytic += static_cast<double>(ga[i]) *
                            ((static_cast<double>(xp[ii]) - static_cast<double>(xm[ii])) / (2.0 * h));
            }
            const double numeric = (lp - lm) / (2.0 * h);
            const double abs_err = std::fabs(analytic - numeric);
            const double rel = abs_err / std::max(1e-6, std::fabs(numeric));
            res.max_rel_err = std::max(res.max_rel_err, rel);
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            ++res.coords_checked;
        }
    }
    return res;
}

namespace detail {

inline Tensor away_from(Rng& rng, std::vector<std::int64_t> shape, float margin, float hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) {
        const float mag = static_cast<float>(rng.uniform_in(margin, hi));
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

using ShapeList = std::vector<std::vector<std::int64_t>>;
using ProblemBuilder = std::function<GradProblem(const ShapeList&, std::uint64_t)>;

inline ShapeList pick(const ShapeList& given, ShapeList defaults) {
    return given.empty() ? std::move(defaults) : given;
}

inline std::map<std::string, ProblemBuilder> make_grad_registry() {
    std::map<std::string, ProblemBuilder> reg;

    auto unary = [](float lo_mag, float hi_mag, bool signed_mag,
                    std::function<Tensor(Graph&, const Tensor&)> op) {
        return [=](const ShapeList& shapes, std::uint64_t seed) {
            const ShapeList& s = pick(shapes, {{2, 3, 4}});
            Rng rng(seed);
            GradProblem p;
            Tensor x = signed_mag ? away_from(rng, s[0], lo_mag, hi_mag)
                                  : runiform(rng, s[0], lo_mag, hi_mag);
            x.set_requires_grad(true);
            p.inputs = {x};
            p.fwd = [op, x](Graph& g) { return op(g, x); };
            return p;
        };
    };

    reg["gelu"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 3, 4}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -2.0f, 2.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return gelu(g, x); };
        return p;
    };
    reg["relu"] = unary(0.1f, 1.5f, true, [](Graph& g, const Tensor& x) { return relu(g, x); });
    reg["abs"] = unary(0.1f, 1.5f, true, [](Graph& g, const Tensor& x) { return abs_t(g, x); });
    reg["exp"] = unary(-1.0f, 1.0f, false, [](Graph& g, const Tensor& x) { return exp_t(g, x); });
    reg["log"] = unary(0.2f, 2.0f, false, [](Graph& g, const Tensor& x) { return log_t(g, x); });
    reg["clamp"] = [](const ShapeList& shapes, std::uint64_t seed) {
        // bounds at +-0.5; inputs kept 0.1 away from both kinks
        const ShapeList& s = pick(shapes, {{3, 8}});
        Rng rng(seed);
        Tensor x(s[0]);
        for (auto& v : x.vec()) {
            const bool inner = rng.uniform() < 0.5;
            const float mag = inner ? static_cast<float>(rng.uniform_in(0.0, 0.4))
                                    : static_cast<float>(rng.uniform_in(0.6, 1.2));
            v = rng.uniform() < 0.5 ? -mag : mag;
        }
        x.set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return clamp(g, x, -0.5f, 0.5f); };
        return p;
    };

    reg["mul"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{3, 5}, {3, 5}});
        Rng rng(seed);
        Tensor a = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {a, b};
        p.fwd = [a, b](Graph& g) { return mul(g, a, b); };
        return p;
    };
    reg["div"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{3, 5}, {3, 5}});
        Rng rng(seed);
        Tensor a = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = away_from(rng, s[1], 0.5f, 1.5f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {a, b};
        p.fwd = [a, b](Graph& g) { return div(g, a, b); };
        return p;
    };

    reg["linear"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{3, 4}, {2, 4}, {2}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor W = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[2], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, W, b};
        p.fwd = [x, W, b](Graph& g) { return linear(g, x, W, b); };
        return p;
    };
    reg["matmul"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{3, 4}, {4, 2}});
        Rng rng(seed);
        Tensor a = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {a, b};
        p.fwd = [a, b](Graph& g) { return matmul(g, a, b); };
        return p;
    };
    reg["bmm"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 3, 4}, {2, 4, 3}});
        Rng rng(seed);
        Tensor a = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {a, b};
        p.fwd = [a, b](Graph& g) { return bmm(g, a, b); };
        return p;
    };
    reg["bmm_t"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 3, 4}, {2, 5, 4}});
        Rng rng(seed);
        Tensor a = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {a, b};
        p.fwd = [a, b](Graph& g) { return bmm(g, a, b, true); };
        return p;
    };

    reg["softmax"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{3, 5}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -2.0f, 2.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return softmax_lastdim(g, x); };
        return p;
    };
    reg["permute"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 3, 4}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return permute(g, x, {2, 0, 1}); };
        return p;
    };
    reg["slice_channels"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 6, 3, 3}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return slice_channels(g, x, 1, 4); };
        return p;
    };
    reg["mean_all"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{4, 6}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x](Graph& g) { return mean_all(g, x); };
        return p;
    };

    reg["conv2d"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{1, 3, 5, 5}, {4, 3, 3, 3}, {4}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor w = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[2], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, w, b};
        p.fwd = [x, w, b](Graph& g) { return conv2d(g, x, w, b, 2, 1); };
        return p;
    };
    reg["conv2d_s1"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 2, 4, 4}, {3, 2, 3, 3}, {3}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor w = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[2], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, w, b};
        p.fwd = [x, w, b](Graph& g) { return conv2d(g, x, w, b, 1, 1); };
        return p;
    };
    reg["conv_transpose2d"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{1, 3, 3, 3}, {3, 2, 2, 2}, {2}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor w = runiform(rng, s[1], -1.0f, 1.0f).set_requires_grad(true);
        Tensor b = runiform(rng, s[2], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, w, b};
        p.fwd = [x, w, b](Graph& g) { return conv_transpose2d(g, x, w, b, 2); };
        return p;
    };
    reg["group_norm"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{2, 8, 3, 3}, {8}, {8}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor ga = runiform(rng, s[1], 0.5f, 1.5f).set_requires_grad(true);
        Tensor be = runiform(rng, s[2], -0.5f, 0.5f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, ga, be};
        p.fwd = [x, ga, be](Graph& g) { return group_norm(g, x, 2, ga, be, 1e-6f); };
        return p;
    };
    reg["self_attention"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{1, 4, 2, 2}, {4, 4}, {4, 4}, {4, 4}, {4, 4}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.5f, 1.5f).set_requires_grad(true);
        Tensor wq = runiform(rng, s[1], -0.7f, 0.7f).set_requires_grad(true);
        Tensor wk = runiform(rng, s[2], -0.7f, 0.7f).set_requires_grad(true);
        Tensor wv = runiform(rng, s[3], -1.2f, 1.2f).set_requires_grad(true);
        Tensor wo = runiform(rng, s[4], -1.2f, 1.2f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x, wq, wk, wv, wo};
        p.fwd = [x, wq, wk, wv, wo](Graph& g) { return self_attention(g, x, 2, wq, wk, wv, wo); };
        return p;
    };
    reg["dropout"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{40}});
        Rng rng(seed);
        Tensor x = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        GradProblem p;
        p.inputs = {x};
        p.fwd = [x, seed](Graph& g) {
            Rng drop_rng(seed ^ 0x5eed, 7);
            return dropout(g, x, 0.3f, true, drop_rng);
        };
        return p;
    };
    reg["masked_mse"] = [](const ShapeList& shapes, std::uint64_t seed) {
        const ShapeList& s = pick(shapes, {{4, 5}, {4, 5}});
        Rng rng(seed);
        Tensor pred = runiform(rng, s[0], -1.0f, 1.0f).set_requires_grad(true);
        Tensor target = runiform(rng, s[1], -1.0f, 1.0f);
        for (auto& v : target.vec())
            if (rng.uniform() < 0.25) v = std::nanf("");
        GradProblem p;
        p.inputs = {pred, target};
        p.fwd = [pred, target](Graph& g) { return masked_mse(g, pred, target); };
        return p;
    };

    return reg;
}

inline const std::map<std::string, ProblemBuilder>& grad_registry() {
    static const auto reg = make_grad_registry();
    return reg;
}

} // namespace detail

inline GradCheckResult grad_check_full(const std::string& opname,
                                       const detail::ShapeList& trial_shapes,
                                       double eps, std::uint64_t seed) {
    const auto& reg = detail::grad_registry();
    auto it = reg.find(opname);
    if (it == reg.end()) throw UsageError("grad_check: unknown op '" + opname + "'");
    GradProblem prob = it->second(trial_shapes, seed);
    return grad_check_problem(prob, eps, seed);
}

inline double grad_check(const std::string& opname, const detail::ShapeList& trial_shapes,
                         double eps, std::uint64_t seed) {
    return grad_check_full(opname, trial_shapes, eps, seed).max_rel_err;
}

} // namespace hsnc
