#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "hsnc/errors.hpp"
#include "hsnc/rng.hpp"

namespace hsnc {

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Storage {
    std::vector<float> data;
    std::vector<float> grad; // empty until first touched
    bool requires_grad = false;
};

// Dense f32 tensor, row-major. Copying a Tensor copies the handle; the
// underlying buffer is shared. reshaped() returns a view on the same storage.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape, bool requires_grad = false)
        : st_(std::make_shared<Storage>()), shape_(std::move(shape)) {
        for (auto d : shape_) {
            if (d <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape_));
        }
        st_->data.assign(static_cast<std::size_t>(numel()), 0.0f);
        st_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.st_->data.begin(), t.st_->data.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return full({1}, v); }

    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<float> data) {
        Tensor t;
        t.shape_ = std::move(shape);
        std::int64_t n = 1;
        for (auto d : t.shape_) {
            if (d <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(t.shape_));
            n *= d;
        }
        if (n != static_cast<std::int64_t>(data.size())) {
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(t.shape_));
        }
        t.st_ = std::make_shared<Storage>();
        t.st_->data = std::move(data);
        return t;
    }

    bool defined() const { return static_cast<bool>(st_); }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }

    std::int64_t dim(int i) const {
        if (i < 0 || i >= rank()) throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape_));
        return shape_[static_cast<std::size_t>(i)];
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape_) n *= d;
        return n;
    }

    float* data() { return st_->data.data(); }
    const float* data() const { return st_->data.data(); }
    std::vector<float>& vec() { return st_->data; }
    const std::vector<float>& vec() const { return st_->data; }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        st_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return st_ && !st_->grad.empty(); }

    // Grad buffer, allocated (zeroed) on first access.
    float* grad() {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0f);
        return st_->grad.data();
    }
    std::vector<float>& grad_vec() {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0f);
        return st_->grad;
    }
    void zero_grad() {
        if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0f);
    }

    float item() const {
        if (numel() != 1) throw UsageError("item() requires a scalar tensor, got shape " + shape_str(shape_));
        return st_->data[0];
    }

    // View with a new shape over the same storage. One extent may be -1 and
    // is inferred from the rest.
    Tensor reshaped(std::vector<std::int64_t> new_shape) const {
        std::int64_t known = 1;
        int wild = -1;
        for (std::size_t i = 0; i < new_shape.size(); ++i) {
            if (new_shape[i] == -1) {
                if (wild >= 0) throw DimensionError("reshape: more than one -1 extent");
                wild = static_cast<int>(i);
            } else {
                known *= new_shape[i];
            }
        }
        if (wild >= 0) {
            if (known == 0 || numel() % known != 0) {
                throw DimensionError("reshape: cannot infer extent for " + shape_str(new_shape) +
                                     " from " + shape_str(shape_));
            }
            new_shape[static_cast<std::size_t>(wild)] = numel() / known;
            known *= new_shape[static_cast<std::size_t>(wild)];
        }
        if (known != numel()) {
            throw DimensionError("reshape: " + shape_str(shape_) + " has " + std::to_string(numel()) +
                                 " elements, target " + shape_str(new_shape) + " has " + std::to_string(known));
        }
        Tensor t;
        t.st_ = st_;
        t.shape_ = std::move(new_shape);
        return t;
    }

    std::shared_ptr<Storage> storage() const { return st_; }

private:
    std::shared_ptr<Storage> st_;
    std::vector<std::int64_t> shape_;
};

inline Tensor runiform(Rng& rng, std::vector<std::int64_t> shape, float lo, float hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<float>(rng.uniform_in(lo, hi));
    return t;
}

inline Tensor rnormal(Rng& rng, std::vector<std::int64_t> shape, float mean = 0.0f, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = mean + stddev * rng.normal_float();
    return t;
}

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// their closures in exact reverse order. Leaf gradients accumulate additively
// across backward() calls; intermediate gradients are reset on each call.
class Graph {
public:
    explicit Graph(bool enabled = true) : enabled_(enabled) {}

    bool enabled() const { return enabled_; }

    void record(const char* op, std::shared_ptr<Storage> out, std::function<void()> fn) {
        nodes_.push_back(Node{op, std::move(out), std::move(fn)});
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw UsageError("backward: loss must be a scalar tensor, got shape " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
        }
        for (auto& n : nodes_) n.out->grad.assign(n.out->data.size(), 0.0f);
        auto ls = loss.storage();
        if (ls->grad.empty()) ls->grad.assign(ls->data.size(), 0.0f);
        ls->grad[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        const char* op;
        std::shared_ptr<Storage> out;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    bool enabled_ = true;
};

// Grad buffer of a storage, allocated on first touch. Used inside backward
// closures so untouched buffers stay unallocated.
inline float* acc_grad(Storage& s) {
    if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0f);
    return s.grad.data();
}

inline bool check_finite_enabled() {
    static const bool v = [] {
        const char* e = std::getenv("HSNC_CHECK_FINITE");
        return e != nullptr && e[0] != '\0' && std::string(e) != "0";
    }();
    return v;
}

inline void maybe_check_finite(const Tensor& t, const char* op) {
    if (!check_finite_enabled()) return;
    for (float v : t.vec()) {
        if (!std::isfinite(v)) throw TrainingFault(std::string("non-finite value in output of ") + op);
    }
}

} // namespace hsnc
