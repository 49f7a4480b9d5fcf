#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "boottod/common.hpp"
#include "boottod/rng.hpp"

namespace boottod {

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copying a Tensor copies the handle,
/// not the storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        return make(std::move(shape), v, requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        Tensor t = make({1}, v, requires_grad);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->value) v = rng.gaussian(0.0, stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t ndim() const { return node_->shape.size(); }

    // 2D view: all leading dims collapsed into rows, last dim = cols.
    std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }

    std::vector<double> grad_or_zero() const {
        if (!node_->grad.empty()) return node_->grad;
        return std::vector<double>(node_->value.size(), 0.0);
    }

    void clear_grad() { node_->grad.clear(); }

    Tensor clone() const {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>(*node_);
        t.node_->grad.clear();
        return t;
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    static Tensor make(Shape shape, double fill, bool requires_grad) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->value.assign(shape_numel(shape), fill);
        t.node_->shape = std::move(shape);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

/// Wengert list of executed differentiable ops. Construction makes the tape
/// active for the current thread; ops record themselves while any tape is
/// active and an input requires gradients. backward() replays the list once,
/// in reverse execution order; a second backward() on the same tape throws.
class Tape {
public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    // Mutable slot so NoGradGuard can suspend recording for a scope.
    static Tape*& active_slot() { return active_; }

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return ops_.size(); }

    void backward(const Tensor& loss) {
        if (consumed_) throw NumericError("backward called twice on the same tape");
        if (loss.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        auto node = loss.node();
        node->ensure_grad();
        node->grad[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        consumed_ = true;
    }

private:
    static thread_local Tape* active_;
    Tape* prev_ = nullptr;
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

inline thread_local Tape* Tape::active_ = nullptr;

/// Suppresses tape recording for its scope (used by finite-difference
/// evaluation and eval-mode forwards inside a training step).
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape::active_slot()) { Tape::active_slot() = nullptr; }
    ~NoGradGuard() { Tape::active_slot() = saved_; }

    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void record(Tensor& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    Tape::active()->record(std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
    // Exact shape match or scalar broadcast only; anything else is an error.
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar))
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));

    const Tensor& big = a_scalar && !b_scalar ? b : a;
    Tensor out = Tensor::zeros(big.shape());
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinaryKind::Add: ov[i] = x + y; break;
            case BinaryKind::Sub: ov[i] = x - y; break;
            case BinaryKind::Mul: ov[i] = x * y; break;
        }
    }
    check_finite(out, name);

    if (should_record({&a, &b})) {
        record(out, [an = a.node(), bn = b.node(), on = out.node(), kind, a_scalar, b_scalar] {
            if (on->grad.empty()) return;
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double g = on->grad[i];
                    if (kind == BinaryKind::Mul) g *= bn->value[b_scalar ? 0 : i];
                    an->grad[a_scalar ? 0 : i] += g;
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double g = on->grad[i];
                    if (kind == BinaryKind::Mul) g *= an->value[a_scalar ? 0 : i];
                    else if (kind == BinaryKind::Sub) g = -g;
                    bn->grad[b_scalar ? 0 : i] += g;
                }
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::Add, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::Sub, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::Mul, "mul");
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * s;
    detail::check_finite(out, "scale");
    if (detail::should_record({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), s] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += s * on->grad[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < a.numel(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    if (detail::should_record({&a})) {
        detail::record(out, [an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

/// Inverted dropout: each element dropped with probability p, survivors
/// scaled by 1/(1-p). Identity in eval mode.
inline Tensor dropout(const Tensor& a, double p, bool train_mode, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
    if (!train_mode || p == 0.0) return a;
    auto mask = std::make_shared<std::vector<double>>(a.numel());
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : *mask) m = rng.uniform() < p ? 0.0 : keep_scale;

    Tensor out = Tensor::zeros(a.shape());
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * (*mask)[i];
    detail::check_finite(out, "dropout");
    if (detail::should_record({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), mask] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += (*mask)[i] * on->grad[i];
        });
    }
    return out;
}

/// Adds a length-d vector to every row of x (bias broadcast over the last
/// dimension).
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (b.ndim() != 1 || b.numel() != x.cols())
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    auto xv = x.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * cols + c] + bv[c];
    detail::check_finite(out, "add_bias");
    if (detail::should_record({&x, &b})) {
        detail::record(out, [xn = x.node(), bn = b.node(), on = out.node(), rows, cols] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

/// a viewed as [M x K] (leading dims collapsed) times 2-D b [K x N].
/// Output keeps a's leading dims with the last dim replaced by N.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() != 2 || a.cols() != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[1];
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(std::move(out_shape));

    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = av + i * k;
        double* orow = ov + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aval = arow[p];
            if (aval == 0.0) continue;
            const double* brow = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    detail::check_finite(out, "matmul");

    if (detail::should_record({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            if (on->grad.empty()) return;
            const double* gv = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA[i,p] += sum_j G[i,j] * B[p,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = gv + i * n;
                    double* darow = an->grad.data() + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = bn->value.data() + p * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        darow[p] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB[p,j] += sum_i A[i,p] * G[i,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = an->value.data() + i * k;
                    const double* grow = gv + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aval = arow[p];
                        if (aval == 0.0) continue;
                        double* dbrow = bn->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) dbrow[j] += aval * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    auto av = a.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (detail::should_record({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), m, n] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                         " changes element count");
    Tensor out = Tensor::from(std::move(new_shape), {a.data().begin(), a.data().end()});
    if (detail::should_record({&a})) {
        detail::record(out, [an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gather / slice / concat (2-D view)
// ---------------------------------------------------------------------------

/// Rows of x (2-D view) at the given indices; also serves as the embedding
/// lookup. Backward scatter-adds into the source rows.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    const std::size_t rows = x.rows(), cols = x.cols();
    for (auto idx : indices) {
        if (idx >= rows)
            throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range [0, " +
                             std::to_string(rows) + ")");
    }
    Tensor out = Tensor::zeros({indices.size(), cols});
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(xv.begin() + indices[i] * cols, cols, ov.begin() + i * cols);
    if (detail::should_record({&x})) {
        detail::record(out, [xn = x.node(), on = out.node(), indices, cols] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < indices.size(); ++i) {
                double* dst = xn->grad.data() + indices[i] * cols;
                const double* src = on->grad.data() + i * cols;
                for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    const std::size_t rows = x.rows(), cols = x.cols();
    if (r0 > r1 || r1 > rows) throw ShapeError("slice_rows: bad range on " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({r1 - r0, cols});
    std::copy_n(x.data().begin() + r0 * cols, (r1 - r0) * cols, out.mutable_data().begin());
    if (detail::should_record({&x})) {
        detail::record(out, [xn = x.node(), on = out.node(), r0, cols] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[r0 * cols + i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    const std::size_t rows = x.rows(), cols = x.cols();
    if (c0 > c1 || c1 > cols) throw ShapeError("slice_cols: bad range on " + shape_str(x.shape()));
    const std::size_t w = c1 - c0;
    Tensor out = Tensor::zeros({rows, w});
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(xv.begin() + r * cols + c0, w, ov.begin() + r * w);
    if (detail::should_record({&x})) {
        detail::record(out, [xn = x.node(), on = out.node(), rows, cols, c0, w] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < w; ++c)
                    xn->grad[r * cols + c0 + c] += on->grad[r * w + c];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
        total += p.cols();
    }
    Tensor out = Tensor::zeros({rows, total});
    auto ov = out.mutable_data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        auto pv = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(pv.begin() + r * w, w, ov.begin() + r * total + off);
        off += w;
    }
    bool rec = false;
    for (const auto& p : parts) rec = rec || p.requires_grad();
    if (Tape::active() && rec) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        detail::record(out, [nodes, on = out.node(), rows, total] {
            if (on->grad.empty()) return;
            std::size_t off = 0;
            for (auto& pn : nodes) {
                const std::size_t w = pn->value.size() / rows;
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c)
                            pn->grad[r * w + c] += on->grad[r * total + off + c];
                }
                off += w;
            }
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, cols});
    auto ov = out.mutable_data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data().begin(), p.numel(), ov.begin() + off);
        off += p.numel();
    }
    bool rec = false;
    for (const auto& p : parts) rec = rec || p.requires_grad();
    if (Tape::active() && rec) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        detail::record(out, [nodes, on = out.node()] {
            if (on->grad.empty()) return;
            std::size_t off = 0;
            for (auto& pn : nodes) {
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < pn->grad.size(); ++i)
                        pn->grad[i] += on->grad[off + i];
                }
                off += pn->value.size();
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax / losses
// ---------------------------------------------------------------------------

/// Per-row zero-mean unit-variance normalization over the last dimension,
/// followed by the affine map gain * xhat + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
    const std::size_t rows = x.rows();
    Tensor out = Tensor::zeros(x.shape());
    auto xerr = std::make_shared<std::vector<double>>(x.numel());   // x - mu
    auto rstd = std::make_shared<std::vector<double>>(rows);        // 1/sqrt(var+eps)
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += row[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double e = row[c] - mu;
            (*xerr)[r * d + c] = e;
            var += e * e;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t c = 0; c < d; ++c)
            ov[r * d + c] = gv[c] * (*xerr)[r * d + c] * rs + bv[c];
    }
    detail::check_finite(out, "layer_norm");

    if (detail::should_record({&x, &gain, &bias})) {
        detail::record(out, [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
                             xerr, rstd, rows, d] {
            if (on->grad.empty()) return;
            const double dd = static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double rs = (*rstd)[r];
                const double* go = on->grad.data() + r * d;
                const double* e = xerr->data() + r * d;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t c = 0; c < d; ++c) gn->grad[c] += go[c] * e[c] * rs;
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t c = 0; c < d; ++c) bn->grad[c] += go[c];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    // dxhat = go * gain; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const double dxh = go[c] * gn->value[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * e[c] * rs;
                    }
                    for (std::size_t c = 0; c < d; ++c) {
                        const double dxh = go[c] * gn->value[c];
                        const double xhat = e[c] * rs;
                        xn->grad[r * d + c] +=
                            rs * (dxh - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd);
                    }
                }
            }
        });
    }
    return out;
}

/// Row-wise softmax where only columns with allowed[c] != 0 participate.
/// Disallowed columns get probability exactly zero, which keeps padded
/// positions from perturbing attention at all.
inline Tensor softmax_rows_masked(const Tensor& scores, const std::vector<std::uint8_t>& allowed) {
    const std::size_t rows = scores.rows(), cols = scores.cols();
    if (allowed.size() != cols)
        throw ShapeError("softmax_rows_masked: mask length " + std::to_string(allowed.size()) +
                         " vs " + std::to_string(cols) + " columns");
    bool any = false;
    for (auto a : allowed) any = any || (a != 0);
    if (!any) throw ShapeError("softmax_rows_masked: no allowed columns");

    Tensor out = Tensor::zeros(scores.shape());
    auto sv = scores.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = sv.data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (allowed[c] && row[c] > mx) mx = row[c];
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!allowed[c]) continue;
            const double e = std::exp(row[c] - mx);
            ov[r * cols + c] = e;
            z += e;
        }
        for (std::size_t c = 0; c < cols; ++c)
            if (allowed[c]) ov[r * cols + c] /= z;
    }
    detail::check_finite(out, "softmax_rows_masked");

    if (detail::should_record({&scores})) {
        detail::record(out, [sn = scores.node(), on = out.node(), allowed, rows, cols] {
            if (on->grad.empty()) return;
            sn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * cols;
                const double* gy = on->grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    if (allowed[c]) dot += gy[c] * y[c];
                for (std::size_t c = 0; c < cols; ++c)
                    if (allowed[c]) sn->grad[r * cols + c] += y[c] * (gy[c] - dot);
            }
        });
    }
    return out;
}

/// Mean over rows of -log softmax(logits)[target]; max-subtraction
/// stabilized.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
    if (logits.ndim() != 2)
        throw ShapeError("softmax_cross_entropy expects 2-D logits, got " + shape_str(logits.shape()));
    const std::size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    for (auto t : targets) {
        if (t >= v)
            throw ShapeError("softmax_cross_entropy: target index " + std::to_string(t) +
                             " out of range [0, " + std::to_string(v) + ")");
    }
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    auto lv = logits.data();
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = lv.data() + r * v;
        double mx = row[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
            const double e = std::exp(row[c] - mx);
            (*probs)[r * v + c] = e;
            z += e;
        }
        for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= z;
        loss += -(row[targets[r]] - mx - std::log(z));
    }
    loss /= static_cast<double>(n);
    Tensor out = Tensor::scalar(loss);
    detail::check_finite(out, "softmax_cross_entropy");

    if (detail::should_record({&logits})) {
        detail::record(out, [ln = logits.node(), on = out.node(), probs, targets, n, v] {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const double g = on->grad[0] / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < v; ++c) {
                    double p = (*probs)[r * v + c];
                    if (c == targets[r]) p -= 1.0;
                    ln->grad[r * v + c] += g * p;
                }
            }
        });
    }
    return out;
}

/// Multi-label binary cross-entropy on logits, mean over all entries.
/// Stable form: max(x,0) - x*t + log(1 + exp(-|x|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
    const std::size_t n = logits.numel();
    if (n == 0) throw ShapeError("bce_with_logits: empty input");
    auto lv = logits.data();
    auto tv = targets.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = lv[i], t = tv[i];
        loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    loss /= static_cast<double>(n);
    Tensor out = Tensor::scalar(loss);
    detail::check_finite(out, "bce_with_logits");
    if (detail::should_record({&logits})) {
        detail::record(out, [ln = logits.node(), tn = targets.node(), on = out.node(), n] {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const double g = on->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-ln->value[i]));
                ln->grad[i] += g * (sig - tn->value[i]);
            }
        });
    }
    return out;
}

/// Euclidean distance between two same-shape tensors (flattened).
/// Subgradient 0 at a == b.
inline Tensor l2_distance(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("l2_distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto av = a.data();
    auto bv = b.data();
    double sq = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = av[i] - bv[i];
        sq += d * d;
    }
    const double dist = std::sqrt(sq);
    Tensor out = Tensor::scalar(dist);
    detail::check_finite(out, "l2_distance");
    if (detail::should_record({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), dist] {
            if (on->grad.empty() || dist == 0.0) return;
            const double g = on->grad[0] / dist;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < an->grad.size(); ++i)
                    an->grad[i] += g * (an->value[i] - bn->value[i]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < bn->grad.size(); ++i)
                    bn->grad[i] -= g * (an->value[i] - bn->value[i]);
            }
        });
    }
    return out;
}

/// Per-row distance between a and b ([N x d] each): Euclidean norm of the
/// row difference, or its square when squared == true. Returns [N].
inline Tensor rowwise_distance(const Tensor& a, const Tensor& b, bool squared = false) {
    if (a.shape() != b.shape() || a.ndim() != 2)
        throw ShapeError("rowwise_distance: expects matching 2-D shapes, got " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    Tensor out = Tensor::zeros({n});
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < n; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double e = av[r * d + c] - bv[r * d + c];
            sq += e * e;
        }
        ov[r] = squared ? sq : std::sqrt(sq);
    }
    detail::check_finite(out, "rowwise_distance");
    if (detail::should_record({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), n, d, squared] {
            if (on->grad.empty()) return;
            for (std::size_t r = 0; r < n; ++r) {
                const double go = on->grad[r];
                if (go == 0.0) continue;
                double coef;
                if (squared) {
                    coef = 2.0 * go;
                } else {
                    const double dist = on->value[r];
                    if (dist == 0.0) continue;  // subgradient 0 at the kink
                    coef = go / dist;
                }
                for (std::size_t c = 0; c < d; ++c) {
                    const double e = an->value[r * d + c] - bn->value[r * d + c];
                    if (an->requires_grad) {
                        an->ensure_grad();
                        an->grad[r * d + c] += coef * e;
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[r * d + c] -= coef * e;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// Reductions accumulate left-to-right in row-major order; this is the
// declared summation order for all batch statistics.
inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::check_finite(out, "sum_all");
    if (detail::should_record({&x})) {
        detail::record(out, [xn = x.node(), on = out.node()] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean_all on empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// stop-gradient
// ---------------------------------------------------------------------------

/// Identity forward (bitwise equal copy); contributes exactly zero gradient
/// to every ancestor of x.
inline Tensor stop_gradient(const Tensor& x) {
    Tensor out = Tensor::from(x.shape(), {x.data().begin(), x.data().end()});
    out.set_requires_grad(false);
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of the analytic gradient of a scalar-valued
/// tensor function at x. Returns max over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5) {
    Tensor xc = x.clone();
    xc.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(xc);
        if (y.numel() != 1)
            throw ShapeError("grad_check requires a scalar-valued function, got " +
                             shape_str(y.shape()));
        tape.backward(y);
        analytic = xc.grad_or_zero();
    }

    double max_rel = 0.0;
    {
        NoGradGuard no_grad;
        auto xd = xc.mutable_data();
        for (std::size_t i = 0; i < xd.size(); ++i) {
            const double orig = xd[i];
            xd[i] = orig + h;
            const double fp = f(xc).item();
            xd[i] = orig - h;
            const double fm = f(xc).item();
            xd[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace boottod
