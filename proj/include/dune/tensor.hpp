#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dune/error.hpp"
#include "dune/rng.hpp"

namespace dune {

class Tape;

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad; // allocated lazily by Tape::backward
    bool requires_grad = false;
    std::uint64_t visit_epoch = 0;
    const Tape* tape = nullptr; // tape this node was recorded on, if any
};

using ImplPtr = std::shared_ptr<TensorImpl>;

} // namespace detail

// Dense row-major tensor of 64-bit floats with value semantics on the handle
// (copies share the underlying buffer). Gradients live in a same-shape buffer
// populated by Tape::backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> v);
    // leaf that participates in autodiff
    static Tensor parameter(std::vector<std::size_t> shape, std::vector<double> v);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->values.size(); }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    double item() const; // scalar tensors only
    double operator()(std::size_t i) const { return impl_->values[i]; }
    double operator()(std::size_t i, std::size_t j) const;
    double& at(std::size_t i, std::size_t j);

    // deep copy with no autodiff linkage
    Tensor clone() const;
    // true if shape and every value compare equal with ==
    bool equals_bitwise(const Tensor& other) const;

    bool all_finite() const;

    std::string shape_str() const;

    detail::ImplPtr impl() const { return impl_; }

private:
    explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
    detail::ImplPtr impl_;

    friend class Tape;
};

// Wengert list: ordered record of executed operations. Execution order is a
// topological order, so replaying the adjoint closures in reverse visits every
// recorded node exactly once. The tape is per-training-step and explicitly
// reset by its owner.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    void record(std::vector<detail::ImplPtr> touched, std::function<void()> adjoint);

    // Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order. All
    // grad buffers touched by this tape are zeroed first, so replaying twice
    // without mutation yields bitwise-identical gradients. The tape itself is
    // left intact; call clear() to reset it.
    void backward(const Tensor& loss);

    void clear();
    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        std::vector<detail::ImplPtr> touched;
        std::function<void()> adjoint;
    };
    std::vector<Entry> entries_;
};

// Makes `tape` the recording target for ops executed in this scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Suppresses recording (frozen teacher forwards, finite-difference probes).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
};

Tape* active_tape();
bool grad_enabled();

// When on, every op asserts its outputs are finite and throws otherwise.
void set_finite_checks(bool on);
bool finite_checks();

// --- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor rsub_scalar(double c, const Tensor& a); // c - a

// broadcasting a row vector v[n] over the rows of a[m x n]
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor mul_rowvec(const Tensor& a, const Tensor& v);

// copy with a new shape of equal element count; identity adjoint
Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape);

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor transpose(const Tensor& a);

// numerically stabilized by max-subtraction; outputs sum to 1 along `axis`
Tensor softmax(const Tensor& a, std::size_t axis);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
// with sqrt(2/pi) = 0.7978845608028654
Tensor gelu(const Tensor& a);

// per-vector zero mean / unit variance over the last axis, then affine
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

Tensor sum_all(const Tensor& a);  // -> scalar
Tensor mean_all(const Tensor& a); // -> scalar
Tensor sqrt(const Tensor& a);     // adjoint clamps the denominator at 2e-12
Tensor clamp_min(const Tensor& a, double lo);

// non-overlapping ps x ps patches of image[C x S x S], each flattened in
// (channel, py, px) order; patches ordered row-major over the grid
Tensor extract_patches(const Tensor& image, std::size_t patch_size);

// bilinear resize of a patch-token grid [h*w x d] -> [h2*w2 x d]
// (align-corners mapping; constant fields are preserved bitwise)
Tensor resize_bilinear_grid(const Tensor& patches, std::size_t h, std::size_t w,
                            std::size_t h2, std::size_t w2);

// mean over coordinates of the elementwise Huber penalty
//   0.5 d^2        if |d| < 1
//   |d| - 0.5      otherwise,   d = s - t
Tensor smooth_l1(const Tensor& s, const Tensor& t);

// mean over rows of -log softmax(logits)[label]; labels are class indices
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels);

// --- backward & verification ------------------------------------------------

// Replays adjoints for a scalar loss recorded on `tape`.
void backward(const Tensor& loss, Tape& tape);

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |numeric| + 1e-12). `f` must produce a scalar from x and be
// evaluable repeatedly; x is restored on exit.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step);

// init helpers
Tensor trunc_normal_tensor(std::vector<std::size_t> shape, double sigma, Rng& rng);

} // namespace dune
