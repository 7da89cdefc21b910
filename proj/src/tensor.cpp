#include "dune/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace dune {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;
bool g_finite_checks = false;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_finite_or_throw(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw ContractError(std::string("non-finite value produced by ") + op);
    }
}

} // namespace

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    return full(std::move(shape), 0.0);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->values.assign(shape_product(shape), v);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) {
    return from_values({1}, {v});
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> v) {
    if (shape_product(shape) != v.size()) {
        throw DimensionError("value count " + std::to_string(v.size()) +
                             " does not match shape product " + std::to_string(shape_product(shape)));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(v);
    return Tensor(std::move(impl));
}

Tensor Tensor::parameter(std::vector<std::size_t> shape, std::vector<double> v) {
    Tensor t = from_values(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_str());
    return impl_->values[0];
}

double Tensor::operator()(std::size_t i, std::size_t j) const {
    return impl_->values[i * impl_->shape.back() + j];
}

double& Tensor::at(std::size_t i, std::size_t j) {
    return impl_->values[i * impl_->shape.back() + j];
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->values = impl_->values;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

bool Tensor::equals_bitwise(const Tensor& other) const {
    if (shape() != other.shape()) return false;
    const auto& a = values();
    const auto& b = other.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

bool Tensor::all_finite() const {
    for (double x : impl_->values) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < impl_->shape.size(); ++i) {
        if (i) os << "x";
        os << impl_->shape[i];
    }
    os << "]";
    return os.str();
}

// --- Tape -------------------------------------------------------------------

Tape::~Tape() {
    if (g_active_tape == this) g_active_tape = nullptr;
}

void Tape::record(std::vector<detail::ImplPtr> touched, std::function<void()> adjoint) {
    entries_.push_back(Entry{std::move(touched), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + loss.shape_str());
    }
    if (loss.impl()->tape != this) {
        throw ContractError("loss was not recorded on this tape");
    }
    // Zero every grad buffer this tape touches, allocating on first use. The
    // epoch is process-global: tapes are short-lived, so a per-tape counter
    // would collide with marks left on impls by earlier tapes.
    static std::atomic<std::uint64_t> epoch_source{0};
    const std::uint64_t epoch = ++epoch_source;
    for (auto& e : entries_) {
        for (auto& impl : e.touched) {
            if (impl->visit_epoch != epoch) {
                impl->visit_epoch = epoch;
                impl->grad.assign(impl->values.size(), 0.0);
            }
        }
    }
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->adjoint();
    }
}

void Tape::clear() {
    entries_.clear();
}

void backward(const Tensor& loss, Tape& tape) {
    tape.backward(loss);
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) {
    g_active_tape = &tape;
}
TapeScope::~TapeScope() {
    g_active_tape = prev_;
}

NoGradScope::NoGradScope() {
    ++g_no_grad_depth;
}
NoGradScope::~NoGradScope() {
    --g_no_grad_depth;
}

Tape* active_tape() { return g_active_tape; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

// --- op plumbing ------------------------------------------------------------

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr || g_no_grad_depth > 0) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Finalizes an op: marks the output recorded and pushes the adjoint closure.
// `touched` must list the output and every differentiable input.
void finish_op(const char* name, Tensor& out, std::vector<detail::ImplPtr> touched,
               std::function<void()> adjoint) {
    if (g_finite_checks) check_finite_or_throw(out.values(), name);
    out.set_requires_grad(true);
    out.impl()->tape = g_active_tape;
    g_active_tape->record(std::move(touched), std::move(adjoint));
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + " requires a rank-2 tensor, got " + t.shape_str());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + a.shape_str() + " and " + b.shape_str() + " differ");
    }
}

} // namespace

// --- primitive ops ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions disagree, " + a.shape_str() + " x " + b.shape_str());
    }
    Tensor out = Tensor::zeros({m, n});
    {
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* po = out.values().data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = pa[i * k + p];
                const double* brow = pb + p * n;
                double* orow = po + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    if (!recording({&a, &b})) return out;
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    finish_op("matmul", out, {io, ia, ib}, [ia, ib, io, m, k, n]() {
        const double* g = io->grad.data();
        const double* pa = ia->values.data();
        const double* pb = ib->values.data();
        if (!ia->grad.empty()) {
            double* da = ia->grad.data();
            // dA += G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
                    da[i * k + p] += acc;
                }
        }
        if (!ib->grad.empty()) {
            double* db = ib->grad.data();
            // dB += A^T * G
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t i = 0; i < m; ++i) {
                    const double av = pa[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g[i * n + j];
                }
        }
    });
    return out;
}

namespace {

// shared skeleton for elementwise binaries
template <class Fwd, class Adj>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Adj adj) {
    require_same_shape(a, b, name);
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = fwd(a.values()[i], b.values()[i]);
    if (!recording({&a, &b})) return out;
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    Tensor& outref = out;
    finish_op(name, outref, {io, ia, ib}, [ia, ib, io, n, adj]() {
        for (std::size_t i = 0; i < n; ++i) {
            adj(io->grad[i], ia->values[i], ib->values[i],
                ia->grad.empty() ? nullptr : &ia->grad[i],
                ib->grad.empty() ? nullptr : &ib->grad[i]);
        }
    });
    return out;
}

template <class Fwd, class Adj>
Tensor elementwise_unary(const char* name, const Tensor& a, Fwd fwd, Adj adj) {
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = fwd(a.values()[i]);
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op(name, out, {io, ia}, [ia, io, n, adj]() {
        if (ia->grad.empty()) return;
        for (std::size_t i = 0; i < n; ++i) ia->grad[i] += adj(io->grad[i], ia->values[i], io->values[i]);
    });
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double* da, double* db) {
            if (da) *da += g;
            if (db) *db += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double* da, double* db) {
            if (da) *da += g;
            if (db) *db -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double* da, double* db) {
            if (da) *da += g * y;
            if (db) *db += g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double x, double y, double* da, double* db) {
            if (da) *da += g / y;
            if (db) *db -= g * x / (y * y);
        });
}

Tensor scale(const Tensor& a, double c) {
    return elementwise_unary(
        "scale", a, [c](double x) { return x * c; },
        [c](double g, double, double) { return g * c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return elementwise_unary(
        "add_scalar", a, [c](double x) { return x + c; },
        [](double g, double, double) { return g; });
}

Tensor rsub_scalar(double c, const Tensor& a) {
    return elementwise_unary(
        "rsub_scalar", a, [c](double x) { return c - x; },
        [](double g, double, double) { return -g; });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_rank2(a, "add_rowvec");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (v.size() != n) {
        throw DimensionError("add_rowvec: vector " + v.shape_str() + " vs row width " + std::to_string(n));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.values()[i * n + j] = a.values()[i * n + j] + v.values()[j];
    if (!recording({&a, &v})) return out;
    auto ia = a.impl(), iv = v.impl(), io = out.impl();
    finish_op("add_rowvec", out, {io, ia, iv}, [ia, iv, io, m, n]() {
        if (!ia->grad.empty())
            for (std::size_t i = 0; i < m * n; ++i) ia->grad[i] += io->grad[i];
        if (!iv->grad.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) iv->grad[j] += io->grad[i * n + j];
    });
    return out;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    require_rank2(a, "mul_rowvec");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (v.size() != n) {
        throw DimensionError("mul_rowvec: vector " + v.shape_str() + " vs row width " + std::to_string(n));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.values()[i * n + j] = a.values()[i * n + j] * v.values()[j];
    if (!recording({&a, &v})) return out;
    auto ia = a.impl(), iv = v.impl(), io = out.impl();
    finish_op("mul_rowvec", out, {io, ia, iv}, [ia, iv, io, m, n]() {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double g = io->grad[i * n + j];
                if (!ia->grad.empty()) ia->grad[i * n + j] += g * iv->values[j];
                if (!iv->grad.empty()) iv->grad[j] += g * ia->values[i * n + j];
            }
    });
    return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape) {
    if (shape_product(new_shape) != a.size()) {
        throw DimensionError("reshape: element count mismatch, " + a.shape_str());
    }
    Tensor out = Tensor::from_values(std::move(new_shape), a.values());
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("reshape", out, {io, ia}, [ia, io]() {
        if (ia->grad.empty()) return;
        for (std::size_t i = 0; i < ia->grad.size(); ++i) ia->grad[i] += io->grad[i];
    });
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    require_rank2(a, "slice_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (start + count > m) {
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for " + a.shape_str());
    }
    Tensor out = Tensor::zeros({count, n});
    std::copy_n(a.values().begin() + start * n, count * n, out.values().begin());
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("slice_rows", out, {io, ia}, [ia, io, start, count, n]() {
        if (ia->grad.empty()) return;
        for (std::size_t i = 0; i < count * n; ++i) ia->grad[start * n + i] += io->grad[i];
    });
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    require_rank2(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (start + count > n) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for " + a.shape_str());
    }
    Tensor out = Tensor::zeros({m, count});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(a.values().begin() + i * n + start, count, out.values().begin() + i * count);
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("slice_cols", out, {io, ia}, [ia, io, m, n, start, count]() {
        if (ia->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) ia->grad[i * n + start + j] += io->grad[i * count + j];
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input list");
    const std::size_t n = parts[0].shape().back();
    std::size_t m = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.shape()[1] != n) throw DimensionError("concat_rows: column mismatch " + p.shape_str());
        m += p.shape()[0];
    }
    Tensor out = Tensor::zeros({m, n});
    std::size_t row = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.values().begin(), p.size(), out.values().begin() + row * n);
        row += p.shape()[0];
    }
    bool rec = false;
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
    if (!(g_active_tape && g_no_grad_depth == 0 && rec)) return out;
    std::vector<detail::ImplPtr> impls;
    impls.push_back(out.impl());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto io = out.impl();
    std::vector<detail::ImplPtr> inputs(impls.begin() + 1, impls.end());
    finish_op("concat_rows", out, impls, [io, inputs, n]() {
        std::size_t row = 0;
        for (const auto& ip : inputs) {
            const std::size_t rows = ip->values.size() / n;
            if (!ip->grad.empty())
                for (std::size_t i = 0; i < rows * n; ++i) ip->grad[i] += io->grad[row * n + i];
            row += rows;
        }
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input list");
    const std::size_t m = parts[0].shape()[0];
    std::size_t n = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.shape()[0] != m) throw DimensionError("concat_cols: row mismatch " + p.shape_str());
        n += p.shape()[1];
    }
    Tensor out = Tensor::zeros({m, n});
    std::size_t col = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(p.values().begin() + i * w, w, out.values().begin() + i * n + col);
        col += w;
    }
    bool rec = false;
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
    if (!(g_active_tape && g_no_grad_depth == 0 && rec)) return out;
    std::vector<detail::ImplPtr> impls;
    impls.push_back(out.impl());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto io = out.impl();
    std::vector<detail::ImplPtr> inputs(impls.begin() + 1, impls.end());
    finish_op("concat_cols", out, impls, [io, inputs, m, n]() {
        std::size_t col = 0;
        for (const auto& ip : inputs) {
            const std::size_t w = ip->values.size() / m;
            if (!ip->grad.empty())
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) ip->grad[i * w + j] += io->grad[i * n + col + j];
            col += w;
        }
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.values()[j * m + i] = a.values()[i * n + j];
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("transpose", out, {io, ia}, [ia, io, m, n]() {
        if (ia->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ia->grad[i * n + j] += io->grad[j * m + i];
    });
    return out;
}

namespace {

struct AxisView {
    std::size_t outer, len, inner;
};

AxisView axis_view(const Tensor& t, std::size_t axis) {
    if (axis >= t.rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + t.shape_str());
    }
    AxisView v{1, t.shape()[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= t.shape()[i];
    for (std::size_t i = axis + 1; i < t.rank(); ++i) v.inner *= t.shape()[i];
    return v;
}

} // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
    const AxisView v = axis_view(a, axis);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.values().data();
    double* po = out.values().data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t c = 0; c < v.inner; ++c) {
            const std::size_t base = o * v.len * v.inner + c;
            double mx = pa[base];
            for (std::size_t i = 1; i < v.len; ++i) mx = std::max(mx, pa[base + i * v.inner]);
            double denom = 0.0;
            for (std::size_t i = 0; i < v.len; ++i) {
                const double e = std::exp(pa[base + i * v.inner] - mx);
                po[base + i * v.inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < v.len; ++i) po[base + i * v.inner] /= denom;
        }
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("softmax", out, {io, ia}, [ia, io, v]() {
        if (ia->grad.empty()) return;
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t c = 0; c < v.inner; ++c) {
                const std::size_t base = o * v.len * v.inner + c;
                double dot = 0.0;
                for (std::size_t i = 0; i < v.len; ++i) {
                    const std::size_t ix = base + i * v.inner;
                    dot += io->grad[ix] * io->values[ix];
                }
                for (std::size_t i = 0; i < v.len; ++i) {
                    const std::size_t ix = base + i * v.inner;
                    ia->grad[ix] += io->values[ix] * (io->grad[ix] - dot);
                }
            }
    });
    return out;
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
} // namespace

Tensor gelu(const Tensor& a) {
    return elementwise_unary(
        "gelu", a,
        [](double x) {
            const double t = std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x));
            return 0.5 * x * (1.0 + t);
        },
        [](double g, double x, double) {
            const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
            return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
        });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw DimensionError("layernorm: rank-0 input");
    const std::size_t d = x.shape().back();
    if (d == 0) throw DimensionError("layernorm: empty last axis");
    if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
    if (gamma.size() != d || beta.size() != d) {
        throw DimensionError("layernorm: gamma " + gamma.shape_str() + " / beta " + beta.shape_str() +
                             " vs axis width " + std::to_string(d));
    }
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    // per-row mean/invstd retained for the adjoint
    std::vector<double> mean(rows), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.values().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += px[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = px[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        double* po = out.values().data() + r * d;
        for (std::size_t j = 0; j < d; ++j) po[j] = gamma.values()[j] * ((px[j] - mu) * is) + beta.values()[j];
    }
    if (!recording({&x, &gamma, &beta})) return out;
    auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl(), io = out.impl();
    finish_op("layernorm", out, {io, ix, ig, ib},
              [ix, ig, ib, io, rows, d, mean = std::move(mean), inv_std = std::move(inv_std)]() {
                  for (std::size_t r = 0; r < rows; ++r) {
                      const double* px = ix->values.data() + r * d;
                      const double* g = io->grad.data() + r * d;
                      const double mu = mean[r];
                      const double is = inv_std[r];
                      // dgamma / dbeta
                      if (!ig->grad.empty())
                          for (std::size_t j = 0; j < d; ++j) ig->grad[j] += g[j] * (px[j] - mu) * is;
                      if (!ib->grad.empty())
                          for (std::size_t j = 0; j < d; ++j) ib->grad[j] += g[j];
                      if (ix->grad.empty()) continue;
                      // dxhat = g * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                          const double xhat = (px[j] - mu) * is;
                          const double dxh = g[j] * ig->values[j];
                          sum_dxhat += dxh;
                          sum_dxhat_xhat += dxh * xhat;
                      }
                      const double inv_d = 1.0 / static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                          const double xhat = (px[j] - mu) * is;
                          const double dxh = g[j] * ig->values[j];
                          ix->grad[r * d + j] +=
                              is * (dxh - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                      }
                  }
              });
    return out;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    Tensor out = Tensor::scalar(s);
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("sum", out, {io, ia}, [ia, io]() {
        if (ia->grad.empty()) return;
        const double g = io->grad[0];
        for (double& d : ia->grad) d += g;
    });
    return out;
}

Tensor mean_all(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double x : a.values()) s += x;
    Tensor out = Tensor::scalar(s * inv_n);
    if (!recording({&a})) return out;
    auto ia = a.impl(), io = out.impl();
    finish_op("mean", out, {io, ia}, [ia, io, inv_n]() {
        if (ia->grad.empty()) return;
        const double g = io->grad[0] * inv_n;
        for (double& d : ia->grad) d += g;
    });
    return out;
}

Tensor sqrt(const Tensor& a) {
    return elementwise_unary(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double g, double, double y) { return g / std::max(2.0 * y, 2e-12); });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return elementwise_unary(
        "clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
        [lo](double g, double x, double) { return x < lo ? 0.0 : g; });
}

Tensor extract_patches(const Tensor& image, std::size_t patch_size) {
    if (image.rank() != 3) throw DimensionError("extract_patches expects [C x S x S], got " + image.shape_str());
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
    if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0) {
        throw DimensionError("extract_patches: image " + image.shape_str() + " not divisible by patch size " +
                             std::to_string(patch_size));
    }
    const std::size_t gh = h / patch_size, gw = w / patch_size;
    const std::size_t pdim = c * patch_size * patch_size;
    Tensor out = Tensor::zeros({gh * gw, pdim});
    const double* pi = image.values().data();
    double* po = out.values().data();
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double* dst = po + (gy * gw + gx) * pdim;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < patch_size; ++py)
                    for (std::size_t px = 0; px < patch_size; ++px)
                        *dst++ = pi[ch * h * w + (gy * patch_size + py) * w + (gx * patch_size + px)];
        }
    if (!recording({&image})) return out;
    auto ii = image.impl(), io = out.impl();
    finish_op("extract_patches", out, {io, ii}, [ii, io, c, h, w, gh, gw, patch_size, pdim]() {
        if (ii->grad.empty()) return;
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx) {
                const double* src = io->grad.data() + (gy * gw + gx) * pdim;
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t py = 0; py < patch_size; ++py)
                        for (std::size_t px = 0; px < patch_size; ++px)
                            ii->grad[ch * h * w + (gy * patch_size + py) * w + (gx * patch_size + px)] += *src++;
            }
    });
    return out;
}

namespace {

// align-corners source coordinate and lerp weight for one output index
void bilinear_axis(std::size_t out_i, std::size_t out_n, std::size_t in_n, std::size_t& i0,
                   std::size_t& i1, double& frac) {
    if (in_n == 1 || out_n == 1) {
        // degenerate axis: align-corners scale is 0, everything reads index 0
        i0 = i1 = 0;
        frac = 0.0;
        return;
    }
    const double src = static_cast<double>(out_i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
    i0 = static_cast<std::size_t>(src);
    if (i0 >= in_n - 1) i0 = in_n - 2;
    i1 = i0 + 1;
    frac = src - static_cast<double>(i0);
}

inline double lerp_exact(double a, double b, double t) { return a + t * (b - a); }

} // namespace

Tensor resize_bilinear_grid(const Tensor& patches, std::size_t h, std::size_t w, std::size_t h2,
                            std::size_t w2) {
    require_rank2(patches, "resize_bilinear_grid");
    const std::size_t d = patches.shape()[1];
    if (patches.shape()[0] != h * w) {
        throw DimensionError("resize_bilinear_grid: " + patches.shape_str() + " vs grid " + std::to_string(h) +
                             "x" + std::to_string(w));
    }
    if (h == 0 || w == 0 || h2 == 0 || w2 == 0) throw ContractError("resize_bilinear_grid: empty grid");
    if (h == h2 && w == w2) return patches; // identity, bitwise

    Tensor out = Tensor::zeros({h2 * w2, d});
    const double* pin = patches.values().data();
    double* pout = out.values().data();
    for (std::size_t y = 0; y < h2; ++y) {
        std::size_t y0, y1;
        double fy;
        bilinear_axis(y, h2, h, y0, y1, fy);
        for (std::size_t x = 0; x < w2; ++x) {
            std::size_t x0, x1;
            double fx;
            bilinear_axis(x, w2, w, x0, x1, fx);
            const double* p00 = pin + (y0 * w + x0) * d;
            const double* p01 = pin + (y0 * w + x1) * d;
            const double* p10 = pin + (y1 * w + x0) * d;
            const double* p11 = pin + (y1 * w + x1) * d;
            double* dst = pout + (y * w2 + x) * d;
            // nested lerps preserve constant fields bitwise
            for (std::size_t ch = 0; ch < d; ++ch)
                dst[ch] = lerp_exact(lerp_exact(p00[ch], p01[ch], fx), lerp_exact(p10[ch], p11[ch], fx), fy);
        }
    }
    if (!recording({&patches})) return out;
    auto ii = patches.impl(), io = out.impl();
    finish_op("resize_bilinear_grid", out, {io, ii}, [ii, io, h, w, h2, w2, d]() {
        if (ii->grad.empty()) return;
        for (std::size_t y = 0; y < h2; ++y) {
            std::size_t y0, y1;
            double fy;
            bilinear_axis(y, h2, h, y0, y1, fy);
            for (std::size_t x = 0; x < w2; ++x) {
                std::size_t x0, x1;
                double fx;
                bilinear_axis(x, w2, w, x0, x1, fx);
                const double* g = io->grad.data() + (y * w2 + x) * d;
                double* g00 = ii->grad.data() + (y0 * w + x0) * d;
                double* g01 = ii->grad.data() + (y0 * w + x1) * d;
                double* g10 = ii->grad.data() + (y1 * w + x0) * d;
                double* g11 = ii->grad.data() + (y1 * w + x1) * d;
                for (std::size_t ch = 0; ch < d; ++ch) {
                    g00[ch] += g[ch] * (1.0 - fx) * (1.0 - fy);
                    g01[ch] += g[ch] * fx * (1.0 - fy);
                    g10[ch] += g[ch] * (1.0 - fx) * fy;
                    g11[ch] += g[ch] * fx * fy;
                }
            }
        }
    });
    return out;
}

Tensor smooth_l1(const Tensor& s, const Tensor& t) {
    require_same_shape(s, t, "smooth_l1");
    const std::size_t n = s.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = s.values()[i] - t.values()[i];
        acc += (std::fabs(d) < 1.0) ? 0.5 * d * d : std::fabs(d) - 0.5;
    }
    Tensor out = Tensor::scalar(acc * inv_n);
    if (!recording({&s, &t})) return out;
    auto is = s.impl(), it = t.impl(), io = out.impl();
    finish_op("smooth_l1", out, {io, is, it}, [is, it, io, n, inv_n]() {
        const double g = io->grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = is->values[i] - it->values[i];
            const double dd = std::clamp(d, -1.0, 1.0);
            if (!is->grad.empty()) is->grad[i] += g * dd;
            if (!it->grad.empty()) it->grad[i] -= g * dd;
        }
    });
    return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels) {
    require_rank2(logits, "cross_entropy_rows");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (labels.size() != m) {
        throw DimensionError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(m) + " rows");
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    std::vector<double> probs(m * n);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits.values().data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(row[j] - mx);
            denom += probs[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= denom;
        if (labels[i] >= n) throw ContractError("cross_entropy_rows: label out of range");
        loss -= std::log(std::max(probs[i * n + labels[i]], 1e-300));
    }
    Tensor out = Tensor::scalar(loss * inv_m);
    if (!recording({&logits})) return out;
    auto il = logits.impl(), io = out.impl();
    finish_op("cross_entropy_rows", out, {io, il},
              [il, io, m, n, inv_m, probs = std::move(probs), labels]() {
                  if (il->grad.empty()) return;
                  const double g = io->grad[0] * inv_m;
                  for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                          il->grad[i * n + j] += g * (probs[i * n + j] - (labels[i] == j ? 1.0 : 0.0));
              });
    return out;
}

// --- verification -----------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step) {
    if (step <= 0.0) throw ContractError("finite_diff_check: step must be positive");
    const bool was_requiring = x.requires_grad();
    x.set_requires_grad(true);

    Tape tape;
    std::vector<double> analytic(x.size(), 0.0);
    {
        TapeScope scope(tape);
        Tensor loss = f(x);
        if (loss.size() != 1) throw ContractError("finite_diff_check: f must return a scalar");
        tape.backward(loss);
        if (x.has_grad()) analytic = x.grad();
    }

    double max_rel = 0.0;
    {
        NoGradScope ng;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x.values()[i];
            x.values()[i] = orig + step;
            const double fp = f(x).item();
            x.values()[i] = orig - step;
            const double fm = f(x).item();
            x.values()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double rel =
                std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + std::fabs(numeric) + 1e-12);
            max_rel = std::max(max_rel, rel);
        }
    }
    x.set_requires_grad(was_requiring);
    return max_rel;
}

Tensor trunc_normal_tensor(std::vector<std::size_t> shape, double sigma, Rng& rng) {
    const std::size_t n = shape_product(shape);
    std::vector<double> v(n);
    for (double& x : v) x = rng.truncated_normal(sigma);
    return Tensor::from_values(std::move(shape), std::move(v));
}

} // namespace dune
