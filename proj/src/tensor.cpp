#include "dcl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dcl {

namespace {

thread_local Tape* g_active_tape = nullptr;

size_t numel_of(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

void check_shape(const char* op, const std::vector<size_t>& shape) {
    for (size_t d : shape)
        if (d == 0)
            throw std::invalid_argument(std::string(op) + ": zero-length dimension in " +
                                        shape_string(shape));
}

void check_valid(const char* op, const Tensor& t) {
    if (!t.valid()) throw std::invalid_argument(std::string(op) + ": empty tensor handle");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    check_valid(op, a);
    check_valid(op, b);
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void check_rank2(const char* op, const Tensor& t) {
    check_valid(op, t);
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected rank-2, got " +
                                    shape_string(t.shape()));
}

#if !defined(NDEBUG) || defined(DCL_FINITE_CHECKS)
void check_finite(const char* op, const Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i]))
            throw std::runtime_error(std::string(op) + ": non-finite output at flat index " +
                                     std::to_string(i));
}
#define DCL_FINITE(op, t) check_finite(op, t)
#else
#define DCL_FINITE(op, t) ((void)0)
#endif

// C[m x n] = A[m x k] * B[k x n] (+= when acc).
void mm_nn(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc) {
    if (!acc) std::fill(C, C + m * n, 0.0);
    for (size_t i = 0; i < m; ++i) {
        double* Crow = C + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            const double* Brow = B + p * n;
            for (size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B[n x k]^T (+= when acc).
void mm_nt(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const double* Arow = A + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* Brow = B + j * k;
            double s = 0.0;
            for (size_t p = 0; p < k; ++p) s += Arow[p] * Brow[p];
            if (acc)
                C[i * n + j] += s;
            else
                C[i * n + j] = s;
        }
    }
}

// C[m x n] = A[k x m]^T * B[k x n] (+= when acc).
void mm_tn(const double* A, const double* B, double* C, size_t k, size_t m, size_t n, bool acc) {
    if (!acc) std::fill(C, C + m * n, 0.0);
    for (size_t p = 0; p < k; ++p) {
        const double* Arow = A + p * m;
        const double* Brow = B + p * n;
        for (size_t i = 0; i < m; ++i) {
            double av = Arow[i];
            double* Crow = C + i * n;
            for (size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
        }
    }
}

Tensor make(std::vector<size_t> shape) {
    auto s = std::make_shared<detail::Storage>();
    s->data.assign(numel_of(shape), 0.0);
    return Tensor::with_storage(std::move(shape), std::move(s));
}

bool want_tape(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

double sigmoid_val(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

const double kInvSqrt2 = 0.70710678118654752440;
const double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_deriv(double x, double /*y*/) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

double sigmoid_deriv(double /*x*/, double y) { return y * (1.0 - y); }

double abs_deriv(double x, double /*y*/) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

Tensor unary(const char* name, const Tensor& a, double (*fwd)(double),
             double (*deriv)(double, double)) {
    check_valid(name, a);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = fwd(a[i]);
    DCL_FINITE(name, out);
    if (want_tape({&a})) {
        out.set_requires_grad(true);
        g_active_tape->record(name, {a, out}, [a, out, deriv]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& ga = a.storage()->grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += deriv(a[i], out[i]) * g[i];
        });
    }
    return out;
}

}  // namespace

std::string shape_string(const std::vector<size_t>& shape) {
    if (shape.empty()) return "[scalar]";
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

double Tensor::value() const {
    if (!store_ || store_->data.size() != 1)
        throw std::runtime_error("value(): tensor has " + std::to_string(size()) +
                                 " elements, expected 1");
    return store_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (!store_) throw std::runtime_error("grad(): empty tensor handle");
    return store_->grad;
}

Tensor Tensor::reshaped(std::vector<size_t> new_shape) const {
    check_valid("reshaped", *this);
    check_shape("reshaped", new_shape);
    if (numel_of(new_shape) != size())
        throw std::invalid_argument("reshaped: cannot view " + shape_string(shape_) + " as " +
                                    shape_string(new_shape));
    return with_storage(std::move(new_shape), store_);
}

// ---- tape ----

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::initializer_list<Tensor> touched,
                  std::function<void()> rule) {
    for (const Tensor& t : touched) {
        if (!t.valid()) continue;
        if (touched_set_.insert(t.storage().get()).second) touched_.push_back(t.storage());
    }
    nodes_.push_back(Node{op, std::move(rule)});
}

void Tape::record(const char* op, const std::vector<Tensor>& touched,
                  std::function<void()> rule) {
    for (const Tensor& t : touched) {
        if (!t.valid()) continue;
        if (touched_set_.insert(t.storage().get()).second) touched_.push_back(t.storage());
    }
    nodes_.push_back(Node{op, std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
    check_valid("backward", loss);
    if (loss.size() != 1)
        throw std::runtime_error("backward: loss must be a single value, got " +
                                 shape_string(loss.shape()));
    if (!contains(loss))
        throw std::runtime_error("backward: loss was not computed on this tape");
    for (const auto& s : touched_)
        if (s->requires_grad) s->grad.assign(s->data.size(), 0.0);
    loss.storage()->grad[0] = 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) nodes_[i].rule();
}

// ---- construction ----

Tensor zeros(std::vector<size_t> shape) {
    check_shape("zeros", shape);
    return make(std::move(shape));
}

Tensor full(std::vector<size_t> shape, double value) {
    check_shape("full", shape);
    Tensor t = make(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor scalar(double value) {
    Tensor t = make({});
    t[0] = value;
    return t;
}

Tensor from_data(std::vector<size_t> shape, std::vector<double> data) {
    check_shape("from_data", shape);
    if (numel_of(shape) != data.size())
        throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                    " values for shape " + shape_string(shape));
    auto s = std::make_shared<detail::Storage>();
    s->data = std::move(data);
    return Tensor::with_storage(std::move(shape), std::move(s));
}

Tensor identity(size_t n) {
    Tensor t = make({n, n});
    for (size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

Tensor uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi) {
    check_shape("uniform", shape);
    Tensor t = make(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor normal(std::vector<size_t> shape, Rng& rng, double mean, double stddev) {
    check_shape("normal", shape);
    Tensor t = make(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * rng.normal();
    return t;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    if (want_tape({&a, &b})) {
        out.set_requires_grad(true);
        g_active_tape->record("add", {a, b, out}, [a, b, out]() {
            const std::vector<double>& g = out.storage()->grad;
            if (a.requires_grad()) {
                std::vector<double>& ga = a.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                std::vector<double>& gb = b.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    if (want_tape({&a, &b})) {
        out.set_requires_grad(true);
        g_active_tape->record("sub", {a, b, out}, [a, b, out]() {
            const std::vector<double>& g = out.storage()->grad;
            if (a.requires_grad()) {
                std::vector<double>& ga = a.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                std::vector<double>& gb = b.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    if (want_tape({&a, &b})) {
        out.set_requires_grad(true);
        g_active_tape->record("mul", {a, b, out}, [a, b, out]() {
            const std::vector<double>& g = out.storage()->grad;
            if (a.requires_grad()) {
                std::vector<double>& ga = a.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += b[i] * g[i];
            }
            if (b.requires_grad()) {
                std::vector<double>& gb = b.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) gb[i] += a[i] * g[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    check_valid("scale", a);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    if (want_tape({&a})) {
        out.set_requires_grad(true);
        g_active_tape->record("scale", {a, out}, [a, out, s]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& ga = a.storage()->grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    check_valid("add_scalar", a);
    Tensor out = make(a.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
    if (want_tape({&a})) {
        out.set_requires_grad(true);
        g_active_tape->record("add_scalar", {a, out}, [a, out]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& ga = a.storage()->grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor abs(const Tensor& a) {
    return unary("abs", a, [](double x) { return std::abs(x); }, abs_deriv);
}

Tensor gelu(const Tensor& a) { return unary("gelu", a, gelu_val, gelu_deriv); }

Tensor sigmoid(const Tensor& a) { return unary("sigmoid", a, sigmoid_val, sigmoid_deriv); }

// ---- matrix ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2("matmul", a);
    check_rank2("matmul", b);
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_string(a.shape()) +
                                    " * " + shape_string(b.shape()));
    size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make({m, n});
    mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    DCL_FINITE("matmul", out);
    if (want_tape({&a, &b})) {
        out.set_requires_grad(true);
        g_active_tape->record("matmul", {a, b, out}, [a, b, out, m, k, n]() {
            const double* g = out.storage()->grad.data();
            if (a.requires_grad())
                mm_nt(g, b.data().data(), a.storage()->grad.data(), m, n, k, true);
            if (b.requires_grad())
                mm_tn(a.data().data(), g, b.storage()->grad.data(), m, k, n, true);
        });
    }
    return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    check_rank2("matmul_bt", a);
    check_rank2("matmul_bt", b);
    if (a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_bt: feature dimensions differ: " +
                                    shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = make({m, n});
    mm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    DCL_FINITE("matmul_bt", out);
    if (want_tape({&a, &b})) {
        out.set_requires_grad(true);
        g_active_tape->record("matmul_bt", {a, b, out}, [a, b, out, m, k, n]() {
            const double* g = out.storage()->grad.data();
            if (a.requires_grad())
                mm_nn(g, b.data().data(), a.storage()->grad.data(), m, n, k, true);
            if (b.requires_grad())
                mm_tn(g, a.data().data(), b.storage()->grad.data(), m, n, k, true);
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check_rank2("transpose", a);
    size_t m = a.dim(0), n = a.dim(1);
    Tensor out = make({n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    if (want_tape({&a})) {
        out.set_requires_grad(true);
        g_active_tape->record("transpose", {a, out}, [a, out, m, n]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& ga = a.storage()->grad;
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// ---- row-wise ----

Tensor l2_normalize(const Tensor& x, double eps) {
    check_valid("l2_normalize", x);
    size_t rows = x.rows(), cols = x.cols();
    Tensor out = make(x.shape());
    std::vector<double> denom(rows);
    for (size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
        denom[r] = std::max(std::sqrt(s), eps);
        for (size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / denom[r];
    }
    DCL_FINITE("l2_normalize", out);
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("l2_normalize", {x, out},
                              [x, out, rows, cols, denom = std::move(denom), eps]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t r = 0; r < rows; ++r) {
                // Below eps the denominator is the constant eps, so the
                // projection term vanishes.
                if (denom[r] <= eps) {
                    for (size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] / eps;
                    continue;
                }
                double dot = 0.0;
                for (size_t c = 0; c < cols; ++c) dot += out[r * cols + c] * g[r * cols + c];
                for (size_t c = 0; c < cols; ++c)
                    gx[r * cols + c] += (g[r * cols + c] - out[r * cols + c] * dot) / denom[r];
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    check_valid("softmax_rows", x);
    size_t rows = x.rows(), cols = x.cols();
    Tensor out = make(x.shape());
    for (size_t r = 0; r < rows; ++r) {
        double m = x[r * cols];
        for (size_t c = 1; c < cols; ++c) m = std::max(m, x[r * cols + c]);
        double s = 0.0;
        for (size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(x[r * cols + c] - m);
            s += out[r * cols + c];
        }
        for (size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
    }
    DCL_FINITE("softmax_rows", out);
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("softmax_rows", {x, out}, [x, out, rows, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (size_t c = 0; c < cols; ++c) dot += out[r * cols + c] * g[r * cols + c];
                for (size_t c = 0; c < cols; ++c)
                    gx[r * cols + c] += out[r * cols + c] * (g[r * cols + c] - dot);
            }
        });
    }
    return out;
}

Tensor log_sum_exp(const Tensor& x) {
    check_valid("log_sum_exp", x);
    if (x.rank() == 0) throw std::invalid_argument("log_sum_exp: input must have at least one axis");
    size_t rows = x.rows(), cols = x.cols();
    std::vector<size_t> out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = make(out_shape);
    for (size_t r = 0; r < rows; ++r) {
        double m = x[r * cols];
        for (size_t c = 1; c < cols; ++c) m = std::max(m, x[r * cols + c]);
        double s = 0.0;
        for (size_t c = 0; c < cols; ++c) s += std::exp(x[r * cols + c] - m);
        out[r] = m + std::log(s);
    }
    DCL_FINITE("log_sum_exp", out);
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("log_sum_exp", {x, out}, [x, out, rows, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t r = 0; r < rows; ++r)
                for (size_t c = 0; c < cols; ++c)
                    gx[r * cols + c] += std::exp(x[r * cols + c] - out[r]) * g[r];
        });
    }
    return out;
}

Tensor sum_rows(const Tensor& x) {
    check_valid("sum_rows", x);
    if (x.rank() == 0) throw std::invalid_argument("sum_rows: input must have at least one axis");
    size_t rows = x.rows(), cols = x.cols();
    std::vector<size_t> out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = make(out_shape);
    for (size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (size_t c = 0; c < cols; ++c) s += x[r * cols + c];
        out[r] = s;
    }
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("sum_rows", {x, out}, [x, out, rows, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t r = 0; r < rows; ++r)
                for (size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r];
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    check_valid("sum_all", x);
    Tensor out = make({});
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    out[0] = s;
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("sum_all", {x, out}, [x, out]() {
            double g = out.storage()->grad[0];
            std::vector<double>& gx = x.storage()->grad;
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    check_valid("mean_all", x);
    Tensor out = make({});
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    out[0] = s / static_cast<double>(x.size());
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        double inv = 1.0 / static_cast<double>(x.size());
        g_active_tape->record("mean_all", {x, out}, [x, out, inv]() {
            double g = out.storage()->grad[0] * inv;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check_valid("add_bias", x);
    check_valid("add_bias", bias);
    if (bias.rank() != 1 || bias.dim(0) != x.cols())
        throw std::invalid_argument("add_bias: bias " + shape_string(bias.shape()) +
                                    " does not match feature width of " +
                                    shape_string(x.shape()));
    size_t rows = x.rows(), cols = x.cols();
    Tensor out = make(x.shape());
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
    if (want_tape({&x, &bias})) {
        out.set_requires_grad(true);
        g_active_tape->record("add_bias", {x, bias, out}, [x, bias, out, rows, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            if (x.requires_grad()) {
                std::vector<double>& gx = x.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                std::vector<double>& gb = bias.storage()->grad;
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
            }
        });
    }
    return out;
}

Tensor add_tiled(const Tensor& x, const Tensor& tile) {
    check_valid("add_tiled", x);
    check_valid("add_tiled", tile);
    if (tile.cols() != x.cols() || x.rows() % tile.rows() != 0)
        throw std::invalid_argument("add_tiled: tile " + shape_string(tile.shape()) +
                                    " does not divide " + shape_string(x.shape()));
    size_t rows = x.rows(), cols = x.cols(), t = tile.rows();
    Tensor out = make(x.shape());
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c)
            out[r * cols + c] = x[r * cols + c] + tile[(r % t) * cols + c];
    if (want_tape({&x, &tile})) {
        out.set_requires_grad(true);
        g_active_tape->record("add_tiled", {x, tile, out}, [x, tile, out, rows, cols, t]() {
            const std::vector<double>& g = out.storage()->grad;
            if (x.requires_grad()) {
                std::vector<double>& gx = x.storage()->grad;
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (tile.requires_grad()) {
                std::vector<double>& gt = tile.storage()->grad;
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < cols; ++c) gt[(r % t) * cols + c] += g[r * cols + c];
            }
        });
    }
    return out;
}

Tensor mean_rows_grouped(const Tensor& x, size_t group) {
    check_valid("mean_rows_grouped", x);
    if (group == 0 || x.rows() % group != 0)
        throw std::invalid_argument("mean_rows_grouped: group size " + std::to_string(group) +
                                    " does not divide " + std::to_string(x.rows()) + " rows");
    size_t cols = x.cols(), groups = x.rows() / group;
    Tensor out = make({groups, cols});
    double inv = 1.0 / static_cast<double>(group);
    for (size_t gidx = 0; gidx < groups; ++gidx)
        for (size_t j = 0; j < group; ++j) {
            size_t r = gidx * group + j;
            for (size_t c = 0; c < cols; ++c) out[gidx * cols + c] += x[r * cols + c] * inv;
        }
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("mean_rows_grouped", {x, out}, [x, out, groups, group, cols, inv]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t gidx = 0; gidx < groups; ++gidx)
                for (size_t j = 0; j < group; ++j) {
                    size_t r = gidx * group + j;
                    for (size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[gidx * cols + c] * inv;
                }
        });
    }
    return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_valid("layer_norm_rows", x);
    size_t rows = x.rows(), cols = x.cols();
    if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 || bias.dim(0) != cols)
        throw std::invalid_argument("layer_norm_rows: gain/bias must be rank-1 of length " +
                                    std::to_string(cols));
    Tensor out = make(x.shape());
    for (size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (size_t c = 0; c < cols; ++c) mean += x[r * cols + c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (size_t c = 0; c < cols; ++c) {
            double d = x[r * cols + c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv_sd = 1.0 / std::sqrt(var + eps);
        for (size_t c = 0; c < cols; ++c)
            out[r * cols + c] = (x[r * cols + c] - mean) * inv_sd * gain[c] + bias[c];
    }
    DCL_FINITE("layer_norm_rows", out);
    if (want_tape({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        g_active_tape->record("layer_norm_rows", {x, gain, bias, out},
                              [x, gain, bias, out, rows, cols, eps]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double> xhat(cols);
            for (size_t r = 0; r < rows; ++r) {
                double mean = 0.0;
                for (size_t c = 0; c < cols; ++c) mean += x[r * cols + c];
                mean /= static_cast<double>(cols);
                double var = 0.0;
                for (size_t c = 0; c < cols; ++c) {
                    double d = x[r * cols + c] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(cols);
                double inv_sd = 1.0 / std::sqrt(var + eps);
                for (size_t c = 0; c < cols; ++c) xhat[c] = (x[r * cols + c] - mean) * inv_sd;
                if (gain.requires_grad()) {
                    std::vector<double>& gg = gain.storage()->grad;
                    for (size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xhat[c];
                }
                if (bias.requires_grad()) {
                    std::vector<double>& gb = bias.storage()->grad;
                    for (size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                }
                if (x.requires_grad()) {
                    std::vector<double>& gx = x.storage()->grad;
                    double sum_gh = 0.0, sum_ghx = 0.0;
                    for (size_t c = 0; c < cols; ++c) {
                        double gh = g[r * cols + c] * gain[c];
                        sum_gh += gh;
                        sum_ghx += gh * xhat[c];
                    }
                    double inv_n = 1.0 / static_cast<double>(cols);
                    for (size_t c = 0; c < cols; ++c) {
                        double gh = g[r * cols + c] * gain[c];
                        gx[r * cols + c] +=
                            (gh - sum_gh * inv_n - xhat[c] * sum_ghx * inv_n) * inv_sd;
                    }
                }
            }
        });
    }
    return out;
}

// ---- spatial ----

namespace {

struct CubicTaps {
    size_t idx[4];
    double w[4];
};

// Keys cubic convolution kernel, a = -0.5.
double cubic_weight(double d) {
    d = std::fabs(d);
    if (d <= 1.0) return (1.5 * d - 2.5) * d * d + 1.0;
    if (d < 2.0) return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0;
    return 0.0;
}

// Per output coordinate along one axis: the four (edge-clamped) source
// indices and their kernel weights, sampling at (out + 0.5)/factor - 0.5.
std::vector<CubicTaps> cubic_taps(size_t in, size_t factor) {
    std::vector<CubicTaps> taps(in * factor);
    for (size_t o = 0; o < taps.size(); ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        long i0 = static_cast<long>(std::floor(src));
        for (int t = 0; t < 4; ++t) {
            long i = i0 - 1 + t;
            taps[o].idx[t] =
                static_cast<size_t>(std::clamp(i, 0L, static_cast<long>(in) - 1));
            taps[o].w[t] = cubic_weight(src - static_cast<double>(i));
        }
    }
    return taps;
}

void check_map(const char* op, const Tensor& t) {
    check_valid(op, t);
    if (t.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": expected [B x h x w x C], got " +
                                    shape_string(t.shape()));
}

}  // namespace

Tensor bicubic_upsample(const Tensor& x, size_t factor) {
    check_map("bicubic_upsample", x);
    if (factor < 2)
        throw std::invalid_argument("bicubic_upsample: factor must be >= 2, got " +
                                    std::to_string(factor));
    size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    size_t oh = h * factor, ow = w * factor;
    std::vector<CubicTaps> th = cubic_taps(h, factor), tw = cubic_taps(w, factor);

    Tensor out = make({b, oh, ow, c});
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t oi = 0; oi < oh; ++oi)
            for (size_t oj = 0; oj < ow; ++oj) {
                double* dst = &out.data()[((bi * oh + oi) * ow + oj) * c];
                for (int u = 0; u < 4; ++u)
                    for (int v = 0; v < 4; ++v) {
                        double wt = th[oi].w[u] * tw[oj].w[v];
                        const double* src =
                            &x.data()[((bi * h + th[oi].idx[u]) * w + tw[oj].idx[v]) * c];
                        for (size_t ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
                    }
            }
    DCL_FINITE("bicubic_upsample", out);
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record(
            "bicubic_upsample", {x, out}, [x, out, th, tw, b, h, w, c, oh, ow]() {
                const std::vector<double>& g = out.storage()->grad;
                std::vector<double>& gx = x.storage()->grad;
                for (size_t bi = 0; bi < b; ++bi)
                    for (size_t oi = 0; oi < oh; ++oi)
                        for (size_t oj = 0; oj < ow; ++oj) {
                            const double* go = &g[((bi * oh + oi) * ow + oj) * c];
                            for (int u = 0; u < 4; ++u)
                                for (int v = 0; v < 4; ++v) {
                                    double wt = th[oi].w[u] * tw[oj].w[v];
                                    double* dst =
                                        &gx[((bi * h + th[oi].idx[u]) * w + tw[oj].idx[v]) * c];
                                    for (size_t ch = 0; ch < c; ++ch) dst[ch] += wt * go[ch];
                                }
                        }
            });
    }
    return out;
}

Tensor gather_patches(const Tensor& x, size_t k) {
    check_map("gather_patches", x);
    if (k == 0 || k % 2 == 0)
        throw std::invalid_argument("gather_patches: window must be odd, got " +
                                    std::to_string(k));
    size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    long r = static_cast<long>(k) / 2;
    size_t row_len = k * k * c;

    Tensor out = make({b * h * w, row_len});
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t i = 0; i < h; ++i)
            for (size_t j = 0; j < w; ++j) {
                double* dst = &out.data()[((bi * h + i) * w + j) * row_len];
                size_t t = 0;
                for (long di = -r; di <= r; ++di)
                    for (long dj = -r; dj <= r; ++dj, t += c) {
                        long si = static_cast<long>(i) + di, sj = static_cast<long>(j) + dj;
                        if (si < 0 || sj < 0 || si >= static_cast<long>(h) ||
                            sj >= static_cast<long>(w))
                            continue;  // outside the map: stays zero
                        const double* src =
                            &x.data()[((bi * h + static_cast<size_t>(si)) * w +
                                       static_cast<size_t>(sj)) *
                                      c];
                        std::copy(src, src + c, dst + t);
                    }
            }
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("gather_patches", {x, out}, [x, out, b, h, w, c, r, row_len]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t bi = 0; bi < b; ++bi)
                for (size_t i = 0; i < h; ++i)
                    for (size_t j = 0; j < w; ++j) {
                        const double* go = &g[((bi * h + i) * w + j) * row_len];
                        size_t t = 0;
                        for (long di = -r; di <= r; ++di)
                            for (long dj = -r; dj <= r; ++dj, t += c) {
                                long si = static_cast<long>(i) + di;
                                long sj = static_cast<long>(j) + dj;
                                if (si < 0 || sj < 0 || si >= static_cast<long>(h) ||
                                    sj >= static_cast<long>(w))
                                    continue;
                                double* dst = &gx[((bi * h + static_cast<size_t>(si)) * w +
                                                   static_cast<size_t>(sj)) *
                                                  c];
                                for (size_t ch = 0; ch < c; ++ch) dst[ch] += go[t + ch];
                            }
                    }
        });
    }
    return out;
}

// ---- selection / assembly ----

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& rows) {
    check_valid("gather_rows", x);
    if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
    size_t cols = x.cols(), n_in = x.rows();
    for (size_t r : rows)
        if (r >= n_in)
            throw std::invalid_argument("gather_rows: index " + std::to_string(r) +
                                        " out of range for " + std::to_string(n_in) + " rows");
    Tensor out = make({rows.size(), cols});
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t c = 0; c < cols; ++c) out[i * cols + c] = x[rows[i] * cols + c];
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("gather_rows", {x, out}, [x, out, rows, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t i = 0; i < rows.size(); ++i)
                for (size_t c = 0; c < cols; ++c) gx[rows[i] * cols + c] += g[i * cols + c];
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, size_t begin, size_t end) {
    check_valid("slice_rows", x);
    if (begin >= end || end > x.rows())
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for " +
                                    std::to_string(x.rows()) + " rows");
    size_t cols = x.cols(), n = end - begin;
    Tensor out = make({n, cols});
    std::copy(x.data().begin() + begin * cols, x.data().begin() + end * cols, out.data().begin());
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("slice_rows", {x, out}, [x, out, begin, n, cols]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t i = 0; i < n * cols; ++i) gx[begin * cols + i] += g[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, size_t begin, size_t end) {
    check_valid("slice_cols", x);
    if (begin >= end || end > x.cols())
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for " +
                                    std::to_string(x.cols()) + " columns");
    size_t rows = x.rows(), cols = x.cols(), n = end - begin;
    Tensor out = make({rows, n});
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < n; ++c) out[r * n + c] = x[r * cols + begin + c];
    if (want_tape({&x})) {
        out.set_requires_grad(true);
        g_active_tape->record("slice_cols", {x, out}, [x, out, rows, cols, begin, n]() {
            const std::vector<double>& g = out.storage()->grad;
            std::vector<double>& gx = x.storage()->grad;
            for (size_t r = 0; r < rows; ++r)
                for (size_t c = 0; c < n; ++c) gx[r * cols + begin + c] += g[r * n + c];
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    size_t cols = parts[0].cols(), total = 0;
    for (const Tensor& p : parts) {
        check_valid("concat_rows", p);
        if (p.cols() != cols)
            throw std::invalid_argument("concat_rows: feature widths differ (" +
                                        std::to_string(cols) + " vs " + std::to_string(p.cols()) +
                                        ")");
        total += p.rows();
    }
    Tensor out = make({total, cols});
    size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.size();
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (g_active_tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> touched = parts;
        touched.push_back(out);
        g_active_tape->record("concat_rows", touched, [parts, out]() {
            const std::vector<double>& g = out.storage()->grad;
            size_t off = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    std::vector<double>& gp = p.storage()->grad;
                    for (size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
                }
                off += p.size();
            }
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    size_t rows = parts[0].rows(), total = 0;
    for (const Tensor& p : parts) {
        check_valid("concat_cols", p);
        if (p.rows() != rows)
            throw std::invalid_argument("concat_cols: row counts differ (" + std::to_string(rows) +
                                        " vs " + std::to_string(p.rows()) + ")");
        total += p.cols();
    }
    Tensor out = make({rows, total});
    size_t off = 0;
    for (const Tensor& p : parts) {
        size_t pc = p.cols();
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < pc; ++c) out[r * total + off + c] = p[r * pc + c];
        off += pc;
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (g_active_tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> touched = parts;
        touched.push_back(out);
        g_active_tape->record("concat_cols", touched, [parts, out, rows, total]() {
            const std::vector<double>& g = out.storage()->grad;
            size_t off = 0;
            for (const Tensor& p : parts) {
                size_t pc = p.cols();
                if (p.requires_grad()) {
                    std::vector<double>& gp = p.storage()->grad;
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * total + off + c];
                }
                off += pc;
            }
        });
    }
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape("bce_with_logits", logits, targets);
    size_t n = logits.size();
    Tensor out = make({});
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double z = logits[i], y = targets[i];
        s += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    out[0] = s / static_cast<double>(n);
    DCL_FINITE("bce_with_logits", out);
    if (want_tape({&logits})) {
        out.set_requires_grad(true);
        double inv = 1.0 / static_cast<double>(n);
        g_active_tape->record("bce_with_logits", {logits, out}, [logits, targets, out, n, inv]() {
            double g = out.storage()->grad[0] * inv;
            std::vector<double>& gz = logits.storage()->grad;
            for (size_t i = 0; i < n; ++i) gz[i] += (sigmoid_val(logits[i]) - targets[i]) * g;
        });
    }
    return out;
}

Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b, double eps) {
    check_rank2("cosine_similarity_matrix", a);
    check_rank2("cosine_similarity_matrix", b);
    if (a.dim(1) != b.dim(1))
        throw std::invalid_argument("cosine_similarity_matrix: feature dimensions differ: " +
                                    shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    size_t p = a.dim(0), q = b.dim(0), d = a.dim(1);
    std::vector<double> na(p), nb(q);
    for (size_t i = 0; i < p; ++i) {
        double s = 0.0;
        for (size_t c = 0; c < d; ++c) s += a(i, c) * a(i, c);
        na[i] = std::sqrt(s);
    }
    for (size_t j = 0; j < q; ++j) {
        double s = 0.0;
        for (size_t c = 0; c < d; ++c) s += b(j, c) * b(j, c);
        nb[j] = std::sqrt(s);
    }
    Tensor out = make({p, q});
    for (size_t i = 0; i < p; ++i)
        for (size_t j = 0; j < q; ++j) {
            if (na[i] <= eps || nb[j] <= eps) continue;
            double dot = 0.0;
            for (size_t c = 0; c < d; ++c) dot += a(i, c) * b(j, c);
            out(i, j) = dot / (na[i] * nb[j]);
        }
    return out;
}

// ---- verification ----

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    check_valid("grad_check", x);
    if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    Tensor probe = from_data(x.shape(), x.data());
    probe.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(probe);
        if (y.size() != 1)
            throw std::runtime_error("grad_check: function output has " + std::to_string(y.size()) +
                                     " elements, expected 1");
        tape.backward(y);
        analytic = probe.grad();
    }
    double worst = 0.0;
    for (size_t i = 0; i < probe.size(); ++i) {
        double saved = probe[i];
        probe[i] = saved + step;
        double plus = f(probe).value();
        probe[i] = saved - step;
        double minus = f(probe).value();
        probe[i] = saved;
        if (!std::isfinite(plus) || !std::isfinite(minus))
            throw std::runtime_error("grad_check: non-finite value near coordinate " +
                                     std::to_string(i));
        double numeric = (plus - minus) / (2.0 * step);
        double rel = std::abs(analytic[i] - numeric) /
                     std::max(1.0, std::abs(analytic[i]) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace dcl
