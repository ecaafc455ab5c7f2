#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "dcl/rng.hpp"

namespace dcl {

namespace detail {
struct Storage {
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily; empty means "no gradient yet"
    bool requires_grad = false;
};
}  // namespace detail

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// A Tensor is a cheap handle: copies share storage (data and gradient),
/// while the shape lives in the handle, so reshaping is metadata-only.
/// Most operations treat the trailing axis as the feature dimension and
/// everything before it as rows.
class Tensor {
public:
    Tensor() = default;

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t dim(size_t i) const { return shape_.at(i); }
    size_t size() const { return store_ ? store_->data.size() : 0; }
    bool valid() const { return store_ != nullptr; }

    /// Trailing axis length (1 for rank-0 scalars).
    size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    size_t rows() const { return size() / cols(); }

    std::vector<double>& data() { return store_->data; }
    const std::vector<double>& data() const { return store_->data; }
    double operator[](size_t i) const { return store_->data[i]; }
    double& operator[](size_t i) { return store_->data[i]; }
    double operator()(size_t r, size_t c) const { return store_->data[r * cols() + c]; }
    double& operator()(size_t r, size_t c) { return store_->data[r * cols() + c]; }

    /// Value of a single-element tensor.
    double value() const;

    bool requires_grad() const { return store_ && store_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        store_->requires_grad = v;
        return *this;
    }
    bool has_grad() const { return store_ && !store_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() {
        if (store_) store_->grad.assign(store_->data.size(), 0.0);
    }

    /// Same storage under a new shape; element count must match.
    Tensor reshaped(std::vector<size_t> new_shape) const;

    std::shared_ptr<detail::Storage> storage() const { return store_; }

    static Tensor with_storage(std::vector<size_t> shape, std::shared_ptr<detail::Storage> s) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.store_ = std::move(s);
        return t;
    }

private:
    std::vector<size_t> shape_;
    std::shared_ptr<detail::Storage> store_;
};

/// Record of one forward pass, define-by-run. Constructing a Tape makes it
/// the active tape for this thread; operations on tensors that require
/// gradients append their backward rules to it. Nodes are stored in creation
/// order, which is a topological order of the dataflow. Tapes are rebuilt
/// per forward pass and are single-threaded.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// Appends a backward rule. `touched` must list every tensor whose
    /// gradient the rule reads or writes; those buffers are reset at the
    /// start of every backward pass, so repeated passes are bit-identical.
    void record(const char* op, std::initializer_list<Tensor> touched,
                std::function<void()> rule);
    void record(const char* op, const std::vector<Tensor>& touched, std::function<void()> rule);

    /// Seeds d(loss)/d(loss) = 1 and runs every rule once, newest first.
    /// The loss must be a scalar computed on this tape.
    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }
    bool contains(const Tensor& t) const {
        return t.valid() && touched_set_.count(t.storage().get()) > 0;
    }

private:
    struct Node {
        const char* op;
        std::function<void()> rule;
    };
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<detail::Storage>> touched_;
    std::unordered_set<detail::Storage*> touched_set_;
    Tape* prev_ = nullptr;
};

std::string shape_string(const std::vector<size_t>& shape);

// ---- construction ----

Tensor zeros(std::vector<size_t> shape);
Tensor full(std::vector<size_t> shape, double value);
Tensor scalar(double value);
Tensor from_data(std::vector<size_t> shape, std::vector<double> data);
Tensor identity(size_t n);
Tensor uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi);
Tensor normal(std::vector<size_t> shape, Rng& rng, double mean, double stddev);

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- matrix (rank-2) ----

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose; b is [n x k].
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- row-wise (trailing axis = features, leading axes = rows) ----

/// Each trailing-axis vector divided by max(L2 norm, eps).
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);
Tensor softmax_rows(const Tensor& x);
/// Max-shifted log-sum-exp over the trailing axis; drops that axis.
Tensor log_sum_exp(const Tensor& x);
Tensor sum_rows(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// x[r, :] + bias for every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// Adds `tile` (t rows) to x (multiple of t rows), repeating down the rows.
Tensor add_tiled(const Tensor& x, const Tensor& tile);
/// Mean over each consecutive group of `group` rows: [G*group x d] -> [G x d].
Tensor mean_rows_grouped(const Tensor& x, size_t group);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

// ---- spatial (rank-4 [B x h x w x C] maps) ----

/// Upsamples each channel plane by an integer factor with the standard
/// cubic convolution kernel (a = -0.5), edge-clamped. The weights are fixed,
/// so the map is linear and differentiable; constants map to constants.
Tensor bicubic_upsample(const Tensor& x, size_t factor);

/// Stride-1 same-padded window extraction: every k x k neighborhood (zeros
/// outside the map) flattened to one output row, [B*h*w x k*k*C], taps
/// scanned row-major with channels innermost. k must be odd. A 3x3
/// convolution is matmul(gather_patches(x, 3), kernel[9*C x C_out]).
Tensor gather_patches(const Tensor& x, size_t k);

// ---- selection / assembly ----

/// Rows of x at the given indices, in order; duplicates allowed (backward
/// scatter-adds).
Tensor gather_rows(const Tensor& x, const std::vector<size_t>& rows);
Tensor slice_rows(const Tensor& x, size_t begin, size_t end);
Tensor slice_cols(const Tensor& x, size_t begin, size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Mean over elements of max(z,0) - z*y + log(1+exp(-|z|)); targets are
/// constants.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Pairwise cosine similarities between rows of a [p x d] and b [q x d].
/// Not differentiated: this is the selection/analysis similarity, gradients
/// never flow through it. Rows with norm <= eps get similarity 0.
Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b, double eps = 1e-12);

// ---- verification ----

/// Compares the taped gradient of a scalar-valued f against central
/// differences, coordinate by coordinate. Returns the max over coordinates
/// of |analytic - numeric| / max(1, |analytic| + |numeric|). Throws if f is
/// non-finite at a perturbed point, naming the coordinate.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace dcl
