// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with define-by-run reverse-mode gradients.
// The Tape records one backward closure per primitive application; replaying
// the record in reverse order propagates d(loss)/d(node) to every leaf.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mpdit {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first accumulation
};
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_values(Shape shape, std::vector<double> v);
    static Tensor scalar_value(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<const double> values() const { return node_->value; }
    // Mutation is reserved for parameter updates between tapes; activations
    // recorded on a tape must be treated as immutable.
    std::span<double> values_mut() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_mut(); // allocates zeros on first use
    void zero_grad();

    double scalar() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Replays the record in reverse, seeding d(loss)/d(loss) = 1.
    // Rejects non-scalar losses.
    void backward(const Tensor& loss);

    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    static Tape* active();

    // RAII activation; a tape is confined to one logical thread.
    class Scope {
    public:
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    std::vector<std::function<void()>> entries_;
};

// ---- primitives -----------------------------------------------------------
// Binary elementwise ops accept equal shapes, or `b` as a vector broadcast
// along the last axis, or `b` as a scalar tensor. Shape mismatches throw
// std::invalid_argument naming both shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);    // [M,K]x[K,N] -> [M,N]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // [M,K]x[N,K]^T -> [M,N]

Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor slice_last(const Tensor& a, int start, int len);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);

Tensor sum(const Tensor& a);  // scalar
Tensor mean(const Tensor& a); // scalar

Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor silu_raw(const Tensor& a);
Tensor leaky_relu_raw(const Tensor& a, double alpha);

// L2-normalizes each last-axis row; a zero row is rejected.
Tensor row_normalize(const Tensor& a);

// Per-row standardization over the last axis (no learned affine).
Tensor layer_norm(const Tensor& a, double eps = 1e-6);

// Row-wise softmax of a/beta with row-max subtraction. Rejects beta <= 0 and
// non-finite entries.
Tensor softmax_rows(const Tensor& a, double beta);

// Copies row `index` of a 2-D table; gradient accumulates into that row.
Tensor embedding_row(const Tensor& table, int index);

// ---- magnitude statistics (plain analysis, no gradient) -------------------

// sqrt(mean of squares) over all entries.
double expected_magnitude(const Tensor& x);
double expected_magnitude(std::span<const double> v);

// sqrt(mean of squares) over the given axes; result holds the remaining axes
// in order. Rejects empty axis lists, repeated axes, and empty tensors.
std::vector<double> expected_magnitude_over(const Tensor& x, std::span<const int> reduce_axes);

// Per-last-axis-row magnitudes, the per-token statistic used by the probes.
std::vector<double> row_magnitudes(const Tensor& x);

} // namespace mpdit
