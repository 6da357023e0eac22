#pragma once

// Dense row-major tensors with eager reverse-mode differentiation.
//
// Every op allocates a fresh node; nodes that depend on a requires_grad leaf
// record their parents and a backward closure. backward() walks the graph in
// a fixed topological order (creation order of the DFS), accumulates into the
// leaves, then releases the interior of the graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ilora {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    bool is_leaf() const { return parents.empty() && !backward_fn; }
    // Returns the gradient buffer, allocating zeros on first use.
    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <class T>
class BasicTensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    BasicTensor() = default;
    explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const T> data() const { return node_->data; }
    // Leaves only: interior nodes are immutable once built.
    std::span<T> mutable_data();
    T item() const;
    T at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
    T operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool has_grad() const { return !node_->grad.empty(); }
    // Zero-filled view when no gradient has been accumulated yet.
    std::span<const T> grad() const;
    void zero_grad() { node_->grad.clear(); }

    // Copy of the values, detached from any graph.
    BasicTensor detach() const;
    BasicTensor clone_leaf(bool requires_grad) const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

// Mask value standing in for -inf: finite so no NaN can propagate through
// 0 * mask, and softmax maps it to an exact zero probability.
template <class T>
constexpr T masked_value() { return std::numeric_limits<T>::lowest(); }

template <class T>
bool is_masked(T v) { return v <= std::numeric_limits<T>::lowest() / T(2); }

// ---------------------------------------------------------------------------
// Differentiable ops. 2-D tensors are [rows x cols] row-major.

template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& a, T c);
// Multiplies every element by the single value held in `s` (differentiable in both).
template <class T> BasicTensor<T> scale_by(const BasicTensor<T>& a, const BasicTensor<T>& s);
template <class T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& a);
template <class T> BasicTensor<T> silu(const BasicTensor<T>& a);

// Row-wise softmax of x + additive_mask. Mask entries are 0 or masked_value();
// masked entries come out as exact zeros. A row with every entry masked throws.
template <class T> BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const BasicTensor<T>& additive_mask);
template <class T> BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

// y_i = x_i / sqrt(mean(x_i^2) + eps) * weight
template <class T> BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& weight, T eps);

template <class T> BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end);
template <class T> BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t begin, std::size_t end);
template <class T> BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);
template <class T> BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts);
// Copy of `base` with `block` added at (row_offset, col_offset).
template <class T>
BasicTensor<T> add_block(const BasicTensor<T>& base, const BasicTensor<T>& block, std::size_t row_offset,
                         std::size_t col_offset);
// Zeroes every row i with keep[i] == false (the diagonal-mask product M.X).
template <class T> BasicTensor<T> mask_rows(const BasicTensor<T>& a, const std::vector<bool>& keep);

// Gathers rows of `table` ([vocab x d]) for the given ids.
template <class T> BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);

// Rotary embedding over consecutive column pairs inside each head block of
// width head_dim. Row i is rotated by angle positions[i] * base^(-2p/head_dim).
template <class T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t head_dim, std::span<const std::size_t> positions,
                    double base);

// Mean token cross-entropy over rows whose target is >= 0. Rows with target
// < 0 are ignored; with no valid rows the loss is 0 and all gradients are 0.
template <class T> BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

template <class T> BasicTensor<T> causal_mask(std::size_t length);

// Reverse-mode sweep from a scalar loss.
template <class T> void backward(const BasicTensor<T>& loss);

} // namespace ilora
