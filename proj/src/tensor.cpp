#include "ilora/tensor.hpp"

#include "ilora/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ilora {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;
template <class T>
using MMap = Eigen::Map<MatR<T>>;

template <class T>
void require_2d(const BasicTensor<T>& t, const char* op) {
    if (!t.defined() || t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected a 2-D tensor");
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// Builds the result node. Parents and the backward closure are only kept when
// some parent participates in differentiation.
template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                           std::vector<std::shared_ptr<TensorNode<T>>> parents,
                           std::function<void(TensorNode<T>&)> fn) {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return BasicTensor<T>(std::move(node));
}

template <class T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& n) {
    return n->requires_grad;
}

} // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
                             " values");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <class T>
std::size_t BasicTensor<T>::rows() const {
    if (rank() != 2) throw DimensionError("rows(): tensor is not 2-D");
    return node_->shape[0];
}

template <class T>
std::size_t BasicTensor<T>::cols() const {
    if (rank() != 2) throw DimensionError("cols(): tensor is not 2-D");
    return node_->shape[1];
}

template <class T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!node_->is_leaf()) throw ContractError("mutable_data(): only leaf tensors may be modified");
    return node_->data;
}

template <class T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw DimensionError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("set_requires_grad(): only leaves carry the flag explicitly");
    node_->requires_grad = flag;
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
    return node_->grad_buffer();
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from_data(node_->shape, node_->data, false);
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone_leaf(bool requires_grad) const {
    return from_data(node_->shape, node_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// Ops

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(m * n);
    MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
    return make_result<T>({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [m, k, n](TensorNode<T>& self) {
        CMap<T> g(self.grad.data(), m, n);
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants_grad(pa))
            MMap<T>(pa->grad_buffer().data(), m, k).noalias() += g * CMap<T>(pb->data.data(), k, n).transpose();
        if (wants_grad(pb))
            MMap<T>(pb->grad_buffer().data(), k, n).noalias() += CMap<T>(pa->data.data(), m, k).transpose() * g;
    });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(m * n);
    MMap<T>(out.data(), n, m) = CMap<T>(a.data().data(), m, n).transpose();
    return make_result<T>({n, m}, std::move(out), "transpose", {a.node()}, [m, n](TensorNode<T>& self) {
        MMap<T>(self.parents[0]->grad_buffer().data(), m, n) += CMap<T>(self.grad.data(), n, m).transpose();
    });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](TensorNode<T>& self) {
        for (auto& p : self.parents) {
            if (!wants_grad(p)) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](TensorNode<T>& self) {
        if (wants_grad(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants_grad(pa)) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (wants_grad(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
    return make_result<T>(a.shape(), std::move(out), "scale", {a.node()}, [c](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

template <class T>
BasicTensor<T> scale_by(const BasicTensor<T>& a, const BasicTensor<T>& s) {
    if (s.numel() != 1) throw DimensionError("scale_by: factor must hold exactly one value");
    const T c = s[0];
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
    return make_result<T>(a.shape(), std::move(out), "scale_by", {a.node(), s.node()}, [](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& ps = self.parents[1];
        if (wants_grad(pa)) {
            auto& g = pa->grad_buffer();
            const T c = ps->data[0];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
        }
        if (wants_grad(ps)) {
            T acc = 0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->data[i];
            ps->grad_buffer()[0] += acc;
        }
    });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    return make_result<T>({1}, {acc}, "sum", {a.node()}, [](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    if (a.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    return make_result<T>(a.shape(), std::move(out), "silu", {a.node()}, [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T x = p->data[i];
            const T sig = T(1) / (T(1) + std::exp(-x));
            g[i] += self.grad[i] * sig * (T(1) + x * (T(1) - sig));
        }
    });
}

template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const BasicTensor<T>& additive_mask) {
    require_2d(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    const bool has_mask = additive_mask.defined();
    if (has_mask) {
        require_2d(additive_mask, "softmax_rows");
        const bool row_broadcast = additive_mask.rows() == 1 && additive_mask.cols() == n;
        if (!row_broadcast && additive_mask.shape() != x.shape())
            throw DimensionError("softmax_rows: mask " + shape_str(additive_mask.shape()) +
                                 " not broadcastable to " + shape_str(x.shape()));
    }
    const std::size_t mask_stride = has_mask && additive_mask.rows() == 1 ? 0 : n;
    std::vector<T> out(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        const T* mrow = has_mask ? additive_mask.data().data() + i * mask_stride : nullptr;
        T mx = std::numeric_limits<T>::lowest();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mrow && is_masked(mrow[j])) continue;
            const T v = row[j] + (mrow ? mrow[j] : T(0));
            mx = any ? std::max(mx, v) : v;
            any = true;
        }
        if (!any) throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        T z = 0;
        T* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            if (mrow && is_masked(mrow[j])) continue;
            orow[j] = std::exp(row[j] + (mrow ? mrow[j] : T(0)) - mx);
            z += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
    }
    return make_result<T>({m, n}, std::move(out), "softmax_rows", {x.node()}, [m, n](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const T* p = self.data.data() + i * n;
            const T* gy = self.grad.data() + i * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += p[j] * gy[j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += p[j] * (gy[j] - dot);
        }
    });
}

template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
    return softmax_rows(x, BasicTensor<T>());
}

template <class T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& weight, T eps) {
    require_2d(x, "rms_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (weight.numel() != n) throw DimensionError("rms_norm: weight width differs from input width");
    std::vector<T> out(m * n);
    std::vector<T> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += row[j] * row[j];
        inv[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] * inv[i] * weight[j];
    }
    return make_result<T>({m, n}, std::move(out), "rms_norm", {x.node(), weight.node()},
                          [m, n, inv = std::move(inv)](TensorNode<T>& self) {
                              auto& px = self.parents[0];
                              auto& pw = self.parents[1];
                              for (std::size_t i = 0; i < m; ++i) {
                                  const T* xr = px->data.data() + i * n;
                                  const T* gy = self.grad.data() + i * n;
                                  const T r = inv[i];
                                  if (wants_grad(px)) {
                                      T dot = 0;
                                      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * pw->data[j] * xr[j];
                                      auto& g = px->grad_buffer();
                                      const T c = r * r * r * dot / static_cast<T>(n);
                                      for (std::size_t j = 0; j < n; ++j)
                                          g[i * n + j] += r * pw->data[j] * gy[j] - xr[j] * c;
                                  }
                                  if (wants_grad(pw)) {
                                      auto& g = pw->grad_buffer();
                                      for (std::size_t j = 0; j < n; ++j) g[j] += gy[j] * xr[j] * r;
                                  }
                              }
                          });
}

template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
    require_2d(a, "slice_rows");
    const std::size_t n = a.cols();
    if (begin > end || end > a.rows()) throw DimensionError("slice_rows: range out of bounds");
    std::vector<T> out(a.data().begin() + begin * n, a.data().begin() + end * n);
    return make_result<T>({end - begin, n}, std::move(out), "slice_rows", {a.node()},
                          [begin, n](TensorNode<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
                          });
}

template <class T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
    require_2d(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
    if (begin > end || end > n) throw DimensionError("slice_cols: range out of bounds");
    std::vector<T> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(a.data().data() + i * n + begin, w, out.data() + i * w);
    return make_result<T>({m, w}, std::move(out), "slice_cols", {a.node()}, [m, n, w, begin](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
    });
}

template <class T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
        m += p.rows();
        parents.push_back(p.node());
    }
    std::vector<T> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result<T>({m, n}, std::move(out), "concat_rows", std::move(parents), [](TensorNode<T>& self) {
        std::size_t off = 0;
        for (auto& p : self.parents) {
            const std::size_t len = p->data.size();
            if (wants_grad(p)) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

template <class T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
        n += p.cols();
        parents.push_back(p.node());
    }
    std::vector<T> out(m * n);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
        off += w;
    }
    return make_result<T>({m, n}, std::move(out), "concat_cols", std::move(parents), [m, n](TensorNode<T>& self) {
        std::size_t off = 0;
        for (auto& p : self.parents) {
            const std::size_t w = p->shape[1];
            if (wants_grad(p)) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
            }
            off += w;
        }
    });
}

template <class T>
BasicTensor<T> add_block(const BasicTensor<T>& base, const BasicTensor<T>& block, std::size_t row_offset,
                         std::size_t col_offset) {
    require_2d(base, "add_block");
    require_2d(block, "add_block");
    const std::size_t m = base.rows(), n = base.cols(), bm = block.rows(), bn = block.cols();
    if (row_offset + bm > m || col_offset + bn > n) throw DimensionError("add_block: block exceeds base extents");
    std::vector<T> out(base.data().begin(), base.data().end());
    for (std::size_t i = 0; i < bm; ++i)
        for (std::size_t j = 0; j < bn; ++j) out[(row_offset + i) * n + col_offset + j] += block.at(i, j);
    return make_result<T>({m, n}, std::move(out), "add_block", {base.node(), block.node()},
                          [n, bm, bn, row_offset, col_offset](TensorNode<T>& self) {
                              auto& pb = self.parents[0];
                              auto& pk = self.parents[1];
                              if (wants_grad(pb)) {
                                  auto& g = pb->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (wants_grad(pk)) {
                                  auto& g = pk->grad_buffer();
                                  for (std::size_t i = 0; i < bm; ++i)
                                      for (std::size_t j = 0; j < bn; ++j)
                                          g[i * bn + j] += self.grad[(row_offset + i) * n + col_offset + j];
                              }
                          });
}

template <class T>
BasicTensor<T> mask_rows(const BasicTensor<T>& a, const std::vector<bool>& keep) {
    require_2d(a, "mask_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (keep.size() != m) throw DimensionError("mask_rows: mask length differs from row count");
    std::vector<T> out(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i)
        if (keep[i]) std::copy_n(a.data().data() + i * n, n, out.data() + i * n);
    return make_result<T>({m, n}, std::move(out), "mask_rows", {a.node()}, [m, n, keep](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            if (keep[i])
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j];
    });
}

template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
    require_2d(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<T> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab)
            throw ContractError("embedding: token id " + std::to_string(idx[i]) + " outside vocabulary");
        std::copy_n(table.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
    }
    const std::size_t m = idx.size();
    return make_result<T>({m, d}, std::move(out), "embedding", {table.node()},
                          [d, idx = std::move(idx)](TensorNode<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                  for (std::size_t j = 0; j < d; ++j)
                                      g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
                          });
}

template <class T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t head_dim, std::span<const std::size_t> positions,
                    double base) {
    require_2d(x, "rope");
    const std::size_t m = x.rows(), n = x.cols();
    if (head_dim == 0 || head_dim % 2 != 0 || n % head_dim != 0)
        throw DimensionError("rope: width must be a multiple of an even head_dim");
    if (positions.size() != m) throw DimensionError("rope: one position per row required");
    const std::size_t half = head_dim / 2;
    // cos/sin table [m x half]
    std::vector<T> cs(m * half), sn(m * half);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < half; ++p) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
            const double ang = static_cast<double>(positions[i]) * freq;
            cs[i * half + p] = static_cast<T>(std::cos(ang));
            sn[i * half + p] = static_cast<T>(std::sin(ang));
        }
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t h = 0; h < n; h += head_dim)
            for (std::size_t p = 0; p < half; ++p) {
                const std::size_t c0 = i * n + h + 2 * p;
                const T x0 = x[c0], x1 = x[c0 + 1];
                const T c = cs[i * half + p], s = sn[i * half + p];
                out[c0] = x0 * c - x1 * s;
                out[c0 + 1] = x0 * s + x1 * c;
            }
    return make_result<T>({m, n}, std::move(out), "rope", {x.node()},
                          [m, n, head_dim, half, cs = std::move(cs), sn = std::move(sn)](TensorNode<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t h = 0; h < n; h += head_dim)
                                      for (std::size_t p = 0; p < half; ++p) {
                                          const std::size_t c0 = i * n + h + 2 * p;
                                          const T g0 = self.grad[c0], g1 = self.grad[c0 + 1];
                                          const T c = cs[i * half + p], s = sn[i * half + p];
                                          g[c0] += g0 * c + g1 * s;
                                          g[c0 + 1] += -g0 * s + g1 * c;
                                      }
                          });
}

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
    require_2d(logits, "cross_entropy");
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
    std::vector<int> tgt(targets.begin(), targets.end());
    std::size_t count = 0;
    for (int t : tgt) {
        if (t >= static_cast<int>(n)) throw ContractError("cross_entropy: target outside vocabulary");
        if (t >= 0) ++count;
    }
    // softmax probabilities are kept for the backward pass
    std::vector<T> probs(m * n, T(0));
    T loss = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (tgt[i] < 0) continue;
        const T* row = logits.data().data() + i * n;
        const T mx = *std::max_element(row, row + n);
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(row[j] - mx);
            z += probs[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
        loss += -(row[tgt[i]] - mx - std::log(z));
    }
    const T denom = count ? static_cast<T>(count) : T(1);
    loss /= denom;
    return make_result<T>({1}, {loss}, "cross_entropy", {logits.node()},
                          [m, n, denom, tgt = std::move(tgt), probs = std::move(probs)](TensorNode<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              const T gy = self.grad[0] / denom;
                              for (std::size_t i = 0; i < m; ++i) {
                                  if (tgt[i] < 0) continue;
                                  for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy * probs[i * n + j];
                                  g[i * n + static_cast<std::size_t>(tgt[i])] -= gy;
                              }
                          });
}

template <class T>
BasicTensor<T> causal_mask(std::size_t length) {
    std::vector<T> m(length * length, T(0));
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = i + 1; j < length; ++j) m[i * length + j] = masked_value<T>();
    return BasicTensor<T>::from_data({length, length}, std::move(m));
}

template <class T>
void backward(const BasicTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS; parents visited in declaration order.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Release the interior of the graph; leaves keep their gradients.
    for (TensorNode<T>* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
            node->requires_grad = false;
        }
    }
}

#define ILORA_INSTANTIATE_TENSOR(T)                                                                               \
    template class BasicTensor<T>;                                                                                \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> transpose(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                      \
    template BasicTensor<T> scale_by(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                           \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> silu(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> softmax_rows(const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> rms_norm(const BasicTensor<T>&, const BasicTensor<T>&, T);                            \
    template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);                          \
    template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);                          \
    template BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>&);                                      \
    template BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>&);                                      \
    template BasicTensor<T> add_block(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, std::size_t);    \
    template BasicTensor<T> mask_rows(const BasicTensor<T>&, const std::vector<bool>&);                           \
    template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);                               \
    template BasicTensor<T> rope(const BasicTensor<T>&, std::size_t, std::span<const std::size_t>, double);       \
    template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>);                           \
    template BasicTensor<T> causal_mask<T>(std::size_t);                                                          \
    template void backward(const BasicTensor<T>&);

ILORA_INSTANTIATE_TENSOR(float)
ILORA_INSTANTIATE_TENSOR(double)

} // namespace ilora
