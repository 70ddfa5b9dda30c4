#pragma once

// Minimal reverse-mode automatic differentiation over 2-D Eigen matrices.
//
// A Var is a handle to a graph node. Nodes created from frozen data (constants, or
// ops whose inputs are all constants) record no backward closure, so inference pays
// only for the forward arithmetic. Frozen backbone weights never enter the graph as
// nodes: ops take them as `const Mat&`, which makes it structurally impossible for a
// gradient to land on them.

#include "rsprompt/core/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

namespace rsprompt::ad {

template <class T>
struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Mat<T>& g) {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    const Mat<T>& value() const { return node_->value; }
    /// Empty matrix when no gradient reached this node.
    const Mat<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    T item() const { return node_->value(0, 0); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Mat<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var<T>(std::move(n));
}

/// Trainable leaf.
template <class T>
Var<T> parameter(Mat<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var<T>(std::move(n));
}

namespace detail {

template <class T, class Fn>
Var<T> make_op(Mat<T> value, std::initializer_list<Var<T>> inputs, Fn&& fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
    if (n->requires_grad) {
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::forward<Fn>(fn);
    }
    return Var<T>(std::move(n));
}

template <class T, class Fn>
Var<T> make_op_list(Mat<T> value, const std::vector<Var<T>>& inputs, Fn&& fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
    if (n->requires_grad) {
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::forward<Fn>(fn);
    }
    return Var<T>(std::move(n));
}

template <class T>
void push(Node<T>& self, std::size_t i, const Mat<T>& g) {
    if (self.parents[i]->requires_grad) self.parents[i]->accumulate(g);
}

template <class T>
void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

/// Runs reverse accumulation from a 1x1 output.
template <class T>
void backward(const Var<T>& out) {
    if (out.rows() != 1 || out.cols() != 1) throw ContractError("backward: output must be scalar");
    if (!out.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{out.node().get(), 0}};
    seen.insert(out.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    out.node()->accumulate(Mat<T>::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.value(), b.value(), "add");
    return detail::make_op<T>(a.value() + b.value(), {a, b}, [](Node<T>& s) {
        detail::push(s, 0, s.grad);
        detail::push(s, 1, s.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.value(), b.value(), "sub");
    return detail::make_op<T>(a.value() - b.value(), {a, b}, [](Node<T>& s) {
        detail::push(s, 0, s.grad);
        detail::push<T>(s, 1, -s.grad);
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T k) {
    return detail::make_op<T>(a.value() * k, {a}, [k](Node<T>& s) { detail::push<T>(s, 0, s.grad * k); });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.value(), b.value(), "mul");
    Mat<T> av = a.value(), bv = b.value();
    return detail::make_op<T>(av.cwiseProduct(bv), {a, b}, [av, bv](Node<T>& s) {
        detail::push<T>(s, 0, s.grad.cwiseProduct(bv));
        detail::push<T>(s, 1, s.grad.cwiseProduct(av));
    });
}

/// a + c for a frozen matrix c of identical shape.
template <class T>
Var<T> add_const(const Var<T>& a, const Mat<T>& c) {
    detail::check_same_shape(a.value(), c, "add_const");
    return detail::make_op<T>(a.value() + c, {a}, [](Node<T>& s) { detail::push(s, 0, s.grad); });
}

/// Adds a 1 x d row to every row of an n x d matrix.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ContractError("add_row: expected 1 x " + std::to_string(a.cols()) + ", got " + shape_str(row.value()));
    Mat<T> v = a.value().rowwise() + row.value().row(0);
    return detail::make_op<T>(std::move(v), {a, row}, [](Node<T>& s) {
        detail::push(s, 0, s.grad);
        detail::push<T>(s, 1, s.grad.colwise().sum());
    });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    Index cols = parts.front().cols(), rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ContractError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat<T> v(rows, cols);
    std::vector<Index> offsets;
    Index r = 0;
    for (const auto& p : parts) {
        offsets.push_back(r);
        if (p.rows() > 0) v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return detail::make_op_list<T>(std::move(v), parts, [offsets](Node<T>& s) {
        for (std::size_t i = 0; i < s.parents.size(); ++i) {
            Index n = s.parents[i]->value.rows();
            if (n > 0) detail::push<T>(s, i, s.grad.middleRows(offsets[i], n));
        }
    });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.rows())
        throw ContractError("slice_rows: range out of bounds");
    Index total = a.rows();
    return detail::make_op<T>(a.value().middleRows(start, count), {a}, [start, count, total](Node<T>& s) {
        Mat<T> g = Mat<T>::Zero(total, s.grad.cols());
        g.middleRows(start, count) = s.grad;
        detail::push(s, 0, g);
    });
}

/// Replaces rows [start, start + rows.rows()) of `a` with `rows`.
template <class T>
Var<T> replace_rows(const Var<T>& a, Index start, const Var<T>& rows) {
    Index n = rows.rows();
    if (n == 0) return a;
    if (start < 0 || start + n > a.rows()) throw ContractError("replace_rows: range out of bounds");
    std::vector<Var<T>> parts;
    if (start > 0) parts.push_back(slice_rows(a, 0, start));
    parts.push_back(rows);
    if (start + n < a.rows()) parts.push_back(slice_rows(a, start + n, a.rows() - start - n));
    return concat_rows(parts);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.rows()) throw ContractError("matmul: inner dimension mismatch");
    Mat<T> av = a.value(), bv = b.value();
    return detail::make_op<T>(av * bv, {a, b}, [av, bv](Node<T>& s) {
        if (s.parents[0]->requires_grad) s.parents[0]->accumulate(s.grad * bv.transpose());
        if (s.parents[1]->requires_grad) s.parents[1]->accumulate(av.transpose() * s.grad);
    });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.cols()) throw ContractError("matmul_nt: inner dimension mismatch");
    Mat<T> av = a.value(), bv = b.value();
    return detail::make_op<T>(row_dots(av, bv), {a, b}, [av, bv](Node<T>& s) {
        if (s.parents[0]->requires_grad) s.parents[0]->accumulate(s.grad * bv);
        if (s.parents[1]->requires_grad) s.parents[1]->accumulate(s.grad.transpose() * av);
    });
}

/// x * P for a frozen P.
template <class T>
Var<T> matmul_const(const Var<T>& x, const Mat<T>& p) {
    if (x.cols() != p.rows()) throw ContractError("matmul_const: inner dimension mismatch");
    const Mat<T>* pp = &p;
    return detail::make_op<T>(x.value() * p, {x}, [pp](Node<T>& s) {
        detail::push<T>(s, 0, s.grad * pp->transpose());
    });
}

/// y = x W^T + b with frozen W (out x in) and optional frozen bias.
template <class T>
Var<T> linear(const Var<T>& x, const Mat<T>& w, const RowVec<T>* b = nullptr) {
    if (x.cols() != w.cols())
        throw ContractError("linear: input width " + std::to_string(x.cols()) + " vs weight " + shape_str(w));
    Mat<T> y = x.value() * w.transpose();
    if (b) y.rowwise() += *b;
    const Mat<T>* wp = &w;
    return detail::make_op<T>(std::move(y), {x}, [wp](Node<T>& s) { detail::push<T>(s, 0, s.grad * (*wp)); });
}

/// y = x W^T + b with trainable W (out x in) and b (1 x out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x.cols() != w.cols() || b.rows() != 1 || b.cols() != w.rows())
        throw ContractError("linear: shape mismatch " + shape_str(x.value()) + " * " + shape_str(w.value()) + "^T");
    Mat<T> xv = x.value(), wv = w.value();
    Mat<T> y = xv * wv.transpose();
    y.rowwise() += b.value().row(0);
    return detail::make_op<T>(std::move(y), {x, w, b}, [xv, wv](Node<T>& s) {
        if (s.parents[0]->requires_grad) s.parents[0]->accumulate(s.grad * wv);
        if (s.parents[1]->requires_grad) s.parents[1]->accumulate(s.grad.transpose() * xv);
        if (s.parents[2]->requires_grad) s.parents[2]->accumulate(s.grad.colwise().sum());
    });
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <class T>
Var<T> layer_norm(const Var<T>& x, const RowVec<T>& gamma, const RowVec<T>& beta, T eps = T(1e-5)) {
    const Index n = x.rows(), d = x.cols();
    if (gamma.cols() != d || beta.cols() != d) throw ContractError("layer_norm: width mismatch");
    Mat<T> xhat(n, d), y(n, d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
    for (Index r = 0; r < n; ++r) {
        T mu = x.value().row(r).mean();
        auto centered = x.value().row(r).array() - mu;
        T var = centered.square().mean();
        inv_std(r) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = centered * inv_std(r);
        y.row(r) = xhat.row(r).cwiseProduct(gamma) + beta;
    }
    const RowVec<T>* gp = &gamma;
    return detail::make_op<T>(std::move(y), {x}, [xhat, inv_std, gp, d](Node<T>& s) {
        Mat<T> g(s.grad.rows(), d);
        for (Index r = 0; r < g.rows(); ++r) {
            RowVec<T> dxhat = s.grad.row(r).cwiseProduct(*gp);
            T m1 = dxhat.mean();
            T m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
            g.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
        }
        detail::push(s, 0, g);
    });
}

/// x * sigmoid(1.702 x), the activation of the original CLIP release.
template <class T>
Var<T> quick_gelu(const Var<T>& x) {
    Mat<T> sig = (T(1) + (T(-1.702) * x.value().array()).exp()).inverse().matrix();
    Mat<T> xv = x.value();
    return detail::make_op<T>(xv.cwiseProduct(sig), {x}, [xv, sig](Node<T>& s) {
        auto sg = sig.array();
        Mat<T> d = (sg + T(1.702) * xv.array() * sg * (T(1) - sg)).matrix();
        detail::push<T>(s, 0, s.grad.cwiseProduct(d));
    });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
    Mat<T> xv = x.value();
    const T inv_sqrt2 = T(0.70710678118654752440);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    Mat<T> y = xv.unaryExpr([&](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
    return detail::make_op<T>(std::move(y), {x}, [xv, inv_sqrt2, inv_sqrt2pi](Node<T>& s) {
        Mat<T> d = xv.unaryExpr([&](T v) {
            return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        });
        detail::push<T>(s, 0, s.grad.cwiseProduct(d));
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Mat<T> mask = (x.value().array() > T(0)).template cast<T>().matrix();
    return detail::make_op<T>(x.value().cwiseMax(T(0)), {x}, [mask](Node<T>& s) {
        detail::push<T>(s, 0, s.grad.cwiseProduct(mask));
    });
}

/// Row-wise division by the Euclidean norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
    const Index n = x.rows();
    Mat<T> y = x.value();
    Eigen::Matrix<T, Eigen::Dynamic, 1> norms(n);
    for (Index r = 0; r < n; ++r) {
        norms(r) = y.row(r).norm();
        if (norms(r) == T(0)) throw ContractError("l2_normalize_rows: zero row");
        y.row(r) /= norms(r);
    }
    return detail::make_op<T>(y, {x}, [y, norms](Node<T>& s) {
        Mat<T> g(s.grad.rows(), s.grad.cols());
        for (Index r = 0; r < g.rows(); ++r) {
            T dot = s.grad.row(r).dot(y.row(r));
            g.row(r) = (s.grad.row(r) - dot * y.row(r)) / norms(r);
        }
        detail::push(s, 0, g);
    });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention on a packed [q | k | v] input (n x 3d).
/// Returns the concatenated head outputs (n x d), before the output projection.
template <class T>
Var<T> attention(const Var<T>& qkv, int heads, bool causal) {
    const Index n = qkv.rows();
    const Index d = qkv.cols() / 3;
    if (qkv.cols() != 3 * d || heads <= 0 || d % heads != 0)
        throw ContractError("attention: packed width " + std::to_string(qkv.cols()) + " incompatible with " +
                            std::to_string(heads) + " heads");
    const Index dh = d / heads;
    const T scl = T(1) / std::sqrt(T(dh));
    const Mat<T>& in = qkv.value();

    std::vector<Mat<T>> probs(heads);
    Mat<T> out(n, d);
    for (int h = 0; h < heads; ++h) {
        auto q = in.middleCols(h * dh, dh);
        auto k = in.middleCols(d + h * dh, dh);
        auto v = in.middleCols(2 * d + h * dh, dh);
        Mat<T> sc = (q * k.transpose()) * scl;
        for (Index i = 0; i < n; ++i) {
            Index lim = causal ? i + 1 : n;
            T mx = sc.row(i).head(lim).maxCoeff();
            T z = 0;
            for (Index j = 0; j < lim; ++j) {
                sc(i, j) = std::exp(sc(i, j) - mx);
                z += sc(i, j);
            }
            for (Index j = 0; j < lim; ++j) sc(i, j) /= z;
            for (Index j = lim; j < n; ++j) sc(i, j) = T(0);
        }
        out.middleCols(h * dh, dh) = sc * v;
        probs[h] = std::move(sc);
    }
    if (!qkv.requires_grad()) return constant<T>(std::move(out));

    Mat<T> inv = in;
    return detail::make_op<T>(std::move(out), {qkv}, [inv, probs = std::move(probs), heads, d, dh, scl](Node<T>& s) {
        Mat<T> g = Mat<T>::Zero(inv.rows(), 3 * d);
        for (int h = 0; h < heads; ++h) {
            auto q = inv.middleCols(h * dh, dh);
            auto k = inv.middleCols(d + h * dh, dh);
            auto v = inv.middleCols(2 * d + h * dh, dh);
            const Mat<T>& p = probs[h];
            auto dout = s.grad.middleCols(h * dh, dh);
            g.middleCols(2 * d + h * dh, dh) = p.transpose() * dout;
            Mat<T> dp = dout * v.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
            Mat<T> ds = (p.array() * (dp.colwise() - rs).array()).matrix() * scl;
            g.middleCols(h * dh, dh) = ds * k;
            g.middleCols(d + h * dh, dh) = ds.transpose() * q;
        }
        detail::push(s, 0, g);
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Var<T> sum(const Var<T>& x) {
    Mat<T> v(1, 1);
    v(0, 0) = x.value().sum();
    Index r = x.rows(), c = x.cols();
    return detail::make_op<T>(std::move(v), {x}, [r, c](Node<T>& s) {
        detail::push<T>(s, 0, Mat<T>::Constant(r, c, s.grad(0, 0)));
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T(1) / T(x.value().size()));
}

/// mean(|a - b|); the subgradient at zero is zero.
template <class T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a.value(), b.value(), "l1_mean");
    Mat<T> diff = a.value() - b.value();
    Mat<T> v(1, 1);
    const T inv_n = T(1) / T(diff.size());
    v(0, 0) = diff.cwiseAbs().sum() * inv_n;
    Mat<T> sgn = diff.unaryExpr([](T x) { return T((x > T(0)) - (x < T(0))); });
    return detail::make_op<T>(std::move(v), {a, b}, [sgn, inv_n](Node<T>& s) {
        T g = s.grad(0, 0) * inv_n;
        detail::push<T>(s, 0, sgn * g);
        detail::push<T>(s, 1, sgn * (-g));
    });
}

template <class T>
Mat<T> log_softmax_rows(const Mat<T>& x) {
    Mat<T> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        T mx = x.row(r).maxCoeff();
        T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
        out.row(r) = x.row(r).array() - lse;
    }
    return out;
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const Index n = logits.rows(), c = logits.cols();
    if (static_cast<Index>(labels.size()) != n) throw ContractError("cross_entropy: label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= c) throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range");
    Mat<T> lsm = log_softmax_rows(logits.value());
    Mat<T> v(1, 1);
    v(0, 0) = 0;
    for (Index r = 0; r < n; ++r) v(0, 0) -= lsm(r, labels[r]);
    v(0, 0) /= T(n);
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::make_op<T>(std::move(v), {logits}, [lsm, lab](Node<T>& s) {
        Mat<T> g = lsm.array().exp().matrix();
        for (std::size_t r = 0; r < lab.size(); ++r) g(r, lab[r]) -= T(1);
        g *= s.grad(0, 0) / T(lab.size());
        detail::push(s, 0, g);
    });
}

/// sum_ij softmax(target)_ij * (log softmax(target)_ij - log softmax(input)_ij) / numel.
/// This is the batch-mean KL divergence of the input distribution from the target
/// distribution, scaled per element.
template <class T>
Var<T> kl_div_logits(const Var<T>& input, const Var<T>& target) {
    detail::check_same_shape(input.value(), target.value(), "kl_div_logits");
    Mat<T> li = log_softmax_rows(input.value());
    Mat<T> lt = log_softmax_rows(target.value());
    Mat<T> pt = lt.array().exp().matrix();
    Mat<T> pi = li.array().exp().matrix();
    const T inv_n = T(1) / T(li.size());
    Mat<T> v(1, 1);
    v(0, 0) = (pt.array() * (lt - li).array()).sum() * inv_n;
    return detail::make_op<T>(std::move(v), {input, target}, [li, lt, pt, pi, inv_n](Node<T>& s) {
        T g = s.grad(0, 0) * inv_n;
        // d/d input: softmax(input) * sum(pt) - pt = pi - pt per row (rows of pt sum to 1)
        if (s.parents[0]->requires_grad) s.parents[0]->accumulate((pi - pt) * g);
        if (s.parents[1]->requires_grad) {
            Mat<T> a = (pt.array() * (lt - li).array()).matrix();
            Mat<T> gt(a.rows(), a.cols());
            for (Index r = 0; r < a.rows(); ++r) gt.row(r) = a.row(r) - pt.row(r) * a.row(r).sum();
            s.parents[1]->accumulate(gt * g);
        }
    });
}

}  // namespace rsprompt::ad
