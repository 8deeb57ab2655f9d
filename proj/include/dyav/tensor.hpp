#ifndef DYAV_TENSOR_HPP
#define DYAV_TENSOR_HPP

// Reverse-mode autodiff over dense f32 tensors. A Tensor is a handle to a
// graph node; ops build closures that scatter output gradients back to their
// inputs. Backward walks the graph once in reverse topological order.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>

#include <Eigen/Dense>

#include "core.hpp"

namespace dyav {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
    return r + "]";
}

struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;          // lazily allocated, same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn; // reads this->grad, accumulates into parents

    size_t numel() const { return value.size(); }
    void ensure_grad() { if (grad.size() != value.size()) grad.assign(value.size(), 0.0f); }
    void release_tape() { parents.clear(); backward_fn = nullptr; }
};

class Tape;
namespace detail { inline Tape*& current_tape() { static thread_local Tape* t = nullptr; return t; } }

// Records every node created while active, in creation order (which is a
// valid topological order). Clearing drops saved activations and graph links.
class Tape {
public:
    Tape() { prev_ = detail::current_tape(); detail::current_tape() = this; }
    ~Tape() { detail::current_tape() = prev_; }
    Tape(const Tape&) = delete;

    void record(const std::shared_ptr<TensorNode>& n) { records_.push_back(n); }

    void clear() {
        for (auto& n : records_) n->release_tape();
        records_.clear();
    }
    void zero_grad() {
        for (auto& n : records_) std::fill(n->grad.begin(), n->grad.end(), 0.0f);
    }
    size_t size() const { return records_.size(); }

private:
    std::vector<std::shared_ptr<TensorNode>> records_;
    Tape* prev_ = nullptr;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor make(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value.assign(shape_numel(n->shape), 0.0f);
        n->requires_grad = requires_grad;
        if (Tape* t = detail::current_tape()) t->record(n);
        return Tensor(n);
    }
    static Tensor zeros(Shape s, bool rg = false) { return make(std::move(s), rg); }
    static Tensor full(Shape s, float v, bool rg = false) {
        Tensor t = make(std::move(s), rg);
        std::fill(t.data(), t.data() + t.numel(), v);
        return t;
    }
    static Tensor scalar(float v, bool rg = false) { return full({1}, v, rg); }
    static Tensor from(Shape s, std::vector<float> vals, bool rg = false) {
        Tensor t = make(std::move(s), rg);
        check(vals.size() == t.numel(), "from: data size mismatch");
        std::copy(vals.begin(), vals.end(), t.data());
        return t;
    }
    static Tensor randn(Shape s, Rng& rng, float stddev = 1.0f, bool rg = false) {
        Tensor t = make(std::move(s), rg);
        for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = stddev * rng.normal();
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    size_t numel() const { return n_->numel(); }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int rank() const { return int(n_->shape.size()); }
    int rows() const { check(rank() == 2, "rows: rank!=2"); return dim(0); }
    int cols() const { check(rank() == 2, "cols: rank!=2"); return dim(1); }

    float* data() { return n_->value.data(); }
    const float* data() const { return n_->value.data(); }
    float item() const { check(numel() == 1, "item: not a scalar"); return data()[0]; }
    float at(size_t i) const { return n_->value[i]; }

    bool requires_grad() const { return n_->requires_grad; }
    float* grad() { n_->ensure_grad(); return n_->grad.data(); }
    const std::vector<float>& grad_vec() { n_->ensure_grad(); return n_->grad; }
    void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), 0.0f); }

    std::shared_ptr<TensorNode> node() const { return n_; }

    // Reverse topological walk from this node; each node visited exactly once.
    void backward() const {
        check(numel() == 1, "backward: root must be scalar");
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<std::pair<TensorNode*, size_t>> stack{{n_.get(), 0}};
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                TensorNode* p = node->parents[idx++].get();
                if (seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->ensure_grad();
        n_->grad[0] += 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn();
    }

private:
    std::shared_ptr<TensorNode> n_;
};

namespace detail {

inline Tensor op_output(Shape shape, const std::vector<Tensor>& inputs) {
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    Tensor out = Tensor::make(std::move(shape), rg);
    if (rg) {
        for (const auto& t : inputs)
            out.node()->parents.push_back(t.node());
    }
    return out;
}

inline void set_backward(Tensor& out, std::function<void()> fn) {
    if (out.requires_grad()) out.node()->backward_fn = std::move(fn);
}

inline void accum(TensorNode* n, size_t i, float v) {
    if (n->requires_grad) { n->ensure_grad(); n->grad[i] += v; }
}

} // namespace detail

// ---------------------------------------------------------------------------
// element-wise

namespace detail {
template <class F, class DF>
inline Tensor ewise_binary(const Tensor& a, const Tensor& b, F f, DF df, const char* name) {
    check(a.shape() == b.shape(), std::string(name) + ": shape mismatch " +
          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = op_output(a.shape(), {a, b});
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = f(a.at(i), b.at(i));
    auto an = a.node(), bn = b.node(); auto on = out.node().get();
    set_backward(out, [an, bn, on, df] {
        for (size_t i = 0; i < on->value.size(); ++i) {
            auto [da, db] = df(an->value[i], bn->value[i], on->value[i]);
            if (an->requires_grad) { an->ensure_grad(); an->grad[i] += on->grad[i] * da; }
            if (bn->requires_grad) { bn->ensure_grad(); bn->grad[i] += on->grad[i] * db; }
        }
    });
    return out;
}

template <class F, class DF>
inline Tensor ewise_unary(const Tensor& a, F f, DF df) {
    Tensor out = op_output(a.shape(), {a});
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = f(a.at(i));
    auto an = a.node(); auto on = out.node().get();
    set_backward(out, [an, on, df] {
        an->ensure_grad();
        for (size_t i = 0; i < on->value.size(); ++i)
            an->grad[i] += on->grad[i] * df(an->value[i], on->value[i]);
    });
    return out;
}
} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(a, b, [](float x, float y) { return x + y; },
        [](float, float, float) { return std::pair{1.0f, 1.0f}; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(a, b, [](float x, float y) { return x - y; },
        [](float, float, float) { return std::pair{1.0f, -1.0f}; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(a, b, [](float x, float y) { return x * y; },
        [](float x, float y, float) { return std::pair{y, x}; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(a, b, [](float x, float y) { return x / y; },
        [](float x, float y, float) { return std::pair{1.0f / y, -x / (y * y)}; }, "div");
}

inline Tensor scale(const Tensor& a, float c) {
    return detail::ewise_unary(a, [c](float x) { return c * x; },
                               [c](float, float) { return c; });
}
inline Tensor add_const(const Tensor& a, float c) {
    return detail::ewise_unary(a, [c](float x) { return x + c; },
                               [](float, float) { return 1.0f; });
}
inline Tensor exp_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return std::exp(x); },
                               [](float, float y) { return y; });
}
inline Tensor log_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return std::log(x); },
                               [](float x, float) { return 1.0f / x; });
}
inline Tensor sqrt_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return std::sqrt(x); },
                               [](float, float y) { return 0.5f / std::max(y, 1e-12f); });
}
inline Tensor square(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return x * x; },
                               [](float x, float) { return 2.0f * x; });
}
inline Tensor abs_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return std::fabs(x); },
                               [](float x, float) { return x > 0 ? 1.0f : (x < 0 ? -1.0f : 0.0f); });
}
inline Tensor sigmoid_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                               [](float, float y) { return y * (1.0f - y); });
}
inline Tensor tanh_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return std::tanh(x); },
                               [](float, float y) { return 1.0f - y * y; });
}
inline Tensor relu_(const Tensor& a) {
    return detail::ewise_unary(a, [](float x) { return x > 0 ? x : 0.0f; },
                               [](float x, float) { return x > 0 ? 1.0f : 0.0f; });
}
// tanh-approximation GELU
inline Tensor gelu_(const Tensor& a) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    auto f = [](float x) {
        float u = k * (x + 0.044715f * x * x * x);
        return 0.5f * x * (1.0f + std::tanh(u));
    };
    auto df = [](float x, float) {
        float u = k * (x + 0.044715f * x * x * x);
        float th = std::tanh(u);
        float du = k * (1.0f + 3.0f * 0.044715f * x * x);
        return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
    };
    return detail::ewise_unary(a, f, df);
}
// gradient passes through inside the interval, zero outside
inline Tensor clamp_(const Tensor& a, float lo, float hi) {
    return detail::ewise_unary(a, [lo, hi](float x) { return std::min(std::max(x, lo), hi); },
                               [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

// ---------------------------------------------------------------------------
// broadcast over rows: x [N,d] (+|*) v [d]

inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    check(x.rank() == 2 && v.numel() == size_t(x.cols()), "add_rowvec: width mismatch");
    Tensor out = detail::op_output(x.shape(), {x, v});
    int N = x.rows(), d = x.cols();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j)
            out.data()[i * d + j] = x.at(size_t(i) * d + j) + v.at(size_t(j));
    auto xn = x.node(), vn = v.node(); auto on = out.node().get();
    detail::set_backward(out, [xn, vn, on, N, d] {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < d; ++j)
                    vn->grad[size_t(j)] += on->grad[size_t(i) * d + j];
        }
    });
    return out;
}

inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    check(x.rank() == 2 && v.numel() == size_t(x.cols()), "mul_rowvec: width mismatch");
    Tensor out = detail::op_output(x.shape(), {x, v});
    int N = x.rows(), d = x.cols();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j)
            out.data()[i * d + j] = x.at(size_t(i) * d + j) * v.at(size_t(j));
    auto xn = x.node(), vn = v.node(); auto on = out.node().get();
    detail::set_backward(out, [xn, vn, on, N, d] {
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < d; ++j) {
                float g = on->grad[size_t(i) * d + j];
                if (xn->requires_grad) { xn->ensure_grad(); xn->grad[size_t(i) * d + j] += g * vn->value[size_t(j)]; }
                if (vn->requires_grad) { vn->ensure_grad(); vn->grad[size_t(j)] += g * xn->value[size_t(i) * d + j]; }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {
using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C (+)= op(A) * op(B). Parallel over fixed 64-row output blocks; each output
// element is produced by exactly one thread, so results are identical for any
// thread count.
inline void sgemm(const float* A, int ar, int ac, bool ta,
                  const float* B, int br, int bc, bool tb,
                  float* C, bool accumulate) {
    int m = ta ? ac : ar, k = ta ? ar : ac, n = tb ? br : bc;
    check((tb ? bc : br) == k, "matmul: inner extent mismatch");
    ECMap Am(A, ar, ac); ECMap Bm(B, br, bc); EMap Cm(C, m, n);
    constexpr int BLK = 64;
    int nblocks = (m + BLK - 1) / BLK;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int b = 0; b < nblocks; ++b) {
        int r0 = b * BLK, nr = std::min(BLK, m - r0);
        auto Cblk = Cm.middleRows(r0, nr);
        if (!ta && !tb) {
            if (accumulate) Cblk.noalias() += Am.middleRows(r0, nr) * Bm;
            else            Cblk.noalias() = Am.middleRows(r0, nr) * Bm;
        } else if (!ta && tb) {
            if (accumulate) Cblk.noalias() += Am.middleRows(r0, nr) * Bm.transpose();
            else            Cblk.noalias() = Am.middleRows(r0, nr) * Bm.transpose();
        } else if (ta && !tb) {
            if (accumulate) Cblk.noalias() += Am.middleCols(r0, nr).transpose() * Bm;
            else            Cblk.noalias() = Am.middleCols(r0, nr).transpose() * Bm;
        } else {
            if (accumulate) Cblk.noalias() += Am.middleCols(r0, nr).transpose() * Bm.transpose();
            else            Cblk.noalias() = Am.middleCols(r0, nr).transpose() * Bm.transpose();
        }
    }
}
} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: rank!=2");
    int m = ta ? a.cols() : a.rows();
    int ka = ta ? a.rows() : a.cols();
    int kb = tb ? b.cols() : b.rows();
    int n = tb ? b.rows() : b.cols();
    check(ka == kb, "matmul: dimension mismatch " + shape_str(a.shape()) +
          (ta ? "^T" : "") + " * " + shape_str(b.shape()) + (tb ? "^T" : ""));
    Tensor out = detail::op_output({m, n}, {a, b});
    detail::sgemm(a.data(), a.rows(), a.cols(), ta, b.data(), b.rows(), b.cols(), tb,
                  out.data(), false);
    auto an = a.node(), bn = b.node(); auto on = out.node().get();
    detail::set_backward(out, [an, bn, on, ta, tb, m, n] {
        int arr = int(an->shape[0]), acc = int(an->shape[1]);
        int brr = int(bn->shape[0]), bcc = int(bn->shape[1]);
        if (an->requires_grad) {
            an->ensure_grad();
            // dA = dC * B^T (layout depends on transpose flags)
            if (!ta) detail::sgemm(on->grad.data(), m, n, false, bn->value.data(), brr, bcc, !tb,
                                   an->grad.data(), true);
            else     detail::sgemm(bn->value.data(), brr, bcc, tb, on->grad.data(), m, n, true,
                                   an->grad.data(), true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (!tb) detail::sgemm(an->value.data(), arr, acc, !ta, on->grad.data(), m, n, false,
                                   bn->grad.data(), true);
            else     detail::sgemm(on->grad.data(), m, n, true, an->value.data(), arr, acc, ta,
                                   bn->grad.data(), true);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::op_output({1}, {a});
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    out.data()[0] = float(s);
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on] {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[0];
    });
    return out;
}
inline Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0f / float(a.numel()));
}

// [N,d] -> [1,d], mean over rows
inline Tensor mean_rows(const Tensor& a) {
    check(a.rank() == 2, "mean_rows: rank!=2");
    int N = a.rows(), d = a.cols();
    Tensor out = detail::op_output({1, d}, {a});
    for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int i = 0; i < N; ++i) s += a.at(size_t(i) * d + j);
        out.data()[j] = float(s / N);
    }
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, N, d] {
        an->ensure_grad();
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < d; ++j)
                an->grad[size_t(i) * d + j] += on->grad[size_t(j)] / float(N);
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layernorm over the last dimension of a 2-D tensor

inline Tensor softmax_rows(const Tensor& a) {
    check(a.rank() == 2, "softmax_rows: rank!=2");
    int N = a.rows(), d = a.cols();
    Tensor out = detail::op_output(a.shape(), {a});
    for (int i = 0; i < N; ++i) {
        const float* x = a.data() + size_t(i) * d;
        float* y = out.data() + size_t(i) * d;
        float mx = *std::max_element(x, x + d);
        double s = 0.0;
        for (int j = 0; j < d; ++j) { y[j] = std::exp(x[j] - mx); s += y[j]; }
        for (int j = 0; j < d; ++j) y[j] = float(y[j] / s);
    }
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, N, d] {
        an->ensure_grad();
        for (int i = 0; i < N; ++i) {
            const float* y = on->value.data() + size_t(i) * d;
            const float* g = on->grad.data() + size_t(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += double(y[j]) * g[j];
            float* ga = an->grad.data() + size_t(i) * d;
            for (int j = 0; j < d; ++j) ga[j] += y[j] * (g[j] - float(dot));
        }
    });
    return out;
}

inline Tensor layernorm_rows(const Tensor& a, float eps = 1e-5f) {
    check(a.rank() == 2, "layernorm_rows: rank!=2");
    int N = a.rows(), d = a.cols();
    Tensor out = detail::op_output(a.shape(), {a});
    std::vector<float> inv_std(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        const float* x = a.data() + size_t(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) { double c = x[j] - mu; var += c * c; }
        var /= d;
        float is = 1.0f / std::sqrt(float(var) + eps);
        inv_std[size_t(i)] = is;
        float* y = out.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) y[j] = (x[j] - float(mu)) * is;
    }
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, N, d, inv_std = std::move(inv_std)] {
        an->ensure_grad();
        for (int i = 0; i < N; ++i) {
            const float* y = on->value.data() + size_t(i) * d;
            const float* g = on->grad.data() + size_t(i) * d;
            double gsum = 0.0, gysum = 0.0;
            for (int j = 0; j < d; ++j) { gsum += g[j]; gysum += double(g[j]) * y[j]; }
            float is = inv_std[size_t(i)];
            float* ga = an->grad.data() + size_t(i) * d;
            for (int j = 0; j < d; ++j)
                ga[j] += is * (g[j] - float(gsum) / d - y[j] * float(gysum) / d);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// slicing / concatenation (2-D)

inline Tensor slice_rows(const Tensor& a, int r0, int n) {
    check(a.rank() == 2 && r0 >= 0 && r0 + n <= a.rows(), "slice_rows: out of range");
    int d = a.cols();
    Tensor out = detail::op_output({n, d}, {a});
    std::copy(a.data() + size_t(r0) * d, a.data() + size_t(r0 + n) * d, out.data());
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, r0, n, d] {
        an->ensure_grad();
        for (size_t i = 0; i < size_t(n) * d; ++i) an->grad[size_t(r0) * d + i] += on->grad[i];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows: empty");
    int d = parts[0].cols(), N = 0;
    for (const auto& p : parts) { check(p.cols() == d, "concat_rows: width mismatch"); N += p.rows(); }
    Tensor out = detail::op_output({N, d}, parts);
    int r = 0;
    std::vector<int> offs;
    for (const auto& p : parts) {
        offs.push_back(r);
        std::copy(p.data(), p.data() + p.numel(), out.data() + size_t(r) * d);
        r += p.rows();
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node().get();
    detail::set_backward(out, [nodes, offs, on, d] {
        for (size_t k = 0; k < nodes.size(); ++k) {
            auto& nk = nodes[k];
            if (!nk->requires_grad) continue;
            nk->ensure_grad();
            size_t base = size_t(offs[k]) * d;
            for (size_t i = 0; i < nk->grad.size(); ++i) nk->grad[i] += on->grad[base + i];
        }
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int n) {
    check(a.rank() == 2 && c0 >= 0 && c0 + n <= a.cols(), "slice_cols: out of range");
    int N = a.rows(), d = a.cols();
    Tensor out = detail::op_output({N, n}, {a});
    for (int i = 0; i < N; ++i)
        std::copy(a.data() + size_t(i) * d + c0, a.data() + size_t(i) * d + c0 + n,
                  out.data() + size_t(i) * n);
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, c0, n, N, d] {
        an->ensure_grad();
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < n; ++j)
                an->grad[size_t(i) * d + c0 + j] += on->grad[size_t(i) * n + j];
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    int N = parts[0].rows(), d = 0;
    for (const auto& p : parts) { check(p.rows() == N, "concat_cols: height mismatch"); d += p.cols(); }
    Tensor out = detail::op_output({N, d}, parts);
    int c = 0;
    std::vector<int> offs;
    for (const auto& p : parts) {
        offs.push_back(c);
        for (int i = 0; i < N; ++i)
            std::copy(p.data() + size_t(i) * p.cols(), p.data() + size_t(i + 1) * p.cols(),
                      out.data() + size_t(i) * d + c);
        c += p.cols();
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node().get();
    detail::set_backward(out, [nodes, offs, on, N, d] {
        for (size_t k = 0; k < nodes.size(); ++k) {
            auto& nk = nodes[k];
            if (!nk->requires_grad) continue;
            nk->ensure_grad();
            int w = int(nk->shape[1]);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < w; ++j)
                    nk->grad[size_t(i) * w + j] += on->grad[size_t(i) * d + offs[k] + j];
        }
    });
    return out;
}

inline Tensor reshape(const Tensor& a, Shape s) {
    check(shape_numel(s) == a.numel(), "reshape: numel mismatch");
    Tensor out = detail::op_output(std::move(s), {a});
    std::copy(a.data(), a.data() + a.numel(), out.data());
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on] {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// grid sample, separable blur, dropout

// map: [H,W,C]; points are (x,y) pixel coordinates (constants). Out-of-range
// points clamp to the border; the clamp count is reported via *clamped.
inline Tensor grid_sample_bilinear(const Tensor& map, const std::vector<std::array<float, 2>>& pts,
                                   int* clamped = nullptr) {
    check(map.rank() == 3, "grid_sample: map must be [H,W,C]");
    int H = map.dim(0), W = map.dim(1), C = map.dim(2);
    int N = int(pts.size());
    Tensor out = detail::op_output({N, C}, {map});
    struct Tap { int idx; float w; };
    std::vector<std::array<Tap, 4>> taps(static_cast<size_t>(N));
    int nclamp = 0;
    for (int i = 0; i < N; ++i) {
        float x = pts[size_t(i)][0], y = pts[size_t(i)][1];
        float cx = std::min(std::max(x, 0.0f), float(W - 1));
        float cy = std::min(std::max(y, 0.0f), float(H - 1));
        if (cx != x || cy != y) ++nclamp;
        int x0 = std::min(int(cx), W - 2 >= 0 ? W - 2 : 0), y0 = std::min(int(cy), H - 2 >= 0 ? H - 2 : 0);
        if (W == 1) x0 = 0;
        if (H == 1) y0 = 0;
        float fx = cx - x0, fy = cy - y0;
        int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        taps[size_t(i)] = {Tap{(y0 * W + x0) * C, (1 - fx) * (1 - fy)},
                           Tap{(y0 * W + x1) * C, fx * (1 - fy)},
                           Tap{(y1 * W + x0) * C, (1 - fx) * fy},
                           Tap{(y1 * W + x1) * C, fx * fy}};
        for (int c = 0; c < C; ++c) {
            float v = 0;
            for (const auto& t : taps[size_t(i)]) v += t.w * map.at(size_t(t.idx + c));
            out.data()[size_t(i) * C + c] = v;
        }
    }
    if (clamped) *clamped = nclamp;
    auto mn = map.node(); auto on = out.node().get();
    detail::set_backward(out, [mn, on, taps = std::move(taps), N, C] {
        mn->ensure_grad();
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c) {
                float g = on->grad[size_t(i) * C + c];
                for (const auto& t : taps[size_t(i)]) mn->grad[size_t(t.idx + c)] += t.w * g;
            }
    });
    return out;
}

// Separable 2-D convolution of [H,W,C] with a symmetric 1-D kernel,
// border replicated. Symmetric kernel makes backward = forward on gradients.
inline Tensor blur_separable(const Tensor& img, const std::vector<float>& kernel) {
    check(img.rank() == 3, "blur: img must be [H,W,C]");
    check(kernel.size() % 2 == 1, "blur: kernel must be odd");
    int H = img.dim(0), W = img.dim(1), C = img.dim(2);
    int R = int(kernel.size()) / 2;
    auto pass = [H, W, C, R, kernel](const std::vector<float>& src, std::vector<float>& dst, bool horizontal) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < C; ++c) {
                    double s = 0.0;
                    for (int t = -R; t <= R; ++t) {
                        int xx = x, yy = y;
                        if (horizontal) xx = std::min(std::max(x + t, 0), W - 1);
                        else            yy = std::min(std::max(y + t, 0), H - 1);
                        s += double(kernel[size_t(t + R)]) * src[(size_t(yy) * W + xx) * C + c];
                    }
                    dst[(size_t(y) * W + x) * C + c] = float(s);
                }
    };
    Tensor out = detail::op_output(img.shape(), {img});
    std::vector<float> tmp(img.numel());
    {
        std::vector<float> src(img.data(), img.data() + img.numel());
        pass(src, tmp, true);
        std::vector<float> dst(img.numel());
        pass(tmp, dst, false);
        std::copy(dst.begin(), dst.end(), out.data());
    }
    // adjoint of a clamped-border convolution scatters into the clamped
    // index instead of reading from it, so it is not the forward pass
    auto adjoint = [H, W, C, R, kernel](const std::vector<float>& src, std::vector<float>& dst,
                                        bool horizontal) {
        std::fill(dst.begin(), dst.end(), 0.0f);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < C; ++c) {
                    float g = src[(size_t(y) * W + x) * C + c];
                    for (int t = -R; t <= R; ++t) {
                        int xx = x, yy = y;
                        if (horizontal) xx = std::min(std::max(x + t, 0), W - 1);
                        else            yy = std::min(std::max(y + t, 0), H - 1);
                        dst[(size_t(yy) * W + xx) * C + c] += kernel[size_t(t + R)] * g;
                    }
                }
    };
    auto in = img.node(); auto on = out.node().get();
    detail::set_backward(out, [in, on, adjoint] {
        in->ensure_grad();
        std::vector<float> t1(on->grad.size()), t2(on->grad.size());
        adjoint(on->grad, t1, false);
        adjoint(t1, t2, true);
        for (size_t i = 0; i < t2.size(); ++i) in->grad[i] += t2[i];
    });
    return out;
}

inline Tensor dropout(const Tensor& a, float p, Rng& rng, bool training) {
    if (!training || p <= 0.0f) return a;
    Tensor out = detail::op_output(a.shape(), {a});
    std::vector<float> mask(a.numel());
    float keep = 1.0f - p;
    for (size_t i = 0; i < a.numel(); ++i) {
        mask[i] = rng.uniform() < p ? 0.0f : 1.0f / keep;
        out.data()[i] = a.at(i) * mask[i];
    }
    auto an = a.node(); auto on = out.node().get();
    detail::set_backward(out, [an, on, mask = std::move(mask)] {
        an->ensure_grad();
        for (size_t i = 0; i < mask.size(); ++i) an->grad[i] += on->grad[i] * mask[i];
    });
    return out;
}

// softmax(q k^T / sqrt(d)) v  — the attention primitive
inline Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check(k.rows() >= 1, "softmax_attention: empty key set");
    check(q.cols() == k.cols() && k.rows() == v.rows(), "softmax_attention: shape mismatch");
    Tensor scores = scale(matmul(q, k, false, true), 1.0f / std::sqrt(float(q.cols())));
    return matmul(softmax_rows(scores), v);
}

} // namespace dyav

#endif
