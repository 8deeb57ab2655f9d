#pragma once

#include <dyav/tensor.hpp>

#include <string>
#include <utility>
#include <vector>

namespace dyav {

// Named parameter registry; checkpoint I/O and the optimizer work off this.
struct Params {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) {
        for (const auto& [n, _] : items)
            check(n != name, "params: duplicate name " + name);
        items.emplace_back(name, t);
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(items.size());
        for (const auto& [_, t] : items) out.push_back(t);
        return out;
    }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        check(false, "params: missing " + name);
        return {};
    }
};

// Forward-pass context: training enables dropout, rng feeds it.
struct FwdCtx {
    bool training = false;
    Rng* rng = nullptr;
};

inline void set_trainable(Tensor& t, bool trainable) {
    t.node()->requires_grad = trainable;
}

// Optional low-rank adapter on a Linear: y += (alpha/r) * drop(x) A^T B^T.
// B starts at zero so the adapted layer equals the base layer at init.
struct Lora {
    Tensor A;  // [r, in]
    Tensor B;  // [out, r]
    float scaling = 0.f;
    float dropout = 0.f;

    bool active() const { return A.defined(); }
};

struct Linear {
    Tensor W;  // [in, out]
    Tensor b;  // [1, out]
    Lora lora;

    static Linear create(int in, int out, Rng& rng, bool rg = true) {
        Linear l;
        l.W = Tensor::randn({in, out}, rng, 1.f / std::sqrt(float(in)), rg);
        l.b = Tensor::make({1, out}, rg);
        return l;
    }

    static Linear zeros(int in, int out, bool rg = true) {
        Linear l;
        l.W = Tensor::make({in, out}, rg);
        l.b = Tensor::make({1, out}, rg);
        return l;
    }

    int in_features() const { return W.dim(0); }
    int out_features() const { return W.dim(1); }

    void add_lora(int rank, float alpha, float dropout, Rng& rng) {
        lora.A = Tensor::randn({rank, in_features()}, rng,
                               1.f / std::sqrt(float(in_features())), true);
        lora.B = Tensor::make({out_features(), rank}, true);
        lora.scaling = alpha / float(rank);
        lora.dropout = dropout;
    }

    // folds the adapter into the base weights: W += scaling * (B A)^T
    void merge_lora() {
        check(lora.active(), "merge_lora: no adapter");
        const int in = in_features(), out = out_features(), r = lora.A.dim(0);
        for (int i = 0; i < in; ++i)
            for (int o = 0; o < out; ++o) {
                float acc = 0;
                for (int k = 0; k < r; ++k)
                    acc += lora.B.at(size_t(o) * r + k) * lora.A.at(size_t(k) * in + i);
                W.data()[size_t(i) * out + o] += lora.scaling * acc;
            }
        lora = Lora{};
    }

    Tensor forward(const Tensor& x, const FwdCtx& ctx = {}) const {
        Tensor y = add_rowvec(matmul(x, W), b);
        if (lora.active()) {
            Tensor xin = x;
            if (ctx.training && lora.dropout > 0.f) {
                check(ctx.rng, "linear: training forward needs an rng");
                xin = dropout(xin, lora.dropout, *ctx.rng, true);
            }
            Tensor low = matmul(xin, lora.A, false, true);   // [N, r]
            Tensor up = matmul(low, lora.B, false, true);    // [N, out]
            y = add(y, scale(up, lora.scaling));
        }
        return y;
    }

    void collect(const std::string& prefix, Params& p) const {
        p.add(prefix + ".weight", W);
        p.add(prefix + ".bias", b);
        if (lora.active()) {
            p.add("lora." + prefix + ".A", lora.A);
            p.add("lora." + prefix + ".B", lora.B);
        }
    }

    void freeze_base() {
        set_trainable(W, false);
        set_trainable(b, false);
    }
};

// 3-layer GELU MLP used by the motion encoder.
struct Mlp3 {
    Linear l0, l1, l2;

    static Mlp3 create(int in, int h0, int h1, int out, Rng& rng) {
        return {Linear::create(in, h0, rng), Linear::create(h0, h1, rng),
                Linear::create(h1, out, rng)};
    }

    Tensor forward(const Tensor& x, const FwdCtx& ctx = {}) const {
        return l2.forward(gelu_(l1.forward(gelu_(l0.forward(x, ctx)), ctx)), ctx);
    }

    void collect(const std::string& prefix, Params& p) const {
        l0.collect(prefix + ".l0", p);
        l1.collect(prefix + ".l1", p);
        l2.collect(prefix + ".l2", p);
    }
};

// AdaLN: out = alpha * (gamma * LN(x) + beta) with (gamma, beta, alpha)
// produced from the conditioning vector by a zero-weight linear whose bias
// starts at (1, 0, 1), i.e. plain layernorm at init.
struct AdaLN {
    Linear mod;  // d_model -> 3*d_model
    int d = 0;

    static AdaLN create(int d_model, bool rg = true) {
        AdaLN a;
        a.d = d_model;
        a.mod = Linear::zeros(d_model, 3 * d_model, rg);
        for (int i = 0; i < d_model; ++i) {
            a.mod.b.data()[i] = 1.f;                 // gamma
            a.mod.b.data()[2 * d_model + i] = 1.f;   // alpha
        }
        return a;
    }

    Tensor forward(const Tensor& x, const Tensor& cond, const FwdCtx& ctx = {}) const {
        check(cond.rows() == 1 && cond.cols() == d, "adaln: cond must be [1, d_model]");
        Tensor gba = mod.forward(cond, ctx);  // [1, 3d]
        Tensor gamma = slice_cols(gba, 0, d);
        Tensor beta = slice_cols(gba, d, d);
        Tensor alpha = slice_cols(gba, 2 * d, d);
        Tensor y = layernorm_rows(x);
        return mul_rowvec(add_rowvec(mul_rowvec(y, gamma), beta), alpha);
    }

    void collect(const std::string& prefix, Params& p) const {
        mod.collect(prefix + ".mod", p);
    }
};

// Multi-head attention over already-projected q/k/v, heads as column slices.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int heads) {
    const int d = q.cols();
    check(d % heads == 0, "attention: d_model not divisible by head count");
    const int dh = d / heads;
    std::vector<Tensor> outs;
    outs.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h)
        outs.push_back(softmax_attention(slice_cols(q, h * dh, dh),
                                         slice_cols(k, h * dh, dh),
                                         slice_cols(v, h * dh, dh)));
    return concat_cols(outs);
}

// MM-DiT style multimodal block: two token streams with stream-specific
// projections and AdaLN modulation, joint attention over the concatenation,
// then per-stream 4x MLPs. Zero-initialized output projections make the
// whole block an identity map at init.
struct MmBlock {
    int d = 0, heads = 4;
    AdaLN ln_a1, ln_b1, ln_a2, ln_b2;
    Linear q_a, k_a, v_a, o_a;
    Linear q_b, k_b, v_b, o_b;
    Linear mlp_a1, mlp_a2, mlp_b1, mlp_b2;

    static MmBlock create(int d_model, int heads, Rng& rng) {
        MmBlock m;
        m.d = d_model;
        m.heads = heads;
        m.ln_a1 = AdaLN::create(d_model);
        m.ln_b1 = AdaLN::create(d_model);
        m.ln_a2 = AdaLN::create(d_model);
        m.ln_b2 = AdaLN::create(d_model);
        m.q_a = Linear::create(d_model, d_model, rng);
        m.k_a = Linear::create(d_model, d_model, rng);
        m.v_a = Linear::create(d_model, d_model, rng);
        m.o_a = Linear::zeros(d_model, d_model);
        m.q_b = Linear::create(d_model, d_model, rng);
        m.k_b = Linear::create(d_model, d_model, rng);
        m.v_b = Linear::create(d_model, d_model, rng);
        m.o_b = Linear::zeros(d_model, d_model);
        m.mlp_a1 = Linear::create(d_model, 4 * d_model, rng);
        m.mlp_a2 = Linear::zeros(4 * d_model, d_model);
        m.mlp_b1 = Linear::create(d_model, 4 * d_model, rng);
        m.mlp_b2 = Linear::zeros(4 * d_model, d_model);
        return m;
    }

    // a: query stream (point tokens), b: context stream; cond [1, d_model]
    std::pair<Tensor, Tensor> forward(const Tensor& a, const Tensor& b,
                                      const Tensor& cond, const FwdCtx& ctx = {}) const {
        check(b.rows() >= 1, "mm_block: context stream must be non-empty");
        const int na = a.rows();
        Tensor ha = ln_a1.forward(a, cond, ctx);
        Tensor hb = ln_b1.forward(b, cond, ctx);
        Tensor q = concat_rows({q_a.forward(ha, ctx), q_b.forward(hb, ctx)});
        Tensor k = concat_rows({k_a.forward(ha, ctx), k_b.forward(hb, ctx)});
        Tensor v = concat_rows({v_a.forward(ha, ctx), v_b.forward(hb, ctx)});
        Tensor att = multihead_attention(q, k, v, heads);
        Tensor a1 = add(a, o_a.forward(slice_rows(att, 0, na), ctx));
        Tensor b1 = add(b, o_b.forward(slice_rows(att, na, b.rows()), ctx));
        Tensor a2 = add(a1, mlp_a2.forward(gelu_(mlp_a1.forward(ln_a2.forward(a1, cond, ctx), ctx)), ctx));
        Tensor b2 = add(b1, mlp_b2.forward(gelu_(mlp_b1.forward(ln_b2.forward(b1, cond, ctx), ctx)), ctx));
        return {a2, b2};
    }

    void collect(const std::string& prefix, Params& p) const {
        ln_a1.collect(prefix + ".ln_a1", p);
        ln_b1.collect(prefix + ".ln_b1", p);
        ln_a2.collect(prefix + ".ln_a2", p);
        ln_b2.collect(prefix + ".ln_b2", p);
        q_a.collect(prefix + ".q_a", p);
        k_a.collect(prefix + ".k_a", p);
        v_a.collect(prefix + ".v_a", p);
        o_a.collect(prefix + ".o_a", p);
        q_b.collect(prefix + ".q_b", p);
        k_b.collect(prefix + ".k_b", p);
        v_b.collect(prefix + ".v_b", p);
        o_b.collect(prefix + ".o_b", p);
        mlp_a1.collect(prefix + ".mlp_a1", p);
        mlp_a2.collect(prefix + ".mlp_a2", p);
        mlp_b1.collect(prefix + ".mlp_b1", p);
        mlp_b2.collect(prefix + ".mlp_b2", p);
    }

    template <class F>
    void each_linear(F&& f) {
        for (Linear* l : {&ln_a1.mod, &ln_b1.mod, &ln_a2.mod, &ln_b2.mod,
                          &q_a, &k_a, &v_a, &o_a, &q_b, &k_b, &v_b, &o_b,
                          &mlp_a1, &mlp_a2, &mlp_b1, &mlp_b2})
            f(*l);
    }
};

}  // namespace dyav
