#pragma once

// Finite-difference audit of every differentiable operator, runnable from the
// CLI. Each entry perturbs leaf values with central differences and compares
// against the reverse-mode gradients.

#include <dyav/animation.hpp>
#include <dyav/losses.hpp>
#include <dyav/model.hpp>
#include <dyav/splatter.hpp>

#include <functional>
#include <string>
#include <vector>

namespace dyav {

struct GradCheckEntry {
    std::string name;
    float max_rel_err = 0.f;
    float tol = 1e-3f;
    size_t checked = 0;
    bool pass = false;
};

namespace gradcheck_detail {

// |analytic - fd| < atol absorbs f32 quantization on near-zero entries; the
// relative error is what the tolerance judges.
inline float fd_max_rel(const std::vector<Tensor>& leaves, const std::function<Tensor()>& forward,
                        size_t& checked, float step, float atol) {
    for (auto leaf : leaves) { leaf.grad(); leaf.zero_grad(); }
    {
        Tape tape;
        forward().backward();
    }
    std::vector<std::vector<float>> analytic;
    for (auto leaf : leaves) analytic.push_back(leaf.grad_vec());

    float max_rel = 0.f;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        for (size_t i = 0; i < leaf.numel(); ++i) {
            float saved = leaf.data()[i];
            leaf.data()[i] = saved + step;
            float fp; { Tape tape; fp = forward().item(); }
            leaf.data()[i] = saved - step;
            float fm; { Tape tape; fm = forward().item(); }
            leaf.data()[i] = saved;
            float fd = (fp - fm) / (2.f * step);
            float an = analytic[li][i];
            float err = std::fabs(an - fd);
            if (err >= atol)
                max_rel = std::max(err / std::max(std::max(std::fabs(an), std::fabs(fd)), 1e-6f),
                                   max_rel);
            ++checked;
        }
    }
    return max_rel;
}

// probe-weighted sum of (expr - snapshot) keeps differences above f32 noise
inline float fd_expr(const std::vector<Tensor>& leaves, const std::function<Tensor()>& expr,
                     size_t& checked, uint64_t probe_seed, float step, float atol) {
    Tensor snapshot, w;
    {
        Tape tape;
        Tensor e0 = expr();
        std::vector<float> vals(e0.data(), e0.data() + e0.numel());
        snapshot = Tensor::from(e0.shape(), std::move(vals));
        Rng rng(probe_seed);
        w = Tensor::make(e0.shape());
        for (size_t i = 0; i < w.numel(); ++i)
            w.data()[i] = (rng.uniform() < 0.5f ? -1.f : 1.f) * rng.uniform(0.5f, 1.5f);
    }
    return fd_max_rel(leaves, [&] { return sum_all(mul(w, sub(expr(), snapshot))); }, checked,
                      step, atol);
}

inline GaussianSet random_scene(Rng& rng, int n, bool rg) {
    GaussianSet gs;
    std::vector<float> mean, ls, quat, op, col;
    for (int i = 0; i < n; ++i) {
        mean.insert(mean.end(), {0.5f * rng.normal(), 0.5f * rng.normal(), 0.3f * rng.normal()});
        for (int c = 0; c < 3; ++c) ls.push_back(std::log(0.25f) + 0.1f * rng.normal());
        quat.insert(quat.end(), {1.f + 0.1f * rng.normal(), 0.1f * rng.normal(),
                                 0.1f * rng.normal(), 0.1f * rng.normal()});
        op.push_back(0.5f + 0.2f * rng.normal());  // mid-range: away from the alpha clamp
        col.insert(col.end(), {rng.uniform(0.2f, 0.8f), rng.uniform(0.2f, 0.8f),
                               rng.uniform(0.2f, 0.8f)});
    }
    gs.mean = Tensor::from({n, 3}, mean, rg);
    gs.log_scale = Tensor::from({n, 3}, ls, rg);
    gs.quat = Tensor::from({n, 4}, quat, rg);
    gs.opacity_logit = Tensor::from({n, 1}, op, rg);
    gs.color = Tensor::from({n, 3}, col, rg);
    return gs;
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckEntry> run_gradcheck(uint64_t seed = 99) {
    using gradcheck_detail::fd_expr;
    using gradcheck_detail::fd_max_rel;
    std::vector<GradCheckEntry> out;
    Rng rng(seed);

    auto record = [&](const std::string& name, float tol, size_t checked, float rel) {
        GradCheckEntry e;
        e.name = name;
        e.tol = tol;
        e.checked = checked;
        e.max_rel_err = rel;
        e.pass = checked > 0 && rel < tol;
        out.push_back(e);
    };

    {  // elementwise kernels chained
        Tensor x = Tensor::randn({4, 5}, rng, 0.7f, true);
        Tensor y = Tensor::randn({4, 5}, rng, 0.7f, true);
        size_t n = 0;
        float rel = fd_max_rel(
            {x, y},
            [&] {
                Tensor a = mul(sigmoid_(x), add_const(y, 0.3f));
                Tensor b = add(gelu_(x), square(y));
                return mean_all(add(abs_(sub(a, b)), exp_(scale(x, 0.2f))));
            },
            n, 1e-3f, 1e-4f);
        record("elementwise", 1e-3f, n, rel);
    }
    {  // matmul with both transpose flags
        Tensor a = Tensor::randn({3, 4}, rng, 0.5f, true);
        Tensor b = Tensor::randn({5, 4}, rng, 0.5f, true);
        size_t n = 0;
        float rel = fd_max_rel({a, b}, [&] { return sum_all(square(matmul(a, b, false, true))); },
                               n, 1e-3f, 1e-4f);
        record("matmul", 1e-3f, n, rel);
    }
    {  // row softmax / layernorm / reductions
        Tensor x = Tensor::randn({4, 6}, rng, 1.f, true);
        size_t n = 0;
        float rel = fd_expr({x}, [&] { return concat_rows({softmax_rows(x), layernorm_rows(x)}); },
                            n, seed + 1, 3e-3f, 3e-4f);
        record("softmax+layernorm", 1e-3f, n, rel);
    }
    {  // separable blur (SSIM window)
        Tensor x = Tensor::randn({6, 7, 2}, rng, 0.5f, true);
        auto k = detail_loss::ssim_kernel();
        size_t n = 0;
        float rel = fd_expr({x}, [&] { return blur_separable(x, k); }, n, seed + 2, 1e-3f, 1e-4f);
        record("blur_separable", 1e-3f, n, rel);
    }
    {  // SSIM loss end to end
        Tensor a = Tensor::make({8, 8, 3}, true);
        Tensor b = Tensor::make({8, 8, 3});
        for (size_t i = 0; i < a.numel(); ++i) {
            a.data()[i] = rng.uniform(0.2f, 0.8f);
            b.data()[i] = rng.uniform(0.2f, 0.8f);
        }
        size_t n = 0;
        float rel = fd_max_rel({a}, [&] { return ssim_loss(a, b); }, n, 3e-3f, 1e-4f);
        record("ssim", 1e-2f, n, rel);
    }
    {  // multihead attention
        Tensor q = Tensor::randn({5, 8}, rng, 0.5f, true);
        Tensor k = Tensor::randn({6, 8}, rng, 0.5f, true);
        Tensor v = Tensor::randn({6, 8}, rng, 0.5f, true);
        size_t n = 0;
        float rel = fd_expr({q, k, v}, [&] { return multihead_attention(q, k, v, 2); }, n,
                            seed + 3, 1e-3f, 1e-4f);
        record("attention", 1e-3f, n, rel);
    }
    {  // AdaLN conditioning
        AdaLN ln = AdaLN::create(8);
        Tensor x = Tensor::randn({4, 8}, rng, 0.8f, true);
        Tensor c = Tensor::randn({1, 8}, rng, 0.8f, true);
        Params p;
        ln.collect("ln", p);
        std::vector<Tensor> leaves{x, c};
        for (auto& [name, t] : p.items) leaves.push_back(t);
        size_t n = 0;
        float rel = fd_expr(leaves, [&] { return ln.forward(x, c); }, n, seed + 4, 3e-3f, 3e-4f);
        record("adaln", 1e-3f, n, rel);
    }
    {  // MM block, both streams and all internal linears
        MmBlock blk = MmBlock::create(8, 2, rng);
        Tensor a = Tensor::randn({3, 8}, rng, 0.6f, true);
        Tensor b = Tensor::randn({4, 8}, rng, 0.6f, true);
        Tensor c = Tensor::randn({1, 8}, rng, 0.6f, true);
        Params p;
        blk.collect("blk", p);
        std::vector<Tensor> leaves{a, b, c};
        for (auto& [name, t] : p.items) leaves.push_back(t);
        size_t n = 0;
        float rel = fd_expr(
            leaves,
            [&] {
                auto [a1, b1] = blk.forward(a, b, c);
                return concat_rows({a1, b1});
            },
            n, seed + 5, 1e-3f, 2e-4f);
        record("mm_block", 1e-3f, n, rel);
    }
    {  // LoRA adapter path
        Linear l = Linear::create(6, 5, rng);
        l.add_lora(2, 4.f, 0.f, rng);
        // move adapters off the zero init so the product path is exercised
        for (size_t i = 0; i < l.lora.B.numel(); ++i) l.lora.B.data()[i] = 0.1f * rng.normal();
        Tensor x = Tensor::randn({4, 6}, rng, 0.5f, true);
        std::vector<Tensor> leaves{x, l.W, l.b, l.lora.A, l.lora.B};
        size_t n = 0;
        float rel = fd_expr(leaves, [&] { return l.forward(x); }, n, seed + 6, 1e-3f, 1e-4f);
        record("lora_linear", 1e-3f, n, rel);
    }
    {  // renderer, RGB mode
        GaussianSet gs = gradcheck_detail::random_scene(rng, 3, true);
        Camera cam = Camera::look_at(Vec3(0, 0, 3.f), Vec3(0, 0, 0), 24.f, 20, 20);
        std::vector<Tensor> leaves{gs.mean, gs.log_scale, gs.quat, gs.opacity_logit, gs.color};
        size_t n = 0;
        float rel = fd_max_rel(
            leaves, [&] { return mean_all(render(cam, gs, RenderMode::rgb).rgb); }, n, 2e-3f,
            1e-4f);
        record("render_rgb", 1e-2f, n, rel);
    }
    {  // renderer xy mode through grid sampling (the DynaFlow path)
        GaussianSet gs = gradcheck_detail::random_scene(rng, 3, true);
        Camera cam = Camera::look_at(Vec3(0, 0, 3.f), Vec3(0, 0, 0), 24.f, 20, 20);
        std::vector<Tensor> leaves{gs.mean, gs.log_scale, gs.quat, gs.opacity_logit};
        CorrespondenceSet ms;
        ms.pairs = {{{9.7f, 10.2f}, {9.f, 9.f}, 1.f}, {{10.4f, 9.6f}, {11.f, 10.f}, 1.f}};
        size_t n = 0;
        float rel = fd_max_rel(
            leaves,
            [&] {
                RenderOutput o = render(cam, gs, RenderMode::xy);
                return dynaflow_loss(o, ms);
            },
            n, 2e-3f, 1e-4f);
        record("render_xy+dynaflow", 1e-2f, n, rel);
    }
    {  // LBS chain: canonical means/quats and weight refinement
        Skeleton skel;
        skel.names = {"a", "b", "c"};
        skel.parent = {-1, 0, 1};
        skel.offset = {Vec3(0, 0, 0), Vec3(0.5f, 0, 0), Vec3(0.5f, 0, 0)};
        Pose pose = Pose::rest(3);
        pose.rot[1] = Rotation6d::from_matrix(
            Eigen::AngleAxisf(0.7f, Vec3(0, 0, 1)).toRotationMatrix());
        pose.root_translation = Vec3(0.1f, 0.2f, 0.f);
        const int N = 4;
        std::vector<Vec3> pts;
        Tensor mean = Tensor::make({N, 3}, true);
        Tensor quat = Tensor::make({N, 4}, true);
        Tensor off = Tensor::make({N, 3}, true);
        for (int i = 0; i < N; ++i) {
            Vec3 p(rng.uniform(0.f, 1.f), 0.1f * rng.normal(), 0.1f * rng.normal());
            pts.push_back(p);
            for (int c = 0; c < 3; ++c) mean.data()[size_t(i) * 3 + c] = p[c];
            quat.data()[size_t(i) * 4] = 1.f + 0.1f * rng.normal();
            for (int c = 1; c < 4; ++c) quat.data()[size_t(i) * 4 + c] = 0.1f * rng.normal();
            for (int c = 0; c < 3; ++c) off.data()[size_t(i) * 3 + c] = 0.1f * rng.normal();
        }
        Tensor diffused = Tensor::from({N, 3}, diffuse_weights(pts, skel));
        size_t n = 0;
        float rel = fd_expr(
            {mean, quat, off},
            [&] {
                Tensor w = refine_weights(diffused, off);
                LbsResult r = lbs(mean, quat, w, pose, skel);
                return concat_rows({reshape(r.mean, {N * 3, 1}), reshape(r.quat, {N * 4, 1})});
            },
            n, seed + 7, 1e-3f, 2e-4f);
        record("lbs_chain", 1e-3f, n, rel);
    }
    return out;
}

inline bool gradcheck_ok(const std::vector<GradCheckEntry>& entries) {
    for (const auto& e : entries)
        if (!e.pass) return false;
    return !entries.empty();
}

}  // namespace dyav
