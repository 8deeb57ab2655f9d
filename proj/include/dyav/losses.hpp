#pragma once

#include <dyav/geometry.hpp>
#include <dyav/image.hpp>
#include <dyav/splatter.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace dyav {

struct LossWeights {
    float l1 = 0.8f;
    float ssim = 0.2f;
    float mask = 0.1f;
    float laplacian = 0.01f;
    float flow = 0.1f;
};

struct LossReport {
    float l1 = 0, ssim = 0, mask = 0, laplacian = 0, flow = 0;
    LossWeights weights;
    bool flow_active = false;
    bool flow_empty = false;  // gated on but no surviving matches
    float total() const {
        float t = weights.l1 * l1 + weights.ssim * ssim + weights.mask * mask +
                  weights.laplacian * laplacian;
        if (flow_active) t += weights.flow * flow;
        return t;
    }
};

struct Correspondence {
    std::array<float, 2> src;
    std::array<float, 2> tgt;
    float conf = 1.f;
};

struct CorrespondenceSet {
    std::string src_image;
    std::string tgt_image;
    std::vector<Correspondence> pairs;

    static constexpr size_t kMaxPairs = 1024;

    // keep the highest-confidence pairs when over the cap (stable, so ties
    // preserve insertion order)
    void truncate() {
        if (pairs.size() <= kMaxPairs) return;
        std::stable_sort(pairs.begin(), pairs.end(),
                         [](const Correspondence& a, const Correspondence& b) { return a.conf > b.conf; });
        pairs.resize(kMaxPairs);
    }
};

inline Tensor image_tensor(const Image& img) {
    Tensor t = Tensor::from({img.h * img.w, img.channels}, img.data);
    return t;
}

inline Tensor l1_loss(const Tensor& rendered, const Tensor& target) {
    check(rendered.shape() == target.shape(), "l1_loss: shape mismatch");
    return mean_all(abs_(sub(rendered, target)));
}

inline Tensor mask_loss(const Tensor& alpha, const Tensor& gt_mask) {
    check(alpha.shape() == gt_mask.shape(), "mask_loss: shape mismatch");
    return mean_all(abs_(sub(alpha, gt_mask)));
}

namespace detail_loss {

inline std::vector<float> ssim_kernel() {
    std::vector<float> k(11);
    const double sigma = 1.5;
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
        double d = i - 5;
        k[size_t(i)] = float(std::exp(-d * d / (2 * sigma * sigma)));
        sum += k[size_t(i)];
    }
    for (auto& v : k) v = float(v / sum);
    return k;
}

}  // namespace detail_loss

// 1 - mean SSIM with an 11x11 Gaussian window (sigma 1.5, clamped borders).
inline Tensor ssim_loss(const Tensor& rendered, const Tensor& target) {
    check(rendered.shape() == target.shape(), "ssim_loss: shape mismatch");
    check(rendered.rank() == 3, "ssim_loss: expected [H,W,C]");
    const float c1 = 0.01f * 0.01f, c2 = 0.03f * 0.03f;
    auto k = detail_loss::ssim_kernel();
    Tensor mu_x = blur_separable(rendered, k);
    Tensor mu_y = blur_separable(target, k);
    Tensor mu_xx = mul(mu_x, mu_x);
    Tensor mu_yy = mul(mu_y, mu_y);
    Tensor mu_xy = mul(mu_x, mu_y);
    Tensor var_x = sub(blur_separable(mul(rendered, rendered), k), mu_xx);
    Tensor var_y = sub(blur_separable(mul(target, target), k), mu_yy);
    Tensor cov = sub(blur_separable(mul(rendered, target), k), mu_xy);
    Tensor num = mul(add_const(scale(mu_xy, 2.f), c1), add_const(scale(cov, 2.f), c2));
    Tensor den = mul(add_const(add(mu_xx, mu_yy), c1), add_const(add(var_x, var_y), c2));
    Tensor ssim = div(num, den);
    return add_const(scale(mean_all(ssim), -1.f), 1.f);
}

// kNN graph on the template, built once and reused across iterations.
struct LaplacianGraph {
    int n = 0;
    int k = 6;
    std::vector<int> neighbors;  // n*k indices

    static LaplacianGraph build(const Tensor& tpl, int k = 6) {
        check(tpl.rank() == 2 && tpl.cols() == 3, "laplacian: template must be [N,3]");
        LaplacianGraph g;
        g.n = tpl.rows();
        g.k = std::min(k, g.n - 1);
        check(g.k >= 1, "laplacian: need at least 2 points");
        g.neighbors.resize(size_t(g.n) * size_t(g.k));
        std::vector<std::pair<float, int>> d(static_cast<size_t>(g.n));
        for (int i = 0; i < g.n; ++i) {
            for (int j = 0; j < g.n; ++j) {
                float s = 0;
                for (int c = 0; c < 3; ++c) {
                    float diff = tpl.at(size_t(i) * 3 + c) - tpl.at(size_t(j) * 3 + c);
                    s += diff * diff;
                }
                d[size_t(j)] = {i == j ? std::numeric_limits<float>::max() : s, j};
            }
            std::partial_sort(d.begin(), d.begin() + g.k, d.end());
            for (int r = 0; r < g.k; ++r) g.neighbors[size_t(i) * size_t(g.k) + size_t(r)] = d[size_t(r)].second;
        }
        return g;
    }

    // degree-normalized graph Laplacian: (Lx)_i = x_i - mean of neighbors
    Tensor apply(const Tensor& x) const {
        check(x.rows() == n, "laplacian: point count mismatch");
        Tensor out = detail::op_output(x.shape(), {x});
        const float inv = 1.f / float(k);
        auto xn = x.node().get();
        auto on = out.node().get();
        int cols = x.cols();
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < cols; ++c) {
                float s = xn->value[size_t(i) * size_t(cols) + size_t(c)];
                for (int r = 0; r < k; ++r)
                    s -= inv * xn->value[size_t(neighbors[size_t(i) * size_t(k) + size_t(r)]) * size_t(cols) + size_t(c)];
                on->value[size_t(i) * size_t(cols) + size_t(c)] = s;
            }
        auto nbr = neighbors;
        int kk = k, nn = n;
        detail::set_backward(out, [xn = x.node(), on, nbr, kk, nn, cols, inv] {
            xn->ensure_grad();
            for (int i = 0; i < nn; ++i)
                for (int c = 0; c < cols; ++c) {
                    float g = on->grad[size_t(i) * size_t(cols) + size_t(c)];
                    xn->grad[size_t(i) * size_t(cols) + size_t(c)] += g;
                    for (int r = 0; r < kk; ++r)
                        xn->grad[size_t(nbr[size_t(i) * size_t(kk) + size_t(r)]) * size_t(cols) + size_t(c)] -= inv * g;
                }
        });
        return out;
    }
};

// mean over points of ||L(means) - L(template)||^2
inline Tensor laplacian_reg(const Tensor& means, const Tensor& tpl, const LaplacianGraph& graph) {
    check(means.shape() == tpl.shape(), "laplacian_reg: shape mismatch");
    Tensor d = sub(graph.apply(means), graph.apply(tpl));
    return scale(sum_all(square(d)), 1.f / float(means.rows()));
}

// L1 endpoint error between the grid-sampled xy map and the match targets,
// normalized by the image diagonal. Matches landing on uncovered pixels are
// dropped; with nothing left the loss is zero and `empty` is set.
inline Tensor dynaflow_loss(const RenderOutput& out, const CorrespondenceSet& matches,
                            bool* empty = nullptr) {
    std::vector<std::array<float, 2>> pts;
    std::vector<float> tgts;
    for (const auto& m : matches.pairs) {
        int px = int(std::floor(m.src[0]));
        int py = int(std::floor(m.src[1]));
        if (px < 0 || px >= out.W || py < 0 || py >= out.H) continue;
        if (!out.coverage[size_t(py) * size_t(out.W) + size_t(px)]) continue;
        // pixel centers live at integer+0.5 in image coordinates
        pts.push_back({m.src[0] - 0.5f, m.src[1] - 0.5f});
        tgts.push_back(m.tgt[0]);
        tgts.push_back(m.tgt[1]);
    }
    if (empty) *empty = pts.empty();
    if (pts.empty()) return Tensor::make({1, 1});
    Tensor sampled = grid_sample_bilinear(out.xy_map, pts);
    Tensor target = Tensor::from({int(pts.size()), 2}, tgts);
    float diag = std::sqrt(float(out.W) * float(out.W) + float(out.H) * float(out.H));
    return scale(sum_all(abs_(sub(sampled, target))), 1.f / (float(pts.size()) * diag));
}

// The DynaFlow term only participates in the second half of training.
inline bool flow_gate(long iteration, long total_iterations) {
    return iteration >= total_iterations / 2;
}

// Exact correspondences between two renders of the same GT GaussianSet:
// stratified source pixels, each assigned the Gaussian contributing the most
// alpha there, transported by that Gaussian's projected motion.
inline CorrespondenceSet match_synthetic(const GaussianSet& gs_a, const GaussianSet& gs_b,
                                         const Camera& cam_a, const Camera& cam_b,
                                         int grid = 32) {
    check(gs_a.count() == gs_b.count(), "match_synthetic: gaussian count mismatch");
    const int n = gs_a.count();
    std::vector<splat::Projected> proj_a, proj_b;
    proj_a.reserve(size_t(n));
    std::vector<bool> ok_b(static_cast<size_t>(n), false);
    std::vector<std::array<float, 2>> center_b(static_cast<size_t>(n));
    auto mean3 = [](const GaussianSet& g, int i) {
        return Vec3(g.mean.at(size_t(i) * 3), g.mean.at(size_t(i) * 3 + 1), g.mean.at(size_t(i) * 3 + 2));
    };
    auto scale3 = [](const GaussianSet& g, int i) {
        return Vec3(g.log_scale.at(size_t(i) * 3), g.log_scale.at(size_t(i) * 3 + 1),
                    g.log_scale.at(size_t(i) * 3 + 2));
    };
    for (int i = 0; i < n; ++i) {
        splat::Projected p;
        if (project_gaussian(cam_a, mean3(gs_a, i), scale3(gs_a, i),
                                    gs_a.quat.data() + size_t(i) * 4, p)) {
            p.id = i;
            p.opacity = 1.f / (1.f + std::exp(-gs_a.opacity_logit.at(size_t(i))));
            proj_a.push_back(p);
        }
        splat::Projected q;
        if (project_gaussian(cam_b, mean3(gs_b, i), scale3(gs_b, i),
                                    gs_b.quat.data() + size_t(i) * 4, q)) {
            ok_b[size_t(i)] = true;
            center_b[size_t(i)] = {q.mx, q.my};
        }
    }
    std::sort(proj_a.begin(), proj_a.end(), [](const splat::Projected& a, const splat::Projected& b) {
        return a.z != b.z ? a.z < b.z : a.id < b.id;
    });

    CorrespondenceSet set;
    set.src_image = "frame_a";
    set.tgt_image = "frame_b";
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            float px = (float(gx) + 0.5f) * float(cam_a.W) / float(grid);
            float py = (float(gy) + 0.5f) * float(cam_a.H) / float(grid);
            float T = 1.f;
            int best = -1;
            float best_w = 0;
            for (const auto& p : proj_a) {
                float dx = px - p.mx, dy = py - p.my;
                if (dx * dx + dy * dy > p.radius * p.radius) continue;
                float power = -0.5f * (p.ia * dx * dx + 2.f * p.ib * dx * dy + p.ic * dy * dy);
                if (power > 0) continue;
                float a = std::min(splat::kAlphaClamp, p.opacity * std::exp(power));
                if (a < splat::kAlphaSkip) continue;
                float w = a * T;
                if (w > best_w) { best_w = w; best = p.id; }
                T *= 1.f - a;
                if (T < splat::kTransmittanceStop) break;
            }
            if (best < 0 || !ok_b[size_t(best)]) continue;
            // emit the winning Gaussian's projected center in both frames
            splat::Projected pa;
            project_gaussian(cam_a, mean3(gs_a, best), scale3(gs_a, best),
                             gs_a.quat.data() + size_t(best) * 4, pa);
            Correspondence c;
            c.src = {pa.mx, pa.my};
            c.tgt = {center_b[size_t(best)][0], center_b[size_t(best)][1]};
            c.conf = 1.f;
            if (c.src[0] < 0 || c.src[0] >= float(cam_a.W) || c.src[1] < 0 || c.src[1] >= float(cam_a.H))
                continue;
            if (c.tgt[0] < 0 || c.tgt[0] >= float(cam_b.W) || c.tgt[1] < 0 || c.tgt[1] >= float(cam_b.H))
                continue;
            set.pairs.push_back(c);
        }
    set.truncate();
    return set;
}

inline void save_matches(const std::string& path, const CorrespondenceSet& set) {
    std::ofstream f(path);
    check(f.good(), "save_matches: cannot open " + path);
    nlohmann::json hdr{{"type", "header"}, {"src_image", set.src_image}, {"tgt_image", set.tgt_image}};
    f << hdr.dump() << "\n";
    for (const auto& m : set.pairs) {
        nlohmann::json j{{"src", {m.src[0], m.src[1]}}, {"tgt", {m.tgt[0], m.tgt[1]}}, {"conf", m.conf}};
        f << j.dump() << "\n";
    }
}

inline CorrespondenceSet load_matches(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "load_matches: cannot open " + path);
    CorrespondenceSet set;
    std::string line;
    bool saw_header = false;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (!saw_header) {
            check(j.value("type", "") == "header", "load_matches: missing header record");
            set.src_image = j.value("src_image", "");
            set.tgt_image = j.value("tgt_image", "");
            saw_header = true;
            continue;
        }
        Correspondence c;
        c.src = {j["src"][0].get<float>(), j["src"][1].get<float>()};
        c.tgt = {j["tgt"][0].get<float>(), j["tgt"][1].get<float>()};
        c.conf = j.value("conf", 1.f);
        check(c.conf >= 0.f && c.conf <= 1.f, "load_matches: confidence out of range");
        set.pairs.push_back(c);
    }
    set.truncate();
    return set;
}

}  // namespace dyav
