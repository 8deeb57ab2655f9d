#pragma once

#include <dyav/geometry.hpp>
#include <dyav/tensor.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace dyav {

// A set of N Gaussians held column-packed in leaf tensors so the renderer's
// analytic backward writes straight into parameter gradients.
//   mean          [N,3]  world-space meters
//   log_scale     [N,3]  per-axis log standard deviation
//   quat          [N,4]  wxyz; renormalized each forward
//   opacity_logit [N,1]  opacity = sigmoid(logit)
//   color         [N,3]  in [0,1]
//   skin_offset   [N,K]  consumed by the animation module, not the renderer
struct GaussianSet {
    Tensor mean, log_scale, quat, opacity_logit, color, skin_offset;

    int count() const { return mean.defined() ? mean.dim(0) : 0; }

    void validate() const {
        int n = count();
        check(!log_scale.defined() || log_scale.dim(0) == n, "gaussians: log_scale count");
        check(!quat.defined() || quat.dim(0) == n, "gaussians: quat count");
        check(!opacity_logit.defined() || opacity_logit.dim(0) == n, "gaussians: opacity count");
        check(!color.defined() || color.dim(0) == n, "gaussians: color count");
    }
};

enum class RenderMode { rgb, xy };

struct RenderOutput {
    int H = 0, W = 0;
    Tensor rgb;     // [H,W,3]
    Tensor alpha;   // [H,W,1]
    Tensor depth;   // [H,W,1] alpha-normalized expected depth, 0 where uncovered
    Tensor xy_map;  // [H,W,2] alpha-normalized mean2d, (-1,-1) where uncovered
    std::vector<uint8_t> coverage;  // H*W, 1 where any Gaussian contributed
};

namespace splat {

constexpr int kTile = 16;
constexpr float kAlphaClamp = 0.99f;
constexpr float kAlphaSkip = 1e-6f;
constexpr float kTransmittanceStop = 1e-4f;
constexpr float kLowPass = 0.3f;

struct Projected {
    int id;                 // index into the GaussianSet
    float mx, my;           // mean2d, pixel coordinates
    float z;                // camera-space depth
    float ca, cb, cc;       // cov2d upper triangle [[a,b],[b,c]]
    float ia, ib, ic;       // conic = cov2d inverse, same layout
    float opacity;          // sigmoid(opacity_logit)
    float r, g, b;          // color
    float radius;           // 3-sigma screen radius
};

// Pixel (ix, iy) samples the continuous image plane at (ix+0.5, iy+0.5).
inline float pix_center(int i) { return float(i) + 0.5f; }

inline Mat3 quat_to_mat_raw(float w, float x, float y, float z) {
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

// dL/dq (unnormalized) given dL/dR of the rotation built from the
// normalized quaternion.
inline void quat_backward(const float q[4], const Mat3& dR, float dq_out[4]) {
    float n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    float w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    float dw = 2 * (dR(2, 1) - dR(1, 2)) * x + 2 * (dR(0, 2) - dR(2, 0)) * y +
               2 * (dR(1, 0) - dR(0, 1)) * z;
    float dx = 2 * (dR(2, 1) - dR(1, 2)) * w + 2 * (dR(0, 1) + dR(1, 0)) * y +
               2 * (dR(0, 2) + dR(2, 0)) * z - 4 * (dR(1, 1) + dR(2, 2)) * x;
    float dy = 2 * (dR(0, 2) - dR(2, 0)) * w + 2 * (dR(0, 1) + dR(1, 0)) * x +
               2 * (dR(1, 2) + dR(2, 1)) * z - 4 * (dR(0, 0) + dR(2, 2)) * y;
    float dz = 2 * (dR(1, 0) - dR(0, 1)) * w + 2 * (dR(0, 2) + dR(2, 0)) * x +
               2 * (dR(1, 2) + dR(2, 1)) * y - 4 * (dR(0, 0) + dR(1, 1)) * z;
    // chain through normalization: dqi = (dhat_i - qhat * (qhat . dhat)) / n
    float qn[4] = {w, x, y, z}, dh[4] = {dw, dx, dy, dz};
    float dot = qn[0] * dh[0] + qn[1] * dh[1] + qn[2] * dh[2] + qn[3] * dh[3];
    for (int i = 0; i < 4; ++i) dq_out[i] = (dh[i] - qn[i] * dot) / n;
}

}  // namespace splat

// EWA projection of one Gaussian; returns false when culled (behind camera).
// cov2d already includes the 0.3 low-pass diagonal.
inline bool project_gaussian(const Camera& cam, const Vec3& mean, const Vec3& log_scale,
                             const float quat_wxyz[4], splat::Projected& out) {
    Vec3 c = cam.to_camera(mean);
    if (c.z() <= 1e-4f) return false;
    float fx = cam.K(0, 0), fy = cam.K(1, 1);
    out.mx = fx * c.x() / c.z() + cam.K(0, 2);
    out.my = fy * c.y() / c.z() + cam.K(1, 2);
    out.z = c.z();

    float n = std::sqrt(quat_wxyz[0] * quat_wxyz[0] + quat_wxyz[1] * quat_wxyz[1] +
                        quat_wxyz[2] * quat_wxyz[2] + quat_wxyz[3] * quat_wxyz[3]);
    check(n > 1e-8f, "project_gaussian: zero quaternion");
    Mat3 R = splat::quat_to_mat_raw(quat_wxyz[0] / n, quat_wxyz[1] / n,
                                    quat_wxyz[2] / n, quat_wxyz[3] / n);
    Vec3 s(std::exp(log_scale.x()), std::exp(log_scale.y()), std::exp(log_scale.z()));
    Mat3 M = R * s.asDiagonal();
    Mat3 cov3 = M * M.transpose();

    Eigen::Matrix<float, 2, 3> J;
    float iz = 1.f / c.z(), iz2 = iz * iz;
    J << fx * iz, 0, -fx * c.x() * iz2,
         0, fy * iz, -fy * c.y() * iz2;
    Eigen::Matrix<float, 2, 3> A = J * cam.R;
    Eigen::Matrix2f cov2 = A * cov3 * A.transpose();
    out.ca = cov2(0, 0) + splat::kLowPass;
    out.cb = cov2(0, 1);
    out.cc = cov2(1, 1) + splat::kLowPass;

    float det = out.ca * out.cc - out.cb * out.cb;
    if (det <= 0) return false;
    float idet = 1.f / det;
    out.ia = out.cc * idet;
    out.ib = -out.cb * idet;
    out.ic = out.ca * idet;

    float mid = 0.5f * (out.ca + out.cc);
    float lam = mid + std::sqrt(std::max(0.01f, mid * mid - det));
    out.radius = 3.f * std::sqrt(lam);
    return true;
}

// Differentiable rasterization. Both modes share one pass over the projected,
// depth-sorted Gaussians; `mode` only selects whether color compositing
// happens (xy mode leaves rgb at zero). Gradients flow to mean, log_scale,
// quat, opacity_logit, and color.
inline RenderOutput render(const Camera& cam, const GaussianSet& gs, RenderMode mode) {
    gs.validate();
    const int H = cam.H, W = cam.W, N = gs.count();
    check(H > 0 && W > 0, "render: empty camera image plane");

    for (int i = 0; i < N; ++i) {
        bool fin = true;
        for (int k = 0; k < 3; ++k)
            fin = fin && std::isfinite(gs.mean.at(size_t(i) * 3 + k)) &&
                  std::isfinite(gs.log_scale.at(size_t(i) * 3 + k)) &&
                  std::isfinite(gs.color.at(size_t(i) * 3 + k));
        for (int k = 0; k < 4; ++k) fin = fin && std::isfinite(gs.quat.at(size_t(i) * 4 + k));
        fin = fin && std::isfinite(gs.opacity_logit.at(size_t(i)));
        check(fin, "render: non-finite parameters in gaussian " + std::to_string(i));
    }

    // project + cull
    std::vector<splat::Projected> vis;
    vis.reserve(size_t(N));
    for (int i = 0; i < N; ++i) {
        splat::Projected p;
        Vec3 mu(gs.mean.at(size_t(i) * 3), gs.mean.at(size_t(i) * 3 + 1), gs.mean.at(size_t(i) * 3 + 2));
        Vec3 ls(gs.log_scale.at(size_t(i) * 3), gs.log_scale.at(size_t(i) * 3 + 1),
                gs.log_scale.at(size_t(i) * 3 + 2));
        float q[4] = {gs.quat.at(size_t(i) * 4), gs.quat.at(size_t(i) * 4 + 1),
                      gs.quat.at(size_t(i) * 4 + 2), gs.quat.at(size_t(i) * 4 + 3)};
        if (!project_gaussian(cam, mu, ls, q, p)) continue;
        p.id = i;
        p.opacity = 1.f / (1.f + std::exp(-gs.opacity_logit.at(size_t(i))));
        p.r = gs.color.at(size_t(i) * 3);
        p.g = gs.color.at(size_t(i) * 3 + 1);
        p.b = gs.color.at(size_t(i) * 3 + 2);
        vis.push_back(p);
    }

    // global front-to-back order; ties broken by Gaussian index
    std::sort(vis.begin(), vis.end(), [](const splat::Projected& a, const splat::Projected& b) {
        return a.z != b.z ? a.z < b.z : a.id < b.id;
    });

    // 3-sigma bounding boxes -> 16x16 tile lists (positions into `vis`)
    const int tx = (W + splat::kTile - 1) / splat::kTile;
    const int ty = (H + splat::kTile - 1) / splat::kTile;
    std::vector<std::vector<int>> tiles(size_t(tx) * ty);
    for (int v = 0; v < int(vis.size()); ++v) {
        const auto& p = vis[size_t(v)];
        int x0 = std::max(0, int(std::floor((p.mx - p.radius) / splat::kTile)));
        int x1 = std::min(tx - 1, int(std::floor((p.mx + p.radius) / splat::kTile)));
        int y0 = std::max(0, int(std::floor((p.my - p.radius) / splat::kTile)));
        int y1 = std::min(ty - 1, int(std::floor((p.my + p.radius) / splat::kTile)));
        for (int tyi = y0; tyi <= y1; ++tyi)
            for (int txi = x0; txi <= x1; ++txi)
                tiles[size_t(tyi) * tx + txi].push_back(v);
    }

    const bool do_rgb = mode == RenderMode::rgb;
    Tensor packed = detail::op_output({H * W, 7},
        {gs.mean, gs.log_scale, gs.quat, gs.opacity_logit, gs.color});
    auto coverage = std::make_shared<std::vector<uint8_t>>(size_t(H) * W, uint8_t(0));

    float* out = packed.data();
    for (size_t px = 0; px < size_t(H) * W; ++px) {
        out[px * 7 + 5] = -1.f;
        out[px * 7 + 6] = -1.f;
    }

#pragma omp parallel for schedule(static)
    for (int tile = 0; tile < tx * ty; ++tile) {
        const auto& list = tiles[size_t(tile)];
        if (list.empty()) continue;
        int px0 = (tile % tx) * splat::kTile, py0 = (tile / tx) * splat::kTile;
        int px1 = std::min(W, px0 + splat::kTile), py1 = std::min(H, py0 + splat::kTile);
        for (int py = py0; py < py1; ++py)
            for (int px = px0; px < px1; ++px) {
                float sx = splat::pix_center(px), sy = splat::pix_center(py);
                float T = 1.f, A = 0.f, Cr = 0, Cg = 0, Cb = 0, Sd = 0, Sx = 0, Sy = 0;
                bool hit = false;
                for (int v : list) {
                    const auto& g = vis[size_t(v)];
                    float dx = sx - g.mx, dy = sy - g.my;
                    float power = -0.5f * (g.ia * dx * dx + 2 * g.ib * dx * dy + g.ic * dy * dy);
                    if (power > 0) continue;
                    float a = std::min(splat::kAlphaClamp, g.opacity * std::exp(power));
                    if (a < splat::kAlphaSkip) continue;
                    float w = a * T;
                    if (do_rgb) { Cr += w * g.r; Cg += w * g.g; Cb += w * g.b; }
                    Sd += w * g.z;
                    Sx += w * g.mx;
                    Sy += w * g.my;
                    A += w;
                    hit = true;
                    T *= 1.f - a;
                    if (T < splat::kTransmittanceStop) break;
                }
                float* o = out + (size_t(py) * W + px) * 7;
                o[0] = Cr; o[1] = Cg; o[2] = Cb;
                o[3] = A;
                if (hit) {
                    float iA = 1.f / std::max(A, 1e-6f);
                    o[4] = Sd * iA;
                    o[5] = Sx * iA;
                    o[6] = Sy * iA;
                    (*coverage)[size_t(py) * W + px] = 1;
                } else {
                    o[4] = 0.f;
                }
            }
    }

    auto mean_n = gs.mean.node(), ls_n = gs.log_scale.node(), quat_n = gs.quat.node(),
         op_n = gs.opacity_logit.node(), col_n = gs.color.node();
    auto packed_n = packed.node().get();
    detail::set_backward(packed, [=, vis = std::move(vis), tiles = std::move(tiles)] {
        const int nv = int(vis.size());
        // stage 1: per-pixel compositing backward into per-tile buffers over
        // (dmx, dmy, dca, dcb, dcc, dz, dopacity, dr, dg, db) per visible id
        std::vector<std::vector<std::array<float, 10>>> partial(tiles.size());
#pragma omp parallel for schedule(static)
        for (int tile = 0; tile < tx * ty; ++tile) {
            const auto& list = tiles[size_t(tile)];
            if (list.empty()) continue;
            auto& buf = partial[size_t(tile)];
            buf.assign(list.size(), std::array<float, 10>{});
            int px0 = (tile % tx) * splat::kTile, py0 = (tile / tx) * splat::kTile;
            int px1 = std::min(W, px0 + splat::kTile), py1 = std::min(H, py0 + splat::kTile);
            struct Contrib { int pos; float a, T, u, w; };
            std::vector<Contrib> rec;
            for (int py = py0; py < py1; ++py)
                for (int px = px0; px < px1; ++px) {
                    const float* go = packed_n->grad.data() + (size_t(py) * W + px) * 7;
                    const float* vo = packed_n->value.data() + (size_t(py) * W + px) * 7;
                    bool any = false;
                    for (int k = 0; k < 7; ++k) any = any || go[k] != 0.f;
                    if (!any) continue;
                    if (!(*coverage)[size_t(py) * W + px]) continue;

                    // convert normalized depth/xy grads to grads of the raw
                    // accumulated sums S and A
                    float gC[3] = {go[0], go[1], go[2]};
                    float gA = go[3];
                    float A = vo[3];
                    float iA = 1.f / std::max(A, 1e-6f);
                    float gSd = go[4] * iA, gSx = go[5] * iA, gSy = go[6] * iA;
                    if (A > 1e-6f) {
                        gA -= (go[4] * vo[4] + go[5] * vo[5] + go[6] * vo[6]) * iA;
                    }

                    // replay compositing, recording contributor state
                    rec.clear();
                    float sx = splat::pix_center(px), sy = splat::pix_center(py);
                    float T = 1.f;
                    for (size_t li = 0; li < list.size(); ++li) {
                        const auto& g = vis[size_t(list[li])];
                        float dx = sx - g.mx, dy = sy - g.my;
                        float power = -0.5f * (g.ia * dx * dx + 2 * g.ib * dx * dy + g.ic * dy * dy);
                        if (power > 0) continue;
                        float a = std::min(splat::kAlphaClamp, g.opacity * std::exp(power));
                        if (a < splat::kAlphaSkip) continue;
                        float w = a * T;
                        float u = gA + gSd * g.z + gSx * g.mx + gSy * g.my;
                        if (do_rgb) u += gC[0] * g.r + gC[1] * g.g + gC[2] * g.b;
                        rec.push_back({int(li), a, T, u, w});
                        T *= 1.f - a;
                        if (T < splat::kTransmittanceStop) break;
                    }
                    // suffix-sum pass for dL/dalpha_i
                    float S = 0.f;
                    for (int ri = int(rec.size()) - 1; ri >= 0; --ri) {
                        const auto& rc = rec[size_t(ri)];
                        const auto& g = vis[size_t(list[size_t(rc.pos)])];
                        auto& acc = buf[size_t(rc.pos)];
                        float da = rc.u * rc.T - S / (1.f - rc.a);
                        S += rc.u * rc.w;
                        // payload gradients
                        if (do_rgb) {
                            acc[7] += gC[0] * rc.w;
                            acc[8] += gC[1] * rc.w;
                            acc[9] += gC[2] * rc.w;
                        }
                        acc[5] += gSd * rc.w;
                        acc[0] += gSx * rc.w;
                        acc[1] += gSy * rc.w;
                        // alpha = min(0.99, o * G); clamp passes zero gradient
                        float G = rc.a / g.opacity;
                        if (g.opacity * G >= splat::kAlphaClamp) continue;
                        acc[6] += da * G;  // d opacity (pre-logit)
                        float dG = da * g.opacity;
                        float dpower = dG * rc.a / g.opacity;  // dG * G
                        float dx = sx - g.mx, dy = sy - g.my;
                        // power = -1/2 d^T Conic d, d = pix - mean2d
                        float ddx = -dpower * (g.ia * dx + g.ib * dy);
                        float ddy = -dpower * (g.ib * dx + g.ic * dy);
                        acc[0] -= ddx;  // d mean2d = -dd
                        acc[1] -= ddy;
                        // dL/dConic = -1/2 dpower * d d^T; then to cov2d via
                        // dCov = -Conic * dConic * Conic (symmetric)
                        float gia = -0.5f * dpower * dx * dx;
                        float gib = -dpower * dx * dy;  // both off-diag entries
                        float gic = -0.5f * dpower * dy * dy;
                        float a_ = g.ia, b_ = g.ib, c_ = g.ic;
                        acc[2] -= a_ * a_ * gia + a_ * b_ * gib + b_ * b_ * gic;
                        acc[3] -= 2 * (a_ * b_ * gia) + (a_ * c_ + b_ * b_) * gib + 2 * (b_ * c_ * gic);
                        acc[4] -= b_ * b_ * gia + b_ * c_ * gib + c_ * c_ * gic;
                    }
                }
        }

        // fixed-tile-order reduction keeps gradients bit-identical for any
        // thread count
        std::vector<std::array<float, 10>> grad2d(size_t(nv), std::array<float, 10>{});
        for (size_t tile = 0; tile < tiles.size(); ++tile) {
            const auto& list = tiles[tile];
            const auto& buf = partial[tile];
            for (size_t li = 0; li < buf.size(); ++li)
                for (int k = 0; k < 10; ++k) grad2d[size_t(list[li])][k] += buf[li][k];
        }

        // stage 2: geometric backward per visible Gaussian
        mean_n->ensure_grad();
        ls_n->ensure_grad();
        quat_n->ensure_grad();
        op_n->ensure_grad();
        col_n->ensure_grad();
        float fx = cam.K(0, 0), fy = cam.K(1, 1);
        for (int v = 0; v < nv; ++v) {
            const auto& g2 = grad2d[size_t(v)];
            bool any = false;
            for (int k = 0; k < 10; ++k) any = any || g2[k] != 0.f;
            if (!any) continue;
            const auto& p = vis[size_t(v)];
            const int i = p.id;

            col_n->grad[size_t(i) * 3 + 0] += g2[7];
            col_n->grad[size_t(i) * 3 + 1] += g2[8];
            col_n->grad[size_t(i) * 3 + 2] += g2[9];
            op_n->grad[size_t(i)] += g2[6] * p.opacity * (1.f - p.opacity);

            // recompute camera-space quantities
            Vec3 mu(mean_n->value[size_t(i) * 3], mean_n->value[size_t(i) * 3 + 1],
                    mean_n->value[size_t(i) * 3 + 2]);
            Vec3 c = cam.to_camera(mu);
            float x = c.x(), y = c.y(), z = c.z();
            float iz = 1.f / z, iz2 = iz * iz;
            Eigen::Matrix<float, 2, 3> J;
            J << fx * iz, 0, -fx * x * iz2, 0, fy * iz, -fy * y * iz2;
            Eigen::Matrix<float, 2, 3> A = J * cam.R;

            float q[4] = {quat_n->value[size_t(i) * 4], quat_n->value[size_t(i) * 4 + 1],
                          quat_n->value[size_t(i) * 4 + 2], quat_n->value[size_t(i) * 4 + 3]};
            float qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
            Mat3 R = splat::quat_to_mat_raw(q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
            Vec3 s(std::exp(ls_n->value[size_t(i) * 3]), std::exp(ls_n->value[size_t(i) * 3 + 1]),
                   std::exp(ls_n->value[size_t(i) * 3 + 2]));
            Mat3 M = R * s.asDiagonal();
            Mat3 cov3 = M * M.transpose();

            Eigen::Matrix2f Gc;  // symmetric cov2d gradient
            Gc << g2[2], 0.5f * g2[3], 0.5f * g2[3], g2[4];
            // cov2d = A cov3 A^T + lowpass
            Mat3 dcov3 = A.transpose() * Gc * A;
            Eigen::Matrix<float, 2, 3> dA = 2.f * Gc * A * cov3;
            Eigen::Matrix<float, 2, 3> dJ = dA * cam.R.transpose();

            // dJ -> camera-space position
            Vec3 dc = Vec3::Zero();
            dc.x() += dJ(0, 2) * (-fx * iz2);
            dc.y() += dJ(1, 2) * (-fy * iz2);
            dc.z() += dJ(0, 0) * (-fx * iz2) + dJ(1, 1) * (-fy * iz2) +
                      dJ(0, 2) * (2 * fx * x * iz2 * iz) + dJ(1, 2) * (2 * fy * y * iz2 * iz);
            // mean2d and depth payloads
            dc.x() += g2[0] * fx * iz;
            dc.y() += g2[1] * fy * iz;
            dc.z() += -g2[0] * fx * x * iz2 - g2[1] * fy * y * iz2 + g2[5];
            Vec3 dmu = cam.R.transpose() * dc;
            for (int k = 0; k < 3; ++k) mean_n->grad[size_t(i) * 3 + k] += dmu[k];

            // cov3 = M M^T
            Mat3 dM = 2.f * dcov3 * M;
            Mat3 dR = dM * s.asDiagonal();
            for (int k = 0; k < 3; ++k) {
                float dsk = dM.col(k).dot(R.col(k));
                ls_n->grad[size_t(i) * 3 + k] += dsk * s[k];
            }
            float dq[4];
            splat::quat_backward(q, dR, dq);
            for (int k = 0; k < 4; ++k) quat_n->grad[size_t(i) * 4 + k] += dq[k];
        }
    });

    RenderOutput ro;
    ro.H = H;
    ro.W = W;
    ro.rgb = reshape(slice_cols(packed, 0, 3), {H, W, 3});
    ro.alpha = reshape(slice_cols(packed, 3, 1), {H, W, 1});
    ro.depth = reshape(slice_cols(packed, 4, 1), {H, W, 1});
    ro.xy_map = reshape(slice_cols(packed, 5, 2), {H, W, 2});
    ro.coverage = *coverage;
    return ro;
}

}  // namespace dyav
