#pragma once

#include <dyav/geometry.hpp>
#include <dyav/splatter.hpp>
#include <dyav/tensor.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace dyav {

namespace anim {

constexpr float kDiffusionSigma = 0.05f;  // meters
constexpr int kDiffusionBones = 4;        // nearest bones kept per point

inline float point_segment_dist(const Vec3& p, const Vec3& a, const Vec3& b) {
    Vec3 ab = b - a;
    float len2 = ab.squaredNorm();
    if (len2 < 1e-12f) return (p - a).norm();
    float t = std::min(1.f, std::max(0.f, (p - a).dot(ab) / len2));
    return (p - (a + t * ab)).norm();
}

// quaternion product r * q as a linear map of q (wxyz layout)
inline Eigen::Matrix4f quat_left(const float r[4]) {
    Eigen::Matrix4f L;
    L << r[0], -r[1], -r[2], -r[3],
         r[1],  r[0], -r[3],  r[2],
         r[2],  r[3],  r[0], -r[1],
         r[3], -r[2],  r[1],  r[0];
    return L;
}

}  // namespace anim

// Distance of each point to each joint's bones (the segments from a joint to
// each of its children; childless joints collapse to their rest position).
// weight_j ~ exp(-d^2 / 2 sigma^2) over the nearest few joints, normalized.
inline std::vector<float> diffuse_weights(const std::vector<Vec3>& points,
                                          const Skeleton& skel) {
    const int K = skel.joints();
    std::vector<Vec3> rest(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) rest[size_t(j)] = skel.joint_rest_position(j);

    std::vector<std::vector<std::pair<Vec3, Vec3>>> bones(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) {
        int p = skel.parent[size_t(j)];
        if (p >= 0) bones[size_t(p)].emplace_back(rest[size_t(p)], rest[size_t(j)]);
    }
    for (int j = 0; j < K; ++j)
        if (bones[size_t(j)].empty()) bones[size_t(j)].emplace_back(rest[size_t(j)], rest[size_t(j)]);

    const float inv2s2 = 1.f / (2.f * anim::kDiffusionSigma * anim::kDiffusionSigma);
    std::vector<float> w(points.size() * size_t(K), 0.f);
    for (size_t i = 0; i < points.size(); ++i) {
        std::vector<std::pair<float, int>> dist(static_cast<size_t>(K));
        for (int j = 0; j < K; ++j) {
            float d = std::numeric_limits<float>::max();
            for (const auto& [a, b] : bones[size_t(j)])
                d = std::min(d, anim::point_segment_dist(points[i], a, b));
            dist[size_t(j)] = {d, j};
        }
        std::sort(dist.begin(), dist.end());
        const int keep = std::min(anim::kDiffusionBones, K);
        // subtract the nearest distance so far-away points don't underflow
        const double d0 = dist[0].first;
        double norm = 0;
        for (int r = 0; r < keep; ++r) {
            double d = dist[size_t(r)].first;
            norm += std::exp(-(d * d - d0 * d0) * inv2s2);
        }
        for (int r = 0; r < keep; ++r) {
            double d = dist[size_t(r)].first;
            w[i * size_t(K) + size_t(dist[size_t(r)].second)] =
                float(std::exp(-(d * d - d0 * d0) * inv2s2) / norm);
        }
    }
    return w;
}

// w = softmax(log(diffused + 1e-8) + offsets); zero offsets reproduce the
// diffused weights (up to the floor) and rows always stay on the simplex.
inline Tensor refine_weights(const Tensor& diffused, const Tensor& offsets) {
    check(diffused.shape() == offsets.shape(), "refine_weights: shape mismatch");
    return softmax_rows(add(log_(add_const(diffused, 1e-8f)), offsets));
}

// Linear blend skinning of Gaussian means and rotations. Gradients flow to
// canonical means, quaternions, and the skinning weights along the mean
// path; the polar-decomposed blend rotation is treated as locally constant
// w.r.t. the weights (its quaternion path still differentiates w.r.t. the
// canonical rotation).
struct LbsResult {
    Tensor mean;  // [N,3]
    Tensor quat;  // [N,4]
};

inline LbsResult lbs(const Tensor& mean, const Tensor& quat, const Tensor& weights,
                     const Pose& pose, const Skeleton& skel) {
    const int N = mean.dim(0), K = skel.joints();
    check(weights.rank() == 2 && weights.dim(0) == N && weights.dim(1) == K,
          "lbs: weights must be [N, joints]");
    check(quat.dim(0) == N, "lbs: quat count mismatch");

    FkResult fk = forward_kinematics(skel, pose);
    // per-point packed output: posed mean (3) + posed quat (4)
    Tensor packed = detail::op_output({N, 7}, {mean, quat, weights});

    // per-point blend state retained for backward
    auto blend = std::make_shared<std::vector<Eigen::Matrix<float, 3, 4>>>(size_t(N));
    auto polar = std::make_shared<std::vector<Eigen::Matrix4f>>(size_t(N));  // quat_left(r)

    for (int i = 0; i < N; ++i) {
        Mat4 B = Mat4::Zero();
        for (int j = 0; j < K; ++j) {
            float w = weights.at(size_t(i) * K + j);
            if (w != 0.f) B += w * fk.lbs[size_t(j)];
        }
        Mat3 L = B.block<3, 3>(0, 0);
        check(std::fabs(L.determinant()) > 1e-9f,
              "lbs: non-invertible blended transform for gaussian " + std::to_string(i));
        (*blend)[size_t(i)] = B.block<3, 4>(0, 0);

        Vec3 m(mean.at(size_t(i) * 3), mean.at(size_t(i) * 3 + 1), mean.at(size_t(i) * 3 + 2));
        Vec3 pm = L * m + B.block<3, 1>(0, 3);
        packed.data()[size_t(i) * 7 + 0] = pm.x();
        packed.data()[size_t(i) * 7 + 1] = pm.y();
        packed.data()[size_t(i) * 7 + 2] = pm.z();

        // polar rotation of the blended linear part
        Eigen::JacobiSVD<Mat3> svd(L, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 R = svd.matrixU() * svd.matrixV().transpose();
        if (R.determinant() < 0) {
            Mat3 U = svd.matrixU();
            U.col(2) *= -1.f;
            R = U * svd.matrixV().transpose();
        }
        Quat rq(R);
        float r[4] = {rq.w(), rq.x(), rq.y(), rq.z()};
        (*polar)[size_t(i)] = anim::quat_left(r);

        float q[4] = {quat.at(size_t(i) * 4), quat.at(size_t(i) * 4 + 1),
                      quat.at(size_t(i) * 4 + 2), quat.at(size_t(i) * 4 + 3)};
        float n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        check(n > 1e-8f, "lbs: zero quaternion for gaussian " + std::to_string(i));
        Eigen::Vector4f qh(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        Eigen::Vector4f qo = (*polar)[size_t(i)] * qh;
        for (int c = 0; c < 4; ++c) packed.data()[size_t(i) * 7 + 3 + c] = qo[c];
    }

    auto mn = mean.node(), qn = quat.node(), wn = weights.node();
    auto on = packed.node().get();
    std::vector<Eigen::Matrix<float, 3, 4>> lbs_mats(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) lbs_mats[size_t(j)] = fk.lbs[size_t(j)].block<3, 4>(0, 0);
    detail::set_backward(packed, [=, lbs_mats = std::move(lbs_mats)] {
        mn->ensure_grad();
        qn->ensure_grad();
        wn->ensure_grad();
        for (int i = 0; i < N; ++i) {
            Vec3 g(on->grad[size_t(i) * 7], on->grad[size_t(i) * 7 + 1], on->grad[size_t(i) * 7 + 2]);
            const auto& B = (*blend)[size_t(i)];
            Vec3 m(mn->value[size_t(i) * 3], mn->value[size_t(i) * 3 + 1], mn->value[size_t(i) * 3 + 2]);
            // mean path
            Vec3 dm = B.block<3, 3>(0, 0).transpose() * g;
            for (int c = 0; c < 3; ++c) mn->grad[size_t(i) * 3 + c] += dm[c];
            if (wn->requires_grad) {
                Eigen::Vector4f mh(m.x(), m.y(), m.z(), 1.f);
                for (int j = 0; j < K; ++j)
                    wn->grad[size_t(i) * K + j] += g.dot(lbs_mats[size_t(j)] * mh);
            }
            // rotation path through the quaternion product only
            Eigen::Vector4f gq(on->grad[size_t(i) * 7 + 3], on->grad[size_t(i) * 7 + 4],
                               on->grad[size_t(i) * 7 + 5], on->grad[size_t(i) * 7 + 6]);
            Eigen::Vector4f dqh = (*polar)[size_t(i)].transpose() * gq;
            float q[4] = {qn->value[size_t(i) * 4], qn->value[size_t(i) * 4 + 1],
                          qn->value[size_t(i) * 4 + 2], qn->value[size_t(i) * 4 + 3]};
            float n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
            Eigen::Vector4f qh(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            Eigen::Vector4f dq = (dqh - qh * qh.dot(dqh)) / n;
            for (int c = 0; c < 4; ++c) qn->grad[size_t(i) * 4 + c] += dq[c];
        }
    });

    LbsResult out;
    out.mean = slice_cols(packed, 0, 3);
    out.quat = slice_cols(packed, 3, 4);
    return out;
}

// Poses a canonical GaussianSet: means and rotations move, everything else
// is carried over.
inline GaussianSet pose_gaussians(const GaussianSet& canon, const Tensor& weights,
                                  const Pose& pose, const Skeleton& skel) {
    LbsResult r = lbs(canon.mean, canon.quat, weights, pose, skel);
    GaussianSet out = canon;
    out.mean = r.mean;
    out.quat = r.quat;
    return out;
}

}  // namespace dyav
