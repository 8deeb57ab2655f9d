#pragma once

#include <dyav/geometry.hpp>
#include <dyav/nn.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace dyav {

constexpr int kMotionSteps = 15;     // one second at 15 Hz
constexpr float kMotionHz = 15.f;
constexpr int kJointFeat = 21;       // 3 keypoint vel + 6D pose + 6D vel + 6D accel

// Per-step flattened motion vectors; step kMotionSteps-1 is the current
// frame, earlier unavailable steps stay all-zero.
struct MotionHistory {
    int joints = 0;
    int valid_from = 0;                 // first step backed by a real pose
    std::vector<float> steps;           // [kMotionSteps, joints*21]

    int step_dim() const { return joints * kJointFeat; }
    const float* step(int t) const { return steps.data() + size_t(t) * step_dim(); }
};

// Rigid canonicalization: rotate the whole window so `up` maps to (0,1,0),
// then translate so the current-frame root sits at x=z=0 with its height
// preserved. Horizontal heading is deliberately left untouched.
inline PoseSequence canonicalize(const PoseSequence& poses, const Vec3& up) {
    check(!poses.empty(), "canonicalize: empty sequence");
    check(up.norm() > 1e-8f, "canonicalize: up vector near zero");
    Mat3 Rc = Eigen::Quaternionf::FromTwoVectors(up.normalized(), Vec3(0, 1, 0))
                  .toRotationMatrix();
    Vec3 cur = Rc * poses.back().root_translation;
    Vec3 shift(-cur.x(), 0.f, -cur.z());

    PoseSequence out = poses;
    for (auto& p : out) {
        p.root_translation = Rc * p.root_translation + shift;
        check(!p.rot.empty(), "canonicalize: pose without joints");
        p.rot[0] = Rotation6d::from_matrix(Rc * rot6d_to_matrix(p.rot[0]));
    }
    return out;
}

// Linear resampling in 6D-pose space onto a 15 Hz grid ending at the last
// frame; inputs already on the grid pass through unchanged.
inline PoseSequence resample_to_15hz(const PoseSequence& poses) {
    check(!poses.empty(), "resample: empty sequence");
    if (poses.size() == 1) return poses;
    const double dt = 1.0 / kMotionHz;
    const double t0 = poses.front().time, t1 = poses.back().time;
    int n = int(std::floor((t1 - t0) / dt + 0.5)) + 1;
    PoseSequence out;
    out.reserve(size_t(n));
    size_t j = 0;
    for (int i = 0; i < n; ++i) {
        double t = t1 - double(n - 1 - i) * dt;
        while (j + 2 < poses.size() && poses[j + 1].time <= t) ++j;
        const Pose& a = poses[j];
        const Pose& b = poses[j + 1];
        double w = (t - a.time) / std::max(1e-9, b.time - a.time);
        w = std::min(1.0, std::max(0.0, w));
        Pose p;
        p.time = t;
        p.root_translation = (1 - float(w)) * a.root_translation + float(w) * b.root_translation;
        p.rot.resize(a.rot.size());
        for (size_t k = 0; k < a.rot.size(); ++k) {
            Rotation6d r;
            for (int c = 0; c < 6; ++c)
                r.v[size_t(c)] = (1 - float(w)) * a.rot[k].v[size_t(c)] + float(w) * b.rot[k].v[size_t(c)];
            // re-orthonormalize the interpolated frame
            p.rot[k] = Rotation6d::from_matrix(rot6d_to_matrix(r));
        }
        out.push_back(std::move(p));
    }
    return out;
}

// Backward differences at 15 Hz; steps with no earlier frame get zero
// velocities, steps with no pose at all stay entirely zero.
inline MotionHistory build_history(const PoseSequence& poses, const Skeleton& skel) {
    check(!poses.empty(), "build_history: need at least the current frame");
    const int K = skel.joints();
    MotionHistory h;
    h.joints = K;
    h.steps.assign(size_t(kMotionSteps) * K * kJointFeat, 0.f);

    const int avail = std::min<int>(kMotionSteps, int(poses.size()));
    h.valid_from = kMotionSteps - avail;
    const int base = int(poses.size()) - avail;
    // differences may reach up to two frames before the window
    const int ebase = std::max(0, base - 2);

    std::vector<std::vector<Vec3>> kp(poses.size() - size_t(ebase));
    for (int s = ebase; s < int(poses.size()); ++s) {
        FkResult fk = forward_kinematics(skel, poses[size_t(s)]);
        kp[size_t(s - ebase)].resize(size_t(K));
        for (int j = 0; j < K; ++j) kp[size_t(s - ebase)][size_t(j)] = fk.joint_position(j);
    }

    auto rot6 = [&](int abs_s, int j) { return poses[size_t(abs_s)].rot[size_t(j)].v; };
    for (int s = 0; s < avail; ++s) {
        const int a = base + s;  // absolute pose index for this step
        float* v = h.steps.data() + size_t(h.valid_from + s) * K * kJointFeat;
        for (int j = 0; j < K; ++j) {
            float* f = v + size_t(j) * kJointFeat;
            if (a >= 1)
                for (int c = 0; c < 3; ++c)
                    f[c] = (kp[size_t(a - ebase)][size_t(j)][c] -
                            kp[size_t(a - 1 - ebase)][size_t(j)][c]) * kMotionHz;
            auto r = rot6(a, j);
            for (int c = 0; c < 6; ++c) f[3 + c] = r[size_t(c)];
            if (a >= 1) {
                auto rp = rot6(a - 1, j);
                for (int c = 0; c < 6; ++c) f[9 + c] = (r[size_t(c)] - rp[size_t(c)]) * kMotionHz;
            }
            if (a >= 2) {
                auto rp = rot6(a - 1, j);
                auto rpp = rot6(a - 2, j);
                for (int c = 0; c < 6; ++c) {
                    float v1 = (r[size_t(c)] - rp[size_t(c)]) * kMotionHz;
                    float v0 = (rp[size_t(c)] - rpp[size_t(c)]) * kMotionHz;
                    f[15 + c] = (v1 - v0) * kMotionHz;
                }
            }
        }
    }
    return h;
}

struct MotionTokens {
    Tensor tokens;  // [kMotionSteps, d_model]
    Tensor f_m;     // [1, d_model], view of the last token
};

// Positional encoding (L=4) of each step vector, a 3-layer GELU MLP, and a
// learned temporal index embedding.
struct MotionEncoder {
    static constexpr int kPosencL = 4;
    int d_model = 0;
    int joints = 0;
    Mlp3 mlp;
    Tensor temporal;  // [kMotionSteps, d_model]

    static MotionEncoder create(int d_model, int joints, Rng& rng) {
        MotionEncoder e;
        e.d_model = d_model;
        e.joints = joints;
        int in = joints * kJointFeat * 2 * kPosencL;
        e.mlp = Mlp3::create(in, 512, 512, d_model, rng);
        e.temporal = Tensor::randn({kMotionSteps, d_model}, rng, 0.02f, true);
        return e;
    }

    MotionTokens forward(const MotionHistory& h, const FwdCtx& ctx = {}) const {
        check(h.joints == joints, "encode_motion: joint count mismatch");
        const int dim = h.step_dim();
        const int enc = dim * 2 * kPosencL;
        Tensor in = Tensor::make({kMotionSteps, enc});
        for (int t = 0; t < kMotionSteps; ++t) {
            auto pe = positional_encode(h.step(t), dim, kPosencL);
            std::copy(pe.begin(), pe.end(), in.data() + size_t(t) * enc);
        }
        MotionTokens out;
        out.tokens = add(mlp.forward(in, ctx), temporal);
        out.f_m = slice_rows(out.tokens, kMotionSteps - 1, 1);
        return out;
    }

    void collect(const std::string& prefix, Params& p) const {
        mlp.collect(prefix + ".mlp", p);
        p.add(prefix + ".temporal", temporal);
    }
};

}  // namespace dyav
