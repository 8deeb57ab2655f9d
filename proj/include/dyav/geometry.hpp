#ifndef DYAV_GEOMETRY_HPP
#define DYAV_GEOMETRY_HPP

// Rotations (6D parameterization, quaternions), positional encoding, the
// 22-joint skeleton with forward kinematics, and pinhole cameras.
// World convention: y-up, right-handed, meters. Pixels: x right, y down.

#include <array>
#include <fstream>

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <json.hpp>

#include "tensor.hpp"

namespace dyav {

using Vec3 = Eigen::Vector3f;
using Mat3 = Eigen::Matrix3f;
using Mat4 = Eigen::Matrix4f;
using Quat = Eigen::Quaternionf;

struct Rotation6d {
    std::array<float, 6> v{1, 0, 0, 0, 1, 0}; // identity

    static Rotation6d from_matrix(const Mat3& R) {
        // first two columns
        return Rotation6d{{R(0, 0), R(1, 0), R(2, 0), R(0, 1), R(1, 1), R(2, 1)}};
    }
};

inline Mat3 rot6d_to_matrix(const Rotation6d& r) {
    Vec3 a(r.v[0], r.v[1], r.v[2]), b(r.v[3], r.v[4], r.v[5]);
    float na = a.norm();
    check(na >= 1e-8f, "rot6d: degenerate first column");
    Vec3 c1 = a / na;
    Vec3 u = b - c1.dot(b) * c1;
    float nu = u.norm();
    check(nu >= 1e-8f, "rot6d: columns are parallel");
    Vec3 c2 = u / nu;
    Mat3 R;
    R.col(0) = c1;
    R.col(1) = c2;
    R.col(2) = c1.cross(c2);
    return R;
}

inline std::vector<float> positional_encode(const float* x, int d, int L) {
    check(L >= 1, "positional_encode: L must be >= 1");
    std::vector<float> out(size_t(2 * L * d));
    size_t k = 0;
    for (int i = 0; i < d; ++i)
        for (int l = 0; l < L; ++l) {
            float f = float(std::ldexp(1.0, l)) * 3.14159265358979323846f * x[i];
            out[k++] = std::sin(f);
            out[k++] = std::cos(f);
        }
    return out;
}
inline std::vector<float> positional_encode(const std::vector<float>& x, int L) {
    return positional_encode(x.data(), int(x.size()), L);
}

// ---------------------------------------------------------------------------
// skeleton / pose / forward kinematics

struct TemplatePoint {
    Vec3 pos;  // rest-pose position, meters
    int joint; // base joint assignment
};

struct Skeleton {
    std::vector<std::string> names;
    std::vector<int> parent;  // -1 for root
    std::vector<Vec3> offset; // rest offset from parent, meters
    std::vector<TemplatePoint> template_points;

    int joints() const { return int(parent.size()); }

    // world transform per joint in the rest pose
    std::vector<Mat4> rest_transforms() const {
        std::vector<Mat4> G(static_cast<size_t>(joints()));
        for (int j = 0; j < joints(); ++j) {
            if (parent[size_t(j)] < 0) {
                G[size_t(j)] = Mat4::Identity();
            } else {
                Mat4 T = Mat4::Identity();
                T.block<3, 1>(0, 3) = offset[size_t(j)];
                G[size_t(j)] = G[size_t(parent[size_t(j)])] * T;
            }
        }
        return G;
    }

    Vec3 joint_rest_position(int j) const {
        Vec3 p = Vec3::Zero();
        while (j >= 0) { if (parent[size_t(j)] >= 0) p += offset[size_t(j)]; j = parent[size_t(j)]; }
        return p;
    }
};

struct Pose {
    std::vector<Rotation6d> rot; // per joint, local
    Vec3 root_translation = Vec3::Zero();
    double time = 0.0; // seconds

    static Pose rest(int joints) {
        Pose p;
        p.rot.assign(size_t(joints), Rotation6d{});
        return p;
    }
};

using PoseSequence = std::vector<Pose>;

struct FkResult {
    std::vector<Mat4> world; // G_j
    std::vector<Mat4> lbs;   // G_j * G_j(rest)^-1
    Vec3 joint_position(int j) const { return world[size_t(j)].block<3, 1>(0, 3); }
};

inline FkResult forward_kinematics(const Skeleton& skel, const Pose& pose) {
    check(int(pose.rot.size()) == skel.joints(),
          "forward_kinematics: pose has " + std::to_string(pose.rot.size()) +
          " joints, skeleton has " + std::to_string(skel.joints()));
    FkResult r;
    int K = skel.joints();
    r.world.resize(size_t(K));
    r.lbs.resize(size_t(K));
    std::vector<Mat4> rest = skel.rest_transforms();
    for (int j = 0; j < K; ++j) {
        Mat4 local = Mat4::Identity();
        local.block<3, 3>(0, 0) = rot6d_to_matrix(pose.rot[size_t(j)]);
        if (skel.parent[size_t(j)] < 0) {
            local.block<3, 1>(0, 3) = pose.root_translation;
            r.world[size_t(j)] = local;
        } else {
            Mat4 T = Mat4::Identity();
            T.block<3, 1>(0, 3) = skel.offset[size_t(j)];
            r.world[size_t(j)] = r.world[size_t(skel.parent[size_t(j)])] * T * local;
        }
        // rest transforms are pure translations, cheap inverse
        Mat4 rest_inv = Mat4::Identity();
        rest_inv.block<3, 1>(0, 3) = -rest[size_t(j)].block<3, 1>(0, 3);
        r.lbs[size_t(j)] = r.world[size_t(j)] * rest_inv;
    }
    return r;
}

// ---------------------------------------------------------------------------
// camera

struct Camera {
    Mat3 K = Mat3::Identity();    // pinhole intrinsics, pixels
    Mat3 R = Mat3::Identity();    // world-to-camera rotation
    Vec3 t = Vec3::Zero();        // world-to-camera translation
    int H = 0, W = 0;

    Vec3 to_camera(const Vec3& p) const { return R * p + t; }

    struct Projection { float x, y, depth; bool behind; };
    Projection project(const Vec3& p_world) const {
        Vec3 c = to_camera(p_world);
        if (c.z() <= 1e-6f) return {0, 0, c.z(), true};
        return {K(0, 0) * c.x() / c.z() + K(0, 2),
                K(1, 1) * c.y() / c.z() + K(1, 2), c.z(), false};
    }

    Vec3 unproject(float x, float y, float depth) const {
        Vec3 c((x - K(0, 2)) / K(0, 0) * depth, (y - K(1, 2)) / K(1, 1) * depth, depth);
        return R.transpose() * (c - t);
    }

    void validate() const {
        check(K(0, 0) > 0 && K(1, 1) > 0, "camera: focal lengths must be positive");
        check(K(0, 2) >= 0 && K(0, 2) <= float(W) && K(1, 2) >= 0 && K(1, 2) <= float(H),
              "camera: principal point outside image");
        check((R * R.transpose() - Mat3::Identity()).norm() < 1e-4f,
              "camera: rotation not orthonormal");
    }

    // camera at `eye` looking at `target`, world y-up
    static Camera look_at(const Vec3& eye, const Vec3& target, float focal, int H, int W) {
        Camera c;
        c.H = H; c.W = W;
        Vec3 fwd = (target - eye).normalized();
        Vec3 right = fwd.cross(Vec3(0, 1, 0)).normalized();
        Vec3 down = fwd.cross(right).normalized(); // pixel y grows downward
        c.R.row(0) = right.transpose();
        c.R.row(1) = down.transpose();
        c.R.row(2) = fwd.transpose();
        c.t = -c.R * eye;
        c.K << focal, 0, float(W) * 0.5f, 0, focal, float(H) * 0.5f, 0, 0, 1;
        return c;
    }
};

// ---------------------------------------------------------------------------
// JSON serialization

inline nlohmann::json camera_to_json(const Camera& c) {
    nlohmann::json j;
    for (int r = 0; r < 3; ++r) {
        j["K"].push_back({c.K(r, 0), c.K(r, 1), c.K(r, 2)});
        j["R"].push_back({c.R(r, 0), c.R(r, 1), c.R(r, 2)});
    }
    j["t"] = {c.t.x(), c.t.y(), c.t.z()};
    j["H"] = c.H; j["W"] = c.W;
    return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
    Camera c;
    for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) {
            c.K(r, k) = j.at("K").at(size_t(r)).at(size_t(k)).get<float>();
            c.R(r, k) = j.at("R").at(size_t(r)).at(size_t(k)).get<float>();
        }
    for (int k = 0; k < 3; ++k) c.t[k] = j.at("t").at(size_t(k)).get<float>();
    c.H = j.at("H").get<int>(); c.W = j.at("W").get<int>();
    c.validate();
    return c;
}

inline nlohmann::json skeleton_to_json(const Skeleton& s) {
    nlohmann::json j;
    j["joints"] = nlohmann::json::array();
    for (int i = 0; i < s.joints(); ++i)
        j["joints"].push_back({{"name", s.names[size_t(i)]},
                               {"parent", s.parent[size_t(i)]},
                               {"offset", {s.offset[size_t(i)].x(), s.offset[size_t(i)].y(), s.offset[size_t(i)].z()}}});
    j["template_points"] = nlohmann::json::array();
    for (const auto& t : s.template_points)
        j["template_points"].push_back({{"pos", {t.pos.x(), t.pos.y(), t.pos.z()}}, {"joint", t.joint}});
    return j;
}

inline Skeleton skeleton_from_json(const nlohmann::json& j) {
    Skeleton s;
    for (const auto& jj : j.at("joints")) {
        s.names.push_back(jj.at("name").get<std::string>());
        s.parent.push_back(jj.at("parent").get<int>());
        auto& o = jj.at("offset");
        s.offset.emplace_back(o.at(0).get<float>(), o.at(1).get<float>(), o.at(2).get<float>());
    }
    // single rooted tree: exactly one root, parents precede children
    int roots = 0;
    for (size_t i = 0; i < s.parent.size(); ++i) {
        if (s.parent[i] < 0) ++roots;
        else check(s.parent[i] < int(i), "skeleton: parent index must precede child");
    }
    check(roots == 1, "skeleton: need exactly one root");
    if (j.contains("template_points"))
        for (const auto& jt : j.at("template_points")) {
            auto& p = jt.at("pos");
            s.template_points.push_back({Vec3(p.at(0).get<float>(), p.at(1).get<float>(), p.at(2).get<float>()),
                                         jt.at("joint").get<int>()});
        }
    return s;
}

// pose sequences as JSON-lines: {"t":seconds,"root":[x,y,z],"rots":[[6 floats]xK]}
inline void save_pose_sequence(const PoseSequence& seq, std::ostream& os) {
    for (const auto& p : seq) {
        nlohmann::json j;
        j["t"] = p.time;
        j["root"] = {p.root_translation.x(), p.root_translation.y(), p.root_translation.z()};
        j["rots"] = nlohmann::json::array();
        for (const auto& r : p.rot) j["rots"].push_back(r.v);
        os << j.dump() << "\n";
    }
}

inline PoseSequence load_pose_sequence(std::istream& is) {
    PoseSequence seq;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        Pose p;
        p.time = j.at("t").get<double>();
        auto& r = j.at("root");
        p.root_translation = Vec3(r.at(0).get<float>(), r.at(1).get<float>(), r.at(2).get<float>());
        for (const auto& jr : j.at("rots")) {
            Rotation6d r6;
            for (int i = 0; i < 6; ++i) r6.v[size_t(i)] = jr.at(size_t(i)).get<float>();
            p.rot.push_back(r6);
        }
        seq.push_back(std::move(p));
    }
    return seq;
}

// ---------------------------------------------------------------------------
// differentiable 6D rotation -> unit quaternion, [N,6] -> [N,4] (w,x,y,z)

namespace detail {

// gradient of Gram-Schmidt: given dL/d(columns c1,c2,c3), accumulate dL/d(a,b)
inline void gram_schmidt_backward(const Vec3& a, const Vec3& b,
                                  const Vec3& g1_in, const Vec3& g2_in, const Vec3& g3,
                                  Vec3& da, Vec3& db) {
    float na = a.norm();
    Vec3 c1 = a / na;
    Vec3 u = b - c1.dot(b) * c1;
    float nu = u.norm();
    Vec3 c2 = u / nu;
    Mat3 P1 = (Mat3::Identity() - c1 * c1.transpose()) / na;
    Mat3 Pu = (Mat3::Identity() - c2 * c2.transpose()) / nu;
    // c3 = c1 x c2
    Vec3 g1 = g1_in + c2.cross(g3);   // [c2]_x g3
    Vec3 g2 = g2_in - c1.cross(g3);   // -[c1]_x g3
    Vec3 du = Pu * g2;
    db = (Mat3::Identity() - c1 * c1.transpose()) * du;
    g1 -= (b * c1.transpose() + c1.dot(b) * Mat3::Identity()) * du;
    da = P1 * g1;
}

// Branch rule shared by mat_to_quat and its backward: 0=w, 1=x, 2=y, 3=z.
inline int quat_branch(const Mat3& R) {
    float tr = R.trace();
    if (tr > R(0, 0) && tr > R(1, 1) && tr > R(2, 2)) return 0;
    if (R(0, 0) >= R(1, 1) && R(0, 0) >= R(2, 2)) return 1;
    return R(1, 1) >= R(2, 2) ? 2 : 3;
}

// quaternion (w,x,y,z) from rotation matrix; sign fixed so w >= 0
inline Quat mat_to_quat(const Mat3& R) {
    float w, x, y, z;
    switch (quat_branch(R)) {
        case 0: {
            w = 0.5f * std::sqrt(1.0f + R.trace());
            float i4 = 1.0f / (4.0f * w);
            x = (R(2, 1) - R(1, 2)) * i4; y = (R(0, 2) - R(2, 0)) * i4; z = (R(1, 0) - R(0, 1)) * i4;
        } break;
        case 1: {
            x = 0.5f * std::sqrt(1.0f + R(0, 0) - R(1, 1) - R(2, 2));
            float i4 = 1.0f / (4.0f * x);
            w = (R(2, 1) - R(1, 2)) * i4; y = (R(0, 1) + R(1, 0)) * i4; z = (R(0, 2) + R(2, 0)) * i4;
        } break;
        case 2: {
            y = 0.5f * std::sqrt(1.0f - R(0, 0) + R(1, 1) - R(2, 2));
            float i4 = 1.0f / (4.0f * y);
            w = (R(0, 2) - R(2, 0)) * i4; x = (R(0, 1) + R(1, 0)) * i4; z = (R(1, 2) + R(2, 1)) * i4;
        } break;
        default: {
            z = 0.5f * std::sqrt(1.0f - R(0, 0) - R(1, 1) + R(2, 2));
            float i4 = 1.0f / (4.0f * z);
            w = (R(1, 0) - R(0, 1)) * i4; x = (R(0, 2) + R(2, 0)) * i4; y = (R(1, 2) + R(2, 1)) * i4;
        }
    }
    float s = w < 0 ? -1.0f : 1.0f;
    return Quat(s * w, s * x, s * y, s * z);
}

inline Mat3 mat_to_quat_backward(const Mat3& R, const Quat& q_stored, const std::array<float, 4>& dq_in) {
    int branch = quat_branch(R);
    // undo the w >= 0 sign fix so branch formulas see a positive dominant component
    float comp[4] = {q_stored.w(), q_stored.x(), q_stored.y(), q_stored.z()};
    float s = comp[branch] < 0 ? -1.0f : 1.0f;
    float w = s * comp[0], x = s * comp[1], y = s * comp[2], z = s * comp[3];
    std::array<float, 4> dq{s * dq_in[0], s * dq_in[1], s * dq_in[2], s * dq_in[3]};
    Mat3 dR = Mat3::Zero();
    auto add = [&](int i, int j, float v) { dR(i, j) += v; };
    if (branch == 0) {
        // w = 0.5*sqrt(1+tr); x=(R21-R12)/4w; y=(R02-R20)/4w; z=(R10-R01)/4w
        float inv4w = 1.0f / (4.0f * w);
        float dnum_x = dq[1] * inv4w, dnum_y = dq[2] * inv4w, dnum_z = dq[3] * inv4w;
        float dw = dq[0] - (dq[1] * x + dq[2] * y + dq[3] * z) / w;
        float dtr = dw / (8.0f * w);
        add(0, 0, dtr); add(1, 1, dtr); add(2, 2, dtr);
        add(2, 1, dnum_x); add(1, 2, -dnum_x);
        add(0, 2, dnum_y); add(2, 0, -dnum_y);
        add(1, 0, dnum_z); add(0, 1, -dnum_z);
    } else if (branch == 1) {
        // x = 0.5*sqrt(1+R00-R11-R22); w=(R21-R12)/4x; y=(R01+R10)/4x; z=(R02+R20)/4x
        float inv4x = 1.0f / (4.0f * x);
        float dnum_w = dq[0] * inv4x, dnum_y = dq[2] * inv4x, dnum_z = dq[3] * inv4x;
        float dx = dq[1] - (dq[0] * w + dq[2] * y + dq[3] * z) / x;
        float dt = dx / (8.0f * x);
        add(0, 0, dt); add(1, 1, -dt); add(2, 2, -dt);
        add(2, 1, dnum_w); add(1, 2, -dnum_w);
        add(0, 1, dnum_y); add(1, 0, dnum_y);
        add(0, 2, dnum_z); add(2, 0, dnum_z);
    } else if (branch == 2) {
        // y = 0.5*sqrt(1-R00+R11-R22); w=(R02-R20)/4y; x=(R01+R10)/4y; z=(R12+R21)/4y
        float inv4y = 1.0f / (4.0f * y);
        float dnum_w = dq[0] * inv4y, dnum_x = dq[1] * inv4y, dnum_z = dq[3] * inv4y;
        float dy = dq[2] - (dq[0] * w + dq[1] * x + dq[3] * z) / y;
        float dt = dy / (8.0f * y);
        add(0, 0, -dt); add(1, 1, dt); add(2, 2, -dt);
        add(0, 2, dnum_w); add(2, 0, -dnum_w);
        add(0, 1, dnum_x); add(1, 0, dnum_x);
        add(1, 2, dnum_z); add(2, 1, dnum_z);
    } else {
        // z = 0.5*sqrt(1-R00-R11+R22); w=(R10-R01)/4z; x=(R02+R20)/4z; y=(R12+R21)/4z
        float inv4z = 1.0f / (4.0f * z);
        float dnum_w = dq[0] * inv4z, dnum_x = dq[1] * inv4z, dnum_y = dq[2] * inv4z;
        float dz = dq[3] - (dq[0] * w + dq[1] * x + dq[2] * y) / z;
        float dt = dz / (8.0f * z);
        add(0, 0, -dt); add(1, 1, -dt); add(2, 2, dt);
        add(1, 0, dnum_w); add(0, 1, -dnum_w);
        add(0, 2, dnum_x); add(2, 0, dnum_x);
        add(1, 2, dnum_y); add(2, 1, dnum_y);
    }
    return dR;
}

} // namespace detail

// Differentiable per-row 6D -> quaternion (w,x,y,z). Used by the Gaussian
// decoder; the quaternion sign is fixed (w >= 0 at the branch point).
inline Tensor rot6d_to_quat(const Tensor& r6) {
    check(r6.rank() == 2 && r6.cols() == 6, "rot6d_to_quat: input must be [N,6]");
    int N = r6.rows();
    Tensor out = detail::op_output({N, 4}, {r6});
    for (int i = 0; i < N; ++i) {
        Rotation6d r;
        for (int k = 0; k < 6; ++k) r.v[size_t(k)] = r6.at(size_t(i) * 6 + k);
        Quat q = detail::mat_to_quat(rot6d_to_matrix(r));
        float* o = out.data() + size_t(i) * 4;
        o[0] = q.w(); o[1] = q.x(); o[2] = q.y(); o[3] = q.z();
    }
    auto rn = r6.node(); auto on = out.node().get();
    detail::set_backward(out, [rn, on, N] {
        rn->ensure_grad();
        for (int i = 0; i < N; ++i) {
            Vec3 a(rn->value[size_t(i) * 6], rn->value[size_t(i) * 6 + 1], rn->value[size_t(i) * 6 + 2]);
            Vec3 b(rn->value[size_t(i) * 6 + 3], rn->value[size_t(i) * 6 + 4], rn->value[size_t(i) * 6 + 5]);
            Rotation6d r; for (int k = 0; k < 6; ++k) r.v[size_t(k)] = rn->value[size_t(i) * 6 + k];
            Mat3 R = rot6d_to_matrix(r);
            Quat q(on->value[size_t(i) * 4], on->value[size_t(i) * 4 + 1],
                   on->value[size_t(i) * 4 + 2], on->value[size_t(i) * 4 + 3]);
            std::array<float, 4> dq{on->grad[size_t(i) * 4], on->grad[size_t(i) * 4 + 1],
                                    on->grad[size_t(i) * 4 + 2], on->grad[size_t(i) * 4 + 3]};
            Mat3 dR = detail::mat_to_quat_backward(R, q, dq);
            Vec3 da, db;
            detail::gram_schmidt_backward(a, b, dR.col(0), dR.col(1), dR.col(2), da, db);
            for (int k = 0; k < 3; ++k) {
                rn->grad[size_t(i) * 6 + k] += da[k];
                rn->grad[size_t(i) * 6 + 3 + k] += db[k];
            }
        }
    });
    return out;
}

} // namespace dyav

#endif
