#pragma once

#include <dyav/animation.hpp>
#include <dyav/image.hpp>
#include <dyav/losses.hpp>
#include <dyav/model.hpp>
#include <dyav/splatter.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace dyav {

// 22-joint generic humanoid, y-up, about 1.6 m tall, pelvis at the origin
inline Skeleton humanoid_skeleton() {
    Skeleton s;
    auto add = [&](const char* name, int parent, float x, float y, float z) {
        s.names.push_back(name);
        s.parent.push_back(parent);
        s.offset.emplace_back(x, y, z);
    };
    add("pelvis", -1, 0, 0, 0);
    add("l_hip", 0, 0.09f, -0.05f, 0);      // 1
    add("l_knee", 1, 0, -0.40f, 0);         // 2
    add("l_ankle", 2, 0, -0.42f, 0);        // 3
    add("l_foot", 3, 0, -0.06f, 0.12f);     // 4
    add("r_hip", 0, -0.09f, -0.05f, 0);     // 5
    add("r_knee", 5, 0, -0.40f, 0);         // 6
    add("r_ankle", 6, 0, -0.42f, 0);        // 7
    add("r_foot", 7, 0, -0.06f, 0.12f);     // 8
    add("spine1", 0, 0, 0.12f, 0);          // 9
    add("spine2", 9, 0, 0.13f, 0);          // 10
    add("chest", 10, 0, 0.13f, 0);          // 11
    add("neck", 11, 0, 0.10f, 0);           // 12
    add("head", 12, 0, 0.12f, 0);           // 13
    add("l_shoulder", 11, 0.17f, 0.04f, 0); // 14
    add("l_elbow", 14, 0.26f, 0, 0);        // 15
    add("l_wrist", 15, 0.25f, 0, 0);        // 16
    add("l_hand", 16, 0.08f, 0, 0);         // 17
    add("r_shoulder", 11, -0.17f, 0.04f, 0);// 18
    add("r_elbow", 18, -0.26f, 0, 0);       // 19
    add("r_wrist", 19, -0.25f, 0, 0);       // 20
    add("r_hand", 20, -0.08f, 0, 0);        // 21
    return s;
}

// sample template points on capsules around the bones, proportional to length
inline void sample_template_points(Skeleton& s, int count, Rng& rng) {
    auto rest = s.rest_transforms();
    struct Bone { int joint; Vec3 a, b; float radius, len; };
    std::vector<Bone> bones;
    float total = 0;
    for (int j = 1; j < s.joints(); ++j) {
        Vec3 a = rest[size_t(s.parent[size_t(j)])].block<3, 1>(0, 3);
        Vec3 b = rest[size_t(j)].block<3, 1>(0, 3);
        float len = (b - a).norm();
        if (len < 1e-5f) continue;
        const std::string& n = s.names[size_t(j)];
        float radius = 0.05f;
        if (n.find("spine") != std::string::npos || n == "chest" || n == "neck") radius = 0.11f;
        else if (n == "head") radius = 0.09f;
        else if (n.find("knee") != std::string::npos || n.find("hip") != std::string::npos) radius = 0.07f;
        bones.push_back({s.parent[size_t(j)], a, b, radius, len});
        total += len;
    }
    s.template_points.clear();
    for (int i = 0; i < count; ++i) {
        float pick = rng.uniform(0.f, total);
        size_t bi = 0;
        for (; bi + 1 < bones.size() && pick > bones[bi].len; ++bi) pick -= bones[bi].len;
        const Bone& bone = bones[bi];
        float t = rng.uniform();
        Vec3 axis = (bone.b - bone.a).normalized();
        Vec3 u = axis.cross(Vec3(0.31f, 0.77f, 0.55f)).normalized();
        Vec3 v = axis.cross(u);
        float ang = rng.uniform(0.f, 2.f * float(M_PI));
        float r = bone.radius * std::sqrt(rng.uniform());
        Vec3 p = bone.a + t * (bone.b - bone.a) + r * (std::cos(ang) * u + std::sin(ang) * v);
        s.template_points.push_back({p, bone.joint});
    }
}

// ---------------------------------------------------------------------------
// mass-spring-damper cloth

struct ClothParams {
    float stiffness = 200.f;
    float damping = 10.f;
    float mass = 1.f;
    int substeps = 10;      // at 15 Hz frames this gives the 1/150 s step
    float dt = 1.f / 150.f;
};

struct ClothState {
    std::vector<Vec3> pos, vel;
};

inline Vec3 cloth_gravity() { return Vec3(0.f, -9.8f, 0.f); }

// equilibrium of the spring against gravity, used to initialize resting cloth
inline Vec3 cloth_equilibrium(const Vec3& target, const ClothParams& p) {
    return target + p.mass / p.stiffness * cloth_gravity();
}

// Advance the cloth through the pose window. targets[t][i] is cloth point i's
// rigid attachment position at window frame t; substeps interpolate linearly
// between frames. Returns pos - target at the final frame.
inline std::vector<Vec3> simulate_cloth(ClothState& state,
                                        const std::vector<std::vector<Vec3>>& targets,
                                        const ClothParams& p) {
    check(!targets.empty(), "simulate_cloth: empty pose window");
    const size_t n = state.pos.size();
    for (const auto& t : targets)
        check(t.size() == n, "simulate_cloth: target/state size mismatch");
    check(state.vel.size() == n, "simulate_cloth: state sizes disagree");

    const Vec3 g = cloth_gravity();
    for (size_t f = 0; f + 1 < targets.size() || (targets.size() == 1 && f == 0); ++f) {
        const auto& t0 = targets[f];
        const auto& t1 = targets[std::min(f + 1, targets.size() - 1)];
        for (int s = 0; s < p.substeps; ++s) {
            float a = (float(s) + 1.f) / float(p.substeps);
            for (size_t i = 0; i < n; ++i) {
                Vec3 target = (1.f - a) * t0[i] + a * t1[i];
                Vec3 force = -p.stiffness * (state.pos[i] - target) - p.damping * state.vel[i] +
                             p.mass * g;
                state.vel[i] += p.dt * force / p.mass;
                state.pos[i] += p.dt * state.vel[i];
                check((p.dt * state.vel[i]).norm() < 1.f,
                      "simulate_cloth: unstable step for point " + std::to_string(i) +
                          "; increase damping or stiffness");
            }
        }
        if (targets.size() == 1) break;
    }
    std::vector<Vec3> disp(n);
    for (size_t i = 0; i < n; ++i) disp[i] = state.pos[i] - targets.back()[i];
    return disp;
}

// ---------------------------------------------------------------------------
// motion presets

enum class MotionPreset { walk, jump, fall, spin, arm_raise };

inline const std::vector<std::string>& motion_preset_names() {
    static const std::vector<std::string> names{"walk", "jump", "fall", "spin", "arm-raise"};
    return names;
}

inline MotionPreset parse_preset(const std::string& name) {
    const auto& names = motion_preset_names();
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return MotionPreset(i);
    std::string msg = "unknown preset '" + name + "'; available:";
    for (const auto& n : names) msg += " " + n;
    throw std::runtime_error(msg);
}

constexpr int kMidairFrame = 30;  // jump and fall share this pose exactly

inline PoseSequence preset_poses(MotionPreset preset, const Skeleton& skel, int frames = 60,
                                 float fps = 15.f) {
    const int J = skel.joints();
    auto joint = [&](const std::string& name) {
        for (int j = 0; j < J; ++j)
            if (skel.names[size_t(j)] == name) return j;
        throw std::runtime_error("preset: missing joint " + name);
    };
    auto rotx = [](float a) {
        return Rotation6d::from_matrix(Eigen::AngleAxisf(a, Vec3(1, 0, 0)).toRotationMatrix());
    };
    auto rotz = [](float a) {
        return Rotation6d::from_matrix(Eigen::AngleAxisf(a, Vec3(0, 0, 1)).toRotationMatrix());
    };
    auto roty = [](float a) {
        return Rotation6d::from_matrix(Eigen::AngleAxisf(a, Vec3(0, 1, 0)).toRotationMatrix());
    };

    PoseSequence seq(static_cast<size_t>(frames));
    for (int f = 0; f < frames; ++f) {
        float t = float(f) / fps;
        Pose p = Pose::rest(J);
        p.time = t;
        switch (preset) {
            case MotionPreset::walk: {
                float phase = 2.f * float(M_PI) * 1.2f * t;
                p.root_translation = Vec3(0.6f * t, 0.02f * std::sin(2 * phase), 0);
                p.rot[size_t(joint("l_hip"))] = rotx(0.5f * std::sin(phase));
                p.rot[size_t(joint("r_hip"))] = rotx(-0.5f * std::sin(phase));
                p.rot[size_t(joint("l_knee"))] = rotx(0.4f * std::max(0.f, std::sin(phase + 0.6f)));
                p.rot[size_t(joint("r_knee"))] = rotx(0.4f * std::max(0.f, -std::sin(phase + 0.6f)));
                p.rot[size_t(joint("l_shoulder"))] = rotx(-0.3f * std::sin(phase));
                p.rot[size_t(joint("r_shoulder"))] = rotx(0.3f * std::sin(phase));
                break;
            }
            case MotionPreset::jump: {
                // parabola peaking exactly at the designated mid-air frame
                float dt = (float(f) - float(kMidairFrame)) / fps;
                p.root_translation = Vec3(0, std::max(0.f, 0.5f - 4.9f * dt * dt), 0);
                p.rot[size_t(joint("l_shoulder"))] = rotz(0.4f);
                p.rot[size_t(joint("r_shoulder"))] = rotz(-0.4f);
                break;
            }
            case MotionPreset::fall: {
                // passes through the jump preset's apex pose with downward velocity
                float dt = (float(f) - float(kMidairFrame)) / fps;
                p.root_translation = Vec3(0, 0.5f - 1.8f * dt, 0);
                p.rot[size_t(joint("l_shoulder"))] = rotz(0.4f);
                p.rot[size_t(joint("r_shoulder"))] = rotz(-0.4f);
                break;
            }
            case MotionPreset::spin: {
                p.rot[0] = roty(2.f * float(M_PI) * 0.5f * t);
                break;
            }
            case MotionPreset::arm_raise: {
                float a = std::min(1.f, t / 2.f) * 1.3f;
                p.rot[size_t(joint("l_shoulder"))] = rotz(a);
                p.rot[size_t(joint("r_shoulder"))] = rotz(-a);
                break;
            }
        }
        seq[size_t(f)] = p;
    }
    return seq;
}

// ---------------------------------------------------------------------------
// scene assembly

struct SynthConfig {
    int frames = 60;
    int views = 4;
    int res = 256;
    float focal = 300.f;
    float camera_radius = 3.2f;
    float camera_height = 0.f;
    int body_points = 512;
    int cloth_points = 192;
    std::string preset = "walk";
    ClothParams cloth;
};

struct SyntheticScene {
    Skeleton skel;
    std::vector<Camera> cams;
    GaussianSet canon;               // body then cloth
    std::vector<float> weights;      // N x K rigid skinning weights
    int body_count = 0, cloth_count = 0;
    std::vector<int> cloth_anchor;   // body index each cloth point hangs from
    std::vector<Vec3> cloth_offset;  // canonical offset from the anchor
    PoseSequence poses;
    SynthConfig cfg;
};

namespace synth_detail {

// plain (non-autodiff) LBS of points for simulation targets
inline std::vector<Vec3> pose_points(const std::vector<Vec3>& pts, const std::vector<float>& weights,
                                     const Skeleton& skel, const Pose& pose) {
    const int K = skel.joints();
    FkResult fk = forward_kinematics(skel, pose);
    auto rest = skel.rest_transforms();
    std::vector<Mat4> M(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) M[size_t(j)] = fk.lbs[size_t(j)] * rest[size_t(j)].inverse();
    std::vector<Vec3> out(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
        Mat4 B = Mat4::Zero();
        for (int j = 0; j < K; ++j) B += weights[i * size_t(K) + size_t(j)] * M[size_t(j)];
        Eigen::Vector4f h(pts[i].x(), pts[i].y(), pts[i].z(), 1.f);
        out[i] = (B * h).head<3>();
    }
    return out;
}

}  // namespace synth_detail

inline SyntheticScene build_scene(uint64_t seed, const SynthConfig& cfg) {
    SyntheticScene sc;
    sc.cfg = cfg;
    sc.skel = humanoid_skeleton();
    Rng rng(seed);
    sample_template_points(sc.skel, cfg.body_points, rng);
    const int K = sc.skel.joints();

    for (int v = 0; v < cfg.views; ++v) {
        float a = 2.f * float(M_PI) * float(v) / float(cfg.views);
        sc.cams.push_back(Camera::look_at(
            Vec3(cfg.camera_radius * std::cos(a), cfg.camera_height, cfg.camera_radius * std::sin(a)),
            Vec3(0, -0.15f, 0), cfg.focal, cfg.res, cfg.res));
    }

    sc.body_count = cfg.body_points;
    sc.cloth_count = cfg.cloth_points;
    const int N = sc.body_count + sc.cloth_count;

    std::vector<Vec3> pts;
    for (const auto& t : sc.skel.template_points) pts.push_back(t.pos);

    // cloth: a skirt of points hanging beneath the pelvis/hip region
    std::vector<int> hip_pool;
    for (int i = 0; i < sc.body_count; ++i) {
        int j = sc.skel.template_points[size_t(i)].joint;
        const std::string& n = sc.skel.names[size_t(j)];
        if (n == "pelvis" || n.find("hip") != std::string::npos) hip_pool.push_back(i);
    }
    check(!hip_pool.empty(), "build_scene: no hip-region template points");
    for (int i = 0; i < sc.cloth_count; ++i) {
        int anchor = hip_pool[rng.below(hip_pool.size())];
        float ang = rng.uniform(0.f, 2.f * float(M_PI));
        float rad = rng.uniform(0.16f, 0.26f);
        float drop = rng.uniform(0.05f, 0.45f);
        Vec3 anchor_pos = pts[size_t(anchor)];
        Vec3 p(anchor_pos.x() * 0.3f + rad * std::cos(ang), anchor_pos.y() - drop,
               anchor_pos.z() * 0.3f + rad * std::sin(ang));
        sc.cloth_anchor.push_back(anchor);
        sc.cloth_offset.push_back(p - anchor_pos);
        pts.push_back(p);
        // cloth points join the template so point-token models cover them
        sc.skel.template_points.push_back(
            {p, sc.skel.template_points[size_t(anchor)].joint});
    }

    // rigid weights: diffused for body, anchor's weights for cloth
    std::vector<Vec3> body_pts(pts.begin(), pts.begin() + sc.body_count);
    std::vector<float> bw = diffuse_weights(body_pts, sc.skel);
    sc.weights.assign(size_t(N) * size_t(K), 0.f);
    std::copy(bw.begin(), bw.end(), sc.weights.begin());
    for (int i = 0; i < sc.cloth_count; ++i)
        for (int j = 0; j < K; ++j)
            sc.weights[size_t(sc.body_count + i) * size_t(K) + size_t(j)] =
                bw[size_t(sc.cloth_anchor[size_t(i)]) * size_t(K) + size_t(j)];

    // canonical gaussians: skin-toned body, red cloth, small anisotropic blobs
    std::vector<float> mean, ls, quat, op, col;
    for (int i = 0; i < N; ++i) {
        const Vec3& p = pts[size_t(i)];
        mean.insert(mean.end(), {p.x(), p.y(), p.z()});
        float base = i < sc.body_count ? std::log(0.035f) : std::log(0.030f);
        for (int c = 0; c < 3; ++c) ls.push_back(base + 0.2f * rng.normal());
        float q[4] = {1.f + 0.2f * rng.normal(), 0.1f * rng.normal(), 0.1f * rng.normal(),
                      0.1f * rng.normal()};
        quat.insert(quat.end(), {q[0], q[1], q[2], q[3]});
        op.push_back(2.5f + 0.5f * rng.normal());
        if (i < sc.body_count) {
            float shade = rng.uniform(0.55f, 0.8f);
            col.insert(col.end(), {shade, shade * 0.8f, shade * 0.65f});
        } else {
            col.insert(col.end(), {rng.uniform(0.6f, 0.9f), rng.uniform(0.05f, 0.2f),
                                   rng.uniform(0.1f, 0.3f)});
        }
    }
    sc.canon.mean = Tensor::from({N, 3}, mean);
    sc.canon.log_scale = Tensor::from({N, 3}, ls);
    sc.canon.quat = Tensor::from({N, 4}, quat);
    sc.canon.opacity_logit = Tensor::from({N, 1}, op);
    sc.canon.color = Tensor::from({N, 3}, col);

    sc.poses = preset_poses(parse_preset(cfg.preset), sc.skel, cfg.frames);
    return sc;
}

// Cloth positions as a pure function of the anchor-target window: start at
// the spring equilibrium of the oldest window frame with zero velocity and
// integrate forward. Reordering the window changes the result.
inline std::vector<Vec3> cloth_from_window(const std::vector<std::vector<Vec3>>& targets,
                                           const ClothParams& p) {
    check(!targets.empty(), "cloth_from_window: empty window");
    ClothState st;
    st.pos.resize(targets.front().size());
    st.vel.assign(targets.front().size(), Vec3::Zero());
    for (size_t i = 0; i < st.pos.size(); ++i)
        st.pos[i] = cloth_equilibrium(targets.front()[i], p);
    auto disp = simulate_cloth(st, targets, p);
    for (size_t i = 0; i < st.pos.size(); ++i) st.pos[i] = targets.back()[i] + disp[i];
    return st.pos;
}

// GT posed gaussians at frame f: rigid LBS for the body, spring simulation
// over the trailing pose window for the cloth
inline GaussianSet pose_scene_frame(const SyntheticScene& sc, int frame) {
    const int K = sc.skel.joints();
    const int N = sc.body_count + sc.cloth_count;

    Tensor w = Tensor::from({N, K}, sc.weights);
    GaussianSet posed = pose_gaussians(sc.canon, w, sc.poses[size_t(frame)], sc.skel);

    if (sc.cloth_count > 0) {
        // per-frame anchor targets over the trailing window
        int lo = std::max(0, frame - (kMotionSteps - 1));
        std::vector<Vec3> body_pts;
        for (int i = 0; i < sc.body_count; ++i) body_pts.push_back(sc.skel.template_points[size_t(i)].pos);
        std::vector<float> anchor_w(size_t(sc.cloth_count) * size_t(K));
        std::vector<Vec3> anchor_canon(static_cast<size_t>(sc.cloth_count));
        for (int i = 0; i < sc.cloth_count; ++i) {
            anchor_canon[size_t(i)] = body_pts[size_t(sc.cloth_anchor[size_t(i)])];
            for (int j = 0; j < K; ++j)
                anchor_w[size_t(i) * size_t(K) + size_t(j)] =
                    sc.weights[size_t(sc.cloth_anchor[size_t(i)]) * size_t(K) + size_t(j)];
        }
        std::vector<std::vector<Vec3>> targets;
        for (int f = lo; f <= frame; ++f) {
            auto anchors = synth_detail::pose_points(anchor_canon, anchor_w, sc.skel, sc.poses[size_t(f)]);
            std::vector<Vec3> t(static_cast<size_t>(sc.cloth_count));
            for (int i = 0; i < sc.cloth_count; ++i) t[size_t(i)] = anchors[size_t(i)] + sc.cloth_offset[size_t(i)];
            targets.push_back(std::move(t));
        }
        auto cloth_pos = cloth_from_window(targets, sc.cfg.cloth);
        for (int i = 0; i < sc.cloth_count; ++i) {
            size_t gi = size_t(sc.body_count + i);
            const Vec3& x = cloth_pos[size_t(i)];
            posed.mean.data()[gi * 3 + 0] = x.x();
            posed.mean.data()[gi * 3 + 1] = x.y();
            posed.mean.data()[gi * 3 + 2] = x.z();
        }
    }
    return posed;
}

// ---------------------------------------------------------------------------
// dataset writer

namespace synth_detail {

inline Image to_image(const Tensor& t, int channels) {
    Image img(t.dim(0), t.dim(1), channels);
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = t.at(i);
    return img;
}

inline Params gaussian_params(const GaussianSet& gs) {
    Params p;
    p.add("mean", gs.mean);
    p.add("log_scale", gs.log_scale);
    p.add("quat", gs.quat);
    p.add("opacity_logit", gs.opacity_logit);
    p.add("color", gs.color);
    return p;
}

}  // namespace synth_detail

inline GaussianSet load_gt_gaussians(const std::string& path, int n) {
    GaussianSet gs;
    gs.mean = Tensor::make({n, 3});
    gs.log_scale = Tensor::make({n, 3});
    gs.quat = Tensor::make({n, 4});
    gs.opacity_logit = Tensor::make({n, 1});
    gs.color = Tensor::make({n, 3});
    Params p = synth_detail::gaussian_params(gs);
    load_checkpoint(path, p, 0);
    return gs;
}

inline void write_dataset(const std::string& root, const SyntheticScene& sc) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    fs::create_directories(root + "/frames");
    fs::create_directories(root + "/masks");
    fs::create_directories(root + "/gt_gaussians");
    fs::create_directories(root + "/matches");

    nlohmann::json meta;
    meta["skeleton"] = skeleton_to_json(sc.skel);
    meta["cameras"] = nlohmann::json::array();
    for (const auto& c : sc.cams) meta["cameras"].push_back(camera_to_json(c));
    meta["script"] = sc.cfg.preset;
    meta["frames"] = sc.cfg.frames;
    meta["views"] = sc.cfg.views;
    meta["res"] = sc.cfg.res;
    meta["body_count"] = sc.body_count;
    meta["cloth_count"] = sc.cloth_count;
    meta["midair_frame"] = kMidairFrame;
    {
        std::ofstream f(root + "/scene.json");
        check(f.good(), "write_dataset: cannot write scene.json");
        f << meta.dump(2) << "\n";
    }
    {
        std::ofstream f(root + "/poses.jsonl");
        save_pose_sequence(sc.poses, f);
    }

    GaussianSet prev_posed;
    for (int f = 0; f < sc.cfg.frames; ++f) {
        GaussianSet posed = pose_scene_frame(sc, f);
        save_checkpoint(root + "/gt_gaussians/" + std::to_string(f) + ".bin",
                        synth_detail::gaussian_params(posed), 0);

        fs::create_directories(root + "/frames/" + std::to_string(f));
        fs::create_directories(root + "/masks/" + std::to_string(f));
        for (int v = 0; v < sc.cfg.views; ++v) {
            RenderOutput out = render(sc.cams[size_t(v)], posed, RenderMode::rgb);
            std::string img = root + "/frames/" + std::to_string(f) + "/" + std::to_string(v) + ".png";
            std::string msk = root + "/masks/" + std::to_string(f) + "/" + std::to_string(v) + ".png";
            save_png(img, synth_detail::to_image(out.rgb, 3));
            save_png(msk, synth_detail::to_image(out.alpha, 1));
        }

        if (f > 0) {
            auto set = match_synthetic(prev_posed, posed, sc.cams[0], sc.cams[0]);
            set.src_image = "frames/" + std::to_string(f - 1) + "/0.png";
            set.tgt_image = "frames/" + std::to_string(f) + "/0.png";
            save_matches(root + "/matches/" + std::to_string(f - 1) + "_" + std::to_string(f) +
                             ".jsonl", set);
        }
        prev_posed = posed;
    }
}

struct LoadedDataset {
    Skeleton skel;
    std::vector<Camera> cams;
    PoseSequence poses;
    int frames = 0, views = 0, res = 0;
    int body_count = 0, cloth_count = 0;
    int midair_frame = 0;
    std::string root;

    std::string frame_path(int f, int v) const {
        return root + "/frames/" + std::to_string(f) + "/" + std::to_string(v) + ".png";
    }
    std::string mask_path(int f, int v) const {
        return root + "/masks/" + std::to_string(f) + "/" + std::to_string(v) + ".png";
    }
    GaussianSet gt_gaussians(int f) const {
        return load_gt_gaussians(root + "/gt_gaussians/" + std::to_string(f) + ".bin",
                                 body_count + cloth_count);
    }
};

inline LoadedDataset load_dataset(const std::string& root) {
    LoadedDataset d;
    d.root = root;
    std::ifstream f(root + "/scene.json");
    check(f.good(), "load_dataset: missing " + root + "/scene.json");
    nlohmann::json meta = nlohmann::json::parse(f);
    d.skel = skeleton_from_json(meta.at("skeleton"));
    for (const auto& jc : meta.at("cameras")) d.cams.push_back(camera_from_json(jc));
    d.frames = meta.at("frames").get<int>();
    d.views = meta.at("views").get<int>();
    d.res = meta.at("res").get<int>();
    d.body_count = meta.at("body_count").get<int>();
    d.cloth_count = meta.at("cloth_count").get<int>();
    d.midair_frame = meta.value("midair_frame", kMidairFrame);
    std::ifstream pf(root + "/poses.jsonl");
    check(pf.good(), "load_dataset: missing poses.jsonl");
    d.poses = load_pose_sequence(pf);
    check(int(d.poses.size()) == d.frames, "load_dataset: pose count mismatch");
    return d;
}

inline void generate_scene(uint64_t seed, const SynthConfig& cfg, const std::string& out_dir) {
    SyntheticScene sc = build_scene(seed, cfg);
    write_dataset(out_dir, sc);
}

}  // namespace dyav
