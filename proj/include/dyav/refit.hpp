#pragma once

#include <dyav/geometry.hpp>

#include <json.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace dyav {

namespace refit_detail {
constexpr float kConfGate = 0.3f;     // shared by triangulation and fitting
constexpr float kHeadLimit = 30.f * float(M_PI) / 180.f;
constexpr float kAnkleLimit = 45.f * float(M_PI) / 180.f;
constexpr float kRegWeight = 0.1f;
constexpr int kFitSteps = 500;
constexpr float kFitLr = 1e-2f;
}  // namespace refit_detail

struct KeypointObservations {
    int frames = 0, views = 0, joints = 0;
    std::vector<float> u, v, conf;  // frames*views*joints each

    void resize(int f, int vw, int j) {
        frames = f; views = vw; joints = j;
        size_t n = size_t(f) * size_t(vw) * size_t(j);
        u.assign(n, 0.f); v.assign(n, 0.f); conf.assign(n, 0.f);
    }
    size_t idx(int f, int vw, int j) const {
        return (size_t(f) * size_t(views) + size_t(vw)) * size_t(joints) + size_t(j);
    }
};

struct FitResult {
    PoseSequence poses;
    std::vector<float> reproj_px;   // mean over gated observations, per frame
    std::vector<int> inlier_views;  // views contributing at least one gated joint
    std::vector<bool> excluded;
};

// Linear DLT over all views whose root-joint confidence clears the gate,
// then a single Gauss-Newton step on the reprojection residuals.
inline std::optional<Vec3> triangulate_root(const KeypointObservations& obs, int frame,
                                            const std::vector<Camera>& cams, int root_joint = 0) {
    std::vector<int> views;
    for (int vw = 0; vw < obs.views; ++vw)
        if (obs.conf[obs.idx(frame, vw, root_joint)] > refit_detail::kConfGate) views.push_back(vw);
    if (views.size() < 2) return std::nullopt;

    Eigen::MatrixXd A(2 * views.size(), 4);
    for (size_t r = 0; r < views.size(); ++r) {
        const Camera& c = cams[size_t(views[r])];
        Eigen::Matrix<double, 3, 4> P;
        P.leftCols<3>() = (c.K * c.R).cast<double>();
        P.col(3) = (c.K * c.t).cast<double>();
        double uu = obs.u[obs.idx(frame, views[r], root_joint)];
        double vv = obs.v[obs.idx(frame, views[r], root_joint)];
        A.row(2 * Eigen::Index(r)) = uu * P.row(2) - P.row(0);
        A.row(2 * Eigen::Index(r) + 1) = vv * P.row(2) - P.row(1);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    Eigen::Vector4d h = svd.matrixV().col(3);
    if (std::fabs(h[3]) < 1e-12) return std::nullopt;
    Eigen::Vector3d x = h.head<3>() / h[3];

    // one Gauss-Newton step on the stacked reprojection residuals
    Eigen::MatrixXd J(2 * views.size(), 3);
    Eigen::VectorXd r(2 * views.size());
    for (size_t k = 0; k < views.size(); ++k) {
        const Camera& c = cams[size_t(views[k])];
        Eigen::Vector3d pc = (c.R.cast<double>() * x + c.t.cast<double>());
        if (pc.z() < 1e-6) return Vec3(x.cast<float>());
        double fx = c.K(0, 0), fy = c.K(1, 1);
        double px = fx * pc.x() / pc.z() + c.K(0, 2);
        double py = fy * pc.y() / pc.z() + c.K(1, 2);
        r[2 * Eigen::Index(k)] = px - obs.u[obs.idx(frame, views[k], root_joint)];
        r[2 * Eigen::Index(k) + 1] = py - obs.v[obs.idx(frame, views[k], root_joint)];
        Eigen::Matrix<double, 2, 3> dpix;
        dpix << fx / pc.z(), 0, -fx * pc.x() / (pc.z() * pc.z()),
                0, fy / pc.z(), -fy * pc.y() / (pc.z() * pc.z());
        J.block<2, 3>(2 * Eigen::Index(k), 0) = dpix * c.R.cast<double>();
    }
    Eigen::Matrix3d JtJ = J.transpose() * J;
    if (std::fabs(JtJ.determinant()) > 1e-12) x -= JtJ.ldlt().solve(J.transpose() * r);
    return Vec3(x.cast<float>());
}

namespace refit_detail {

// x-axis Euler angle of a local joint rotation
inline float pitch_of(const Mat3& R) { return std::atan2(R(2, 1), R(2, 2)); }

inline double fit_objective(const std::vector<float>& params, const KeypointObservations& obs,
                            int frame, const std::vector<Camera>& cams, const Skeleton& skel,
                            float time) {
    const int J = skel.joints();
    Pose p;
    p.time = time;
    p.rot.resize(size_t(J));
    for (int j = 0; j < J; ++j)
        for (int c = 0; c < 6; ++c) p.rot[size_t(j)].v[size_t(c)] = params[size_t(j) * 6 + size_t(c)];
    p.root_translation = Vec3(params[size_t(J) * 6], params[size_t(J) * 6 + 1], params[size_t(J) * 6 + 2]);

    FkResult fk = forward_kinematics(skel, p);
    double loss = 0;
    for (int vw = 0; vw < obs.views; ++vw)
        for (int j = 0; j < J; ++j) {
            float cf = obs.conf[obs.idx(frame, vw, j)];
            if (cf <= kConfGate) continue;
            auto pr = cams[size_t(vw)].project(fk.joint_position(j));
            if (pr.behind) continue;
            loss += std::fabs(pr.x - obs.u[obs.idx(frame, vw, j)]) +
                    std::fabs(pr.y - obs.v[obs.idx(frame, vw, j)]);
        }
    for (int j = 0; j < J; ++j) {
        const std::string& n = skel.names[size_t(j)];
        float limit = 0;
        if (n.find("head") != std::string::npos) limit = kHeadLimit;
        else if (n.find("ankle") != std::string::npos) limit = kAnkleLimit;
        else continue;
        Rotation6d r;
        for (int c = 0; c < 6; ++c) r.v[size_t(c)] = params[size_t(j) * 6 + size_t(c)];
        float pitch = pitch_of(rot6d_to_matrix(r));
        float over = std::fabs(pitch) - limit;
        if (over > 0) loss += double(kRegWeight) * over * over;
    }
    return loss;
}

}  // namespace refit_detail

// Multi-view L1 reprojection fitting by Adam over the 6D joint rotations and
// the root translation, finite-difference gradients, cosine-decayed steps.
// Returns nullopt when no observation clears the confidence gate.
inline std::optional<Pose> fit_pose(const KeypointObservations& obs, int frame,
                                    const std::vector<Camera>& cams, const Skeleton& skel,
                                    const Pose& init, float* final_loss = nullptr) {
    using namespace refit_detail;
    const int J = skel.joints();
    check(int(cams.size()) == obs.views, "fit_pose: camera/view count mismatch");
    check(obs.joints == J, "fit_pose: joint count mismatch");

    bool any = false;
    for (int vw = 0; vw < obs.views && !any; ++vw)
        for (int j = 0; j < J && !any; ++j)
            if (obs.conf[obs.idx(frame, vw, j)] > kConfGate) any = true;
    if (!any) return std::nullopt;

    std::vector<float> params(size_t(J) * 6 + 3);
    for (int j = 0; j < J; ++j)
        for (int c = 0; c < 6; ++c) params[size_t(j) * 6 + size_t(c)] = init.rot[size_t(j)].v[size_t(c)];
    params[size_t(J) * 6] = init.root_translation.x();
    params[size_t(J) * 6 + 1] = init.root_translation.y();
    params[size_t(J) * 6 + 2] = init.root_translation.z();

    const size_t n = params.size();
    std::vector<float> m(n, 0.f), vv(n, 0.f);
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f, h = 1e-3f;
    for (int step = 0; step < kFitSteps; ++step) {
        float lr = kFitLr * 0.5f * (1.f + std::cos(float(M_PI) * float(step) / float(kFitSteps)));
        for (size_t i = 0; i < n; ++i) {
            float save = params[i];
            params[i] = save + h;
            double fp = fit_objective(params, obs, frame, cams, skel, init.time);
            params[i] = save - h;
            double fm = fit_objective(params, obs, frame, cams, skel, init.time);
            params[i] = save;
            float g = float((fp - fm) / (2 * h));
            m[i] = b1 * m[i] + (1 - b1) * g;
            vv[i] = b2 * vv[i] + (1 - b2) * g * g;
            float mh = m[i] / (1 - std::pow(b1, float(step + 1)));
            float vh = vv[i] / (1 - std::pow(b2, float(step + 1)));
            params[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }

    Pose out;
    out.time = init.time;
    out.rot.resize(size_t(J));
    for (int j = 0; j < J; ++j) {
        Rotation6d r;
        for (int c = 0; c < 6; ++c) r.v[size_t(c)] = params[size_t(j) * 6 + size_t(c)];
        out.rot[size_t(j)] = Rotation6d::from_matrix(rot6d_to_matrix(r));
    }
    out.root_translation = Vec3(params[size_t(J) * 6], params[size_t(J) * 6 + 1], params[size_t(J) * 6 + 2]);
    if (final_loss) *final_loss = float(fit_objective(params, obs, frame, cams, skel, init.time));
    return out;
}

// Savitzky-Golay smoothing of the root translation and 6D rotation channels.
// Endpoints fall back to a polynomial fit on the truncated window.
inline PoseSequence savgol_smooth(const PoseSequence& seq, int window = 7, int polyorder = 2) {
    check(window % 2 == 1, "savgol: window must be odd");
    check(window > polyorder, "savgol: window must exceed polyorder");
    check(window <= int(seq.size()), "savgol: window longer than the sequence");
    const int n = int(seq.size());
    const int half = window / 2;
    const int J = n ? int(seq[0].rot.size()) : 0;
    const int channels = J * 6 + 3;

    auto channel = [&](const Pose& p, int c) -> float {
        if (c < J * 6) return p.rot[size_t(c / 6)].v[size_t(c % 6)];
        return p.root_translation[c - J * 6];
    };

    PoseSequence out = seq;
    for (int i = 0; i < n; ++i) {
        int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
        int w = hi - lo + 1;
        int deg = std::min(polyorder, w - 1);
        Eigen::MatrixXd V(w, deg + 1);
        for (int r = 0; r < w; ++r) {
            double t = lo + r - i;  // centered abscissa
            double pw = 1;
            for (int d = 0; d <= deg; ++d) { V(r, d) = pw; pw *= t; }
        }
        // evaluate the least-squares polynomial at t=0: first row of the
        // pseudo-inverse applied to the window samples
        Eigen::MatrixXd pinv = (V.transpose() * V).ldlt().solve(V.transpose());
        Eigen::RowVectorXd w0 = pinv.row(0);
        std::vector<float> smoothed(static_cast<size_t>(channels));
        for (int c = 0; c < channels; ++c) {
            double s = 0;
            for (int r = 0; r < w; ++r) s += w0[r] * double(channel(seq[size_t(lo + r)], c));
            smoothed[size_t(c)] = float(s);
        }
        for (int j = 0; j < J; ++j) {
            Rotation6d r;
            for (int c = 0; c < 6; ++c) r.v[size_t(c)] = smoothed[size_t(j) * 6 + size_t(c)];
            out[size_t(i)].rot[size_t(j)] = Rotation6d::from_matrix(rot6d_to_matrix(r));
        }
        out[size_t(i)].root_translation =
            Vec3(smoothed[size_t(J) * 6], smoothed[size_t(J) * 6 + 1], smoothed[size_t(J) * 6 + 2]);
    }
    return out;
}

// The whole reannotation pass: per-frame triangulation + fitting with warm
// starts, then temporal smoothing. Individual frames are flagged, never fatal.
inline FitResult refit_sequence(const KeypointObservations& obs, const std::vector<Camera>& cams,
                                const Skeleton& skel, float fps = 15.f) {
    using namespace refit_detail;
    const int J = skel.joints();
    FitResult res;
    res.poses.resize(size_t(obs.frames));
    res.reproj_px.assign(size_t(obs.frames), 0.f);
    res.inlier_views.assign(size_t(obs.frames), 0);
    res.excluded.assign(size_t(obs.frames), false);

    Pose prev = Pose::rest(J);
    bool have_prev = false;
    for (int f = 0; f < obs.frames; ++f) {
        Pose& slot = res.poses[size_t(f)];
        slot = have_prev ? prev : Pose::rest(J);
        slot.time = float(f) / fps;

        double conf_sum = 0;
        size_t conf_n = 0;
        for (int vw = 0; vw < obs.views; ++vw)
            for (int j = 0; j < J; ++j) { conf_sum += obs.conf[obs.idx(f, vw, j)]; ++conf_n; }
        float mean_conf = conf_n ? float(conf_sum / double(conf_n)) : 0.f;
        if (mean_conf < 0.4f) { res.excluded[size_t(f)] = true; continue; }

        Pose init = have_prev ? prev : Pose::rest(J);
        init.time = slot.time;
        if (!have_prev) {
            auto root = triangulate_root(obs, f, cams);
            if (root) init.root_translation = *root;
        }
        auto fitted = fit_pose(obs, f, cams, skel, init);
        if (!fitted) { res.excluded[size_t(f)] = true; continue; }
        slot = *fitted;
        prev = *fitted;
        have_prev = true;

        // report: mean gated reprojection error and inlier view count
        FkResult fk = forward_kinematics(skel, slot);
        double err = 0;
        int cnt = 0;
        for (int vw = 0; vw < obs.views; ++vw) {
            bool in = false;
            for (int j = 0; j < J; ++j) {
                float cf = obs.conf[obs.idx(f, vw, j)];
                if (cf <= kConfGate) continue;
                auto pr = cams[size_t(vw)].project(fk.joint_position(j));
                if (pr.behind) continue;
                float du = pr.x - obs.u[obs.idx(f, vw, j)];
                float dv = pr.y - obs.v[obs.idx(f, vw, j)];
                err += std::sqrt(double(du) * du + double(dv) * dv);
                ++cnt;
                in = true;
            }
            if (in) ++res.inlier_views[size_t(f)];
        }
        res.reproj_px[size_t(f)] = cnt ? float(err / cnt) : 0.f;
    }

    int fitted_count = 0;
    for (int f = 0; f < obs.frames; ++f)
        if (!res.excluded[size_t(f)]) ++fitted_count;
    if (fitted_count >= 7 && fitted_count == obs.frames)
        res.poses = savgol_smooth(res.poses);
    else if (fitted_count >= 7) {
        // smooth the fitted subsequence only; excluded frames keep the warm copy
        PoseSequence sub;
        std::vector<size_t> map;
        for (size_t f = 0; f < res.poses.size(); ++f)
            if (!res.excluded[f]) { sub.push_back(res.poses[f]); map.push_back(f); }
        sub = savgol_smooth(sub);
        for (size_t i = 0; i < sub.size(); ++i) res.poses[map[i]] = sub[i];
    }
    return res;
}

inline void save_keypoints(const std::string& path, const KeypointObservations& obs) {
    std::ofstream f(path);
    check(f.good(), "save_keypoints: cannot open " + path);
    for (int fr = 0; fr < obs.frames; ++fr)
        for (int vw = 0; vw < obs.views; ++vw)
            for (int j = 0; j < obs.joints; ++j) {
                size_t i = obs.idx(fr, vw, j);
                nlohmann::json rec{{"frame", fr}, {"view", vw}, {"joint", j},
                                   {"u", obs.u[i]}, {"v", obs.v[i]}, {"conf", obs.conf[i]}};
                f << rec.dump() << "\n";
            }
}

inline KeypointObservations load_keypoints(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "load_keypoints: cannot open " + path);
    struct Rec { int frame, view, joint; float u, v, conf; };
    std::vector<Rec> recs;
    int mf = -1, mv = -1, mj = -1;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        Rec r{j["frame"].get<int>(), j["view"].get<int>(), j["joint"].get<int>(),
              j["u"].get<float>(), j["v"].get<float>(), j["conf"].get<float>()};
        check(r.conf >= 0.f && r.conf <= 1.f, "load_keypoints: confidence out of range");
        mf = std::max(mf, r.frame); mv = std::max(mv, r.view); mj = std::max(mj, r.joint);
        recs.push_back(r);
    }
    KeypointObservations obs;
    obs.resize(mf + 1, mv + 1, mj + 1);
    for (const auto& r : recs) {
        size_t i = obs.idx(r.frame, r.view, r.joint);
        obs.u[i] = r.u; obs.v[i] = r.v; obs.conf[i] = r.conf;
    }
    return obs;
}

inline void save_fit_report(const std::string& path, const FitResult& res) {
    std::ofstream f(path);
    check(f.good(), "save_fit_report: cannot open " + path);
    f << "frame,reproj_px,inlier_views,excluded\n";
    for (size_t i = 0; i < res.poses.size(); ++i)
        f << i << "," << res.reproj_px[i] << "," << res.inlier_views[i] << ","
          << (res.excluded[i] ? 1 : 0) << "\n";
}

}  // namespace dyav
