#include <doctest.h>

#include <dyav/image.hpp>
#include <dyav/splatter.hpp>

#include "fd_check.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

using namespace dyav;
using namespace dyav::testing;

namespace {

Camera axis_camera(int hw = 64, float focal = 100.f) {
    Camera cam;
    cam.H = cam.W = hw;
    cam.K = Mat3::Identity();
    cam.K(0, 0) = cam.K(1, 1) = focal;
    cam.K(0, 2) = cam.K(1, 2) = (hw - 1) * 0.5f;  // pixel (c,c) samples the axis
    return cam;
}

GaussianSet one_gaussian(const Vec3& mean, const Vec3& log_scale, const float quat[4],
                         float opacity_logit, const Vec3& color, bool rg = false) {
    GaussianSet gs;
    gs.mean = Tensor::from({1, 3}, {mean.x(), mean.y(), mean.z()}, rg);
    gs.log_scale = Tensor::from({1, 3}, {log_scale.x(), log_scale.y(), log_scale.z()}, rg);
    gs.quat = Tensor::from({1, 4}, {quat[0], quat[1], quat[2], quat[3]}, rg);
    gs.opacity_logit = Tensor::from({1, 1}, {opacity_logit}, rg);
    gs.color = Tensor::from({1, 3}, {color.x(), color.y(), color.z()}, rg);
    return gs;
}

float logit(float p) { return std::log(p / (1.f - p)); }

}  // namespace

TEST_CASE("isotropic gaussian on the optical axis projects to the principal point") {
    Camera cam = axis_camera();
    splat::Projected p;
    float q[4] = {1, 0, 0, 0};
    REQUIRE(project_gaussian(cam, Vec3(0, 0, 2), Vec3(-2.f, -2.f, -2.f), q, p));
    CHECK(p.mx == doctest::Approx(cam.K(0, 2)).epsilon(1e-6));
    CHECK(p.my == doctest::Approx(cam.K(1, 2)).epsilon(1e-6));
    CHECK(p.ca == doctest::Approx(p.cc).epsilon(1e-5));
    CHECK(std::fabs(p.cb) < 1e-5f);
    CHECK(p.z == doctest::Approx(2.f));
}

TEST_CASE("doubling focal length doubles mean2d offsets from the principal point") {
    Camera c1 = axis_camera(64, 100.f), c2 = axis_camera(64, 200.f);
    splat::Projected p1, p2;
    float q[4] = {1, 0, 0, 0};
    Vec3 mu(0.3f, -0.2f, 2.5f);
    REQUIRE(project_gaussian(c1, mu, Vec3(-2.f, -2.f, -2.f), q, p1));
    REQUIRE(project_gaussian(c2, mu, Vec3(-2.f, -2.f, -2.f), q, p2));
    CHECK(p2.mx - c2.K(0, 2) == doctest::Approx(2 * (p1.mx - c1.K(0, 2))).epsilon(1e-5));
    CHECK(p2.my - c2.K(1, 2) == doctest::Approx(2 * (p1.my - c1.K(1, 2))).epsilon(1e-5));
}

TEST_CASE("projected covariance matches Monte-Carlo propagation") {
    Camera cam = axis_camera(64, 120.f);
    cam.R = Eigen::AngleAxisf(0.3f, Vec3(0.2f, 1.f, 0.1f).normalized()).toRotationMatrix();
    cam.t = Vec3(0.05f, -0.02f, 0.1f);

    Vec3 mu(0.1f, -0.05f, 2.0f);
    Vec3 ls(std::log(0.010f), std::log(0.016f), std::log(0.007f));
    float q[4] = {0.9f, 0.2f, -0.3f, 0.1f};
    splat::Projected p;
    REQUIRE(project_gaussian(cam, mu, ls, q, p));

    float qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    Mat3 R = splat::quat_to_mat_raw(q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
    Vec3 s(std::exp(ls.x()), std::exp(ls.y()), std::exp(ls.z()));
    Mat3 L = R * s.asDiagonal();  // x = mu + L n, n ~ N(0, I)

    Rng rng(77);
    const int kSamples = 1'000'000;
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (int i = 0; i < kSamples; ++i) {
        Vec3 n(rng.normal(), rng.normal(), rng.normal());
        auto pr = cam.project(mu + L * n);
        sx += pr.x;
        sy += pr.y;
        sxx += double(pr.x) * pr.x;
        sxy += double(pr.x) * pr.y;
        syy += double(pr.y) * pr.y;
    }
    double mx = sx / kSamples, my = sy / kSamples;
    double ca = sxx / kSamples - mx * mx;
    double cb = sxy / kSamples - mx * my;
    double cc = syy / kSamples - my * my;

    // remove the low-pass before comparing
    double ea = p.ca - splat::kLowPass, eb = p.cb, ec = p.cc - splat::kLowPass;
    double num = std::sqrt((ea - ca) * (ea - ca) + 2 * (eb - cb) * (eb - cb) + (ec - cc) * (ec - cc));
    double den = std::sqrt(ca * ca + 2 * cb * cb + cc * cc);
    CHECK(num / den < 0.02);
}

TEST_CASE("empty scene renders zero alpha and sentinel xy") {
    Camera cam = axis_camera(32);
    GaussianSet gs;
    gs.mean = Tensor::make({0, 3});
    gs.log_scale = Tensor::make({0, 3});
    gs.quat = Tensor::make({0, 4});
    gs.opacity_logit = Tensor::make({0, 1});
    gs.color = Tensor::make({0, 3});
    RenderOutput ro = render(cam, gs, RenderMode::xy);
    for (size_t i = 0; i < ro.alpha.numel(); ++i) CHECK(ro.alpha.at(i) == 0.f);
    for (size_t i = 0; i < ro.xy_map.numel(); ++i) CHECK(ro.xy_map.at(i) == -1.f);
    for (uint8_t c : ro.coverage) CHECK(c == 0);
}

TEST_CASE("single gaussian compositing matches the closed form") {
    // on-axis isotropic gaussian: cov2d = (f s / z)^2 I + 0.3 I, so
    // alpha(d) = o * exp(-0.5 |d|^2 / ((f s / z)^2 + 0.3))
    Camera cam = axis_camera(64, 100.f);
    float s = 0.04f, z = 2.f, o = 0.8f;
    float q[4] = {1, 0, 0, 0};
    GaussianSet gs = one_gaussian(Vec3(0, 0, z), Vec3::Constant(std::log(s)), q, logit(o),
                                  Vec3(1.f, 0.5f, 0.25f));
    RenderOutput ro = render(cam, gs, RenderMode::rgb);

    float var = (100.f * s / z) * (100.f * s / z) + splat::kLowPass;
    int c = 31;  // pixel sampling exactly the principal point (cx = 31.5)
    CHECK(ro.rgb.at((size_t(c) * 64 + c) * 3 + 0) == doctest::Approx(o * 1.f).epsilon(1e-5));
    CHECK(ro.rgb.at((size_t(c) * 64 + c) * 3 + 1) == doctest::Approx(o * 0.5f).epsilon(1e-5));

    // one sigma off center along x
    float sigma = std::sqrt(var);
    int px = int(std::floor(31.5f + sigma));
    float dx = (px + 0.5f) - 31.5f;
    float expect = o * std::exp(-0.5f * dx * dx / var);
    CHECK(ro.rgb.at((size_t(c) * 64 + px) * 3 + 0) == doctest::Approx(expect).epsilon(1e-5));
    CHECK(ro.alpha.at(size_t(c) * 64 + px) == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("fully opaque gaussian saturates at the 0.99 alpha clamp") {
    Camera cam = axis_camera(64);
    float q[4] = {1, 0, 0, 0};
    GaussianSet gs = one_gaussian(Vec3(0, 0, 2), Vec3::Constant(std::log(0.05f)), q, 12.f,
                                  Vec3(1.f, 1.f, 1.f));
    RenderOutput ro = render(cam, gs, RenderMode::rgb);
    CHECK(ro.rgb.at((size_t(31) * 64 + 31) * 3) == doctest::Approx(0.99f).epsilon(1e-6));
}

TEST_CASE("xy map at the pixel nearest the center equals mean2d") {
    Camera cam = axis_camera(64);
    float q[4] = {1, 0, 0, 0};
    Vec3 mu(0.123f, -0.071f, 2.1f);
    GaussianSet gs = one_gaussian(mu, Vec3::Constant(std::log(0.05f)), q, logit(0.9f),
                                  Vec3(1, 1, 1));
    RenderOutput ro = render(cam, gs, RenderMode::xy);
    auto pr = cam.project(mu);
    int px = int(std::floor(pr.x)), py = int(std::floor(pr.y));
    size_t at = size_t(py) * 64 + px;
    REQUIRE(ro.coverage[at] == 1);
    CHECK(std::fabs(ro.xy_map.at(at * 2 + 0) - pr.x) < 0.5f);
    CHECK(std::fabs(ro.xy_map.at(at * 2 + 1) - pr.y) < 0.5f);
}

TEST_CASE("translating the mean shifts its xy contribution by the same amount") {
    Camera cam = axis_camera(64);
    float q[4] = {1, 0, 0, 0};
    Vec3 mu(0, 0, 2);
    GaussianSet a = one_gaussian(mu, Vec3::Constant(std::log(0.06f)), q, logit(0.9f), Vec3(1, 1, 1));
    // 0.04 m at z=2, f=100 -> exactly 2 px
    Vec3 mu2 = mu + Vec3(0.04f, 0, 0);
    GaussianSet b = one_gaussian(mu2, Vec3::Constant(std::log(0.06f)), q, logit(0.9f), Vec3(1, 1, 1));
    RenderOutput ra = render(cam, a, RenderMode::xy);
    RenderOutput rb = render(cam, b, RenderMode::xy);
    size_t at = size_t(31) * 64 + 31;
    size_t bt = size_t(31) * 64 + 33;  // shifted sample point
    REQUIRE(ra.coverage[at] == 1);
    REQUIRE(rb.coverage[bt] == 1);
    CHECK(rb.xy_map.at(bt * 2 + 0) - ra.xy_map.at(at * 2 + 0) == doctest::Approx(2.f).epsilon(1e-4));
    CHECK(rb.xy_map.at(bt * 2 + 1) == doctest::Approx(ra.xy_map.at(at * 2 + 1)).epsilon(1e-4));
}

TEST_CASE("zero output gradient produces zero parameter gradients") {
    Camera cam = axis_camera(32);
    float q[4] = {1, 0, 0, 0};
    GaussianSet gs = one_gaussian(Vec3(0, 0, 2), Vec3::Constant(std::log(0.05f)), q, 0.5f,
                                  Vec3(0.7f, 0.2f, 0.4f), true);
    Tape tape;
    RenderOutput ro = render(cam, gs, RenderMode::rgb);
    Tensor flat = reshape(ro.rgb, {32 * 32, 3});
    Tensor loss = sum_all(mul(flat, Tensor::make({32 * 32, 3})));  // zero weights
    loss.backward();
    for (size_t i = 0; i < 3; ++i) CHECK(gs.mean.grad()[i] == 0.f);
    for (size_t i = 0; i < 4; ++i) CHECK(gs.quat.grad()[i] == 0.f);
    CHECK(gs.opacity_logit.grad()[0] == 0.f);
}

TEST_CASE("rgb loss gradients match finite differences across all parameters") {
    Camera cam = axis_camera(48, 90.f);
    cam.R = Eigen::AngleAxisf(0.15f, Vec3(0.1f, 1.f, 0.2f).normalized()).toRotationMatrix();
    cam.t = Vec3(0.02f, 0.01f, 0.05f);
    float q[4] = {0.9f, 0.15f, -0.2f, 0.1f};
    GaussianSet gs = one_gaussian(Vec3(0.05f, -0.03f, 2.f), Vec3(std::log(0.05f), std::log(0.07f), std::log(0.04f)),
                                  q, logit(0.7f), Vec3(0.8f, 0.3f, 0.5f), true);

    // smooth per-pixel probe weights; translation-sensitive, away from clamps
    Rng wr(3);
    Tensor wts = Tensor::randn({48 * 48, 3}, wr, 1.f);
    auto forward = [&]() {
        RenderOutput ro = render(cam, gs, RenderMode::rgb);
        return sum_all(mul(reshape(ro.rgb, {48 * 48, 3}), wts));
    };
    auto rep = fd_check({gs.mean, gs.log_scale, gs.quat, gs.opacity_logit, gs.color},
                        forward, 2e-4f, 2e-3f);
    CHECK(rep.ok(1e-2f));
}

TEST_CASE("xy-mode gradient w.r.t. the 3D mean matches finite differences") {
    Camera cam = axis_camera(48, 90.f);
    float q[4] = {1, 0, 0, 0};
    GaussianSet gs = one_gaussian(Vec3(0.02f, 0.01f, 2.f), Vec3::Constant(std::log(0.06f)), q,
                                  logit(0.8f), Vec3(1, 1, 1), true);
    auto pr = cam.project(Vec3(0.02f, 0.01f, 2.f));
    std::vector<std::array<float, 2>> pts{{pr.x - 0.5f, pr.y - 0.5f}};  // grid coords
    auto expr = [&]() {
        RenderOutput ro = render(cam, gs, RenderMode::xy);
        return grid_sample_bilinear(ro.xy_map, pts);
    };
    auto rep = fd_check_expr({gs.mean}, expr, 1234, 1e-3f, 2e-3f);
    CHECK(rep.ok(1e-2f));
}

TEST_CASE("alpha/depth gradients also flow and match finite differences") {
    Camera cam = axis_camera(32, 80.f);
    float q[4] = {0.95f, 0.1f, 0.1f, -0.2f};
    GaussianSet gs = one_gaussian(Vec3(0.01f, 0.02f, 1.8f), Vec3::Constant(std::log(0.05f)), q,
                                  logit(0.6f), Vec3(0.5f, 0.5f, 0.5f), true);
    Rng wr(9);
    Tensor wa = Tensor::randn({32 * 32, 1}, wr, 1.f);
    auto forward = [&]() {
        RenderOutput ro = render(cam, gs, RenderMode::rgb);
        return sum_all(mul(reshape(ro.alpha, {32 * 32, 1}), wa));
    };
    auto rep = fd_check({gs.mean, gs.log_scale, gs.opacity_logit}, forward, 2e-4f, 2e-3f);
    CHECK(rep.ok(1e-2f));
}

TEST_CASE("rendering is invariant to input permutation") {
    Camera cam = axis_camera(64);
    Rng rng(21);
    const int N = 40;
    std::vector<float> mean, ls, qv, ol, col;
    for (int i = 0; i < N; ++i) {
        mean.insert(mean.end(), {0.3f * rng.normal(), 0.3f * rng.normal(), 2.f + 0.4f * rng.normal()});
        ls.insert(ls.end(), {std::log(0.03f) + 0.3f * rng.normal(), std::log(0.03f) + 0.3f * rng.normal(),
                             std::log(0.03f) + 0.3f * rng.normal()});
        float q[4] = {1.f + rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        qv.insert(qv.end(), {q[0], q[1], q[2], q[3]});
        ol.push_back(rng.normal());
        col.insert(col.end(), {rng.uniform(), rng.uniform(), rng.uniform()});
    }
    auto build = [&](const std::vector<int>& order) {
        GaussianSet gs;
        std::vector<float> m2, l2, q2, o2, c2;
        for (int i : order) {
            m2.insert(m2.end(), mean.begin() + i * 3, mean.begin() + i * 3 + 3);
            l2.insert(l2.end(), ls.begin() + i * 3, ls.begin() + i * 3 + 3);
            q2.insert(q2.end(), qv.begin() + i * 4, qv.begin() + i * 4 + 4);
            o2.push_back(ol[size_t(i)]);
            c2.insert(c2.end(), col.begin() + i * 3, col.begin() + i * 3 + 3);
        }
        gs.mean = Tensor::from({N, 3}, m2);
        gs.log_scale = Tensor::from({N, 3}, l2);
        gs.quat = Tensor::from({N, 4}, q2);
        gs.opacity_logit = Tensor::from({N, 1}, o2);
        gs.color = Tensor::from({N, 3}, c2);
        return gs;
    };
    std::vector<int> fwd(N), rev(N);
    std::iota(fwd.begin(), fwd.end(), 0);
    std::reverse_copy(fwd.begin(), fwd.end(), rev.begin());
    RenderOutput ra = render(cam, build(fwd), RenderMode::rgb);
    RenderOutput rb = render(cam, build(rev), RenderMode::rgb);
    CHECK(std::memcmp(ra.rgb.data(), rb.rgb.data(), ra.rgb.numel() * sizeof(float)) == 0);
    CHECK(std::memcmp(ra.alpha.data(), rb.alpha.data(), ra.alpha.numel() * sizeof(float)) == 0);
}

TEST_CASE("forward and backward are bit-reproducible") {
    Camera cam = axis_camera(64);
    auto run = [&](std::vector<float>& grad_out) {
        Rng rng(5);
        const int N = 25;
        GaussianSet gs;
        gs.mean = Tensor::randn({N, 3}, rng, 0.2f, true);
        for (int i = 0; i < N; ++i) gs.mean.data()[i * 3 + 2] += 2.f;
        gs.log_scale = Tensor::full({N, 3}, std::log(0.04f), true);
        gs.quat = Tensor::randn({N, 4}, rng, 1.f, true);
        gs.opacity_logit = Tensor::randn({N, 1}, rng, 1.f, true);
        gs.color = Tensor::full({N, 3}, 0.5f, true);
        Tape tape;
        RenderOutput ro = render(cam, gs, RenderMode::rgb);
        Rng wr(8);
        Tensor w = Tensor::randn({64 * 64, 3}, wr, 1.f);
        Tensor loss = sum_all(mul(reshape(ro.rgb, {64 * 64, 3}), w));
        loss.backward();
        grad_out.assign(gs.mean.grad(), gs.mean.grad() + N * 3);
        std::vector<float> rgb(ro.rgb.data(), ro.rgb.data() + ro.rgb.numel());
        return rgb;
    };
    std::vector<float> g1, g2;
    auto v1 = run(g1);
    auto v2 = run(g2);
    CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("alpha is monotone in a single gaussian's opacity") {
    Camera cam = axis_camera(32);
    float q[4] = {1, 0, 0, 0};
    float prev = -1.f;
    for (float lg : {-2.f, -1.f, 0.f, 1.f, 2.f, 4.f}) {
        GaussianSet gs = one_gaussian(Vec3(0, 0, 2), Vec3::Constant(std::log(0.05f)), q, lg,
                                      Vec3(1, 1, 1));
        RenderOutput ro = render(cam, gs, RenderMode::rgb);
        float total = 0;
        for (size_t i = 0; i < ro.alpha.numel(); ++i) total += ro.alpha.at(i);
        CHECK(total >= prev);
        prev = total;
    }
}

TEST_CASE("non-finite gaussian parameters are rejected with the index") {
    Camera cam = axis_camera(32);
    float q[4] = {1, 0, 0, 0};
    GaussianSet gs;
    gs.mean = Tensor::from({2, 3}, {0, 0, 2, 0, std::numeric_limits<float>::quiet_NaN(), 2});
    gs.log_scale = Tensor::full({2, 3}, std::log(0.05f));
    gs.quat = Tensor::from({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0});
    gs.opacity_logit = Tensor::make({2, 1});
    gs.color = Tensor::full({2, 3}, 0.5f);
    CHECK_THROWS_WITH_AS(render(cam, gs, RenderMode::rgb),
                         doctest::Contains("gaussian 1"), std::runtime_error);
}

TEST_CASE("png round trip preserves 8-bit image content") {
    Rng rng(4);
    Image img(21, 17, 3);
    for (auto& v : img.data) v = rng.uniform();
    auto bytes = encode_png(img);
    Image back = decode_png(bytes);
    REQUIRE(back.h == img.h);
    REQUIRE(back.w == img.w);
    REQUIRE(back.channels == 3);
    for (size_t i = 0; i < img.numel(); ++i)
        CHECK(std::fabs(back.data[i] - img.data[i]) <= 0.5f / 255.f + 1e-6f);
}

TEST_CASE("raw f32 dump round trips exactly") {
    Rng rng(6);
    Image img(9, 7, 2);
    for (auto& v : img.data) v = rng.normal();
    save_raw("/tmp/dyav_raw_test.bin", img);
    Image back = load_raw("/tmp/dyav_raw_test.bin");
    REQUIRE(back.h == 9);
    REQUIRE(back.channels == 2);
    CHECK(std::memcmp(back.data.data(), img.data.data(), img.numel() * sizeof(float)) == 0);
}
