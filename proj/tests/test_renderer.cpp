#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "conceptsplat/camera.hpp"
#include "conceptsplat/gaussians.hpp"
#include "conceptsplat/renderer.hpp"
#include "support.hpp"

using namespace csplat;
using testsupport::compare_gradients;
using testsupport::finite_difference_gradients;
using testsupport::make_render_scene;
using testsupport::random_grad_image;
using testsupport::render_objective;

namespace {

// Camera on the +x axis looking at the origin, z-up.
Camera axis_camera(int resolution = 32)
{
    return orbit_camera(Vec3(0, 0, 0), 0.0, 0.0, 2.0, resolution, resolution);
}

// Gaussian whose center projects exactly onto screen point (px, py) at the
// given camera-space depth.
Gaussian3D screen_gaussian(const Camera& cam, double px, double py, double depth,
                           double scale, const Vec3& color, int label, double opacity_logit)
{
    const double f = cam.focal();
    const Vec3 t_cam((px - cam.cx()) * depth / f, (py - cam.cy()) * depth / f, depth);
    Gaussian3D g;
    g.mu = cam.position + cam.rotation().transpose() * t_cam;
    g.log_scale = Vec3::Constant(std::log(scale));
    g.color = color;
    g.label = label;
    g.opacity_logit = opacity_logit;
    return g;
}

} // namespace

TEST_CASE("projection culls Gaussians behind the near plane")
{
    const Camera cam = axis_camera();
    Gaussian3D g;
    g.mu = Vec3(4.0, 0.0, 0.0); // behind a camera at (2,0,0) facing -x
    CHECK_FALSE(project_gaussian(g, cam).has_value());

    g.mu = Vec3(2.0 - cam.z_near * 0.5, 0.0, 0.0); // in front but inside near plane
    CHECK_FALSE(project_gaussian(g, cam).has_value());
}

TEST_CASE("projection culls splats entirely outside the image")
{
    const Camera cam = axis_camera();
    Gaussian3D g;
    g.mu = Vec3(0.0, 50.0, 0.0); // far off to the side, still in front
    g.log_scale = Vec3::Constant(std::log(0.05));
    CHECK_FALSE(project_gaussian(g, cam).has_value());

    g.mu = Vec3(0.0, 0.1, 0.0);
    CHECK(project_gaussian(g, cam).has_value());
}

TEST_CASE("Gaussian at the look-at point projects to the image center")
{
    const Camera cam = axis_camera();
    Gaussian3D g;
    g.mu = Vec3::Zero();
    const auto s = project_gaussian(g, cam);
    REQUIRE(s.has_value());
    CHECK(s->mean2d.x() == Catch::Approx(16.0).margin(1e-9));
    CHECK(s->mean2d.y() == Catch::Approx(16.0).margin(1e-9));
    CHECK(s->depth == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("screen covariance matches a numerical projection Jacobian")
{
    const Camera cam = orbit_camera(Vec3(0, 0, 0), deg2rad(35.0), deg2rad(20.0), 2.2, 32, 32);
    Rng rng(404);
    for (int trial = 0; trial < 10; ++trial) {
        Gaussian3D g;
        g.mu = Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
        for (int a = 0; a < 3; ++a) g.log_scale[a] = std::log(rng.uniform(0.03, 0.15));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q / q.norm();

        // numerical Jacobian of world point -> pixel through the real camera
        const double h = 1e-6;
        Eigen::Matrix<double, 2, 3> j_num;
        for (int a = 0; a < 3; ++a) {
            Vec3 hi = g.mu, lo = g.mu;
            hi[a] += h;
            lo[a] -= h;
            const Vec2 p_hi = cam.project(cam.to_camera(hi));
            const Vec2 p_lo = cam.project(cam.to_camera(lo));
            j_num.col(a) = (p_hi - p_lo) / (2.0 * h);
        }
        // j_num differentiates w.r.t. world coordinates, so it pairs with the
        // world covariance directly
        Mat2 expected = j_num * covariance(g) * j_num.transpose();
        expected(0, 0) += 0.3;
        expected(1, 1) += 0.3;

        const auto s = project_gaussian(g, cam);
        REQUIRE(s.has_value());
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c)
                CHECK(s->cov2d(r, c) == Catch::Approx(expected(r, c)).margin(1e-5));
    }
}

TEST_CASE("isotropic Gaussian on the view axis projects to an isotropic splat")
{
    const Camera cam = axis_camera();
    Gaussian3D g;
    g.mu = Vec3::Zero();
    g.log_scale = Vec3::Constant(std::log(0.1));
    const auto s = project_gaussian(g, cam);
    REQUIRE(s.has_value());
    CHECK(s->cov2d(0, 0) == Catch::Approx(s->cov2d(1, 1)).epsilon(0.01));
    CHECK(std::abs(s->cov2d(0, 1)) < 0.01 * s->cov2d(0, 0));
}

TEST_CASE("point-like Gaussian hits the screen-space covariance floor")
{
    const Camera cam = axis_camera();
    Gaussian3D g;
    g.mu = Vec3::Zero();
    g.log_scale = Vec3::Constant(std::log(1e-6));
    const auto s = project_gaussian(g, cam);
    REQUIRE(s.has_value());
    CHECK(s->cov2d(0, 0) == Catch::Approx(0.3).margin(1e-6));
    CHECK(s->cov2d(1, 1) == Catch::Approx(0.3).margin(1e-6));
    CHECK(std::abs(s->cov2d(0, 1)) < 1e-9);
}

TEST_CASE("single near-opaque splat composites to the clipped alpha")
{
    const Camera cam = axis_camera();
    GaussianCloud cloud;
    cloud.k = 2;
    cloud.gaussians.push_back(
        screen_gaussian(cam, 16.5, 16.5, 2.0, 0.3, Vec3(1, 0, 0), 0, 20.0));
    const Vec3 bg(0.2, 0.3, 0.4);
    const RenderOutput out = render(cloud, cam, bg);

    CHECK(out.concept_map.at(0, 16, 16) == Catch::Approx(0.99).margin(1e-12));
    CHECK(out.concept_map.at(1, 16, 16) == Catch::Approx(0.0).margin(1e-12));
    CHECK(out.alpha.at(16, 16, 0) == Catch::Approx(0.99).margin(1e-12));
    const double t = 1.0 - 0.99;
    CHECK(out.color.at(16, 16, 0) == Catch::Approx(0.99 * 1.0 + t * bg.x()).margin(1e-12));
    CHECK(out.color.at(16, 16, 1) == Catch::Approx(t * bg.y()).margin(1e-12));
    CHECK(out.color.at(16, 16, 2) == Catch::Approx(t * bg.z()).margin(1e-12));
}

TEST_CASE("two stacked half-opacity splats composite front to back")
{
    const Camera cam = axis_camera();
    GaussianCloud cloud;
    cloud.k = 2;
    // logit 0 => opacity exactly 1/2; both centers hit pixel (16,16) dead on
    cloud.gaussians.push_back(screen_gaussian(cam, 16.5, 16.5, 2.0, 0.25, Vec3(1, 0, 0), 0, 0.0));
    cloud.gaussians.push_back(screen_gaussian(cam, 16.5, 16.5, 2.5, 0.25, Vec3(0, 0, 1), 1, 0.0));
    const Vec3 bg(0.2, 0.3, 0.4);
    const RenderOutput out = render(cloud, cam, bg);

    CHECK(out.concept_map.at(0, 16, 16) == Catch::Approx(0.5).margin(1e-12));
    CHECK(out.concept_map.at(1, 16, 16) == Catch::Approx(0.25).margin(1e-12));
    CHECK(out.alpha.at(16, 16, 0) == Catch::Approx(0.75).margin(1e-12));
    CHECK(out.color.at(16, 16, 0) == Catch::Approx(0.5 + 0.25 * bg.x()).margin(1e-12));
    CHECK(out.color.at(16, 16, 1) == Catch::Approx(0.25 * bg.y()).margin(1e-12));
    CHECK(out.color.at(16, 16, 2) == Catch::Approx(0.25 + 0.25 * bg.z()).margin(1e-12));

    SECTION("far-to-near input order gives the identical image")
    {
        GaussianCloud swapped = cloud;
        std::swap(swapped.gaussians[0], swapped.gaussians[1]);
        const RenderOutput out2 = render(swapped, cam, bg);
        CHECK(out2.color.v == out.color.v);
        CHECK(out2.concept_map.v == out.concept_map.v);
    }
}

TEST_CASE("empty cloud renders the background")
{
    const Camera cam = axis_camera();
    GaussianCloud cloud;
    cloud.k = 1;
    const Vec3 bg(0.1, 0.5, 0.9);
    const RenderOutput out = render(cloud, cam, bg);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            CHECK(out.color.at(y, x, 0) == bg.x());
            CHECK(out.alpha.at(y, x, 0) == 0.0);
            CHECK(out.concept_map.at(0, y, x) == 0.0);
        }
}

TEST_CASE("concept channels conserve accumulated alpha")
{
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        const auto scene = make_render_scene(seed, 12, 3);
        const RenderOutput out = render(scene.cloud, scene.cam, scene.bg);
        double worst = 0.0;
        for (int y = 0; y < out.alpha.h; ++y)
            for (int x = 0; x < out.alpha.w; ++x) {
                double sum = 0.0;
                for (int i = 0; i < out.concept_map.k; ++i) sum += out.concept_map.at(i, y, x);
                worst = std::max(worst, std::abs(sum - out.alpha.at(y, x, 0)));
            }
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("rendered color and alpha stay bounded")
{
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        const auto scene = make_render_scene(seed, 15, 2);
        const RenderOutput out = render(scene.cloud, scene.cam, scene.bg);
        REQUIRE(out.color.all_finite());
        for (double v : out.color.v) {
            CHECK(v >= -1e-12);
            CHECK(v <= 1.0 + 1e-12);
        }
        for (double v : out.alpha.v) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (double v : out.concept_map.v) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("compositing is invariant to the input order of Gaussians")
{
    const auto scene = make_render_scene(42, 14, 2);
    const RenderOutput ref = render(scene.cloud, scene.cam, scene.bg);

    GaussianCloud shuffled = scene.cloud;
    Rng rng(99);
    for (size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled.gaussians[i - 1],
                  shuffled.gaussians[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    const RenderOutput out = render(shuffled, scene.cam, scene.bg);
    CHECK(out.color.v == ref.color.v);
    CHECK(out.concept_map.v == ref.concept_map.v);
    CHECK(out.alpha.v == ref.alpha.v);
}

TEST_CASE("uniform labels collapse the concept map onto the alpha channel")
{
    auto scene = make_render_scene(7, 10, 3);
    for (auto& g : scene.cloud.gaussians) g.label = 0;
    const RenderOutput out = render(scene.cloud, scene.cam, scene.bg);
    for (int y = 0; y < out.alpha.h; ++y)
        for (int x = 0; x < out.alpha.w; ++x) {
            CHECK(out.concept_map.at(0, y, x) ==
                  Catch::Approx(out.alpha.at(y, x, 0)).margin(1e-12));
            CHECK(out.concept_map.at(1, y, x) == 0.0);
            CHECK(out.concept_map.at(2, y, x) == 0.0);
        }
}

TEST_CASE("rendering twice is bitwise deterministic")
{
    const auto scene = make_render_scene(5150, 18, 4);
    const RenderOutput a = render(scene.cloud, scene.cam, scene.bg);
    const RenderOutput b = render(scene.cloud, scene.cam, scene.bg);
    CHECK(a.color.v == b.color.v);
    CHECK(a.concept_map.v == b.concept_map.v);
    CHECK(a.alpha.v == b.alpha.v);
}

TEST_CASE("threshold masks use a strict comparison and complement background")
{
    ChannelStack m(2, 1, 2);
    m.at(0, 0, 0) = 0.6;
    m.at(1, 0, 0) = 0.3;
    m.at(0, 0, 1) = 0.5; // exactly tau: excluded
    m.at(1, 0, 1) = 0.2;
    const MaskStack masks = threshold_masks(m, 0.5);
    CHECK(masks.at(0, 0, 0) == 1);
    CHECK(masks.at(1, 0, 0) == 0);
    CHECK(masks.at(0, 0, 1) == 0);
    CHECK(masks.at(1, 0, 1) == 0);
    CHECK(masks.bg_at(0, 0) == 0);
    CHECK(masks.bg_at(0, 1) == 1);
}

TEST_CASE("thresholded concept masks are pairwise disjoint at tau one-half")
{
    for (std::uint64_t seed = 300; seed < 310; ++seed) {
        const auto scene = make_render_scene(seed, 16, 3);
        const RenderOutput out = render(scene.cloud, scene.cam, scene.bg);
        const MaskStack masks = threshold_masks(out.concept_map, 0.5);
        for (int y = 0; y < masks.h; ++y)
            for (int x = 0; x < masks.w; ++x) {
                int active = 0;
                for (int i = 0; i < masks.k; ++i) active += masks.at(i, y, x);
                CHECK(active <= 1);
                CHECK(masks.bg_at(y, x) == (active == 0 ? 1 : 0));
            }
    }
}

// ---------------------------------------------------------------------------
// backward pass against the central-difference oracle in support.hpp
// ---------------------------------------------------------------------------

TEST_CASE("zero objective image produces zero gradients")
{
    const auto scene = make_render_scene(11, 6, 2);
    ForwardContext ctx;
    render(scene.cloud, scene.cam, scene.bg, &ctx);
    const Image zero(scene.cam.height, scene.cam.width, 3);
    const CloudGradients grads = render_backward(scene.cloud, ctx, zero);
    for (size_t i = 0; i < grads.mu.size(); ++i) {
        CHECK(grads.mu[i].isZero());
        CHECK(grads.log_scale[i].isZero());
        CHECK(grads.rotation[i].isZero());
        CHECK(grads.opacity_logit[i] == 0.0);
        CHECK(grads.color[i].isZero());
    }
}

TEST_CASE("opacity gradient of a single splat matches finite differences")
{
    const auto scene = make_render_scene(21, 1, 1);
    const Image grad_img = random_grad_image(77, scene.cam.height, scene.cam.width);

    ForwardContext ctx;
    render(scene.cloud, scene.cam, scene.bg, &ctx);
    const CloudGradients an = render_backward(scene.cloud, ctx, grad_img);
    const CloudGradients fd =
        finite_difference_gradients(scene.cloud, scene.cam, scene.bg, grad_img);

    const double mag = std::max(std::abs(an.opacity_logit[0]), std::abs(fd.opacity_logit[0]));
    REQUIRE(mag > 1e-6);
    CHECK(std::abs(an.opacity_logit[0] - fd.opacity_logit[0]) / mag < 1e-3);
}

TEST_CASE("all parameter gradients match finite differences on a full scene")
{
    const auto scene = make_render_scene(31, 20, 2);
    const Image grad_img = random_grad_image(78, scene.cam.height, scene.cam.width);

    ForwardContext ctx;
    render(scene.cloud, scene.cam, scene.bg, &ctx);
    const CloudGradients an = render_backward(scene.cloud, ctx, grad_img);
    const CloudGradients fd =
        finite_difference_gradients(scene.cloud, scene.cam, scene.bg, grad_img);

    const auto cmp = compare_gradients(an, fd);
    INFO("compared " << cmp.compared << " components, worst rel err " << cmp.worst_rel);
    REQUIRE(cmp.compared > 100);
    CHECK(cmp.worst_rel < 1e-2);
}

TEST_CASE("gradient check holds across several random scenes")
{
    for (std::uint64_t seed : {101ull, 202ull, 303ull}) {
        const auto scene = make_render_scene(seed, 8, 3);
        const Image grad_img = random_grad_image(seed ^ 0xabcd, scene.cam.height, scene.cam.width);
        ForwardContext ctx;
        render(scene.cloud, scene.cam, scene.bg, &ctx);
        const auto cmp = compare_gradients(
            render_backward(scene.cloud, ctx, grad_img),
            finite_difference_gradients(scene.cloud, scene.cam, scene.bg, grad_img));
        INFO("seed " << seed << ": worst rel err " << cmp.worst_rel);
        CHECK(cmp.worst_rel < 1e-2);
    }
}

TEST_CASE("backward pass is deterministic")
{
    const auto scene = make_render_scene(404, 12, 2);
    const Image grad_img = random_grad_image(90, scene.cam.height, scene.cam.width);
    ForwardContext ctx;
    render(scene.cloud, scene.cam, scene.bg, &ctx);
    const CloudGradients a = render_backward(scene.cloud, ctx, grad_img);
    const CloudGradients b = render_backward(scene.cloud, ctx, grad_img);
    for (size_t i = 0; i < a.mu.size(); ++i) {
        CHECK(a.mu[i] == b.mu[i]);
        CHECK(a.log_scale[i] == b.log_scale[i]);
        CHECK(a.rotation[i] == b.rotation[i]);
        CHECK(a.opacity_logit[i] == b.opacity_logit[i]);
        CHECK(a.color[i] == b.color[i]);
    }
}

TEST_CASE("backward pass rejects a stale or missing forward context")
{
    const auto scene = make_render_scene(55, 5, 2);
    const Image grad_img = random_grad_image(91, scene.cam.height, scene.cam.width);

    ForwardContext never_rendered;
    CHECK_THROWS_AS(render_backward(scene.cloud, never_rendered, grad_img), ValidationError);

    ForwardContext ctx;
    render(scene.cloud, scene.cam, scene.bg, &ctx);
    GaussianCloud grown = scene.cloud;
    grown.gaussians.push_back(grown.gaussians.front());
    CHECK_THROWS_AS(render_backward(grown, ctx, grad_img), ValidationError);

    const Image bad_shape(scene.cam.height / 2, scene.cam.width, 3);
    CHECK_THROWS_AS(render_backward(scene.cloud, ctx, bad_shape), ValidationError);
}
