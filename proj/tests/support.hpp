#pragma once

// Shared helpers for the test suites: randomized render scenes with
// finite-difference-friendly layouts, and a brute-force gradient oracle.

#include <cmath>
#include <utility>
#include <vector>

#include "conceptsplat/camera.hpp"
#include "conceptsplat/common.hpp"
#include "conceptsplat/gaussians.hpp"
#include "conceptsplat/guidance.hpp"
#include "conceptsplat/image.hpp"
#include "conceptsplat/renderer.hpp"

namespace testsupport {

using namespace csplat;

struct RenderScene {
    GaussianCloud cloud;
    Camera cam;
    Vec3 bg{0, 0, 0};
};

// Random cloud + orbit camera. Gaussians stay near the view axis (no cull
// boundaries in reach) with pairwise depth gaps large enough that central
// differences at h=1e-4 never reorder the compositing, and opacities low
// enough that the alpha clip never engages.
inline RenderScene make_render_scene(std::uint64_t seed, int n_gaussians, int k,
                                     int resolution = 32)
{
    Rng rng = Rng::stream(seed, 0x5ce9e5u);
    RenderScene scene;
    scene.cam = orbit_camera(Vec3(0, 0, 0), deg2rad(rng.uniform(-180.0, 180.0)),
                             deg2rad(rng.uniform(-10.0, 45.0)), 2.2, resolution, resolution);
    scene.bg = Vec3(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));

    const Mat3 rot_cam = scene.cam.rotation();
    std::vector<double> depths;
    scene.cloud.k = k;
    for (int i = 0; i < n_gaussians; ++i) {
        Gaussian3D g;
        for (int attempt = 0; attempt < 2000; ++attempt) {
            g.mu = Vec3(rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35),
                        rng.uniform(-0.35, 0.35));
            const double depth = (rot_cam * (g.mu - scene.cam.position)).z();
            bool clear = true;
            for (double d : depths)
                if (std::abs(d - depth) < 2e-2) clear = false;
            if (clear) {
                depths.push_back(depth);
                break;
            }
        }
        for (int a = 0; a < 3; ++a)
            g.log_scale[a] = std::log(rng.uniform(0.03, 0.12));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q / q.norm();
        g.opacity_logit = rng.uniform(-2.0, 2.0);
        g.color = Vec3(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95));
        g.label = rng.uniform_int(0, k - 1);
        scene.cloud.gaussians.push_back(g);
    }
    return scene;
}

inline Image random_grad_image(std::uint64_t seed, int h, int w)
{
    Rng rng = Rng::stream(seed, 0x97adu);
    Image img(h, w, 3);
    for (double& x : img.v) x = rng.uniform(-1.0, 1.0);
    return img;
}

inline double render_objective(const GaussianCloud& cloud, const Camera& cam, const Vec3& bg,
                               const Image& grad_img)
{
    const RenderOutput out = render(cloud, cam, bg);
    double total = 0.0;
    for (size_t i = 0; i < out.color.v.size(); ++i) total += grad_img.v[i] * out.color.v[i];
    return total;
}

// Central-difference gradient of the render objective over every continuous
// Gaussian parameter. Independent of the analytic backward pass.
inline CloudGradients finite_difference_gradients(const GaussianCloud& cloud, const Camera& cam,
                                                  const Vec3& bg, const Image& grad_img,
                                                  double h = 1e-4)
{
    CloudGradients grads(cloud.size());
    GaussianCloud work = cloud;
    auto probe = [&](double* slot, double* out) {
        const double saved = *slot;
        *slot = saved + h;
        const double hi = render_objective(work, cam, bg, grad_img);
        *slot = saved - h;
        const double lo = render_objective(work, cam, bg, grad_img);
        *slot = saved;
        *out = (hi - lo) / (2.0 * h);
    };
    for (size_t i = 0; i < cloud.size(); ++i) {
        Gaussian3D& g = work.gaussians[i];
        for (int a = 0; a < 3; ++a) probe(&g.mu[a], &grads.mu[i][a]);
        for (int a = 0; a < 3; ++a) probe(&g.log_scale[a], &grads.log_scale[i][a]);
        for (int a = 0; a < 4; ++a) probe(&g.rotation[a], &grads.rotation[i][a]);
        probe(&g.opacity_logit, &grads.opacity_logit[i]);
        for (int a = 0; a < 3; ++a) probe(&g.color[a], &grads.color[i][a]);
    }
    return grads;
}

struct GradientComparison {
    double worst_rel = 0.0;   // over components with max(|fd|,|an|) > floor
    size_t compared = 0;
};

inline void compare_component(double an, double fd, double floor, GradientComparison* cmp)
{
    const double mag = std::max(std::abs(an), std::abs(fd));
    if (mag <= floor) return;
    cmp->compared += 1;
    cmp->worst_rel = std::max(cmp->worst_rel, std::abs(an - fd) / mag);
}

inline GradientComparison compare_gradients(const CloudGradients& an, const CloudGradients& fd,
                                            double floor = 1e-6)
{
    GradientComparison cmp;
    for (size_t i = 0; i < an.mu.size(); ++i) {
        for (int a = 0; a < 3; ++a) compare_component(an.mu[i][a], fd.mu[i][a], floor, &cmp);
        for (int a = 0; a < 3; ++a)
            compare_component(an.log_scale[i][a], fd.log_scale[i][a], floor, &cmp);
        for (int a = 0; a < 4; ++a)
            compare_component(an.rotation[i][a], fd.rotation[i][a], floor, &cmp);
        compare_component(an.opacity_logit[i], fd.opacity_logit[i], floor, &cmp);
        for (int a = 0; a < 3; ++a) compare_component(an.color[i][a], fd.color[i][a], floor, &cmp);
    }
    return cmp;
}

// Deterministic DDIM denoise step t -> s with a supplied noise estimate:
// reconstruct the clean latent, then re-noise at level s. Written out from
// the sampler algebra, independent of the library's inversion code.
inline Image ddim_denoise_step(const Image& x_t, int t, int s, const Image& eps,
                               const NoiseSchedule& sched)
{
    const double abar_t = sched.at(t);
    const double abar_s = sched.at(s);
    Image x_s(x_t.h, x_t.w, x_t.c);
    for (size_t i = 0; i < x_t.v.size(); ++i) {
        const double x0_hat = (x_t.v[i] - std::sqrt(1.0 - abar_t) * eps.v[i]) / std::sqrt(abar_t);
        x_s.v[i] = std::sqrt(abar_s) * x0_hat + std::sqrt(1.0 - abar_s) * eps.v[i];
    }
    return x_s;
}

// Full deterministic sampler from (x_t, t) down the stride grid to 0, with the
// model re-evaluated at every visited state (the honest reverse process).
inline Image ddim_denoise_chain(Image x, int t, int stride, const NoisePredictor& pred,
                                const NoiseSchedule& sched, const GuidanceBackbone& backbone,
                                const MaskStack& pixel_masks)
{
    for (int cur = t; cur > 0; cur -= stride) {
        const Image eps =
            predict_noise(pred, sched, x, cur, backbone, pixel_masks, PromptMode::null_prompt);
        x = ddim_denoise_step(x, cur, cur - stride, eps, sched);
    }
    return x;
}

} // namespace testsupport
