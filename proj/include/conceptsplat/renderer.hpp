#pragma once

// Differentiable tile-based splatting. Forward: EWA projection of each
// Gaussian to a 2D splat, global front-to-back depth sort, per-pixel alpha
// compositing of color and of the per-concept contribution map M (same
// series, one-hot labels, no background term). Backward: exact analytic
// gradients of sum_pixels <grad_color, C> w.r.t. all continuous parameters,
// replaying the forward compositing decisions recorded in a ForwardContext.
//
// Contributions below exp(-q_cut/2) = 1e-14/sigma are skipped; the skip
// threshold is far beneath finite-difference resolution, so the truncation
// never shows up in gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "conceptsplat/camera.hpp"
#include "conceptsplat/common.hpp"
#include "conceptsplat/gaussians.hpp"
#include "conceptsplat/image.hpp"

namespace csplat {

inline constexpr int kTileSize = 16;
inline constexpr double kAlphaClip = 0.99;
inline constexpr double kTransmittanceFloor = 1e-14;
inline constexpr double kContributionFloor = 1e-14;

struct Splat2D {
    Vec2 mean2d{0, 0};
    Mat2 cov2d = Mat2::Identity(); // regularized (+0.3 I)
    Mat2 cov_inv = Mat2::Identity();
    double depth = 0;   // camera-space z
    double sigma = 0;   // opacity in (0,1)
    Vec3 color{0, 0, 0};
    int label = 0;
    double q_cut = 0;   // Mahalanobis cutoff for negligible contributions
    double radius = 0;  // pixel radius containing every non-negligible pixel
    Vec3 t_cam{0, 0, 1};
    int gaussian_index = 0;
};

// EWA projection with the local affine Jacobian of the pinhole map. Culled
// when behind the near plane, effectively transparent, or when the 3-sigma
// screen disc lies entirely outside the image.
inline std::optional<Splat2D> project_gaussian(const Gaussian3D& g, const Camera& cam,
                                               int index = 0)
{
    const Mat3 R = cam.rotation();
    const Vec3 t = R * (g.mu - cam.position);
    const double z = t.z();
    if (z < cam.z_near) return std::nullopt;

    const double sigma = logistic(g.opacity_logit);
    if (sigma <= kContributionFloor) return std::nullopt;

    const double f = cam.focal();
    Eigen::Matrix<double, 2, 3> J;
    J << f / z, 0.0, -f * t.x() / (z * z),
        0.0, f / z, -f * t.y() / (z * z);
    const Mat3 sigma_cam = R * covariance(g) * R.transpose();
    Mat2 cov2d = J * sigma_cam * J.transpose();
    cov2d(0, 0) += 0.3;
    cov2d(1, 1) += 0.3;

    Splat2D s;
    s.mean2d = Vec2(f * t.x() / z + cam.cx(), f * t.y() / z + cam.cy());
    s.cov2d = cov2d;
    const double det = cov2d(0, 0) * cov2d(1, 1) - cov2d(0, 1) * cov2d(1, 0);
    s.cov_inv << cov2d(1, 1) / det, -cov2d(0, 1) / det, -cov2d(1, 0) / det, cov2d(0, 0) / det;
    s.depth = z;
    s.sigma = sigma;
    s.color = g.color;
    s.label = g.label;
    s.q_cut = 2.0 * std::log(sigma / kContributionFloor);
    const double mid = 0.5 * (cov2d(0, 0) + cov2d(1, 1));
    const double disc = std::sqrt(std::max(0.0, mid * mid - det));
    const double lam_max = mid + disc;
    s.radius = std::sqrt(std::max(0.0, s.q_cut * lam_max));
    s.t_cam = t;
    s.gaussian_index = index;

    const double r3 = 3.0 * std::sqrt(lam_max);
    if (s.mean2d.x() + r3 < 0.0 || s.mean2d.x() - r3 > cam.width || s.mean2d.y() + r3 < 0.0 ||
        s.mean2d.y() - r3 > cam.height)
        return std::nullopt;
    return s;
}

struct RenderOutput {
    Image color;          // h x w x 3, in [0,1] for bg in [0,1]
    ChannelStack concept_map; // k x h x w contribution map
    Image alpha;          // h x w x 1 accumulated opacity
};

// Thresholded binary concept masks plus the background complement.
inline MaskStack threshold_masks(const ChannelStack& m, double tau)
{
    MaskStack masks(m.k, m.h, m.w);
    for (int i = 0; i < m.k; ++i)
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x)
                masks.at(i, y, x) = m.at(i, y, x) > tau ? 1 : 0;
    masks.recompute_background();
    return masks;
}

struct PixelEntry {
    std::int32_t splat;
    double alpha;
};

// Everything the backward pass needs to replay compositing bit-for-bit.
struct ForwardContext {
    Camera cam;
    Vec3 bg{0, 0, 0};
    size_t n_gaussians = 0;
    std::vector<Splat2D> splats; // depth-sorted
    std::vector<std::int32_t> pixel_start;
    std::vector<std::int32_t> pixel_count;
    std::vector<PixelEntry> entries;
};

namespace detail {

inline bool lex_less(const Vec3& a, const Vec3& b)
{
    for (int i = 0; i < 3; ++i)
        if (a[i] != b[i]) return a[i] < b[i];
    return false;
}

// Total order: depth first, then every remaining field, so that equal-rank
// splats are fully identical and compositing commutes. Makes the output
// independent of input order.
inline bool splat_order(const GaussianCloud& cloud, const Splat2D& a, const Splat2D& b)
{
    if (a.depth != b.depth) return a.depth < b.depth;
    const Gaussian3D& ga = cloud.gaussians[static_cast<size_t>(a.gaussian_index)];
    const Gaussian3D& gb = cloud.gaussians[static_cast<size_t>(b.gaussian_index)];
    if (ga.mu != gb.mu) return lex_less(ga.mu, gb.mu);
    if (ga.log_scale != gb.log_scale) return lex_less(ga.log_scale, gb.log_scale);
    for (int i = 0; i < 4; ++i)
        if (ga.rotation[i] != gb.rotation[i]) return ga.rotation[i] < gb.rotation[i];
    if (ga.opacity_logit != gb.opacity_logit) return ga.opacity_logit < gb.opacity_logit;
    if (ga.color != gb.color) return lex_less(ga.color, gb.color);
    return ga.label < gb.label;
}

} // namespace detail

inline RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const Vec3& bg,
                           ForwardContext* ctx = nullptr)
{
    cam.validate();
    const int h = cam.height, w = cam.width, k = cloud.k;

    std::vector<Splat2D> splats;
    splats.reserve(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i)
        if (auto s = project_gaussian(cloud.gaussians[i], cam, static_cast<int>(i)))
            splats.push_back(*s);
    std::sort(splats.begin(), splats.end(),
              [&](const Splat2D& a, const Splat2D& b) { return detail::splat_order(cloud, a, b); });

    // tile assignment in sorted order
    const int tiles_x = (w + kTileSize - 1) / kTileSize;
    const int tiles_y = (h + kTileSize - 1) / kTileSize;
    std::vector<std::vector<std::int32_t>> tile_splats(static_cast<size_t>(tiles_x * tiles_y));
    for (std::int32_t si = 0; si < static_cast<std::int32_t>(splats.size()); ++si) {
        const Splat2D& s = splats[static_cast<size_t>(si)];
        const int x0 = std::clamp(static_cast<int>(std::floor((s.mean2d.x() - s.radius) / kTileSize)), 0, tiles_x - 1);
        const int x1 = std::clamp(static_cast<int>(std::floor((s.mean2d.x() + s.radius) / kTileSize)), 0, tiles_x - 1);
        const int y0 = std::clamp(static_cast<int>(std::floor((s.mean2d.y() - s.radius) / kTileSize)), 0, tiles_y - 1);
        const int y1 = std::clamp(static_cast<int>(std::floor((s.mean2d.y() + s.radius) / kTileSize)), 0, tiles_y - 1);
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx)
                tile_splats[static_cast<size_t>(ty * tiles_x + tx)].push_back(si);
    }

    RenderOutput out;
    out.color = Image(h, w, 3);
    out.concept_map = ChannelStack(k, h, w);
    out.alpha = Image(h, w, 1);
    if (ctx) {
        ctx->cam = cam;
        ctx->bg = bg;
        ctx->n_gaussians = cloud.size();
        ctx->splats = splats;
        ctx->pixel_start.assign(static_cast<size_t>(h) * w, 0);
        ctx->pixel_count.assign(static_cast<size_t>(h) * w, 0);
        ctx->entries.clear();
    }

    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            const auto& list = tile_splats[static_cast<size_t>(ty * tiles_x + tx)];
            const int y_end = std::min(h, (ty + 1) * kTileSize);
            const int x_end = std::min(w, (tx + 1) * kTileSize);
            for (int y = ty * kTileSize; y < y_end; ++y) {
                for (int x = tx * kTileSize; x < x_end; ++x) {
                    const Vec2 p(x + 0.5, y + 0.5);
                    const size_t pixel = static_cast<size_t>(y) * w + x;
                    if (ctx) ctx->pixel_start[pixel] = static_cast<std::int32_t>(ctx->entries.size());
                    double T = 1.0;
                    Vec3 c = Vec3::Zero();
                    for (const std::int32_t si : list) {
                        const Splat2D& s = splats[static_cast<size_t>(si)];
                        const Vec2 d = p - s.mean2d;
                        const double q = d.dot(s.cov_inv * d);
                        if (q > s.q_cut) continue;
                        const double alpha = std::min(kAlphaClip, s.sigma * std::exp(-0.5 * q));
                        c += s.color * (alpha * T);
                        out.concept_map.at(s.label, y, x) += alpha * T;
                        if (ctx) ctx->entries.push_back({si, alpha});
                        T *= (1.0 - alpha);
                        if (T < kTransmittanceFloor) break;
                    }
                    if (ctx)
                        ctx->pixel_count[pixel] =
                            static_cast<std::int32_t>(ctx->entries.size()) - ctx->pixel_start[pixel];
                    c += bg * T;
                    out.color.at(y, x, 0) = c.x();
                    out.color.at(y, x, 1) = c.y();
                    out.color.at(y, x, 2) = c.z();
                    out.alpha.at(y, x, 0) = 1.0 - T;
                }
            }
        }
    }
    return out;
}

struct CloudGradients {
    std::vector<Vec3> mu;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    std::vector<double> opacity_logit;
    std::vector<Vec3> color;

    explicit CloudGradients(size_t n = 0) { resize(n); }

    void resize(size_t n)
    {
        mu.assign(n, Vec3::Zero());
        log_scale.assign(n, Vec3::Zero());
        rotation.assign(n, Vec4::Zero());
        opacity_logit.assign(n, 0.0);
        color.assign(n, Vec3::Zero());
    }

    bool all_finite() const
    {
        for (size_t i = 0; i < mu.size(); ++i) {
            if (!mu[i].allFinite() || !log_scale[i].allFinite() || !rotation[i].allFinite() ||
                !color[i].allFinite() || !std::isfinite(opacity_logit[i]))
                return false;
        }
        return true;
    }
};

namespace detail {

// dR/d(q_hat) for the normalized quaternion (w,x,y,z).
inline void quat_rotation_derivatives(const Vec4& qh, Mat3 dR[4])
{
    const double w = qh[0], x = qh[1], y = qh[2], z = qh[3];
    dR[0] << 0, -z, y, z, 0, -x, -y, x, 0;
    dR[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dR[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dR[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    for (int i = 0; i < 4; ++i) dR[i] *= 2.0;
}

} // namespace detail

// Gradients of sum_pixels <grad_color(pixel), C(pixel)> for the forward pass
// recorded in ctx. Labels and thresholded masks receive no gradient.
inline CloudGradients render_backward(const GaussianCloud& cloud, const ForwardContext& ctx,
                                      const Image& grad_color)
{
    if (ctx.n_gaussians != cloud.size() || ctx.pixel_start.empty())
        throw ValidationError("render_backward: forward context missing or cloud changed size");
    if (grad_color.h != ctx.cam.height || grad_color.w != ctx.cam.width || grad_color.c != 3)
        throw ValidationError("render_backward: grad_color shape mismatch");

    const int h = ctx.cam.height, w = ctx.cam.width;
    const size_t n_splats = ctx.splats.size();

    // per-splat screen-space accumulators
    std::vector<Vec2> g_mean2d(n_splats, Vec2::Zero());
    std::vector<Mat2> g_cov2d(n_splats, Mat2::Zero());
    std::vector<double> g_sigma(n_splats, 0.0);

    CloudGradients grads(cloud.size());

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t pixel = static_cast<size_t>(y) * w + x;
            const std::int32_t count = ctx.pixel_count[pixel];
            if (count == 0 && ctx.bg.isZero()) continue;
            const std::int32_t start = ctx.pixel_start[pixel];
            const Vec2 p(x + 0.5, y + 0.5);
            const Vec3 g(grad_color.at(y, x, 0), grad_color.at(y, x, 1), grad_color.at(y, x, 2));

            // replay transmittances front-to-back
            double T = 1.0;
            thread_local std::vector<double> t_before;
            t_before.clear();
            for (std::int32_t e = 0; e < count; ++e) {
                t_before.push_back(T);
                T *= (1.0 - ctx.entries[static_cast<size_t>(start + e)].alpha);
            }
            // reverse sweep with the suffix S = d<g,C>/dT contributions
            double S = g.dot(ctx.bg) * T;
            for (std::int32_t e = count - 1; e >= 0; --e) {
                const PixelEntry& entry = ctx.entries[static_cast<size_t>(start + e)];
                const Splat2D& s = ctx.splats[static_cast<size_t>(entry.splat)];
                const double Ti = t_before[static_cast<size_t>(e)];
                const double gc = g.dot(s.color);

                grads.color[static_cast<size_t>(s.gaussian_index)] += g * (entry.alpha * Ti);

                const double d_alpha = gc * Ti - S / (1.0 - entry.alpha);
                S += gc * entry.alpha * Ti;

                if (entry.alpha >= kAlphaClip) continue; // clipped: flat in sigma and q
                const Vec2 d = p - s.mean2d;
                const Vec2 md = s.cov_inv * d;
                const double gaussian = entry.alpha / s.sigma; // exp(-q/2)
                g_sigma[static_cast<size_t>(entry.splat)] += d_alpha * gaussian;
                const double d_q = d_alpha * (-0.5 * entry.alpha);
                g_mean2d[static_cast<size_t>(entry.splat)] += d_q * (-2.0 * md);
                g_cov2d[static_cast<size_t>(entry.splat)] += d_q * (-(md * md.transpose()));
            }
        }
    }

    // chain screen-space gradients to world parameters
    const Mat3 R = ctx.cam.rotation();
    const double f = ctx.cam.focal();
    for (size_t si = 0; si < n_splats; ++si) {
        const Splat2D& s = ctx.splats[si];
        const Gaussian3D& gau = cloud.gaussians[static_cast<size_t>(s.gaussian_index)];
        const double xc = s.t_cam.x(), yc = s.t_cam.y(), zc = s.t_cam.z();
        const double z2 = zc * zc;

        Eigen::Matrix<double, 2, 3> J;
        J << f / zc, 0.0, -f * xc / z2,
            0.0, f / zc, -f * yc / z2;

        const Mat3 sigma_world = covariance(gau);
        const Mat3 sigma_cam = R * sigma_world * R.transpose();

        // mean path
        Vec3 g_t = J.transpose() * g_mean2d[si];

        // covariance path through the Jacobian's dependence on t
        const Mat2& gc2 = g_cov2d[si];
        Eigen::Matrix<double, 2, 3> dJ[3];
        dJ[0].setZero();
        dJ[0](0, 2) = -f / z2;
        dJ[1].setZero();
        dJ[1](1, 2) = -f / z2;
        dJ[2].setZero();
        dJ[2](0, 0) = -f / z2;
        dJ[2](0, 2) = 2.0 * f * xc / (z2 * zc);
        dJ[2](1, 1) = -f / z2;
        dJ[2](1, 2) = 2.0 * f * yc / (z2 * zc);
        for (int m = 0; m < 3; ++m)
            g_t[m] += 2.0 * (gc2.cwiseProduct(dJ[m] * sigma_cam * J.transpose())).sum();

        grads.mu[static_cast<size_t>(s.gaussian_index)] += R.transpose() * g_t;

        // covariance path through Sigma itself
        const Mat3 g_sigma_cam3 = J.transpose() * gc2 * J;
        const Mat3 g_sigma_world = R.transpose() * g_sigma_cam3 * R;

        const Vec4 q = gau.rotation;
        const double qn = q.norm();
        const Vec4 qh = q / qn;
        const Mat3 rot = quat_to_rotation(gau.rotation);
        const Vec3 scale = gau.log_scale.array().exp();
        const Mat3 m3 = rot * scale.asDiagonal();

        const Mat3 g_m3 = 2.0 * g_sigma_world * m3; // g_sigma_world is symmetric
        const Mat3 g_rot = g_m3 * scale.asDiagonal();
        const Vec3 g_scale = (rot.transpose() * g_m3).diagonal();
        grads.log_scale[static_cast<size_t>(s.gaussian_index)] +=
            (g_scale.array() * scale.array()).matrix();

        Mat3 dR[4];
        detail::quat_rotation_derivatives(qh, dR);
        Vec4 g_qh;
        for (int c = 0; c < 4; ++c) g_qh[c] = (g_rot.cwiseProduct(dR[c])).sum();
        const Vec4 g_q = (g_qh - qh * qh.dot(g_qh)) / qn;
        grads.rotation[static_cast<size_t>(s.gaussian_index)] += g_q;

        grads.opacity_logit[static_cast<size_t>(s.gaussian_index)] +=
            g_sigma[si] * s.sigma * (1.0 - s.sigma);
    }
    return grads;
}

} // namespace csplat
