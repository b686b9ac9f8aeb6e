#pragma once

// Concept-labeled anisotropic 3D Gaussians: parameterization (position,
// log-scale, quaternion, opacity logit, flat rgb, integer concept label),
// initialization from placed point clouds, and PLY persistence.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "conceptsplat/common.hpp"
#include "conceptsplat/pointcloud.hpp"

namespace csplat {

struct Gaussian3D {
    Vec3 mu{0, 0, 0};
    Vec3 log_scale{0, 0, 0};      // log of per-axis std-dev
    Vec4 rotation{1, 0, 0, 0};    // quaternion (w, x, y, z); kept near unit norm
    double opacity_logit = 0.0;   // sigma = logistic(opacity_logit) in (0,1)
    Vec3 color{0.5, 0.5, 0.5};    // order-0 color coefficients (flat rgb)
    int label = 0;                // concept index; one-hot in the math
};

struct GaussianCloud {
    std::vector<Gaussian3D> gaussians;
    int k = 1;          // concept count; labels lie in [0, k)
    int sh_degree = 0;  // only order 0 is implemented

    size_t size() const { return gaussians.size(); }

    void validate() const
    {
        if (k < 1) throw ValidationError("gaussian cloud: k must be >= 1");
        if (sh_degree != 0) throw ValidationError("gaussian cloud: only sh_degree 0 is supported");
        for (const auto& g : gaussians) {
            if (g.label < 0 || g.label >= k)
                throw ValidationError("gaussian cloud: label " + std::to_string(g.label) +
                                      " outside [0, " + std::to_string(k) + ")");
            if (std::abs(g.rotation.norm() - 1.0) > 1e-9)
                throw ValidationError("gaussian cloud: quaternion drifted off unit norm");
        }
    }
};

// Rotation matrix of a (w,x,y,z) quaternion, normalized first so raw
// optimizer updates stay valid inputs.
inline Mat3 quat_to_rotation(const Vec4& q_raw)
{
    const Vec4 q = q_raw / q_raw.norm();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

// Sigma = R * diag(exp(2*log_scale)) * R^T: symmetric positive definite for
// every parameter value.
inline Mat3 covariance(const Gaussian3D& g)
{
    const Mat3 R = quat_to_rotation(g.rotation);
    const Vec3 var = (2.0 * g.log_scale).array().exp();
    return R * var.asDiagonal() * R.transpose();
}

// Mean nearest-neighbor distance, brute force. Fine at init-time sizes.
inline double mean_nn_distance(const std::vector<ColoredPoint>& pts)
{
    if (pts.size() < 2) throw ValidationError("nearest-neighbor scale: need at least 2 points");
    double total = 0.0;
    for (size_t i = 0; i < pts.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < pts.size(); ++j) {
            if (j == i) continue;
            best = std::min(best, (pts[i].p - pts[j].p).squaredNorm());
        }
        total += std::sqrt(best);
    }
    return total / static_cast<double>(pts.size());
}

struct InitConfig {
    double opacity = 0.1; // initial sigma
};

// One isotropic Gaussian per point: scale from the cloud's mean
// nearest-neighbor spacing, identity rotation, label from the concept id.
inline GaussianCloud init_from_pointclouds(const std::vector<std::pair<PointCloud, int>>& placed,
                                           int k, const InitConfig& cfg = {})
{
    if (placed.empty()) throw ValidationError("init: no point clouds");
    GaussianCloud cloud;
    cloud.k = k;
    const double opacity_logit = logit(cfg.opacity);
    for (const auto& [pcd, concept_id] : placed) {
        if (concept_id < 0 || concept_id >= k)
            throw ValidationError("init: concept id " + std::to_string(concept_id) +
                                  " outside [0, " + std::to_string(k) + ")");
        if (pcd.points.empty()) throw ValidationError("init: empty point cloud");
        const double nn = mean_nn_distance(pcd.points);
        const double ls = std::log(nn);
        for (const auto& pt : pcd.points) {
            Gaussian3D g;
            g.mu = pt.p;
            g.log_scale = Vec3(ls, ls, ls);
            g.rotation = Vec4(1, 0, 0, 0);
            g.opacity_logit = opacity_logit;
            g.color = pt.color.cwiseMax(0.0).cwiseMin(1.0);
            g.label = concept_id;
            cloud.gaussians.push_back(g);
        }
    }
    cloud.validate();
    return cloud;
}

// ---- persistence -----------------------------------------------------------
// Schema: double x,y,z, f_dc_0..2, opacity_logit, log_scale_0..2, rot_0..3;
// uchar concept_label; "comment concept_count <k>". Binary is bit-exact.

inline std::string export_ply(const GaussianCloud& cloud, bool binary = true)
{
    cloud.validate();
    PlyFile f;
    f.binary = binary;
    f.vertex_count = cloud.size();
    f.comments.push_back("concept_count " + std::to_string(cloud.k));

    const size_t n = cloud.size();
    std::vector<std::vector<double>> cols(15, std::vector<double>(n));
    for (size_t i = 0; i < n; ++i) {
        const Gaussian3D& g = cloud.gaussians[i];
        cols[0][i] = g.mu.x();
        cols[1][i] = g.mu.y();
        cols[2][i] = g.mu.z();
        cols[3][i] = g.color.x();
        cols[4][i] = g.color.y();
        cols[5][i] = g.color.z();
        cols[6][i] = g.opacity_logit;
        cols[7][i] = g.log_scale.x();
        cols[8][i] = g.log_scale.y();
        cols[9][i] = g.log_scale.z();
        cols[10][i] = g.rotation[0];
        cols[11][i] = g.rotation[1];
        cols[12][i] = g.rotation[2];
        cols[13][i] = g.rotation[3];
        cols[14][i] = static_cast<double>(g.label);
    }
    static const char* names[] = {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2",
                                  "opacity_logit", "log_scale_0", "log_scale_1", "log_scale_2",
                                  "rot_0", "rot_1", "rot_2", "rot_3"};
    for (int c = 0; c < 14; ++c) f.add_column(names[c], PlyScalar::f64, std::move(cols[static_cast<size_t>(c)]));
    f.add_column("concept_label", PlyScalar::u8, std::move(cols[14]));
    return write_ply(f);
}

inline GaussianCloud import_ply(const std::string& bytes, std::vector<std::string>* warnings = nullptr)
{
    const PlyFile f = parse_ply(bytes);

    int k = 0;
    for (const auto& c : f.comments) {
        std::istringstream ss(c);
        std::string word;
        ss >> word;
        if (word == "concept_count") ss >> k;
    }

    GaussianCloud cloud;
    const auto& x = f.column("x");
    const auto& y = f.column("y");
    const auto& z = f.column("z");
    const auto& r = f.column("f_dc_0");
    const auto& g_ = f.column("f_dc_1");
    const auto& b = f.column("f_dc_2");
    const auto& op = f.column("opacity_logit");
    const auto& s0 = f.column("log_scale_0");
    const auto& s1 = f.column("log_scale_1");
    const auto& s2 = f.column("log_scale_2");
    const auto& q0 = f.column("rot_0");
    const auto& q1 = f.column("rot_1");
    const auto& q2 = f.column("rot_2");
    const auto& q3 = f.column("rot_3");

    const bool has_labels = f.find("concept_label").has_value();
    if (!has_labels && warnings)
        warnings->push_back("ply: no concept_label property; assigning every gaussian to concept 0");

    int max_label = 0;
    for (size_t i = 0; i < f.vertex_count; ++i) {
        Gaussian3D g;
        g.mu = Vec3(x[i], y[i], z[i]);
        g.color = Vec3(r[i], g_[i], b[i]);
        g.opacity_logit = op[i];
        g.log_scale = Vec3(s0[i], s1[i], s2[i]);
        g.rotation = Vec4(q0[i], q1[i], q2[i], q3[i]);
        g.label = has_labels ? static_cast<int>(f.column("concept_label")[i]) : 0;
        max_label = std::max(max_label, g.label);
        cloud.gaussians.push_back(g);
    }
    cloud.k = k > 0 ? k : max_label + 1;
    if (k > 0 && max_label >= k)
        throw ValidationError("ply: concept label " + std::to_string(max_label) +
                              " exceeds declared concept_count " + std::to_string(k));
    cloud.validate();
    return cloud;
}

} // namespace csplat
