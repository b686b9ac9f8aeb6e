#pragma once

// Coarse per-concept point clouds: candidate generation (procedural, file,
// remote), normalization, candidate selection from fixed preview views, and
// placement into a layout box (p -> s*p + t).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "conceptsplat/camera.hpp"
#include "conceptsplat/common.hpp"
#include "conceptsplat/image.hpp"
#include "conceptsplat/layout.hpp"
#include "conceptsplat/ply.hpp"

namespace csplat {

inline constexpr int kMinCloudPoints = 64;

struct ColoredPoint {
    Vec3 p{0, 0, 0};
    Vec3 color{0.5, 0.5, 0.5};
};

enum class CloudProvenance { procedural, external, file };

struct PointCloud {
    std::vector<ColoredPoint> points;
    CloudProvenance provenance = CloudProvenance::procedural;

    void validate() const
    {
        if (points.size() < kMinCloudPoints)
            throw ValidationError("point cloud: need at least 64 points, got " +
                                  std::to_string(points.size()));
        for (const auto& pt : points)
            if (pt.color.minCoeff() < 0.0 || pt.color.maxCoeff() > 1.0)
                throw ValidationError("point cloud: color channel outside [0,1]");
    }
};

class ShapeGenerator {
public:
    virtual ~ShapeGenerator() = default;
    virtual PointCloud generate(const std::string& prompt, std::uint64_t seed) = 0;
};

// Keyword-driven parametric primitives with seeded jitter. The jitter is
// radial/uniform so the documented radial bound (base radius + jitter) holds
// pointwise, not just in expectation.
class ProceduralShapeGenerator final : public ShapeGenerator {
public:
    struct Config {
        int points = 1024;
        double jitter = 0.02;
        bool strict = false; // unknown prompt: throw instead of defaulting to a sphere
    };

    ProceduralShapeGenerator() : ProceduralShapeGenerator(Config{}) {}

    explicit ProceduralShapeGenerator(Config cfg) : cfg_(cfg)
    {
        if (cfg_.points < kMinCloudPoints)
            throw ValidationError("procedural generator: needs at least 64 points");
    }

    double jitter() const { return cfg_.jitter; }

    PointCloud generate(const std::string& prompt, std::uint64_t seed) override
    {
        const std::string lower = lowercase(prompt);
        Rng rng = Rng::stream(seed, fnv1a64(lower));
        PointCloud cloud;
        cloud.provenance = CloudProvenance::procedural;
        cloud.points.reserve(static_cast<size_t>(cfg_.points));

        if (contains_any(lower, {"sphere", "ball", "orb"})) {
            for (int i = 0; i < cfg_.points; ++i) cloud.points.push_back(sphere_point(rng, 0.5));
        } else if (contains_any(lower, {"box", "cube", "block", "crate"})) {
            for (int i = 0; i < cfg_.points; ++i) cloud.points.push_back(box_point(rng, Vec3(0.5, 0.5, 0.5)));
        } else if (contains_any(lower, {"cylinder", "can", "barrel"})) {
            for (int i = 0; i < cfg_.points; ++i) cloud.points.push_back(cylinder_point(rng, 0.35, 0.5));
        } else if (contains_any(lower, {"figure", "robot", "person", "dog", "cat", "toy"})) {
            // body + head composite
            for (int i = 0; i < cfg_.points; ++i) {
                if (i % 4 == 3) {
                    ColoredPoint pt = sphere_point(rng, 0.2);
                    pt.p.z() += 0.35;
                    cloud.points.push_back(pt);
                } else {
                    ColoredPoint pt = sphere_point(rng, 0.35);
                    pt.p.z() -= 0.15;
                    cloud.points.push_back(pt);
                }
            }
        } else if (cfg_.strict || lower.empty()) {
            throw ValidationError("procedural generator: unknown shape prompt '" + prompt + "'");
        } else {
            for (int i = 0; i < cfg_.points; ++i) cloud.points.push_back(sphere_point(rng, 0.5));
        }

        tint(cloud, lower);
        cloud.validate();
        return cloud;
    }

private:
    static std::string lowercase(std::string s)
    {
        std::transform(s.begin(), s.end(), s.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return s;
    }

    static bool contains_any(const std::string& s, std::initializer_list<const char*> words)
    {
        for (const char* w : words)
            if (s.find(w) != std::string::npos) return true;
        return false;
    }

    Vec3 unit_direction(Rng& rng) const
    {
        // rejection-free: Box-Muller triple normalized
        Vec3 v(rng.normal(), rng.normal(), rng.normal());
        const double n = v.norm();
        return n > 1e-12 ? Vec3(v / n) : Vec3(1, 0, 0);
    }

    ColoredPoint sphere_point(Rng& rng, double radius) const
    {
        ColoredPoint pt;
        pt.p = unit_direction(rng) * (radius + rng.uniform(-cfg_.jitter, cfg_.jitter));
        return pt;
    }

    ColoredPoint box_point(Rng& rng, const Vec3& half) const
    {
        // pick a face by area, then a uniform point on it
        const double ax = half.y() * half.z(), ay = half.x() * half.z(), az = half.x() * half.y();
        const double u = rng.uniform() * (ax + ay + az);
        ColoredPoint pt;
        Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        if (u < ax)
            p.x() = side;
        else if (u < ax + ay)
            p.y() = side;
        else
            p.z() = side;
        pt.p = p.cwiseProduct(half) + unit_direction(rng) * rng.uniform(0.0, cfg_.jitter);
        return pt;
    }

    ColoredPoint cylinder_point(Rng& rng, double radius, double half_height) const
    {
        const double lateral = 2 * kPi * radius * (2 * half_height);
        const double caps = 2 * kPi * radius * radius;
        ColoredPoint pt;
        const double phi = rng.uniform(0.0, 2 * kPi);
        if (rng.uniform() * (lateral + caps) < lateral) {
            pt.p = Vec3(radius * std::cos(phi), radius * std::sin(phi),
                        rng.uniform(-half_height, half_height));
        } else {
            const double r = radius * std::sqrt(rng.uniform());
            const double z = rng.uniform() < 0.5 ? -half_height : half_height;
            pt.p = Vec3(r * std::cos(phi), r * std::sin(phi), z);
        }
        pt.p += unit_direction(rng) * rng.uniform(0.0, cfg_.jitter);
        return pt;
    }

    // Mid-toned base color from the prompt plus slight per-point variation;
    // deliberately far from color-channel extremes.
    void tint(PointCloud& cloud, const std::string& lower) const
    {
        Rng crng = Rng::stream(fnv1a64(lower), 0xc01045ull);
        const Vec3 base(crng.uniform(0.35, 0.65), crng.uniform(0.35, 0.65),
                        crng.uniform(0.35, 0.65));
        Rng vrng = Rng::stream(fnv1a64(lower), 0x7a1e77ull);
        for (auto& pt : cloud.points) {
            for (int c = 0; c < 3; ++c)
                pt.color[c] = std::clamp(base[c] + vrng.uniform(-0.05, 0.05), 0.3, 0.7);
        }
    }

    Config cfg_;
};

// ---- point-cloud PLY I/O (x,y,z float; red,green,blue uchar) ------------

inline std::string save_pointcloud_ply(const PointCloud& cloud, bool binary = true)
{
    PlyFile f;
    f.binary = binary;
    f.vertex_count = cloud.points.size();
    std::vector<double> x, y, z, r, g, b;
    for (const auto& pt : cloud.points) {
        x.push_back(pt.p.x());
        y.push_back(pt.p.y());
        z.push_back(pt.p.z());
        r.push_back(std::round(pt.color.x() * 255.0));
        g.push_back(std::round(pt.color.y() * 255.0));
        b.push_back(std::round(pt.color.z() * 255.0));
    }
    f.add_column("x", PlyScalar::f32, std::move(x));
    f.add_column("y", PlyScalar::f32, std::move(y));
    f.add_column("z", PlyScalar::f32, std::move(z));
    f.add_column("red", PlyScalar::u8, std::move(r));
    f.add_column("green", PlyScalar::u8, std::move(g));
    f.add_column("blue", PlyScalar::u8, std::move(b));
    return write_ply(f);
}

inline PointCloud load_pointcloud_ply(const std::string& bytes)
{
    const PlyFile f = parse_ply(bytes);
    const auto& x = f.column("x");
    const auto& y = f.column("y");
    const auto& z = f.column("z");
    const bool has_color = f.find("red").has_value();
    PointCloud cloud;
    cloud.provenance = CloudProvenance::file;
    for (size_t i = 0; i < f.vertex_count; ++i) {
        ColoredPoint pt;
        pt.p = Vec3(x[i], y[i], z[i]);
        if (has_color)
            pt.color = Vec3(f.column("red")[i], f.column("green")[i], f.column("blue")[i]) / 255.0;
        cloud.points.push_back(pt);
    }
    cloud.validate();
    return cloud;
}

// Loads one fixed cloud from disk regardless of prompt or seed.
class FileShapeGenerator final : public ShapeGenerator {
public:
    explicit FileShapeGenerator(std::string path) : path_(std::move(path)) {}

    PointCloud generate(const std::string&, std::uint64_t) override
    {
        std::ifstream in(path_, std::ios::binary);
        if (!in.good()) throw IoError("cannot read point cloud file: " + path_);
        std::ostringstream ss;
        ss << in.rdbuf();
        return load_pointcloud_ply(ss.str());
    }

private:
    std::string path_;
};

// ---- operations ----------------------------------------------------------

inline std::vector<PointCloud> generate_candidates(const std::string& shape_prompt, int n,
                                                   ShapeGenerator& generator, std::uint64_t seed)
{
    if (n < 1) throw ValidationError("candidate generation: need n >= 1");
    std::vector<PointCloud> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        PointCloud c = generator.generate(shape_prompt,
                                          Rng::stream(seed, static_cast<std::uint64_t>(i)).next_u64());
        c.validate();
        out.push_back(std::move(c));
    }
    return out;
}

// Centers the axis-aligned bounding box on the origin and rescales so the
// largest axis extent is exactly 1.
inline PointCloud normalize_pointcloud(const PointCloud& cloud)
{
    if (cloud.points.empty()) throw ValidationError("normalize: empty cloud");
    Vec3 lo = cloud.points[0].p, hi = cloud.points[0].p;
    for (const auto& pt : cloud.points) {
        lo = lo.cwiseMin(pt.p);
        hi = hi.cwiseMax(pt.p);
    }
    const Vec3 center = (lo + hi) / 2;
    const double extent = (hi - lo).maxCoeff();
    if (extent < 1e-12) throw ValidationError("normalize: degenerate cloud (all points coincide)");
    PointCloud out = cloud;
    for (auto& pt : out.points) pt.p = (pt.p - center) / extent;
    return out;
}

inline PointCloud place_pointcloud(const PointCloud& cloud, const PlacementTransform& tr)
{
    PointCloud out = cloud;
    for (auto& pt : out.points) pt.p = tr.scale * pt.p + tr.translation;
    return out;
}

// ---- candidate selection --------------------------------------------------

// Binary silhouette from a point-sprite preview: each point marks the pixel
// it projects to (plus right/down neighbors so sparse clouds read as solid).
inline Image silhouette_render(const PointCloud& cloud, const Camera& cam)
{
    Image img(cam.height, cam.width, 1, 0.0);
    const Mat3 R = cam.rotation();
    for (const auto& pt : cloud.points) {
        const Vec3 pc = R * (pt.p - cam.position);
        if (pc.z() < cam.z_near) continue;
        const Vec2 px = cam.project(pc);
        const int x = static_cast<int>(std::floor(px.x()));
        const int y = static_cast<int>(std::floor(px.y()));
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                const int xx = x + dx, yy = y + dy;
                if (xx >= 0 && xx < cam.width && yy >= 0 && yy < cam.height) img.at(yy, xx, 0) = 1.0;
            }
    }
    return img;
}

class CandidateScorer {
public:
    virtual ~CandidateScorer() = default;
    virtual double score(const std::vector<Image>& silhouettes) const = 0;
};

// Coverage plus left-right silhouette symmetry, averaged over views.
class GeometricScorer final : public CandidateScorer {
public:
    double score(const std::vector<Image>& silhouettes) const override
    {
        double total = 0.0;
        for (const Image& s : silhouettes) {
            double on = 0.0, inter = 0.0, uni = 0.0;
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const double a = s.at(y, x, 0);
                    const double b = s.at(y, s.w - 1 - x, 0);
                    on += a;
                    inter += (a > 0 && b > 0) ? 1.0 : 0.0;
                    uni += (a > 0 || b > 0) ? 1.0 : 0.0;
                }
            const double coverage = on / (s.h * s.w);
            const double symmetry = uni > 0 ? inter / uni : 0.0;
            total += coverage + 0.5 * symmetry;
        }
        return total / static_cast<double>(silhouettes.size());
    }
};

// Four orbit viewpoints at cardinal azimuths, slightly elevated.
inline std::vector<Camera> default_selector_views(int resolution = 64)
{
    std::vector<Camera> views;
    for (double az : {0.0, 90.0, 180.0, 270.0})
        views.push_back(orbit_camera(Vec3(0, 0, 0), deg2rad(az), deg2rad(15.0), 2.2, resolution,
                                     resolution));
    return views;
}

// Argmax of the scorer over candidates; ties go to the lowest index.
inline std::pair<int, PointCloud> select_pointcloud(const std::vector<PointCloud>& candidates,
                                                    const CandidateScorer& scorer,
                                                    const std::vector<Camera>& views)
{
    if (candidates.empty()) throw ValidationError("selection: no candidates");
    if (views.empty()) throw ValidationError("selection: no views");
    int best = 0;
    double best_score = -1e300;
    for (size_t i = 0; i < candidates.size(); ++i) {
        std::vector<Image> sils;
        sils.reserve(views.size());
        for (const auto& v : views) sils.push_back(silhouette_render(candidates[i], v));
        const double sc = scorer.score(sils);
        if (sc > best_score) {
            best_score = sc;
            best = static_cast<int>(i);
        }
    }
    return {best, candidates[static_cast<size_t>(best)]};
}

} // namespace csplat
