#pragma once

// Two-stage orchestration: stage 1 turns a layout into a concept-labeled
// Gaussian cloud; stage 2 runs the masked interval-score optimization loop.
// Both stages emit artifacts (PLY, PNG previews, metrics.csv, manifest.json)
// into a run directory and clean up partial output on failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "camera.hpp"
#include "common.hpp"
#include "gaussians.hpp"
#include "guidance.hpp"
#include "image.hpp"
#include "layout.hpp"
#include "png.hpp"
#include "pointcloud.hpp"
#include "rca.hpp"
#include "renderer.hpp"
#include "scene.hpp"
#include "text_embed.hpp"

namespace csplat {

// Optimization and preview renders share a mid-gray backdrop: it equals the
// null-conditioned target of the oracle predictor, so background pixels are
// stationary under the unprompted guidance path.
inline const Vec3 kNeutralBackground(0.5, 0.5, 0.5);

inline constexpr double kOrbitRadius = 2.2;
inline constexpr double kPreviewElevationDeg = 20.0;
inline constexpr int kAttentionGrid = 16; // feature cells per axis
inline constexpr int kAttentionDim = 32;

// ---- run manifest ---------------------------------------------------------

struct MetricRow {
    int iteration = 0;
    std::vector<double> masked_l2; // per concept, against the metric targets
    std::vector<double> psnr;
};

struct RunManifest {
    std::string scene_hash;
    std::string layout_provenance;
    double stage1_seconds = 0.0;
    double stage2_seconds = 0.0;
    std::vector<std::string> outputs; // paths relative to the run directory
    std::vector<std::string> warnings;
    std::vector<MetricRow> metrics;
};

inline nlohmann::ordered_json manifest_json(const RunManifest& m)
{
    nlohmann::ordered_json j;
    j["scene_hash"] = m.scene_hash;
    j["layout_provenance"] = m.layout_provenance;
    j["timings"] = {{"stage1_seconds", m.stage1_seconds}, {"stage2_seconds", m.stage2_seconds}};
    j["outputs"] = m.outputs;
    j["warnings"] = m.warnings;
    j["metrics"] = nlohmann::ordered_json::array();
    for (const auto& row : m.metrics) {
        nlohmann::ordered_json r;
        r["iteration"] = row.iteration;
        r["masked_l2"] = row.masked_l2;
        r["psnr"] = row.psnr;
        j["metrics"].push_back(std::move(r));
    }
    return j;
}

inline std::string serialize_manifest(const RunManifest& m) { return manifest_json(m).dump(2) + "\n"; }

// One row per recorded iteration; numbers printed with %.17g so reruns are
// byte-identical.
inline std::string metrics_csv(const std::vector<MetricRow>& rows, int k)
{
    std::string out = "iteration";
    for (int i = 0; i < k; ++i) out += ",masked_l2_c" + std::to_string(i);
    for (int i = 0; i < k; ++i) out += ",psnr_c" + std::to_string(i);
    out += "\n";
    char buf[40];
    for (const auto& row : rows) {
        out += std::to_string(row.iteration);
        for (const auto* series : {&row.masked_l2, &row.psnr})
            for (double v : *series) {
                std::snprintf(buf, sizeof buf, ",%.17g", v);
                out += buf;
            }
        out += "\n";
    }
    return out;
}

namespace detail {

// Tracks everything written under the run directory so a failing stage can
// remove its partial output before rethrowing.
class ArtifactWriter {
public:
    ArtifactWriter(std::filesystem::path root, RunManifest& manifest)
        : root_(std::move(root)), manifest_(manifest)
    {
    }

    void write(const std::filesystem::path& rel, const std::string& bytes, bool list_output = true)
    {
        const auto path = root_ / rel;
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec)
            throw IoError("cannot create directory " + path.parent_path().string() + ": " +
                          ec.message());
        std::ofstream f(path, std::ios::binary);
        if (!f.good()) throw IoError("cannot write " + path.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f.good()) throw IoError("short write: " + path.string());
        written_.push_back(path);
        if (list_output) manifest_.outputs.push_back(rel.generic_string());
    }

    void discard_written() noexcept
    {
        std::error_code ec;
        for (const auto& p : written_) std::filesystem::remove(p, ec);
    }

private:
    std::filesystem::path root_;
    RunManifest& manifest_;
    std::vector<std::filesystem::path> written_;
};

inline double elapsed_seconds(std::chrono::steady_clock::time_point since)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

} // namespace detail

// ---- cameras --------------------------------------------------------------

// Random training view: azimuth uniform over [-180, 180), elevation over
// [-10, 45], fixed radius, aimed at the scene-bounds center. Deterministic
// in (seed, iteration).
inline Camera sample_camera(std::uint64_t seed, int iteration, const Vec3& center, int resolution)
{
    Rng rng = Rng::stream(seed, (0x5ca4ull << 32) | static_cast<std::uint32_t>(iteration));
    const double az = rng.uniform(-180.0, 180.0);
    const double el = rng.uniform(-10.0, 45.0);
    return orbit_camera(center, deg2rad(az), deg2rad(el), kOrbitRadius, resolution, resolution);
}

inline Camera eval_camera(const Vec3& center, int resolution)
{
    return orbit_camera(center, 0.0, deg2rad(kPreviewElevationDeg), kOrbitRadius, resolution,
                        resolution);
}

// ---- metrics --------------------------------------------------------------

// Colors the metric series is measured against: the oracle predictor's own
// targets when present, the fixed concept palette otherwise.
inline std::vector<Vec3> metric_targets(const NoisePredictor& pred, int k)
{
    if (const auto* oracle = std::get_if<TargetOraclePredictor>(&pred)) {
        if (static_cast<int>(oracle->targets.size()) != k)
            throw ValidationError("metrics: oracle target count differs from concept count");
        return oracle->targets;
    }
    std::vector<Vec3> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(concept_target_color(i));
    return out;
}

// Per-concept mean squared error (and PSNR) over the thresholded mask of a
// fixed evaluation view. An empty mask means the concept is invisible from
// that view and scores the worst case (l2 = 1, psnr = 0).
inline MetricRow measure_metrics(const GaussianCloud& cloud, int iteration, const Vec3& center,
                                 const std::vector<Vec3>& targets, double tau, int resolution,
                                 bool* any_empty_mask = nullptr)
{
    const RenderOutput out = render(cloud, eval_camera(center, resolution), kNeutralBackground);
    const MaskStack masks = threshold_masks(out.concept_map, tau);

    MetricRow row;
    row.iteration = iteration;
    const int k = cloud.k;
    for (int i = 0; i < k; ++i) {
        double sum = 0.0;
        long count = 0;
        for (int y = 0; y < out.color.h; ++y)
            for (int x = 0; x < out.color.w; ++x) {
                if (!masks.at(i, y, x)) continue;
                for (int c = 0; c < 3; ++c) {
                    const double d = out.color.at(y, x, c) - targets[static_cast<size_t>(i)][c];
                    sum += d * d;
                }
                ++count;
            }
        if (count == 0) {
            if (any_empty_mask) *any_empty_mask = true;
            row.masked_l2.push_back(1.0);
            row.psnr.push_back(0.0);
            continue;
        }
        const double mse = sum / (3.0 * static_cast<double>(count));
        row.masked_l2.push_back(mse);
        row.psnr.push_back(mse > 0.0 ? std::min(10.0 * std::log10(1.0 / mse), 99.0) : 99.0);
    }
    return row;
}

// ---- stage 1 ---------------------------------------------------------------

struct Stage1Options {
    int candidates = 4;    // shape proposals per concept
    int preview_views = 4; // stage-1 preview renders
    LayoutOptions layout;
};

struct Stage1Result {
    GaussianCloud cloud;
    LayoutPlan plan;
    RunManifest manifest;
};

inline Stage1Result run_stage1(const SceneSpec& scene, LayoutController& layout,
                               ShapeGenerator& shapes, const std::filesystem::path& out_dir,
                               const Stage1Options& opts = {})
{
    scene.validate();
    if (opts.candidates < 1) throw ValidationError("stage 1: need at least one shape candidate");
    if (opts.preview_views < 1) throw ValidationError("stage 1: need at least one preview view");
    const auto start = std::chrono::steady_clock::now();

    Stage1Result result;
    result.manifest.scene_hash = to_hex(fnv1a64(serialize_scene_spec(scene)));
    detail::ArtifactWriter writer(out_dir, result.manifest);

    try {
        result.plan = generate_layout(scene, layout, opts.layout);
        result.manifest.layout_provenance = provenance_name(result.plan.provenance);

        const int k = scene.concept_count();
        const auto views = default_selector_views();
        const GeometricScorer scorer;
        std::vector<std::pair<PointCloud, int>> placed;
        for (int id = 0; id < k; ++id) {
            const auto spec_it = std::find_if(scene.concepts.begin(), scene.concepts.end(),
                                              [id](const ConceptSpec& c) { return c.id == id; });
            const auto box_it = std::find_if(result.plan.boxes.begin(), result.plan.boxes.end(),
                                             [id](const Bbox3D& b) { return b.concept_id == id; });
            if (box_it == result.plan.boxes.end())
                throw ValidationError("stage 1: layout lacks a box for concept " +
                                      std::to_string(id));
            const std::string& prompt =
                spec_it->shape_prompt.empty() ? spec_it->concept_prompt : spec_it->shape_prompt;
            const std::uint64_t concept_seed =
                Rng::stream(scene.seed, (0xca4dull << 32) | static_cast<std::uint32_t>(id))
                    .next_u64();
            const auto candidates =
                generate_candidates(prompt, opts.candidates, shapes, concept_seed);
            auto [index, chosen] = select_pointcloud(candidates, scorer, views);
            (void)index;
            const PointCloud normalized = normalize_pointcloud(chosen);
            placed.emplace_back(
                place_pointcloud(normalized, bbox_transform(*box_it, scene.bounds())), id);
        }
        result.cloud = init_from_pointclouds(placed, k);

        writer.write("cloud_stage1.ply", export_ply(result.cloud));
        writer.write("layout.json", serialize_layout(result.plan));

        const Vec3 center = scene.bounds() / 2.0;
        const int res = scene.stage2.resolution;
        for (int j = 0; j < opts.preview_views; ++j) {
            const double az = 360.0 * j / opts.preview_views;
            const Camera cam =
                orbit_camera(center, deg2rad(az), deg2rad(kPreviewElevationDeg), kOrbitRadius,
                             res, res);
            const RenderOutput out = render(result.cloud, cam, kNeutralBackground);
            writer.write("renders/stage1_view" + std::to_string(j) + ".png",
                         encode_png(out.color));
        }

        result.manifest.stage1_seconds = detail::elapsed_seconds(start);
        writer.write("manifest.json", serialize_manifest(result.manifest), false);
    } catch (...) {
        writer.discard_written();
        throw;
    }
    return result;
}

// ---- turntable -------------------------------------------------------------

struct TurntableView {
    Camera cam;
    RenderOutput joint;
    std::vector<RenderOutput> isolated; // per concept: only that label's Gaussians
};

// n evenly spaced azimuths at a fixed slightly-raised elevation. Isolated
// renders keep the full concept count so channel i stays channel i.
inline std::vector<TurntableView> render_turntable(const GaussianCloud& cloud, int n,
                                                   int resolution, const Vec3& center)
{
    if (n < 1) throw ValidationError("turntable: need at least one view");
    cloud.validate();

    std::vector<GaussianCloud> subclouds(static_cast<size_t>(cloud.k));
    for (auto& sc : subclouds) sc.k = cloud.k;
    for (const auto& g : cloud.gaussians)
        subclouds[static_cast<size_t>(g.label)].gaussians.push_back(g);

    std::vector<TurntableView> views;
    views.reserve(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        TurntableView v;
        v.cam = orbit_camera(center, deg2rad(360.0 * j / n), deg2rad(kPreviewElevationDeg),
                             kOrbitRadius, resolution, resolution);
        v.joint = render(cloud, v.cam, kNeutralBackground);
        for (const auto& sc : subclouds) v.isolated.push_back(render(sc, v.cam, kNeutralBackground));
        views.push_back(std::move(v));
    }
    return views;
}

// ---- stage 2 ---------------------------------------------------------------

struct Stage2Options {
    int turntable_views = 8;
};

struct Stage2Result {
    GaussianCloud cloud;
    RunManifest manifest;
};

namespace detail {

// Inversion-aligned timesteps: t must be a multiple of the sub-step stride
// with t - delta_t >= 1, clipped to the configured sampling range.
struct TimestepGrid {
    int stride = 1;
    int j_min = 1;
    int j_max = 1;

    static TimestepGrid from_config(const GuidanceConfig& cfg)
    {
        TimestepGrid g;
        g.stride = cfg.delta_t / cfg.substeps;
        const int t_low = std::max(cfg.t_min, cfg.delta_t + g.stride);
        g.j_min = (t_low + g.stride - 1) / g.stride;
        g.j_max = cfg.t_max / g.stride;
        if (g.j_min > g.j_max)
            throw ValidationError(
                "stage 2: no inversion-aligned timestep lies in [t_min, t_max]; need a multiple "
                "of delta_t/substeps in [max(t_min, delta_t + stride), t_max]");
        return g;
    }

    int sample(std::uint64_t seed, int iteration) const
    {
        Rng rng = Rng::stream(seed, (0x715aull << 32) | static_cast<std::uint32_t>(iteration));
        return stride * rng.uniform_int(j_min, j_max);
    }
};

} // namespace detail

// The diffusion stand-in conditioned on the scene's prompts: per-concept
// decomposed prompts, the global prompt as background, per-concept adapters.
inline GuidanceBackbone make_scene_backbone(const SceneSpec& scene, const TextEmbedder& embedder)
{
    GuidanceBackbone backbone;
    backbone.set.weights = init_attention_weights(
        kAttentionDim, embedder.d_text(),
        Rng::stream(scene.seed, 0xa77e57ull).next_u64(), scene.stage2.lambda);
    std::vector<const ConceptSpec*> by_id(scene.concepts.size());
    for (const auto& c : scene.concepts) by_id[static_cast<size_t>(c.id)] = &c;
    for (const ConceptSpec* c : by_id) {
        backbone.set.prompts.push_back(embedder.embed(c->concept_prompt));
        const std::uint64_t adapter_seed =
            c->adapter_seed != 0
                ? c->adapter_seed
                : Rng::stream(scene.seed, (0xadaull << 32) | static_cast<std::uint32_t>(c->id))
                      .next_u64();
        backbone.set.adapters.push_back(
            init_concept_lora(embedder.d_text(), kAttentionDim, 4, adapter_seed));
    }
    backbone.set.bg_prompt = embedder.embed(scene.global_prompt);
    backbone.null_prompt = null_prompt_embedding(embedder);
    backbone.features = make_backbone_features(kAttentionGrid, kAttentionGrid, kAttentionDim,
                                               Rng::stream(scene.seed, 0xfea7ull).next_u64());
    return backbone;
}

inline Stage2Result run_stage2(const GaussianCloud& init, const SceneSpec& scene,
                               const NoisePredictor& predictor,
                               const std::filesystem::path& out_dir, RunManifest manifest = {},
                               const Stage2Options& opts = {})
{
    scene.validate();
    init.validate();
    if (init.k != scene.concept_count())
        throw ValidationError("stage 2: cloud has k=" + std::to_string(init.k) +
                              " but the scene declares " +
                              std::to_string(scene.concept_count()) + " concepts");
    const auto start = std::chrono::steady_clock::now();

    const GuidanceConfig& cfg = scene.stage2;
    const int k = init.k;
    const Vec3 center = scene.bounds() / 2.0;
    const double extent = scene.bounds().maxCoeff();
    const NoiseSchedule sched = make_schedule(cfg.timesteps);
    const auto grid = detail::TimestepGrid::from_config(cfg);
    const TextEmbedder embedder;
    const GuidanceBackbone backbone = make_scene_backbone(scene, embedder);
    const std::vector<Vec3> targets = metric_targets(predictor, k);

    Stage2Result result;
    result.manifest = std::move(manifest);
    if (result.manifest.scene_hash.empty())
        result.manifest.scene_hash = to_hex(fnv1a64(serialize_scene_spec(scene)));
    detail::ArtifactWriter writer(out_dir, result.manifest);

    GaussianCloud cloud = init;
    CloudGradients velocity(cloud.size());
    bool empty_mask_seen = false;
    bool cloud_emptied = false;

    auto record = [&](int iteration) {
        result.manifest.metrics.push_back(measure_metrics(cloud, iteration, center, targets,
                                                          cfg.tau, cfg.resolution,
                                                          &empty_mask_seen));
    };

    try {
        record(0);
        const double lr_mu = cfg.lr.mu * extent;
        for (int iter = 0; iter < cfg.iters; ++iter) {
            const Camera cam = sample_camera(scene.seed, iter, center, cfg.resolution);
            ForwardContext ctx;
            const RenderOutput out = render(cloud, cam, kNeutralBackground, &ctx);
            const MaskStack masks = threshold_masks(out.concept_map, cfg.tau);
            const int t = grid.sample(scene.seed, iter);
            const Image gpix = cism_gradient(out.color, masks, t, predictor, sched, cfg, backbone);
            if (!gpix.all_finite())
                throw NumericError("stage 2: non-finite pixel gradient at iteration " +
                                   std::to_string(iter));
            const CloudGradients grads = render_backward(cloud, ctx, gpix);
            if (!grads.all_finite())
                throw NumericError("stage 2: non-finite parameter gradient at iteration " +
                                   std::to_string(iter));

            for (size_t i = 0; i < cloud.size(); ++i) {
                auto& g = cloud.gaussians[i];
                velocity.mu[i] = cfg.momentum * velocity.mu[i] + grads.mu[i];
                velocity.log_scale[i] = cfg.momentum * velocity.log_scale[i] + grads.log_scale[i];
                velocity.rotation[i] = cfg.momentum * velocity.rotation[i] + grads.rotation[i];
                velocity.opacity_logit[i] =
                    cfg.momentum * velocity.opacity_logit[i] + grads.opacity_logit[i];
                velocity.color[i] = cfg.momentum * velocity.color[i] + grads.color[i];

                // zero steps are skipped exactly, so zeroed learning rates
                // leave the cloud bitwise untouched
                const Vec3 d_mu = lr_mu * velocity.mu[i];
                if (d_mu.squaredNorm() > 0) g.mu -= d_mu;
                const Vec3 d_ls = cfg.lr.log_scale * velocity.log_scale[i];
                if (d_ls.squaredNorm() > 0) g.log_scale -= d_ls;
                const Vec4 d_rot = cfg.lr.rotation * velocity.rotation[i];
                if (d_rot.squaredNorm() > 0) {
                    g.rotation -= d_rot;
                    const double n = g.rotation.norm();
                    g.rotation = n > 1e-12 ? Vec4(g.rotation / n) : Vec4(1, 0, 0, 0);
                }
                const double d_op = cfg.lr.opacity * velocity.opacity_logit[i];
                if (d_op != 0.0) g.opacity_logit -= d_op;
                const Vec3 d_col = cfg.lr.color * velocity.color[i];
                if (d_col.squaredNorm() > 0)
                    g.color = (g.color - d_col).cwiseMax(0.0).cwiseMin(1.0);
            }

            if ((iter + 1) % cfg.prune_interval == 0) {
                size_t keep = 0;
                for (size_t i = 0; i < cloud.size(); ++i) {
                    if (logistic(cloud.gaussians[i].opacity_logit) < cfg.prune_opacity) continue;
                    cloud.gaussians[keep] = cloud.gaussians[i];
                    velocity.mu[keep] = velocity.mu[i];
                    velocity.log_scale[keep] = velocity.log_scale[i];
                    velocity.rotation[keep] = velocity.rotation[i];
                    velocity.opacity_logit[keep] = velocity.opacity_logit[i];
                    velocity.color[keep] = velocity.color[i];
                    ++keep;
                }
                cloud.gaussians.resize(keep);
                velocity.mu.resize(keep);
                velocity.log_scale.resize(keep);
                velocity.rotation.resize(keep);
                velocity.opacity_logit.resize(keep);
                velocity.color.resize(keep);
                if (keep == 0 && !cloud_emptied) {
                    cloud_emptied = true;
                    result.manifest.warnings.push_back(
                        "pruning removed every Gaussian at iteration " + std::to_string(iter + 1));
                }
            }

            record(iter + 1);
        }

        if (empty_mask_seen)
            result.manifest.warnings.push_back(
                "a concept was invisible from the evaluation view for at least one metric row");

        writer.write("cloud_final.ply", export_ply(cloud));
        writer.write("metrics.csv", metrics_csv(result.manifest.metrics, k));
        const auto turntable =
            render_turntable(cloud, opts.turntable_views, cfg.resolution, center);
        for (size_t j = 0; j < turntable.size(); ++j) {
            const std::string stem = "renders/final_view" + std::to_string(j);
            writer.write(stem + ".png", encode_png(turntable[j].joint.color));
            for (int i = 0; i < k; ++i) {
                writer.write(stem + "_mask" + std::to_string(i) + ".png",
                             encode_png(turntable[j].joint.concept_map.plane(i)));
                writer.write(stem + "_concept" + std::to_string(i) + ".png",
                             encode_png(turntable[j].isolated[static_cast<size_t>(i)].color));
            }
        }

        result.manifest.stage2_seconds = detail::elapsed_seconds(start);
        writer.write("manifest.json", serialize_manifest(result.manifest), false);
    } catch (...) {
        writer.discard_written();
        throw;
    }

    result.cloud = std::move(cloud);
    return result;
}

// ---- layout-free baseline ---------------------------------------------------

// Initialization with the layout stage disabled: every concept's points are
// drawn from one shared ball around the scene center, so nothing separates
// the concepts spatially.
inline GaussianCloud random_sphere_init(const SceneSpec& scene, int points_per_concept = 1024)
{
    scene.validate();
    if (points_per_concept < kMinCloudPoints)
        throw ValidationError("random sphere init: need at least 64 points per concept");
    const Vec3 center = scene.bounds() / 2.0;
    const double radius = scene.bounds().maxCoeff() / 2.0;

    Rng rng = Rng::stream(scene.seed, 0xab1a7eull);
    const int k = scene.concept_count();
    std::vector<std::pair<PointCloud, int>> placed;
    for (int id = 0; id < k; ++id) {
        PointCloud pc;
        pc.points.reserve(static_cast<size_t>(points_per_concept));
        for (int i = 0; i < points_per_concept; ++i) {
            Vec3 dir(rng.normal(), rng.normal(), rng.normal());
            const double n = dir.norm();
            if (n < 1e-12) {
                --i;
                continue;
            }
            const double r = radius * std::cbrt(rng.uniform());
            ColoredPoint pt;
            pt.p = center + dir / n * r;
            pc.points.push_back(pt);
        }
        placed.emplace_back(std::move(pc), id);
    }
    return init_from_pointclouds(placed, k);
}

} // namespace csplat
