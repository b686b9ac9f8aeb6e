#pragma once

// Per-concept 3D bounding boxes and the placement transform derived from
// them. Coordinates are z-up right-handed; (W, D, H) run along (x, y, z).
// Box placement scales by s = min(W_i/W, H_i/H) and translates to the box
// center — depth deliberately does not participate in the scale.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptsplat/common.hpp"
#include "conceptsplat/scene.hpp"

namespace csplat {

struct Bbox3D {
    double x = 0, y = 0, z = 0; // lowest corner
    double w = 0, d = 0, h = 0;
    int concept_id = 0;

    bool operator==(const Bbox3D&) const = default;

    Vec3 center() const { return Vec3(x + w / 2, y + d / 2, z + h / 2); }
};

struct PlacementTransform {
    double scale = 1.0;
    Vec3 translation{0, 0, 0};
};

enum class LayoutProvenance { llm, fixture, fallback };

inline const char* provenance_name(LayoutProvenance p)
{
    switch (p) {
        case LayoutProvenance::llm: return "llm";
        case LayoutProvenance::fixture: return "fixture";
        default: return "fallback";
    }
}

struct LayoutPlan {
    std::vector<Bbox3D> boxes; // one per concept id
    LayoutProvenance provenance = LayoutProvenance::fallback;
};

// s_i from width and height only; t_i is the box center.
inline PlacementTransform bbox_transform(const Bbox3D& box, const Vec3& bounds)
{
    PlacementTransform tr;
    tr.scale = std::min(box.w / bounds.x(), box.h / bounds.z());
    tr.translation = box.center();
    return tr;
}

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;

    bool valid() const { return errors.empty(); }
};

inline double box_overlap_volume(const Bbox3D& a, const Bbox3D& b)
{
    const double ox = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double oy = std::max(0.0, std::min(a.y + a.d, b.y + b.d) - std::max(a.y, b.y));
    const double oz = std::max(0.0, std::min(a.z + a.h, b.z + b.h) - std::max(a.z, b.z));
    return ox * oy * oz;
}

// Containment and shape errors are hard failures; inter-box overlap is only
// worth a warning (concepts may legitimately touch or interlock).
inline ValidationReport validate_layout(const LayoutPlan& plan, const Vec3& bounds, int k)
{
    constexpr double eps = 1e-12;
    ValidationReport rep;
    std::vector<int> count(static_cast<size_t>(std::max(k, 1)), 0);
    for (size_t i = 0; i < plan.boxes.size(); ++i) {
        const Bbox3D& b = plan.boxes[i];
        const std::string tag = "box[" + std::to_string(i) + "] (concept " +
                                std::to_string(b.concept_id) + ")";
        if (b.concept_id < 0 || b.concept_id >= k) {
            rep.errors.push_back(tag + ": concept id out of range");
            continue;
        }
        ++count[static_cast<size_t>(b.concept_id)];
        if (!(b.w > 0 && b.d > 0 && b.h > 0))
            rep.errors.push_back(tag + ": non-positive dimensions");
        if (b.x < -eps || b.x + b.w > bounds.x() + eps)
            rep.errors.push_back(tag + ": x-extent outside [0, W]");
        if (b.y < -eps || b.y + b.d > bounds.y() + eps)
            rep.errors.push_back(tag + ": y-extent outside [0, D]");
        if (b.z < -eps || b.z + b.h > bounds.z() + eps)
            rep.errors.push_back(tag + ": z-extent outside [0, H]");
    }
    for (int id = 0; id < k; ++id) {
        if (count[static_cast<size_t>(id)] == 0)
            rep.errors.push_back("concept " + std::to_string(id) + ": no box");
        else if (count[static_cast<size_t>(id)] > 1)
            rep.errors.push_back("concept " + std::to_string(id) + ": duplicate boxes");
    }
    for (size_t i = 0; i < plan.boxes.size(); ++i) {
        for (size_t j = i + 1; j < plan.boxes.size(); ++j) {
            const double v = box_overlap_volume(plan.boxes[i], plan.boxes[j]);
            if (v > eps) {
                std::ostringstream ss;
                ss << "boxes " << i << " and " << j << " overlap (volume " << v << ")";
                rep.warnings.push_back(ss.str());
            }
        }
    }
    return rep;
}

// Deterministic LLM-free layout: a row of boxes along x. Each of the k slots
// of width W/k holds a box of width min(0.9*W/k, 0.5*W) centered in the slot
// (the 0.5*W cap keeps the single-concept box from swallowing the scene);
// depth 0.5*D centered, height 0.5*H resting on z = 0.
inline LayoutPlan fallback_layout(const SceneSpec& scene)
{
    const Vec3 b = scene.bounds();
    const int k = scene.concept_count();
    const double slot = b.x() / k;
    const double w_i = std::min(0.9 * slot, 0.5 * b.x());
    LayoutPlan plan;
    plan.provenance = LayoutProvenance::fallback;
    for (const auto& c : scene.concepts) {
        Bbox3D box;
        box.concept_id = c.id;
        box.w = w_i;
        box.d = 0.5 * b.y();
        box.h = 0.5 * b.z();
        box.x = slot * c.id + (slot - w_i) / 2;
        box.y = (b.y() - box.d) / 2;
        box.z = 0.0;
        plan.boxes.push_back(box);
    }
    return plan;
}

// ---- controller plumbing ----------------------------------------------

// Canonical request identity: prompt, concept classes and bounds, hashed to
// name the recorded fixture file for byte-exact replay.
inline std::string layout_request_key(const SceneSpec& scene)
{
    nlohmann::json q; // alphabetically ordered dump = canonical form
    q["bounds"] = {scene.bound_w, scene.bound_d, scene.bound_h};
    q["prompt"] = scene.global_prompt;
    q["concepts"] = nlohmann::json::array();
    for (const auto& c : scene.concepts)
        q["concepts"].push_back({{"class", c.class_prompt}, {"id", c.id}});
    return to_hex(fnv1a64(q.dump()));
}

// Parses a controller response body: {"boxes": [{concept_id, x,y,z,w,d,h}]}.
// Structural problems and non-positive dimensions are schema violations.
inline std::vector<Bbox3D> parse_layout_response(const std::string& body)
{
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw LayoutSchemaError(std::string("layout response: ") + e.what());
    }
    if (!root.is_object() || !root.contains("boxes") || !root["boxes"].is_array())
        throw LayoutSchemaError("layout response: expected object with a 'boxes' array");
    std::vector<Bbox3D> boxes;
    for (const auto& bj : root["boxes"]) {
        Bbox3D b;
        try {
            b.concept_id = bj.at("concept_id").get<int>();
            b.x = bj.at("x").get<double>();
            b.y = bj.at("y").get<double>();
            b.z = bj.at("z").get<double>();
            b.w = bj.at("w").get<double>();
            b.d = bj.at("d").get<double>();
            b.h = bj.at("h").get<double>();
        } catch (const nlohmann::json::exception&) {
            throw LayoutSchemaError("layout response: box entry missing or mistyped field");
        }
        if (!(b.w > 0 && b.d > 0 && b.h > 0))
            throw LayoutSchemaError("layout response: box for concept " +
                                    std::to_string(b.concept_id) + " has non-positive dimensions");
        boxes.push_back(b);
    }
    return boxes;
}

inline std::string serialize_layout(const LayoutPlan& plan)
{
    nlohmann::ordered_json root;
    root["provenance"] = provenance_name(plan.provenance);
    root["boxes"] = nlohmann::ordered_json::array();
    for (const auto& b : plan.boxes)
        root["boxes"].push_back({{"concept_id", b.concept_id},
                                 {"x", b.x},
                                 {"y", b.y},
                                 {"z", b.z},
                                 {"w", b.w},
                                 {"d", b.d},
                                 {"h", b.h}});
    return root.dump(2) + "\n";
}

inline LayoutPlan parse_layout(const std::string& text)
{
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("layout file: ") + e.what());
    }
    LayoutPlan plan;
    const std::string prov = root.value("provenance", "fallback");
    if (prov == "llm")
        plan.provenance = LayoutProvenance::llm;
    else if (prov == "fixture")
        plan.provenance = LayoutProvenance::fixture;
    else if (prov == "fallback")
        plan.provenance = LayoutProvenance::fallback;
    else
        throw ParseError("layout file: unknown provenance '" + prov + "'");
    plan.boxes = parse_layout_response(text);
    return plan;
}

class LayoutController {
public:
    virtual ~LayoutController() = default;
    virtual LayoutProvenance provenance() const = 0;
    // Raw box proposal; may throw TransportError / LayoutSchemaError.
    virtual std::vector<Bbox3D> propose(const SceneSpec& scene) = 0;
};

class FallbackLayoutController final : public LayoutController {
public:
    LayoutProvenance provenance() const override { return LayoutProvenance::fallback; }
    std::vector<Bbox3D> propose(const SceneSpec& scene) override
    {
        return fallback_layout(scene).boxes;
    }
};

// Replays responses recorded under <dir>/<request-key>.json.
class FixtureLayoutController final : public LayoutController {
public:
    explicit FixtureLayoutController(std::filesystem::path dir) : dir_(std::move(dir)) {}

    LayoutProvenance provenance() const override { return LayoutProvenance::fixture; }

    std::filesystem::path fixture_path(const SceneSpec& scene) const
    {
        return dir_ / (layout_request_key(scene) + ".json");
    }

    std::vector<Bbox3D> propose(const SceneSpec& scene) override
    {
        const auto path = fixture_path(scene);
        std::ifstream in(path, std::ios::binary);
        if (!in.good())
            throw TransportError("layout fixture missing: " + path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_layout_response(ss.str());
    }

private:
    std::filesystem::path dir_;
};

struct LayoutOptions {
    bool fallback_on_error = true; // substitute fallback_layout when the controller fails
};

namespace detail {

inline Bbox3D clamp_into_bounds(Bbox3D b, const Vec3& bounds)
{
    b.w = std::min(b.w, bounds.x());
    b.d = std::min(b.d, bounds.y());
    b.h = std::min(b.h, bounds.z());
    b.x = std::clamp(b.x, 0.0, bounds.x() - b.w);
    b.y = std::clamp(b.y, 0.0, bounds.y() - b.d);
    b.z = std::clamp(b.z, 0.0, bounds.z() - b.h);
    return b;
}

} // namespace detail

// Runs the controller, validates, and applies at most one repair round
// (clamping into bounds). Controller or validation failure falls back to the
// deterministic layout when the options allow it.
inline LayoutPlan generate_layout(const SceneSpec& scene, LayoutController& controller,
                                  const LayoutOptions& opts = {})
{
    const int k = scene.concept_count();
    const bool may_fall_back =
        opts.fallback_on_error && controller.provenance() != LayoutProvenance::fallback;

    LayoutPlan plan;
    plan.provenance = controller.provenance();
    try {
        plan.boxes = controller.propose(scene);
    } catch (const LayoutSchemaError&) {
        if (may_fall_back) return fallback_layout(scene);
        throw;
    } catch (const TransportError&) {
        if (may_fall_back) return fallback_layout(scene);
        throw;
    }

    ValidationReport rep = validate_layout(plan, scene.bounds(), k);
    if (!rep.valid()) {
        for (auto& b : plan.boxes) b = detail::clamp_into_bounds(b, scene.bounds());
        rep = validate_layout(plan, scene.bounds(), k);
        if (!rep.valid()) {
            if (may_fall_back) return fallback_layout(scene);
            std::string msg = "layout invalid after repair:";
            for (const auto& e : rep.errors) msg += "\n  " + e;
            throw ValidationError(msg);
        }
    }
    return plan;
}

} // namespace csplat
