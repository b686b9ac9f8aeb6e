#pragma once

// Scene specification: the versioned JSON file that names the concepts,
// their prompts, the world bounds, and the refinement settings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptsplat/common.hpp"

namespace csplat {

inline constexpr int kMaxConcepts = 8;

struct ConceptSpec {
    int id = 0;
    std::string class_prompt;   // generic class, e.g. "a dog"
    std::string concept_prompt; // decomposed prompt carrying the concept token
    std::string shape_prompt;   // drives point-cloud generation
    std::uint64_t adapter_seed = 0;

    bool operator==(const ConceptSpec&) const = default;
};

enum class WeightKind { constant, one_minus_alpha_bar };

struct LearningRates {
    double mu = 2e-4; // scaled by scene extent at step time
    double log_scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double color = 1e-2;

    bool operator==(const LearningRates&) const = default;
};

struct GuidanceConfig {
    int timesteps = 100;  // T
    int delta_t = 20;     // inversion interval, in schedule steps
    int substeps = 10;    // chain length covering delta_t
    int t_min = 2;        // sampled timestep range during optimization
    int t_max = 50;
    int iters = 500;
    int resolution = 64;
    double tau = 0.5;     // mask threshold
    double lambda = 1.0;  // adapter scale
    WeightKind weight_kind = WeightKind::constant;
    double weight_value = 1.0;
    LearningRates lr;
    double momentum = 0.9;
    double prune_opacity = 0.005;
    int prune_interval = 100;

    bool operator==(const GuidanceConfig&) const = default;

    void validate() const
    {
        if (timesteps < 2) throw ValidationError("stage2.timesteps: need at least 2");
        if (delta_t < 1 || delta_t > timesteps)
            throw ValidationError("stage2.delta_t: must lie in [1, timesteps]");
        if (substeps < 1 || delta_t % substeps != 0)
            throw ValidationError("stage2.substeps: must divide delta_t");
        if (t_min < 1 || t_min > t_max || t_max > timesteps)
            throw ValidationError("stage2: need 1 <= t_min <= t_max <= timesteps");
        if (iters < 0) throw ValidationError("stage2.iters: must be non-negative");
        if (resolution < 16 || resolution % 16 != 0)
            throw ValidationError("stage2.resolution: must be a positive multiple of 16");
        if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("stage2.tau: must lie in (0, 1)");
        if (lambda < 0.0) throw ValidationError("stage2.lambda: must be non-negative");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ValidationError("stage2.momentum: must lie in [0, 1)");
        if (prune_interval < 1) throw ValidationError("stage2.prune_interval: must be positive");
    }
};

struct SceneSpec {
    int version = 1;
    std::string global_prompt; // also serves as the background prompt
    std::vector<ConceptSpec> concepts;
    double bound_w = 1.0, bound_d = 1.0, bound_h = 1.0;
    std::uint64_t seed = 0;
    GuidanceConfig stage2;

    bool operator==(const SceneSpec&) const = default;

    int concept_count() const { return static_cast<int>(concepts.size()); }
    Vec3 bounds() const { return Vec3(bound_w, bound_d, bound_h); }

    void validate() const
    {
        if (version != 1) throw ValidationError("version: only version 1 is supported");
        if (global_prompt.empty()) throw ValidationError("global_prompt: must be non-empty");
        const int k = concept_count();
        if (k < 1) throw ValidationError("concepts: need at least one concept");
        if (k > kMaxConcepts) throw ValidationError("concepts: at most 8 concepts supported");
        std::vector<bool> seen(static_cast<size_t>(k), false);
        for (const auto& c : concepts) {
            if (c.id < 0 || c.id >= k)
                throw ValidationError("concepts: ids must be contiguous 0..k-1 (got id " +
                                      std::to_string(c.id) + " with k=" + std::to_string(k) + ")");
            if (seen[static_cast<size_t>(c.id)])
                throw ValidationError("concepts: duplicate concept id " + std::to_string(c.id));
            seen[static_cast<size_t>(c.id)] = true;
            if (c.concept_prompt.empty())
                throw ValidationError("concepts[" + std::to_string(c.id) +
                                      "].concept_prompt: must be non-empty");
        }
        if (!(bound_w > 0.0 && bound_d > 0.0 && bound_h > 0.0))
            throw ValidationError("bounds: w, d, h must all be positive");
        stage2.validate();
    }
};

namespace detail {

using json = nlohmann::ordered_json;

inline const json& require(const json& obj, const char* key, const std::string& path)
{
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(path + "." + key + ": missing required field");
    return *it;
}

template <typename T>
inline T as(const json& j, const std::string& path)
{
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ParseError(path + ": unexpected value type");
    }
}

template <typename T>
inline void opt(const json& obj, const char* key, T& out, const std::string& path)
{
    auto it = obj.find(key);
    if (it != obj.end()) out = as<T>(*it, path + "." + key);
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> known,
                           const std::string& path)
{
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) { ok = true; break; }
        if (!ok) throw ParseError(path + "." + it.key() + ": unknown field");
    }
}

inline WeightKind parse_weight_kind(const std::string& s, const std::string& path)
{
    if (s == "constant") return WeightKind::constant;
    if (s == "one_minus_alpha_bar") return WeightKind::one_minus_alpha_bar;
    throw ParseError(path + ": unknown weight kind '" + s + "'");
}

inline const char* weight_kind_name(WeightKind k)
{
    return k == WeightKind::constant ? "constant" : "one_minus_alpha_bar";
}

} // namespace detail

inline SceneSpec parse_scene_spec(const std::string& text)
{
    using detail::as;
    using detail::opt;
    using detail::require;
    using json = detail::json;

    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("scene file: ") + e.what());
    }
    if (!root.is_object()) throw ParseError("scene file: top level must be an object");
    detail::reject_unknown(root, {"version", "global_prompt", "bounds", "seed", "concepts", "stage2"},
                           "scene");

    SceneSpec s;
    s.version = as<int>(require(root, "version", "scene"), "scene.version");
    s.global_prompt = as<std::string>(require(root, "global_prompt", "scene"), "scene.global_prompt");
    opt(root, "seed", s.seed, "scene");

    if (auto it = root.find("bounds"); it != root.end()) {
        if (!it->is_object()) throw ParseError("scene.bounds: must be an object {w, d, h}");
        detail::reject_unknown(*it, {"w", "d", "h"}, "scene.bounds");
        opt(*it, "w", s.bound_w, "scene.bounds");
        opt(*it, "d", s.bound_d, "scene.bounds");
        opt(*it, "h", s.bound_h, "scene.bounds");
    }

    const json& carr = require(root, "concepts", "scene");
    if (!carr.is_array()) throw ParseError("scene.concepts: must be an array");
    int idx = 0;
    for (const auto& cj : carr) {
        const std::string path = "scene.concepts[" + std::to_string(idx) + "]";
        if (!cj.is_object()) throw ParseError(path + ": must be an object");
        detail::reject_unknown(cj, {"id", "class_prompt", "concept_prompt", "shape_prompt", "adapter_seed"},
                               path);
        ConceptSpec c;
        c.id = as<int>(require(cj, "id", path), path + ".id");
        c.class_prompt = as<std::string>(require(cj, "class_prompt", path), path + ".class_prompt");
        c.concept_prompt = as<std::string>(require(cj, "concept_prompt", path), path + ".concept_prompt");
        c.shape_prompt = c.class_prompt;
        opt(cj, "shape_prompt", c.shape_prompt, path);
        c.adapter_seed = static_cast<std::uint64_t>(c.id);
        opt(cj, "adapter_seed", c.adapter_seed, path);
        s.concepts.push_back(std::move(c));
        ++idx;
    }

    if (auto it = root.find("stage2"); it != root.end()) {
        const std::string path = "scene.stage2";
        if (!it->is_object()) throw ParseError(path + ": must be an object");
        detail::reject_unknown(*it,
                               {"timesteps", "delta_t", "substeps", "t_min", "t_max", "iters",
                                "resolution", "tau", "lambda", "weight_kind", "weight_value",
                                "lr", "momentum", "prune_opacity", "prune_interval"},
                               path);
        GuidanceConfig& g = s.stage2;
        opt(*it, "timesteps", g.timesteps, path);
        // Interval and sampling range track the horizon unless given explicitly.
        g.delta_t = std::max(1, static_cast<int>(std::llround(0.2 * g.timesteps)));
        g.t_min = std::max(1, static_cast<int>(std::llround(0.02 * g.timesteps)));
        g.t_max = std::max(g.t_min, static_cast<int>(std::llround(0.5 * g.timesteps)));
        opt(*it, "delta_t", g.delta_t, path);
        opt(*it, "substeps", g.substeps, path);
        opt(*it, "t_min", g.t_min, path);
        opt(*it, "t_max", g.t_max, path);
        opt(*it, "iters", g.iters, path);
        opt(*it, "resolution", g.resolution, path);
        opt(*it, "tau", g.tau, path);
        opt(*it, "lambda", g.lambda, path);
        if (auto wk = it->find("weight_kind"); wk != it->end())
            g.weight_kind = detail::parse_weight_kind(as<std::string>(*wk, path + ".weight_kind"),
                                                      path + ".weight_kind");
        opt(*it, "weight_value", g.weight_value, path);
        if (auto lrj = it->find("lr"); lrj != it->end()) {
            detail::reject_unknown(*lrj, {"mu", "log_scale", "rotation", "opacity", "color"},
                                   path + ".lr");
            opt(*lrj, "mu", g.lr.mu, path + ".lr");
            opt(*lrj, "log_scale", g.lr.log_scale, path + ".lr");
            opt(*lrj, "rotation", g.lr.rotation, path + ".lr");
            opt(*lrj, "opacity", g.lr.opacity, path + ".lr");
            opt(*lrj, "color", g.lr.color, path + ".lr");
        }
        opt(*it, "momentum", g.momentum, path);
        opt(*it, "prune_opacity", g.prune_opacity, path);
        opt(*it, "prune_interval", g.prune_interval, path);
    }

    s.validate();
    std::sort(s.concepts.begin(), s.concepts.end(),
              [](const ConceptSpec& a, const ConceptSpec& b) { return a.id < b.id; });
    return s;
}

inline std::string serialize_scene_spec(const SceneSpec& s)
{
    using json = detail::json;
    json root;
    root["version"] = s.version;
    root["global_prompt"] = s.global_prompt;
    root["bounds"] = {{"w", s.bound_w}, {"d", s.bound_d}, {"h", s.bound_h}};
    root["seed"] = s.seed;
    root["concepts"] = json::array();
    for (const auto& c : s.concepts) {
        root["concepts"].push_back({{"id", c.id},
                                    {"class_prompt", c.class_prompt},
                                    {"concept_prompt", c.concept_prompt},
                                    {"shape_prompt", c.shape_prompt},
                                    {"adapter_seed", c.adapter_seed}});
    }
    const GuidanceConfig& g = s.stage2;
    root["stage2"] = {{"timesteps", g.timesteps},
                      {"delta_t", g.delta_t},
                      {"substeps", g.substeps},
                      {"t_min", g.t_min},
                      {"t_max", g.t_max},
                      {"iters", g.iters},
                      {"resolution", g.resolution},
                      {"tau", g.tau},
                      {"lambda", g.lambda},
                      {"weight_kind", detail::weight_kind_name(g.weight_kind)},
                      {"weight_value", g.weight_value},
                      {"lr",
                       {{"mu", g.lr.mu},
                        {"log_scale", g.lr.log_scale},
                        {"rotation", g.lr.rotation},
                        {"opacity", g.lr.opacity},
                        {"color", g.lr.color}}},
                      {"momentum", g.momentum},
                      {"prune_opacity", g.prune_opacity},
                      {"prune_interval", g.prune_interval}};
    return root.dump(2) + "\n";
}

} // namespace csplat
