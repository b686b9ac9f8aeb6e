#pragma once

// HTTP layout controller: posts the scene prompt plus in-context examples to
// an LLM-style endpoint and parses its structured box response. Kept out of
// layout.hpp so translation units that never talk to a server skip httplib.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

// Eigen must be fully parsed before httplib drags in <resolv.h>, whose _res
// macro rewrites ordinary parameter names inside later-included headers.
#include "conceptsplat/layout.hpp"

#include <httplib.h>
#include <json.hpp>

#ifdef _res
#undef _res // glibc resolver-state compat macro; we never touch the res_* API
#endif

namespace csplat {

inline constexpr const char* kLayoutInstruction =
    "Given a scene prompt and a list of concepts, output a JSON object "
    "{\"boxes\": [{\"concept_id\", \"x\", \"y\", \"z\", \"w\", \"d\", \"h\"}]} "
    "with one axis-aligned box per concept, all boxes inside the given bounds, "
    "z up, origin at the lowest corner.";

// Loads every .json file in `dir` (sorted by filename) as one in-context
// example block.
inline std::vector<nlohmann::ordered_json> load_in_context_examples(const std::filesystem::path& dir)
{
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(dir))
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<nlohmann::ordered_json> blocks;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in.good()) throw IoError("cannot read in-context example: " + f.string());
        try {
            blocks.push_back(nlohmann::ordered_json::parse(in));
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("in-context example " + f.filename().string() + ": " + e.what());
        }
    }
    return blocks;
}

inline std::string build_layout_request(const SceneSpec& scene,
                                        const std::vector<nlohmann::ordered_json>& examples)
{
    nlohmann::ordered_json req;
    req["instruction"] = kLayoutInstruction;
    req["examples"] = examples;
    req["prompt"] = scene.global_prompt;
    req["concepts"] = nlohmann::ordered_json::array();
    for (const auto& c : scene.concepts)
        req["concepts"].push_back({{"id", c.id}, {"class_prompt", c.class_prompt}});
    req["bounds"] = {{"w", scene.bound_w}, {"d", scene.bound_d}, {"h", scene.bound_h}};
    return req.dump();
}

class HttpLayoutController final : public LayoutController {
public:
    // `base_url` like "http://host:port". The API key is read from the named
    // environment variable if one is given. A non-empty `record_dir` stores
    // each raw response under the request key for later fixture replay.
    HttpLayoutController(std::string base_url, std::string api_key_env = "",
                         std::filesystem::path in_context_dir = {},
                         std::filesystem::path record_dir = {})
        : base_url_(std::move(base_url)), api_key_env_(std::move(api_key_env)),
          record_dir_(std::move(record_dir))
    {
        if (!in_context_dir.empty()) examples_ = load_in_context_examples(in_context_dir);
    }

    LayoutProvenance provenance() const override { return LayoutProvenance::llm; }

    std::vector<Bbox3D> propose(const SceneSpec& scene) override
    {
        httplib::Client client(base_url_);
        client.set_connection_timeout(5, 0);
        client.set_read_timeout(30, 0);
        httplib::Headers headers;
        if (!api_key_env_.empty()) {
            if (const char* key = std::getenv(api_key_env_.c_str()))
                headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        const std::string body = build_layout_request(scene, examples_);
        auto res = client.Post("/layout", headers, body, "application/json");
        if (!res)
            throw TransportError("layout endpoint unreachable: " + base_url_);
        if (res->status != 200)
            throw TransportError("layout endpoint returned status " + std::to_string(res->status));
        if (!record_dir_.empty()) {
            std::filesystem::create_directories(record_dir_);
            const auto path = record_dir_ / (layout_request_key(scene) + ".json");
            std::ofstream out(path, std::ios::binary);
            if (!out.good()) throw IoError("cannot record fixture: " + path.string());
            out << res->body;
        }
        return parse_layout_response(res->body);
    }

private:
    std::string base_url_;
    std::string api_key_env_;
    std::filesystem::path record_dir_;
    std::vector<nlohmann::ordered_json> examples_;
};

} // namespace csplat
