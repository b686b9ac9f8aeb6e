#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <thread>

#include "conceptsplat/layout.hpp"
#include "conceptsplat/layout_http.hpp"

using namespace csplat;
namespace fs = std::filesystem;

namespace {

SceneSpec make_scene(int k, Vec3 bounds = Vec3(1, 1, 1))
{
    SceneSpec s;
    s.global_prompt = "test scene with " + std::to_string(k) + " concepts";
    s.bound_w = bounds.x();
    s.bound_d = bounds.y();
    s.bound_h = bounds.z();
    for (int i = 0; i < k; ++i) {
        ConceptSpec c;
        c.id = i;
        c.class_prompt = "thing " + std::to_string(i);
        c.concept_prompt = "a thing " + std::to_string(i);
        c.shape_prompt = "sphere";
        s.concepts.push_back(c);
    }
    s.validate();
    return s;
}

std::string box_json(int id, double x, double y, double z, double w, double d, double h)
{
    std::ostringstream ss;
    ss << R"({"concept_id": )" << id << R"(, "x": )" << x << R"(, "y": )" << y << R"(, "z": )"
       << z << R"(, "w": )" << w << R"(, "d": )" << d << R"(, "h": )" << h << "}";
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir()
    {
        path = fs::temp_directory_path() /
               ("csplat_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("placement transform matches hand-evaluated cases")
{
    const Vec3 bounds(1, 1, 1);

    SECTION("width binds")
    {
        const Bbox3D box{0.2, 0.2, 0.0, 0.4, 0.4, 0.6, 0};
        const auto tr = bbox_transform(box, bounds);
        CHECK(tr.scale == Catch::Approx(0.4).epsilon(1e-12));
        CHECK(tr.translation.x() == Catch::Approx(0.4).epsilon(1e-12));
        CHECK(tr.translation.y() == Catch::Approx(0.4).epsilon(1e-12));
        CHECK(tr.translation.z() == Catch::Approx(0.3).epsilon(1e-12));
    }
    SECTION("height binds")
    {
        const Bbox3D box{0.0, 0.0, 0.0, 0.6, 0.2, 0.3, 0};
        const auto tr = bbox_transform(box, bounds);
        CHECK(tr.scale == Catch::Approx(0.3).epsilon(1e-12));
        CHECK(tr.translation.x() == Catch::Approx(0.3).epsilon(1e-12));
        CHECK(tr.translation.y() == Catch::Approx(0.1).epsilon(1e-12));
        CHECK(tr.translation.z() == Catch::Approx(0.15).epsilon(1e-12));
    }
    SECTION("full-bounds box is the identity placement")
    {
        const Bbox3D box{0, 0, 0, 1, 1, 1, 0};
        const auto tr = bbox_transform(box, bounds);
        CHECK(tr.scale == 1.0);
        CHECK(tr.translation == Vec3(0.5, 0.5, 0.5));
    }
}

TEST_CASE("placement transform is scale-equivariant")
{
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Bbox3D box;
        box.w = rng.uniform(0.1, 1.0);
        box.d = rng.uniform(0.1, 1.0);
        box.h = rng.uniform(0.1, 1.0);
        box.x = rng.uniform(0.0, 2.0);
        box.y = rng.uniform(0.0, 2.0);
        box.z = rng.uniform(0.0, 2.0);
        const Vec3 bounds(rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0));
        const double gamma = rng.uniform(0.3, 4.0);

        Bbox3D scaled = box;
        scaled.x *= gamma; scaled.y *= gamma; scaled.z *= gamma;
        scaled.w *= gamma; scaled.d *= gamma; scaled.h *= gamma;

        const auto tr = bbox_transform(box, bounds);
        const auto tr2 = bbox_transform(scaled, gamma * bounds);
        CHECK(tr2.scale == Catch::Approx(tr.scale).epsilon(1e-12));
        CHECK((tr2.translation - gamma * tr.translation).norm() < 1e-12 * gamma);
    }
}

TEST_CASE("fallback layout follows the documented row rule")
{
    SECTION("single concept gets the centered half-size box")
    {
        const auto plan = fallback_layout(make_scene(1));
        REQUIRE(plan.boxes.size() == 1);
        const auto& b = plan.boxes[0];
        CHECK(b.x == Catch::Approx(0.25).margin(1e-12));
        CHECK(b.y == Catch::Approx(0.25).margin(1e-12));
        CHECK(b.z == 0.0);
        CHECK(b.w == Catch::Approx(0.5).margin(1e-12));
        CHECK(b.d == Catch::Approx(0.5).margin(1e-12));
        CHECK(b.h == Catch::Approx(0.5).margin(1e-12));
    }
    SECTION("two concepts split the row")
    {
        const auto plan = fallback_layout(make_scene(2));
        REQUIRE(plan.boxes.size() == 2);
        CHECK(plan.boxes[0].x == Catch::Approx(0.025).margin(1e-12));
        CHECK(plan.boxes[1].x == Catch::Approx(0.525).margin(1e-12));
        CHECK(plan.boxes[0].w == Catch::Approx(0.45).margin(1e-12));
        CHECK(plan.boxes[1].w == Catch::Approx(0.45).margin(1e-12));
    }
    SECTION("deterministic and always valid")
    {
        Rng rng(3);
        for (int k = 1; k <= 8; ++k) {
            const Vec3 bounds(rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0));
            const SceneSpec scene = make_scene(k, bounds);
            const auto a = fallback_layout(scene);
            const auto b = fallback_layout(scene);
            CHECK(a.boxes == b.boxes);
            CHECK(validate_layout(a, bounds, k).valid());
            CHECK(validate_layout(a, bounds, k).warnings.empty());
        }
    }
}

TEST_CASE("layout validation reports the documented failures")
{
    const Vec3 bounds(1, 1, 1);

    SECTION("containment violation")
    {
        LayoutPlan plan;
        plan.boxes.push_back({0.4, 0.1, 0.0, 0.8, 0.5, 0.5, 0}); // x+w = 1.2
        const auto rep = validate_layout(plan, bounds, 1);
        REQUIRE_FALSE(rep.valid());
        CHECK_THAT(rep.errors[0], Catch::Matchers::ContainsSubstring("x-extent"));
    }
    SECTION("overlap is a warning, not an error")
    {
        LayoutPlan plan;
        plan.boxes.push_back({0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0});
        plan.boxes.push_back({0.2, 0.0, 0.0, 0.5, 0.5, 0.5, 1}); // 30% x-overlap
        const auto rep = validate_layout(plan, bounds, 2);
        CHECK(rep.valid());
        REQUIRE(rep.warnings.size() == 1);
        CHECK_THAT(rep.warnings[0], Catch::Matchers::ContainsSubstring("overlap"));
        // interval intersection: 0.3 * 0.5 * 0.5
        CHECK_THAT(rep.warnings[0], Catch::Matchers::ContainsSubstring("0.075"));
    }
    SECTION("missing and duplicate ids")
    {
        LayoutPlan plan;
        plan.boxes.push_back({0.0, 0.0, 0.0, 0.4, 0.4, 0.4, 0});
        plan.boxes.push_back({0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0});
        const auto rep = validate_layout(plan, bounds, 2);
        REQUIRE_FALSE(rep.valid());
        bool saw_dup = false, saw_missing = false;
        for (const auto& e : rep.errors) {
            if (e.find("duplicate") != std::string::npos) saw_dup = true;
            if (e.find("no box") != std::string::npos) saw_missing = true;
        }
        CHECK(saw_dup);
        CHECK(saw_missing);
    }
    SECTION("non-positive dimensions")
    {
        LayoutPlan plan;
        plan.boxes.push_back({0.0, 0.0, 0.0, -0.1, 0.4, 0.4, 0});
        CHECK_FALSE(validate_layout(plan, bounds, 1).valid());
    }
}

TEST_CASE("layout response parsing rejects schema violations")
{
    CHECK_THROWS_AS(parse_layout_response("not json"), LayoutSchemaError);
    CHECK_THROWS_AS(parse_layout_response(R"({"no_boxes": []})"), LayoutSchemaError);
    CHECK_THROWS_AS(parse_layout_response(R"({"boxes": [{"concept_id": 0, "x": 0}]})"),
                    LayoutSchemaError);
    // negative width is a schema violation at parse time
    const std::string neg = R"({"boxes": [)" + box_json(0, 0.1, 0.1, 0.0, -0.1, 0.3, 0.3) + "]}";
    CHECK_THROWS_AS(parse_layout_response(neg), LayoutSchemaError);

    const std::string ok = R"({"boxes": [)" + box_json(0, 0.1, 0.2, 0.0, 0.3, 0.3, 0.4) + "]}";
    const auto boxes = parse_layout_response(ok);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].concept_id == 0);
    CHECK(boxes[0].h == 0.4);
}

TEST_CASE("layout plan serialization round-trips")
{
    const auto plan = fallback_layout(make_scene(3, Vec3(2, 1, 1.5)));
    const auto back = parse_layout(serialize_layout(plan));
    CHECK(back.provenance == plan.provenance);
    REQUIRE(back.boxes.size() == plan.boxes.size());
    for (size_t i = 0; i < plan.boxes.size(); ++i) CHECK(back.boxes[i] == plan.boxes[i]);
}

TEST_CASE("fixture controller replays recorded responses byte-exactly")
{
    TempDir tmp;
    const SceneSpec scene = make_scene(2);
    const std::string key = layout_request_key(scene);

    SECTION("missing fixture is a transport error without fallback")
    {
        FixtureLayoutController ctrl(tmp.path);
        CHECK_THROWS_AS(generate_layout(scene, ctrl, {.fallback_on_error = false}), TransportError);
    }
    SECTION("missing fixture falls back when allowed")
    {
        FixtureLayoutController ctrl(tmp.path);
        const auto plan = generate_layout(scene, ctrl, {.fallback_on_error = true});
        CHECK(plan.provenance == LayoutProvenance::fallback);
        CHECK(plan.boxes == fallback_layout(scene).boxes);
    }
    SECTION("recorded response is replayed")
    {
        const std::string body = R"({"boxes": [)" + box_json(0, 0.1, 0.1, 0.0, 0.3, 0.3, 0.5) +
                                 ", " + box_json(1, 0.6, 0.2, 0.0, 0.3, 0.3, 0.4) + "]}";
        std::ofstream(tmp.path / (key + ".json"), std::ios::binary) << body;

        FixtureLayoutController ctrl(tmp.path);
        const auto plan = generate_layout(scene, ctrl);
        CHECK(plan.provenance == LayoutProvenance::fixture);
        REQUIRE(plan.boxes.size() == 2);
        CHECK(plan.boxes[0].x == 0.1);
        CHECK(plan.boxes[1].x == 0.6);

        const auto again = generate_layout(scene, ctrl);
        CHECK(again.boxes == plan.boxes); // determinism
    }
    SECTION("key depends on prompt and bounds")
    {
        SceneSpec other = scene;
        other.global_prompt += " changed";
        CHECK(layout_request_key(other) != key);
        SceneSpec wider = scene;
        wider.bound_w = 2.0;
        CHECK(layout_request_key(wider) != key);
    }
}

TEST_CASE("committed fixture covers the two-concept example scene")
{
    std::ifstream in(std::string(CSPLAT_SCENES_DIR) + "/two_concepts.json", std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    const SceneSpec scene = parse_scene_spec(ss.str());

    FixtureLayoutController ctrl(fs::path(CSPLAT_FIXTURES_DIR) / "layout");
    const auto plan = generate_layout(scene, ctrl, {.fallback_on_error = false});
    CHECK(plan.provenance == LayoutProvenance::fixture);
    REQUIRE(plan.boxes.size() == 2);
    CHECK(validate_layout(plan, scene.bounds(), 2).valid());
    const auto again = generate_layout(scene, ctrl, {.fallback_on_error = false});
    CHECK(again.boxes == plan.boxes);
}

TEST_CASE("out-of-bounds boxes get one clamping repair round")
{
    TempDir tmp;
    const SceneSpec scene = make_scene(1);
    const std::string key = layout_request_key(scene);

    SECTION("repairable: clamped into bounds")
    {
        // x+w = 1.3 > 1; clamp shifts x to 0.5
        const std::string body = R"({"boxes": [)" + box_json(0, 0.8, 0.1, 0.0, 0.5, 0.5, 0.5) + "]}";
        std::ofstream(tmp.path / (key + ".json"), std::ios::binary) << body;
        FixtureLayoutController ctrl(tmp.path);
        const auto plan = generate_layout(scene, ctrl, {.fallback_on_error = false});
        CHECK(plan.provenance == LayoutProvenance::fixture);
        CHECK(plan.boxes[0].x == Catch::Approx(0.5));
        CHECK(validate_layout(plan, scene.bounds(), 1).valid());
    }
    SECTION("unrepairable: wrong concept ids")
    {
        const std::string body = R"({"boxes": [)" + box_json(3, 0.1, 0.1, 0.0, 0.3, 0.3, 0.3) + "]}";
        std::ofstream(tmp.path / (key + ".json"), std::ios::binary) << body;
        FixtureLayoutController ctrl(tmp.path);
        CHECK_THROWS_AS(generate_layout(scene, ctrl, {.fallback_on_error = false}), ValidationError);
        const auto plan = generate_layout(scene, ctrl, {.fallback_on_error = true});
        CHECK(plan.provenance == LayoutProvenance::fallback);
    }
}

TEST_CASE("in-context example blocks ship with the repo")
{
    const auto blocks = load_in_context_examples(fs::path(CSPLAT_FIXTURES_DIR) / "layout" / "in_context");
    REQUIRE(blocks.size() == 3);
    std::vector<std::string> names;
    for (const auto& b : blocks) names.push_back(b.at("name").get<std::string>());
    CHECK(std::find(names.begin(), names.end(), "multiple_subjects") != names.end());
    CHECK(std::find(names.begin(), names.end(), "property_change") != names.end());
    CHECK(std::find(names.begin(), names.end(), "interaction") != names.end());
    for (const auto& b : blocks) {
        REQUIRE(b.contains("boxes"));
        REQUIRE(b.at("concepts").size() == b.at("boxes").size());
    }

    const SceneSpec scene = make_scene(2);
    const std::string req = build_layout_request(scene, blocks);
    const auto parsed = nlohmann::json::parse(req);
    CHECK(parsed.at("examples").size() == 3);
    CHECK_THAT(parsed.at("instruction").get<std::string>(),
               Catch::Matchers::ContainsSubstring("boxes"));
}

TEST_CASE("http controller round-trips through a live endpoint")
{
    httplib::Server server;
    std::string last_request_body;
    server.Post("/layout", [&](const httplib::Request& req, httplib::Response& res) {
        last_request_body = req.body;
        const auto j = nlohmann::json::parse(req.body);
        const auto& concepts = j.at("concepts");
        const int k = static_cast<int>(concepts.size());
        nlohmann::json out;
        out["boxes"] = nlohmann::json::array();
        for (int i = 0; i < k; ++i) {
            const double slot = 1.0 / k;
            out["boxes"].push_back({{"concept_id", concepts[i].at("id").get<int>()},
                                    {"x", slot * i + 0.05 * slot},
                                    {"y", 0.25},
                                    {"z", 0.0},
                                    {"w", 0.9 * slot},
                                    {"d", 0.5},
                                    {"h", 0.6}});
        }
        res.set_content(out.dump(), "application/json");
    });

    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    const std::string base = "http://127.0.0.1:" + std::to_string(port);
    const SceneSpec scene = make_scene(2);

    SECTION("proposes and parses boxes")
    {
        HttpLayoutController ctrl(base, "", fs::path(CSPLAT_FIXTURES_DIR) / "layout" / "in_context");
        const auto plan = generate_layout(scene, ctrl, {.fallback_on_error = false});
        CHECK(plan.provenance == LayoutProvenance::llm);
        REQUIRE(plan.boxes.size() == 2);
        CHECK(plan.boxes[0].concept_id == 0);
        CHECK(plan.boxes[1].x == Catch::Approx(0.525));
        // the request carried instruction + examples + scene payload
        const auto req = nlohmann::json::parse(last_request_body);
        CHECK(req.contains("instruction"));
        CHECK(req.at("examples").size() == 3);
        CHECK(req.at("prompt").get<std::string>() == scene.global_prompt);
    }
    SECTION("recorded response replays byte-exactly through the fixture controller")
    {
        TempDir tmp;
        HttpLayoutController ctrl(base, "", fs::path(CSPLAT_FIXTURES_DIR) / "layout" / "in_context",
                                  tmp.path);
        const auto live = generate_layout(scene, ctrl, {.fallback_on_error = false});

        FixtureLayoutController replay(tmp.path);
        const auto replayed = generate_layout(scene, replay, {.fallback_on_error = false});
        CHECK(replayed.provenance == LayoutProvenance::fixture);
        CHECK(replayed.boxes == live.boxes);
    }
    SECTION("unreachable endpoint raises transport error or falls back")
    {
        HttpLayoutController bad("http://127.0.0.1:1"); // nothing listens there
        CHECK_THROWS_AS(generate_layout(scene, bad, {.fallback_on_error = false}), TransportError);
        const auto plan = generate_layout(scene, bad, {.fallback_on_error = true});
        CHECK(plan.provenance == LayoutProvenance::fallback);
    }

    server.stop();
    server_thread.join();
}
