// Command-line front end: `generate` runs the two-stage pipeline on a scene
// file, `render` turns a saved Gaussian cloud into turntable images, and
// `validate` checks a scene file without running anything.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include <conceptsplat/layout_http.hpp>
#include <conceptsplat/pipeline.hpp>
#include <conceptsplat/shape_http.hpp>

namespace fs = std::filesystem;
using namespace csplat;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    if (!f.good()) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes)
{
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string());
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f.good()) throw IoError("cannot write " + p.string());
}

struct GenerateArgs {
    std::string scene_path;
    std::string out_dir;
    std::string layout = "fallback";     // fallback | fixture | llm
    std::string init = "layout";         // layout | sphere
    std::string shape_source = "procedural"; // procedural | file:<ply> | http:<url>
    std::string predictor = "target";    // target | affine
    std::string fixtures_dir;
    std::string llm_url;
    std::string llm_key_env;
    std::string context_dir;
    std::string record_dir;
    bool no_layout_fallback = false;
    int shape_points = 1024;
    int turntable = 8;

    std::uint64_t seed = 0;
    int iters = 0, delta_t = 0, t_min = 0, t_max = 0, resolution = 0;
    double tau = 0.0, lambda = 0.0;
};

std::unique_ptr<LayoutController> make_layout_controller(const GenerateArgs& a)
{
    if (a.layout == "fallback") return std::make_unique<FallbackLayoutController>();
    if (a.layout == "fixture") {
        if (a.fixtures_dir.empty())
            throw ValidationError("--layout fixture requires --fixtures-dir");
        return std::make_unique<FixtureLayoutController>(a.fixtures_dir);
    }
    if (a.llm_url.empty()) throw ValidationError("--layout llm requires --llm-url");
    return std::make_unique<HttpLayoutController>(a.llm_url, a.llm_key_env, a.context_dir,
                                                  a.record_dir);
}

std::unique_ptr<ShapeGenerator> make_shape_generator(const GenerateArgs& a)
{
    if (a.shape_source == "procedural") {
        ProceduralShapeGenerator::Config cfg;
        cfg.points = a.shape_points;
        return std::make_unique<ProceduralShapeGenerator>(cfg);
    }
    if (a.shape_source.rfind("file:", 0) == 0)
        return std::make_unique<FileShapeGenerator>(a.shape_source.substr(5));
    if (a.shape_source.rfind("http:", 0) == 0 || a.shape_source.rfind("https:", 0) == 0)
        return std::make_unique<HttpShapeGenerator>(a.shape_source, a.shape_points);
    throw ValidationError("--shape-source must be procedural, file:<ply>, or an http(s) URL");
}

NoisePredictor make_predictor(const GenerateArgs& a, const SceneSpec& scene)
{
    if (a.predictor == "target") return make_target_oracle(scene.concept_count());
    if (a.predictor == "affine")
        return make_affine_predictor(kAttentionDim,
                                     Rng::stream(scene.seed, 0xaffdull).next_u64());
    throw ValidationError("--predictor must be target or affine");
}

int cmd_generate(const GenerateArgs& a, const CLI::App& cmd)
{
    SceneSpec scene = parse_scene_spec(slurp(a.scene_path));
    if (cmd.count("--seed")) scene.seed = a.seed;
    if (cmd.count("--iters")) scene.stage2.iters = a.iters;
    if (cmd.count("--delta-t")) scene.stage2.delta_t = a.delta_t;
    if (cmd.count("--t-min")) scene.stage2.t_min = a.t_min;
    if (cmd.count("--t-max")) scene.stage2.t_max = a.t_max;
    if (cmd.count("--resolution")) scene.stage2.resolution = a.resolution;
    if (cmd.count("--tau")) scene.stage2.tau = a.tau;
    if (cmd.count("--lambda")) scene.stage2.lambda = a.lambda;
    scene.validate();

    const fs::path out = a.out_dir;
    RunManifest manifest;
    GaussianCloud init_cloud;

    if (a.init == "layout") {
        auto controller = make_layout_controller(a);
        auto shapes = make_shape_generator(a);
        Stage1Options opts;
        opts.layout.fallback_on_error = !a.no_layout_fallback;
        Stage1Result s1 = run_stage1(scene, *controller, *shapes, out, opts);
        init_cloud = std::move(s1.cloud);
        manifest = std::move(s1.manifest);
        std::cout << "stage 1: " << init_cloud.size() << " Gaussians, layout "
                  << manifest.layout_provenance << "\n";
    } else if (a.init == "sphere") {
        init_cloud = random_sphere_init(scene);
        manifest.scene_hash = to_hex(fnv1a64(serialize_scene_spec(scene)));
        manifest.layout_provenance = "none";
        write_file(out / "cloud_stage1.ply", export_ply(init_cloud));
        manifest.outputs.push_back("cloud_stage1.ply");
        std::cout << "stage 1 skipped: sphere init with " << init_cloud.size()
                  << " Gaussians\n";
    } else {
        throw ValidationError("--init must be layout or sphere");
    }

    const NoisePredictor predictor = make_predictor(a, scene);
    Stage2Options s2_opts;
    s2_opts.turntable_views = a.turntable;
    Stage2Result s2 = run_stage2(init_cloud, scene, predictor, out, std::move(manifest), s2_opts);

    const MetricRow& last = s2.manifest.metrics.back();
    std::cout << "stage 2: " << scene.stage2.iters << " iterations, "
              << s2.cloud.size() << " Gaussians kept\n";
    for (int i = 0; i < scene.concept_count(); ++i)
        std::cout << "  concept " << i << ": masked_l2 " << last.masked_l2[i] << ", psnr "
                  << last.psnr[i] << " dB\n";
    for (const auto& w : s2.manifest.warnings) std::cout << "  warning: " << w << "\n";
    std::cout << s2.manifest.outputs.size() << " artifacts in " << out.string() << "\n";
    return 0;
}

int cmd_render(const std::string& ply_path, int turntable, int resolution,
               const std::string& out_arg)
{
    std::vector<std::string> warnings;
    const GaussianCloud cloud = import_ply(slurp(ply_path), &warnings);
    for (const auto& w : warnings) std::cout << "warning: " << w << "\n";

    Vec3 lo = cloud.gaussians.empty() ? Vec3::Zero() : cloud.gaussians[0].mu;
    Vec3 hi = lo;
    for (const auto& g : cloud.gaussians) {
        lo = lo.cwiseMin(g.mu);
        hi = hi.cwiseMax(g.mu);
    }
    const Vec3 center = (lo + hi) / 2.0;

    const fs::path out =
        out_arg.empty() ? fs::path(ply_path).parent_path() / "renders" : fs::path(out_arg);
    const auto views = render_turntable(cloud, turntable, resolution, center);
    int files = 0;
    for (size_t j = 0; j < views.size(); ++j) {
        const std::string stem = "turntable_" + std::to_string(j);
        write_file(out / (stem + ".png"), encode_png(views[j].joint.color));
        ++files;
        for (int i = 0; i < cloud.k; ++i) {
            write_file(out / (stem + "_mask" + std::to_string(i) + ".png"),
                       encode_png(views[j].joint.concept_map.plane(i)));
            write_file(out / (stem + "_concept" + std::to_string(i) + ".png"),
                       encode_png(views[j].isolated[static_cast<size_t>(i)].color));
            files += 2;
        }
    }
    std::cout << files << " images (" << cloud.size() << " Gaussians, " << cloud.k
              << " concepts) in " << out.string() << "\n";
    return 0;
}

int cmd_validate(const std::string& scene_path)
{
    const SceneSpec scene = parse_scene_spec(slurp(scene_path));
    scene.validate();
    std::cout << scene_path << ": OK\n"
              << "  prompt: " << scene.global_prompt << "\n"
              << "  concepts: " << scene.concept_count() << "\n";
    for (const auto& c : scene.concepts)
        std::cout << "    [" << c.id << "] " << c.concept_prompt << "\n";
    std::cout << "  bounds: " << scene.bound_w << " x " << scene.bound_d << " x "
              << scene.bound_h << ", seed " << scene.seed << "\n"
              << "  stage 2: " << scene.stage2.iters << " iterations at "
              << scene.stage2.resolution << "x" << scene.stage2.resolution << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"layout-driven concept-labeled Gaussian splatting"};
    app.require_subcommand(1);

    GenerateArgs gen_args;
    CLI::App* gen = app.add_subcommand("generate", "run both pipeline stages on a scene");
    gen->add_option("--scene", gen_args.scene_path, "scene JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    gen->add_option("--out", gen_args.out_dir, "output directory")->required();
    gen->add_option("--layout", gen_args.layout, "layout source")
        ->check(CLI::IsMember({"fallback", "fixture", "llm"}));
    gen->add_option("--init", gen_args.init, "initialization strategy")
        ->check(CLI::IsMember({"layout", "sphere"}));
    gen->add_option("--shape-source", gen_args.shape_source,
                    "procedural, file:<ply>, or an http(s) URL");
    gen->add_option("--shape-points", gen_args.shape_points, "points per shape candidate")
        ->check(CLI::PositiveNumber);
    gen->add_option("--predictor", gen_args.predictor, "noise predictor")
        ->check(CLI::IsMember({"target", "affine"}));
    gen->add_option("--fixtures-dir", gen_args.fixtures_dir, "layout fixture directory");
    gen->add_option("--llm-url", gen_args.llm_url, "layout service base URL");
    gen->add_option("--llm-key-env", gen_args.llm_key_env,
                    "environment variable holding the layout service key");
    gen->add_option("--context-dir", gen_args.context_dir, "in-context layout examples");
    gen->add_option("--record-fixtures", gen_args.record_dir,
                    "record layout responses into this directory");
    gen->add_flag("--no-layout-fallback", gen_args.no_layout_fallback,
                  "fail instead of falling back when the layout source errors");
    gen->add_option("--turntable", gen_args.turntable, "final turntable view count")
        ->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_args.seed, "override the scene seed");
    gen->add_option("--iters", gen_args.iters, "override stage-2 iteration count");
    gen->add_option("--delta-t", gen_args.delta_t, "override the inversion interval");
    gen->add_option("--t-min", gen_args.t_min, "override the minimum sampled timestep");
    gen->add_option("--t-max", gen_args.t_max, "override the maximum sampled timestep");
    gen->add_option("--resolution", gen_args.resolution, "override the render resolution");
    gen->add_option("--tau", gen_args.tau, "override the mask threshold");
    gen->add_option("--lambda", gen_args.lambda, "override the adapter strength");

    std::string ply_path, render_out;
    int turntable = 8, resolution = 64;
    CLI::App* ren = app.add_subcommand("render", "render turntable views of a saved cloud");
    ren->add_option("--ply", ply_path, "Gaussian cloud PLY file")
        ->required()
        ->check(CLI::ExistingFile);
    ren->add_option("--turntable", turntable, "number of views")->check(CLI::PositiveNumber);
    ren->add_option("--resolution", resolution, "image resolution")->check(CLI::PositiveNumber);
    ren->add_option("--out", render_out, "output directory (default: renders/ beside the ply)");

    std::string validate_path;
    CLI::App* val = app.add_subcommand("validate", "check a scene file");
    val->add_option("--scene", validate_path, "scene JSON file")
        ->required()
        ->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(gen_args, *gen);
        if (ren->parsed()) return cmd_render(ply_path, turntable, resolution, render_out);
        return cmd_validate(validate_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
