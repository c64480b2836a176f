#include "rawsplat/rawsplat.hpp"
#include "rawsplat/server.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace rawsplat;

namespace {

std::vector<double> parse_list(const std::string& text, std::size_t expect, const char* what) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
    if (v.size() != expect) {
        throw InvalidArgumentError(std::string(what) + " needs " + std::to_string(expect) + " comma-separated values");
    }
    return v;
}

std::string format_db(double v) {
    if (std::isinf(v)) return "inf";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out_path,
              const std::string& log_path, const std::vector<std::string>& overrides) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = TrainConfig::from_file(config_path);
    std::map<std::string, std::string> kv;
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw InvalidArgumentError("--set expects key=value, got '" + o + "'");
        kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
    cfg.apply(kv);
    const DatasetBundle data = load_dataset(data_path);

    const std::string log_file = log_path.empty() ? out_path + ".loss.csv" : log_path;
    LossLogger logger(log_file);
    Trainer trainer(data, cfg);
    const long report_every = std::max(1L, cfg.iterations / 20);
    trainer.run([&](const IterationRecord& r) {
        logger.push(r);
        if (r.iteration % report_every == 0 || r.iteration == cfg.iterations) {
            std::cerr << "iteration " << r.iteration << "/" << cfg.iterations << "  loss " << r.total
                      << "  primitives " << r.primitives << "\n";
        }
    });
    logger.close();
    save_scene(out_path, {trainer.scene(), cfg});
    std::cout << "wrote " << out_path << " (" << trainer.scene().cloud.size() << " primitives)\n";
    return 0;
}

int cmd_render(const std::string& scene_path, int camera_index, const std::string& pose,
               const std::string& maps, const std::string& preset, double stops, int width, int height,
               const std::string& out_prefix) {
    const SceneCheckpoint ckpt = load_scene(scene_path);
    const TrainedScene& scene = ckpt.scene;
    RenderRequest base;
    if (!pose.empty()) {
        const auto v = parse_list(pose, 6, "--pose");
        const CameraView ref = scene.cameras.empty() ? look_at(Vec3::Zero(), Vec3::UnitZ(), 256, 192, 192.0)
                                                     : scene.cameras.front();
        CameraView cam = look_at(Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5]), ref.width, ref.height, ref.fx);
        cam.fy = ref.fy;
        cam.cx = ref.cx;
        cam.cy = ref.cy;
        base.camera = cam;
    } else {
        base.camera_index = camera_index;
    }
    base.width = width;
    base.height = height;
    base.tonemap.exposure_stops = stops;
    if (preset == "local") {
        base.tonemap.curve = ToneCurve::gamma;
        base.tonemap.local_enabled = true;
    } else {
        base.tonemap.curve = tone_curve_from_string(preset);
    }

    std::stringstream ss(maps);
    std::string item;
    while (std::getline(ss, item, ',')) {
        RenderRequest req = base;
        req.map = map_kind_from_string(item);
        req.encoding = FrameEncoding::png;
        const Image display = render_request_image(scene, req);
        const std::string png = out_prefix + "_" + item + ".png";
        write_file(png, encode_png(display));
        std::cout << "wrote " << png << "\n";
        req.encoding = FrameEncoding::f32;
        const Image raw = render_request_image(scene, req);
        const std::string f32 = out_prefix + "_" + item + ".f32";
        write_file(f32, encode_f32(raw));
        std::cout << "wrote " << f32 << " (" << raw.width << "x" << raw.height << "x" << raw.channels << ")\n";
    }
    return 0;
}

int cmd_eval(const std::string& scene_path, const std::string& data_path, const std::string& align) {
    const SceneCheckpoint ckpt = load_scene(scene_path);
    const DatasetBundle data = load_dataset(data_path);
    const AlignSpace space = align_space_from_string(align);
    const EvalReport rep = evaluate_views(ckpt.scene, data.test, space);
    std::cout << "view            PSNR(dB)  SSIM     a          b\n";
    for (const auto& r : rep.rows) {
        std::cout << std::left << std::setw(16) << r.view << std::setw(10) << format_db(r.psnr) << std::fixed
                  << std::setprecision(4) << std::setw(9) << r.ssim << std::setprecision(6) << std::setw(11)
                  << r.fit.a << r.fit.b << "\n";
    }
    std::cout << std::left << std::setw(16) << "mean" << std::setw(10) << format_db(rep.mean_psnr) << std::fixed
              << std::setprecision(4) << rep.mean_ssim << "\n";
    std::cout << "align=" << align << "\n";
    return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
    SyntheticSceneSpec spec;
    if (!spec_path.empty()) spec.apply(read_key_value_file(spec_path));
    const SyntheticScene syn = generate_synthetic(spec);
    save_dataset(out_dir, syn.dataset);

    TrainedScene gt;
    gt.cloud = syn.cloud;
    gt.field = syn.field;
    const auto shutters = syn.dataset.shutter_scales();
    gt.exposure = ExposureTable(shutters, *std::max_element(shutters.begin(), shutters.end()));
    gt.cameras = syn.dataset.train_cameras();
    TrainConfig cfg;
    cfg.feature_dim = 0;
    save_scene(fs::path(out_dir) / "ground_truth.scene", {gt, cfg});
    for (std::size_t i = 0; i < syn.test_depth.size(); ++i) {
        write_file(fs::path(out_dir) / ("depth_" + syn.dataset.test[i].name + ".f32"), encode_f32(syn.test_depth[i]));
    }
    std::cout << "wrote " << syn.dataset.train.size() << " training and " << syn.dataset.test.size()
              << " test views to " << out_dir << "\n";
    return 0;
}

FrameServer* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) std::thread([] { g_server->stop(); }).detach();
}

int cmd_serve(const std::string& scene_path, const std::string& addr_flag, unsigned threads) {
    auto ckpt = load_scene(scene_path);
    const BindAddress addr = resolve_bind_address(addr_flag);
    FrameServer server(std::make_shared<const TrainedScene>(std::move(ckpt.scene)), threads);
    const unsigned short port = server.start(addr);
    std::cout << "serving on ws://" << addr.host << ":" << port << std::endl;
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.wait();
    g_server = nullptr;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian splatting for linear HDR captures"};
    app.require_subcommand(1);

    std::string config, data, out, log_path, scene, pose, maps = "color", preset = "gamma", align = "raw", spec;
    std::string addr = "127.0.0.1:8765";
    std::vector<std::string> overrides;
    int camera_index = 0, width = 0, height = 0;
    double stops = 0.0;
    unsigned threads = 0;

    auto* train = app.add_subcommand("train", "optimize a scene from a dataset");
    train->add_option("--config", config, "key = value training config")->check(CLI::ExistingFile);
    train->add_option("--data", data, "dataset directory")->required();
    train->add_option("--out", out, "output scene file")->required();
    train->add_option("--log", log_path, "CSV loss log (default: <out>.loss.csv)");
    train->add_option("--set", overrides, "config override key=value");

    auto* rend = app.add_subcommand("render", "render maps from a scene");
    rend->add_option("--scene", scene, "scene file")->required()->check(CLI::ExistingFile);
    auto* idx = rend->add_option("--camera-index", camera_index, "stored camera to render from");
    rend->add_option("--pose", pose, "eye and target: ex,ey,ez,tx,ty,tz")->excludes(idx);
    rend->add_option("--maps", maps, "comma-separated maps: color,depth,transmittance");
    rend->add_option("--tonemap-preset", preset, "linear | gamma | filmic | local");
    rend->add_option("--exposure", stops, "exposure in stops");
    rend->add_option("--width", width, "output width");
    rend->add_option("--height", height, "output height");
    rend->add_option("--out", out, "output path prefix")->required();

    auto* ev = app.add_subcommand("eval", "held-out PSNR/SSIM after affine alignment");
    ev->add_option("--scene", scene, "scene file")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--align", align, "raw | display")->check(CLI::IsMember({"raw", "display"}));

    auto* syn = app.add_subcommand("synth", "generate a synthetic dataset");
    syn->add_option("--spec", spec, "key = value scene spec")->check(CLI::ExistingFile);
    syn->add_option("--out", out, "output dataset directory")->required();

    auto* srv = app.add_subcommand("serve", "stream frames over WebSocket");
    srv->add_option("--scene", scene, "scene file")->required()->check(CLI::ExistingFile);
    srv->add_option("--addr", addr, std::string("bind address host:port (overridden by ") + kAddressEnv + ")");
    srv->add_option("--threads", threads, "render threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*train) return cmd_train(config, data, out, log_path, overrides);
        if (*rend) return cmd_render(scene, camera_index, pose, maps, preset, stops, width, height, out);
        if (*ev) return cmd_eval(scene, data, align);
        if (*syn) return cmd_synth(spec, out);
        if (*srv) return cmd_serve(scene, addr, threads);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
