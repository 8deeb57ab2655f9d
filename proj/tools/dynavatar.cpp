// dynavatar: dataset synthesis, two-stage avatar training, rendering,
// multi-view refitting, evaluation, and gradient auditing.
//
// Exit codes: 0 ok, 1 check failed, 2 bad input, 3 version/config mismatch.

#include <dyav/gradcheck.hpp>
#include <dyav/refit.hpp>
#include <dyav/trainer.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace dyav;
namespace fs = std::filesystem;

namespace {

struct BadInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VersionMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_input(bool cond, const std::string& msg) {
    if (!cond) throw BadInput(msg);
}

// scans checkpoint tensor names without loading payloads
bool checkpoint_has_lora(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require_input(f.good(), "cannot open checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    require_input(bool(f) && std::memcmp(magic, "DYAV", 4) == 0, "not a checkpoint: " + path);
    uint32_t version = dyav::detail::read_u32(f);
    if (version != 1) throw VersionMismatch("unsupported checkpoint version " +
                                            std::to_string(version) + " in " + path);
    uint32_t count = dyav::detail::read_u32(f);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 2);
        std::string name(len, '\0');
        f.read(name.data(), len);
        uint8_t dtype = 0, rank = 0;
        f.read(reinterpret_cast<char*>(&dtype), 1);
        f.read(reinterpret_cast<char*>(&rank), 1);
        size_t n = rank == 0 ? 0 : 1;
        for (int d = 0; d < rank; ++d) n *= dyav::detail::read_u32(f);
        f.seekg(std::streamoff(n * sizeof(float)), std::ios::cur);
        if (name.rfind("lora.", 0) == 0) return true;
    }
    return false;
}

// load_checkpoint throws plain runtime_errors; promote the gate failures so
// main() can map them to exit code 3
void load_model_checkpoint(const std::string& path, Params& params, uint64_t hash) {
    try {
        load_checkpoint(path, params, hash);
    } catch (const std::runtime_error& e) {
        std::string what = e.what();
        if (what.find("config hash mismatch") != std::string::npos ||
            what.find("unsupported version") != std::string::npos)
            throw VersionMismatch(what);
        throw;
    }
}

TrainConfig resolve_config(const std::string& path) {
    if (path.empty()) return TrainConfig{};
    require_input(fs::exists(path), "config file not found: " + path);
    try {
        return load_config(path);
    } catch (const std::exception& e) {
        throw BadInput(e.what());  // malformed JSON and unknown keys are user errors
    }
}

std::vector<std::string> require_datasets(const std::vector<std::string>& dirs) {
    require_input(!dirs.empty(), "no dataset given (use --data)");
    for (const auto& d : dirs)
        require_input(fs::exists(d + "/scene.json"), "not a dataset (missing scene.json): " + d);
    return dirs;
}

int cmd_synth(const TrainConfig& cfg, uint64_t seed, const std::string& out) {
    require_input(!out.empty(), "synth needs --out");
    try {
        parse_preset(cfg.synth.preset);
    } catch (const std::runtime_error& e) {
        throw BadInput(e.what());
    }
    generate_scene(seed, cfg.synth, out);
    std::cout << "dataset written to " << out << "\n";
    return 0;
}

int cmd_pretrain(const TrainConfig& cfg, const std::vector<std::string>& data, uint64_t seed,
                 const std::string& out) {
    require_input(!out.empty(), "pretrain-static needs --out");
    fs::create_directories(out);
    Trainer tr = Trainer::create(cfg, require_datasets(data), seed);
    auto rows = tr.run(false);
    write_metrics(out + "/metrics_static.csv", rows);
    save_checkpoint(out + "/static.ckpt", tr.checkpoint_params(), cfg.hash());
    std::cout << "stage 1 done; final psnr " << rows.back().psnr << " dB\n";
    return 0;
}

int cmd_train_dynamic(const TrainConfig& cfg, const std::vector<std::string>& data,
                      const std::string& static_ckpt, uint64_t seed, const std::string& out) {
    require_input(!out.empty(), "train-dynamic needs --out");
    require_input(fs::exists(static_ckpt), "static checkpoint not found: " + static_ckpt);
    fs::create_directories(out);
    Trainer tr = Trainer::create(cfg, require_datasets(data), seed);
    {
        Params p;
        tr.model.collect(p);
        load_model_checkpoint(static_ckpt, p, cfg.hash());
    }
    tr.model.add_lora(tr.rng);
    tr.model.freeze_static_base();
    auto rows = tr.run(true);
    write_metrics(out + "/metrics.csv", rows);
    save_checkpoint(out + "/dynamic.ckpt", tr.checkpoint_params(), cfg.hash());
    std::cout << "stage 2 done; final psnr " << rows.back().psnr << " dB\n";
    return 0;
}

// builds a trainer-shaped model and loads any checkpoint into it
Trainer load_trainer(const TrainConfig& cfg, const std::vector<std::string>& data, uint64_t seed,
                     const std::string& ckpt) {
    require_input(fs::exists(ckpt), "checkpoint not found: " + ckpt);
    Trainer tr = Trainer::create(cfg, require_datasets(data), seed);
    if (checkpoint_has_lora(ckpt)) tr.model.add_lora(tr.rng);
    Params p;
    tr.model.collect(p);
    load_model_checkpoint(ckpt, p, cfg.hash());
    return tr;
}

int cmd_render(const TrainConfig& cfg, const std::vector<std::string>& data,
               const std::string& ckpt, const std::string& poses_path, int view, bool dump_xy,
               uint64_t seed, const std::string& out) {
    require_input(!out.empty(), "render needs --out");
    Trainer tr = load_trainer(cfg, data, seed, ckpt);
    const auto& d = tr.data[0];
    require_input(view >= 0 && view < d.views, "view out of range");

    PoseSequence poses = d.poses;
    if (!poses_path.empty()) {
        std::ifstream f(poses_path);
        require_input(f.good(), "cannot open pose sequence " + poses_path);
        poses = load_pose_sequence(f);
    }
    fs::create_directories(out);
    for (size_t f = 0; f < poses.size(); ++f) {
        int lo = std::max(0, int(f) - (kMotionSteps - 1));
        PoseSequence window(poses.begin() + lo, poses.begin() + long(f) + 1);
        if (int(window.size()) < kMotionSteps && f == 0)
            std::cout << "short history at frame " << f << "; zero-padded (demo mode)\n";
        MotionHistory h = build_history(window, d.skel);
        GaussianSet posed = tr.forward_posed_at(poses[f], true, &h);
        RenderOutput o = render(d.cams[size_t(view)], posed, RenderMode::rgb);
        Image img(o.H, o.W, 3);
        for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = o.rgb.at(i);
        save_png(out + "/" + std::to_string(f) + ".png", img);
        if (dump_xy) {
            RenderOutput xy = render(d.cams[size_t(view)], posed, RenderMode::xy);
            Image m(xy.H, xy.W, 2);
            for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = xy.xy_map.at(i);
            std::ofstream mf(out + "/" + std::to_string(f) + "_xy.bin", std::ios::binary);
            mf.write(reinterpret_cast<const char*>(m.data.data()),
                     std::streamsize(m.data.size() * sizeof(float)));
        }
    }
    std::cout << poses.size() << " frames rendered to " << out << "\n";
    return 0;
}

int cmd_refit(const std::vector<std::string>& data, const std::string& keypoints,
              const std::string& out) {
    require_input(!out.empty(), "refit needs --out");
    require_input(fs::exists(keypoints), "keypoint file not found: " + keypoints);
    auto dirs = require_datasets(data);
    LoadedDataset d = load_dataset(dirs[0]);
    KeypointObservations obs = load_keypoints(keypoints);
    FitResult res = refit_sequence(obs, d.cams, d.skel);
    fs::create_directories(out);
    save_fit_report(out + "/report.csv", res);
    std::ofstream pf(out + "/fitted_poses.jsonl");
    save_pose_sequence(res.poses, pf);
    double mean = 0;
    int n = 0;
    for (size_t f = 0; f < res.reproj_px.size(); ++f)
        if (!res.excluded[f]) { mean += res.reproj_px[f]; ++n; }
    std::cout << "refit done; mean reprojection " << (n ? mean / n : 0.0) << " px\n";
    return 0;
}

int cmd_eval(const TrainConfig& cfg, const std::vector<std::string>& data,
             const std::string& ckpt, bool self, uint64_t seed, const std::string& out) {
    require_input(!out.empty(), "eval needs --out");
    fs::create_directories(out);
    std::ofstream csv(out + "/eval.csv");
    csv << "frame,view,psnr,ssim\n";
    auto emit = [&](int f, int v, float psnr, float ssim) {
        if (std::isinf(psnr))
            csv << f << "," << v << ",inf," << ssim << "\n";
        else
            csv << f << "," << v << "," << psnr << "," << ssim << "\n";
    };

    if (self) {
        // sanity mode: GT compared against itself
        LoadedDataset d = load_dataset(require_datasets(data)[0]);
        for (int f = 0; f < d.frames; ++f) {
            Image gt = load_png(d.frame_path(f, d.views - 1));
            Image gm = load_png(d.mask_path(f, d.views - 1));
            Tensor rgb = Tensor::from({gt.h, gt.w, 3}, gt.data);
            Tensor alpha = Tensor::from({gm.h, gm.w, 1}, gm.data);
            emit(f, d.views - 1, psnr_masked(rgb, alpha, gt, gm), ssim_metric(rgb, gt));
        }
    } else {
        require_input(!ckpt.empty(), "eval needs --ckpt (or --self)");
        Trainer tr = load_trainer(cfg, data, seed, ckpt);
        int v = tr.heldout_view();
        for (int f = 0; f < tr.data[0].frames; ++f) {
            GaussianSet posed = tr.forward_posed(0, f, true, FwdCtx{});
            RenderOutput o = render(tr.data[0].cams[size_t(v)], posed, RenderMode::rgb);
            emit(f, v, psnr_masked(o.rgb, o.alpha, tr.target(0, f, v), tr.mask(0, f, v)),
                 ssim_metric(o.rgb, tr.target(0, f, v)));
        }
    }
    std::cout << "eval written to " << out << "/eval.csv\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    auto entries = run_gradcheck(seed);
    for (const auto& e : entries)
        std::printf("%-20s rel_err %.3e  tol %.0e  (%zu grads)  %s\n", e.name.c_str(),
                    double(e.max_rel_err), double(e.tol), e.checked, e.pass ? "ok" : "FAIL");
    return gradcheck_ok(entries) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynavatar: dynamic gaussian avatar pipeline"};
    app.require_subcommand(1);

    std::string config_path, out, static_ckpt, ckpt, poses_path, keypoints;
    std::vector<std::string> data;
    uint64_t seed = 1;
    int threads = 1, view = 0;
    bool dump_xy = false, self_eval = false;

    app.add_option("--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("--seed", seed, "RNG seed")->capture_default_str();
    app.add_option("--out", out, "output directory");
    app.add_option("--threads", threads, "worker threads (compute is deterministic regardless)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    auto* pre = app.add_subcommand("pretrain-static", "stage 1: static pretraining");
    pre->add_option("--data", data, "dataset directories");
    auto* dyn = app.add_subcommand("train-dynamic", "stage 2: dynamics on a frozen base");
    dyn->add_option("--data", data, "dataset directories");
    dyn->add_option("--static-ckpt", static_ckpt, "stage-1 checkpoint");
    auto* ren = app.add_subcommand("render", "render a pose sequence from a checkpoint");
    ren->add_option("--data", data, "dataset directory (scene, cameras, reference image)");
    ren->add_option("--ckpt", ckpt, "checkpoint");
    ren->add_option("--poses", poses_path, "pose sequence JSONL (default: dataset poses)");
    ren->add_option("--view", view, "camera index");
    ren->add_flag("--dump-xy", dump_xy, "also dump raw xy-map buffers");
    auto* ref = app.add_subcommand("refit", "multi-view skeleton refitting");
    ref->add_option("--data", data, "dataset directory (cameras + skeleton)");
    ref->add_option("--keypoints", keypoints, "keypoint observations JSONL");
    auto* ev = app.add_subcommand("eval", "PSNR/SSIM against GT renders");
    ev->add_option("--data", data, "dataset directory");
    ev->add_option("--ckpt", ckpt, "checkpoint");
    ev->add_flag("--self", self_eval, "compare GT against itself (sanity mode)");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        TrainConfig cfg = resolve_config(config_path);
        if (synth->parsed()) return cmd_synth(cfg, seed, out);
        if (pre->parsed()) return cmd_pretrain(cfg, data, seed, out);
        if (dyn->parsed()) return cmd_train_dynamic(cfg, data, static_ckpt, seed, out);
        if (ren->parsed()) return cmd_render(cfg, data, ckpt, poses_path, view, dump_xy, seed, out);
        if (ref->parsed()) return cmd_refit(data, keypoints, out);
        if (ev->parsed()) return cmd_eval(cfg, data, ckpt, self_eval, seed, out);
        if (gc->parsed()) return cmd_gradcheck(seed);
    } catch (const VersionMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const BadInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
