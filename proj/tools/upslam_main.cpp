// Command-line surface: synthetic-dataset generation, pipeline runs, map
// re-rendering, trajectory/image evaluation and a quick numeric self-test.
// Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.

#include "up/anchors.hpp"
#include "up/dataset.hpp"
#include "up/io.hpp"
#include "up/losses.hpp"
#include "up/nn.hpp"
#include "up/pipeline.hpp"
#include "up/render.hpp"
#include "up/uncertainty.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunOptions {
    std::string dataset;
    std::string format = "tum";
    std::string features, masks, out;
    std::string mode = "gt";
    std::string config;
    bool deterministic = false;
    std::uint64_t seed = 1;
    int iters = 50;
    double leaf_size = 0.1;
    int final_rounds = 2;
    bool no_prune = false;
    bool save_renders = false;
};

// key=value lines; config values override the command line per the contract.
// Returns 0 on success, 1 for unknown keys, 2 when the file cannot be read.
int apply_config(const std::string& path, RunOptions& opt) {
    std::ifstream is(path);
    if (!is) {
        std::cerr << "config: cannot read " << path << "\n";
        return 2;
    }
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            std::cerr << "config: " << path << ":" << lineno << ": expected key=value\n";
            return 1;
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        auto as_bool = [&] { return val == "1" || val == "true" || val == "yes"; };
        if (key == "dataset") opt.dataset = val;
        else if (key == "format") opt.format = val;
        else if (key == "features") opt.features = val;
        else if (key == "masks") opt.masks = val;
        else if (key == "out") opt.out = val;
        else if (key == "mode") opt.mode = val;
        else if (key == "deterministic") opt.deterministic = as_bool();
        else if (key == "seed") opt.seed = std::stoull(val);
        else if (key == "iters") opt.iters = std::stoi(val);
        else if (key == "leaf-size") opt.leaf_size = std::stod(val);
        else if (key == "final-rounds") opt.final_rounds = std::stoi(val);
        else if (key == "no-prune") opt.no_prune = as_bool();
        else if (key == "save-renders") opt.save_renders = as_bool();
        else {
            std::cerr << "config: unknown key '" << key << "'\n";
            return 1;
        }
    }
    return 0;
}

int cmd_synth(const std::string& out, std::uint64_t seed, int frames, double noise) {
    up::SynthConfig cfg = up::SynthConfig::standard();
    cfg.seed = seed;
    cfg.n_frames = frames;
    cfg.noise = noise;
    up::SynthData data = up::synth_generate(cfg);
    up::synth_write(data, out);
    std::cout << "wrote " << data.frames.size() << " frames to " << out << "\n";
    return 0;
}

int cmd_run(RunOptions opt) {
    if (opt.dataset.empty() || opt.out.empty()) {
        std::cerr << "run: --dataset and --out are required\n";
        return 1;
    }
    if (opt.mode != "gt" && opt.mode != "photometric") {
        std::cerr << "run: --mode must be gt or photometric\n";
        return 1;
    }
    if (opt.format != "tum" && opt.format != "synth") {
        std::cerr << "run: --format must be tum or synth\n";
        return 1;
    }

    up::Sequence seq;
    try {
        seq = opt.format == "synth" ? up::load_synth(opt.dataset) : up::load_tum(opt.dataset);
        if (!opt.features.empty()) up::attach_features(seq, opt.features);
        if (!opt.masks.empty()) up::attach_instances(seq, opt.masks);
    } catch (const std::exception& e) {
        std::cerr << "run: " << e.what() << "\n";
        return 2;
    }
    if (seq.dropped_rgb || seq.dropped_depth)
        std::cerr << "run: dropped " << seq.dropped_rgb << " rgb / " << seq.dropped_depth
                  << " depth entries without association\n";

    up::PipelineConfig cfg;
    cfg.mode = opt.mode == "gt" ? up::TrackMode::kGroundTruth : up::TrackMode::kPhotometric;
    cfg.deterministic = opt.deterministic;
    cfg.seed = opt.seed;
    cfg.map_iters = opt.iters;
    cfg.leaf_size = opt.leaf_size;
    cfg.final_rounds = opt.final_rounds;
    cfg.prune_enabled = !opt.no_prune;

    try {
        fs::create_directories(opt.out);
        fs::create_directories(opt.out + "/masks");
        if (opt.save_renders) fs::create_directories(opt.out + "/renders");

        up::FrameProvider provider = up::make_provider(seq);
        up::RunResult res = up::run_pipeline(provider, cfg);
        if (res.aborted) {
            std::cerr << "run: aborted: " << res.abort_reason << "\n";
            return 3;
        }

        up::save_trajectory(opt.out + "/trajectory.txt", up::trajectory_of(res));
        up::save_map(opt.out + "/map.upmap", res.mapper->octree(), res.mapper->decoders(),
                     res.mapper->f_m().empty() ? nullptr : &res.mapper->f_m(),
                     res.mapper->f_u().empty() ? nullptr : &res.mapper->f_u());

        // Final per-frame renders against the finished map.
        std::ofstream csv(opt.out + "/metrics.csv");
        csv << "frame,timestamp,keyframe,psnr,masked_psnr,ssim,loss_total,loss_geo,"
               "loss_dist,loss_scale,track_ms\n";
        double masked_psnr_sum = 0.0;
        int masked_psnr_count = 0;
        const int n = static_cast<int>(res.frames.size());
        for (const auto& rec : res.frames) {
            auto frame = provider.get(rec.index);
            const double t = n > 0 ? static_cast<double>(rec.index) / n : 0.0;
            up::EvalFrame ev = res.mapper->evaluate(*frame, rec.pose, t);
            const auto& out = ev.render;
            const bool use_feat =
                !res.mapper->f_m().empty() && !frame->features.data.empty();

            char name[32];
            std::snprintf(name, sizeof(name), "%06d.png", rec.index);
            up::write_png_mask(opt.out + "/masks/" + name, ev.mask);
            if (opt.save_renders) up::write_png_rgb8(opt.out + "/renders/" + name, out.color);

            const double p = up::psnr(out.color, frame->rgb);
            const double s = up::ssim(out.color, frame->rgb).value;
            double mp = std::numeric_limits<double>::quiet_NaN();
            if (ev.mask.count() < ev.mask.data.size()) {
                mp = up::masked_psnr(out.color, frame->rgb, ev.mask);
                if (std::isfinite(mp)) {
                    masked_psnr_sum += mp;
                    ++masked_psnr_count;
                }
            }
            up::Mask static_mask(ev.mask.width, ev.mask.height);
            for (size_t i = 0; i < static_mask.data.size(); ++i)
                static_mask.data[i] = ev.mask.data[i] ? 0 : 1;
            up::DecodeResult dr =
                up::decode(res.mapper->octree(), res.mapper->decoders(), rec.pose,
                           provider.camera, t, cfg.prune_threshold);
            up::TotalLossResult tl = up::total_loss(
                out, frame->rgb, frame->depth, use_feat ? frame->features : up::ImageBuffer(),
                static_mask, dr.gaussians, cfg.weights,
                use_feat ? &res.mapper->f_m() : nullptr);

            char line[256];
            std::snprintf(line, sizeof(line),
                          "%d,%.6f,%d,%.4f,%.4f,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n", rec.index,
                          rec.timestamp, rec.keyframe ? 1 : 0, p, mp, s, tl.value, tl.geo,
                          tl.dist, tl.scale, rec.track_ms);
            csv << line;
        }

        json report;
        report["n_frames"] = res.frames.size();
        report["n_keyframes"] = res.n_keyframes;
        report["n_anchors"] = res.n_anchors;
        report["n_gaussians"] = res.n_gaussians;
        report["snapshot_versions"] = res.snapshot_versions;
        report["diverged_batches"] = res.diverged_batches;
        report["mean_masked_psnr"] =
            masked_psnr_count ? masked_psnr_sum / masked_psnr_count : 0.0;
        report["track_ms_total"] = res.track_ms_total;
        report["track_ms_mean"] =
            res.frames.empty() ? 0.0 : res.track_ms_total / res.frames.size();
        report["map_ms_total"] = res.map_ms_total;
        report["wall_ms"] = res.wall_ms;
        report["mode"] = opt.mode;
        report["deterministic"] = opt.deterministic;
        report["seed"] = opt.seed;
        std::vector<std::pair<double, up::Pose>> gt;
        for (const auto& src : seq.frames)
            if (src.gt_pose) gt.emplace_back(src.timestamp, *src.gt_pose);
        if (gt.size() >= 3) {
            try {
                report["ate_cm"] = up::ate_rmse(up::trajectory_of(res), gt);
            } catch (const std::exception&) {
            }
        }
        std::ofstream ros(opt.out + "/report.json");
        ros << report.dump(2) << "\n";
        std::cout << report.dump(2) << "\n";
    } catch (const std::exception& e) {
        std::cerr << "run: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

int cmd_render(const std::string& map_path, const std::string& dataset,
               const std::string& format, const std::string& traj_path,
               const std::string& out, int stride) {
    up::LoadedMap map;
    up::Camera camera;
    std::vector<std::pair<double, up::Pose>> traj;
    try {
        map = up::load_map(map_path);
        up::Sequence seq =
            format == "synth" ? up::load_synth(dataset) : up::load_tum(dataset);
        camera = seq.camera;
        traj = up::load_trajectory(traj_path);
    } catch (const std::exception& e) {
        std::cerr << "render: " << e.what() << "\n";
        return 2;
    }
    try {
        fs::create_directories(out);
        const int n = static_cast<int>(traj.size());
        for (int i = 0; i < n; i += std::max(1, stride)) {
            const double t = static_cast<double>(i) / std::max(1, n);
            up::DecodeResult dr =
                up::decode(map.octree, map.decoders, traj[i].second, camera, t);
            auto proj = up::prepare(dr.gaussians, traj[i].second, camera);
            auto img = up::render(proj, camera, 0);
            char name[32];
            std::snprintf(name, sizeof(name), "%06d.png", i);
            up::write_png_rgb8(out + "/" + name, img.color);
            std::snprintf(name, sizeof(name), "%06d_depth.png", i);
            up::write_png_gray16(out + "/" + name, img.depth, camera.depth_scale);
        }
    } catch (const std::exception& e) {
        std::cerr << "render: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

int cmd_eval(const std::string& est_path, const std::string& gt_path,
             const std::string& renders, const std::string& ref, const std::string& masks) {
    try {
        if (!est_path.empty()) {
            auto est = up::load_trajectory(est_path);
            auto gt = up::load_trajectory(gt_path);
            std::printf("ate_cm: %.6f\n", up::ate_rmse(est, gt));
        }
        if (!renders.empty()) {
            double psnr_sum = 0, ssim_sum = 0, masked_sum = 0;
            int count = 0, masked_count = 0;
            for (const auto& entry : fs::directory_iterator(renders)) {
                if (entry.path().extension() != ".png") continue;
                const std::string name = entry.path().filename().string();
                if (!fs::exists(ref + "/" + name)) continue;
                up::ImageBuffer a = up::read_png_rgb8(entry.path().string());
                up::ImageBuffer b = up::read_png_rgb8(ref + "/" + name);
                psnr_sum += up::psnr(a, b);
                ssim_sum += up::ssim(a, b).value;
                ++count;
                if (!masks.empty() && fs::exists(masks + "/" + name)) {
                    up::Mask m = up::read_png_mask(masks + "/" + name);
                    if (m.count() < m.data.size()) {
                        masked_sum += up::masked_psnr(a, b, m);
                        ++masked_count;
                    }
                }
            }
            if (count == 0) {
                std::cerr << "eval: no matching render/reference pairs\n";
                return 2;
            }
            std::printf("psnr: %.4f\n", psnr_sum / count);
            std::printf("ssim: %.6f\n", ssim_sum / count);
            if (masked_count) std::printf("masked_psnr: %.4f\n", masked_sum / masked_count);
        }
    } catch (const std::exception& e) {
        std::cerr << "eval: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

// --- selftest -------------------------------------------------------------------

bool check(const char* name, bool ok) {
    std::printf("selftest: %-38s %s\n", name, ok ? "ok" : "FAILED");
    return ok;
}

int cmd_selftest() {
    bool all = true;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    // Renderer versus the naive per-pixel oracle, thresholds disabled.
    {
        double max_err = 0.0;
        for (int scene = 0; scene < 20; ++scene) {
            up::Camera cam;
            cam.width = 12;
            cam.height = 10;
            cam.fx = cam.fy = 14.0;
            cam.cx = 6.0;
            cam.cy = 5.0;
            up::Pose pose;
            std::vector<up::Gaussian> gs(8);
            for (auto& g : gs) {
                g.mu = Eigen::Vector3d(uni(rng) * 2 - 1, uni(rng) * 2 - 1, 1.5 + uni(rng));
                g.opacity = 0.2 + 0.7 * uni(rng);
                g.color = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
                g.scale = Eigen::Vector3d(0.1 + 0.3 * uni(rng), 0.1 + 0.3 * uni(rng),
                                          0.1 + 0.3 * uni(rng));
                g.rot = Eigen::Quaterniond::UnitRandom();
            }
            auto proj = up::prepare(gs, pose, cam, up::RenderSettings::exact());
            auto out = up::render(proj, cam, 0, up::RenderSettings::exact());
            for (int y = 0; y < cam.height; ++y)
                for (int x = 0; x < cam.width; ++x) {
                    auto px = up::render_oracle(gs, pose, cam, x, y);
                    for (int c = 0; c < 3; ++c)
                        max_err = std::max(max_err,
                                           std::abs(out.color.at(x, y, c) - px.color[c]));
                    max_err = std::max(max_err, std::abs(out.depth.at(x, y) - px.depth));
                    max_err = std::max(max_err, std::abs(out.trans.at(x, y) - px.trans));
                }
        }
        all &= check("render matches oracle (1e-6)", max_err < 1e-6);
    }

    // MLP gradients against finite differences.
    {
        up::Mlp mlp({5, 8, 3}, up::Activation::Relu, up::Activation::None, rng);
        Eigen::VectorXd x(5);
        for (int i = 0; i < 5; ++i) x[i] = uni(rng) * 2 - 1;
        auto loss = [&](const Eigen::VectorXd& p) {
            up::Mlp m = mlp;
            m.set_from_flat(p);
            return m.forward_vec(x).squaredNorm();
        };
        up::MlpCache cache;
        Eigen::VectorXd y = mlp.forward_vec(x, &cache);
        up::MlpGrad g = mlp.zero_grad();
        mlp.backward(cache, (2.0 * y).eval(), &g);
        const double err =
            up::grad_check(loss, mlp.flatten(), mlp.flatten_grad(g), 25, rng);
        all &= check("mlp gradient (fd, 1e-4)", err < 1e-4);
    }

    // Occupancy update worked values.
    {
        const bool v1 = std::abs(up::bayes_update(0.5, 0.7, 0.5) - 0.7) < 1e-12;
        const bool v2 = std::abs(up::bayes_update(0.6, 0.7, 0.5) - 7.0 / 9.0) < 1e-12;
        all &= check("bayes worked values", v1 && v2);
    }

    // Training-free sigma vs grid search.
    {
        bool ok = true;
        for (int i = 0; i < 100 && ok; ++i) {
            const double r = 2.0 * uni(rng);
            const double star = std::max(1e-3, std::sqrt(2.0 * r));
            auto obj = [&](double s) { return 0.5 * (r / (s * s) + std::log(s)); };
            for (double s = 0.01; s <= 4.0; s += 0.01)
                if (obj(star) > obj(s) + 1e-12) ok = false;
        }
        all &= check("sigma* beats grid search", ok);
    }

    // Alignment: construct-and-invert plus exact-zero identity.
    {
        std::vector<Eigen::Vector3d> gt, est;
        for (int i = 0; i < 50; ++i)
            gt.emplace_back(uni(rng) * 2 - 1, uni(rng) * 2 - 1, uni(rng) * 2 - 1);
        const Eigen::Matrix3d rot =
            Eigen::AngleAxisd(0.5236, Eigen::Vector3d::UnitZ()).toRotationMatrix();
        for (const auto& p : gt) est.push_back(rot * p + Eigen::Vector3d(1, 2, 3));
        const bool inv_ok = up::ate_rmse_points(est, gt) < 1e-9;
        const bool id_ok = up::ate_rmse_points(gt, gt) == 0.0;
        all &= check("umeyama construct-and-invert", inv_ok && id_ok);
    }

    return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"anchor-based splatting SLAM for dynamic RGB-D scenes"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate the bundled synthetic dataset");
    std::string synth_out;
    std::uint64_t synth_seed = 1;
    int synth_frames = 30;
    double synth_noise = 0.01;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "rng seed");
    synth->add_option("--frames", synth_frames, "number of frames");
    synth->add_option("--noise", synth_noise, "feature noise stddev");

    // run
    auto* run = app.add_subcommand("run", "run the tracking/mapping pipeline");
    RunOptions ro;
    run->add_option("--dataset", ro.dataset, "dataset directory");
    run->add_option("--format", ro.format, "tum or synth");
    run->add_option("--features", ro.features, "feature-map directory");
    run->add_option("--masks", ro.masks, "instance-mask directory");
    run->add_option("--out", ro.out, "output directory");
    run->add_option("--mode", ro.mode, "gt or photometric");
    run->add_flag("--deterministic", ro.deterministic, "single-thread interleaved run");
    run->add_option("--seed", ro.seed, "rng seed");
    run->add_option("--iters", ro.iters, "mapping iterations per keyframe");
    run->add_option("--leaf-size", ro.leaf_size, "octree leaf size [m]");
    run->add_option("--final-rounds", ro.final_rounds, "refinement passes after tracking");
    run->add_flag("--no-prune", ro.no_prune, "disable dynamic-anchor pruning");
    run->add_flag("--save-renders", ro.save_renders, "write final renders");
    run->add_option("--config", ro.config, "key=value file overriding flags");

    // render
    auto* render = app.add_subcommand("render", "render a saved map along a trajectory");
    std::string r_map, r_dataset, r_format = "tum", r_traj, r_out;
    int r_stride = 1;
    render->add_option("--map", r_map, "map file")->required();
    render->add_option("--dataset", r_dataset, "dataset directory (camera intrinsics)")
        ->required();
    render->add_option("--format", r_format, "tum or synth");
    render->add_option("--traj", r_traj, "trajectory file")->required();
    render->add_option("--out", r_out, "output directory")->required();
    render->add_option("--stride", r_stride, "render every nth pose");

    // eval
    auto* eval = app.add_subcommand("eval", "trajectory and image metrics");
    std::string e_est, e_gt, e_renders, e_ref, e_masks;
    eval->add_option("--est", e_est, "estimated trajectory");
    eval->add_option("--gt", e_gt, "ground-truth trajectory");
    eval->add_option("--renders", e_renders, "rendered image directory");
    eval->add_option("--ref", e_ref, "reference image directory");
    eval->add_option("--masks", e_masks, "dynamic-mask directory");

    // selftest
    app.add_subcommand("selftest", "run the built-in numeric checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand("synth")) return cmd_synth(synth_out, synth_seed, synth_frames, synth_noise);
        if (app.got_subcommand("run")) {
            if (!ro.config.empty()) {
                const int rc = apply_config(ro.config, ro);
                if (rc != 0) return rc;
            }
            return cmd_run(ro);
        }
        if (app.got_subcommand("render"))
            return cmd_render(r_map, r_dataset, r_format, r_traj, r_out, r_stride);
        if (app.got_subcommand("eval")) {
            if (e_est.empty() && e_renders.empty()) {
                std::cerr << "eval: need --est/--gt or --renders/--ref\n";
                return 1;
            }
            if (!e_est.empty() && e_gt.empty()) {
                std::cerr << "eval: --gt is required with --est\n";
                return 1;
            }
            return cmd_eval(e_est, e_gt, e_renders, e_ref, e_masks);
        }
        if (app.got_subcommand("selftest")) return cmd_selftest();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
