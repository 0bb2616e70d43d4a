#include "up/pipeline.hpp"

#include "up/parallel.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace up {

namespace {

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

Mask complement(const Mask& m) {
    Mask out(m.width, m.height);
    for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] ? 0 : 1;
    return out;
}

Mask mask_union(const Mask& a, const Mask& b) {
    Mask out = a;
    for (size_t i = 0; i < out.data.size(); ++i)
        if (b.data[i]) out.data[i] = 1;
    return out;
}

RenderOutput zero_render(const Camera& cam) {
    RenderOutput out;
    out.color = ImageBuffer(cam.width, cam.height, 3);
    out.depth = ImageBuffer(cam.width, cam.height, 1);
    out.trans = ImageBuffer(cam.width, cam.height, 1);
    return out;
}

// Local SE(3)-like chart at `base`: v = (axis-angle delta in the camera
// frame, translation delta in the world frame).
Pose perturb(const Pose& base, const Eigen::Matrix<double, 6, 1>& v) {
    Pose out = base;
    const Eigen::Vector3d w = v.head<3>();
    const double angle = w.norm();
    if (angle > 0) {
        Eigen::Quaterniond dq(Eigen::AngleAxisd(angle, w / angle));
        out.q = (base.q * dq).normalized();
    }
    out.t += v.tail<3>();
    return out;
}

void adam_mlp(Mlp& mlp, AdamState& adam, const MlpGrad& grad) {
    Eigen::VectorXd p = mlp.flatten();
    adam.update(p, mlp.flatten_grad(grad));
    mlp.set_from_flat(p);
}

}  // namespace

// --- keyframe policy ---------------------------------------------------------

bool keyframe_select(const Pose& pose, const Pose& last_kf_pose, int frame_index,
                     int last_kf_index, const PipelineConfig& cfg) {
    if (frame_index == 0 || last_kf_index < 0) return true;
    if (cfg.kf_every > 0 && (frame_index - last_kf_index) >= cfg.kf_every) return true;
    const double trans = (pose.t - last_kf_pose.t).norm();
    if (trans > cfg.kf_trans) return true;
    const double rot_deg = rotation_angle(last_kf_pose, pose) * 180.0 / M_PI;
    return rot_deg > cfg.kf_rot_deg;
}

// --- tracker -----------------------------------------------------------------

Tracker::Tracker(Camera camera, PipelineConfig config)
    : camera_(std::move(camera)), config_(std::move(config)),
      last_mask_(camera_.width, camera_.height) {}

Pose Tracker::constant_velocity_init() const {
    if (n_tracked_ == 0) return Pose::identity();
    if (n_tracked_ == 1) return prev_pose_;
    return prev_pose_.compose(prev_prev_pose_.inverse().compose(prev_pose_));
}

Pose Tracker::solve_pose(const Frame& frame, const MapSnapshot& snapshot, Pose init,
                         int* iters_out, double* loss_out) const {
    // Masked photometric objective: L_g averaged over pixels the previous
    // motion mask calls static.
    ImageBuffer wpx(camera_.width, camera_.height, 1);
    const size_t n_total = static_cast<size_t>(camera_.width) * camera_.height;
    const size_t n_dynamic = last_mask_.count();
    const bool use_mask = n_dynamic > 0 && n_dynamic < n_total;
    const double w = 1.0 / static_cast<double>(use_mask ? n_total - n_dynamic : n_total);
    for (int y = 0; y < camera_.height; ++y)
        for (int x = 0; x < camera_.width; ++x)
            wpx.at(x, y) = use_mask && last_mask_.at(x, y) ? 0.0 : w;

    auto objective = [&](const Pose& p) -> double {
        auto proj = prepare(snapshot.gaussians, p, camera_);
        auto out = render(proj, camera_, 0);
        return geo_loss(out.color, out.depth, frame.rgb, frame.depth, config_.weights, &wpx)
            .value;
    };

    Pose pose = init;
    double f0 = objective(pose);
    const double h = 1e-4;
    int iter = 0;
    for (; iter < config_.track_iters; ++iter) {
        Eigen::Matrix<double, 6, 1> g;
        for (int i = 0; i < 6; ++i) {
            Eigen::Matrix<double, 6, 1> dv = Eigen::Matrix<double, 6, 1>::Zero();
            dv[i] = h;
            const double fp = objective(perturb(pose, dv));
            dv[i] = -h;
            const double fm = objective(perturb(pose, dv));
            g[i] = (fp - fm) / (2.0 * h);
        }
        const double gnorm = g.norm();
        if (gnorm < 1e-10) break;

        // Backtracking line search along -g, Armijo condition.
        double alpha = config_.track_step;
        if (gnorm * alpha > 0.2) alpha = 0.2 / gnorm;  // cap the first step at 0.2 rad/m
        bool accepted = false;
        for (int ls = 0; ls < 12; ++ls) {
            Pose cand = perturb(pose, (-alpha * g).eval());
            const double fc = objective(cand);
            if (fc < f0 - 1e-4 * alpha * gnorm * gnorm) {
                pose = cand;
                const double improvement = f0 - fc;
                f0 = fc;
                accepted = true;
                if (improvement < 1e-12) iter = config_.track_iters;  // converged
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) break;
    }
    if (iters_out) *iters_out = std::min(iter + 1, config_.track_iters);
    if (loss_out) *loss_out = f0;
    return pose;
}

TrackResult Tracker::step(const Frame& frame, const MapSnapshot& snapshot) {
    TrackResult r;
    r.snapshot_empty = snapshot.empty();

    if (config_.mode == TrackMode::kGroundTruth) {
        if (!frame.gt_pose) throw std::runtime_error("tracker: ground-truth pose missing");
        r.pose = *frame.gt_pose;
    } else if (snapshot.empty()) {
        r.pose = constant_velocity_init();
        if (n_tracked_ > 0)
            std::cerr << "tracker: map snapshot empty at frame " << frame.index
                      << ", falling back to constant velocity\n";
    } else {
        r.pose = solve_pose(frame, snapshot, constant_velocity_init(), &r.iterations, &r.loss);
    }

    // Residual-driven motion mask against the snapshot render.
    if (!snapshot.empty()) {
        const bool want_feat = snapshot.f_m && !snapshot.f_m->empty() &&
                               !frame.features.data.empty() &&
                               snapshot.gaussians.front().feat.size() > 0;
        const int feat_ch =
            want_feat ? static_cast<int>(snapshot.gaussians.front().feat.size()) : 0;
        auto proj = prepare(snapshot.gaussians, r.pose, camera_);
        r.render = render(proj, camera_, feat_ch);
        ImageBuffer lifted;
        if (feat_ch > 0) lifted = lift_features(r.render.feat, *snapshot.f_m);
        r.residual = residual_map(r.render, frame.rgb, frame.depth, frame.features, lifted,
                                  config_.residual_weights);
    } else {
        r.render = zero_render(camera_);
        r.residual = residual_map(r.render, frame.rgb, frame.depth, ImageBuffer(), ImageBuffer(),
                                  config_.residual_weights);
    }
    r.sigma = solve_sigma(r.residual);
    r.mask = motion_mask(r.sigma);
    r.mask = iou_refine(r.mask, frame.instances);

    // With no map there is no residual evidence; seed the mask from the
    // provided instances so dynamic content is excluded from the first maps.
    if (snapshot.empty() && !frame.instances.empty()) {
        Mask seeded(camera_.width, camera_.height);
        for (const auto& inst : frame.instances) seeded = mask_union(seeded, inst);
        r.mask = seeded;
    }

    prev_prev_pose_ = prev_pose_;
    prev_pose_ = r.pose;
    ++n_tracked_;
    last_mask_ = r.mask;
    return r;
}

// --- mapper ------------------------------------------------------------------

struct Mapper::ParamBackup {
    Eigen::VectorXd c, a, s, q, d, m, u;
    AdamState adam_c, adam_a, adam_s, adam_q, adam_d, adam_m, adam_u;
    std::unordered_map<std::uint64_t, Anchor> anchors;
};

Mapper::Mapper(Camera camera, PipelineConfig config)
    : camera_(std::move(camera)), config_(std::move(config)), rng_(config_.seed),
      octree_(Octree::with_leaf_size(config_.octree_origin, config_.octree_extent,
                                     config_.leaf_size)),
      decoders_(DecoderSet::create(kSplatsPerAnchor, config_.n_l, kAnchorFeatureDim,
                                   octree_.voxel_size(), rng_)),
      adam_c_(decoders_.f_c.param_count(), config_.lr),
      adam_a_(decoders_.f_a.param_count(), config_.lr),
      adam_s_(decoders_.f_s.param_count(), config_.lr),
      adam_q_(decoders_.f_q.param_count(), config_.lr),
      adam_d_(decoders_.f_d.param_count(), config_.lr) {}

Mapper::ParamBackup Mapper::backup_params() const {
    ParamBackup b;
    b.c = decoders_.f_c.flatten();
    b.a = decoders_.f_a.flatten();
    b.s = decoders_.f_s.flatten();
    b.q = decoders_.f_q.flatten();
    b.d = decoders_.f_d.flatten();
    if (!f_m_.empty()) b.m = f_m_.flatten();
    if (!f_u_.empty()) b.u = f_u_.flatten();
    b.adam_c = adam_c_;
    b.adam_a = adam_a_;
    b.adam_s = adam_s_;
    b.adam_q = adam_q_;
    b.adam_d = adam_d_;
    b.adam_m = adam_m_;
    b.adam_u = adam_u_;
    b.anchors = octree_.anchors;
    return b;
}

void Mapper::restore_params(const ParamBackup& b) {
    decoders_.f_c.set_from_flat(b.c);
    decoders_.f_a.set_from_flat(b.a);
    decoders_.f_s.set_from_flat(b.s);
    decoders_.f_q.set_from_flat(b.q);
    decoders_.f_d.set_from_flat(b.d);
    if (!f_m_.empty() && b.m.size()) f_m_.set_from_flat(b.m);
    if (!f_u_.empty() && b.u.size()) f_u_.set_from_flat(b.u);
    adam_c_ = b.adam_c;
    adam_a_ = b.adam_a;
    adam_s_ = b.adam_s;
    adam_q_ = b.adam_q;
    adam_d_ = b.adam_d;
    adam_m_ = b.adam_m;
    adam_u_ = b.adam_u;
    octree_.anchors = b.anchors;
}

double Mapper::optimize_once(const Keyframe& kf, const MotionMask& mask,
                             RenderOutput* render_out) {
    const Frame& frame = *kf.frame;
    DecodeResult dr = decode(octree_, decoders_, kf.pose, camera_, kf.t,
                             config_.prune_threshold);
    if (dr.gaussians.empty()) {
        if (render_out) *render_out = zero_render(camera_);
        return 0.0;
    }

    std::vector<Eigen::Vector3d> p_cam;
    auto proj = prepare(dr.gaussians, kf.pose, camera_, RenderSettings::production(), &p_cam);
    RenderCache cache;
    const bool use_feat = !frame.features.data.empty() && !f_m_.empty();
    auto out = render(proj, camera_, use_feat ? decoders_.n_l : 0,
                      RenderSettings::production(), &cache);

    const Mask static_mask = complement(mask);
    TotalLossResult tl =
        total_loss(out, frame.rgb, frame.depth, use_feat ? frame.features : ImageBuffer(),
                   static_mask, dr.gaussians, config_.weights, use_feat ? &f_m_ : nullptr);
    if (!std::isfinite(tl.value)) throw std::runtime_error("diverged");

    auto ggrads = render_backward(proj, p_cam, dr.gaussians, kf.pose, camera_, cache,
                                  tl.d_color, tl.d_depth,
                                  tl.d_feat.data.empty() ? nullptr : &tl.d_feat);
    for (auto& g : ggrads) g.d_scale.array() += tl.d_scale_component;

    DecodeGrads dg = decode_backward(dr, decoders_, ggrads);
    adam_mlp(decoders_.f_c, adam_c_, dg.g_c);
    adam_mlp(decoders_.f_a, adam_a_, dg.g_a);
    adam_mlp(decoders_.f_s, adam_s_, dg.g_s);
    adam_mlp(decoders_.f_q, adam_q_, dg.g_q);
    adam_mlp(decoders_.f_d, adam_d_, dg.g_d);
    if (use_feat) adam_mlp(f_m_, adam_m_, tl.d_fm);
    for (size_t a = 0; a < dr.keys.size(); ++a)
        anchor_adam_step(octree_.anchors.at(dr.keys[a]), dg.d_feature[a], dg.d_offsets[a],
                         config_.lr);

    if (use_feat && !f_u_.empty()) train_uncertainty(kf, out);

    if (render_out) *render_out = out;
    return tl.value;
}

void Mapper::train_uncertainty(const Keyframe& kf, const RenderOutput& render) {
    const Frame& frame = *kf.frame;
    MlpCache cache;
    UncertaintyMap sig = predict_uncertainty(frame.features, f_u_, &cache);
    ImageBuffer lifted = lift_features(render.feat, f_m_);
    ResidualMap rm = residual_map(render, frame.rgb, frame.depth, frame.features, lifted,
                                  config_.residual_weights);
    UncertaintyLoss ul = uncertainty_loss(rm.R, sig.sigma, config_.weights.l3);

    Eigen::MatrixXd gout(1, static_cast<Eigen::Index>(ul.d_sigma.size()));
    for (Eigen::Index i = 0; i < gout.cols(); ++i) gout(0, i) = ul.d_sigma.data[i];
    MlpGrad g = f_u_.zero_grad();
    f_u_.backward(cache, gout, &g);
    adam_mlp(f_u_, adam_u_, g);
}

MotionMask Mapper::refine_mask(const Keyframe& kf) const {
    if (f_u_.empty() || kf.frame->features.data.empty()) return kf.mask;
    UncertaintyMap sig = predict_uncertainty(kf.frame->features, f_u_);
    return mask_union(kf.mask, motion_mask(sig));
}

std::shared_ptr<const MapSnapshot> Mapper::step(const Keyframe& kf) {
    keyframes_.push_back(kf);
    refined_masks_.push_back(kf.mask);
    const size_t slot = keyframes_.size() - 1;

    stats_.anchors_grown += grow(octree_, kf.frame->depth, kf.pose, camera_,
                                 complement(kf.mask), config_.grow_stride,
                                 kf.frame->index, rng_);

    if (!kf.frame->features.data.empty() && f_m_.empty()) {
        const int n_h = kf.frame->features.channels;
        f_m_ = Mlp({decoders_.n_l, 32, n_h}, Activation::Relu, Activation::None, rng_);
        adam_m_ = AdamState(f_m_.param_count(), config_.lr);
        f_u_ = Mlp({n_h, 32, 1}, Activation::Relu, Activation::Softplus, rng_);
        adam_u_ = AdamState(f_u_.param_count(), config_.lr);
    }

    ParamBackup backup = backup_params();
    RenderOutput out;
    try {
        for (int it = 0; it < config_.map_iters; ++it)
            stats_.last_loss = optimize_once(kf, kf.mask, &out);
    } catch (const std::exception&) {
        restore_params(backup);
        ++stats_.diverged_batches;
        out = RenderOutput();
    }
    if (out.color.data.empty()) {
        // Rolled back (or nothing decoded): render the restored state for the
        // occupancy update below.
        DecodeResult dr = decode(octree_, decoders_, kf.pose, camera_, kf.t,
                                 config_.prune_threshold);
        auto proj = prepare(dr.gaussians, kf.pose, camera_);
        out = render(proj, camera_, 0);
    }

    MotionMask refined = refine_mask(kf);
    refined_masks_[slot] = refined;

    observe_anchors(octree_, kf.pose, camera_, refined, kf.frame->depth);
    if (config_.prune_enabled) stats_.anchors_pruned += prune(octree_, config_.prune_threshold);

    ++stats_.frames_mapped;
    return make_snapshot(kf.pose, kf.t, kf.frame->index);
}

void Mapper::refine(int rounds) {
    for (int r = 0; r < rounds; ++r) {
        for (size_t slot = 0; slot < keyframes_.size(); ++slot) {
            const Keyframe& kf = keyframes_[slot];
            ParamBackup backup = backup_params();
            try {
                for (int it = 0; it < config_.map_iters; ++it)
                    stats_.last_loss = optimize_once(kf, refined_masks_[slot], nullptr);
            } catch (const std::exception&) {
                restore_params(backup);
                ++stats_.diverged_batches;
            }
        }
    }
}

EvalFrame Mapper::evaluate(const Frame& frame, const Pose& pose, double t) const {
    EvalFrame ev;
    DecodeResult dr = decode(octree_, decoders_, pose, camera_, t, config_.prune_threshold);
    auto proj = prepare(dr.gaussians, pose, camera_);
    const bool use_feat = !f_m_.empty() && !frame.features.data.empty();
    ev.render = render(proj, camera_, use_feat ? decoders_.n_l : 0);

    ImageBuffer lifted;
    if (use_feat) lifted = lift_features(ev.render.feat, f_m_);
    ev.residual = residual_map(ev.render, frame.rgb, frame.depth, frame.features, lifted,
                               config_.residual_weights);
    ev.mask = motion_mask(solve_sigma(ev.residual));
    ev.mask = iou_refine(ev.mask, frame.instances);
    return ev;
}

std::shared_ptr<const MapSnapshot> Mapper::make_snapshot(const Pose& pose, double t,
                                                         int frame_index) {
    auto snap = std::make_shared<MapSnapshot>();
    snap->version = ++snapshot_version_;
    snap->frame_index = frame_index;
    DecodeResult dr = decode(octree_, decoders_, pose, camera_, t, config_.prune_threshold);
    snap->gaussians = std::move(dr.gaussians);
    if (!f_m_.empty()) snap->f_m = std::make_shared<Mlp>(f_m_);
    return snap;
}

// --- full runs -----------------------------------------------------------------

namespace {

double normalized_time(int index, int n_frames) {
    return n_frames > 0 ? static_cast<double>(index) / static_cast<double>(n_frames) : 0.0;
}

void finish_result(RunResult& res, const std::shared_ptr<const MapSnapshot>& snap) {
    res.n_anchors = res.mapper->octree().anchors.size();
    res.n_gaussians = snap ? snap->gaussians.size() : 0;
    res.snapshot_versions = snap ? snap->version : 0;
    res.diverged_batches = res.mapper->stats().diverged_batches;
}

}  // namespace

RunResult run_interleaved(const FrameProvider& frames, const PipelineConfig& config) {
    const double wall0 = now_ms();
    RunResult res;
    res.mapper = std::make_shared<Mapper>(frames.camera, config);
    Tracker tracker(frames.camera, config);
    auto snap = std::make_shared<const MapSnapshot>();
    Pose last_kf_pose;
    int last_kf_index = -1;

    for (int i = 0; i < frames.n_frames; ++i) {
        auto frame = frames.get(i);
        const double t0 = now_ms();
        TrackResult tr = tracker.step(*frame, *snap);
        const double t1 = now_ms();

        FrameRecord rec;
        rec.index = i;
        rec.timestamp = frame->timestamp;
        rec.pose = tr.pose;
        rec.mask = tr.mask;
        rec.snapshot_empty = tr.snapshot_empty;
        rec.track_loss = tr.loss;
        rec.track_ms = t1 - t0;
        res.track_ms_total += rec.track_ms;

        if (keyframe_select(tr.pose, last_kf_pose, i, last_kf_index, config)) {
            rec.keyframe = true;
            Keyframe kf{frame, tr.pose, tr.mask, normalized_time(i, frames.n_frames)};
            const double m0 = now_ms();
            snap = res.mapper->step(kf);
            res.map_ms_total += now_ms() - m0;
            last_kf_pose = tr.pose;
            last_kf_index = i;
            ++res.n_keyframes;
        }
        res.frames.push_back(std::move(rec));
    }

    if (config.final_rounds > 0) {
        const double m0 = now_ms();
        res.mapper->refine(config.final_rounds);
        res.map_ms_total += now_ms() - m0;
    }
    finish_result(res, snap);
    res.wall_ms = now_ms() - wall0;
    return res;
}

RunResult run_parallel(const FrameProvider& frames, const PipelineConfig& config) {
    const double wall0 = now_ms();
    RunResult res;
    res.mapper = std::make_shared<Mapper>(frames.camera, config);
    Tracker tracker(frames.camera, config);

    BoundedQueue<Keyframe> queue(config.queue_capacity);
    SnapshotSlot slot;
    slot.publish(std::make_shared<const MapSnapshot>());

    double map_ms = 0.0;
    std::string abort_reason;
    std::thread mapper_thread([&] {
        while (auto kf = queue.pop()) {
            const double m0 = now_ms();
            try {
                slot.publish(res.mapper->step(*kf));
            } catch (const std::exception& e) {
                abort_reason = e.what();
                queue.poison();
                return;
            }
            map_ms += now_ms() - m0;
        }
    });

    Pose last_kf_pose;
    int last_kf_index = -1;
    for (int i = 0; i < frames.n_frames; ++i) {
        if (queue.poisoned()) {
            res.aborted = true;
            break;
        }
        auto frame = frames.get(i);
        auto snap = slot.load();
        const double t0 = now_ms();
        TrackResult tr = tracker.step(*frame, *snap);
        const double t1 = now_ms();

        FrameRecord rec;
        rec.index = i;
        rec.timestamp = frame->timestamp;
        rec.pose = tr.pose;
        rec.mask = tr.mask;
        rec.snapshot_empty = tr.snapshot_empty;
        rec.track_loss = tr.loss;
        rec.track_ms = t1 - t0;
        res.track_ms_total += rec.track_ms;

        if (keyframe_select(tr.pose, last_kf_pose, i, last_kf_index, config)) {
            rec.keyframe = true;
            Keyframe kf{frame, tr.pose, tr.mask, normalized_time(i, frames.n_frames)};
            if (!queue.push(std::move(kf))) {
                res.aborted = true;
                res.frames.push_back(std::move(rec));
                break;
            }
            last_kf_pose = tr.pose;
            last_kf_index = i;
            ++res.n_keyframes;
        }
        res.frames.push_back(std::move(rec));
    }

    queue.close();
    mapper_thread.join();
    res.map_ms_total = map_ms;
    res.abort_reason = abort_reason;
    if (!abort_reason.empty()) res.aborted = true;

    if (!res.aborted && config.final_rounds > 0) {
        const double m0 = now_ms();
        res.mapper->refine(config.final_rounds);
        res.map_ms_total += now_ms() - m0;
    }
    auto snap = slot.load();
    // Publish a snapshot of the final state so counts reflect refinement.
    if (!res.aborted && !res.frames.empty()) {
        const auto& last_kf = res.mapper->keyframes();
        if (!last_kf.empty()) {
            snap = res.mapper->make_snapshot(last_kf.back().pose, last_kf.back().t,
                                             last_kf.back().frame->index);
        }
    }
    finish_result(res, snap);
    res.wall_ms = now_ms() - wall0;
    return res;
}

RunResult run_pipeline(const FrameProvider& frames, const PipelineConfig& config) {
    return config.deterministic ? run_interleaved(frames, config)
                                : run_parallel(frames, config);
}

// --- trajectory files -----------------------------------------------------------

void save_trajectory(const std::string& path,
                     const std::vector<std::pair<double, Pose>>& traj) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    char line[256];
    for (const auto& [ts, pose] : traj) {
        std::snprintf(line, sizeof(line),
                      "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", ts, pose.t.x(),
                      pose.t.y(), pose.t.z(), pose.q.x(), pose.q.y(), pose.q.z(), pose.q.w());
        os << line;
    }
}

std::vector<std::pair<double, Pose>> load_trajectory(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    std::vector<std::pair<double, Pose>> traj;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
            throw std::runtime_error("malformed trajectory line: " + line);
        Pose p;
        p.t = Eigen::Vector3d(tx, ty, tz);
        p.q = Eigen::Quaterniond(qw, qx, qy, qz).normalized();
        traj.emplace_back(ts, p);
    }
    return traj;
}

std::vector<std::pair<double, Pose>> trajectory_of(const RunResult& run) {
    std::vector<std::pair<double, Pose>> traj;
    traj.reserve(run.frames.size());
    for (const auto& f : run.frames) traj.emplace_back(f.timestamp, f.pose);
    return traj;
}

}  // namespace up
