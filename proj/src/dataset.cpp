#include "up/dataset.hpp"

#include "up/io.hpp"
#include "up/uncertainty.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace up {

namespace {

constexpr double kAssocWindow = 0.02;  // seconds

std::string frame_name(int index, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.%s", index, ext);
    return buf;
}

struct Stamped {
    double ts;
    std::string path;
};

std::vector<Stamped> read_stamped_list(const std::string& file, const std::string& dir) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error(file + ": missing");
    std::vector<Stamped> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double ts;
        std::string rel;
        if (!(ss >> ts >> rel)) continue;
        out.push_back({ts, dir + "/" + rel});
    }
    std::sort(out.begin(), out.end(), [](const Stamped& a, const Stamped& b) { return a.ts < b.ts; });
    return out;
}

// Greedy unique nearest-timestamp matching within the association window,
// closest pairs first (the TUM tooling convention).
std::vector<std::pair<int, int>> associate(const std::vector<double>& a,
                                           const std::vector<double>& b, double window) {
    struct Cand {
        double dt;
        int i, j;
    };
    std::vector<Cand> cands;
    size_t lo = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        while (lo < b.size() && b[lo] < a[i] - window) ++lo;
        for (size_t j = lo; j < b.size() && b[j] <= a[i] + window; ++j)
            cands.push_back({std::abs(a[i] - b[j]), static_cast<int>(i), static_cast<int>(j)});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.dt != y.dt) return x.dt < y.dt;
        if (x.i != y.i) return x.i < y.i;
        return x.j < y.j;
    });
    std::vector<bool> used_a(a.size()), used_b(b.size());
    std::vector<std::pair<int, int>> pairs;
    for (const auto& c : cands) {
        if (used_a[c.i] || used_b[c.j]) continue;
        used_a[c.i] = used_b[c.j] = true;
        pairs.emplace_back(c.i, c.j);
    }
    std::sort(pairs.begin(), pairs.end());
    return pairs;
}

}  // namespace

// --- TUM loading -----------------------------------------------------------------

Sequence load_tum(const std::string& dir) {
    auto rgb = read_stamped_list(dir + "/rgb.txt", dir);
    auto depth = read_stamped_list(dir + "/depth.txt", dir);

    std::vector<double> rgb_ts, depth_ts;
    for (const auto& s : rgb) rgb_ts.push_back(s.ts);
    for (const auto& s : depth) depth_ts.push_back(s.ts);
    auto pairs = associate(rgb_ts, depth_ts, kAssocWindow);
    if (pairs.empty()) throw std::runtime_error(dir + ": no rgb-depth associations");

    Sequence seq;
    seq.name = fs::path(dir).filename().string();
    if (seq.name.empty()) seq.name = dir;
    seq.dropped_rgb = static_cast<int>(rgb.size() - pairs.size());
    seq.dropped_depth = static_cast<int>(depth.size() - pairs.size());

    // Intrinsics: camera.txt if present, the TUM freiburg defaults otherwise.
    seq.camera.fx = 525.0;
    seq.camera.fy = 525.0;
    seq.camera.cx = 319.5;
    seq.camera.cy = 239.5;
    seq.camera.depth_scale = 5000.0;
    {
        std::ifstream is(dir + "/camera.txt");
        if (is) {
            double fx, fy, cx, cy, scale;
            if (is >> fx >> fy >> cx >> cy) {
                seq.camera.fx = fx;
                seq.camera.fy = fy;
                seq.camera.cx = cx;
                seq.camera.cy = cy;
                if (is >> scale) seq.camera.depth_scale = scale;
            }
        }
    }

    for (size_t n = 0; n < pairs.size(); ++n) {
        FrameSource src;
        src.index = static_cast<int>(n);
        src.timestamp = rgb[pairs[n].first].ts;
        src.rgb_path = rgb[pairs[n].first].path;
        src.depth_path = depth[pairs[n].second].path;
        seq.frames.push_back(std::move(src));
    }

    // Image size from the first frame.
    ImageBuffer first = read_png_rgb8(seq.frames.front().rgb_path);
    seq.camera.width = first.width;
    seq.camera.height = first.height;
    seq.camera.validate();

    // Ground truth, associated the same way.
    std::ifstream gt_is(dir + "/groundtruth.txt");
    if (gt_is) {
        std::vector<double> gt_ts;
        std::vector<Pose> gt_poses;
        std::string line;
        while (std::getline(gt_is, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ss(line);
            double ts, tx, ty, tz, qx, qy, qz, qw;
            if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) continue;
            Pose p;
            p.t = Eigen::Vector3d(tx, ty, tz);
            p.q = Eigen::Quaterniond(qw, qx, qy, qz).normalized();
            gt_ts.push_back(ts);
            gt_poses.push_back(p);
        }
        std::vector<double> frame_ts;
        for (const auto& f : seq.frames) frame_ts.push_back(f.timestamp);
        for (const auto& [fi, gi] : associate(frame_ts, gt_ts, kAssocWindow))
            seq.frames[fi].gt_pose = gt_poses[gi];
    }
    return seq;
}

void attach_features(Sequence& seq, const std::string& dir) {
    for (auto& f : seq.frames) {
        std::string path = dir + "/" + frame_name(f.index, "upft");
        if (fs::exists(path)) f.feature_path = path;
    }
}

void attach_instances(Sequence& seq, const std::string& dir) {
    for (auto& f : seq.frames) {
        std::string path = dir + "/" + frame_name(f.index, "png");
        if (fs::exists(path)) f.instance_path = path;
    }
}

std::shared_ptr<const Frame> load_frame(const Sequence& seq, int index) {
    const FrameSource& src = seq.frames.at(static_cast<size_t>(index));
    if (src.preloaded) return src.preloaded;

    auto f = std::make_shared<Frame>();
    f->index = src.index;
    f->timestamp = src.timestamp;
    f->gt_pose = src.gt_pose;
    f->rgb = read_png_rgb8(src.rgb_path);
    f->depth = read_png_gray16(src.depth_path, seq.camera.depth_scale);
    if (f->rgb.width != seq.camera.width || f->rgb.height != seq.camera.height ||
        f->depth.width != seq.camera.width || f->depth.height != seq.camera.height)
        throw std::runtime_error(src.rgb_path + ": frame size mismatch");
    if (!src.feature_path.empty()) {
        ImageBuffer feat = read_feature_map(src.feature_path);
        if (feat.width != seq.camera.width || feat.height != seq.camera.height)
            feat = bilinear_upsample(feat, seq.camera.height, seq.camera.width);
        f->features = std::move(feat);
    }
    if (!src.instance_path.empty()) f->instances = read_instance_masks(src.instance_path);
    return f;
}

FrameProvider make_provider(const Sequence& seq) {
    FrameProvider p;
    p.camera = seq.camera;
    p.n_frames = static_cast<int>(seq.frames.size());
    auto shared = std::make_shared<Sequence>(seq);
    p.get = [shared](int i) { return load_frame(*shared, i); };
    return p;
}

// --- synthetic scenes ----------------------------------------------------------------

namespace {

struct Prim {
    bool is_box = true;
    Eigen::Vector3d center, half;  // boxes
    double radius = 0;             // spheres
    Eigen::Vector3d color;
    int object_id = 0;
    bool dynamic = false;
};

// Slab test; returns the near intersection distance or a negative value.
double hit_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c,
               const Eigen::Vector3d& half) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        if (std::abs(d[k]) < 1e-12) {
            if (std::abs(o[k] - c[k]) > half[k]) return -1.0;
            continue;
        }
        double ta = (c[k] - half[k] - o[k]) / d[k];
        double tb = (c[k] + half[k] - o[k]) / d[k];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return -1.0;
    }
    return t0 > 1e-9 ? t0 : -1.0;
}

double hit_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c,
                  double r) {
    const Eigen::Vector3d oc = o - c;
    const double b = oc.dot(d);
    const double disc = b * b - (oc.squaredNorm() - r * r);
    if (disc < 0) return -1.0;
    const double t = -b - std::sqrt(disc);
    return t > 1e-9 ? t : -1.0;
}

// Lambert-ish shading off a fixed light direction so surfaces are not flat
// colored (pure flat color defeats photometric tracking).
Eigen::Vector3d shade(const Prim& prim, const Eigen::Vector3d& p, const Eigen::Vector3d& d) {
    Eigen::Vector3d n;
    if (prim.is_box) {
        const Eigen::Vector3d rel = (p - prim.center).cwiseQuotient(prim.half);
        int axis = 0;
        rel.cwiseAbs().maxCoeff(&axis);
        n = Eigen::Vector3d::Zero();
        n[axis] = rel[axis] > 0 ? 1.0 : -1.0;
    } else {
        n = (p - prim.center).normalized();
    }
    if (n.dot(d) > 0) n = -n;
    static const Eigen::Vector3d light = Eigen::Vector3d(-0.4, -0.8, -0.45).normalized();
    const double diffuse = 0.35 + 0.65 * std::max(0.0, n.dot(-light));
    // A mild positional modulation gives every surface local texture.
    const double tex = 0.9 + 0.1 * std::sin(9.0 * p.x()) * std::sin(7.0 * p.y() + 1.0) *
                                 std::sin(8.0 * p.z() + 2.0);
    return (prim.color * diffuse * tex).cwiseMin(1.0).cwiseMax(0.0);
}

struct CastResult {
    bool hit = false;
    double depth = 0;
    int object_id = -1;
    bool dynamic = false;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

CastResult cast(const std::vector<Prim>& prims, const Eigen::Vector3d& o,
                const Eigen::Vector3d& d) {
    CastResult res;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& prim : prims) {
        const double t = prim.is_box ? hit_box(o, d, prim.center, prim.half)
                                     : hit_sphere(o, d, prim.center, prim.radius);
        if (t > 0 && t < best) {
            best = t;
            res.hit = true;
            res.object_id = prim.object_id;
            res.dynamic = prim.dynamic;
            res.color = shade(prim, o + t * d, d);
        }
    }
    if (res.hit) res.depth = best;
    return res;
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
    const Eigen::Vector3d forward = (target - eye).normalized();
    const Eigen::Vector3d down_w(0, 1, 0);
    const Eigen::Vector3d right = down_w.cross(forward).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    Eigen::Matrix3d r;
    r.col(0) = right;
    r.col(1) = down;
    r.col(2) = forward;
    Pose p;
    p.q = Eigen::Quaterniond(r).normalized();
    p.t = eye;
    return p;
}

}  // namespace

SynthConfig SynthConfig::standard() {
    SynthConfig cfg;
    cfg.boxes = {
        {{0.0, 1.05, 0.2}, {3.0, 0.25, 2.6}, {0.55, 0.50, 0.45}},   // floor
        {{0.0, 0.0, 1.15}, {3.0, 2.0, 0.3}, {0.70, 0.72, 0.75}},    // back wall
        {{-2.2, 0.0, 0.0}, {0.3, 2.0, 2.6}, {0.75, 0.62, 0.50}},    // left wall
        {{2.2, 0.0, 0.0}, {0.3, 2.0, 2.6}, {0.50, 0.62, 0.75}},     // right wall
        {{-1.35, 0.55, 0.75}, {0.28, 0.25, 0.22}, {0.80, 0.30, 0.25}},
        {{1.15, 0.62, 0.75}, {0.20, 0.18, 0.20}, {0.30, 0.65, 0.30}},
    };
    cfg.spheres = {
        {{0.15, 0.58, 1.00}, 0.22, {0.85, 0.75, 0.20}},
    };
    cfg.dynamic_box = {{-0.50, 0.38, 0.35}, {0.30, 0.30, 0.18}, {0.20, 0.35, 0.85}};
    cfg.dynamic_velocity = Eigen::Vector3d(0.034, 0.0, 0.0);
    return cfg;
}

SynthData synth_generate(const SynthConfig& cfg) {
    SynthData data;
    data.config = cfg;
    data.camera.width = cfg.width;
    data.camera.height = cfg.height;
    data.camera.fx = (cfg.width / 2.0) / std::tan(cfg.fov_deg * M_PI / 360.0);
    data.camera.fy = data.camera.fx;
    data.camera.cx = cfg.width / 2.0;
    data.camera.cy = cfg.height / 2.0;
    data.camera.depth_scale = 5000.0;
    data.camera.validate();

    // Object ids: static boxes, spheres, the dynamic box, then background.
    std::vector<Prim> statics;
    int next_id = 0;
    for (const auto& b : cfg.boxes)
        statics.push_back({true, b.center, b.half, 0, b.color, next_id++, false});
    for (const auto& s : cfg.spheres)
        statics.push_back({false, s.center, {}, s.radius, s.color, next_id++, false});
    const int dynamic_id = next_id++;
    const int background_id = next_id++;

    // Fixed unit embedding per object id.
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Eigen::VectorXd> embeddings;
    for (int id = 0; id <= background_id; ++id) {
        Eigen::VectorXd e(cfg.feat_dim);
        for (int i = 0; i < cfg.feat_dim; ++i) e[i] = normal(rng);
        embeddings.push_back(e.normalized());
    }

    data.swept_min = cfg.dynamic_box.center - cfg.dynamic_box.half;
    data.swept_max = cfg.dynamic_box.center + cfg.dynamic_box.half;

    const Eigen::Vector3d target(0.0, 0.35, 0.35);
    const int pw = std::max(1, cfg.width / 4);
    const int ph = std::max(1, cfg.height / 4);

    for (int fi = 0; fi < cfg.n_frames; ++fi) {
        const Eigen::Vector3d dyn_center =
            cfg.dynamic_box.center + static_cast<double>(fi) * cfg.dynamic_velocity;
        data.swept_min = data.swept_min.cwiseMin(dyn_center - cfg.dynamic_box.half);
        data.swept_max = data.swept_max.cwiseMax(dyn_center + cfg.dynamic_box.half);

        std::vector<Prim> prims = statics;
        prims.push_back({true, dyn_center, cfg.dynamic_box.half, 0, cfg.dynamic_box.color,
                         dynamic_id, true});

        const double u = cfg.n_frames > 1
                             ? static_cast<double>(fi) / static_cast<double>(cfg.n_frames - 1)
                             : 0.5;
        const double theta = (cfg.orbit_arc_deg * M_PI / 180.0) * (u - 0.5);
        const Eigen::Vector3d eye(cfg.orbit_radius * std::sin(theta), -0.35,
                                  -cfg.orbit_radius * std::cos(theta));
        const Pose pose = look_at(eye, target);

        SynthFrame sf;
        sf.frame = std::make_shared<Frame>();
        Frame& frame = *sf.frame;
        frame.index = fi;
        frame.timestamp = static_cast<double>(fi) / 30.0;
        frame.gt_pose = pose;
        frame.rgb = ImageBuffer(cfg.width, cfg.height, 3);
        frame.depth = ImageBuffer(cfg.width, cfg.height, 1);
        sf.gt_dynamic = Mask(cfg.width, cfg.height);
        sf.static_rgb = ImageBuffer(cfg.width, cfg.height, 3);
        sf.static_depth = ImageBuffer(cfg.width, cfg.height, 1);

        for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
                const Eigen::Vector3d dir_cam =
                    Eigen::Vector3d((x + 0.5 - data.camera.cx) / data.camera.fx,
                                    (y + 0.5 - data.camera.cy) / data.camera.fy, 1.0)
                        .normalized();
                const Eigen::Vector3d dir = pose.q * dir_cam;
                const CastResult full = cast(prims, pose.t, dir);
                if (full.hit) {
                    for (int c = 0; c < 3; ++c) frame.rgb.at(x, y, c) = full.color[c];
                    frame.depth.at(x, y) = full.depth * dir_cam.z();
                    if (full.dynamic) sf.gt_dynamic.set(x, y, true);
                }
                const CastResult bg = full.dynamic ? cast(statics, pose.t, dir) : full;
                if (bg.hit) {
                    for (int c = 0; c < 3; ++c) sf.static_rgb.at(x, y, c) = bg.color[c];
                    sf.static_depth.at(x, y) = bg.depth * dir_cam.z();
                }
            }
        }

        // Quarter-resolution features: embedding of the object under the
        // patch center plus per-frame Gaussian noise.
        std::mt19937_64 noise_rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (fi + 1)));
        std::normal_distribution<double> noise(0.0, cfg.noise);
        ImageBuffer feat(pw, ph, cfg.feat_dim);
        for (int py = 0; py < ph; ++py) {
            for (int px = 0; px < pw; ++px) {
                const double ix = (px + 0.5) * cfg.width / pw;
                const double iy = (py + 0.5) * cfg.height / ph;
                const Eigen::Vector3d dir_cam =
                    Eigen::Vector3d((ix - data.camera.cx) / data.camera.fx,
                                    (iy - data.camera.cy) / data.camera.fy, 1.0)
                        .normalized();
                const CastResult res = cast(prims, pose.t, pose.q * dir_cam);
                const int id = res.hit ? res.object_id : background_id;
                for (int c = 0; c < cfg.feat_dim; ++c)
                    feat.at(px, py, c) = embeddings[id][c] + noise(noise_rng);
            }
        }
        frame.features = bilinear_upsample(feat, cfg.height, cfg.width);
        sf.patch_features = std::move(feat);

        frame.instances.clear();
        frame.instances.push_back(sf.gt_dynamic);

        data.frames.push_back(std::move(sf));
    }
    return data;
}

void synth_write(const SynthData& data, const std::string& dir) {
    for (const char* sub : {"", "/rgb", "/depth", "/features", "/instances", "/gt_masks",
                            "/gt_static", "/gt_static_depth"})
        fs::create_directories(dir + sub);

    std::ofstream rgb_txt(dir + "/rgb.txt"), depth_txt(dir + "/depth.txt"),
        gt_txt(dir + "/groundtruth.txt"), cam_txt(dir + "/camera.txt");
    rgb_txt << "# timestamp filename\n";
    depth_txt << "# timestamp filename\n";
    gt_txt << "# timestamp tx ty tz qx qy qz qw\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%.9f %.9f %.9f %.9f %.0f\n", data.camera.fx,
                  data.camera.fy, data.camera.cx, data.camera.cy, data.camera.depth_scale);
    cam_txt << line;

    for (const auto& sf : data.frames) {
        const Frame& frame = *sf.frame;
        const std::string stem = frame_name(frame.index, "png");
        write_png_rgb8(dir + "/rgb/" + stem, frame.rgb);
        write_png_gray16(dir + "/depth/" + stem, frame.depth, data.camera.depth_scale);
        write_png_mask(dir + "/gt_masks/" + stem, sf.gt_dynamic);
        write_png_rgb8(dir + "/gt_static/" + stem, sf.static_rgb);
        write_png_gray16(dir + "/gt_static_depth/" + stem, sf.static_depth,
                         data.camera.depth_scale);

        // Instance image: one gray level per instance.
        ImageBuffer inst(frame.rgb.width, frame.rgb.height, 1);
        for (size_t i = 0; i < frame.instances.size(); ++i) {
            const double level = (100.0 + 100.0 * i) / 255.0;
            for (int y = 0; y < inst.height; ++y)
                for (int x = 0; x < inst.width; ++x)
                    if (frame.instances[i].at(x, y)) inst.at(x, y) = level;
        }
        write_png_gray8(dir + "/instances/" + stem, inst);

        write_feature_map(dir + "/features/" + frame_name(frame.index, "upft"),
                          sf.patch_features);

        std::snprintf(line, sizeof(line), "%.6f rgb/%s\n", frame.timestamp, stem.c_str());
        rgb_txt << line;
        std::snprintf(line, sizeof(line), "%.6f depth/%s\n", frame.timestamp, stem.c_str());
        depth_txt << line;
        const Pose& p = *frame.gt_pose;
        std::snprintf(line, sizeof(line), "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
                      frame.timestamp, p.t.x(), p.t.y(), p.t.z(), p.q.x(), p.q.y(), p.q.z(),
                      p.q.w());
        gt_txt << line;
    }

    nlohmann::json meta;
    meta["n_frames"] = data.config.n_frames;
    meta["width"] = data.config.width;
    meta["height"] = data.config.height;
    meta["feat_dim"] = data.config.feat_dim;
    meta["seed"] = data.config.seed;
    meta["noise"] = data.config.noise;
    meta["swept_min"] = {data.swept_min.x(), data.swept_min.y(), data.swept_min.z()};
    meta["swept_max"] = {data.swept_max.x(), data.swept_max.y(), data.swept_max.z()};
    meta["dynamic_half"] = {data.config.dynamic_box.half.x(), data.config.dynamic_box.half.y(),
                            data.config.dynamic_box.half.z()};
    meta["dynamic_velocity"] = {data.config.dynamic_velocity.x(),
                                data.config.dynamic_velocity.y(),
                                data.config.dynamic_velocity.z()};
    std::ofstream meta_os(dir + "/meta.json");
    meta_os << meta.dump(2) << "\n";
}

Sequence load_synth(const std::string& dir) {
    Sequence seq = load_tum(dir);
    if (fs::exists(dir + "/features")) attach_features(seq, dir + "/features");
    if (fs::exists(dir + "/instances")) attach_instances(seq, dir + "/instances");
    return seq;
}

SynthMeta read_synth_meta(const std::string& dir) {
    std::ifstream is(dir + "/meta.json");
    if (!is) throw std::runtime_error(dir + "/meta.json: missing");
    nlohmann::json j;
    is >> j;
    SynthMeta m;
    m.n_frames = j.at("n_frames").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (int k = 0; k < 3; ++k) {
        m.swept_min[k] = j.at("swept_min")[k].get<double>();
        m.swept_max[k] = j.at("swept_max")[k].get<double>();
        m.dynamic_half[k] = j.at("dynamic_half")[k].get<double>();
        m.dynamic_velocity[k] = j.at("dynamic_velocity")[k].get<double>();
    }
    return m;
}

FrameProvider make_provider(const SynthData& data) {
    FrameProvider p;
    p.camera = data.camera;
    p.n_frames = static_cast<int>(data.frames.size());
    auto frames = std::make_shared<std::vector<std::shared_ptr<Frame>>>();
    for (const auto& sf : data.frames) frames->push_back(sf.frame);
    p.get = [frames](int i) { return std::shared_ptr<const Frame>(frames->at(i)); };
    return p;
}

// --- trajectory evaluation -----------------------------------------------------------

RigidTransform umeyama_align(const std::vector<Eigen::Vector3d>& est,
                             const std::vector<Eigen::Vector3d>& gt, bool with_scale) {
    if (est.size() != gt.size()) throw std::invalid_argument("umeyama: size mismatch");
    const auto n = static_cast<Eigen::Index>(est.size());
    if (n < 3) throw std::runtime_error("umeyama: need at least 3 point pairs");

    Eigen::Vector3d mu_e = Eigen::Vector3d::Zero(), mu_g = Eigen::Vector3d::Zero();
    for (Eigen::Index i = 0; i < n; ++i) {
        mu_e += est[i];
        mu_g += gt[i];
    }
    mu_e /= static_cast<double>(n);
    mu_g /= static_cast<double>(n);

    Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
    double var_e = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        sigma += (gt[i] - mu_g) * (est[i] - mu_e).transpose();
        var_e += (est[i] - mu_e).squaredNorm();
    }
    sigma /= static_cast<double>(n);
    var_e /= static_cast<double>(n);

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    if (sv(1) <= 1e-12 + 1e-9 * sv(0)) throw std::runtime_error("rank deficient");

    Eigen::Vector3d s = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2) = -1.0;

    RigidTransform out;
    out.R = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    out.scale = with_scale ? sv.dot(s) / var_e : 1.0;
    out.t = mu_g - out.scale * (out.R * mu_e);
    return out;
}

double ate_rmse_points(const std::vector<Eigen::Vector3d>& est,
                       const std::vector<Eigen::Vector3d>& gt) {
    if (est.size() < 3) throw std::runtime_error("ate: fewer than 3 matched pairs");
    const RigidTransform tf = umeyama_align(est, gt);
    double sq = 0.0, sq_id = 0.0;
    for (size_t i = 0; i < est.size(); ++i) {
        sq += (tf.apply(est[i]) - gt[i]).squaredNorm();
        sq_id += (est[i] - gt[i]).squaredNorm();
    }
    // The closed form minimizes the residual in exact arithmetic; identity is
    // itself a rigid transform, so never report worse than the raw residual
    // (and identical trajectories come out exactly zero).
    sq = std::min(sq, sq_id);
    return std::sqrt(sq / static_cast<double>(est.size())) * 100.0;
}

double ate_rmse(const std::vector<std::pair<double, Pose>>& est,
                const std::vector<std::pair<double, Pose>>& gt) {
    std::vector<double> est_ts, gt_ts;
    for (const auto& [ts, p] : est) est_ts.push_back(ts);
    for (const auto& [ts, p] : gt) gt_ts.push_back(ts);
    auto pairs = associate(est_ts, gt_ts, kAssocWindow);
    if (pairs.size() < 3) throw std::runtime_error("ate: fewer than 3 matched pairs");
    std::vector<Eigen::Vector3d> pe, pg;
    for (const auto& [i, j] : pairs) {
        pe.push_back(est[i].second.t);
        pg.push_back(gt[j].second.t);
    }
    return ate_rmse_points(pe, pg);
}

}  // namespace up
