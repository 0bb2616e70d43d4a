// Dataset ingestion (TUM RGB-D layout and the bundled synthetic generator),
// lazy frame materialization, and trajectory evaluation (rigid alignment +
// absolute trajectory error).

#pragma once

#include "up/geometry.hpp"
#include "up/pipeline.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace up {

// --- sequences ----------------------------------------------------------------

// On-disk sources for one frame; pixel data is read on demand so long
// sequences never sit in memory at once.
struct FrameSource {
    int index = 0;
    double timestamp = 0.0;
    std::string rgb_path, depth_path;
    std::string feature_path;   // optional UPFT file, any resolution
    std::string instance_path;  // optional instance-mask PNG
    std::optional<Pose> gt_pose;
    std::shared_ptr<const Frame> preloaded;  // set for in-memory sequences
};

struct Sequence {
    std::string name;
    Camera camera;
    std::vector<FrameSource> frames;
    int dropped_rgb = 0;    // rgb entries without a depth partner
    int dropped_depth = 0;  // depth entries never paired
};

// Parses rgb.txt/depth.txt (and groundtruth.txt / camera.txt when present),
// associating color and depth by nearest timestamp within 0.02 s. Unmatched
// entries are dropped and counted on the returned sequence.
Sequence load_tum(const std::string& dir);

// Attaches per-frame sidecar files named by frame index ("000012.upft",
// "000012.png"). Missing files are skipped silently.
void attach_features(Sequence& seq, const std::string& dir);
void attach_instances(Sequence& seq, const std::string& dir);

// Materializes one frame: decodes PNGs, upsamples the feature map to camera
// resolution and splits the instance image into per-level masks.
std::shared_ptr<const Frame> load_frame(const Sequence& seq, int index);

FrameProvider make_provider(const Sequence& seq);

// --- synthetic scenes ------------------------------------------------------------

struct SynthBox {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Vector3d half = Eigen::Vector3d::Ones();
    Eigen::Vector3d color = Eigen::Vector3d::Ones();
};

struct SynthSphere {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double radius = 1.0;
    Eigen::Vector3d color = Eigen::Vector3d::Ones();
};

struct SynthConfig {
    int width = 64, height = 48;
    int n_frames = 30;
    double orbit_radius = 1.9;  // camera circle radius around the scene center
    double orbit_arc_deg = 36;  // total arc swept over the sequence
    double fov_deg = 70;        // horizontal field of view
    std::vector<SynthBox> boxes;
    std::vector<SynthSphere> spheres;
    SynthBox dynamic_box;
    Eigen::Vector3d dynamic_velocity = Eigen::Vector3d::Zero();  // m/frame
    int feat_dim = 16;
    double noise = 0.01;  // stddev added to the per-object unit embeddings
    std::uint64_t seed = 1;

    // The bundled room: three walls + floor, two static props, one moving box.
    static SynthConfig standard();
};

struct SynthFrame {
    std::shared_ptr<Frame> frame;  // rgb/depth/features/instances/gt_pose set
    Mask gt_dynamic;               // pixels hit by the moving box
    ImageBuffer static_rgb;        // ray-cast with the moving box removed
    ImageBuffer static_depth;
    ImageBuffer patch_features;    // native quarter-resolution feature map
};

struct SynthData {
    Camera camera;
    std::vector<SynthFrame> frames;
    Eigen::Vector3d swept_min, swept_max;  // AABB swept by the dynamic box
    SynthConfig config;
};

// Ray-casts the scene (independent of the splat renderer): nearest-hit color
// and depth, per-object unit feature embeddings plus Gaussian noise at
// quarter resolution, an instance mask for the moving box, and ground-truth
// dynamic masks.
SynthData synth_generate(const SynthConfig& cfg);

// Writes TUM layout plus features/, instances/, gt_masks/, gt_static/ and
// meta.json. Same config -> byte-identical directory contents.
void synth_write(const SynthData& data, const std::string& dir);

// load_tum plus automatic feature/instance attachment from the standard
// subdirectories when present.
Sequence load_synth(const std::string& dir);

struct SynthMeta {
    int n_frames = 0;
    std::uint64_t seed = 0;
    Eigen::Vector3d swept_min, swept_max;
    Eigen::Vector3d dynamic_half, dynamic_velocity;
};

SynthMeta read_synth_meta(const std::string& dir);

FrameProvider make_provider(const SynthData& data);

// --- trajectory evaluation ---------------------------------------------------------

struct RigidTransform {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    double scale = 1.0;

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * (R * p) + t; }
};

// Least-squares rigid alignment mapping est onto gt (scale fixed to 1 unless
// with_scale). Throws "rank deficient" for degenerate (collinear) inputs.
RigidTransform umeyama_align(const std::vector<Eigen::Vector3d>& est,
                             const std::vector<Eigen::Vector3d>& gt, bool with_scale = false);

// RMSE of translational residuals after alignment, in centimeters. Pairs are
// matched by nearest timestamp within 0.02 s; fewer than 3 matches throws.
double ate_rmse(const std::vector<std::pair<double, Pose>>& est,
                const std::vector<std::pair<double, Pose>>& gt);
double ate_rmse_points(const std::vector<Eigen::Vector3d>& est,
                       const std::vector<Eigen::Vector3d>& gt);

}  // namespace up
