// Tracking / mapping pipeline: per-frame pose tracking against a frozen map
// snapshot, keyframe selection, map optimization, and the two execution modes
// (parallel tracker+mapper threads, or a deterministic interleaved loop).

#pragma once

#include "up/anchors.hpp"
#include "up/geometry.hpp"
#include "up/losses.hpp"
#include "up/render.hpp"
#include "up/uncertainty.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace up {

// One input frame. Color in [0,1], depth in meters with 0 = invalid.
// `features` is empty or HxWxC at full camera resolution (loaders upsample).
struct Frame {
  int index = 0;
  double timestamp = 0.0;
  ImageBuffer rgb;
  ImageBuffer depth;
  ImageBuffer features;
  std::vector<Mask> instances;
  std::optional<Pose> gt_pose;
};

struct Keyframe {
  std::shared_ptr<const Frame> frame;
  Pose pose;
  MotionMask mask;   // tracker's motion mask at selection time
  double t = 0.0;    // normalized sequence time in [0,1)
};

// Frozen view of the map handed from mapper to tracker. The tracker renders
// the pre-decoded gaussian list directly, so a snapshot never touches the
// octree or decoders after construction.
struct MapSnapshot {
  int version = 0;
  int frame_index = -1;  // keyframe the snapshot was decoded at
  std::vector<Gaussian> gaussians;
  std::shared_ptr<const Mlp> f_m;  // feature lift used for residuals
  bool empty() const { return gaussians.empty(); }
};

enum class TrackMode { kGroundTruth, kPhotometric };

struct PipelineConfig {
  TrackMode mode = TrackMode::kGroundTruth;
  bool deterministic = false;
  std::uint64_t seed = 1;

  // Octree / decoding.
  Eigen::Vector3d octree_origin{-5.0, -5.0, -5.0};
  double octree_extent = 10.0;
  double leaf_size = 0.1;
  int n_l = 16;
  int grow_stride = 2;
  double prune_threshold = kPruneThreshold;
  bool prune_enabled = true;

  // Optimization.
  int map_iters = 50;        // optimization iterations per keyframe
  int final_rounds = 0;      // extra refinement passes over stored keyframes
  double lr = 2e-3;
  LossWeights weights;
  ResidualWeights residual_weights;

  // Tracking.
  int track_iters = 20;
  double track_step = 1.0;   // initial line-search step scale

  // Keyframe policy.
  double kf_trans = 0.05;        // meters
  double kf_rot_deg = 5.0;       // degrees
  int kf_every = 5;              // force every Nth frame

  int queue_capacity = 8;
};

// --- keyframe policy -------------------------------------------------------

bool keyframe_select(const Pose& pose, const Pose& last_kf_pose, int frame_index,
                     int last_kf_index, const PipelineConfig& cfg);

// --- tracker ----------------------------------------------------------------

struct TrackResult {
  Pose pose;
  MotionMask mask;
  ResidualMap residual;
  UncertaintyMap sigma;
  RenderOutput render;         // render of the snapshot at the solved pose
  bool snapshot_empty = false; // constant-velocity fallback was used
  int iterations = 0;          // photometric iterations actually run
  double loss = 0.0;           // final masked photometric loss
};

class Tracker {
 public:
  Tracker(Camera camera, PipelineConfig config);

  TrackResult step(const Frame& frame, const MapSnapshot& snapshot);

  const MotionMask& last_mask() const { return last_mask_; }

 private:
  Pose constant_velocity_init() const;
  Pose solve_pose(const Frame& frame, const MapSnapshot& snapshot, Pose init,
                  int* iters_out, double* loss_out) const;

  Camera camera_;
  PipelineConfig config_;
  Pose prev_pose_;
  Pose prev_prev_pose_;
  int n_tracked_ = 0;
  MotionMask last_mask_;
};

// --- mapper -----------------------------------------------------------------

struct MapperStats {
  int frames_mapped = 0;
  int anchors_grown = 0;
  std::size_t anchors_pruned = 0;
  int diverged_batches = 0;  // optimization batches rolled back on non-finite loss
  double last_loss = 0.0;
};

// Post-hoc view of one frame against a finished map: the final render, the
// residual field, and the evaluation motion mask (residual-driven, instance
// refined).
struct EvalFrame {
  RenderOutput render;
  ResidualMap residual;
  MotionMask mask;
};

class Mapper {
 public:
  Mapper(Camera camera, PipelineConfig config);

  // Full mapping step for one keyframe: grow, optimize, refine the motion
  // mask, update anchor occupancy, prune, and return a fresh snapshot.
  std::shared_ptr<const MapSnapshot> step(const Keyframe& kf);

  EvalFrame evaluate(const Frame& frame, const Pose& pose, double t) const;

  // Extra optimization passes over all stored keyframes (no growing/pruning).
  void refine(int rounds);

  std::shared_ptr<const MapSnapshot> make_snapshot(const Pose& pose, double t,
                                                   int frame_index);

  const Octree& octree() const { return octree_; }
  Octree& octree() { return octree_; }
  const DecoderSet& decoders() const { return decoders_; }
  const Mlp& f_m() const { return f_m_; }
  const Mlp& f_u() const { return f_u_; }
  const MapperStats& stats() const { return stats_; }
  const std::vector<Keyframe>& keyframes() const { return keyframes_; }
  // Post-refinement motion mask (tracker mask OR predicted uncertainty).
  const MotionMask& refined_mask(int kf_slot) const { return refined_masks_.at(kf_slot); }

 private:
  struct ParamBackup;
  double optimize_once(const Keyframe& kf, const MotionMask& mask,
                       RenderOutput* render_out);
  void train_uncertainty(const Keyframe& kf, const RenderOutput& render);
  MotionMask refine_mask(const Keyframe& kf) const;
  ParamBackup backup_params() const;
  void restore_params(const ParamBackup& b);

  Camera camera_;
  PipelineConfig config_;
  std::mt19937_64 rng_;
  Octree octree_;
  DecoderSet decoders_;
  Mlp f_m_;
  Mlp f_u_;
  AdamState adam_c_, adam_a_, adam_s_, adam_q_, adam_d_, adam_m_, adam_u_;
  int snapshot_version_ = 0;
  std::vector<Keyframe> keyframes_;
  std::vector<MotionMask> refined_masks_;
  MapperStats stats_;
};

// --- thread plumbing ---------------------------------------------------------

// Blocking bounded MPSC queue. push() blocks while full; pop() returns
// nullopt once the queue is closed and drained, or immediately when poisoned.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(T value) {
    std::unique_lock<std::mutex> lock(mutex_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_ || poisoned_; });
    if (closed_ || poisoned_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock<std::mutex> lock(mutex_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_ || poisoned_; });
    if (poisoned_ || items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  void close() {
    std::lock_guard<std::mutex> lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  // Abandon pending items; producers and consumers unblock immediately.
  void poison() {
    std::lock_guard<std::mutex> lock(mutex_);
    poisoned_ = true;
    items_.clear();
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  bool poisoned() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return poisoned_;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return items_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  std::size_t capacity_;
  bool closed_ = false;
  bool poisoned_ = false;
};

// Single-writer shared snapshot slot.
class SnapshotSlot {
 public:
  void publish(std::shared_ptr<const MapSnapshot> snap) {
    std::lock_guard<std::mutex> lock(mutex_);
    snapshot_ = std::move(snap);
  }
  std::shared_ptr<const MapSnapshot> load() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return snapshot_;
  }

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const MapSnapshot> snapshot_;
};

// --- full runs ---------------------------------------------------------------

// A frame provider decouples the pipeline from dataset storage; frames are
// materialized one at a time in index order.
struct FrameProvider {
  Camera camera;
  int n_frames = 0;
  std::function<std::shared_ptr<const Frame>(int)> get;
};

struct FrameRecord {
  int index = 0;
  double timestamp = 0.0;
  Pose pose;
  MotionMask mask;
  bool keyframe = false;
  bool snapshot_empty = false;
  double track_loss = 0.0;
  double track_ms = 0.0;
};

struct RunResult {
  std::vector<FrameRecord> frames;
  int n_keyframes = 0;
  std::size_t n_anchors = 0;
  std::size_t n_gaussians = 0;  // in the final snapshot
  int snapshot_versions = 0;
  int diverged_batches = 0;
  double track_ms_total = 0.0;
  double map_ms_total = 0.0;
  double wall_ms = 0.0;
  bool aborted = false;          // mapper thread failed and poisoned the queue
  std::string abort_reason;
  std::shared_ptr<Mapper> mapper;  // final map state (octree, decoders, heads)
};

RunResult run_interleaved(const FrameProvider& frames, const PipelineConfig& config);
RunResult run_parallel(const FrameProvider& frames, const PipelineConfig& config);
// Dispatches on config.deterministic.
RunResult run_pipeline(const FrameProvider& frames, const PipelineConfig& config);

// --- trajectory files ---------------------------------------------------------
// One line per frame: "timestamp tx ty tz qx qy qz qw", 9 decimal places.

void save_trajectory(const std::string& path,
                     const std::vector<std::pair<double, Pose>>& traj);
std::vector<std::pair<double, Pose>> load_trajectory(const std::string& path);

std::vector<std::pair<double, Pose>> trajectory_of(const RunResult& run);

}  // namespace up
