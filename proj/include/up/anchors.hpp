// The adaptively structured scene: a probabilistic octree of anchors,
// Bayesian motion-probability updates, anchor-to-Gaussian decoding through
// the view/time-conditioned MLPs, growth from depth and pruning.

#pragma once

#include "up/geometry.hpp"
#include "up/nn.hpp"
#include "up/render.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace up {

inline constexpr int kAnchorFeatureDim = 32;
inline constexpr int kSplatsPerAnchor = 8;
inline constexpr double kPHit = 0.7;
inline constexpr double kPMiss = 0.4;
inline constexpr double kPPrior = 0.5;
inline constexpr double kPruneThreshold = 0.85;

struct Anchor {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();  // exact leaf-voxel center
    Eigen::VectorXd feature;                           // learnable, dim 32
    std::vector<Eigen::Vector3d> offsets;              // learnable, k entries, in voxel units
    double log_odds = 0;                               // motion probability as log-odds
    int created_at = 0;

    // Optimizer moments ride along so state survives anchor churn; they are
    // not serialized.
    Eigen::VectorXd feat_m, feat_v;
    Eigen::VectorXd off_m, off_v;  // 3k, flattened offsets
    int adam_step = 0;

    double p_dyn() const { return 1.0 / (1.0 + std::exp(-log_odds)); }
    void set_p_dyn(double p) { log_odds = std::log(p / (1.0 - p)); }
};

// Fixed-depth voxel hash over a cubic root volume. Anchors live at the leaf
// level only; keys are Morton interleavings of the integer cell coordinates.
class Octree {
  public:
    Octree() = default;
    Octree(const Eigen::Vector3d& origin, double extent, int depth);

    // Picks the shallowest depth (capped at 10) whose voxels are no larger
    // than leaf_size.
    static Octree with_leaf_size(const Eigen::Vector3d& origin, double extent, double leaf_size);

    const Eigen::Vector3d& origin() const { return origin_; }
    double extent() const { return extent_; }
    int depth() const { return depth_; }
    double voxel_size() const { return extent_ / static_cast<double>(std::int64_t{1} << depth_); }

    bool contains(const Eigen::Vector3d& p) const;
    // Throws "outside octree" for points beyond the root volume.
    std::uint64_t voxel_key(const Eigen::Vector3d& p) const;
    Eigen::Vector3d voxel_center(std::uint64_t key) const;

    static std::uint64_t morton(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz);

    // Keys in ascending order; the canonical iteration order wherever
    // ordering is observable (decode, serialization).
    std::vector<std::uint64_t> sorted_keys() const;

    std::unordered_map<std::uint64_t, Anchor> anchors;

  private:
    Eigen::Vector3d origin_ = Eigen::Vector3d::Zero();
    double extent_ = 0;
    int depth_ = 0;
};

// Log-odds Bayes update: L_new = L_prev + L_obs - L_prior, returned as a
// probability clamped to (1e-6, 1-1e-6). Throws "saturated probability" for
// arguments at 0 or 1.
double bayes_update(double p_prev, double p_obs, double p_prior);

// Every anchor that projects into the image and whose camera depth agrees
// with observed_depth within 3 voxel sizes receives one observation: p_hit
// where the pixel is flagged dynamic, p_miss otherwise. Anchors outside the
// view or the depth window are untouched. The pipeline passes the measured
// frame depth: an anchor occluded by a (masked) mover then falls outside the
// window and keeps its belief, while an anchor whose surface the mover has
// vacated is re-observed at its own depth and collects the evidence.
void observe_anchors(Octree& octree, const Pose& pose, const Camera& cam, const Mask& motion_mask,
                     const ImageBuffer& observed_depth, double p_hit = kPHit,
                     double p_miss = kPMiss, double p_prior = kPPrior);

// Back-projects every stride-th pixel that is static and carries valid
// depth, and creates an anchor in each empty leaf hit. Existing leaves are
// never modified, so grow is idempotent per frame. static_mask: true =
// spawn anchors there.
int grow(Octree& octree, const ImageBuffer& depth, const Pose& pose, const Camera& cam,
         const Mask& static_mask, int stride, int frame_index, std::mt19937_64& rng);

// Removes anchors with p_dyn > threshold; returns how many.
std::size_t prune(Octree& octree, double threshold = kPruneThreshold);

// The five per-anchor decoders. Input is concat(feature, distance, unit
// direction to the camera, temporal encoding) = feat_dim + 6.
struct DecoderSet {
    int k = kSplatsPerAnchor;
    int n_l = 16;
    int feat_dim = kAnchorFeatureDim;
    Mlp f_c;  // 3k, sigmoid
    Mlp f_a;  // k, sigmoid
    Mlp f_s;  // 3k, softplus
    Mlp f_q;  // 4k, raw; normalized per quaternion at decode
    Mlp f_d;  // n_l * k, softplus hidden per the published architecture

    int in_dim() const { return feat_dim + 6; }

    // Hidden width 32 everywhere; f_s biases start at inv-softplus of half a
    // voxel so fresh splats neither vanish nor blanket the scene; f_q biases
    // start at the identity quaternion.
    static DecoderSet create(int k, int n_l, int feat_dim, double voxel_size,
                             std::mt19937_64& rng);
};

// Everything decode must remember for the backward pass.
struct DecodeResult {
    std::vector<Gaussian> gaussians;     // grouped: anchor a -> slots a*k .. a*k+k-1
    std::vector<std::uint64_t> keys;     // visible anchors, in decode order
    Eigen::MatrixXd input;               // in_dim x n_anchors
    MlpCache cache_c, cache_a, cache_s, cache_q, cache_d;
    double voxel_size = 0;
};

// Decodes all visible anchors (center projects inside the image, in front of
// the near plane) with p_dyn <= p_threshold into k Gaussians each:
// mu_i = center + offset_i * voxel_size, remaining attributes from the
// decoder MLPs conditioned on view distance/direction and t.
DecodeResult decode(const Octree& octree, const DecoderSet& decoders, const Pose& pose,
                    const Camera& cam, double t, double p_threshold = kPruneThreshold);

struct DecodeGrads {
    MlpGrad g_c, g_a, g_s, g_q, g_d;
    std::vector<Eigen::VectorXd> d_feature;               // per visible anchor
    std::vector<std::vector<Eigen::Vector3d>> d_offsets;  // per visible anchor, k entries
};

// Chains per-Gaussian attribute gradients back to decoder parameters, anchor
// features and offsets. Voxel centers are fixed, so the view-geometry inputs
// absorb no gradient.
DecodeGrads decode_backward(const DecodeResult& result, const DecoderSet& decoders,
                            const std::vector<GaussianGrad>& gaussian_grads);

// One adaptive-moment step on a single anchor's feature and offsets.
void anchor_adam_step(Anchor& anchor, const Eigen::VectorXd& d_feature,
                      const std::vector<Eigen::Vector3d>& d_offsets, double lr = 2e-3);

// Map file: magic "UPMAP", octree parameters, anchor records, then the
// decoder checkpoints (and, when present, the lifting and uncertainty
// heads).
void save_map(const std::string& path, const Octree& octree, const DecoderSet& decoders,
              const Mlp* f_m = nullptr, const Mlp* f_u = nullptr);

struct LoadedMap {
    Octree octree;
    DecoderSet decoders;
    Mlp f_m, f_u;  // empty when absent from the file
};

LoadedMap load_map(const std::string& path);

}  // namespace up
