// Forward rasterization of a Gaussian set into per-pixel color, depth,
// accumulated transmittance and low-dimensional feature buffers, the naive
// per-pixel oracle used for equivalence testing, and the reverse-mode pass
// that turns per-pixel buffer gradients into per-Gaussian attribute
// gradients.
//
// Blending (front to back, pixel center at integer+0.5):
//   sigma_i = o_i * exp(-1/2 d^T Sigma'^-1 d),     d = pixel - mean2d
//   {C,D,F} = sum {c_i, z_i, f_i} sigma_i T_i,     T_i = prod_{j<i}(1-sigma_j)
//   Ttilde  = sum sigma_i T_i
// Depth is alpha-weighted, not alpha-normalized. Background is zero.

#pragma once

#include "up/geometry.hpp"

#include <vector>

namespace up {

struct RenderSettings {
    double sigma_skip = 1.0 / 255.0;  // drop contributions below this
    double early_stop = 1e-4;         // stop once prod(1-sigma) falls below
    double footprint_sigma = 3.0;     // cutoff radius multiplier; <= 0 disables culling
    double z_near = kZNear;
    double cov_floor = kCovFloor2d;

    static RenderSettings production() { return {}; }
    // All thresholds off: matches the oracle exactly and keeps the forward
    // smooth for gradient checks.
    static RenderSettings exact() {
        RenderSettings s;
        s.sigma_skip = 0.0;
        s.early_stop = 0.0;
        s.footprint_sigma = 0.0;
        return s;
    }
};

struct ProjectedGaussian {
    int index = 0;  // position in the source Gaussian list
    Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
    Eigen::Matrix2d cov2d_inv = Eigen::Matrix2d::Identity();
    double z = 0;
    double opacity = 0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    Eigen::VectorXd feat;
    double radius_px = 0;
};

struct RenderOutput {
    ImageBuffer color;  // H x W x 3
    ImageBuffer depth;  // H x W x 1, alpha-weighted meters
    ImageBuffer trans;  // H x W x 1, accumulated transmittance in [0,1]
    ImageBuffer feat;   // H x W x N_l
};

// One blended contribution; trans_at is T_i before this splat is composited.
struct RenderContrib {
    int pg = 0;
    double sigma = 0;
    double trans_at = 1;
};

struct RenderCache {
    int width = 0, height = 0;
    std::vector<std::vector<RenderContrib>> pixels;
};

// Projects, culls (behind camera / footprint off screen) and sorts splats
// ascending by z, ties broken by ascending source index. When p_cam_out is
// given it receives the camera-frame centers aligned with the output.
std::vector<ProjectedGaussian> prepare(const std::vector<Gaussian>& gaussians, const Pose& pose,
                                       const Camera& cam,
                                       const RenderSettings& settings = RenderSettings::production(),
                                       std::vector<Eigen::Vector3d>* p_cam_out = nullptr);

// Rasterizes sorted splats. Throws on unsorted input. Rows are rendered in
// parallel; pixels are independent, so the result does not depend on the
// worker count.
RenderOutput render(const std::vector<ProjectedGaussian>& projected, const Camera& cam,
                    int feat_channels, const RenderSettings& settings = RenderSettings::production(),
                    RenderCache* cache = nullptr);

struct OraclePixel {
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double depth = 0;
    double trans = 0;
    Eigen::VectorXd feat;
};

// Naive reference: blends ALL Gaussians sorted by depth at one pixel with no
// skip, early-stop or footprint culling. Kept independent of prepare/render.
OraclePixel render_oracle(const std::vector<Gaussian>& gaussians, const Pose& pose,
                          const Camera& cam, int px, int py);

// Gradient of a scalar loss w.r.t. one Gaussian's attributes.
struct GaussianGrad {
    Eigen::Vector3d d_mu = Eigen::Vector3d::Zero();
    double d_opacity = 0;
    Eigen::Vector3d d_color = Eigen::Vector3d::Zero();
    Eigen::Vector3d d_scale = Eigen::Vector3d::Zero();
    Eigen::Vector4d d_rot = Eigen::Vector4d::Zero();  // (x,y,z,w)
    Eigen::VectorXd d_feat;
};

// Reverse pass: per-pixel gradients on the color/depth/feature buffers are
// chained through the blending sum, the 2D covariance projection and the
// pinhole projection back to world-space attributes. grad_feat may be null.
// The returned vector is aligned with the source Gaussian list used by
// prepare; culled splats receive zero gradients.
std::vector<GaussianGrad> render_backward(const std::vector<ProjectedGaussian>& projected,
                                          const std::vector<Eigen::Vector3d>& p_cam,
                                          const std::vector<Gaussian>& gaussians, const Pose& pose,
                                          const Camera& cam, const RenderCache& cache,
                                          const ImageBuffer& grad_color,
                                          const ImageBuffer& grad_depth,
                                          const ImageBuffer* grad_feat);

}  // namespace up
