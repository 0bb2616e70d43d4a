// Multi-modal residuals, the training-free closed-form uncertainty used by
// the tracker, the learned per-pixel uncertainty head used by the mapper,
// motion-mask generation and IoU refinement against instance segmentation.

#pragma once

#include "up/geometry.hpp"
#include "up/nn.hpp"
#include "up/render.hpp"

#include <vector>

namespace up {

// true = dynamic.
using MotionMask = Mask;

struct ResidualWeights {
    double color = 0.25;
    double depth = 0.7;
    double feature = 0.1;
};

struct ResidualMap {
    ImageBuffer R;  // H x W, >= 0
    // Ungated component maps kept for diagnostics.
    ImageBuffer color_term, depth_term, feature_term;
    ResidualWeights weights;
};

struct UncertaintyMap {
    ImageBuffer sigma;  // H x W, > 0
};

// Mean over the 3x3 neighborhood with replicate padding. When zero_invalid
// is set, zero pixels are dropped from the mean and the output is zero only
// where the whole neighborhood is invalid.
ImageBuffer box_filter3(const ImageBuffer& depth, bool zero_invalid = true);

// Align-corners-false bilinear resampling of an h x w x C map to H x W.
ImageBuffer bilinear_upsample(const ImageBuffer& feat, int out_height, int out_width);

// Gated weighted residual per pixel:
//   R = gate * (w_c * mean|C~ - C| + w_d * |D~ - box3(D)| + w_f * min(1, 1 - cos(F, F^)))
// The gate is 1[trans >= 0.1]: pixels where the map rendered almost nothing
// carry no evidence. literal_gate flips it to 1[trans < 0.1]. The depth term
// is zero where the frame depth is invalid; the feature term is zero when
// either feature buffer is empty.
ResidualMap residual_map(const RenderOutput& render, const ImageBuffer& frame_color,
                         const ImageBuffer& frame_depth, const ImageBuffer& frame_feat,
                         const ImageBuffer& lifted_feat,
                         const ResidualWeights& weights = ResidualWeights(),
                         bool literal_gate = false);

// Per-pixel minimizer of 1/2 (R/sigma^2 + log sigma): sigma* = sqrt(2R),
// floored at 1e-3.
UncertaintyMap solve_sigma(const ResidualMap& residual);

inline constexpr double kSigmaFloor = 1e-3;
inline constexpr double kTransGate = 0.1;

// M = 1[2 sigma^2 > 1], strict.
MotionMask motion_mask(const UncertaintyMap& sigma);

// Unions every instance whose IoU with the input mask exceeds tau into the
// mask. IoUs are measured against the unmodified input, so the result does
// not depend on instance order. Output is a superset of the input.
MotionMask iou_refine(const MotionMask& mask, const std::vector<Mask>& instances,
                      double tau = 0.3);

// Per-pixel forward of the uncertainty head; sigma = f_u(F) + 1e-3. The
// final SoftPlus plus the floor keeps sigma strictly positive. With a cache
// the activations are retained for backprop; cache columns are pixels in
// row-major order.
UncertaintyMap predict_uncertainty(const ImageBuffer& feat, const Mlp& f_u,
                                   MlpCache* cache = nullptr);

struct UncertaintyLoss {
    double value = 0;
    ImageBuffer d_sigma;  // gradient of `value` w.r.t. sigma, per pixel
};

// L_u = mean(R/(2 sigma^2) + lambda3 log sigma). R is treated as a constant:
// no gradient flows back into the residuals. Throws if sigma is not
// positive everywhere.
UncertaintyLoss uncertainty_loss(const ImageBuffer& R, const ImageBuffer& sigma, double lambda3);

}  // namespace up
