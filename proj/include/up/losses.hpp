// Geometric, distillation and total mapping losses with analytic gradients,
// plus the image-quality metrics used in reports. All gradients are exact
// for the clamped-border filtering actually computed, so they pass central
// finite-difference checks at every pixel including image borders.

#pragma once

#include "up/geometry.hpp"
#include "up/nn.hpp"
#include "up/render.hpp"

#include <limits>

namespace up {

struct LossWeights {
    double lambda = 0.8;  // SSIM mix inside the photometric term
    double l1 = 0.6;      // photometric
    double l2 = 1.0;      // depth
    double l3 = 0.4;      // uncertainty regularizer
    double l4 = 0.01;     // distillation
    double l5 = 0.01;     // mean-scale
};

struct SsimResult {
    double value = 0;  // mean over channels and pixels, in [-1, 1]
    ImageBuffer map;   // H x W per-pixel SSIM (channel mean)
};

// 11x11 Gaussian window, sigma 1.5, C1=0.01^2, C2=0.03^2 on unit range,
// replicate borders.
SsimResult ssim(const ImageBuffer& a, const ImageBuffer& b);

// Gradient of sum_px weight(px) * ssim_map(px) w.r.t. a. weight is H x W.
ImageBuffer ssim_backward(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer& weight);

// 10 log10(1 / MSE); identical inputs give +infinity.
double psnr(const ImageBuffer& a, const ImageBuffer& b);

// PSNR over pixels not flagged dynamic. Throws "empty evaluation region"
// when the mask covers everything.
double masked_psnr(const ImageBuffer& a, const ImageBuffer& b, const Mask& dynamic_mask);

struct GeoLossResult {
    double value = 0;
    ImageBuffer map;      // per-pixel L_g, kept for masking
    ImageBuffer d_color;  // gradient of value w.r.t. rendered color
    ImageBuffer d_depth;
};

// L_g per pixel = l1 (lambda |C~-C|^2 + (1-lambda)(1-SSIM)) + l2 (D~-D)^2.
// The color norm sums over channels; pixels with invalid (zero) frame depth
// contribute no depth term. pixel_weight (H x W) replaces the uniform 1/N
// averaging when given; value = sum_px weight * map.
GeoLossResult geo_loss(const ImageBuffer& render_color, const ImageBuffer& render_depth,
                       const ImageBuffer& frame_color, const ImageBuffer& frame_depth,
                       const LossWeights& weights, const ImageBuffer* pixel_weight = nullptr);

struct FeatureLossResult {
    double value = 0;   // mean of (1 - cos) over pixels with non-degenerate norms
    ImageBuffer map;    // per-pixel 1 - cos; zero where a norm underflows
    size_t valid = 0;
};

FeatureLossResult feature_loss(const ImageBuffer& target, const ImageBuffer& rendered);

// Gradient of sum_px weight(px) * map(px) w.r.t. the rendered features.
ImageBuffer feature_loss_backward(const ImageBuffer& target, const ImageBuffer& rendered,
                                  const ImageBuffer& weight);

// Per-pixel forward of F_m lifting N_l-channel rendered features to the
// N_h-channel supervision space. Cache columns are pixels in row-major
// order.
ImageBuffer lift_features(const ImageBuffer& feat, const Mlp& f_m, MlpCache* cache = nullptr);

struct LiftBackwardResult {
    MlpGrad d_fm;
    ImageBuffer d_feat;  // gradient w.r.t. the N_l input features
};

LiftBackwardResult lift_backward(const Mlp& f_m, const MlpCache& cache,
                                 const ImageBuffer& d_lifted);

struct TotalLossResult {
    double value = 0;
    double geo = 0, dist = 0, scale = 0;  // masked L_g mean, masked L_d mean, l5 * s-bar
    ImageBuffer d_color, d_depth;         // gradients w.r.t. rendered buffers
    ImageBuffer d_feat;                   // w.r.t. rendered N_l features; empty if unused
    MlpGrad d_fm;
    double d_scale_component = 0;  // gradient of value w.r.t. every scale entry
};

// L = mean over included pixels of (L_g + l4 L_d) + l5 * mean scale.
// static_mask: true = include the pixel. frame_feat may be empty and f_m
// null, which disables the distillation term. Gradients reach the rendered
// buffers, F_m and the Gaussian scales; the uncertainty head is trained on
// a separate objective and receives nothing from here.
TotalLossResult total_loss(const RenderOutput& render, const ImageBuffer& frame_color,
                           const ImageBuffer& frame_depth, const ImageBuffer& frame_feat,
                           const Mask& static_mask, const std::vector<Gaussian>& gaussians,
                           const LossWeights& weights, const Mlp* f_m);

}  // namespace up
