#include "up/losses.hpp"

#include "up/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace up {

namespace {

constexpr int kWin = 11, kHalf = 5;
constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

std::array<double, kWin> ssim_window() {
    std::array<double, kWin> w{};
    double sum = 0;
    for (int k = 0; k < kWin; ++k) {
        const double d = k - kHalf;
        w[k] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += w[k];
    }
    for (double& v : w) v /= sum;
    return w;
}

// Separable clamped-border Gaussian filter, every channel independently.
ImageBuffer filt_sep(const ImageBuffer& in) {
    static const std::array<double, kWin> w = ssim_window();
    ImageBuffer tmp(in.width, in.height, in.channels);
    parallel_for(in.height, [&](std::int64_t y) {
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c) {
                double acc = 0;
                for (int k = -kHalf; k <= kHalf; ++k)
                    acc += w[k + kHalf] * in.at(std::clamp(x + k, 0, in.width - 1),
                                                static_cast<int>(y), c);
                tmp.at(x, static_cast<int>(y), c) = acc;
            }
    });
    ImageBuffer out(in.width, in.height, in.channels);
    parallel_for(in.height, [&](std::int64_t y) {
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c) {
                double acc = 0;
                for (int k = -kHalf; k <= kHalf; ++k)
                    acc += w[k + kHalf] *
                           tmp.at(x, std::clamp(static_cast<int>(y) + k, 0, in.height - 1), c);
                out.at(x, static_cast<int>(y), c) = acc;
            }
    });
    return out;
}

// Exact adjoint of filt_sep (scatter with the same clamped indexing), needed
// so border-pixel gradients match finite differences.
ImageBuffer filt_sep_adjoint(const ImageBuffer& in) {
    static const std::array<double, kWin> w = ssim_window();
    ImageBuffer tmp(in.width, in.height, in.channels);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c) {
                const double v = in.at(x, y, c);
                if (v == 0.0) continue;
                for (int k = -kHalf; k <= kHalf; ++k)
                    tmp.at(x, std::clamp(y + k, 0, in.height - 1), c) += w[k + kHalf] * v;
            }
    ImageBuffer out(in.width, in.height, in.channels);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c) {
                const double v = tmp.at(x, y, c);
                if (v == 0.0) continue;
                for (int k = -kHalf; k <= kHalf; ++k)
                    out.at(std::clamp(x + k, 0, in.width - 1), y, c) += w[k + kHalf] * v;
            }
    return out;
}

ImageBuffer hadamard(const ImageBuffer& a, const ImageBuffer& b) {
    ImageBuffer out(a.width, a.height, a.channels);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

struct SsimFields {
    ImageBuffer mu_a, mu_b, var_a, var_b, cov_ab;  // per channel
    ImageBuffer s;                                 // per-channel SSIM
};

SsimFields ssim_fields(const ImageBuffer& a, const ImageBuffer& b) {
    SsimFields f;
    f.mu_a = filt_sep(a);
    f.mu_b = filt_sep(b);
    f.var_a = filt_sep(hadamard(a, a));
    f.var_b = filt_sep(hadamard(b, b));
    f.cov_ab = filt_sep(hadamard(a, b));
    f.s = ImageBuffer(a.width, a.height, a.channels);
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double ma = f.mu_a.data[i], mb = f.mu_b.data[i];
        f.var_a.data[i] -= ma * ma;
        f.var_b.data[i] -= mb * mb;
        f.cov_ab.data[i] -= ma * mb;
        const double a1 = 2 * ma * mb + kC1, a2 = 2 * f.cov_ab.data[i] + kC2;
        const double b1 = ma * ma + mb * mb + kC1, b2 = f.var_a.data[i] + f.var_b.data[i] + kC2;
        f.s.data[i] = a1 * a2 / (b1 * b2);
    }
    return f;
}

}  // namespace

SsimResult ssim(const ImageBuffer& a, const ImageBuffer& b) {
    if (!a.same_shape(b) || a.channels < 1) throw std::invalid_argument("ssim: dims mismatch");
    const SsimFields f = ssim_fields(a, b);
    SsimResult r;
    r.map = ImageBuffer(a.width, a.height, 1);
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            double m = 0;
            for (int c = 0; c < a.channels; ++c) m += f.s.at(x, y, c);
            r.map.at(x, y) = m / a.channels;
        }
    double sum = 0;
    for (double v : r.map.data) sum += v;
    r.value = sum / r.map.data.size();
    return r;
}

ImageBuffer ssim_backward(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer& weight) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim_backward: dims mismatch");
    if (weight.width != a.width || weight.height != a.height || weight.channels != 1)
        throw std::invalid_argument("ssim_backward: weight dims mismatch");
    const SsimFields f = ssim_fields(a, b);

    // Pixel-level partials of s w.r.t. the filtered fields, scaled by the
    // per-channel weight (the channel mean contributes 1/C).
    ImageBuffer g_mu(a.width, a.height, a.channels);
    ImageBuffer g_var(a.width, a.height, a.channels);
    ImageBuffer g_cov(a.width, a.height, a.channels);
    ImageBuffer g_cov_mub(a.width, a.height, a.channels);
    ImageBuffer g_var_mua(a.width, a.height, a.channels);
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            const double wpx = weight.at(x, y) / a.channels;
            for (int c = 0; c < a.channels; ++c) {
                const double ma = f.mu_a.at(x, y, c), mb = f.mu_b.at(x, y, c);
                const double a1 = 2 * ma * mb + kC1, a2 = 2 * f.cov_ab.at(x, y, c) + kC2;
                const double b1 = ma * ma + mb * mb + kC1;
                const double b2 = f.var_a.at(x, y, c) + f.var_b.at(x, y, c) + kC2;
                const double s = f.s.at(x, y, c);
                const double ds_dmu = 2 * mb * a2 / (b1 * b2) - 2 * ma * s / b1;
                const double ds_dvar = -s / b2;
                const double ds_dcov = 2 * a1 / (b1 * b2);
                g_mu.at(x, y, c) = wpx * ds_dmu;
                g_var.at(x, y, c) = wpx * ds_dvar;
                g_cov.at(x, y, c) = wpx * ds_dcov;
                g_var_mua.at(x, y, c) = wpx * ds_dvar * ma;
                g_cov_mub.at(x, y, c) = wpx * ds_dcov * mb;
            }
        }

    // var_a = filt(a^2) - mu_a^2 and cov = filt(ab) - mu_a mu_b also push
    // gradient through mu_a, folded in here before the adjoint filter.
    for (size_t i = 0; i < g_mu.data.size(); ++i)
        g_mu.data[i] -= 2.0 * g_var_mua.data[i] + g_cov_mub.data[i];

    const ImageBuffer t_mu = filt_sep_adjoint(g_mu);
    const ImageBuffer t_var = filt_sep_adjoint(g_var);
    const ImageBuffer t_cov = filt_sep_adjoint(g_cov);

    ImageBuffer d_a(a.width, a.height, a.channels);
    for (size_t i = 0; i < d_a.data.size(); ++i)
        d_a.data[i] = t_mu.data[i] + 2.0 * a.data[i] * t_var.data[i] + b.data[i] * t_cov.data[i];
    return d_a;
}

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: dims mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double masked_psnr(const ImageBuffer& a, const ImageBuffer& b, const Mask& dynamic_mask) {
    if (!a.same_shape(b)) throw std::invalid_argument("masked_psnr: dims mismatch");
    if (dynamic_mask.width != a.width || dynamic_mask.height != a.height)
        throw std::invalid_argument("masked_psnr: mask dims mismatch");
    double mse = 0;
    size_t n = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (dynamic_mask.at(x, y)) continue;
            for (int c = 0; c < a.channels; ++c) {
                const double d = a.at(x, y, c) - b.at(x, y, c);
                mse += d * d;
                ++n;
            }
        }
    if (n == 0) throw std::runtime_error("masked_psnr: empty evaluation region");
    mse /= static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

GeoLossResult geo_loss(const ImageBuffer& render_color, const ImageBuffer& render_depth,
                       const ImageBuffer& frame_color, const ImageBuffer& frame_depth,
                       const LossWeights& w, const ImageBuffer* pixel_weight) {
    if (!render_color.same_shape(frame_color) || !render_depth.same_shape(frame_depth) ||
        render_color.width != render_depth.width || render_color.height != render_depth.height)
        throw std::invalid_argument("geo_loss: dims mismatch");
    const int W = render_color.width, H = render_color.height;
    const double uniform = 1.0 / (static_cast<double>(W) * H);

    const SsimResult s = ssim(render_color, frame_color);

    GeoLossResult r;
    r.map = ImageBuffer(W, H, 1);
    r.d_color = ImageBuffer(W, H, 3);
    r.d_depth = ImageBuffer(W, H, 1);
    ImageBuffer ssim_w(W, H, 1);

    double value = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double wpx = pixel_weight ? pixel_weight->at(x, y) : uniform;
            double cterm = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = render_color.at(x, y, c) - frame_color.at(x, y, c);
                cterm += d * d;
                r.d_color.at(x, y, c) = w.l1 * w.lambda * 2.0 * d * wpx;
            }
            double dterm = 0;
            if (frame_depth.at(x, y) > 0.0) {
                const double dd = render_depth.at(x, y) - frame_depth.at(x, y);
                dterm = dd * dd;
                r.d_depth.at(x, y) = w.l2 * 2.0 * dd * wpx;
            }
            const double lg = w.l1 * (w.lambda * cterm + (1.0 - w.lambda) * (1.0 - s.map.at(x, y))) +
                              w.l2 * dterm;
            r.map.at(x, y) = lg;
            value += wpx * lg;
            ssim_w.at(x, y) = -w.l1 * (1.0 - w.lambda) * wpx;
        }
    r.value = value;

    const ImageBuffer d_ssim = ssim_backward(render_color, frame_color, ssim_w);
    for (size_t i = 0; i < r.d_color.data.size(); ++i) r.d_color.data[i] += d_ssim.data[i];
    return r;
}

FeatureLossResult feature_loss(const ImageBuffer& target, const ImageBuffer& rendered) {
    if (!target.same_shape(rendered)) throw std::invalid_argument("feature_loss: dims mismatch");
    const int C = target.channels;
    FeatureLossResult r;
    r.map = ImageBuffer(target.width, target.height, 1);
    double sum = 0;
    for (int y = 0; y < target.height; ++y)
        for (int x = 0; x < target.width; ++x) {
            double dot = 0, na = 0, nb = 0;
            for (int c = 0; c < C; ++c) {
                const double f = target.at(x, y, c), g = rendered.at(x, y, c);
                dot += f * g;
                na += f * f;
                nb += g * g;
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            if (na < 1e-8 || nb < 1e-8) continue;
            const double v = 1.0 - dot / (na * nb);
            r.map.at(x, y) = v;
            sum += v;
            ++r.valid;
        }
    r.value = r.valid > 0 ? sum / static_cast<double>(r.valid) : 0.0;
    return r;
}

ImageBuffer feature_loss_backward(const ImageBuffer& target, const ImageBuffer& rendered,
                                  const ImageBuffer& weight) {
    if (!target.same_shape(rendered))
        throw std::invalid_argument("feature_loss_backward: dims mismatch");
    const int C = target.channels;
    ImageBuffer d(rendered.width, rendered.height, C);
    for (int y = 0; y < target.height; ++y)
        for (int x = 0; x < target.width; ++x) {
            double dot = 0, na = 0, nb = 0;
            for (int c = 0; c < C; ++c) {
                const double f = target.at(x, y, c), g = rendered.at(x, y, c);
                dot += f * g;
                na += f * f;
                nb += g * g;
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            if (na < 1e-8 || nb < 1e-8) continue;
            const double wpx = weight.at(x, y);
            const double cosv = dot / (na * nb);
            for (int c = 0; c < C; ++c) {
                const double f = target.at(x, y, c), g = rendered.at(x, y, c);
                // d(1-cos)/dg = -(f/(na nb) - cos g/nb^2)
                d.at(x, y, c) = -wpx * (f / (na * nb) - cosv * g / (nb * nb));
            }
        }
    return d;
}

ImageBuffer lift_features(const ImageBuffer& feat, const Mlp& f_m, MlpCache* cache) {
    if (feat.channels != f_m.in_dim())
        throw std::invalid_argument("lift_features: feature dim mismatch");
    const int W = feat.width, H = feat.height;
    const Eigen::Index n = static_cast<Eigen::Index>(W) * H;
    Eigen::MatrixXd in(feat.channels, n);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < feat.channels; ++c)
                in(c, static_cast<Eigen::Index>(y) * W + x) = feat.at(x, y, c);
    const Eigen::MatrixXd out = f_m.forward(in, cache);
    ImageBuffer lifted(W, H, f_m.out_dim());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < f_m.out_dim(); ++c)
                lifted.at(x, y, c) = out(c, static_cast<Eigen::Index>(y) * W + x);
    return lifted;
}

LiftBackwardResult lift_backward(const Mlp& f_m, const MlpCache& cache,
                                 const ImageBuffer& d_lifted) {
    const int W = d_lifted.width, H = d_lifted.height;
    const Eigen::Index n = static_cast<Eigen::Index>(W) * H;
    if (d_lifted.channels != f_m.out_dim() || cache.input.cols() != n)
        throw std::invalid_argument("lift_backward: dims mismatch");
    Eigen::MatrixXd g(d_lifted.channels, n);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < d_lifted.channels; ++c)
                g(c, static_cast<Eigen::Index>(y) * W + x) = d_lifted.at(x, y, c);

    LiftBackwardResult r;
    const Eigen::MatrixXd d_in = f_m.backward(cache, g, &r.d_fm);
    r.d_feat = ImageBuffer(W, H, f_m.in_dim());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < f_m.in_dim(); ++c)
                r.d_feat.at(x, y, c) = d_in(c, static_cast<Eigen::Index>(y) * W + x);
    return r;
}

TotalLossResult total_loss(const RenderOutput& render, const ImageBuffer& frame_color,
                           const ImageBuffer& frame_depth, const ImageBuffer& frame_feat,
                           const Mask& static_mask, const std::vector<Gaussian>& gaussians,
                           const LossWeights& weights, const Mlp* f_m) {
    const int W = render.color.width, H = render.color.height;
    if (static_mask.width != W || static_mask.height != H)
        throw std::invalid_argument("total_loss: mask dims mismatch");

    const size_t included = static_mask.count();
    ImageBuffer wpx(W, H, 1);
    if (included > 0) {
        const double v = 1.0 / static_cast<double>(included);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (static_mask.at(x, y)) wpx.at(x, y) = v;
    }

    TotalLossResult r;
    GeoLossResult geo =
        geo_loss(render.color, render.depth, frame_color, frame_depth, weights, &wpx);
    r.geo = geo.value;
    r.d_color = std::move(geo.d_color);
    r.d_depth = std::move(geo.d_depth);

    const bool distill = f_m != nullptr && frame_feat.channels > 0 && render.feat.channels > 0;
    if (distill) {
        MlpCache cache;
        const ImageBuffer lifted = lift_features(render.feat, *f_m, &cache);
        const FeatureLossResult fl = feature_loss(frame_feat, lifted);
        double dist = 0;
        ImageBuffer fw(W, H, 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                dist += wpx.at(x, y) * fl.map.at(x, y);
                fw.at(x, y) = weights.l4 * wpx.at(x, y);
            }
        r.dist = dist;
        const ImageBuffer d_lifted = feature_loss_backward(frame_feat, lifted, fw);
        LiftBackwardResult lb = lift_backward(*f_m, cache, d_lifted);
        r.d_fm = std::move(lb.d_fm);
        r.d_feat = std::move(lb.d_feat);
    }

    if (!gaussians.empty()) {
        double s = 0;
        for (const Gaussian& g : gaussians) s += g.scale.sum();
        const double n = 3.0 * static_cast<double>(gaussians.size());
        r.scale = weights.l5 * s / n;
        r.d_scale_component = weights.l5 / n;
    }

    r.value = r.geo + weights.l4 * r.dist + r.scale;
    return r;
}

}  // namespace up
