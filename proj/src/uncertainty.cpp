#include "up/uncertainty.hpp"

#include "up/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace up {

ImageBuffer box_filter3(const ImageBuffer& depth, bool zero_invalid) {
    if (depth.channels != 1) throw std::invalid_argument("box_filter3: expected one channel");
    ImageBuffer out(depth.width, depth.height, 1);
    parallel_for(depth.height, [&](std::int64_t y) {
        for (int x = 0; x < depth.width; ++x) {
            double sum = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = std::clamp<int>(static_cast<int>(y) + dy, 0, depth.height - 1);
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = std::clamp(x + dx, 0, depth.width - 1);
                    const double v = depth.at(xx, yy);
                    if (zero_invalid && v == 0.0) continue;
                    sum += v;
                    ++n;
                }
            }
            out.at(x, static_cast<int>(y)) = n > 0 ? sum / n : 0.0;
        }
    });
    return out;
}

ImageBuffer bilinear_upsample(const ImageBuffer& feat, int out_height, int out_width) {
    ImageBuffer out(out_width, out_height, feat.channels);
    const double sx = static_cast<double>(feat.width) / out_width;
    const double sy = static_cast<double>(feat.height) / out_height;
    parallel_for(out_height, [&](std::int64_t y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, feat.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, feat.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, feat.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, feat.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < feat.channels; ++c) {
                const double top = (1 - wx) * feat.at(x0, y0, c) + wx * feat.at(x1, y0, c);
                const double bot = (1 - wx) * feat.at(x0, y1, c) + wx * feat.at(x1, y1, c);
                out.at(x, static_cast<int>(y), c) = (1 - wy) * top + wy * bot;
            }
        }
    });
    return out;
}

ResidualMap residual_map(const RenderOutput& render, const ImageBuffer& frame_color,
                         const ImageBuffer& frame_depth, const ImageBuffer& frame_feat,
                         const ImageBuffer& lifted_feat, const ResidualWeights& weights,
                         bool literal_gate) {
    const int W = render.color.width, H = render.color.height;
    if (frame_color.width != W || frame_color.height != H || frame_color.channels != 3 ||
        frame_depth.width != W || frame_depth.height != H || frame_depth.channels != 1)
        throw std::invalid_argument("residual_map: buffer dims mismatch");
    const bool use_feat = frame_feat.channels > 0 && lifted_feat.channels > 0;
    if (use_feat &&
        (!frame_feat.same_shape(lifted_feat) || frame_feat.width != W || frame_feat.height != H))
        throw std::invalid_argument("residual_map: feature dims mismatch");

    ResidualMap rm;
    rm.weights = weights;
    rm.R = ImageBuffer(W, H, 1);
    rm.color_term = ImageBuffer(W, H, 1);
    rm.depth_term = ImageBuffer(W, H, 1);
    rm.feature_term = ImageBuffer(W, H, 1);

    const ImageBuffer depth_smooth = box_filter3(frame_depth);
    const int C = frame_feat.channels;

    parallel_for(H, [&](std::int64_t yy) {
        const int y = static_cast<int>(yy);
        for (int x = 0; x < W; ++x) {
            double dc = 0;
            for (int c = 0; c < 3; ++c)
                dc += std::abs(render.color.at(x, y, c) - frame_color.at(x, y, c));
            dc /= 3.0;

            double dd = 0;
            if (frame_depth.at(x, y) > 0.0)
                dd = std::abs(render.depth.at(x, y) - depth_smooth.at(x, y));

            double df = 0;
            if (use_feat) {
                double dot = 0, na = 0, nb = 0;
                for (int c = 0; c < C; ++c) {
                    const double a = frame_feat.at(x, y, c);
                    const double b = lifted_feat.at(x, y, c);
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                const double denom = std::sqrt(na) * std::sqrt(nb);
                const double cosv = denom > 1e-12 ? dot / denom : 0.0;
                df = std::min(1.0, 1.0 - cosv);
            }

            rm.color_term.at(x, y) = dc;
            rm.depth_term.at(x, y) = dd;
            rm.feature_term.at(x, y) = df;

            const double trans = render.trans.at(x, y);
            const bool gate = literal_gate ? trans < kTransGate : trans >= kTransGate;
            const double r = weights.color * dc + weights.depth * dd + weights.feature * df;
            rm.R.at(x, y) = gate ? std::max(0.0, r) : 0.0;
        }
    });
    return rm;
}

UncertaintyMap solve_sigma(const ResidualMap& residual) {
    UncertaintyMap u;
    u.sigma = ImageBuffer(residual.R.width, residual.R.height, 1);
    for (size_t i = 0; i < residual.R.data.size(); ++i)
        u.sigma.data[i] = std::max(kSigmaFloor, std::sqrt(2.0 * residual.R.data[i]));
    return u;
}

MotionMask motion_mask(const UncertaintyMap& u) {
    MotionMask m(u.sigma.width, u.sigma.height);
    for (size_t i = 0; i < u.sigma.data.size(); ++i)
        m.data[i] = 2.0 * u.sigma.data[i] * u.sigma.data[i] > 1.0 ? 1 : 0;
    return m;
}

MotionMask iou_refine(const MotionMask& mask, const std::vector<Mask>& instances, double tau) {
    MotionMask out = mask;
    for (const Mask& inst : instances) {
        if (inst.width != mask.width || inst.height != mask.height)
            throw std::invalid_argument("iou_refine: instance dims mismatch");
        size_t inter = 0, uni = 0;
        for (size_t i = 0; i < inst.data.size(); ++i) {
            const bool a = inst.data[i] != 0, b = mask.data[i] != 0;
            inter += a && b;
            uni += a || b;
        }
        if (uni == 0) continue;
        if (static_cast<double>(inter) / static_cast<double>(uni) > tau)
            for (size_t i = 0; i < inst.data.size(); ++i)
                if (inst.data[i]) out.data[i] = 1;
    }
    return out;
}

UncertaintyMap predict_uncertainty(const ImageBuffer& feat, const Mlp& f_u, MlpCache* cache) {
    if (feat.channels != f_u.in_dim())
        throw std::invalid_argument("predict_uncertainty: feature dim mismatch");
    if (f_u.out_dim() != 1)
        throw std::invalid_argument("predict_uncertainty: head must output one channel");

    const int W = feat.width, H = feat.height;
    const Eigen::Index n = static_cast<Eigen::Index>(W) * H;
    Eigen::MatrixXd in(feat.channels, n);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < feat.channels; ++c)
                in(c, static_cast<Eigen::Index>(y) * W + x) = feat.at(x, y, c);

    const Eigen::MatrixXd sig = f_u.forward(in, cache);
    UncertaintyMap u;
    u.sigma = ImageBuffer(W, H, 1);
    for (Eigen::Index i = 0; i < n; ++i) u.sigma.data[static_cast<size_t>(i)] = sig(0, i) + kSigmaFloor;
    return u;
}

UncertaintyLoss uncertainty_loss(const ImageBuffer& R, const ImageBuffer& sigma, double lambda3) {
    if (!R.same_shape(sigma)) throw std::invalid_argument("uncertainty_loss: dims mismatch");
    const double n = static_cast<double>(R.data.size());
    UncertaintyLoss out;
    out.d_sigma = ImageBuffer(sigma.width, sigma.height, 1);
    double sum = 0;
    for (size_t i = 0; i < R.data.size(); ++i) {
        const double s = sigma.data[i];
        if (!(s > 0)) throw std::invalid_argument("uncertainty_loss: sigma must be positive");
        const double r = R.data[i];
        sum += r / (2.0 * s * s) + lambda3 * std::log(s);
        out.d_sigma.data[i] = (-r / (s * s * s) + lambda3 / s) / n;
    }
    out.value = sum / n;
    return out;
}

}  // namespace up
