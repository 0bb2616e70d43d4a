#include "up/render.hpp"

#include "up/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace up {

namespace {

Eigen::Matrix<double, 2, 3> proj_jacobian(const Eigen::Vector3d& p, const Camera& cam) {
    const double iz = 1.0 / p.z();
    const double iz2 = iz * iz;
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx * iz, 0.0, -cam.fx * p.x() * iz2,  //
        0.0, cam.fy * iz, -cam.fy * p.y() * iz2;
    return J;
}

double max_eigenvalue_2x2(const Eigen::Matrix2d& s) {
    const double mid = 0.5 * (s(0, 0) + s(1, 1));
    const double off = 0.5 * (s(0, 0) - s(1, 1));
    return mid + std::sqrt(off * off + s(0, 1) * s(0, 1));
}

}  // namespace

std::vector<ProjectedGaussian> prepare(const std::vector<Gaussian>& gaussians, const Pose& pose,
                                       const Camera& cam, const RenderSettings& settings,
                                       std::vector<Eigen::Vector3d>* p_cam_out) {
    cam.validate();
    std::vector<ProjectedGaussian> out;
    std::vector<Eigen::Vector3d> cams;
    out.reserve(gaussians.size());

    const double inf = std::numeric_limits<double>::infinity();
    for (int i = 0; i < static_cast<int>(gaussians.size()); ++i) {
        const Gaussian& g = gaussians[i];
        const Eigen::Vector3d p = pose.apply_inverse(g.mu);
        if (!(p.z() > settings.z_near)) continue;

        ProjectedGaussian pg;
        pg.index = i;
        pg.z = p.z();
        pg.mean2d.x() = cam.fx * p.x() / p.z() + cam.cx;
        pg.mean2d.y() = cam.fy * p.y() / p.z() + cam.cy;
        pg.opacity = g.opacity;
        pg.color = g.color;
        pg.feat = g.feat;

        const Eigen::Matrix2d cov2d =
            project_cov(world_cov(g.scale, g.rot), pose, cam, p, settings.cov_floor);
        pg.cov2d_inv = cov2d.inverse();
        pg.radius_px = settings.footprint_sigma > 0.0
                           ? settings.footprint_sigma * std::sqrt(max_eigenvalue_2x2(cov2d))
                           : inf;

        if (std::isfinite(pg.radius_px)) {
            // Pixel centers live on [0.5, dim - 0.5]; drop splats whose
            // footprint cannot reach any of them.
            if (pg.mean2d.x() + pg.radius_px < 0.5 || pg.mean2d.x() - pg.radius_px > cam.width - 0.5 ||
                pg.mean2d.y() + pg.radius_px < 0.5 || pg.mean2d.y() - pg.radius_px > cam.height - 0.5)
                continue;
        }
        out.push_back(std::move(pg));
        if (p_cam_out) cams.push_back(p);
    }

    std::vector<int> order(out.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (out[a].z != out[b].z) return out[a].z < out[b].z;
        return out[a].index < out[b].index;
    });

    std::vector<ProjectedGaussian> sorted;
    sorted.reserve(out.size());
    for (int idx : order) sorted.push_back(std::move(out[idx]));
    if (p_cam_out) {
        p_cam_out->clear();
        p_cam_out->reserve(cams.size());
        for (int idx : order) p_cam_out->push_back(cams[idx]);
    }
    return sorted;
}

RenderOutput render(const std::vector<ProjectedGaussian>& projected, const Camera& cam,
                    int feat_channels, const RenderSettings& settings, RenderCache* cache) {
    cam.validate();
    for (size_t i = 1; i < projected.size(); ++i)
        if (projected[i].z < projected[i - 1].z)
            throw std::logic_error("render: splats not sorted by depth");
    if (feat_channels > 0)
        for (const ProjectedGaussian& pg : projected)
            if (pg.feat.size() != feat_channels)
                throw std::invalid_argument("render: feature size mismatch");

    RenderOutput out;
    out.color = ImageBuffer(cam.width, cam.height, 3);
    out.depth = ImageBuffer(cam.width, cam.height, 1);
    out.trans = ImageBuffer(cam.width, cam.height, 1);
    out.feat = ImageBuffer(cam.width, cam.height, feat_channels);
    if (cache) {
        cache->width = cam.width;
        cache->height = cam.height;
        cache->pixels.assign(static_cast<size_t>(cam.width) * cam.height, {});
    }

    const int n = static_cast<int>(projected.size());
    parallel_for(cam.height, [&](std::int64_t y) {
        const double py = y + 0.5;
        // Row candidates, kept in depth order.
        std::vector<int> row;
        row.reserve(projected.size());
        for (int j = 0; j < n; ++j) {
            const ProjectedGaussian& pg = projected[j];
            if (!std::isfinite(pg.radius_px) || std::abs(py - pg.mean2d.y()) <= pg.radius_px)
                row.push_back(j);
        }

        Eigen::VectorXd facc(feat_channels);
        for (int x = 0; x < cam.width; ++x) {
            const double px = x + 0.5;
            double T = 1.0;
            Eigen::Vector3d cacc = Eigen::Vector3d::Zero();
            double dacc = 0.0, aacc = 0.0;
            facc.setZero();
            std::vector<RenderContrib>* pix =
                cache ? &cache->pixels[static_cast<size_t>(y) * cam.width + x] : nullptr;

            for (int j : row) {
                if (settings.early_stop > 0.0 && T < settings.early_stop) break;
                const ProjectedGaussian& pg = projected[j];
                const Eigen::Vector2d d(px - pg.mean2d.x(), py - pg.mean2d.y());
                if (std::isfinite(pg.radius_px) && d.squaredNorm() > pg.radius_px * pg.radius_px)
                    continue;
                const double q = 0.5 * d.dot(pg.cov2d_inv * d);
                const double sigma = pg.opacity * std::exp(-q);
                if (sigma < settings.sigma_skip) continue;

                const double w = sigma * T;
                cacc += w * pg.color;
                dacc += w * pg.z;
                aacc += w;
                if (feat_channels > 0) facc += w * pg.feat;
                if (pix) pix->push_back({j, sigma, T});
                T *= 1.0 - sigma;
            }

            for (int c = 0; c < 3; ++c) out.color.at(x, static_cast<int>(y), c) = cacc[c];
            out.depth.at(x, static_cast<int>(y)) = dacc;
            out.trans.at(x, static_cast<int>(y)) = aacc;
            for (int c = 0; c < feat_channels; ++c) out.feat.at(x, static_cast<int>(y), c) = facc[c];
        }
    });
    return out;
}

OraclePixel render_oracle(const std::vector<Gaussian>& gaussians, const Pose& pose,
                          const Camera& cam, int px, int py) {
    cam.validate();
    struct Entry {
        int index;
        double z, sigma;
        const Gaussian* g;
    };
    int feat_dim = 0;
    for (const Gaussian& g : gaussians) feat_dim = std::max(feat_dim, static_cast<int>(g.feat.size()));

    const Eigen::Vector2d pix(px + 0.5, py + 0.5);
    std::vector<Entry> entries;
    for (int i = 0; i < static_cast<int>(gaussians.size()); ++i) {
        const Gaussian& g = gaussians[i];
        const Eigen::Vector3d p = pose.apply_inverse(g.mu);
        if (!(p.z() > kZNear)) continue;
        const Eigen::Vector2d mean(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
        const Eigen::Matrix2d cov = project_cov(world_cov(g.scale, g.rot), pose, cam, p);
        const Eigen::Vector2d d = pix - mean;
        const double q = 0.5 * d.dot(cov.inverse() * d);
        entries.push_back({i, p.z(), g.opacity * std::exp(-q), &g});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.z != b.z) return a.z < b.z;
        return a.index < b.index;
    });

    OraclePixel out;
    out.feat = Eigen::VectorXd::Zero(feat_dim);
    double T = 1.0;
    for (const Entry& e : entries) {
        const double w = e.sigma * T;
        out.color += w * e.g->color;
        out.depth += w * e.z;
        out.trans += w;
        if (e.g->feat.size() > 0) out.feat.head(e.g->feat.size()) += w * e.g->feat;
        T *= 1.0 - e.sigma;
    }
    return out;
}

namespace {

// Per-projected-splat gradient accumulator in image space.
struct ProjAccum {
    Eigen::Vector2d d_mean2d = Eigen::Vector2d::Zero();
    Eigen::Matrix2d d_cov_inv = Eigen::Matrix2d::Zero();
    double d_z = 0, d_opacity = 0;
    Eigen::Vector3d d_color = Eigen::Vector3d::Zero();
    Eigen::VectorXd d_feat;
};

// dR/dq for a unit quaternion (x,y,z,w), contracted with G.
Eigen::Vector4d rotation_grad(const Eigen::Vector4d& q, const Eigen::Matrix3d& G) {
    const double x = q[0], y = q[1], z = q[2], w = q[3];
    Eigen::Matrix3d dx, dy, dz, dw;
    dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    dw << 0, -z, y, z, 0, -x, -y, x, 0;
    return 2.0 * Eigen::Vector4d(G.cwiseProduct(dx).sum(), G.cwiseProduct(dy).sum(),
                                 G.cwiseProduct(dz).sum(), G.cwiseProduct(dw).sum());
}

}  // namespace

std::vector<GaussianGrad> render_backward(const std::vector<ProjectedGaussian>& projected,
                                          const std::vector<Eigen::Vector3d>& p_cam,
                                          const std::vector<Gaussian>& gaussians, const Pose& pose,
                                          const Camera& cam, const RenderCache& cache,
                                          const ImageBuffer& grad_color,
                                          const ImageBuffer& grad_depth,
                                          const ImageBuffer* grad_feat) {
    if (projected.size() != p_cam.size())
        throw std::invalid_argument("render_backward: projected/p_cam size mismatch");
    if (cache.width != cam.width || cache.height != cam.height)
        throw std::invalid_argument("render_backward: cache size mismatch");
    if (grad_color.width != cam.width || grad_color.height != cam.height || grad_color.channels != 3 ||
        grad_depth.width != cam.width || grad_depth.height != cam.height || grad_depth.channels != 1)
        throw std::invalid_argument("render_backward: gradient buffer shape mismatch");
    const int feat_dim = grad_feat ? grad_feat->channels : 0;
    if (grad_feat && (grad_feat->width != cam.width || grad_feat->height != cam.height))
        throw std::invalid_argument("render_backward: gradient buffer shape mismatch");

    const int n_proj = static_cast<int>(projected.size());
    const int workers = chunk_workers(cam.height);
    std::vector<std::vector<ProjAccum>> partial(workers);

    parallel_chunks(cam.height, workers, [&](int worker, std::int64_t y0, std::int64_t y1) {
        std::vector<ProjAccum>& acc = partial[worker];
        acc.resize(n_proj);
        if (feat_dim > 0)
            for (ProjAccum& a : acc) a.d_feat = Eigen::VectorXd::Zero(feat_dim);

        Eigen::VectorXd gF(feat_dim);
        for (std::int64_t y = y0; y < y1; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                const std::vector<RenderContrib>& pix =
                    cache.pixels[static_cast<size_t>(y) * cam.width + x];
                if (pix.empty()) continue;

                const Eigen::Vector3d gC(grad_color.at(x, static_cast<int>(y), 0),
                                         grad_color.at(x, static_cast<int>(y), 1),
                                         grad_color.at(x, static_cast<int>(y), 2));
                const double gD = grad_depth.at(x, static_cast<int>(y));
                for (int c = 0; c < feat_dim; ++c) gF[c] = grad_feat->at(x, static_cast<int>(y), c);

                const Eigen::Vector2d pix_c(x + 0.5, y + 0.5);
                // Reverse scan; B carries sum_{j>i} a_j sigma_j prod_{i<k<j}(1-sigma_k),
                // so d sigma_i = T_i (a_i - B) without dividing by (1 - sigma).
                double B = 0.0;
                for (int k = static_cast<int>(pix.size()) - 1; k >= 0; --k) {
                    const RenderContrib& ct = pix[k];
                    const ProjectedGaussian& pg = projected[ct.pg];
                    ProjAccum& a = acc[ct.pg];

                    double ai = gC.dot(pg.color) + gD * pg.z;
                    if (feat_dim > 0) ai += gF.dot(pg.feat);
                    const double d_sigma = ct.trans_at * (ai - B);
                    B = ct.sigma * ai + (1.0 - ct.sigma) * B;

                    const double w = ct.sigma * ct.trans_at;
                    a.d_color += w * gC;
                    a.d_z += w * gD;
                    if (feat_dim > 0) a.d_feat += w * gF;

                    const Eigen::Vector2d d = pix_c - pg.mean2d;
                    const double gauss = std::exp(-0.5 * d.dot(pg.cov2d_inv * d));
                    a.d_opacity += gauss * d_sigma;
                    const double s = pg.opacity * gauss * d_sigma;
                    a.d_mean2d += s * (pg.cov2d_inv * d);
                    a.d_cov_inv += (-0.5 * s) * (d * d.transpose());
                }
            }
        }
    });

    // Ordered reduction keeps the result independent of the worker count.
    std::vector<ProjAccum>& total = partial[0];
    if (total.empty()) {
        total.resize(n_proj);
        if (feat_dim > 0)
            for (ProjAccum& a : total) a.d_feat = Eigen::VectorXd::Zero(feat_dim);
    }
    for (int w = 1; w < workers; ++w) {
        if (partial[w].empty()) continue;
        for (int j = 0; j < n_proj; ++j) {
            total[j].d_mean2d += partial[w][j].d_mean2d;
            total[j].d_cov_inv += partial[w][j].d_cov_inv;
            total[j].d_z += partial[w][j].d_z;
            total[j].d_opacity += partial[w][j].d_opacity;
            total[j].d_color += partial[w][j].d_color;
            if (feat_dim > 0) total[j].d_feat += partial[w][j].d_feat;
        }
    }

    std::vector<GaussianGrad> grads(gaussians.size());
    for (GaussianGrad& g : grads) g.d_feat = Eigen::VectorXd::Zero(feat_dim);

    const Eigen::Matrix3d W = pose.rotation().transpose();  // world -> camera
    parallel_for(n_proj, [&](std::int64_t j) {
        const ProjAccum& a = total[j];
        const ProjectedGaussian& pg = projected[j];
        const Gaussian& src = gaussians[pg.index];
        GaussianGrad& out = grads[pg.index];

        out.d_color = a.d_color;
        out.d_opacity = a.d_opacity;
        if (feat_dim > 0) out.d_feat = a.d_feat;

        // d Sigma' = -A dA A for the symmetric inverse.
        const Eigen::Matrix2d A = pg.cov2d_inv;
        const Eigen::Matrix2d g_cov2d = -A * a.d_cov_inv * A;

        const Eigen::Vector3d& p = p_cam[j];
        const Eigen::Matrix<double, 2, 3> J = proj_jacobian(p, cam);
        const Eigen::Matrix3d sigma_cam = W * world_cov(src.scale, src.rot) * W.transpose();

        const Eigen::Matrix3d g_sigma_cam = J.transpose() * g_cov2d * J;
        const Eigen::Matrix<double, 2, 3> g_J = 2.0 * g_cov2d * J * sigma_cam;
        const Eigen::Matrix3d g_sigma_w = W.transpose() * g_sigma_cam * W;

        // Sigma_w = M M^T with M = R diag(s).
        const Eigen::Vector4d q_raw(src.rot.x(), src.rot.y(), src.rot.z(), src.rot.w());
        const double q_norm = q_raw.norm();
        const Eigen::Vector4d q_hat = q_raw / q_norm;
        const Eigen::Matrix3d R = quat_to_rot(q_raw);
        const Eigen::Matrix3d M = R * src.scale.asDiagonal();
        const Eigen::Matrix3d g_M = 2.0 * g_sigma_w * M;

        Eigen::Matrix3d g_R;
        for (int c = 0; c < 3; ++c) {
            g_R.col(c) = g_M.col(c) * src.scale[c];
            out.d_scale[c] = g_M.col(c).dot(R.col(c));
        }
        const Eigen::Vector4d g_qhat = rotation_grad(q_hat, g_R);
        out.d_rot = (Eigen::Matrix4d::Identity() - q_hat * q_hat.transpose()) * g_qhat / q_norm;

        // Back through the pinhole map: mean2d rows of J, depth along z, and
        // the J entries themselves (they depend on p_cam).
        Eigen::Vector3d g_p = J.transpose() * a.d_mean2d;
        g_p.z() += a.d_z;
        const double iz2 = 1.0 / (p.z() * p.z());
        const double iz3 = iz2 / p.z();
        g_p.x() += g_J(0, 2) * (-cam.fx * iz2);
        g_p.y() += g_J(1, 2) * (-cam.fy * iz2);
        g_p.z() += g_J(0, 0) * (-cam.fx * iz2) + g_J(1, 1) * (-cam.fy * iz2) +
                   g_J(0, 2) * (2.0 * cam.fx * p.x() * iz3) + g_J(1, 2) * (2.0 * cam.fy * p.y() * iz3);

        out.d_mu = W.transpose() * g_p;
    });

    return grads;
}

}  // namespace up
