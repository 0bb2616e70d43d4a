#include "up/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace up {

namespace {

double log_odds_of(double p) {
    if (!(p > 0.0) || !(p < 1.0)) throw std::domain_error("saturated probability");
    return std::log(p / (1.0 - p));
}

// Spreads the low 21 bits of v so consecutive bits land 3 apart.
std::uint64_t spread3(std::uint64_t v) {
    v &= 0x1fffff;
    v = (v | v << 32) & 0x1f00000000ffffULL;
    v = (v | v << 16) & 0x1f0000ff0000ffULL;
    v = (v | v << 8) & 0x100f00f00f00f00fULL;
    v = (v | v << 4) & 0x10c30c30c30c30c3ULL;
    v = (v | v << 2) & 0x1249249249249249ULL;
    return v;
}

std::uint32_t compact3(std::uint64_t v) {
    v &= 0x1249249249249249ULL;
    v = (v ^ (v >> 2)) & 0x10c30c30c30c30c3ULL;
    v = (v ^ (v >> 4)) & 0x100f00f00f00f00fULL;
    v = (v ^ (v >> 8)) & 0x1f0000ff0000ffULL;
    v = (v ^ (v >> 16)) & 0x1f00000000ffffULL;
    v = (v ^ (v >> 32)) & 0x1fffff;
    return static_cast<std::uint32_t>(v);
}

double inv_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace

Octree::Octree(const Eigen::Vector3d& origin, double extent, int depth)
    : origin_(origin), extent_(extent), depth_(depth) {
    if (!(extent > 0) || depth < 0 || depth > 10)
        throw std::invalid_argument("octree: bad extent/depth");
}

Octree Octree::with_leaf_size(const Eigen::Vector3d& origin, double extent, double leaf_size) {
    if (!(leaf_size > 0)) throw std::invalid_argument("octree: bad leaf size");
    int depth = 0;
    while (depth < 10 && extent / static_cast<double>(std::int64_t{1} << depth) > leaf_size) ++depth;
    return Octree(origin, extent, depth);
}

bool Octree::contains(const Eigen::Vector3d& p) const {
    for (int i = 0; i < 3; ++i)
        if (p[i] < origin_[i] || p[i] >= origin_[i] + extent_) return false;
    return true;
}

std::uint64_t Octree::voxel_key(const Eigen::Vector3d& p) const {
    if (!contains(p)) throw std::out_of_range("outside octree");
    const double cells = static_cast<double>(std::int64_t{1} << depth_);
    std::uint32_t idx[3];
    for (int i = 0; i < 3; ++i) {
        double c = (p[i] - origin_[i]) / extent_ * cells;
        idx[i] = static_cast<std::uint32_t>(std::min(c, cells - 1.0));
    }
    return morton(idx[0], idx[1], idx[2]);
}

Eigen::Vector3d Octree::voxel_center(std::uint64_t key) const {
    const double vs = voxel_size();
    return origin_ + vs * Eigen::Vector3d(compact3(key) + 0.5, compact3(key >> 1) + 0.5,
                                          compact3(key >> 2) + 0.5);
}

std::uint64_t Octree::morton(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) {
    return spread3(ix) | spread3(iy) << 1 | spread3(iz) << 2;
}

std::vector<std::uint64_t> Octree::sorted_keys() const {
    std::vector<std::uint64_t> keys;
    keys.reserve(anchors.size());
    for (const auto& [k, a] : anchors) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    return keys;
}

double bayes_update(double p_prev, double p_obs, double p_prior) {
    const double l = log_odds_of(p_prev) + log_odds_of(p_obs) - log_odds_of(p_prior);
    const double p = 1.0 / (1.0 + std::exp(-l));
    return std::clamp(p, 1e-6, 1.0 - 1e-6);
}

void observe_anchors(Octree& octree, const Pose& pose, const Camera& cam, const Mask& motion_mask,
                     const ImageBuffer& observed_depth, double p_hit, double p_miss,
                     double p_prior) {
    if (motion_mask.width != cam.width || motion_mask.height != cam.height ||
        observed_depth.width != cam.width || observed_depth.height != cam.height)
        throw std::invalid_argument("observe_anchors: dims mismatch");
    const double window = 3.0 * octree.voxel_size();
    for (auto& [key, anchor] : octree.anchors) {
        const auto px = project_point(anchor.center, pose, cam);
        if (!px) continue;
        const int x = static_cast<int>(px->u);
        const int y = static_cast<int>(px->v);
        if (x < 0 || x >= cam.width || y < 0 || y >= cam.height) continue;
        if (std::abs(observed_depth.at(x, y) - px->z) >= window) continue;
        const bool dynamic = motion_mask.at(x, y);
        anchor.set_p_dyn(bayes_update(anchor.p_dyn(), dynamic ? p_hit : p_miss, p_prior));
    }
}

int grow(Octree& octree, const ImageBuffer& depth, const Pose& pose, const Camera& cam,
         const Mask& static_mask, int stride, int frame_index, std::mt19937_64& rng) {
    if (stride < 1) throw std::invalid_argument("grow: stride must be >= 1");
    std::uniform_real_distribution<double> feat_init(-0.1, 0.1);
    std::uniform_real_distribution<double> off_init(-0.25, 0.25);
    int added = 0;
    for (int y = 0; y < cam.height; y += stride)
        for (int x = 0; x < cam.width; x += stride) {
            if (!static_mask.at(x, y)) continue;
            const double z = depth.at(x, y);
            if (z <= 0.0) continue;
            const Eigen::Vector3d p = back_project(x + 0.5, y + 0.5, z, pose, cam);
            if (!octree.contains(p)) continue;
            const std::uint64_t key = octree.voxel_key(p);
            if (octree.anchors.count(key)) continue;

            Anchor a;
            a.center = octree.voxel_center(key);
            a.feature = Eigen::VectorXd::NullaryExpr(kAnchorFeatureDim,
                                                     [&](Eigen::Index) { return feat_init(rng); });
            a.offsets.resize(kSplatsPerAnchor);
            for (Eigen::Vector3d& o : a.offsets)
                o = Eigen::Vector3d(off_init(rng), off_init(rng), off_init(rng));
            a.log_odds = 0.0;  // p_dyn = 0.5
            a.created_at = frame_index;
            a.feat_m = Eigen::VectorXd::Zero(kAnchorFeatureDim);
            a.feat_v = Eigen::VectorXd::Zero(kAnchorFeatureDim);
            a.off_m = Eigen::VectorXd::Zero(3 * kSplatsPerAnchor);
            a.off_v = Eigen::VectorXd::Zero(3 * kSplatsPerAnchor);
            octree.anchors.emplace(key, std::move(a));
            ++added;
        }
    return added;
}

std::size_t prune(Octree& octree, double threshold) {
    if (!(threshold > 0.0) || !(threshold < 1.0)) throw std::invalid_argument("prune: bad threshold");
    std::size_t removed = 0;
    for (auto it = octree.anchors.begin(); it != octree.anchors.end();) {
        if (it->second.p_dyn() > threshold) {
            it = octree.anchors.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    return removed;
}

DecoderSet DecoderSet::create(int k, int n_l, int feat_dim, double voxel_size,
                              std::mt19937_64& rng) {
    DecoderSet d;
    d.k = k;
    d.n_l = n_l;
    d.feat_dim = feat_dim;
    const int in = d.in_dim();
    d.f_c = Mlp({in, 32, 3 * k}, Activation::Relu, Activation::Sigmoid, rng);
    d.f_a = Mlp({in, 32, k}, Activation::Relu, Activation::Sigmoid, rng);
    d.f_s = Mlp({in, 32, 3 * k}, Activation::Relu, Activation::Softplus, rng);
    d.f_q = Mlp({in, 32, 4 * k}, Activation::Relu, Activation::None, rng);
    d.f_d = Mlp({in, 32, n_l * k}, Activation::Softplus, Activation::None, rng);
    d.f_s.layers_mut().back().bias.setConstant(inv_softplus(0.5 * voxel_size));
    Eigen::VectorXd& qb = d.f_q.layers_mut().back().bias;
    for (int s = 0; s < k; ++s) qb[4 * s + 3] = 1.0;
    return d;
}

DecodeResult decode(const Octree& octree, const DecoderSet& dec, const Pose& pose,
                    const Camera& cam, double t, double p_threshold) {
    DecodeResult r;
    r.voxel_size = octree.voxel_size();

    const Eigen::Vector2d lt = temporal_encode(t);
    const Eigen::Vector3d c_cam = pose.t;

    std::vector<const Anchor*> visible;
    for (std::uint64_t key : octree.sorted_keys()) {
        const Anchor& a = octree.anchors.at(key);
        if (a.p_dyn() > p_threshold) continue;
        const auto px = project_point(a.center, pose, cam);
        if (!px) continue;
        if (px->u < 0 || px->u >= cam.width || px->v < 0 || px->v >= cam.height) continue;
        r.keys.push_back(key);
        visible.push_back(&a);
    }

    const int n = static_cast<int>(visible.size());
    r.input.resize(dec.in_dim(), n);
    for (int i = 0; i < n; ++i) {
        const Anchor& a = *visible[i];
        if (a.feature.size() != dec.feat_dim)
            throw std::invalid_argument("decode: anchor feature dim mismatch");
        Eigen::Vector3d to_cam = c_cam - a.center;
        const double dist = to_cam.norm();
        to_cam = dist > 1e-12 ? Eigen::Vector3d(to_cam / dist) : Eigen::Vector3d(0, 0, 1);
        r.input.col(i) << a.feature, dist, to_cam, lt;
    }
    if (n == 0) return r;

    const Eigen::MatrixXd out_c = dec.f_c.forward(r.input, &r.cache_c);
    const Eigen::MatrixXd out_a = dec.f_a.forward(r.input, &r.cache_a);
    const Eigen::MatrixXd out_s = dec.f_s.forward(r.input, &r.cache_s);
    const Eigen::MatrixXd out_q = dec.f_q.forward(r.input, &r.cache_q);
    const Eigen::MatrixXd out_d = dec.f_d.forward(r.input, &r.cache_d);

    r.gaussians.reserve(static_cast<size_t>(n) * dec.k);
    for (int i = 0; i < n; ++i) {
        const Anchor& a = *visible[i];
        if (static_cast<int>(a.offsets.size()) != dec.k)
            throw std::invalid_argument("decode: anchor offset count mismatch");
        for (int s = 0; s < dec.k; ++s) {
            Gaussian g;
            g.mu = a.center + a.offsets[s] * r.voxel_size;
            g.color = out_c.block<3, 1>(3 * s, i);
            g.opacity = out_a(s, i);
            g.scale = out_s.block<3, 1>(3 * s, i);
            Eigen::Vector4d q = out_q.block<4, 1>(4 * s, i);
            const double qn = q.norm();
            q = qn > 1e-12 ? Eigen::Vector4d(q / qn) : Eigen::Vector4d(0, 0, 0, 1);
            g.rot = Eigen::Quaterniond(q[3], q[0], q[1], q[2]);
            g.feat = out_d.block(dec.n_l * s, i, dec.n_l, 1);
            r.gaussians.push_back(std::move(g));
        }
    }
    return r;
}

DecodeGrads decode_backward(const DecodeResult& result, const DecoderSet& dec,
                            const std::vector<GaussianGrad>& gg) {
    const int n = static_cast<int>(result.keys.size());
    if (gg.size() != result.gaussians.size())
        throw std::invalid_argument("decode_backward: gradient count mismatch");

    DecodeGrads out;
    out.g_c = dec.f_c.zero_grad();
    out.g_a = dec.f_a.zero_grad();
    out.g_s = dec.f_s.zero_grad();
    out.g_q = dec.f_q.zero_grad();
    out.g_d = dec.f_d.zero_grad();
    out.d_feature.assign(n, Eigen::VectorXd::Zero(dec.feat_dim));
    out.d_offsets.assign(n, std::vector<Eigen::Vector3d>(dec.k, Eigen::Vector3d::Zero()));
    if (n == 0) return out;

    Eigen::MatrixXd G_c = Eigen::MatrixXd::Zero(3 * dec.k, n);
    Eigen::MatrixXd G_a = Eigen::MatrixXd::Zero(dec.k, n);
    Eigen::MatrixXd G_s = Eigen::MatrixXd::Zero(3 * dec.k, n);
    Eigen::MatrixXd G_q = Eigen::MatrixXd::Zero(4 * dec.k, n);
    Eigen::MatrixXd G_d = Eigen::MatrixXd::Zero(dec.n_l * dec.k, n);

    // Raw pre-normalization quaternions: the last layer of f_q has no
    // activation, so its cached pre-activations are its outputs.
    const Eigen::MatrixXd& raw_q = result.cache_q.pre.back();

    for (int i = 0; i < n; ++i) {
        for (int s = 0; s < dec.k; ++s) {
            const GaussianGrad& g = gg[static_cast<size_t>(i) * dec.k + s];
            G_c.block<3, 1>(3 * s, i) = g.d_color;
            G_a(s, i) = g.d_opacity;
            G_s.block<3, 1>(3 * s, i) = g.d_scale;
            Eigen::Vector4d q = raw_q.block<4, 1>(4 * s, i);
            const double qn = q.norm();
            if (qn > 1e-12) {
                const Eigen::Vector4d qh = q / qn;
                G_q.block<4, 1>(4 * s, i) =
                    (Eigen::Matrix4d::Identity() - qh * qh.transpose()) * g.d_rot / qn;
            }
            if (g.d_feat.size() == dec.n_l) G_d.block(dec.n_l * s, i, dec.n_l, 1) = g.d_feat;
            out.d_offsets[i][s] = g.d_mu * result.voxel_size;
        }
    }

    const Eigen::MatrixXd in_c = dec.f_c.backward(result.cache_c, G_c, &out.g_c);
    const Eigen::MatrixXd in_a = dec.f_a.backward(result.cache_a, G_a, &out.g_a);
    const Eigen::MatrixXd in_s = dec.f_s.backward(result.cache_s, G_s, &out.g_s);
    const Eigen::MatrixXd in_q = dec.f_q.backward(result.cache_q, G_q, &out.g_q);
    const Eigen::MatrixXd in_d = dec.f_d.backward(result.cache_d, G_d, &out.g_d);
    for (int i = 0; i < n; ++i)
        out.d_feature[i] = in_c.col(i).head(dec.feat_dim) + in_a.col(i).head(dec.feat_dim) +
                           in_s.col(i).head(dec.feat_dim) + in_q.col(i).head(dec.feat_dim) +
                           in_d.col(i).head(dec.feat_dim);
    return out;
}

void anchor_adam_step(Anchor& anchor, const Eigen::VectorXd& d_feature,
                      const std::vector<Eigen::Vector3d>& d_offsets, double lr) {
    const int fd = static_cast<int>(anchor.feature.size());
    const int k = static_cast<int>(anchor.offsets.size());
    if (d_feature.size() != fd || static_cast<int>(d_offsets.size()) != k)
        throw std::invalid_argument("anchor_adam_step: gradient dims mismatch");
    if (!d_feature.allFinite()) throw std::runtime_error("diverged");

    if (anchor.feat_m.size() != fd) {
        anchor.feat_m = Eigen::VectorXd::Zero(fd);
        anchor.feat_v = Eigen::VectorXd::Zero(fd);
    }
    if (anchor.off_m.size() != 3 * k) {
        anchor.off_m = Eigen::VectorXd::Zero(3 * k);
        anchor.off_v = Eigen::VectorXd::Zero(3 * k);
    }

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    anchor.adam_step += 1;
    const double c1 = 1.0 - std::pow(b1, anchor.adam_step);
    const double c2 = 1.0 - std::pow(b2, anchor.adam_step);

    for (int i = 0; i < fd; ++i) {
        const double g = d_feature[i];
        anchor.feat_m[i] = b1 * anchor.feat_m[i] + (1 - b1) * g;
        anchor.feat_v[i] = b2 * anchor.feat_v[i] + (1 - b2) * g * g;
        anchor.feature[i] -= lr * (anchor.feat_m[i] / c1) / (std::sqrt(anchor.feat_v[i] / c2) + eps);
    }
    for (int s = 0; s < k; ++s)
        for (int d = 0; d < 3; ++d) {
            const double g = d_offsets[s][d];
            if (!std::isfinite(g)) throw std::runtime_error("diverged");
            const int i = 3 * s + d;
            anchor.off_m[i] = b1 * anchor.off_m[i] + (1 - b1) * g;
            anchor.off_v[i] = b2 * anchor.off_v[i] + (1 - b2) * g * g;
            anchor.offsets[s][d] -= lr * (anchor.off_m[i] / c1) / (std::sqrt(anchor.off_v[i] / c2) + eps);
        }
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("map file truncated");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    return lo | static_cast<std::uint64_t>(get_u32(is)) << 32;
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

double get_f64(std::istream& is) {
    const std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_named_mlp(std::ostream& os, const std::string& name, const Mlp& mlp) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    mlp.save(os);
}

}  // namespace

void save_map(const std::string& path, const Octree& octree, const DecoderSet& dec,
              const Mlp* f_m, const Mlp* f_u) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open map file for writing: " + path);
    os.write("UPMAP", 5);
    put_u32(os, 1);  // version
    for (int i = 0; i < 3; ++i) put_f64(os, octree.origin()[i]);
    put_f64(os, octree.extent());
    put_u32(os, static_cast<std::uint32_t>(octree.depth()));
    put_u32(os, static_cast<std::uint32_t>(dec.k));
    put_u32(os, static_cast<std::uint32_t>(dec.n_l));
    put_u32(os, static_cast<std::uint32_t>(dec.feat_dim));

    const std::vector<std::uint64_t> keys = octree.sorted_keys();
    put_u64(os, keys.size());
    for (std::uint64_t key : keys) {
        const Anchor& a = octree.anchors.at(key);
        put_u64(os, key);
        for (int i = 0; i < 3; ++i) put_f64(os, a.center[i]);
        put_f64(os, a.log_odds);
        put_u32(os, static_cast<std::uint32_t>(a.created_at));
        for (Eigen::Index i = 0; i < a.feature.size(); ++i) put_f64(os, a.feature[i]);
        for (const Eigen::Vector3d& o : a.offsets)
            for (int i = 0; i < 3; ++i) put_f64(os, o[i]);
    }

    std::uint32_t n_mlps = 5;
    if (f_m && !f_m->empty()) ++n_mlps;
    if (f_u && !f_u->empty()) ++n_mlps;
    put_u32(os, n_mlps);
    put_named_mlp(os, "F_c", dec.f_c);
    put_named_mlp(os, "F_a", dec.f_a);
    put_named_mlp(os, "F_s", dec.f_s);
    put_named_mlp(os, "F_q", dec.f_q);
    put_named_mlp(os, "F_d", dec.f_d);
    if (f_m && !f_m->empty()) put_named_mlp(os, "F_m", *f_m);
    if (f_u && !f_u->empty()) put_named_mlp(os, "F_u", *f_u);
    if (!os) throw std::runtime_error("map write failed: " + path);
}

LoadedMap load_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open map file: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::string(magic, 5) != "UPMAP") throw std::runtime_error("not a map file: " + path);
    if (get_u32(is) != 1) throw std::runtime_error("unsupported map version");

    Eigen::Vector3d origin;
    for (int i = 0; i < 3; ++i) origin[i] = get_f64(is);
    const double extent = get_f64(is);
    const int depth = static_cast<int>(get_u32(is));

    LoadedMap m;
    m.octree = Octree(origin, extent, depth);
    m.decoders.k = static_cast<int>(get_u32(is));
    m.decoders.n_l = static_cast<int>(get_u32(is));
    m.decoders.feat_dim = static_cast<int>(get_u32(is));

    const std::uint64_t n_anchors = get_u64(is);
    for (std::uint64_t i = 0; i < n_anchors; ++i) {
        const std::uint64_t key = get_u64(is);
        Anchor a;
        for (int j = 0; j < 3; ++j) a.center[j] = get_f64(is);
        a.log_odds = get_f64(is);
        a.created_at = static_cast<int>(get_u32(is));
        a.feature.resize(m.decoders.feat_dim);
        for (Eigen::Index j = 0; j < a.feature.size(); ++j) a.feature[j] = get_f64(is);
        a.offsets.resize(m.decoders.k);
        for (Eigen::Vector3d& o : a.offsets)
            for (int j = 0; j < 3; ++j) o[j] = get_f64(is);
        a.feat_m = Eigen::VectorXd::Zero(m.decoders.feat_dim);
        a.feat_v = Eigen::VectorXd::Zero(m.decoders.feat_dim);
        a.off_m = Eigen::VectorXd::Zero(3 * m.decoders.k);
        a.off_v = Eigen::VectorXd::Zero(3 * m.decoders.k);
        m.octree.anchors.emplace(key, std::move(a));
    }

    const std::uint32_t n_mlps = get_u32(is);
    for (std::uint32_t i = 0; i < n_mlps; ++i) {
        const std::uint32_t len = get_u32(is);
        if (len > 64) throw std::runtime_error("map file corrupt");
        std::string name(len, '\0');
        is.read(name.data(), len);
        Mlp mlp = Mlp::load(is);
        if (name == "F_c")
            m.decoders.f_c = std::move(mlp);
        else if (name == "F_a")
            m.decoders.f_a = std::move(mlp);
        else if (name == "F_s")
            m.decoders.f_s = std::move(mlp);
        else if (name == "F_q")
            m.decoders.f_q = std::move(mlp);
        else if (name == "F_d")
            m.decoders.f_d = std::move(mlp);
        else if (name == "F_m")
            m.f_m = std::move(mlp);
        else if (name == "F_u")
            m.f_u = std::move(mlp);
        else
            throw std::runtime_error("map file corrupt");
    }
    return m;
}

}  // namespace up
