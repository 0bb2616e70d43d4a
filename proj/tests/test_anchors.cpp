#include <doctest.h>

#include "up/anchors.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <set>

using namespace up;

namespace {

Octree desk_octree() { return Octree::with_leaf_size({-5, -5, -5}, 10.0, 0.1); }

Camera wide_camera() {
    Camera cam;
    cam.fx = cam.fy = 100.0;
    cam.cx = cam.cy = 50.0;
    cam.width = cam.height = 100;
    return cam;
}

// Inserts a bare anchor (sized for `dims`-dim features, k offsets) at the
// leaf containing p and returns its key.
std::uint64_t put_anchor(Octree& tree, const Eigen::Vector3d& p, int feat_dim = kAnchorFeatureDim,
                         int k = kSplatsPerAnchor) {
    const std::uint64_t key = tree.voxel_key(p);
    Anchor a;
    a.center = tree.voxel_center(key);
    a.feature = Eigen::VectorXd::Zero(feat_dim);
    a.offsets.assign(k, Eigen::Vector3d::Zero());
    tree.anchors[key] = a;
    return key;
}

std::string temp_path(const char* name) {
    return std::string("/tmp/upslam_test_") + name + "_" + std::to_string(::getpid());
}

}  // namespace

TEST_CASE("leaf size selection picks the coarsest grid at or below the request") {
    const Octree tree = desk_octree();
    CHECK(tree.depth() == 7);
    CHECK(tree.voxel_size() == doctest::Approx(10.0 / 128.0).epsilon(1e-15));
    CHECK(Octree::with_leaf_size({0, 0, 0}, 10.0, 10.0).depth() == 0);
    CHECK(Octree::with_leaf_size({0, 0, 0}, 10.0, 0.078125).depth() == 7);
    CHECK_THROWS(Octree({0, 0, 0}, 10.0, 11));
    CHECK_THROWS(Octree({0, 0, 0}, -1.0, 3));
}

TEST_CASE("root volume membership is half-open") {
    const Octree tree = desk_octree();
    CHECK(tree.contains({-5, -5, -5}));
    CHECK(tree.contains({0, 0, 0}));
    CHECK(tree.contains({4.999, 4.999, 4.999}));
    CHECK(!tree.contains({5, 0, 0}));
    CHECK(!tree.contains({0, -5.001, 0}));
    CHECK_THROWS_WITH(tree.voxel_key({6, 0, 0}), "outside octree");
}

TEST_CASE("voxel keys and centers are mutually consistent") {
    const Octree tree = desk_octree();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> uni(-4.999, 4.999);
    const double half_diag = tree.voxel_size() * std::sqrt(3.0) / 2.0;
    for (int i = 0; i < 200; ++i) {
        const Eigen::Vector3d p(uni(rng), uni(rng), uni(rng));
        const std::uint64_t key = tree.voxel_key(p);
        const Eigen::Vector3d c = tree.voxel_center(key);
        CHECK((p - c).norm() <= half_diag + 1e-12);
        CHECK(tree.voxel_key(c) == key);
    }
}

TEST_CASE("cell interleaving is injective and sorted keys are ascending") {
    CHECK(Octree::morton(0, 0, 0) == 0);
    std::set<std::uint64_t> seen;
    for (std::uint32_t x = 0; x < 4; ++x)
        for (std::uint32_t y = 0; y < 4; ++y)
            for (std::uint32_t z = 0; z < 4; ++z) seen.insert(Octree::morton(x, y, z));
    CHECK(seen.size() == 64);

    Octree tree = desk_octree();
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> uni(-4.9, 4.9);
    for (int i = 0; i < 50; ++i) put_anchor(tree, {uni(rng), uni(rng), uni(rng)});
    const auto keys = tree.sorted_keys();
    CHECK(keys.size() == tree.anchors.size());
    for (size_t i = 1; i < keys.size(); ++i) CHECK(keys[i] > keys[i - 1]);
    for (std::uint64_t k : keys) CHECK(tree.anchors.count(k) == 1);
}

TEST_CASE("probability fusion worked examples") {
    CHECK(bayes_update(0.5, 0.7, 0.5) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(bayes_update(0.6, 0.7, 0.5) == doctest::Approx(7.0 / 9.0).epsilon(1e-12));

    double p = 0.5;
    for (int i = 0; i < 3; ++i) p = bayes_update(p, 0.7, 0.5);
    CHECK(p == doctest::Approx(343.0 / 370.0).epsilon(1e-12));

    // A hit followed by the mirrored miss cancels back to the prior.
    double q = bayes_update(0.5, 0.7, 0.5);
    q = bayes_update(q, 0.3, 0.5);
    CHECK(q == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("probability fusion is associative in log-odds and matches the product form") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> uni(0.05, 0.95);
    for (int i = 0; i < 500; ++i) {
        const double p0 = uni(rng), a = uni(rng), b = uni(rng);
        const double ab = bayes_update(bayes_update(p0, a, 0.5), b, 0.5);
        const double ba = bayes_update(bayes_update(p0, b, 0.5), a, 0.5);
        CHECK(std::abs(ab - ba) < 1e-12);

        // At an uninformative prior the update is the direct odds product.
        const double one = bayes_update(p0, a, 0.5);
        const double direct = a * p0 / (a * p0 + (1 - a) * (1 - p0));
        CHECK(std::abs(one - direct) < 1e-12);
    }
}

TEST_CASE("probability fusion clamps away from certainty and rejects saturated inputs") {
    double p = 0.5;
    for (int i = 0; i < 200; ++i) p = bayes_update(p, 0.9, 0.5);
    CHECK(p < 1.0);
    CHECK(p <= 1.0 - 1e-6 + 1e-15);
    CHECK_NOTHROW(bayes_update(p, 0.9, 0.5));  // clamp keeps the chain alive

    CHECK_THROWS_WITH(bayes_update(0.0, 0.7, 0.5), "saturated probability");
    CHECK_THROWS_WITH(bayes_update(0.5, 1.0, 0.5), "saturated probability");
    CHECK_THROWS_WITH(bayes_update(0.5, 0.7, 0.0), "saturated probability");
}

TEST_CASE("anchor observation fuses hits and misses at the projected pixel") {
    Octree tree = desk_octree();
    const Camera cam = wide_camera();
    const std::uint64_t key = put_anchor(tree, {0, 0, 2});
    const double z = tree.anchors[key].center.z();
    const ImageBuffer depth(cam.width, cam.height, 1, z);

    const Mask all_dynamic(cam.width, cam.height, 1);
    observe_anchors(tree, Pose::identity(), cam, all_dynamic, depth);
    CHECK(tree.anchors[key].p_dyn() == doctest::Approx(0.7).epsilon(1e-12));

    observe_anchors(tree, Pose::identity(), cam, all_dynamic, depth);
    observe_anchors(tree, Pose::identity(), cam, all_dynamic, depth);
    CHECK(tree.anchors[key].p_dyn() == doctest::Approx(343.0 / 370.0).epsilon(1e-12));

    // Misses push the belief back down.
    Octree fresh = desk_octree();
    const std::uint64_t k2 = put_anchor(fresh, {0, 0, 2});
    const Mask all_static(cam.width, cam.height);
    observe_anchors(fresh, Pose::identity(), cam, all_static, depth);
    CHECK(fresh.anchors[k2].p_dyn() == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("anchor observation skips anchors out of view or outside the depth window") {
    Octree tree = desk_octree();
    const Camera cam = wide_camera();
    const std::uint64_t behind = put_anchor(tree, {0, 0, -2});
    const std::uint64_t off_screen = put_anchor(tree, {4.5, 0, 2});
    const std::uint64_t in_view = put_anchor(tree, {0, 0, 2});
    const double z = tree.anchors[in_view].center.z();

    const Mask all_dynamic(cam.width, cam.height, 1);
    // Observed surface far behind the anchor: no pixel supports or refutes it.
    const ImageBuffer far_depth(cam.width, cam.height, 1, z + 1.0);
    observe_anchors(tree, Pose::identity(), cam, all_dynamic, far_depth);
    CHECK(tree.anchors[in_view].log_odds == 0.0);

    // Invalid (zero) depth gives no evidence either.
    const ImageBuffer no_depth(cam.width, cam.height, 1, 0.0);
    observe_anchors(tree, Pose::identity(), cam, all_dynamic, no_depth);
    CHECK(tree.anchors[in_view].log_odds == 0.0);

    // Agreeing depth updates only the visible anchor.
    const ImageBuffer good_depth(cam.width, cam.height, 1, z);
    observe_anchors(tree, Pose::identity(), cam, all_dynamic, good_depth);
    CHECK(tree.anchors[in_view].p_dyn() == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(tree.anchors[behind].log_odds == 0.0);
    CHECK(tree.anchors[off_screen].log_odds == 0.0);
}

TEST_CASE("growth seeds anchors from static pixels with valid depth") {
    Octree tree = desk_octree();
    Camera cam;
    cam.fx = cam.fy = 20.0;
    cam.cx = cam.cy = 10.0;
    cam.width = cam.height = 20;
    const ImageBuffer depth(20, 20, 1, 2.0);
    const Mask all_static(20, 20, 1);
    std::mt19937_64 rng(1);

    const int n = grow(tree, depth, Pose::identity(), cam, all_static, 2, 3, rng);
    CHECK(n > 0);
    CHECK(tree.anchors.size() == static_cast<size_t>(n));
    for (const auto& [key, a] : tree.anchors) {
        CHECK(a.created_at == 3);
        CHECK(a.feature.size() == kAnchorFeatureDim);
        CHECK(a.offsets.size() == kSplatsPerAnchor);
        CHECK((a.center - tree.voxel_center(key)).norm() == 0.0);
    }

    // Same frame again: every hit leaf already exists.
    std::mt19937_64 rng2(2);
    CHECK(grow(tree, depth, Pose::identity(), cam, all_static, 2, 4, rng2) == 0);
    // Finer stride only adds leaves.
    Octree fine = desk_octree(), coarse = desk_octree();
    std::mt19937_64 rng3(3), rng4(3);
    const int n1 = grow(fine, depth, Pose::identity(), cam, all_static, 1, 0, rng3);
    const int n4 = grow(coarse, depth, Pose::identity(), cam, all_static, 4, 0, rng4);
    CHECK(n1 >= n4);
}

TEST_CASE("growth ignores dynamic pixels and invalid depth") {
    Octree tree = desk_octree();
    Camera cam;
    cam.fx = cam.fy = 20.0;
    cam.cx = cam.cy = 10.0;
    cam.width = cam.height = 20;
    std::mt19937_64 rng(1);

    const Mask all_dynamic(20, 20);  // static_mask all false
    CHECK(grow(tree, ImageBuffer(20, 20, 1, 2.0), Pose::identity(), cam, all_dynamic, 1, 0, rng) ==
          0);
    const Mask all_static(20, 20, 1);
    CHECK(grow(tree, ImageBuffer(20, 20, 1, 0.0), Pose::identity(), cam, all_static, 1, 0, rng) ==
          0);
    CHECK(tree.anchors.empty());
}

TEST_CASE("pruning removes confident movers and nothing else") {
    Octree tree = desk_octree();
    const std::uint64_t keep = put_anchor(tree, {0, 0, 1});
    const std::uint64_t drop = put_anchor(tree, {0, 0, 2});
    tree.anchors[keep].set_p_dyn(0.5);
    tree.anchors[drop].set_p_dyn(0.9);

    CHECK(prune(tree) == 1);
    CHECK(tree.anchors.count(keep) == 1);
    CHECK(tree.anchors.count(drop) == 0);
    CHECK(prune(tree) == 0);  // idempotent

    // A higher bar spares the same anchor.
    const std::uint64_t again = put_anchor(tree, {0, 0, 2});
    tree.anchors[again].set_p_dyn(0.9);
    CHECK(prune(tree, 0.95) == 0);
    CHECK(tree.anchors.count(again) == 1);
}

TEST_CASE("decoding maps each visible anchor to its splat group") {
    Octree tree = desk_octree();
    const Camera cam = wide_camera();
    std::mt19937_64 rng(12);
    DecoderSet dec = DecoderSet::create(kSplatsPerAnchor, 16, kAnchorFeatureDim,
                                        tree.voxel_size(), rng);

    const DecodeResult empty = decode(tree, dec, Pose::identity(), cam, 0.0);
    CHECK(empty.gaussians.empty());
    CHECK(empty.keys.empty());

    const std::uint64_t key = put_anchor(tree, {0.3, -0.2, 2});
    auto& anchor = tree.anchors[key];
    for (int i = 0; i < kSplatsPerAnchor; ++i) anchor.offsets[i] = Eigen::Vector3d(i, 0.5, -i);

    const DecodeResult r = decode(tree, dec, Pose::identity(), cam, 0.25);
    REQUIRE(r.keys.size() == 1);
    REQUIRE(r.gaussians.size() == static_cast<size_t>(kSplatsPerAnchor));
    CHECK(r.voxel_size == tree.voxel_size());

    for (int i = 0; i < kSplatsPerAnchor; ++i) {
        const Gaussian& g = r.gaussians[i];
        CHECK((g.mu - (anchor.center + anchor.offsets[i] * tree.voxel_size())).norm() < 1e-12);
        CHECK(g.opacity > 0.0);
        CHECK(g.opacity < 1.0);
        for (int c = 0; c < 3; ++c) {
            CHECK(g.color(c) > 0.0);
            CHECK(g.color(c) < 1.0);
            CHECK(g.scale(c) > 0.0);
        }
        CHECK(g.rot.norm() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(g.feat.size() == 16);
    }

    // The conditioning vector: feature, camera distance, unit direction, clock.
    REQUIRE(r.input.rows() == kAnchorFeatureDim + 6);
    CHECK(r.input(kAnchorFeatureDim, 0) == doctest::Approx(anchor.center.norm()).epsilon(1e-12));
    CHECK(r.input.col(0).segment(kAnchorFeatureDim + 1, 3).norm() ==
          doctest::Approx(1.0).epsilon(1e-12));
    const Eigen::Vector2d lt = temporal_encode(0.25);
    CHECK(r.input(kAnchorFeatureDim + 4, 0) == doctest::Approx(lt.x()).epsilon(1e-15));
    CHECK(r.input(kAnchorFeatureDim + 5, 0) == doctest::Approx(lt.y()).epsilon(1e-15));
}

TEST_CASE("decoding skips hidden, out-of-view and confidently dynamic anchors") {
    Octree tree = desk_octree();
    const Camera cam = wide_camera();
    std::mt19937_64 rng(13);
    DecoderSet dec = DecoderSet::create(kSplatsPerAnchor, 16, kAnchorFeatureDim,
                                        tree.voxel_size(), rng);

    put_anchor(tree, {0, 0, -2});                               // behind the camera
    put_anchor(tree, {4.5, 0, 2});                              // projects off screen
    const std::uint64_t mover = put_anchor(tree, {0, 0.5, 2});  // confident mover
    tree.anchors[mover].set_p_dyn(0.95);
    const std::uint64_t good = put_anchor(tree, {0, 0, 2});

    const DecodeResult r = decode(tree, dec, Pose::identity(), cam, 0.0);
    REQUIRE(r.keys.size() == 1);
    CHECK(r.keys[0] == good);

    // A looser probability cut readmits the mover.
    const DecodeResult loose = decode(tree, dec, Pose::identity(), cam, 0.0, 0.99);
    CHECK(loose.keys.size() == 2);
}

TEST_CASE("decoding is view and time conditioned but deterministic") {
    Octree tree = desk_octree();
    const Camera cam = wide_camera();
    std::mt19937_64 rng(14);
    DecoderSet dec = DecoderSet::create(kSplatsPerAnchor, 16, kAnchorFeatureDim,
                                        tree.voxel_size(), rng);
    const std::uint64_t key = put_anchor(tree, {0, 0, 2});
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int i = 0; i < kAnchorFeatureDim; ++i) tree.anchors[key].feature(i) = uni(rng);

    const DecodeResult a = decode(tree, dec, Pose::identity(), cam, 0.0);
    const DecodeResult b = decode(tree, dec, Pose::identity(), cam, 0.0);
    REQUIRE(a.gaussians.size() == b.gaussians.size());
    for (size_t i = 0; i < a.gaussians.size(); ++i) {
        CHECK(a.gaussians[i].opacity == b.gaussians[i].opacity);
        CHECK((a.gaussians[i].color - b.gaussians[i].color).norm() == 0.0);
    }

    const DecodeResult later = decode(tree, dec, Pose::identity(), cam, 0.5);
    double diff = 0;
    for (size_t i = 0; i < a.gaussians.size(); ++i)
        diff += (a.gaussians[i].color - later.gaussians[i].color).cwiseAbs().sum() +
                std::abs(a.gaussians[i].opacity - later.gaussians[i].opacity);
    CHECK(diff > 0.0);
}

TEST_CASE("decoder gradients match finite differences") {
    Octree tree(Eigen::Vector3d(-2, -2, -2), 4.0, 4);
    Camera cam;
    cam.fx = cam.fy = 30.0;
    cam.cx = cam.cy = 15.0;
    cam.width = cam.height = 30;
    const int k = 2, n_l = 3, feat_dim = 6;
    std::mt19937_64 rng(15);
    DecoderSet dec = DecoderSet::create(k, n_l, feat_dim, tree.voxel_size(), rng);

    std::uniform_real_distribution<double> uni(-0.8, 0.8);
    std::vector<std::uint64_t> keys;
    keys.push_back(put_anchor(tree, {0.2, 0.1, 1.4}, feat_dim, k));
    keys.push_back(put_anchor(tree, {-0.4, 0.3, 1.8}, feat_dim, k));
    for (auto key : keys) {
        for (int i = 0; i < feat_dim; ++i) tree.anchors[key].feature(i) = uni(rng);
        for (int i = 0; i < k; ++i)
            tree.anchors[key].offsets[i] = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
    }
    const Pose pose = Pose::identity();
    const double t = 0.3;

    // Random linear functional over every decoded attribute.
    struct W {
        Eigen::Vector3d mu, color, scale;
        double opacity;
        Eigen::Vector4d rot;
        Eigen::VectorXd feat;
    };
    std::vector<W> w(2 * k);
    for (auto& wi : w) {
        wi.mu = {uni(rng), uni(rng), uni(rng)};
        wi.color = {uni(rng), uni(rng), uni(rng)};
        wi.scale = {uni(rng), uni(rng), uni(rng)};
        wi.opacity = uni(rng);
        wi.rot = {uni(rng), uni(rng), uni(rng), uni(rng)};
        wi.feat = Eigen::VectorXd::Zero(n_l);
        for (int i = 0; i < n_l; ++i) wi.feat(i) = uni(rng);
    }
    auto value = [&](const Octree& o, const DecoderSet& d) {
        const DecodeResult r = decode(o, d, pose, cam, t);
        double s = 0;
        for (size_t i = 0; i < r.gaussians.size(); ++i) {
            const Gaussian& g = r.gaussians[i];
            s += w[i].mu.dot(g.mu) + w[i].color.dot(g.color) + w[i].scale.dot(g.scale) +
                 w[i].opacity * g.opacity + w[i].rot.dot(g.rot.coeffs()) + w[i].feat.dot(g.feat);
        }
        return s;
    };

    const DecodeResult r = decode(tree, dec, pose, cam, t);
    REQUIRE(r.gaussians.size() == w.size());
    std::vector<GaussianGrad> gg(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        gg[i].d_mu = w[i].mu;
        gg[i].d_color = w[i].color;
        gg[i].d_scale = w[i].scale;
        gg[i].d_opacity = w[i].opacity;
        gg[i].d_rot = w[i].rot;
        gg[i].d_feat = w[i].feat;
    }
    const DecodeGrads grads = decode_backward(r, dec, gg);

    // Decoder parameters, one head at a time.
    struct Head {
        Mlp DecoderSet::*mlp;
        const MlpGrad* grad;
    };
    const Head heads[] = {{&DecoderSet::f_c, &grads.g_c},
                          {&DecoderSet::f_a, &grads.g_a},
                          {&DecoderSet::f_s, &grads.g_s},
                          {&DecoderSet::f_q, &grads.g_q},
                          {&DecoderSet::f_d, &grads.g_d}};
    for (const Head& head : heads) {
        const Mlp& mlp = dec.*(head.mlp);
        auto f = [&](const Eigen::VectorXd& p) {
            DecoderSet probe = dec;
            (probe.*(head.mlp)).set_from_flat(p);
            return value(tree, probe);
        };
        CHECK(grad_check(f, mlp.flatten(), mlp.flatten_grad(*head.grad), 25, rng) < 1e-4);
    }

    // Anchor features and offsets, in decode (sorted-key) order.
    REQUIRE(grads.d_feature.size() == 2);
    REQUIRE(grads.d_offsets.size() == 2);
    const double h = 1e-6;
    for (size_t ai = 0; ai < r.keys.size(); ++ai) {
        Anchor& anchor = tree.anchors[r.keys[ai]];
        for (int i = 0; i < feat_dim; ++i) {
            const double saved = anchor.feature(i);
            anchor.feature(i) = saved + h;
            const double plus = value(tree, dec);
            anchor.feature(i) = saved - h;
            const double minus = value(tree, dec);
            anchor.feature(i) = saved;
            const double fd = (plus - minus) / (2 * h);
            CHECK(std::abs(grads.d_feature[ai](i) - fd) < 1e-6 + 1e-4 * std::abs(fd));
        }
        for (int i = 0; i < k; ++i) {
            // Offsets only shift centers: the gradient is the mu functional
            // scaled by the voxel size.
            const Eigen::Vector3d want = w[ai * k + i].mu * tree.voxel_size();
            CHECK((grads.d_offsets[ai][i] - want).norm() < 1e-12);
        }
    }
}

TEST_CASE("anchor optimizer steps descend and reject non-finite gradients") {
    Anchor a;
    a.feature = Eigen::VectorXd::Zero(4);
    a.offsets.assign(2, Eigen::Vector3d::Zero());

    Eigen::VectorXd d_feat(4);
    d_feat << 1.0, -2.0, 0.5, 0.0;
    std::vector<Eigen::Vector3d> d_off = {{1.0, 0.0, -1.0}, {0.0, 2.0, 0.0}};
    const double lr = 1e-2;
    anchor_adam_step(a, d_feat, d_off, lr);

    CHECK(a.adam_step == 1);
    // First bias-corrected step moves by lr against the gradient sign.
    CHECK(a.feature(0) == doctest::Approx(-lr).epsilon(1e-6));
    CHECK(a.feature(1) == doctest::Approx(lr).epsilon(1e-6));
    CHECK(a.feature(3) == 0.0);
    CHECK(a.offsets[0].x() == doctest::Approx(-lr).epsilon(1e-6));
    CHECK(a.offsets[0].y() == 0.0);
    CHECK(a.offsets[1].y() == doctest::Approx(-lr).epsilon(1e-6));

    Eigen::VectorXd bad = d_feat;
    bad(2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(anchor_adam_step(a, bad, d_off, lr), "diverged");
}

TEST_CASE("map files round-trip anchors exactly and decoders to storage precision") {
    Octree tree = desk_octree();
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (const Eigen::Vector3d p :
         {Eigen::Vector3d(0.1, 0.2, 1.0), Eigen::Vector3d(-1.0, 0.5, 2.0),
          Eigen::Vector3d(2.0, -2.0, 3.0)}) {
        const std::uint64_t key = put_anchor(tree, p);
        Anchor& a = tree.anchors[key];
        for (int i = 0; i < kAnchorFeatureDim; ++i) a.feature(i) = uni(rng);
        for (auto& off : a.offsets) off = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
        a.log_odds = uni(rng);
        a.created_at = 17;
        a.feat_m = Eigen::VectorXd::Ones(kAnchorFeatureDim);  // must not survive the file
        a.adam_step = 5;
    }
    DecoderSet dec = DecoderSet::create(kSplatsPerAnchor, 16, kAnchorFeatureDim,
                                        tree.voxel_size(), rng);
    Mlp f_m({16, 8, 4}, Activation::Relu, Activation::None, rng);
    Mlp f_u({4, 8, 1}, Activation::Relu, Activation::Softplus, rng);

    const std::string path = temp_path("map");
    save_map(path, tree, dec, &f_m, &f_u);
    const LoadedMap loaded = load_map(path);
    std::remove(path.c_str());

    CHECK((loaded.octree.origin() - tree.origin()).norm() == 0.0);
    CHECK(loaded.octree.extent() == tree.extent());
    CHECK(loaded.octree.depth() == tree.depth());
    REQUIRE(loaded.octree.anchors.size() == tree.anchors.size());
    for (const auto& [key, a] : tree.anchors) {
        REQUIRE(loaded.octree.anchors.count(key) == 1);
        const Anchor& b = loaded.octree.anchors.at(key);
        CHECK((b.center - a.center).norm() == 0.0);
        CHECK(b.log_odds == a.log_odds);
        CHECK(b.created_at == a.created_at);
        CHECK((b.feature - a.feature).norm() == 0.0);
        REQUIRE(b.offsets.size() == a.offsets.size());
        for (size_t i = 0; i < a.offsets.size(); ++i)
            CHECK((b.offsets[i] - a.offsets[i]).norm() == 0.0);
        CHECK(b.adam_step == 0);  // optimizer state starts fresh
        CHECK((b.feat_m.size() == 0 || b.feat_m.norm() == 0.0));
    }

    CHECK(loaded.decoders.k == dec.k);
    CHECK(loaded.decoders.n_l == dec.n_l);
    CHECK(loaded.decoders.feat_dim == dec.feat_dim);
    Eigen::VectorXd probe(dec.in_dim());
    for (int i = 0; i < probe.size(); ++i) probe(i) = uni(rng);
    CHECK((loaded.decoders.f_c.forward_vec(probe) - dec.f_c.forward_vec(probe))
              .lpNorm<Eigen::Infinity>() < 1e-5);
    CHECK((loaded.decoders.f_d.forward_vec(probe) - dec.f_d.forward_vec(probe))
              .lpNorm<Eigen::Infinity>() < 1e-5);
    REQUIRE(!loaded.f_m.empty());
    REQUIRE(!loaded.f_u.empty());
    Eigen::VectorXd fp(16);
    for (int i = 0; i < 16; ++i) fp(i) = uni(rng);
    CHECK((loaded.f_m.forward_vec(fp) - f_m.forward_vec(fp)).lpNorm<Eigen::Infinity>() < 1e-5);

    // Without the optional heads the loaded slots stay empty.
    const std::string bare_path = temp_path("map_bare");
    save_map(bare_path, tree, dec);
    const LoadedMap bare = load_map(bare_path);
    std::remove(bare_path.c_str());
    CHECK(bare.f_m.empty());
    CHECK(bare.f_u.empty());

    CHECK_THROWS(load_map("/tmp/definitely_missing_upslam_map_file"));
}
