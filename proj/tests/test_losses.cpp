#include <doctest.h>

#include "up/losses.hpp"

#include <cmath>
#include <random>

using namespace up;

namespace {

ImageBuffer random_image(int w, int h, int c, std::mt19937_64& rng, double lo = 0.0,
                         double hi = 1.0) {
    std::uniform_real_distribution<double> uni(lo, hi);
    ImageBuffer img(w, h, c);
    for (auto& v : img.data) v = uni(rng);
    return img;
}

bool grad_close(double analytic, double fd) {
    return std::abs(analytic - fd) < 1e-7 + 1e-5 * std::abs(analytic);
}

}  // namespace

TEST_CASE("structural similarity of an image with itself is one") {
    std::mt19937_64 rng(1);
    const ImageBuffer img = random_image(9, 7, 3, rng);
    const SsimResult r = ssim(img, img);
    CHECK(r.value == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(r.map.width == 9);
    REQUIRE(r.map.height == 7);
    REQUIRE(r.map.channels == 1);
    for (double v : r.map.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("structural similarity of flat images has a closed form") {
    // Zero variance everywhere: only the luminance term survives.
    const ImageBuffer a(8, 6, 1, 0.5), b(8, 6, 1, 0.7);
    const double c1 = 1e-4;
    const double want = (2 * 0.5 * 0.7 + c1) / (0.5 * 0.5 + 0.7 * 0.7 + c1);
    const SsimResult r = ssim(a, b);
    CHECK(r.value == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("structural similarity is negative for inverted structure and bounded") {
    ImageBuffer a(12, 12, 1), b(12, 12, 1);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            const double v = ((x + y) % 2) ? 0.9 : 0.1;
            a.at(x, y, 0) = v;
            b.at(x, y, 0) = 1.0 - v;
        }
    const SsimResult r = ssim(a, b);
    CHECK(r.value < 0.0);
    CHECK(r.value >= -1.0);

    std::mt19937_64 rng(5);
    const SsimResult rand_pair = ssim(random_image(10, 10, 2, rng), random_image(10, 10, 2, rng));
    CHECK(rand_pair.value <= 1.0);
    CHECK(rand_pair.value >= -1.0);
}

TEST_CASE("structural similarity gradient matches finite differences including borders") {
    std::mt19937_64 rng(17);
    ImageBuffer a = random_image(7, 6, 2, rng);
    const ImageBuffer b = random_image(7, 6, 2, rng);
    const ImageBuffer w = random_image(7, 6, 1, rng, -1.0, 1.0);

    const ImageBuffer grad = ssim_backward(a, b, w);
    REQUIRE(grad.data.size() == a.data.size());

    auto loss = [&](const ImageBuffer& img) {
        const SsimResult r = ssim(img, b);
        double s = 0;
        for (size_t i = 0; i < r.map.data.size(); ++i) s += w.data[i] * r.map.data[i];
        return s;
    };
    const double h = 1e-6;
    for (size_t i = 0; i < a.data.size(); i += 3) {  // stride keeps it quick, covers borders
        ImageBuffer plus = a, minus = a;
        plus.data[i] += h;
        minus.data[i] -= h;
        const double fd = (loss(plus) - loss(minus)) / (2 * h);
        CHECK(grad_close(grad.data[i], fd));
    }
}

TEST_CASE("peak signal-to-noise ratio reference points") {
    const ImageBuffer a(4, 4, 3, 0.5);
    ImageBuffer b = a;
    for (auto& v : b.data) v += 0.1;
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
    ImageBuffer c = a;
    for (auto& v : c.data) v += 0.01;
    CHECK(psnr(a, c) == doctest::Approx(40.0).epsilon(1e-9));
    CHECK(std::isinf(psnr(a, a)));
}

TEST_CASE("masked quality ignores exactly the flagged pixels") {
    const int w = 6, h = 4;
    ImageBuffer a(w, h, 3, 0.5), b(w, h, 3, 0.6);
    Mask dynamic(w, h);
    dynamic.set(0, 0, true);
    dynamic.set(1, 0, true);
    // Garbage under the mask must not affect the result.
    for (int c = 0; c < 3; ++c) {
        b.at(0, 0, c) = 123.0;
        b.at(1, 0, c) = -55.0;
    }
    CHECK(masked_psnr(a, b, dynamic) == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(masked_psnr(a, b, Mask(w, h)) < 20.0);  // unmasked sees the garbage

    Mask all(w, h, 1);
    CHECK_THROWS_WITH(masked_psnr(a, b, all), "masked_psnr: empty evaluation region");
    ImageBuffer same = a;
    CHECK(std::isinf(masked_psnr(a, same, dynamic)));
}

TEST_CASE("geometric loss closed form on flat buffers") {
    LossWeights weights;
    weights.lambda = 1.0;  // disable the SSIM mix for the closed form
    const ImageBuffer rc(4, 4, 3, 0.6), fc(4, 4, 3, 0.5);
    const ImageBuffer rd(4, 4, 1, 1.2), fd(4, 4, 1, 1.0);

    const GeoLossResult r = geo_loss(rc, rd, fc, fd, weights);
    // l1 * 3 * 0.1^2 + l2 * 0.2^2
    CHECK(r.value == doctest::Approx(0.6 * 0.03 + 1.0 * 0.04).epsilon(1e-9));

    const ImageBuffer no_depth(4, 4, 1, 0.0);
    const GeoLossResult nd = geo_loss(rc, rd, fc, no_depth, weights);
    CHECK(nd.value == doctest::Approx(0.6 * 0.03).epsilon(1e-9));

    const GeoLossResult self = geo_loss(rc, rd, rc, rd, weights);
    CHECK(self.value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("geometric loss per-pixel weights replace uniform averaging") {
    std::mt19937_64 rng(7);
    const ImageBuffer rc = random_image(5, 4, 3, rng), fc = random_image(5, 4, 3, rng);
    const ImageBuffer rd = random_image(5, 4, 1, rng, 0.5, 2.0),
                      fd = random_image(5, 4, 1, rng, 0.5, 2.0);
    const LossWeights weights;

    const GeoLossResult uniform = geo_loss(rc, rd, fc, fd, weights);
    const ImageBuffer ones(5, 4, 1, 1.0 / 20.0);
    const GeoLossResult explicit_uniform = geo_loss(rc, rd, fc, fd, weights, &ones);
    CHECK(uniform.value == doctest::Approx(explicit_uniform.value).epsilon(1e-12));

    ImageBuffer spike(5, 4, 1, 0.0);
    spike.at(2, 1, 0) = 2.0;
    const GeoLossResult spiked = geo_loss(rc, rd, fc, fd, weights, &spike);
    CHECK(spiked.value == doctest::Approx(2.0 * uniform.map.at(2, 1, 0)).epsilon(1e-12));
}

TEST_CASE("geometric loss gradients match finite differences") {
    std::mt19937_64 rng(23);
    ImageBuffer rc = random_image(6, 5, 3, rng), fc = random_image(6, 5, 3, rng);
    ImageBuffer rd = random_image(6, 5, 1, rng, 0.5, 2.0), fd = random_image(6, 5, 1, rng, 0.5, 2.0);
    fd.at(3, 2, 0) = 0.0;  // one invalid depth pixel on the FD path
    const ImageBuffer w = random_image(6, 5, 1, rng, 0.0, 1.0);
    const LossWeights weights;  // default: SSIM path active

    const GeoLossResult r = geo_loss(rc, rd, fc, fd, weights, &w);
    const double h = 1e-6;
    for (size_t i = 0; i < rc.data.size(); i += 4) {
        ImageBuffer plus = rc, minus = rc;
        plus.data[i] += h;
        minus.data[i] -= h;
        const double fdiff = (geo_loss(plus, rd, fc, fd, weights, &w).value -
                              geo_loss(minus, rd, fc, fd, weights, &w).value) / (2 * h);
        CHECK(grad_close(r.d_color.data[i], fdiff));
    }
    for (size_t i = 0; i < rd.data.size(); i += 3) {
        ImageBuffer plus = rd, minus = rd;
        plus.data[i] += h;
        minus.data[i] -= h;
        const double fdiff = (geo_loss(rc, plus, fc, fd, weights, &w).value -
                              geo_loss(rc, minus, fc, fd, weights, &w).value) / (2 * h);
        CHECK(grad_close(r.d_depth.data[i], fdiff));
    }
}

TEST_CASE("feature alignment loss reference values") {
    ImageBuffer t(2, 1, 2), r(2, 1, 2);
    t.at(0, 0, 0) = 1.0;  // (1,0) vs (0,1): orthogonal
    r.at(0, 0, 1) = 1.0;
    t.at(1, 0, 0) = 1.0;  // (1,0) vs (-1,0): anti-aligned
    r.at(1, 0, 0) = -1.0;

    const FeatureLossResult fl = feature_loss(t, r);
    CHECK(fl.valid == 2);
    CHECK(fl.map.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(fl.map.at(1, 0, 0) == doctest::Approx(2.0));
    CHECK(fl.value == doctest::Approx(1.5));

    const FeatureLossResult self = feature_loss(t, t);
    CHECK(self.value == doctest::Approx(0.0).epsilon(1e-12));

    // Scale invariance of the cosine.
    ImageBuffer scaled = t;
    for (auto& v : scaled.data) v *= 7.3;
    CHECK(feature_loss(scaled, r).value == doctest::Approx(fl.value).epsilon(1e-12));
}

TEST_CASE("feature alignment loss skips degenerate pixels and stays in range") {
    ImageBuffer t(3, 1, 2), r(3, 1, 2);
    t.at(0, 0, 0) = 1.0;
    r.at(0, 0, 0) = 1.0;     // aligned: 0
    t.at(1, 0, 1) = 1.0;     // rendered is zero: skipped
    // pixel 2: both zero: skipped
    const FeatureLossResult fl = feature_loss(t, r);
    CHECK(fl.valid == 1);
    CHECK(fl.value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(fl.map.at(1, 0, 0) == 0.0);
    CHECK(fl.map.at(2, 0, 0) == 0.0);

    const FeatureLossResult none = feature_loss(ImageBuffer(2, 2, 3, 0.0), ImageBuffer(2, 2, 3, 0.0));
    CHECK(none.valid == 0);
    CHECK(none.value == 0.0);

    std::mt19937_64 rng(3);
    const FeatureLossResult rand_pair =
        feature_loss(random_image(5, 5, 4, rng, -1.0, 1.0), random_image(5, 5, 4, rng, -1.0, 1.0));
    CHECK(rand_pair.value >= 0.0);
    CHECK(rand_pair.value <= 2.0);
}

TEST_CASE("feature alignment gradient matches finite differences") {
    std::mt19937_64 rng(31);
    const ImageBuffer t = random_image(4, 3, 3, rng, 0.2, 1.0);
    ImageBuffer r = random_image(4, 3, 3, rng, 0.2, 1.0);
    const ImageBuffer w = random_image(4, 3, 1, rng, 0.0, 1.0);

    const ImageBuffer grad = feature_loss_backward(t, r, w);
    auto loss = [&](const ImageBuffer& img) {
        const FeatureLossResult fl = feature_loss(t, img);
        double s = 0;
        for (size_t i = 0; i < fl.map.data.size(); ++i) s += w.data[i] * fl.map.data[i];
        return s;
    };
    const double h = 1e-6;
    for (size_t i = 0; i < r.data.size(); ++i) {
        ImageBuffer plus = r, minus = r;
        plus.data[i] += h;
        minus.data[i] -= h;
        CHECK(grad_close(grad.data[i], (loss(plus) - loss(minus)) / (2 * h)));
    }
}

TEST_CASE("feature lifting applies the head per pixel") {
    std::mt19937_64 rng(11);
    Mlp identity({2, 2}, Activation::Relu, Activation::None, rng);
    identity.layers_mut()[0].weight = Eigen::Matrix2d::Identity();
    identity.layers_mut()[0].bias.setZero();

    const ImageBuffer feat = random_image(3, 2, 2, rng);
    MlpCache cache;
    const ImageBuffer lifted = lift_features(feat, identity, &cache);
    REQUIRE(lifted.channels == 2);
    for (size_t i = 0; i < feat.data.size(); ++i)
        CHECK(lifted.data[i] == doctest::Approx(feat.data[i]).epsilon(1e-15));
    CHECK(cache.input.cols() == 6);
    CHECK(cache.input(0, 1) == doctest::Approx(feat.at(1, 0, 0)));
}

TEST_CASE("feature lifting gradients match finite differences") {
    std::mt19937_64 rng(13);
    Mlp f_m({2, 8, 3}, Activation::Relu, Activation::None, rng);
    ImageBuffer feat = random_image(3, 3, 2, rng, -1.0, 1.0);
    const ImageBuffer w = random_image(3, 3, 3, rng, -1.0, 1.0);

    MlpCache cache;
    lift_features(feat, f_m, &cache);
    const LiftBackwardResult back = lift_backward(f_m, cache, w);

    auto loss_of_params = [&](const Eigen::VectorXd& p) {
        Mlp probe = f_m;
        probe.set_from_flat(p);
        const ImageBuffer lifted = lift_features(feat, probe);
        double s = 0;
        for (size_t i = 0; i < lifted.data.size(); ++i) s += w.data[i] * lifted.data[i];
        return s;
    };
    const double err = grad_check(loss_of_params, f_m.flatten(), f_m.flatten_grad(back.d_fm), 30,
                                  rng);
    CHECK(err < 1e-5);

    auto loss_of_feat = [&](const ImageBuffer& img) {
        const ImageBuffer lifted = lift_features(img, f_m);
        double s = 0;
        for (size_t i = 0; i < lifted.data.size(); ++i) s += w.data[i] * lifted.data[i];
        return s;
    };
    const double h = 1e-6;
    for (size_t i = 0; i < feat.data.size(); ++i) {
        ImageBuffer plus = feat, minus = feat;
        plus.data[i] += h;
        minus.data[i] -= h;
        CHECK(grad_close(back.d_feat.data[i], (loss_of_feat(plus) - loss_of_feat(minus)) / (2 * h)));
    }
}

namespace {

struct TotalFixture {
    RenderOutput render;
    ImageBuffer frame_color, frame_depth, frame_feat;
    Mask static_mask;
    std::vector<Gaussian> gaussians;
    LossWeights weights;

    explicit TotalFixture(std::mt19937_64& rng, int feat_channels = 0)
        : static_mask(5, 4, 1) {
        render.color = random_image(5, 4, 3, rng);
        render.depth = random_image(5, 4, 1, rng, 0.5, 2.0);
        render.trans = ImageBuffer(5, 4, 1, 1.0);
        frame_color = random_image(5, 4, 3, rng);
        frame_depth = random_image(5, 4, 1, rng, 0.5, 2.0);
        if (feat_channels > 0) {
            render.feat = random_image(5, 4, feat_channels, rng, 0.2, 1.0);
            frame_feat = random_image(5, 4, feat_channels + 1, rng, 0.2, 1.0);
        }
        gaussians.resize(2);
        gaussians[0].scale = {0.1, 0.2, 0.3};
        gaussians[1].scale = {0.4, 0.5, 0.6};
    }
};

}  // namespace

TEST_CASE("total mapping loss reduces to the scale term when every pixel is excluded") {
    std::mt19937_64 rng(41);
    TotalFixture f(rng);
    f.static_mask = Mask(5, 4, 0);  // nothing included
    f.gaussians.resize(1);
    f.gaussians[0].scale = {0.2, 0.2, 0.2};
    const TotalLossResult r = total_loss(f.render, f.frame_color, f.frame_depth, ImageBuffer(),
                                         f.static_mask, f.gaussians, f.weights, nullptr);
    CHECK(r.value == doctest::Approx(0.01 * 0.2).epsilon(1e-12));
    CHECK(r.geo == 0.0);
    CHECK(r.dist == 0.0);
    for (double v : r.d_color.data) CHECK(v == 0.0);
}

TEST_CASE("total mapping loss composes its reported terms") {
    std::mt19937_64 rng(43);
    std::mt19937_64 nn_rng(44);
    TotalFixture f(rng, 2);
    Mlp f_m({2, 8, 3}, Activation::Relu, Activation::None, nn_rng);

    const TotalLossResult r = total_loss(f.render, f.frame_color, f.frame_depth, f.frame_feat,
                                         f.static_mask, f.gaussians, f.weights, &f_m);
    CHECK(r.value ==
          doctest::Approx(r.geo + f.weights.l4 * r.dist + r.scale).epsilon(1e-12));
    CHECK(r.scale == doctest::Approx(0.01 * 0.35).epsilon(1e-12));
    CHECK(r.dist > 0.0);

    // With every pixel included the distillation term is the plain feature loss
    // against the lifted buffer.
    const ImageBuffer lifted = lift_features(f.render.feat, f_m);
    CHECK(r.dist == doctest::Approx(feature_loss(f.frame_feat, lifted).value).epsilon(1e-9));

    // Without features or head, distillation vanishes.
    const TotalLossResult bare = total_loss(f.render, f.frame_color, f.frame_depth, ImageBuffer(),
                                            f.static_mask, f.gaussians, f.weights, nullptr);
    CHECK(bare.dist == 0.0);
    CHECK(bare.d_feat.data.empty());
}

TEST_CASE("total mapping loss ignores excluded pixels") {
    std::mt19937_64 rng(47);
    TotalFixture f(rng);
    TotalFixture clean = f;
    // Corrupt one pixel and exclude it: the loss must not move.
    f.frame_color.at(2, 2, 0) = 50.0;
    f.frame_color.at(2, 2, 1) = -50.0;
    f.static_mask.set(2, 2, false);
    clean.static_mask.set(2, 2, false);
    const TotalLossResult with_garbage =
        total_loss(f.render, f.frame_color, f.frame_depth, ImageBuffer(), f.static_mask,
                   f.gaussians, f.weights, nullptr);
    const TotalLossResult without =
        total_loss(clean.render, clean.frame_color, clean.frame_depth, ImageBuffer(),
                   clean.static_mask, clean.gaussians, clean.weights, nullptr);
    CHECK(with_garbage.geo == doctest::Approx(without.geo).epsilon(1e-9));

    // Including the corrupted pixel makes the loss much worse.
    f.static_mask.set(2, 2, true);
    const TotalLossResult included =
        total_loss(f.render, f.frame_color, f.frame_depth, ImageBuffer(), f.static_mask,
                   f.gaussians, f.weights, nullptr);
    CHECK(included.geo > 10.0 * with_garbage.geo);
}

TEST_CASE("total mapping loss gradients match finite differences on frozen buffers") {
    std::mt19937_64 rng(53);
    std::mt19937_64 nn_rng(54);
    TotalFixture f(rng, 2);
    f.static_mask.set(1, 1, false);  // exercise the masked path
    f.static_mask.set(4, 3, false);
    Mlp f_m({2, 6, 3}, Activation::Relu, Activation::None, nn_rng);

    auto eval = [&](const RenderOutput& render, const Mlp* head) {
        return total_loss(render, f.frame_color, f.frame_depth, f.frame_feat, f.static_mask,
                          f.gaussians, f.weights, head).value;
    };
    const TotalLossResult r = total_loss(f.render, f.frame_color, f.frame_depth, f.frame_feat,
                                         f.static_mask, f.gaussians, f.weights, &f_m);

    const double h = 1e-6;
    for (size_t i = 0; i < f.render.color.data.size(); i += 5) {
        RenderOutput plus = f.render, minus = f.render;
        plus.color.data[i] += h;
        minus.color.data[i] -= h;
        CHECK(grad_close(r.d_color.data[i], (eval(plus, &f_m) - eval(minus, &f_m)) / (2 * h)));
    }
    for (size_t i = 0; i < f.render.depth.data.size(); i += 3) {
        RenderOutput plus = f.render, minus = f.render;
        plus.depth.data[i] += h;
        minus.depth.data[i] -= h;
        CHECK(grad_close(r.d_depth.data[i], (eval(plus, &f_m) - eval(minus, &f_m)) / (2 * h)));
    }
    for (size_t i = 0; i < f.render.feat.data.size(); i += 4) {
        RenderOutput plus = f.render, minus = f.render;
        plus.feat.data[i] += h;
        minus.feat.data[i] -= h;
        CHECK(grad_close(r.d_feat.data[i], (eval(plus, &f_m) - eval(minus, &f_m)) / (2 * h)));
    }

    auto loss_of_params = [&](const Eigen::VectorXd& p) {
        Mlp probe = f_m;
        probe.set_from_flat(p);
        return eval(f.render, &probe);
    };
    CHECK(grad_check(loss_of_params, f_m.flatten(), f_m.flatten_grad(r.d_fm), 30, rng) < 1e-5);

    // Every scale coordinate shares one gradient value.
    auto scale_fd = [&](int g, int c) {
        TotalFixture plus = f, minus = f;
        plus.gaussians[g].scale(c) += h;
        minus.gaussians[g].scale(c) -= h;
        return (total_loss(plus.render, plus.frame_color, plus.frame_depth, plus.frame_feat,
                           plus.static_mask, plus.gaussians, plus.weights, &f_m).value -
                total_loss(minus.render, minus.frame_color, minus.frame_depth, minus.frame_feat,
                           minus.static_mask, minus.gaussians, minus.weights, &f_m).value) /
               (2 * h);
    };
    CHECK(r.d_scale_component == doctest::Approx(f.weights.l5 / 6.0).epsilon(1e-9));
    CHECK(grad_close(r.d_scale_component, scale_fd(0, 1)));
    CHECK(grad_close(r.d_scale_component, scale_fd(1, 2)));
}
