#include <doctest.h>

#include "up/nn.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

using namespace up;

namespace {

Mlp random_mlp(const std::vector<int>& dims, Activation hidden, Activation out, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Mlp(dims, hidden, out, rng);
}

}  // namespace

TEST_CASE("activation values and derivatives at reference points") {
    CHECK(activate(Activation::None, 1.7) == doctest::Approx(1.7));
    CHECK(activate_grad(Activation::None, -3.0) == doctest::Approx(1.0));

    CHECK(activate(Activation::Relu, -1.0) == doctest::Approx(0.0));
    CHECK(activate(Activation::Relu, 2.0) == doctest::Approx(2.0));
    CHECK(activate_grad(Activation::Relu, -1.0) == doctest::Approx(0.0));
    CHECK(activate_grad(Activation::Relu, 2.0) == doctest::Approx(1.0));

    CHECK(activate(Activation::Softplus, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(activate_grad(Activation::Softplus, 0.0) == doctest::Approx(0.5).epsilon(1e-12));
    // Large inputs must not overflow and approach the identity / unit slope.
    CHECK(activate(Activation::Softplus, 50.0) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(activate(Activation::Softplus, -50.0) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK(activate(Activation::Sigmoid, 0.0) == doctest::Approx(0.5));
    CHECK(activate_grad(Activation::Sigmoid, 0.0) == doctest::Approx(0.25));
    CHECK(activate(Activation::Sigmoid, 30.0) == doctest::Approx(1.0));
    CHECK(activate(Activation::Sigmoid, -30.0) == doctest::Approx(0.0));

    CHECK(activate(Activation::Tanh, 0.0) == doctest::Approx(0.0));
    CHECK(activate_grad(Activation::Tanh, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("activation derivative matches finite differences") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    const double h = 1e-6;
    for (Activation a : {Activation::None, Activation::Softplus, Activation::Sigmoid,
                         Activation::Tanh}) {
        for (int i = 0; i < 20; ++i) {
            const double x = uni(rng);
            const double fd = (activate(a, x + h) - activate(a, x - h)) / (2 * h);
            CHECK(activate_grad(a, x) == doctest::Approx(fd).epsilon(1e-6));
        }
    }
}

TEST_CASE("hand-built network computes the expected closed form") {
    Mlp mlp = random_mlp({2, 2, 1}, Activation::Relu, Activation::None, 1);
    auto& layers = mlp.layers_mut();
    layers[0].weight << 1, 0, 0, 1;
    layers[0].bias.setZero();
    layers[1].weight << 1, 1;
    layers[1].bias << 0.5;

    // forward = relu(x) + relu(y) + 0.5
    Eigen::MatrixXd x(2, 3);
    x << 1.0, -1.0, 2.0,
         2.0, -2.0, -3.0;
    const Eigen::MatrixXd y = mlp.forward(x);
    REQUIRE(y.rows() == 1);
    REQUIRE(y.cols() == 3);
    CHECK(y(0, 0) == doctest::Approx(3.5));
    CHECK(y(0, 1) == doctest::Approx(0.5));
    CHECK(y(0, 2) == doctest::Approx(2.5));

    CHECK(mlp.in_dim() == 2);
    CHECK(mlp.out_dim() == 1);
    CHECK(mlp.param_count() == 2 * 2 + 2 + 2 + 1);
}

TEST_CASE("batched forward equals per-column forward") {
    const Mlp mlp = random_mlp({3, 16, 4}, Activation::Relu, Activation::Tanh, 9);
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Eigen::MatrixXd x(3, 5);
    for (int i = 0; i < x.size(); ++i) x(i / 5, i % 5) = uni(rng);
    const Eigen::MatrixXd batched = mlp.forward(x);
    for (int c = 0; c < x.cols(); ++c) {
        const Eigen::VectorXd single = mlp.forward_vec(x.col(c));
        CHECK((batched.col(c) - single).norm() < 1e-14);
    }
}

TEST_CASE("initialization is seed-deterministic") {
    const Mlp a = random_mlp({4, 8, 2}, Activation::Softplus, Activation::None, 42);
    const Mlp b = random_mlp({4, 8, 2}, Activation::Softplus, Activation::None, 42);
    const Mlp c = random_mlp({4, 8, 2}, Activation::Softplus, Activation::None, 43);
    CHECK((a.flatten() - b.flatten()).norm() == 0.0);
    CHECK((a.flatten() - c.flatten()).norm() > 0.0);
    // Biases start at zero.
    for (const auto& layer : a.layers()) CHECK(layer.bias.norm() == 0.0);
}

TEST_CASE("parameter gradients match finite differences") {
    for (auto out_act : {Activation::None, Activation::Sigmoid, Activation::Softplus}) {
        Mlp mlp = random_mlp({3, 10, 6, 2}, Activation::Relu, out_act, 77);
        std::mt19937_64 rng(123);
        std::uniform_real_distribution<double> uni(-1.0, 1.0);
        Eigen::MatrixXd x(3, 4);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) x(i, j) = uni(rng);
        Eigen::MatrixXd w(2, 4);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 4; ++j) w(i, j) = uni(rng);

        MlpCache cache;
        mlp.forward(x, &cache);
        MlpGrad grad = mlp.zero_grad();
        mlp.backward(cache, w, &grad);
        const Eigen::VectorXd analytic = mlp.flatten_grad(grad);

        const Eigen::VectorXd p0 = mlp.flatten();
        auto f = [&](const Eigen::VectorXd& p) {
            Mlp probe = mlp;
            probe.set_from_flat(p);
            return (probe.forward(x).array() * w.array()).sum();
        };
        const double err = grad_check(f, p0, analytic, 40, rng);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("input gradients match finite differences") {
    Mlp mlp = random_mlp({4, 12, 3}, Activation::Softplus, Activation::None, 5);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Eigen::VectorXd x0(4);
    for (int i = 0; i < 4; ++i) x0(i) = uni(rng);
    Eigen::VectorXd w(3);
    for (int i = 0; i < 3; ++i) w(i) = uni(rng);

    MlpCache cache;
    mlp.forward(x0, &cache);
    MlpGrad sink = mlp.zero_grad();
    const Eigen::MatrixXd grad_in = mlp.backward(cache, w, &sink);

    auto f = [&](const Eigen::VectorXd& x) { return mlp.forward_vec(x).dot(w); };
    const double err = grad_check(f, x0, grad_in.col(0), 4, rng);
    CHECK(err < 1e-5);
}

TEST_CASE("gradient accumulation adds across backward calls") {
    Mlp mlp = random_mlp({2, 5, 1}, Activation::Relu, Activation::None, 8);
    Eigen::MatrixXd x(2, 1);
    x << 0.3, -0.8;
    Eigen::MatrixXd g(1, 1);
    g << 1.0;

    MlpCache cache;
    mlp.forward(x, &cache);
    MlpGrad once = mlp.zero_grad();
    mlp.backward(cache, g, &once);
    MlpGrad twice = mlp.zero_grad();
    mlp.backward(cache, g, &twice);
    mlp.backward(cache, g, &twice);
    const Eigen::VectorXd a = mlp.flatten_grad(once);
    const Eigen::VectorXd b = mlp.flatten_grad(twice);
    CHECK((b - 2.0 * a).norm() < 1e-12);

    MlpGrad scaled = once;
    scaled.scale(2.0);
    CHECK((mlp.flatten_grad(scaled) - b).norm() < 1e-12);
    scaled.setZero();
    CHECK(mlp.flatten_grad(scaled).norm() == 0.0);
}

TEST_CASE("flatten and set_from_flat round-trip exactly") {
    Mlp mlp = random_mlp({3, 7, 2}, Activation::Tanh, Activation::Sigmoid, 21);
    const Eigen::VectorXd p = mlp.flatten();
    CHECK(p.size() == mlp.param_count());

    Eigen::VectorXd q = p;
    q.array() += 0.25;
    mlp.set_from_flat(q);
    CHECK((mlp.flatten() - q).norm() == 0.0);
    mlp.set_from_flat(p);
    CHECK((mlp.flatten() - p).norm() == 0.0);
}

TEST_CASE("adaptive-moment update: zero gradient leaves parameters unchanged") {
    Eigen::VectorXd params(3);
    params << 1.0, -2.0, 0.5;
    const Eigen::VectorXd before = params;
    AdamState opt(3, 1e-2);
    opt.update(params, Eigen::VectorXd::Zero(3));
    CHECK((params - before).norm() == 0.0);
}

TEST_CASE("adaptive-moment update: bias correction makes every constant-gradient step lr-sized") {
    Eigen::VectorXd params = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g(2);
    g << 2.0, -0.5;
    const double lr = 1e-3;
    AdamState opt(2, lr);
    for (int i = 1; i <= 10; ++i) {
        opt.update(params, g);
        CHECK(params(0) == doctest::Approx(-i * lr).epsilon(1e-6));
        CHECK(params(1) == doctest::Approx(i * lr).epsilon(1e-6));
    }
    CHECK(opt.step == 10);
}

TEST_CASE("adaptive-moment update sizes its state lazily and rejects non-finite gradients") {
    AdamState opt;
    opt.lr = 1e-2;
    Eigen::VectorXd params(4);
    params << 0.0, 1.0, 2.0, 3.0;
    CHECK_NOTHROW(opt.update(params, Eigen::VectorXd::Ones(4)));
    CHECK(opt.m.size() == 4);

    Eigen::VectorXd bad = Eigen::VectorXd::Ones(4);
    bad(2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(opt.update(params, bad), "diverged");
    bad(2) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH(opt.update(params, bad), "diverged");
}

TEST_CASE("checkpoint round-trip preserves shape and outputs to storage precision") {
    const Mlp mlp = random_mlp({5, 16, 16, 3}, Activation::Relu, Activation::Softplus, 31);
    std::stringstream ss;
    mlp.save(ss);
    const Mlp loaded = Mlp::load(ss);

    CHECK(loaded.in_dim() == 5);
    CHECK(loaded.out_dim() == 3);
    CHECK(loaded.param_count() == mlp.param_count());
    REQUIRE(loaded.layers().size() == mlp.layers().size());
    for (size_t i = 0; i < loaded.layers().size(); ++i)
        CHECK(loaded.layers()[i].act == mlp.layers()[i].act);

    // Parameters are stored in 32-bit floats.
    CHECK((loaded.flatten() - mlp.flatten()).lpNorm<Eigen::Infinity>() < 1e-6);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Eigen::VectorXd x(5);
    for (int i = 0; i < 5; ++i) x(i) = uni(rng);
    CHECK((loaded.forward_vec(x) - mlp.forward_vec(x)).lpNorm<Eigen::Infinity>() < 1e-5);
}

TEST_CASE("checkpoint loader rejects foreign data") {
    std::stringstream ss("not a checkpoint at all");
    CHECK_THROWS(Mlp::load(ss));
}

TEST_CASE("temporal encoding reference values and unit norm") {
    const Eigen::Vector2d t0 = temporal_encode(0.0);
    CHECK(t0.x() == doctest::Approx(0.0));
    CHECK(t0.y() == doctest::Approx(1.0));

    const Eigen::Vector2d t_half = temporal_encode(0.5);
    CHECK(t_half.x() == doctest::Approx(1.0));
    CHECK(t_half.y() == doctest::Approx(0.0).epsilon(1e-12));

    const Eigen::Vector2d t_quarter = temporal_encode(0.25);
    CHECK(t_quarter.x() == doctest::Approx(std::sqrt(0.5)));
    CHECK(t_quarter.y() == doctest::Approx(std::sqrt(0.5)));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> uni(-10.0, 10.0);
    for (int i = 0; i < 100; ++i)
        CHECK(temporal_encode(uni(rng)).norm() == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS(temporal_encode(std::numeric_limits<double>::quiet_NaN()));
    CHECK_THROWS(temporal_encode(std::numeric_limits<double>::infinity()));
}

TEST_CASE("finite-difference checker accepts correct gradients and flags wrong ones") {
    std::mt19937_64 rng(55);
    Eigen::VectorXd p(3);
    p << 0.7, -1.3, 2.2;
    auto f = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
    const Eigen::VectorXd good = 2.0 * p;
    CHECK(grad_check(f, p, good, 3, rng) < 1e-8);
    const Eigen::VectorXd bad = 2.5 * p;
    CHECK(grad_check(f, p, bad, 3, rng) > 0.1);
}
