// Benchmarks the OpenMP-parallel kernels against the serial reference
// (worker count 1) and verifies both produce identical results.

#include "up/losses.hpp"
#include "up/nn.hpp"
#include "up/parallel.hpp"
#include "up/render.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    using clock = std::chrono::steady_clock;
    fn();  // warm-up
    const auto t0 = clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const up::ImageBuffer& a, const up::ImageBuffer& b) {
    double m = 0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

struct Row {
    const char* name;
    double serial_ms, parallel_ms, diff;
};

}  // namespace

int main() {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    up::Camera cam;
    cam.width = 160;
    cam.height = 120;
    cam.fx = cam.fy = 140.0;
    cam.cx = 80.0;
    cam.cy = 60.0;
    up::Pose pose;

    const int n_gauss = 2000;
    std::vector<up::Gaussian> gaussians(n_gauss);
    for (auto& g : gaussians) {
        g.mu = Eigen::Vector3d(uni(rng) * 3 - 1.5, uni(rng) * 2 - 1, 1.5 + 2.0 * uni(rng));
        g.opacity = 0.2 + 0.7 * uni(rng);
        g.color = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
        g.scale = Eigen::Vector3d(0.02 + 0.08 * uni(rng), 0.02 + 0.08 * uni(rng),
                                  0.02 + 0.08 * uni(rng));
        g.rot = Eigen::Quaterniond::UnitRandom();
    }

    up::ImageBuffer ref_a(cam.width, cam.height, 3), ref_b(cam.width, cam.height, 3);
    for (auto& v : ref_a.data) v = uni(rng);
    for (auto& v : ref_b.data) v = uni(rng);
    up::ImageBuffer weight(cam.width, cam.height, 1, 1.0 / (cam.width * cam.height));

    up::Mlp mlp({38, 32, 24}, up::Activation::Relu, up::Activation::None, rng);
    Eigen::MatrixXd batch(38, 4096);
    for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = uni(rng) * 2 - 1;

    const int reps = 5;
    std::vector<Row> rows;
    const int hw_threads = up::thread_count();

    auto bench_buffer = [&](const char* name,
                            const std::function<up::ImageBuffer()>& kernel) {
        up::set_thread_count(1);
        up::ImageBuffer serial_out = kernel();
        const double serial = time_ms([&] { kernel(); }, reps);
        up::set_thread_count(hw_threads);
        up::ImageBuffer parallel_out = kernel();
        const double parallel = time_ms([&] { kernel(); }, reps);
        rows.push_back({name, serial, parallel, max_abs_diff(serial_out, parallel_out)});
    };

    bench_buffer("render forward", [&] {
        auto proj = up::prepare(gaussians, pose, cam);
        return up::render(proj, cam, 0).color;
    });

    bench_buffer("render backward", [&] {
        std::vector<Eigen::Vector3d> p_cam;
        auto proj = up::prepare(gaussians, pose, cam, up::RenderSettings::production(), &p_cam);
        up::RenderCache cache;
        auto out = up::render(proj, cam, 0, up::RenderSettings::production(), &cache);
        up::ImageBuffer d_color(cam.width, cam.height, 3, 1e-3);
        up::ImageBuffer d_depth(cam.width, cam.height, 1, 1e-3);
        auto grads = up::render_backward(proj, p_cam, gaussians, pose, cam, cache, d_color,
                                         d_depth, nullptr);
        up::ImageBuffer sink(3, 1, 1);
        sink.at(0, 0) = grads.empty() ? 0.0 : grads[0].d_mu.sum();
        return sink;
    });

    bench_buffer("ssim forward", [&] { return up::ssim(ref_a, ref_b).map; });

    bench_buffer("ssim backward", [&] { return up::ssim_backward(ref_a, ref_b, weight); });

    bench_buffer("mlp batched forward", [&] {
        Eigen::MatrixXd y = mlp.forward(batch);
        up::ImageBuffer sink(1, 1, 1);
        sink.at(0, 0) = y.sum();
        return sink;
    });

    std::printf("%-22s %12s %12s %9s %10s\n", "kernel", "serial [ms]",
                "parallel [ms]", "speedup", "max|diff|");
    for (const auto& r : rows)
        std::printf("%-22s %12.3f %12.3f %8.2fx %10.2e\n", r.name, r.serial_ms,
                    r.parallel_ms, r.serial_ms / std::max(1e-9, r.parallel_ms), r.diff);
    std::printf("(threads: %d)\n", hw_threads);
    return 0;
}
