#include "up/geometry.hpp"

#include <cmath>

namespace up {

void Camera::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera: focal lengths must be > 0");
    if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height))
        throw std::invalid_argument("camera: principal point outside image");
    if (!(depth_scale > 0)) throw std::invalid_argument("camera: depth_scale must be > 0");
}

bool ImageBuffer::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

size_t Mask::count() const {
    size_t n = 0;
    for (auto b : data) n += (b != 0);
    return n;
}

double rotation_angle(const Pose& a, const Pose& b) {
    const Eigen::Quaterniond rel = a.q.conjugate() * b.q;
    const double w = std::min(1.0, std::abs(rel.w()));
    return 2.0 * std::acos(w);
}

Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q_xyzw, bool* warned) {
    const double n = q_xyzw.norm();
    if (!(n > 0)) throw std::invalid_argument("quat_to_rot: zero quaternion");
    if (warned) *warned = std::abs(n - 1.0) > 1e-3;
    const Eigen::Vector4d q = q_xyzw / n;
    return Eigen::Quaterniond(q[3], q[0], q[1], q[2]).toRotationMatrix();
}

Eigen::Matrix3d world_cov(const Eigen::Vector3d& scale, const Eigen::Quaterniond& rot) {
    if (!(scale.minCoeff() > 0)) throw std::invalid_argument("degenerate covariance");
    const Eigen::Matrix3d m = rot.normalized().toRotationMatrix() * scale.asDiagonal();
    return m * m.transpose();
}

std::optional<PixelPoint> project_point(const Eigen::Vector3d& p_world, const Pose& pose,
                                        const Camera& cam, double z_near) {
    const Eigen::Vector3d p = pose.apply_inverse(p_world);
    if (!(p.z() > z_near)) return std::nullopt;
    PixelPoint out;
    out.u = cam.fx * p.x() / p.z() + cam.cx;
    out.v = cam.fy * p.y() / p.z() + cam.cy;
    out.z = p.z();
    return out;
}

Eigen::Vector3d back_project(double u, double v, double z, const Pose& pose, const Camera& cam) {
    const Eigen::Vector3d p_cam((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
    return pose.apply(p_cam);
}

Eigen::Matrix2d project_cov(const Eigen::Matrix3d& sigma_world, const Pose& pose,
                            const Camera& cam, const Eigen::Vector3d& p_cam, double floor) {
    const double x = p_cam.x(), y = p_cam.y(), z = p_cam.z();
    if (!(z > kZNear)) throw std::invalid_argument("project_cov: point behind near plane");

    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx / z, 0, -cam.fx * x / (z * z),  //
        0, cam.fy / z, -cam.fy * y / (z * z);

    const Eigen::Matrix3d W = pose.rotation().transpose();
    Eigen::Matrix2d s = J * (W * sigma_world * W.transpose()) * J.transpose();
    s = 0.5 * (s + s.transpose());  // clean up round-off asymmetry
    s(0, 0) += floor;
    s(1, 1) += floor;

    const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
    if (!(det > 0) || !(s(0, 0) > 0) || !s.allFinite())
        throw std::runtime_error("projection degenerate");
    return s;
}

}  // namespace up
