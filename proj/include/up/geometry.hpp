// Camera/pose/splat value types and the projective geometry shared by the
// renderer, the anchor field and the tracker. Everything here is an
// immutable value type; all functions are pure.

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <optional>
#include <stdexcept>
#include <vector>

namespace up {

struct Camera {
    double fx = 0, fy = 0;      // focal lengths [px]
    double cx = 0, cy = 0;      // principal point [px]
    int width = 0, height = 0;  // image size [px]
    double depth_scale = 5000.0;  // raw depth value / depth_scale = meters

    void validate() const;
};

// Camera-to-world transform T_wc. Quaternion kept unit-norm; storage order
// on disk is (qx qy qz qw) to match the TUM trajectory format.
struct Pose {
    Eigen::Quaterniond q = Eigen::Quaterniond::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    static Pose identity() { return {}; }

    Eigen::Matrix3d rotation() const { return q.toRotationMatrix(); }

    // p_world = R * p_cam + t
    Eigen::Vector3d apply(const Eigen::Vector3d& p_cam) const { return q * p_cam + t; }
    // p_cam = R^T * (p_world - t)
    Eigen::Vector3d apply_inverse(const Eigen::Vector3d& p_world) const {
        return q.conjugate() * (p_world - t);
    }

    Pose inverse() const {
        Pose r;
        r.q = q.conjugate();
        r.t = -(r.q * t);
        return r;
    }
    Pose compose(const Pose& rhs) const {  // this ∘ rhs
        Pose r;
        r.q = (q * rhs.q).normalized();
        r.t = q * rhs.t + t;
        return r;
    }

    void normalize() { q.normalize(); }
};

// Angle of the relative rotation between two poses [rad].
double rotation_angle(const Pose& a, const Pose& b);

// One anisotropic splat primitive.
struct Gaussian {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();   // world position [m]
    double opacity = 0.0;                            // in [0,1]
    Eigen::Vector3d color = Eigen::Vector3d::Zero(); // RGB in [0,1]
    Eigen::Vector3d scale = Eigen::Vector3d::Ones(); // stddevs [m], > 0
    Eigen::Quaterniond rot = Eigen::Quaterniond::Identity();
    Eigen::VectorXd feat;                            // low-dim feature, length N_l
};

// Row-major H x W x C buffer of doubles.
struct ImageBuffer {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<size_t>(w) * h * c, fill) {}

    double& at(int x, int y, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int x, int y, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t size() const { return data.size(); }
    bool same_shape(const ImageBuffer& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    bool all_finite() const;
};

// Boolean per-pixel mask; convention: true = dynamic (unless stated).
struct Mask {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h, bool fill = false)
        : width(w), height(h), data(static_cast<size_t>(w) * h, fill ? 1 : 0) {}

    bool at(int x, int y) const { return data[static_cast<size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { data[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
    size_t count() const;
};

// ---------------------------------------------------------------------------
// Projective geometry

inline constexpr double kZNear = 0.01;      // near-plane cull [m]
inline constexpr double kCovFloor2d = 0.3;  // 2D covariance dilation [px^2]

// Rotation matrix from an (x,y,z,w) quaternion. A non-unit input is
// normalized; *warned is set when the norm deviates from 1 by more than 1e-3.
Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q_xyzw, bool* warned = nullptr);

// Sigma = R S S^T R^T. Throws on non-positive scale.
Eigen::Matrix3d world_cov(const Eigen::Vector3d& scale, const Eigen::Quaterniond& rot);

struct PixelPoint {
    double u = 0, v = 0;  // pixel coordinates
    double z = 0;         // camera depth [m]
};

// Pinhole projection. Returns nullopt when the point is at or behind the
// near plane (z <= z_near).
std::optional<PixelPoint> project_point(const Eigen::Vector3d& p_world, const Pose& pose,
                                        const Camera& cam, double z_near = kZNear);

// Ray through pixel (u,v) at camera depth z, mapped to world coordinates.
Eigen::Vector3d back_project(double u, double v, double z, const Pose& pose, const Camera& cam);

// Projects a world covariance to the image plane:
//   Sigma' = J W Sigma W^T J^T + floor * I,  W = R_wc^T,
//   J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]] at p_cam.
// Throws "projection degenerate" if the result is not SPD.
Eigen::Matrix2d project_cov(const Eigen::Matrix3d& sigma_world, const Pose& pose,
                            const Camera& cam, const Eigen::Vector3d& p_cam,
                            double floor = kCovFloor2d);

}  // namespace up
