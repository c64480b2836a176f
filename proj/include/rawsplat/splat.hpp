#pragma once

#include "rawsplat/camera.hpp"
#include "rawsplat/scene.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <optional>

namespace rawsplat {

/// Screen-space low-pass added to the diagonal of every projected covariance.
inline constexpr double kCovarianceDilation = 0.3;
/// Primitives at or in front of this camera-space depth are culled.
inline constexpr double kNearClip = 0.01;
/// Default footprint cutoff in standard deviations.
inline constexpr double kDefaultCutoffSigma = 3.0;

/// A primitive projected onto the image plane.
struct Splat2D {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    double depth = 0.0;
    std::size_t primitive_index = 0;
};

/// Projection result with the intermediates the backward pass reuses.
struct ProjectedSplat {
    Splat2D splat;
    Mat2 conic = Mat2::Identity(); // cov2d^-1
    double radius = 0.0;           // larger footprint half-extent in pixels
    int x_min = 0, x_max = -1, y_min = 0, y_max = -1; // covered pixel range, inclusive
    Vec3 cam_point = Vec3::Zero();
    Mat3 cov_cam = Mat3::Identity();
    Eigen::Matrix<double, 2, 3> jacobian = Eigen::Matrix<double, 2, 3>::Zero();
    Mat3 rotation = Mat3::Identity(); // normalized primitive rotation
    Vec3 scale = Vec3::Ones();
};

inline Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraView& cam, const Vec3& p) {
    const double z = p.z(), z2 = z * z;
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / z, 0.0, -cam.fx * p.x() / z2,
         0.0, cam.fy / z, -cam.fy * p.y() / z2;
    return j;
}

/// EWA projection of one primitive. Returns nullopt when the primitive is
/// behind the near clip or its footprint misses the image.
inline std::optional<ProjectedSplat> project_primitive(const Vec3& position, const Vec3& log_scale,
                                                       const Vec4& rotation, const CameraView& cam,
                                                       std::size_t index,
                                                       double cutoff_sigma = kDefaultCutoffSigma) {
    ProjectedSplat ps;
    ps.cam_point = cam.to_camera(position);
    const double z = ps.cam_point.z();
    if (!(z > kNearClip)) return std::nullopt;

    ps.rotation = rotation_from_quaternion(rotation);
    ps.scale = log_scale.array().exp();
    const Mat3 m = ps.rotation * ps.scale.asDiagonal();
    const Mat3 cov = m * m.transpose();
    ps.cov_cam = cam.rotation * cov * cam.rotation.transpose();
    ps.jacobian = projection_jacobian(cam, ps.cam_point);

    Mat2 cov2d = ps.jacobian * ps.cov_cam * ps.jacobian.transpose();
    cov2d(0, 1) = cov2d(1, 0) = 0.5 * (cov2d(0, 1) + cov2d(1, 0));
    cov2d(0, 0) += kCovarianceDilation;
    cov2d(1, 1) += kCovarianceDilation;

    const double det = cov2d.determinant();
    if (!(det > 0.0)) return std::nullopt;

    ps.splat.mean2d = Vec2(cam.fx * ps.cam_point.x() / z + cam.cx, cam.fy * ps.cam_point.y() / z + cam.cy);
    ps.splat.cov2d = cov2d;
    ps.splat.depth = z;
    ps.splat.primitive_index = index;
    ps.conic << cov2d(1, 1) / det, -cov2d(0, 1) / det, -cov2d(1, 0) / det, cov2d(0, 0) / det;

    // Axis-aligned bounds of the cutoff ellipse.
    const double half_x = cutoff_sigma * std::sqrt(cov2d(0, 0));
    const double half_y = cutoff_sigma * std::sqrt(cov2d(1, 1));
    ps.radius = std::max(half_x, half_y);

    // Pixel (i, j) has its center at (i + 0.5, j + 0.5).
    const Vec2& mu = ps.splat.mean2d;
    const double lo_x = std::ceil(mu.x() - half_x - 0.5);
    const double hi_x = std::floor(mu.x() + half_x - 0.5);
    const double lo_y = std::ceil(mu.y() - half_y - 0.5);
    const double hi_y = std::floor(mu.y() + half_y - 0.5);
    if (hi_x < 0.0 || hi_y < 0.0 || lo_x > cam.width - 1 || lo_y > cam.height - 1 || lo_x > hi_x ||
        lo_y > hi_y) {
        return std::nullopt;
    }
    ps.x_min = static_cast<int>(std::max(0.0, lo_x));
    ps.x_max = static_cast<int>(std::min<double>(cam.width - 1, hi_x));
    ps.y_min = static_cast<int>(std::max(0.0, lo_y));
    ps.y_max = static_cast<int>(std::min<double>(cam.height - 1, hi_y));
    return ps;
}

inline std::optional<ProjectedSplat> project_primitive(const GaussianCloud& cloud, std::size_t i,
                                                       const CameraView& cam,
                                                       double cutoff_sigma = kDefaultCutoffSigma) {
    return project_primitive(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cam, i,
                             cutoff_sigma);
}

/// Projects a primitive; nullopt means culled.
inline std::optional<Splat2D> project_gaussian(const GaussianPrimitive& g, const CameraView& cam) {
    auto ps = project_primitive(g.position, g.log_scale, g.rotation, cam, 0);
    if (!ps) return std::nullopt;
    return ps->splat;
}

/// Mahalanobis-squared distance of `pixel` from the splat center.
inline double splat_mahalanobis2(const Vec2& mean, const Mat2& conic, const Vec2& pixel) {
    const Vec2 d = pixel - mean;
    return d.dot(conic * d);
}

/// Unnormalized 2D Gaussian density, 1 at the mean.
inline double evaluate_splat(const Splat2D& splat, const Vec2& pixel) {
    const double det = splat.cov2d.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) {
        throw NumericalDegeneracyError("splat covariance is singular");
    }
    const Mat2 conic = splat.cov2d.inverse();
    return std::exp(-0.5 * splat_mahalanobis2(splat.mean2d, conic, pixel));
}

/// Gradients of one primitive's geometric parameters.
struct GeometryGradient {
    Vec3 position = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4::Zero();
};

/// Chains screen-space gradients (mean, conic entries, camera depth) back to
/// position, log-scale and the raw quaternion.
inline GeometryGradient backprop_projection(const ProjectedSplat& ps, const CameraView& cam,
                                            const Vec4& raw_rotation, const Vec2& d_mean,
                                            const Mat2& d_conic, double d_depth) {
    const Mat2& a = ps.conic;
    const Mat2 d_cov2d = -a * d_conic * a;
    const auto& j = ps.jacobian;
    const Mat3 d_cov_cam = j.transpose() * d_cov2d * j;
    const Eigen::Matrix<double, 2, 3> d_j = 2.0 * d_cov2d * j * ps.cov_cam;

    const double x = ps.cam_point.x(), y = ps.cam_point.y(), z = ps.cam_point.z();
    const double z2 = z * z, z3 = z2 * z;
    Vec3 d_cam = Vec3::Zero();
    d_cam.x() += d_mean.x() * cam.fx / z;
    d_cam.y() += d_mean.y() * cam.fy / z;
    d_cam.z() += -d_mean.x() * cam.fx * x / z2 - d_mean.y() * cam.fy * y / z2;

    d_cam.z() += d_j(0, 0) * (-cam.fx / z2);
    d_cam.x() += d_j(0, 2) * (-cam.fx / z2);
    d_cam.z() += d_j(0, 2) * (2.0 * cam.fx * x / z3);
    d_cam.z() += d_j(1, 1) * (-cam.fy / z2);
    d_cam.y() += d_j(1, 2) * (-cam.fy / z2);
    d_cam.z() += d_j(1, 2) * (2.0 * cam.fy * y / z3);
    d_cam.z() += d_depth;

    GeometryGradient g;
    g.position = cam.rotation.transpose() * d_cam;

    const Mat3 d_cov = cam.rotation.transpose() * d_cov_cam * cam.rotation;
    const Mat3 m = ps.rotation * ps.scale.asDiagonal();
    const Mat3 d_m = (d_cov + d_cov.transpose()) * m;
    const Mat3 rt_dm = ps.rotation.transpose() * d_m;
    for (int k = 0; k < 3; ++k) g.log_scale[k] = rt_dm(k, k) * ps.scale[k];
    const Mat3 d_rot = d_m * ps.scale.asDiagonal();
    g.rotation = quaternion_gradient(raw_rotation, d_rot);
    return g;
}

} // namespace rawsplat
