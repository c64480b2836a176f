#pragma once

#include "rawsplat/types.hpp"

#include <algorithm>
#include <cmath>

namespace rawsplat {

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (x right, y down, z forward): p_cam = rotation * p_world + translation.
struct CameraView {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;
    double shutter_scale = 1.0;

    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }

    /// Camera center in world space.
    Vec3 origin() const { return -rotation.transpose() * translation; }

    /// Unit viewing direction in world space.
    Vec3 axis() const { return rotation.row(2).transpose().normalized(); }

    double fov() const {
        return 2.0 * std::atan(std::max(width / (2.0 * fx), height / (2.0 * fy)));
    }

    void validate() const {
        const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
        if (!(ortho <= 1e-9)) throw InvalidArgumentError("camera rotation is not orthonormal");
        if (width <= 0 || height <= 0) throw InvalidArgumentError("camera resolution must be positive");
        if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgumentError("camera focal lengths must be positive");
        if (!(shutter_scale > 0.0)) throw InvalidArgumentError("shutter scale must be positive");
    }

    /// Same pose, intrinsics rescaled to a new resolution.
    CameraView resized(int new_width, int new_height) const {
        CameraView c = *this;
        const double sx = static_cast<double>(new_width) / width;
        const double sy = static_cast<double>(new_height) / height;
        c.fx *= sx;
        c.cx *= sx;
        c.fy *= sy;
        c.cy *= sy;
        c.width = new_width;
        c.height = new_height;
        return c;
    }
};

/// Camera at `eye` looking at `target`. The default `up` makes a camera at the
/// origin looking down +z have an identity rotation.
inline CameraView look_at(const Vec3& eye, const Vec3& target, int width, int height,
                          double focal, const Vec3& up = Vec3(0.0, -1.0, 0.0)) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-12) right = forward.unitOrthogonal();
    right.normalize();
    const Vec3 down = forward.cross(right);

    CameraView cam;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    cam.fx = cam.fy = focal;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.width = width;
    cam.height = height;
    return cam;
}

} // namespace rawsplat
