#pragma once

#include "rawsplat/camera.hpp"
#include "rawsplat/color_field.hpp"
#include "rawsplat/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace rawsplat {

/// Default far-plane multiplier for cone scatter initialization.
inline constexpr double kDefaultFrustumScale = 10.0;
/// Added to averaged pixel colors before taking the log.
inline constexpr double kBiasEpsilon = 1e-4;

/// Viewing cone used to scatter extra points.
struct Frustum {
    Vec3 apex = Vec3::Zero();
    Vec3 axis = Vec3::UnitZ();
    double fov = std::numbers::pi / 2.0;
    double z_near = 1.0;
    double z_far = 10.0;

    /// True when `p` is inside the cone (angle to the axis at most fov / 2),
    /// with a relative slack of `tolerance`.
    bool cone_contains(const Vec3& p, double tolerance = 0.0) const {
        const Vec3 v = p - apex;
        const double axial = v.dot(axis);
        const double lateral = (v - axial * axis).norm();
        const double scale = std::max(1.0, v.norm());
        return lateral <= std::tan(fov / 2.0) * axial + tolerance * scale;
    }

    void validate() const {
        if (!(z_far > z_near && z_near > 0.0)) throw InvalidArgumentError("frustum needs z_far > z_near > 0");
        if (std::abs(axis.norm() - 1.0) > 1e-9) throw InvalidArgumentError("frustum axis must be unit length");
        if (!(fov > 0.0 && fov < std::numbers::pi)) throw InvalidArgumentError("frustum fov must be in (0, pi)");
    }
};

struct SparsePointSet {
    std::vector<Vec3> points;
    std::vector<Vec3> colors; // optional, linear radiance

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }

    /// S' = S followed by the points of `extra`.
    void append(const SparsePointSet& extra) {
        const bool keep_colors = colors.size() == points.size() && extra.colors.size() == extra.points.size();
        points.insert(points.end(), extra.points.begin(), extra.points.end());
        if (keep_colors) {
            colors.insert(colors.end(), extra.colors.begin(), extra.colors.end());
        } else {
            colors.clear();
        }
    }
};

/// Cone enclosing every camera origin, opening with the widest camera fov
/// around the mean camera axis.
inline Frustum build_frustum(std::span<const CameraView> cameras, const SparsePointSet& sparse,
                             double frustum_scale = kDefaultFrustumScale) {
    if (cameras.empty()) throw InvalidArgumentError("build_frustum needs at least one camera");
    if (sparse.empty()) throw InvalidArgumentError("build_frustum needs a nonempty sparse point set");
    if (!(frustum_scale >= 1.0)) throw InvalidArgumentError("frustum scale must be at least 1");

    Vec3 axis_sum = Vec3::Zero();
    Vec3 center = Vec3::Zero();
    double fov = 0.0;
    for (const auto& cam : cameras) {
        axis_sum += cam.axis();
        center += cam.origin();
        fov = std::max(fov, cam.fov());
    }
    axis_sum /= static_cast<double>(cameras.size());
    center /= static_cast<double>(cameras.size());
    if (axis_sum.norm() < 1e-6) {
        throw DegenerateAxisError("camera axes cancel out; capture is not forward facing");
    }

    double radius = 0.0;
    for (const auto& cam : cameras) radius = std::max(radius, (cam.origin() - center).norm());

    Frustum f;
    f.axis = axis_sum.normalized();
    f.fov = fov;
    f.apex = center - radius / std::tan(fov / 2.0) * f.axis;

    double near = std::numeric_limits<double>::infinity(), far = 0.0;
    for (const auto& s : sparse.points) {
        const double d = (s - f.apex).norm();
        near = std::min(near, d);
        far = std::max(far, d);
    }
    f.z_near = near;
    f.z_far = frustum_scale * far;
    if (!(f.z_far > f.z_near)) f.z_far = f.z_near * (1.0 + 1e-6) + 1e-9;
    return f;
}

/// Samples `count` points inside the cone: axial distance log-uniform in
/// [z_near, z_far), lateral position uniform over the disk at that depth.
inline SparsePointSet scatter_points(const Frustum& frustum, std::size_t count, std::uint64_t seed) {
    if (count == 0) throw InvalidArgumentError("scatter_points needs a positive count");
    frustum.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Vec3 u = frustum.axis.unitOrthogonal();
    const Vec3 v = frustum.axis.cross(u);
    const double log_ratio = std::log(frustum.z_far / frustum.z_near);
    const double tan_half = std::tan(frustum.fov / 2.0);

    SparsePointSet out;
    out.points.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        double z = frustum.z_near * std::exp(log_ratio * unit(rng));
        if (z >= frustum.z_far) z = std::nextafter(frustum.z_far, 0.0);
        const double rho = z * tan_half * std::sqrt(unit(rng));
        const double phi = 2.0 * std::numbers::pi * unit(rng);
        out.points.push_back(frustum.apex + z * frustum.axis + rho * (std::cos(phi) * u + std::sin(phi) * v));
    }
    return out;
}

/// A training frame: camera and linear image (values already scaled by the
/// camera's shutter).
struct FrameRef {
    const CameraView* camera;
    const Image* image;
};

/// Per-point log of the average pixel color over every frame the point
/// projects into. Pixel values are divided by the frame's shutter scale.
/// Points seen by no frame get the log of the global mean.
inline std::vector<Vec3> init_color_bias(const SparsePointSet& points, std::span<const FrameRef> frames,
                                         double eps = kBiasEpsilon) {
    Vec3 global = Vec3::Zero();
    double global_count = 0.0;
    for (const auto& f : frames) {
        const Image& img = *f.image;
        const double inv_t = 1.0 / f.camera->shutter_scale;
        for (std::size_t p = 0; p < img.pixel_count(); ++p) {
            for (int c = 0; c < 3; ++c) global[c] += img.data[p * 3 + c] * inv_t;
        }
        global_count += static_cast<double>(img.pixel_count());
    }
    if (global_count > 0.0) global /= global_count;
    const Vec3 fallback = (global.array() + eps).log();

    std::vector<Vec3> biases(points.size(), fallback);
    for (std::size_t i = 0; i < points.size(); ++i) {
        Vec3 sum = Vec3::Zero();
        int hits = 0;
        for (const auto& f : frames) {
            const CameraView& cam = *f.camera;
            const Vec3 pc = cam.to_camera(points.points[i]);
            if (!(pc.z() > 0.0)) continue;
            const double u = cam.fx * pc.x() / pc.z() + cam.cx;
            const double v = cam.fy * pc.y() / pc.z() + cam.cy;
            const double px = std::floor(u), py = std::floor(v);
            if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) continue;
            const Image& img = *f.image;
            const double inv_t = 1.0 / cam.shutter_scale;
            for (int c = 0; c < 3; ++c) sum[c] += img.at(static_cast<int>(px), static_cast<int>(py), c) * inv_t;
            ++hits;
        }
        if (hits > 0) biases[i] = (sum.array() / hits + eps).log();
    }
    return biases;
}

/// Fallback isotropic scale for clouds too small for a 3-NN estimate.
inline constexpr double kFallbackScale = 0.1;
inline constexpr double kInitialOpacity = 0.1;

/// Mean distance of each point to its three nearest neighbors.
inline std::vector<double> mean_neighbor_distance(std::span<const Vec3> pts, int k = 3) {
    const std::size_t n = pts.size();
    std::vector<double> out(n, kFallbackScale);
    if (n < static_cast<std::size_t>(k) + 1) return out;
    // Sort by x so each query can stop once the x-gap exceeds its current k-th best.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return pts[a].x() < pts[b].x(); });
    std::vector<std::size_t> rank(n);
    for (std::size_t r = 0; r < n; ++r) rank[order[r]] = r;

    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> best(k, std::numeric_limits<double>::infinity());
        auto offer = [&](double d2) {
            if (d2 >= best.back()) return;
            best.back() = d2;
            std::sort(best.begin(), best.end());
        };
        const std::size_t r = rank[i];
        for (std::size_t j = r + 1; j < n; ++j) {
            const double dx = pts[order[j]].x() - pts[i].x();
            if (dx * dx >= best.back()) break;
            offer((pts[order[j]] - pts[i]).squaredNorm());
        }
        for (std::size_t j = r; j-- > 0;) {
            const double dx = pts[order[j]].x() - pts[i].x();
            if (dx * dx >= best.back()) break;
            offer((pts[order[j]] - pts[i]).squaredNorm());
        }
        double s = 0.0;
        for (double d2 : best) s += std::sqrt(d2);
        out[i] = std::max(s / k, 1e-7);
    }
    return out;
}

/// One primitive per point: isotropic 3-NN scale, opacity 0.1, identity
/// rotation, features drawn from N(0, sigma).
inline GaussianCloud init_gaussians(const SparsePointSet& points, std::span<const Vec3> biases,
                                    int feature_dim, double feature_sigma, std::uint64_t seed) {
    if (biases.size() != points.size()) throw InvalidArgumentError("one color bias per point is required");
    GaussianCloud cloud(feature_dim);
    const auto scales = mean_neighbor_distance(points.points);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double logit = inverse_sigmoid(kInitialOpacity);
    for (std::size_t i = 0; i < points.size(); ++i) {
        GaussianPrimitive p;
        p.position = points.points[i];
        p.log_scale = Vec3::Constant(std::log(scales[i]));
        p.rotation = identity_quaternion();
        p.opacity_logit = logit;
        p.feature.resize(feature_dim);
        for (auto& f : p.feature) f = feature_sigma == 0.0 ? 0.0 : feature_sigma * normal(rng);
        p.color_bias = biases[i];
        cloud.push_back(p);
    }
    return cloud;
}

/// Spherical-harmonics baseline: the DC term carries the averaged color and
/// the rest start at zero.
inline GaussianCloud init_gaussians_sh(const SparsePointSet& points, std::span<const Vec3> biases) {
    GaussianCloud cloud(kShFeatureDim);
    const auto scales = mean_neighbor_distance(points.points);
    const double logit = inverse_sigmoid(kInitialOpacity);
    for (std::size_t i = 0; i < points.size(); ++i) {
        GaussianPrimitive p;
        p.position = points.points[i];
        p.log_scale = Vec3::Constant(std::log(scales[i]));
        p.opacity_logit = logit;
        p.feature.assign(kShFeatureDim, 0.0);
        const Vec3 avg = biases[i].array().exp();
        for (int c = 0; c < 3; ++c) p.feature[c] = (avg[c] - 0.5) / kShC0;
        cloud.push_back(p);
    }
    return cloud;
}

} // namespace rawsplat
