#pragma once

#include "rawsplat/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace rawsplat {

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double inverse_sigmoid(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------
// Rotation and covariance
// ---------------------------------------------------------------------------

/// Quaternions are stored (w, x, y, z) and need not be normalized.
inline Vec4 identity_quaternion() { return Vec4(1.0, 0.0, 0.0, 0.0); }

inline Vec4 normalized_quaternion(const Vec4& q) {
    const double n = q.norm();
    if (!(n > 1e-12) || !std::isfinite(n)) {
        throw DegenerateRotationError("quaternion has zero norm");
    }
    return q / n;
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Mat3 rotation_from_unit_quaternion(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline Mat3 rotation_from_quaternion(const Vec4& q) {
    return rotation_from_unit_quaternion(normalized_quaternion(q));
}

/// Quaternion (w, x, y, z) for a rotation of `angle` radians about `axis`.
inline Vec4 quaternion_from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized() * std::sin(angle / 2.0);
    return Vec4(std::cos(angle / 2.0), a.x(), a.y(), a.z());
}

/// Pulls dL/dR back onto the raw (unnormalized) quaternion.
inline Vec4 quaternion_gradient(const Vec4& q_raw, const Mat3& d_rot) {
    const double n = q_raw.norm();
    const Vec4 q = q_raw / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 dw, dx, dy, dz;
    dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    const Vec4 d_unit(d_rot.cwiseProduct(dw).sum(), d_rot.cwiseProduct(dx).sum(),
                      d_rot.cwiseProduct(dy).sum(), d_rot.cwiseProduct(dz).sum());
    // d(q/|q|)/dq = (I - q q^T) / |q|
    return (d_unit - q * q.dot(d_unit)) / n;
}

/// Sigma = R diag(s)^2 R^T.
inline Mat3 covariance_from_scale_rotation(const Vec3& scale, const Vec4& q) {
    const Mat3 m = rotation_from_quaternion(q) * scale.asDiagonal();
    return m * m.transpose();
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// One scene primitive with its parameters in storage (pre-activation) form.
struct GaussianPrimitive {
    Vec3 position = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = identity_quaternion();
    double opacity_logit = 0.0;
    std::vector<double> feature;
    Vec3 color_bias = Vec3::Zero();

    Vec3 scale() const { return log_scale.array().exp(); }
    double opacity() const { return sigmoid(opacity_logit); }
    Mat3 covariance() const { return covariance_from_scale_rotation(scale(), rotation); }
};

/// The learnable scene, stored as parallel arrays.
struct GaussianCloud {
    int feature_dim = 0;
    std::vector<Vec3> positions;
    std::vector<Vec3> log_scales;
    std::vector<Vec4> rotations;
    std::vector<double> opacity_logits;
    std::vector<double> features; // size() * feature_dim, row-major
    std::vector<Vec3> color_biases;

    GaussianCloud() = default;
    explicit GaussianCloud(int dim) : feature_dim(dim) {}

    std::size_t size() const { return positions.size(); }
    bool empty() const { return positions.empty(); }

    std::span<double> feature(std::size_t i) {
        return {features.data() + i * feature_dim, static_cast<std::size_t>(feature_dim)};
    }
    std::span<const double> feature(std::size_t i) const {
        return {features.data() + i * feature_dim, static_cast<std::size_t>(feature_dim)};
    }

    Vec3 scale(std::size_t i) const { return log_scales[i].array().exp(); }
    double opacity(std::size_t i) const { return sigmoid(opacity_logits[i]); }

    void push_back(const GaussianPrimitive& p) {
        if (static_cast<int>(p.feature.size()) != feature_dim) {
            throw InvalidArgumentError("primitive feature length does not match cloud");
        }
        positions.push_back(p.position);
        log_scales.push_back(p.log_scale);
        rotations.push_back(p.rotation);
        opacity_logits.push_back(p.opacity_logit);
        features.insert(features.end(), p.feature.begin(), p.feature.end());
        color_biases.push_back(p.color_bias);
    }

    GaussianPrimitive primitive(std::size_t i) const {
        GaussianPrimitive p;
        p.position = positions[i];
        p.log_scale = log_scales[i];
        p.rotation = rotations[i];
        p.opacity_logit = opacity_logits[i];
        auto f = feature(i);
        p.feature.assign(f.begin(), f.end());
        p.color_bias = color_biases[i];
        return p;
    }

    /// Keeps the primitives whose mask entry is true, preserving order.
    void keep(const std::vector<bool>& mask) {
        std::size_t out = 0;
        for (std::size_t i = 0; i < size(); ++i) {
            if (!mask[i]) continue;
            if (out != i) {
                positions[out] = positions[i];
                log_scales[out] = log_scales[i];
                rotations[out] = rotations[i];
                opacity_logits[out] = opacity_logits[i];
                color_biases[out] = color_biases[i];
                std::copy_n(features.begin() + i * feature_dim, feature_dim,
                            features.begin() + out * feature_dim);
            }
            ++out;
        }
        positions.resize(out);
        log_scales.resize(out);
        rotations.resize(out);
        opacity_logits.resize(out);
        color_biases.resize(out);
        features.resize(out * feature_dim);
    }

    /// Throws InconsistentArraysError when array lengths disagree.
    void validate() const {
        const std::size_t n = size();
        if (log_scales.size() != n || rotations.size() != n || opacity_logits.size() != n ||
            color_biases.size() != n || features.size() != n * static_cast<std::size_t>(feature_dim)) {
            throw InconsistentArraysError("gaussian cloud arrays have inconsistent lengths");
        }
    }
};

/// Cheap fingerprint of the geometry arrays, used to detect stale render records.
inline std::uint64_t cloud_fingerprint(const GaussianCloud& cloud) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t bytes) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    const std::size_t n = cloud.size();
    mix(&n, sizeof n);
    for (std::size_t i = 0; i < n; ++i) {
        mix(cloud.positions[i].data(), sizeof(double) * 3);
        mix(&cloud.opacity_logits[i], sizeof(double));
    }
    return h;
}

} // namespace rawsplat
