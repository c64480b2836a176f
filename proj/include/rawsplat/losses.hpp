#pragma once

#include "rawsplat/rasterizer.hpp"
#include "rawsplat/types.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace rawsplat {

/// Loss stabilizer used by the weighted L2 loss and the transmittance penalty.
inline constexpr double kDefaultLossEpsilon = 1e-3;

/// A scalar loss value and its gradient with respect to the input buffer.
struct LossTerm {
    double value = 0.0;
    std::vector<double> grad;
};

// ---------------------------------------------------------------------------
// Weighted L2 (image term)
// ---------------------------------------------------------------------------

/// mean(((pred - ref) / (weight_source + eps))^2). The denominator takes no
/// gradient, so passing a frozen copy of `pred` as `weight_source` gives the
/// same gradient as the live version.
inline LossTerm weighted_l2(const Image& pred, const Image& ref, const Image& weight_source,
                            double eps = kDefaultLossEpsilon) {
    require_same_shape(pred, ref, "weighted_l2");
    require_same_shape(pred, weight_source, "weighted_l2");
    if (!(eps > 0.0)) throw InvalidArgumentError("weighted_l2 epsilon must be positive");
    LossTerm t;
    t.grad.resize(pred.size());
    const double inv_n = pred.size() ? 1.0 / static_cast<double>(pred.size()) : 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double denom = weight_source.data[i] + eps;
        const double r = (pred.data[i] - ref.data[i]) / denom;
        sum += r * r;
        t.grad[i] = 2.0 * r / denom * inv_n;
    }
    t.value = sum * inv_n;
    return t;
}

inline LossTerm weighted_l2(const Image& pred, const Image& ref, double eps = kDefaultLossEpsilon) {
    return weighted_l2(pred, ref, pred, eps);
}

// ---------------------------------------------------------------------------
// Exposure mapping
// ---------------------------------------------------------------------------

/// Per-shutter, per-channel learned scale. Stored as log-values; the reference
/// shutter's entry is frozen at 1.
class ExposureTable {
public:
    ExposureTable() = default;

    /// One entry per unique shutter scale; `reference` must be one of them.
    ExposureTable(std::vector<double> shutters, double reference) {
        std::sort(shutters.begin(), shutters.end());
        shutters.erase(std::unique(shutters.begin(), shutters.end()), shutters.end());
        for (double s : shutters) {
            if (!(s > 0.0)) throw InvalidArgumentError("shutter scales must be positive");
            shutters_.push_back(s);
            log_beta_.push_back(Vec3::Zero());
        }
        reference_ = index_of(reference);
    }

    std::size_t size() const { return shutters_.size(); }
    const std::vector<double>& shutters() const { return shutters_; }
    double reference_shutter() const { return shutters_.at(reference_); }
    std::size_t reference_index() const { return reference_; }

    std::size_t index_of(double shutter) const {
        for (std::size_t i = 0; i < shutters_.size(); ++i) {
            if (std::abs(shutters_[i] - shutter) <= 1e-12 * std::max(1.0, shutter)) return i;
        }
        throw UnknownShutterError("no exposure entry for shutter scale " + std::to_string(shutter));
    }

    Vec3 beta(double shutter) const { return log_beta_[index_of(shutter)].array().exp(); }
    Vec3& log_beta(std::size_t i) { return log_beta_[i]; }
    const Vec3& log_beta(std::size_t i) const { return log_beta_[i]; }
    std::vector<Vec3>& log_betas() { return log_beta_; }
    const std::vector<Vec3>& log_betas() const { return log_beta_; }
    bool is_frozen(std::size_t i) const { return i == reference_; }

    /// Restores a serialized table.
    static ExposureTable from_parts(std::vector<double> shutters, std::vector<Vec3> log_betas,
                                    std::size_t reference) {
        if (shutters.size() != log_betas.size() || reference >= shutters.size()) {
            throw InconsistentArraysError("exposure table arrays are inconsistent");
        }
        ExposureTable t;
        t.shutters_ = std::move(shutters);
        t.log_beta_ = std::move(log_betas);
        t.reference_ = reference;
        return t;
    }

private:
    std::vector<double> shutters_;
    std::vector<Vec3> log_beta_;
    std::size_t reference_ = 0;
};

/// min(c * t * beta_c, 1) per channel.
inline Vec3 exposure_scale(const Vec3& linear, double shutter, const Vec3& beta) {
    return (linear.array() * shutter * beta.array()).min(1.0);
}

/// Applies the exposure mapping to a 3-channel image.
inline Image exposure_scale(const Image& linear, double shutter, const Vec3& beta) {
    Image out = linear;
    for (std::size_t p = 0; p < linear.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = std::min(linear.data[p * 3 + c] * shutter * beta[c], 1.0);
    }
    return out;
}

/// Back-propagates through exposure_scale. Returns dL/d(linear); adds the
/// gradient with respect to log-beta into `d_log_beta`.
inline std::vector<double> exposure_scale_backward(const Image& linear, double shutter, const Vec3& beta,
                                                   const std::vector<double>& d_mapped, Vec3& d_log_beta) {
    std::vector<double> d_linear(linear.size(), 0.0);
    for (std::size_t p = 0; p < linear.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            const std::size_t i = p * 3 + c;
            const double mapped = linear.data[i] * shutter * beta[c];
            if (mapped >= 1.0) continue;
            d_linear[i] = d_mapped[i] * shutter * beta[c];
            d_log_beta[c] += d_mapped[i] * mapped;
        }
    }
    return d_linear;
}

// ---------------------------------------------------------------------------
// Structure regularizers
// ---------------------------------------------------------------------------

/// Mean over pixels of sum_{u,v} H(u) H(v) |mid_u - mid_v|, evaluated in
/// O(K) per pixel with prefix sums.
inline LossTerm depth_distortion(std::span<const double> histogram, const RayBinning& binning) {
    const int k_bins = binning.bins();
    if (k_bins < 1) throw InvalidArgumentError("depth_distortion needs a valid binning");
    if (histogram.size() % k_bins != 0) throw ShapeMismatchError("histogram size is not a multiple of the bin count");
    const std::size_t pixels = histogram.size() / k_bins;
    std::vector<double> mid(k_bins);
    for (int k = 0; k < k_bins; ++k) mid[k] = binning.midpoint(k);

    LossTerm t;
    t.grad.assign(histogram.size(), 0.0);
    const double inv_n = pixels ? 1.0 / static_cast<double>(pixels) : 0.0;
    double sum = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) {
        const double* h = histogram.data() + p * k_bins;
        double* g = t.grad.data() + p * k_bins;
        double mass = 0.0, moment = 0.0;
        for (int k = 0; k < k_bins; ++k) {
            mass += h[k];
            moment += h[k] * mid[k];
        }
        double before_mass = 0.0, before_moment = 0.0, value = 0.0;
        for (int k = 0; k < k_bins; ++k) {
            // sum_v H(v) |mid_k - mid_v| split at k
            const double lower = mid[k] * before_mass - before_moment;
            const double after_mass = mass - before_mass - h[k];
            const double after_moment = moment - before_moment - h[k] * mid[k];
            const double upper = after_moment - mid[k] * after_mass;
            value += 2.0 * h[k] * lower;
            g[k] = 2.0 * (lower + upper) * inv_n;
            before_mass += h[k];
            before_moment += h[k] * mid[k];
        }
        sum += value;
    }
    t.value = sum * inv_n;
    return t;
}

/// Gradients of the near/far penalty with respect to its four input maps.
struct NearFarTerm {
    double value = 0.0;
    std::vector<double> near_depth, near_transmittance, far_depth, far_transmittance;
};

/// Mean over pixels of T^N * T^F * |d^N - d^F|.
inline NearFarTerm near_far_reg(const Image& near_depth, const Image& near_t, const Image& far_depth,
                                const Image& far_t) {
    require_same_shape(near_depth, near_t, "near_far_reg");
    require_same_shape(near_depth, far_depth, "near_far_reg");
    require_same_shape(near_depth, far_t, "near_far_reg");
    const std::size_t n = near_depth.size();
    NearFarTerm t;
    t.near_depth.assign(n, 0.0);
    t.near_transmittance.assign(n, 0.0);
    t.far_depth.assign(n, 0.0);
    t.far_transmittance.assign(n, 0.0);
    const double inv_n = n ? 1.0 / static_cast<double>(n) : 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = near_depth.data[i] - far_depth.data[i];
        const double gap = std::abs(diff);
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        const double tn = near_t.data[i], tf = far_t.data[i];
        sum += tn * tf * gap;
        t.near_transmittance[i] = tf * gap * inv_n;
        t.far_transmittance[i] = tn * gap * inv_n;
        t.near_depth[i] = tn * tf * sign * inv_n;
        t.far_depth[i] = -tn * tf * sign * inv_n;
    }
    t.value = sum * inv_n;
    return t;
}

/// Mean over pixels of -log(T + eps).
inline LossTerm transmittance_reg(const Image& transmittance, double eps = kDefaultLossEpsilon) {
    LossTerm t;
    t.grad.resize(transmittance.size());
    const double inv_n = transmittance.size() ? 1.0 / static_cast<double>(transmittance.size()) : 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < transmittance.size(); ++i) {
        const double v = transmittance.data[i] + eps;
        sum += -std::log(v);
        t.grad[i] = -inv_n / v;
    }
    t.value = sum * inv_n;
    return t;
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

struct LossWeights {
    double transmittance = 0.01;
    double distortion = 0.1;
    double near_far = 0.01;
};

struct LossParts {
    double image = 0.0;
    double transmittance = 0.0;
    double distortion = 0.0;
    double near_far = 0.0;
};

/// image + l_T R_T + l_dist R_dist + l_nf R_nf. Throws DivergenceError
/// naming the first non-finite part.
inline double total_loss(const LossParts& parts, const LossWeights& w = {}) {
    const std::pair<const char*, double> named[] = {{"image", parts.image},
                                                    {"transmittance", parts.transmittance},
                                                    {"distortion", parts.distortion},
                                                    {"near_far", parts.near_far}};
    for (const auto& [name, v] : named) {
        if (!std::isfinite(v)) {
            throw DivergenceError(std::string("non-finite loss term '") + name + "'", name);
        }
    }
    return parts.image + w.transmittance * parts.transmittance + w.distortion * parts.distortion +
           w.near_far * parts.near_far;
}

} // namespace rawsplat
