#pragma once

#include "rawsplat/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rawsplat {

/// Exponent arguments are clamped here before exp() to avoid overflow.
inline constexpr double kMaxLogRadiance = 20.0;

enum class ColorModel { mlp, spherical_harmonics };

inline const char* to_string(ColorModel m) {
    return m == ColorModel::mlp ? "mlp" : "sh";
}

inline ColorModel color_model_from_string(const std::string& s) {
    if (s == "mlp") return ColorModel::mlp;
    if (s == "sh" || s == "spherical_harmonics") return ColorModel::spherical_harmonics;
    throw InvalidArgumentError("unknown color model '" + s + "'");
}

/// Unit direction from the camera origin to a primitive center; zero when
/// they coincide.
inline Vec3 view_direction(const Vec3& camera_origin, const Vec3& position) {
    const Vec3 d = position - camera_origin;
    const double n = d.norm();
    return n > 0.0 ? Vec3(d / n) : Vec3(Vec3::Zero());
}

/// d(direction)/d(position) applied to an upstream gradient.
inline Vec3 view_direction_backward(const Vec3& camera_origin, const Vec3& position,
                                    const Vec3& d_direction) {
    const Vec3 d = position - camera_origin;
    const double n = d.norm();
    if (!(n > 0.0)) return Vec3::Zero();
    const Vec3 u = d / n;
    return (d_direction - u * u.dot(d_direction)) / n;
}

// ---------------------------------------------------------------------------
// Color MLP
// ---------------------------------------------------------------------------

/// Tiny MLP mapping [feature, view direction] to a 3-vector log-radiance
/// offset: two ReLU hidden layers of width 32 and a linear output layer.
class ColorMLP {
public:
    static constexpr int kHidden = 32;

    ColorMLP() = default;
    explicit ColorMLP(int feature_dim)
        : feature_dim_(feature_dim), params_(parameter_count(feature_dim), 0.0) {}

    /// Uniform fan-in initialization; the output layer is scaled by 0.01 so the
    /// network starts close to zero.
    static ColorMLP initialized(int feature_dim, std::uint64_t seed) {
        ColorMLP mlp(feature_dim);
        std::mt19937_64 rng(seed);
        auto fill = [&](std::size_t offset, std::size_t count, int fan_in, double gain) {
            const double bound = gain / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (std::size_t i = 0; i < count; ++i) mlp.params_[offset + i] = u(rng);
        };
        const int in = mlp.input_dim();
        fill(mlp.w1_offset(), std::size_t(kHidden) * in, in, 1.0);
        fill(mlp.w2_offset(), std::size_t(kHidden) * kHidden, kHidden, 1.0);
        fill(mlp.w3_offset(), std::size_t(3) * kHidden, kHidden, 0.01);
        return mlp;
    }

    static std::size_t parameter_count(int feature_dim) {
        const std::size_t in = feature_dim + 3;
        return kHidden * in + kHidden + kHidden * kHidden + kHidden + 3 * kHidden + 3;
    }

    int feature_dim() const { return feature_dim_; }
    int input_dim() const { return feature_dim_ + 3; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::size_t w1_offset() const { return 0; }
    std::size_t b1_offset() const { return std::size_t(kHidden) * input_dim(); }
    std::size_t w2_offset() const { return b1_offset() + kHidden; }
    std::size_t b2_offset() const { return w2_offset() + std::size_t(kHidden) * kHidden; }
    std::size_t w3_offset() const { return b2_offset() + kHidden; }
    std::size_t b3_offset() const { return w3_offset() + 3 * kHidden; }

    bool all_finite() const {
        return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Network output F(feature, direction), before the bias and exponent.
    Vec3 evaluate(std::span<const double> feature, const Vec3& direction) const {
        Activations act;
        return forward(feature, direction, act);
    }

    /// Accumulates parameter gradients into `d_params` and returns the
    /// gradients for the feature (written to `d_feature`) and direction.
    Vec3 backward(std::span<const double> feature, const Vec3& direction, const Vec3& d_out,
                  std::span<double> d_params, std::span<double> d_feature) const {
        Activations act;
        forward(feature, direction, act);
        const double* p = params_.data();
        double* dp = d_params.data();
        const int in = input_dim();

        std::array<double, kHidden> d_h2{};
        for (int o = 0; o < 3; ++o) {
            const double g = d_out[o];
            dp[b3_offset() + o] += g;
            const double* w = p + w3_offset() + o * kHidden;
            double* dw = dp + w3_offset() + o * kHidden;
            for (int h = 0; h < kHidden; ++h) {
                dw[h] += g * act.h2[h];
                d_h2[h] += g * w[h];
            }
        }
        std::array<double, kHidden> d_h1{};
        for (int h = 0; h < kHidden; ++h) {
            if (act.h2[h] <= 0.0) continue;
            const double g = d_h2[h];
            dp[b2_offset() + h] += g;
            const double* w = p + w2_offset() + h * kHidden;
            double* dw = dp + w2_offset() + h * kHidden;
            for (int k = 0; k < kHidden; ++k) {
                dw[k] += g * act.h1[k];
                d_h1[k] += g * w[k];
            }
        }
        std::vector<double> d_in(in, 0.0);
        for (int h = 0; h < kHidden; ++h) {
            if (act.h1[h] <= 0.0) continue;
            const double g = d_h1[h];
            dp[b1_offset() + h] += g;
            const double* w = p + w1_offset() + h * in;
            double* dw = dp + w1_offset() + h * in;
            for (int k = 0; k < in; ++k) {
                dw[k] += g * act.input[k];
                d_in[k] += g * w[k];
            }
        }
        for (int k = 0; k < feature_dim_; ++k) d_feature[k] += d_in[k];
        return Vec3(d_in[feature_dim_], d_in[feature_dim_ + 1], d_in[feature_dim_ + 2]);
    }

private:
    struct Activations {
        std::vector<double> input;
        std::array<double, kHidden> h1{};
        std::array<double, kHidden> h2{};
    };

    Vec3 forward(std::span<const double> feature, const Vec3& direction, Activations& act) const {
        const int in = input_dim();
        act.input.resize(in);
        std::copy(feature.begin(), feature.end(), act.input.begin());
        act.input[feature_dim_] = direction.x();
        act.input[feature_dim_ + 1] = direction.y();
        act.input[feature_dim_ + 2] = direction.z();

        const double* p = params_.data();
        for (int h = 0; h < kHidden; ++h) {
            const double* w = p + w1_offset() + h * in;
            double s = p[b1_offset() + h];
            for (int k = 0; k < in; ++k) s += w[k] * act.input[k];
            act.h1[h] = s > 0.0 ? s : 0.0;
        }
        for (int h = 0; h < kHidden; ++h) {
            const double* w = p + w2_offset() + h * kHidden;
            double s = p[b2_offset() + h];
            for (int k = 0; k < kHidden; ++k) s += w[k] * act.h1[k];
            act.h2[h] = s > 0.0 ? s : 0.0;
        }
        Vec3 out;
        for (int o = 0; o < 3; ++o) {
            const double* w = p + w3_offset() + o * kHidden;
            double s = p[b3_offset() + o];
            for (int k = 0; k < kHidden; ++k) s += w[k] * act.h2[k];
            out[o] = s;
        }
        return out;
    }

    int feature_dim_ = 0;
    std::vector<double> params_;
};

/// c = exp(F(f, v) + b), with the exponent argument clamped.
inline Vec3 color_forward(const ColorMLP& mlp, std::span<const double> feature, const Vec3& view,
                          const Vec3& bias) {
    const Vec3 arg = mlp.evaluate(feature, view) + bias;
    return arg.cwiseMin(kMaxLogRadiance).array().exp();
}

struct ColorGradient {
    std::vector<double> params;
    std::vector<double> feature;
    Vec3 bias = Vec3::Zero();
    Vec3 direction = Vec3::Zero();
};

inline ColorGradient color_backward(const ColorMLP& mlp, std::span<const double> feature,
                                    const Vec3& view, const Vec3& bias, const Vec3& upstream) {
    ColorGradient g;
    g.params.assign(mlp.size(), 0.0);
    g.feature.assign(feature.size(), 0.0);
    const Vec3 arg = mlp.evaluate(feature, view) + bias;
    Vec3 d_arg;
    for (int k = 0; k < 3; ++k) {
        d_arg[k] = arg[k] > kMaxLogRadiance ? 0.0 : upstream[k] * std::exp(arg[k]);
    }
    g.bias = d_arg;
    g.direction = mlp.backward(feature, view, d_arg, g.params, g.feature);
    return g;
}

/// Color state handed to a densified child: exact copies of the parent's.
struct ColorState {
    std::vector<double> feature;
    Vec3 bias = Vec3::Zero();
};

inline ColorState clone_color_state(std::span<const double> feature, const Vec3& bias) {
    return ColorState{std::vector<double>(feature.begin(), feature.end()), bias};
}

// ---------------------------------------------------------------------------
// Degree-3 spherical harmonics (baseline color model)
// ---------------------------------------------------------------------------

inline constexpr int kShBasisCount = 16;
inline constexpr int kShFeatureDim = 3 * kShBasisCount;
inline constexpr double kShC0 = 0.28209479177387814;

namespace detail {

/// Basis values and their gradients with respect to the (x, y, z) direction.
inline void sh_basis(const Vec3& d, std::array<double, kShBasisCount>& y,
                     std::array<Vec3, kShBasisCount>* grad) {
    constexpr double c1 = 0.4886025119029199;
    constexpr double c2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                              -1.0925484305920792, 0.5462742152960396};
    constexpr double c3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                              0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                              -0.5900435899266435};
    const double x = d.x(), yy_ = d.y(), z = d.z();
    const double xx = x * x, yy = yy_ * yy_, zz = z * z;
    const double& Y = yy_;
    y[0] = kShC0;
    y[1] = -c1 * Y;
    y[2] = c1 * z;
    y[3] = -c1 * x;
    y[4] = c2[0] * x * Y;
    y[5] = c2[1] * Y * z;
    y[6] = c2[2] * (2 * zz - xx - yy);
    y[7] = c2[3] * x * z;
    y[8] = c2[4] * (xx - yy);
    y[9] = c3[0] * Y * (3 * xx - yy);
    y[10] = c3[1] * x * Y * z;
    y[11] = c3[2] * Y * (4 * zz - xx - yy);
    y[12] = c3[3] * z * (2 * zz - 3 * xx - 3 * yy);
    y[13] = c3[4] * x * (4 * zz - xx - yy);
    y[14] = c3[5] * z * (xx - yy);
    y[15] = c3[6] * x * (xx - 3 * yy);
    if (!grad) return;
    auto& g = *grad;
    g[0] = Vec3::Zero();
    g[1] = Vec3(0, -c1, 0);
    g[2] = Vec3(0, 0, c1);
    g[3] = Vec3(-c1, 0, 0);
    g[4] = c2[0] * Vec3(Y, x, 0);
    g[5] = c2[1] * Vec3(0, z, Y);
    g[6] = c2[2] * Vec3(-2 * x, -2 * Y, 4 * z);
    g[7] = c2[3] * Vec3(z, 0, x);
    g[8] = c2[4] * Vec3(2 * x, -2 * Y, 0);
    g[9] = c3[0] * Vec3(6 * x * Y, 3 * xx - 3 * yy, 0);
    g[10] = c3[1] * Vec3(Y * z, x * z, x * Y);
    g[11] = c3[2] * Vec3(-2 * x * Y, 4 * zz - xx - 3 * yy, 8 * Y * z);
    g[12] = c3[3] * Vec3(-6 * x * z, -6 * Y * z, 6 * zz - 3 * xx - 3 * yy);
    g[13] = c3[4] * Vec3(4 * zz - 3 * xx - yy, -2 * x * Y, 8 * x * z);
    g[14] = c3[5] * Vec3(2 * x * z, -2 * Y * z, xx - yy);
    g[15] = c3[6] * Vec3(3 * xx - 3 * yy, -6 * x * Y, 0);
}

} // namespace detail

/// Vanilla splatting color: max(SH(d) + 0.5, 0). Coefficients are stored
/// basis-major: feature[3 * k + channel].
inline Vec3 sh_color(std::span<const double> coeffs, const Vec3& direction) {
    std::array<double, kShBasisCount> y;
    detail::sh_basis(direction, y, nullptr);
    Vec3 c = Vec3::Constant(0.5);
    for (int k = 0; k < kShBasisCount; ++k) {
        for (int ch = 0; ch < 3; ++ch) c[ch] += y[k] * coeffs[3 * k + ch];
    }
    return c.cwiseMax(0.0);
}

/// Accumulates coefficient gradients into d_coeffs; returns d/d(direction).
inline Vec3 sh_color_backward(std::span<const double> coeffs, const Vec3& direction,
                              const Vec3& upstream, std::span<double> d_coeffs) {
    std::array<double, kShBasisCount> y;
    std::array<Vec3, kShBasisCount> gy;
    detail::sh_basis(direction, y, &gy);
    Vec3 raw = Vec3::Constant(0.5);
    for (int k = 0; k < kShBasisCount; ++k) {
        for (int ch = 0; ch < 3; ++ch) raw[ch] += y[k] * coeffs[3 * k + ch];
    }
    Vec3 d_dir = Vec3::Zero();
    for (int ch = 0; ch < 3; ++ch) {
        if (raw[ch] < 0.0) continue;
        const double g = upstream[ch];
        for (int k = 0; k < kShBasisCount; ++k) {
            d_coeffs[3 * k + ch] += g * y[k];
            d_dir += g * coeffs[3 * k + ch] * gy[k];
        }
    }
    return d_dir;
}

// ---------------------------------------------------------------------------
// Color field: the model shared by every primitive
// ---------------------------------------------------------------------------

struct ColorField {
    ColorModel model = ColorModel::mlp;
    ColorMLP mlp;

    static ColorField make_mlp(int feature_dim, std::uint64_t seed) {
        return ColorField{ColorModel::mlp, ColorMLP::initialized(feature_dim, seed)};
    }
    static ColorField make_sh() { return ColorField{ColorModel::spherical_harmonics, ColorMLP(0)}; }

    /// Per-primitive feature length this model expects.
    int feature_dim() const {
        return model == ColorModel::mlp ? mlp.feature_dim() : kShFeatureDim;
    }

    /// Number of shared (non per-primitive) parameters.
    std::size_t parameter_count() const { return model == ColorModel::mlp ? mlp.size() : 0; }

    Vec3 evaluate(std::span<const double> feature, const Vec3& direction, const Vec3& bias) const {
        if (model == ColorModel::mlp) return color_forward(mlp, feature, direction, bias);
        return sh_color(feature, direction);
    }

    /// Accumulates gradients; returns d/d(direction). `d_bias` is written.
    Vec3 backward(std::span<const double> feature, const Vec3& direction, const Vec3& bias,
                  const Vec3& upstream, std::span<double> d_params, std::span<double> d_feature,
                  Vec3& d_bias) const {
        if (model == ColorModel::spherical_harmonics) {
            d_bias.setZero();
            return sh_color_backward(feature, direction, upstream, d_feature);
        }
        const Vec3 arg = mlp.evaluate(feature, direction) + bias;
        Vec3 d_arg;
        for (int k = 0; k < 3; ++k) {
            d_arg[k] = arg[k] > kMaxLogRadiance ? 0.0 : upstream[k] * std::exp(arg[k]);
        }
        d_bias = d_arg;
        return mlp.backward(feature, direction, d_arg, d_params, d_feature);
    }
};

} // namespace rawsplat
