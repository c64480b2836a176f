#pragma once

#include "rawsplat/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace rawsplat {

struct AffineFit {
    double a = 1.0;
    double b = 0.0;
};

/// Least-squares y ~ a x + b over every element.
inline AffineFit affine_fit(const Image& reference, const Image& output) {
    require_same_shape(reference, output, "affine_align");
    const std::size_t n = reference.size();
    if (n == 0) throw DegenerateFitError("affine fit of empty images");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += reference.data[i];
        my += output.data[i];
    }
    mx /= n;
    my /= n;
    double vxx = 0.0, vyy = 0.0, vxy = 0.0, peak_x = 0.0, peak_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = reference.data[i] - mx, dy = output.data[i] - my;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
        peak_x = std::max(peak_x, std::abs(reference.data[i]));
        peak_y = std::max(peak_y, std::abs(output.data[i]));
    }
    // Spread below accumulated rounding of the mean counts as constant.
    const double tol = 64.0 * std::numeric_limits<double>::epsilon();
    auto flat = [&](double var, double peak) { return !(var > n * (tol * peak) * (tol * peak)); };
    if (flat(vxx, peak_x)) throw DegenerateFitError("reference image is constant; affine fit is undefined");
    if (flat(vyy, peak_y) || vxy == 0.0) throw DegenerateFitError("output is uncorrelated with the reference");
    AffineFit f;
    f.a = vxy / vxx;
    f.b = my - f.a * mx;
    return f;
}

/// Fits (a, b) and maps the output back onto the reference: (y - b) / a.
inline Image affine_align(const Image& reference, const Image& output, AffineFit* fit_out = nullptr) {
    const AffineFit f = affine_fit(reference, output);
    if (fit_out) *fit_out = f;
    Image aligned = output;
    for (double& v : aligned.data) v = (v - f.b) / f.a;
    return aligned;
}

inline double mse(const Image& x, const Image& y) {
    require_same_shape(x, y, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - y.data[i];
        s += d * d;
    }
    return x.size() ? s / x.size() : 0.0;
}

/// Peak 1. Identical images give +infinity.
inline double psnr(const Image& x, const Image& y) {
    const double m = mse(x, y);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(m);
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// data range 1. Windows are restricted to the valid region.
inline double ssim(const Image& x, const Image& y) {
    require_same_shape(x, y, "ssim");
    constexpr int r = 5;
    constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double w[2 * r + 1];
    double ws = 0.0;
    for (int i = -r; i <= r; ++i) ws += w[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : w) v /= ws;

    const int W = x.width, H = x.height, C = x.channels;
    if (W < 2 * r + 1 || H < 2 * r + 1) throw InvalidArgumentError("ssim needs images of at least 11x11");
    double total = 0.0;
    long count = 0;
    for (int c = 0; c < C; ++c) {
        for (int cy = r; cy < H - r; ++cy) {
            for (int cx = r; cx < W - r; ++cx) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    for (int dx = -r; dx <= r; ++dx) {
                        const double k = w[dy + r] * w[dx + r];
                        const double a = x.at(cx + dx, cy + dy, c), b = y.at(cx + dx, cy + dy, c);
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
                total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
    }
    return total / count;
}

} // namespace rawsplat
