#pragma once

#include "rawsplat/parallel.hpp"
#include "rawsplat/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace rawsplat {

enum class ToneCurve { linear_clip, gamma, filmic };

inline std::string to_string(ToneCurve c) {
    switch (c) {
    case ToneCurve::linear_clip: return "linear";
    case ToneCurve::gamma: return "gamma";
    case ToneCurve::filmic: return "filmic";
    }
    return "linear";
}

inline ToneCurve tone_curve_from_string(const std::string& s) {
    if (s == "linear" || s == "linear-clip") return ToneCurve::linear_clip;
    if (s == "gamma") return ToneCurve::gamma;
    if (s == "filmic" || s == "filmic-sigmoid") return ToneCurve::filmic;
    throw InvalidArgumentError("unknown tone curve '" + s + "'");
}

struct TonemapParams {
    double exposure_stops = 0.0;
    Vec3 wb_gains = Vec3::Ones();
    ToneCurve curve = ToneCurve::gamma;
    double gamma = 2.2;
    bool local_enabled = false;
    double local_strength = 0.5;

    void validate() const {
        if (!(wb_gains.minCoeff() > 0.0)) throw InvalidArgumentError("white balance gains must be positive");
        if (!(gamma > 0.0)) throw InvalidArgumentError("gamma must be positive");
        if (!(local_strength >= 0.0 && local_strength <= 1.0)) {
            throw InvalidArgumentError("local strength must be in [0, 1]");
        }
        if (!std::isfinite(exposure_stops)) throw InvalidArgumentError("exposure stops must be finite");
    }
};

struct RefocusParams {
    double focus_depth = 1.0;
    double aperture = 0.0;
    double max_kernel_radius = 16.0;
    int layers = 8;

    void validate() const {
        if (!(focus_depth > 0.0)) throw InvalidArgumentError("focus depth must be positive");
        if (!(aperture >= 0.0)) throw InvalidArgumentError("aperture must be nonnegative");
        if (!(max_kernel_radius >= 0.0)) throw InvalidArgumentError("max kernel radius must be nonnegative");
        if (layers < 1) throw InvalidArgumentError("refocus needs at least one layer");
    }
};

// ---------------------------------------------------------------------------
// Linear operators
// ---------------------------------------------------------------------------

inline Image apply_exposure(const Image& linear, double stops) {
    Image out = linear;
    const double k = std::exp2(stops);
    for (double& v : out.data) v *= k;
    return out;
}

inline Image change_white_balance(const Image& linear, const Vec3& gains) {
    if (linear.channels != 3) throw ShapeMismatchError("white balance needs a 3-channel image");
    if (!(gains.minCoeff() > 0.0)) throw InvalidArgumentError("white balance gains must be positive");
    Image out = linear;
    for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) out.data[p * 3 + c] *= gains[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tone mapping
// ---------------------------------------------------------------------------

/// Global curve applied to one nonnegative linear value; result in [0, 1].
inline double apply_curve(double x, ToneCurve curve, double gamma) {
    x = std::max(x, 0.0);
    switch (curve) {
    case ToneCurve::linear_clip: return std::min(x, 1.0);
    case ToneCurve::gamma: return std::min(std::pow(x, 1.0 / gamma), 1.0);
    case ToneCurve::filmic: {
        // Rational fit of the ACES reference curve.
        const double y = x * (2.51 * x + 0.03) / (x * (2.43 * x + 0.59) + 0.14);
        return std::clamp(y, 0.0, 1.0);
    }
    }
    return std::min(x, 1.0);
}

namespace detail {

/// Separable [1 4 6 4 1] / 16 blur with clamped borders.
inline Image binomial_blur(const Image& in) {
    static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    Image tmp(in.width, in.height, in.channels), out(in.width, in.height, in.channels);
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            for (int c = 0; c < in.channels; ++c) {
                double s = 0.0;
                for (int t = -2; t <= 2; ++t) s += k[t + 2] * in.at(std::clamp(x + t, 0, in.width - 1), y, c);
                tmp.at(x, y, c) = s;
            }
        }
    }
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            for (int c = 0; c < in.channels; ++c) {
                double s = 0.0;
                for (int t = -2; t <= 2; ++t) s += k[t + 2] * tmp.at(x, std::clamp(y + t, 0, in.height - 1), c);
                out.at(x, y, c) = s;
            }
        }
    }
    return out;
}

inline Image downsample(const Image& in) {
    const Image b = binomial_blur(in);
    Image out((in.width + 1) / 2, (in.height + 1) / 2, in.channels);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < in.channels; ++c) out.at(x, y, c) = b.at(2 * x, 2 * y, c);
        }
    }
    return out;
}

inline Image upsample(const Image& in, int width, int height) {
    Image out(width, height, in.channels);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < in.channels; ++c) {
                out.at(x, y, c) = in.at(std::min(x / 2, in.width - 1), std::min(y / 2, in.height - 1), c);
            }
        }
    }
    return binomial_blur(out);
}

inline std::vector<Image> laplacian_pyramid(const Image& img, int levels) {
    std::vector<Image> pyr;
    Image cur = img;
    for (int l = 0; l + 1 < levels && cur.width > 1 && cur.height > 1; ++l) {
        Image down = downsample(cur);
        const Image up = upsample(down, cur.width, cur.height);
        for (std::size_t i = 0; i < cur.size(); ++i) cur.data[i] -= up.data[i];
        pyr.push_back(std::move(cur));
        cur = std::move(down);
    }
    pyr.push_back(std::move(cur));
    return pyr;
}

inline std::vector<Image> gaussian_pyramid(const Image& img, int levels) {
    std::vector<Image> pyr{img};
    for (int l = 0; l + 1 < levels && pyr.back().width > 1 && pyr.back().height > 1; ++l) {
        pyr.push_back(downsample(pyr.back()));
    }
    return pyr;
}

inline Image collapse_pyramid(const std::vector<Image>& pyr) {
    Image cur = pyr.back();
    for (std::size_t l = pyr.size() - 1; l-- > 0;) {
        Image up = upsample(cur, pyr[l].width, pyr[l].height);
        for (std::size_t i = 0; i < up.size(); ++i) up.data[i] += pyr[l].data[i];
        cur = std::move(up);
    }
    return cur;
}

} // namespace detail

inline constexpr int kFusionLevels = 4;
inline constexpr std::array<double, 3> kFusionStops = {-2.0, 0.0, 2.0};

/// Exposure fusion of three virtual exposures of a linear image through
/// `curve`. Weights favor values near mid-gray.
inline Image local_tonemap(const Image& linear, ToneCurve curve, double gamma) {
    const int w = linear.width, h = linear.height;
    std::vector<Image> exposures;
    std::vector<Image> weights;
    for (double stops : kFusionStops) {
        Image e(w, h, 3);
        Image wt(w, h, 1);
        const double k = std::exp2(stops);
        for (std::size_t p = 0; p < linear.pixel_count(); ++p) {
            double wexp = 1.0;
            for (int c = 0; c < 3; ++c) {
                const double v = apply_curve(linear.data[p * 3 + c] * k, curve, gamma);
                e.data[p * 3 + c] = v;
                wexp *= std::exp(-(v - 0.5) * (v - 0.5) / (2.0 * 0.2 * 0.2));
            }
            wt.data[p] = wexp + 1e-12;
        }
        exposures.push_back(std::move(e));
        weights.push_back(std::move(wt));
    }
    for (std::size_t p = 0; p < linear.pixel_count(); ++p) {
        double s = 0.0;
        for (const auto& wt : weights) s += wt.data[p];
        for (auto& wt : weights) wt.data[p] /= s;
    }

    std::vector<Image> blended;
    for (std::size_t k = 0; k < exposures.size(); ++k) {
        const auto lap = detail::laplacian_pyramid(exposures[k], kFusionLevels);
        const auto gw = detail::gaussian_pyramid(weights[k], kFusionLevels);
        if (blended.empty()) {
            for (const auto& l : lap) blended.emplace_back(l.width, l.height, 3);
        }
        for (std::size_t l = 0; l < lap.size(); ++l) {
            for (std::size_t p = 0; p < lap[l].pixel_count(); ++p) {
                for (int c = 0; c < 3; ++c) blended[l].data[p * 3 + c] += gw[l].data[p] * lap[l].data[p * 3 + c];
            }
        }
    }
    Image out = detail::collapse_pyramid(blended);
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

/// exposure, white balance, curve, optional local operator, clamp.
inline Image tonemap(const Image& linear, const TonemapParams& params) {
    params.validate();
    if (linear.channels != 3) throw ShapeMismatchError("tonemap needs a 3-channel image");
    const Image balanced = change_white_balance(apply_exposure(linear, params.exposure_stops), params.wb_gains);
    Image out = balanced;
    for (double& v : out.data) v = apply_curve(v, params.curve, params.gamma);
    if (params.local_enabled && params.local_strength > 0.0) {
        const Image local = local_tonemap(balanced, params.curve, params.gamma);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] = (1.0 - params.local_strength) * out.data[i] + params.local_strength * local.data[i];
        }
    }
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Refocus
// ---------------------------------------------------------------------------

/// Normalized Gaussian of standard deviation sigma, truncated at 3 sigma.
inline std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 1e-6)) return {1.0};
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= s;
    return k;
}

/// Separable convolution with zero padding outside the image.
inline Image separable_blur(const Image& in, double sigma) {
    const auto k = gaussian_kernel(sigma);
    if (k.size() == 1) return in;
    const int r = static_cast<int>(k.size() / 2);
    const int w = in.width, h = in.height, ch = in.channels;
    Image tmp(w, h, ch), out(w, h, ch);
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yy) {
        const int y = static_cast<int>(yy);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double s = 0.0;
                for (int t = -r; t <= r; ++t) {
                    const int xs = x + t;
                    if (xs >= 0 && xs < w) s += k[t + r] * in.at(xs, y, c);
                }
                tmp.at(x, y, c) = s;
            }
        }
    });
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yy) {
        const int y = static_cast<int>(yy);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double s = 0.0;
                for (int t = -r; t <= r; ++t) {
                    const int ys = y + t;
                    if (ys >= 0 && ys < h) s += k[t + r] * tmp.at(x, ys, c);
                }
                out.at(x, y, c) = s;
            }
        }
    });
    return out;
}

/// Blur radius for a disparity: aperture * |disparity - 1 / focus| capped.
inline double circle_of_confusion(double disparity, const RefocusParams& p) {
    return std::min(p.aperture * std::abs(disparity - 1.0 / p.focus_depth), p.max_kernel_radius);
}

/// Depth-layered gather blur. Pixels are split into disparity layers, each
/// layer is blurred with its own kernel and the layers are composited from
/// back to front. Pixels with zero transmittance or depth belong to the
/// farthest layer.
inline Image refocus(const Image& linear, const Image& depth, const Image& transmittance,
                     const RefocusParams& params) {
    params.validate();
    if (depth.width != linear.width || depth.height != linear.height || depth.channels != 1 ||
        !depth.same_shape(transmittance)) {
        throw ShapeMismatchError("refocus: depth and transmittance must be single-channel maps of the image size");
    }
    if (params.aperture == 0.0) return linear;
    const std::size_t n = linear.pixel_count();
    const int ch = linear.channels;

    std::vector<double> disparity(n);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::vector<bool> sentinel(n, false);
    for (std::size_t p = 0; p < n; ++p) {
        if (!(transmittance.data[p] > 1e-6) || !(depth.data[p] > 0.0)) {
            sentinel[p] = true;
            continue;
        }
        disparity[p] = 1.0 / depth.data[p];
        lo = std::min(lo, disparity[p]);
        hi = std::max(hi, disparity[p]);
    }
    if (!std::isfinite(lo)) return linear;
    for (std::size_t p = 0; p < n; ++p) {
        if (sentinel[p]) disparity[p] = lo;
    }

    const int layers = params.layers;
    const double span = hi - lo;
    std::vector<int> layer_of(n);
    std::vector<double> layer_sum(layers, 0.0);
    std::vector<int> layer_count(layers, 0);
    for (std::size_t p = 0; p < n; ++p) {
        // Layer 0 is the farthest (smallest disparity).
        int l = span > 0.0 ? static_cast<int>((disparity[p] - lo) / span * layers) : 0;
        l = std::clamp(l, 0, layers - 1);
        layer_of[p] = l;
        layer_sum[l] += disparity[p];
        ++layer_count[l];
    }

    Image acc_color(linear.width, linear.height, ch);
    std::vector<double> acc_alpha(n, 0.0);
    for (int l = 0; l < layers; ++l) {
        if (layer_count[l] == 0) continue;
        const double rho = circle_of_confusion(layer_sum[l] / layer_count[l], params);
        Image layer(linear.width, linear.height, ch + 1);
        for (std::size_t p = 0; p < n; ++p) {
            if (layer_of[p] != l) continue;
            for (int c = 0; c < ch; ++c) layer.data[p * (ch + 1) + c] = linear.data[p * ch + c];
            layer.data[p * (ch + 1) + ch] = 1.0;
        }
        const Image blurred = separable_blur(layer, rho);
        for (std::size_t p = 0; p < n; ++p) {
            const double a = std::clamp(blurred.data[p * (ch + 1) + ch], 0.0, 1.0);
            for (int c = 0; c < ch; ++c) {
                acc_color.data[p * ch + c] = blurred.data[p * (ch + 1) + c] + (1.0 - a) * acc_color.data[p * ch + c];
            }
            acc_alpha[p] = a + (1.0 - a) * acc_alpha[p];
        }
    }
    for (std::size_t p = 0; p < n; ++p) {
        if (acc_alpha[p] > 1e-12) {
            for (int c = 0; c < ch; ++c) acc_color.data[p * ch + c] /= acc_alpha[p];
        }
    }
    return acc_color;
}

} // namespace rawsplat
