#pragma once

#include "rawsplat/config.hpp"
#include "rawsplat/dataset.hpp"
#include "rawsplat/rasterizer.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace rawsplat {

/// Per-pixel noise: variance gain * signal + read^2.
struct NoiseModel {
    double gain = 0.0;
    double read = 0.0;

    double variance(double signal) const { return gain * std::max(signal, 0.0) + read * read; }
};

/// One noisy observation of `signal`, clipped at zero.
template <class Rng>
double sample_noisy(double signal, const NoiseModel& noise, Rng& rng) {
    const double var = noise.variance(signal);
    if (var <= 0.0) return std::max(signal, 0.0);
    std::normal_distribution<double> n(0.0, std::sqrt(var));
    return std::max(signal + n(rng), 0.0);
}

struct SyntheticSceneSpec {
    int primitives = 200;
    double dynamic_range = 100.0;    // max / min radiance
    double max_radiance = 0.45;
    NoiseModel noise{1e-3, 2e-3};
    int train_views = 20;
    int test_views = 4;
    int width = 64;
    int height = 64;
    double focal = 96.0;
    double baseline = 0.8;           // side of the square camera grid
    std::vector<double> shutters{1.0, 0.5};
    double sparse_fraction = 0.5;
    double sparse_jitter = 0.02;
    double drop_beyond = 0.0;        // drop sparse points farther than this (0 keeps all)
    std::uint64_t seed = 0;

    void validate() const {
        if (primitives < 8) throw InvalidArgumentError("synthetic scene needs at least 8 primitives");
        if (!(dynamic_range >= 1.0) || !(max_radiance > 0.0)) throw InvalidArgumentError("invalid radiance range");
        if (noise.gain < 0.0 || noise.read < 0.0) throw InvalidArgumentError("noise parameters must be nonnegative");
        if (train_views < 2 || test_views < 0) throw InvalidArgumentError("synthetic scene needs at least two views");
        if (width <= 0 || height <= 0 || !(focal > 0.0)) throw InvalidArgumentError("invalid synthetic camera");
        if (shutters.empty()) throw InvalidArgumentError("at least one shutter scale is required");
        for (double s : shutters) {
            if (!(s > 0.0)) throw InvalidArgumentError("shutter scales must be positive");
        }
        if (!(sparse_fraction > 0.0 && sparse_fraction <= 1.0)) throw InvalidArgumentError("sparse_fraction must be in (0, 1]");
    }

    /// Applies `key = value` overrides; `shutters` is a comma-separated list.
    void apply(const std::map<std::string, std::string>& kv) {
        using namespace detail;
        for (const auto& [k, v] : kv) {
            if (k == "primitives") primitives = static_cast<int>(parse_int(k, v));
            else if (k == "dynamic_range") dynamic_range = parse_double(k, v);
            else if (k == "max_radiance") max_radiance = parse_double(k, v);
            else if (k == "noise_gain") noise.gain = parse_double(k, v);
            else if (k == "read_noise") noise.read = parse_double(k, v);
            else if (k == "train_views") train_views = static_cast<int>(parse_int(k, v));
            else if (k == "test_views") test_views = static_cast<int>(parse_int(k, v));
            else if (k == "width") width = static_cast<int>(parse_int(k, v));
            else if (k == "height") height = static_cast<int>(parse_int(k, v));
            else if (k == "focal") focal = parse_double(k, v);
            else if (k == "baseline") baseline = parse_double(k, v);
            else if (k == "sparse_fraction") sparse_fraction = parse_double(k, v);
            else if (k == "sparse_jitter") sparse_jitter = parse_double(k, v);
            else if (k == "drop_beyond") drop_beyond = parse_double(k, v);
            else if (k == "seed") seed = static_cast<std::uint64_t>(parse_int(k, v));
            else if (k == "shutters") {
                shutters.clear();
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ',')) shutters.push_back(parse_double(k, item));
            } else {
                throw FormatError("unknown synthetic spec key '" + k + "'");
            }
        }
        validate();
    }
};

struct SyntheticScene {
    DatasetBundle dataset;
    GaussianCloud cloud;                // ground truth, feature dimension 0
    ColorField field;                   // zero network: color = exp(bias)
    std::vector<Vec3> radiance;         // per primitive
    std::vector<Image> train_depth;     // clean depth per training view
    std::vector<Image> test_depth;
    std::vector<Image> train_clean;     // clean linear radiance per training view
};

/// Depth of the three primitive layers and the back wall.
inline constexpr double kSyntheticLayers[3] = {3.0, 4.5, 6.0};

namespace detail {

inline std::vector<Vec3> camera_grid(int count, double baseline, std::mt19937_64& rng, bool jitter) {
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<Vec3> eyes;
    for (int i = 0; i < count; ++i) {
        const int gx = i % side, gy = i / side;
        double x = side > 1 ? (gx / (side - 1.0) - 0.5) * baseline : 0.0;
        double y = side > 1 ? (gy / (side - 1.0) - 0.5) * baseline : 0.0;
        if (jitter) {
            x += u(rng) * baseline / side;
            y += u(rng) * baseline / side;
        }
        eyes.emplace_back(x, y, 0.0);
    }
    return eyes;
}

} // namespace detail

/// Random layered scene with a back wall, rendered from a forward-facing
/// camera grid. Deterministic per seed.
inline SyntheticScene generate_synthetic(const SyntheticSceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    SyntheticScene out;
    out.cloud = GaussianCloud(0);
    out.field = ColorField{ColorModel::mlp, ColorMLP(0)};

    const double half_fov = std::atan(std::max(spec.width, spec.height) / (2.0 * spec.focal));
    const double rmin = spec.max_radiance / spec.dynamic_range;
    auto random_radiance = [&] {
        const double lum = rmin * std::exp(std::log(spec.dynamic_range) * unit(rng));
        Vec3 tint(0.7 + 0.3 * unit(rng), 0.7 + 0.3 * unit(rng), 0.7 + 0.3 * unit(rng));
        tint /= tint.maxCoeff();
        return Vec3(lum * tint);
    };
    auto add = [&](const Vec3& pos, const Vec3& scale, const Vec4& q, const Vec3& radiance) {
        GaussianPrimitive p;
        p.position = pos;
        p.log_scale = scale.array().log();
        p.rotation = q;
        p.opacity_logit = inverse_sigmoid(0.95);
        p.color_bias = radiance.array().log();
        out.cloud.push_back(p);
        out.radiance.push_back(radiance);
    };

    // Back wall: a grid of wide, flat primitives covering every view.
    const double wall_z = kSyntheticLayers[2];
    const double wall_half = wall_z * std::tan(half_fov) + spec.baseline;
    const int wall_side = std::max(2, static_cast<int>(std::floor(std::sqrt(spec.primitives * 0.3))));
    const double spacing = 2.0 * wall_half / (wall_side - 1);
    for (int gy = 0; gy < wall_side; ++gy) {
        for (int gx = 0; gx < wall_side; ++gx) {
            const Vec3 pos(-wall_half + gx * spacing, -wall_half + gy * spacing, wall_z + 0.05 * normal(rng));
            add(pos, Vec3(0.7 * spacing, 0.7 * spacing, 0.01), identity_quaternion(), random_radiance());
        }
    }

    // Foreground layers.
    const int remaining = spec.primitives - wall_side * wall_side;
    for (int i = 0; i < remaining; ++i) {
        const double z = kSyntheticLayers[i % 2] + 0.15 * normal(rng);
        const double half = z * std::tan(half_fov) * 0.9;
        const Vec3 pos((2.0 * unit(rng) - 1.0) * half, (2.0 * unit(rng) - 1.0) * half, z);
        const double s = 0.08 + 0.17 * unit(rng);
        const Vec3 scale(s, s * (0.4 + 0.6 * unit(rng)), 0.01);
        const Vec4 spin = quaternion_from_axis_angle(Vec3::UnitZ(), 2.0 * std::numbers::pi * unit(rng));
        const Vec3 tilt_axis = Vec3(normal(rng), normal(rng), 0.0).normalized();
        const Vec4 tilt = quaternion_from_axis_angle(tilt_axis, 0.3 * (unit(rng) - 0.5));
        // Hamilton product tilt * spin.
        Vec4 q;
        q[0] = tilt[0] * spin[0] - tilt[1] * spin[1] - tilt[2] * spin[2] - tilt[3] * spin[3];
        q[1] = tilt[0] * spin[1] + tilt[1] * spin[0] + tilt[2] * spin[3] - tilt[3] * spin[2];
        q[2] = tilt[0] * spin[2] - tilt[1] * spin[3] + tilt[2] * spin[0] + tilt[3] * spin[1];
        q[3] = tilt[0] * spin[3] + tilt[1] * spin[2] - tilt[2] * spin[1] + tilt[3] * spin[0];
        add(pos, scale, q, random_radiance());
    }

    RenderOptions ro;
    ro.histogram = false;
    ro.near_far = false;
    auto make_camera = [&](const Vec3& eye) {
        return look_at(eye, eye + Vec3::UnitZ(), spec.width, spec.height, spec.focal);
    };
    auto to_f32 = [](Image img) {
        for (double& v : img.data) v = static_cast<double>(static_cast<float>(v));
        return img;
    };

    const auto train_eyes = detail::camera_grid(spec.train_views, spec.baseline, rng, true);
    for (int v = 0; v < spec.train_views; ++v) {
        TrainingView tv;
        tv.name = "train_" + std::to_string(v);
        tv.camera = make_camera(train_eyes[v]);
        tv.camera.shutter_scale = spec.shutters[v % spec.shutters.size()];
        const RenderOutput r = render(out.cloud, out.field, tv.camera, ro);
        Image frame = r.color;
        for (double& px : frame.data) px = sample_noisy(px * tv.camera.shutter_scale, spec.noise, rng);
        tv.frame = to_f32(std::move(frame));
        out.train_clean.push_back(r.color);
        out.train_depth.push_back(r.depth);
        out.dataset.train.push_back(std::move(tv));
    }

    const auto test_eyes = detail::camera_grid(spec.test_views, 0.5 * spec.baseline, rng, true);
    for (int v = 0; v < spec.test_views; ++v) {
        TestView tv;
        tv.name = "test_" + std::to_string(v);
        tv.camera = make_camera(test_eyes[v]);
        const RenderOutput r = render(out.cloud, out.field, tv.camera, ro);
        tv.reference = to_f32(r.color);
        out.test_depth.push_back(r.depth);
        out.dataset.test.push_back(std::move(tv));
    }

    for (std::size_t i = 0; i < out.cloud.size(); ++i) {
        if (unit(rng) >= spec.sparse_fraction) continue;
        const Vec3 p = out.cloud.positions[i] + spec.sparse_jitter * Vec3(normal(rng), normal(rng), normal(rng));
        if (spec.drop_beyond > 0.0 && p.norm() > spec.drop_beyond) continue;
        out.dataset.sparse.points.push_back(p);
        out.dataset.sparse.colors.push_back(out.radiance[i]);
    }
    if (out.dataset.sparse.empty()) {
        out.dataset.sparse.points.push_back(out.cloud.positions.front());
        out.dataset.sparse.colors.push_back(out.radiance.front());
    }
    return out;
}

} // namespace rawsplat
