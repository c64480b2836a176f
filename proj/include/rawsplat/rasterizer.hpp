#pragma once

#include "rawsplat/camera.hpp"
#include "rawsplat/color_field.hpp"
#include "rawsplat/parallel.hpp"
#include "rawsplat/scene.hpp"
#include "rawsplat/splat.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace rawsplat {

// ---------------------------------------------------------------------------
// Ray binning (per view)
// ---------------------------------------------------------------------------

/// Depth bins shared by every ray of one view. Edges are uniform in inverse
/// depth between the nearest and farthest primitive.
struct RayBinning {
    double z_near = 0.0;
    double z_far = 0.0;
    std::vector<double> edges; // bins + 1 entries, strictly increasing

    int bins() const { return edges.empty() ? 0 : static_cast<int>(edges.size()) - 1; }
    bool valid() const { return edges.size() >= 3; }

    /// Bin index of depth z. Bins are half-open except the last, which also
    /// holds z == z_far; out-of-range depths clamp to the end bins.
    int bin_of(double z) const {
        const auto it = std::upper_bound(edges.begin(), edges.end(), z);
        const int k = static_cast<int>(it - edges.begin()) - 1;
        return std::clamp(k, 0, bins() - 1);
    }

    double midpoint(int k) const { return 0.5 * (edges[k] + edges[k + 1]); }
};

/// Degenerate intervals widen the far edge by this much.
inline constexpr double kBinningWiden = 1e-3;

inline RayBinning make_ray_binning(std::span<const double> depths, int bins) {
    if (bins < 2) throw InvalidArgumentError("ray binning needs at least 2 bins");
    if (depths.empty()) throw EmptyViewError("no primitive is visible in this view");
    const auto [lo, hi] = std::minmax_element(depths.begin(), depths.end());
    RayBinning b;
    b.z_near = *lo;
    b.z_far = *hi;
    if (!(b.z_far > b.z_near)) b.z_far = b.z_near + kBinningWiden;
    const double inv_near = 1.0 / b.z_near;
    const double inv_far = 1.0 / b.z_far;
    b.edges.resize(bins + 1);
    b.edges.front() = b.z_near;
    b.edges.back() = b.z_far;
    for (int k = 1; k < bins; ++k) {
        const double disparity = inv_near + (inv_far - inv_near) * k / bins;
        b.edges[k] = 1.0 / disparity;
    }
    return b;
}

// ---------------------------------------------------------------------------
// Per-ray compositing
// ---------------------------------------------------------------------------

struct RenderOptions {
    int bins = 64;           // histogram bin count K
    int near_far_count = 3;  // subset size M
    bool histogram = true;
    bool near_far = true;
    bool keep_records = false;
    double alpha_max = 0.99;
    double min_transmittance = 1e-4;
    double cutoff_sigma = kDefaultCutoffSigma;
    int tile_size = 16;
    /// When set, replaces the binning derived from the view.
    std::optional<RayBinning> fixed_binning;
};

/// Per-pixel results of front-to-back compositing.
struct RayResult {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    double transmittance = 0.0; // sum of blend weights
    double near_depth = 0.0;
    double near_transmittance = 0.0;
    double far_depth = 0.0;
    double far_transmittance = 0.0;
    int count = 0;
};

/// Accumulates depth-sorted samples along one ray.
class RayAccumulator {
public:
    RayAccumulator(int near_far_count, double min_transmittance, const RayBinning* binning,
                   double* histogram)
        : m_(std::max(0, near_far_count)), min_t_(min_transmittance), binning_(binning),
          histogram_(histogram), ring_w_(m_, 0.0), ring_z_(m_, 0.0) {}

    double remaining() const { return remaining_; }
    bool done() const { return done_; }

    /// Blends one sample. Returns false once the ray is saturated; the
    /// saturating sample itself is still blended.
    bool add(double alpha, const Vec3& color, double depth) {
        if (done_) return false;
        const double w = alpha * remaining_;
        r_.color += w * color;
        r_.transmittance += w;
        weighted_depth_ += w * depth;
        if (histogram_ && binning_) histogram_[binning_->bin_of(depth)] += w;
        if (r_.count < m_) {
            r_.near_transmittance += w;
            near_weighted_ += w * depth;
        }
        if (m_ > 0) {
            ring_w_[r_.count % m_] = w;
            ring_z_[r_.count % m_] = depth;
        }
        ++r_.count;
        remaining_ *= (1.0 - alpha);
        if (remaining_ < min_t_) done_ = true;
        return !done_;
    }

    RayResult finish() const {
        RayResult r = r_;
        if (r.transmittance > 0.0) r.depth = weighted_depth_ / r.transmittance;
        if (r.near_transmittance > 0.0) r.near_depth = near_weighted_ / r.near_transmittance;
        const int tail = std::min(r.count, m_);
        double fw = 0.0, fz = 0.0;
        for (int k = 0; k < tail; ++k) {
            fw += ring_w_[k];
            fz += ring_w_[k] * ring_z_[k];
        }
        r.far_transmittance = fw;
        if (fw > 0.0) r.far_depth = fz / fw;
        return r;
    }

private:
    int m_;
    double min_t_;
    const RayBinning* binning_;
    double* histogram_;
    std::vector<double> ring_w_, ring_z_;
    RayResult r_;
    double remaining_ = 1.0;
    double weighted_depth_ = 0.0;
    double near_weighted_ = 0.0;
    bool done_ = false;
};

struct RaySample {
    double alpha = 0.0;
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
};

/// Composites samples already sorted front to back. `histogram` must hold
/// binning->bins() entries when a binning is given.
inline RayResult composite_ray(std::span<const RaySample> samples, int near_far_count = 3,
                               double min_transmittance = 1e-4,
                               const RayBinning* binning = nullptr,
                               std::vector<double>* histogram = nullptr) {
    double* hist = nullptr;
    if (binning && histogram) {
        histogram->assign(binning->bins(), 0.0);
        hist = histogram->data();
    }
    RayAccumulator acc(near_far_count, min_transmittance, binning, hist);
    for (const auto& s : samples) {
        if (!acc.add(s.alpha, s.color, s.depth)) break;
    }
    return acc.finish();
}

// ---------------------------------------------------------------------------
// Image rendering
// ---------------------------------------------------------------------------

/// One blended primitive at one pixel, kept for the backward pass.
struct BlendRecord {
    std::uint32_t slot = 0;       // position in the tile's splat list
    bool clamped = false;         // alpha hit alpha_max
    double gaussian = 0.0;        // G^2D at the pixel
    double alpha = 0.0;
    double transmittance = 1.0;   // product of (1 - alpha) in front of this sample
};

struct RenderOutput {
    int width = 0;
    int height = 0;
    Image color;                // linear radiance, 3 channels
    Image depth;                // weighted average camera depth (0 where empty)
    Image transmittance;        // sum of blend weights
    Image near_depth, near_transmittance, far_depth, far_transmittance;
    std::vector<double> histogram; // width * height * bins
    RayBinning binning;
    int near_far_count = 0;

    double hist(int x, int y, int k) const {
        return histogram[(static_cast<std::size_t>(y) * width + x) * binning.bins() + k];
    }

    // State retained for render_backward.
    std::vector<ProjectedSplat> splats;  // visible primitives, primitive index order
    std::vector<Vec3> colors;            // per visible splat
    std::vector<Vec3> directions;        // per visible splat
    std::vector<double> opacities;       // per visible splat
    std::vector<std::vector<std::uint32_t>> tile_lists; // sorted splat ids per tile
    std::vector<std::vector<BlendRecord>> tile_records;
    std::vector<std::uint32_t> pixel_begin, pixel_count;
    int tiles_x = 0;
    int tile_size = 16;
    bool has_records = false;
    std::uint64_t fingerprint = 0;
    RenderOptions options;

    std::size_t visible_count() const { return splats.size(); }
};

namespace detail {

inline void project_all(const GaussianCloud& cloud, const CameraView& cam, double cutoff_sigma,
                        std::vector<ProjectedSplat>& out) {
    const std::size_t n = cloud.size();
    std::vector<std::optional<ProjectedSplat>> tmp(n);
    constexpr std::size_t chunk = 256;
    parallel_for((n + chunk - 1) / chunk, [&](std::size_t c) {
        const std::size_t end = std::min(n, (c + 1) * chunk);
        for (std::size_t i = c * chunk; i < end; ++i) tmp[i] = project_primitive(cloud, i, cam, cutoff_sigma);
    });
    out.clear();
    for (auto& t : tmp) {
        if (t) out.push_back(std::move(*t));
    }
}

} // namespace detail

/// Depth bins for a view from the camera depths of its visible primitives.
inline RayBinning make_ray_binning(const GaussianCloud& cloud, const CameraView& cam, int bins,
                                   double cutoff_sigma = kDefaultCutoffSigma) {
    if (bins < 2) throw InvalidArgumentError("ray binning needs at least 2 bins");
    std::vector<ProjectedSplat> splats;
    detail::project_all(cloud, cam, cutoff_sigma, splats);
    std::vector<double> depths;
    depths.reserve(splats.size());
    for (const auto& s : splats) depths.push_back(s.splat.depth);
    return make_ray_binning(depths, bins);
}

/// Tile-based front-to-back splatting of every map.
inline RenderOutput render(const GaussianCloud& cloud, const ColorField& field, const CameraView& cam,
                           const RenderOptions& opts = {}) {
    cam.validate();
    if (field.feature_dim() != cloud.feature_dim) {
        throw InvalidArgumentError("color field and cloud feature dimensions differ");
    }
    if (opts.histogram && opts.bins < 2 && !opts.fixed_binning) {
        throw InvalidArgumentError("histogram rendering needs at least 2 bins");
    }
    if (opts.near_far && opts.near_far_count < 1) {
        throw InvalidArgumentError("near/far rendering needs a subset size of at least 1");
    }

    RenderOutput out;
    out.width = cam.width;
    out.height = cam.height;
    out.options = opts;
    out.tile_size = opts.tile_size;
    out.near_far_count = opts.near_far ? opts.near_far_count : 0;
    out.color = Image(cam.width, cam.height, 3);
    out.depth = Image(cam.width, cam.height, 1);
    out.transmittance = Image(cam.width, cam.height, 1);
    if (opts.near_far) {
        out.near_depth = Image(cam.width, cam.height, 1);
        out.near_transmittance = Image(cam.width, cam.height, 1);
        out.far_depth = Image(cam.width, cam.height, 1);
        out.far_transmittance = Image(cam.width, cam.height, 1);
    }

    detail::project_all(cloud, cam, opts.cutoff_sigma, out.splats);
    const std::size_t n = out.splats.size();

    if (opts.histogram) {
        if (opts.fixed_binning) {
            out.binning = *opts.fixed_binning;
        } else if (n > 0) {
            std::vector<double> depths(n);
            for (std::size_t i = 0; i < n; ++i) depths[i] = out.splats[i].splat.depth;
            out.binning = make_ray_binning(depths, opts.bins);
        }
        if (out.binning.valid()) out.histogram.assign(out.color.pixel_count() * out.binning.bins(), 0.0);
    }

    const Vec3 origin = cam.origin();
    out.colors.resize(n);
    out.directions.resize(n);
    out.opacities.resize(n);
    constexpr std::size_t chunk = 128;
    parallel_for((n + chunk - 1) / chunk, [&](std::size_t c) {
        const std::size_t end = std::min(n, (c + 1) * chunk);
        for (std::size_t s = c * chunk; s < end; ++s) {
            const std::size_t i = out.splats[s].splat.primitive_index;
            out.directions[s] = view_direction(origin, cloud.positions[i]);
            out.colors[s] = field.evaluate(cloud.feature(i), out.directions[s], cloud.color_biases[i]);
            out.opacities[s] = cloud.opacity(i);
        }
    });

    // Front-to-back order, ties broken by primitive index.
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double da = out.splats[a].splat.depth, db = out.splats[b].splat.depth;
        if (da != db) return da < db;
        return out.splats[a].splat.primitive_index < out.splats[b].splat.primitive_index;
    });

    const int ts = opts.tile_size;
    out.tiles_x = (cam.width + ts - 1) / ts;
    const int tiles_y = (cam.height + ts - 1) / ts;
    const std::size_t tile_count = static_cast<std::size_t>(out.tiles_x) * tiles_y;
    out.tile_lists.assign(tile_count, {});
    for (std::uint32_t s : order) {
        const auto& ps = out.splats[s];
        for (int ty = ps.y_min / ts; ty <= ps.y_max / ts; ++ty) {
            for (int tx = ps.x_min / ts; tx <= ps.x_max / ts; ++tx) {
                out.tile_lists[static_cast<std::size_t>(ty) * out.tiles_x + tx].push_back(s);
            }
        }
    }

    if (opts.keep_records) {
        out.tile_records.assign(tile_count, {});
        out.pixel_begin.assign(out.color.pixel_count(), 0);
        out.pixel_count.assign(out.color.pixel_count(), 0);
    }

    const double cutoff2 = opts.cutoff_sigma * opts.cutoff_sigma;
    const RayBinning* binning = out.binning.valid() ? &out.binning : nullptr;
    const int bins = out.binning.bins();

    parallel_for(tile_count, [&](std::size_t t) {
        const int tx = static_cast<int>(t % out.tiles_x);
        const int ty = static_cast<int>(t / out.tiles_x);
        const auto& list = out.tile_lists[t];
        auto* records = opts.keep_records ? &out.tile_records[t] : nullptr;
        // Compact copy of what the pixel loop reads, in list order.
        struct TileSplat {
            Vec2 mean;
            Mat2 conic;
            Vec3 color;
            double opacity, depth;
            int x_min, x_max, y_min, y_max;
        };
        std::vector<TileSplat> local;
        local.reserve(list.size());
        for (std::uint32_t s : list) {
            const auto& ps = out.splats[s];
            local.push_back({ps.splat.mean2d, ps.conic, out.colors[s], out.opacities[s], ps.splat.depth, ps.x_min,
                             ps.x_max, ps.y_min, ps.y_max});
        }
        const int y0 = ty * ts, y1 = std::min(cam.height, (ty + 1) * ts);
        std::vector<std::vector<std::uint32_t>> rows(y1 - y0);
        for (std::uint32_t slot = 0; slot < local.size(); ++slot) {
            for (int y = std::max(y0, local[slot].y_min); y <= std::min(y1 - 1, local[slot].y_max); ++y) {
                rows[y - y0].push_back(slot);
            }
        }
        for (int y = y0; y < y1; ++y) {
            const auto& row = rows[y - y0];
            for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
                const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
                double* hist = binning ? out.histogram.data() + pix * bins : nullptr;
                RayAccumulator acc(out.near_far_count, opts.min_transmittance, binning, hist);
                const Vec2 p(x + 0.5, y + 0.5);
                if (records) out.pixel_begin[pix] = static_cast<std::uint32_t>(records->size());
                for (std::uint32_t slot : row) {
                    const TileSplat& ps = local[slot];
                    if (x < ps.x_min || x > ps.x_max) continue;
                    const double m2 = splat_mahalanobis2(ps.mean, ps.conic, p);
                    if (m2 > cutoff2) continue;
                    const double g = std::exp(-0.5 * m2);
                    double alpha = ps.opacity * g;
                    const bool clamped = alpha > opts.alpha_max;
                    if (clamped) alpha = opts.alpha_max;
                    if (records) records->push_back({slot, clamped, g, alpha, acc.remaining()});
                    if (!acc.add(alpha, ps.color, ps.depth)) break;
                }
                if (records) {
                    out.pixel_count[pix] = static_cast<std::uint32_t>(records->size()) - out.pixel_begin[pix];
                }
                const RayResult r = acc.finish();
                for (int c = 0; c < 3; ++c) out.color.data[pix * 3 + c] = r.color[c];
                out.depth.data[pix] = r.depth;
                out.transmittance.data[pix] = r.transmittance;
                if (opts.near_far) {
                    out.near_depth.data[pix] = r.near_depth;
                    out.near_transmittance.data[pix] = r.near_transmittance;
                    out.far_depth.data[pix] = r.far_depth;
                    out.far_transmittance.data[pix] = r.far_transmittance;
                }
            }
        }
    });

    out.has_records = opts.keep_records;
    out.fingerprint = cloud_fingerprint(cloud);
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Loss gradients with respect to each rendered map. Empty vectors mean zero.
struct MapGradients {
    std::vector<double> color;         // pixels * 3
    std::vector<double> depth;         // pixels
    std::vector<double> transmittance; // pixels
    std::vector<double> histogram;     // pixels * bins
    std::vector<double> near_depth, near_transmittance, far_depth, far_transmittance;

    static MapGradients zeros_like(const RenderOutput& out) {
        MapGradients g;
        const std::size_t px = out.color.pixel_count();
        g.color.assign(px * 3, 0.0);
        g.depth.assign(px, 0.0);
        g.transmittance.assign(px, 0.0);
        if (!out.histogram.empty()) g.histogram.assign(out.histogram.size(), 0.0);
        if (out.near_far_count > 0) {
            g.near_depth.assign(px, 0.0);
            g.near_transmittance.assign(px, 0.0);
            g.far_depth.assign(px, 0.0);
            g.far_transmittance.assign(px, 0.0);
        }
        return g;
    }
};

/// Gradients for every learnable parameter of a cloud and its color field.
struct GradientBundle {
    std::vector<Vec3> positions;
    std::vector<Vec3> log_scales;
    std::vector<Vec4> rotations;
    std::vector<double> opacity_logits;
    std::vector<double> features;
    std::vector<Vec3> color_biases;
    std::vector<double> color_params;
    /// Screen-space gradient of each primitive's projected mean (pixels).
    std::vector<Vec2> mean2d;
    std::vector<bool> visible;

    void reset(const GaussianCloud& cloud, const ColorField& field) {
        const std::size_t n = cloud.size();
        positions.assign(n, Vec3::Zero());
        log_scales.assign(n, Vec3::Zero());
        rotations.assign(n, Vec4::Zero());
        opacity_logits.assign(n, 0.0);
        features.assign(n * cloud.feature_dim, 0.0);
        color_biases.assign(n, Vec3::Zero());
        color_params.assign(field.parameter_count(), 0.0);
        mean2d.assign(n, Vec2::Zero());
        visible.assign(n, false);
    }

    double max_abs() const {
        double m = 0.0;
        auto upd = [&m](double v) { m = std::max(m, std::abs(v)); };
        for (const auto& v : positions) upd(v.cwiseAbs().maxCoeff());
        for (const auto& v : log_scales) upd(v.cwiseAbs().maxCoeff());
        for (const auto& v : rotations) upd(v.cwiseAbs().maxCoeff());
        for (double v : opacity_logits) upd(v);
        for (double v : features) upd(v);
        for (const auto& v : color_biases) upd(v.cwiseAbs().maxCoeff());
        for (double v : color_params) upd(v);
        return m;
    }
};

namespace detail {

struct SplatAccum {
    Vec2 mean = Vec2::Zero();
    double conic00 = 0.0, conic01 = 0.0, conic11 = 0.0;
    double opacity = 0.0; // d/d(activated opacity)
    Vec3 color = Vec3::Zero();
    double depth = 0.0;

    SplatAccum& operator+=(const SplatAccum& o) {
        mean += o.mean;
        conic00 += o.conic00;
        conic01 += o.conic01;
        conic11 += o.conic11;
        opacity += o.opacity;
        color += o.color;
        depth += o.depth;
        return *this;
    }
};

inline double grad_at(const std::vector<double>& v, std::size_t i) { return v.empty() ? 0.0 : v[i]; }

} // namespace detail

/// Reverse-mode pass through compositing, projection and the color field.
/// Bin membership and bin edges are treated as constants.
inline GradientBundle render_backward(const GaussianCloud& cloud, const ColorField& field,
                                      const CameraView& cam, const RenderOutput& out,
                                      const MapGradients& up) {
    if (!out.has_records) {
        throw ContractViolationError("render_backward needs a forward pass with keep_records");
    }
    if (out.fingerprint != cloud_fingerprint(cloud) || out.width != cam.width ||
        out.height != cam.height) {
        throw ContractViolationError("blend records are stale for this cloud or camera");
    }

    GradientBundle grad;
    grad.reset(cloud, field);

    const int ts = out.tile_size;
    const std::size_t tile_count = out.tile_lists.size();
    const int bins = out.binning.bins();
    const int m = out.near_far_count;
    std::vector<std::vector<detail::SplatAccum>> tile_acc(tile_count);

    parallel_for(tile_count, [&](std::size_t t) {
        const auto& list = out.tile_lists[t];
        const auto& records = out.tile_records[t];
        auto& acc = tile_acc[t];
        acc.assign(list.size(), {});
        const int tx = static_cast<int>(t % out.tiles_x);
        const int ty = static_cast<int>(t / out.tiles_x);
        std::vector<double> g;
        for (int y = ty * ts; y < std::min(out.height, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(out.width, (tx + 1) * ts); ++x) {
                const std::size_t pix = static_cast<std::size_t>(y) * out.width + x;
                const std::uint32_t begin = out.pixel_begin[pix];
                const int count = static_cast<int>(out.pixel_count[pix]);
                if (count == 0) continue;

                const Vec3 up_c = up.color.empty()
                                      ? Vec3(Vec3::Zero())
                                      : Vec3(up.color[pix * 3], up.color[pix * 3 + 1], up.color[pix * 3 + 2]);
                const double up_t = detail::grad_at(up.transmittance, pix);
                const double up_d = detail::grad_at(up.depth, pix);
                const double up_nd = m > 0 ? detail::grad_at(up.near_depth, pix) : 0.0;
                const double up_nt = m > 0 ? detail::grad_at(up.near_transmittance, pix) : 0.0;
                const double up_fd = m > 0 ? detail::grad_at(up.far_depth, pix) : 0.0;
                const double up_ft = m > 0 ? detail::grad_at(up.far_transmittance, pix) : 0.0;
                const double* up_h =
                    (!up.histogram.empty() && bins > 0) ? up.histogram.data() + pix * bins : nullptr;

                const double total = out.transmittance.data[pix];
                const double d = out.depth.data[pix];
                const double tn = m > 0 ? out.near_transmittance.data[pix] : 0.0;
                const double dn = m > 0 ? out.near_depth.data[pix] : 0.0;
                const double tf = m > 0 ? out.far_transmittance.data[pix] : 0.0;
                const double df = m > 0 ? out.far_depth.data[pix] : 0.0;

                // dL/d(weight) per record, plus the direct depth and color terms.
                g.assign(count, 0.0);
                for (int r = 0; r < count; ++r) {
                    const BlendRecord& rec = records[begin + r];
                    const std::uint32_t s = list[rec.slot];
                    const double z = out.splats[s].splat.depth;
                    const double w = rec.alpha * rec.transmittance;
                    auto& a = acc[rec.slot];
                    double gw = up_c.dot(out.colors[s]) + up_t;
                    a.color += up_c * w;
                    if (total > 0.0) {
                        gw += up_d * (z - d) / total;
                        a.depth += up_d * w / total;
                    }
                    if (up_h) gw += up_h[out.binning.bin_of(z)];
                    if (r < m && tn > 0.0) {
                        gw += up_nt + up_nd * (z - dn) / tn;
                        a.depth += up_nd * w / tn;
                    } else if (r < m) {
                        gw += up_nt;
                    }
                    if (r >= count - m && tf > 0.0) {
                        gw += up_ft + up_fd * (z - df) / tf;
                        a.depth += up_fd * w / tf;
                    } else if (r >= count - m) {
                        gw += up_ft;
                    }
                    g[r] = gw;
                }

                // dL/d(alpha_k) = T_k (g_k - S_k), S accumulated back to front.
                double suffix = 0.0;
                const Vec2 p(x + 0.5, y + 0.5);
                for (int r = count - 1; r >= 0; --r) {
                    const BlendRecord& rec = records[begin + r];
                    const double d_alpha = rec.transmittance * (g[r] - suffix);
                    suffix = g[r] * rec.alpha + (1.0 - rec.alpha) * suffix;
                    if (rec.clamped) continue;
                    const std::uint32_t s = list[rec.slot];
                    auto& a = acc[rec.slot];
                    const double o = out.opacities[s];
                    a.opacity += d_alpha * rec.gaussian;
                    const double d_g = d_alpha * o;
                    const auto& ps = out.splats[s];
                    const Vec2 delta = p - ps.splat.mean2d;
                    // G = exp(-0.5 delta^T A delta)
                    a.mean += d_g * rec.gaussian * (ps.conic * delta);
                    a.conic00 += -0.5 * d_g * rec.gaussian * delta.x() * delta.x();
                    a.conic01 += -0.5 * d_g * rec.gaussian * delta.x() * delta.y();
                    a.conic11 += -0.5 * d_g * rec.gaussian * delta.y() * delta.y();
                }
            }
        }
    });

    // Merge tile buffers in a fixed order.
    const std::size_t n = out.splats.size();
    std::vector<detail::SplatAccum> splat_acc(n);
    for (std::size_t t = 0; t < tile_count; ++t) {
        const auto& list = out.tile_lists[t];
        for (std::size_t slot = 0; slot < list.size(); ++slot) splat_acc[list[slot]] += tile_acc[t][slot];
    }

    const Vec3 origin = cam.origin();
    constexpr std::size_t chunk = 64;
    const std::size_t chunks = (n + chunk - 1) / chunk;
    std::vector<std::vector<double>> chunk_params(chunks);
    parallel_for(chunks, [&](std::size_t c) {
        auto& d_params = chunk_params[c];
        d_params.assign(field.parameter_count(), 0.0);
        const std::size_t end = std::min(n, (c + 1) * chunk);
        for (std::size_t s = c * chunk; s < end; ++s) {
            const auto& ps = out.splats[s];
            const auto& a = splat_acc[s];
            const std::size_t i = ps.splat.primitive_index;
            const double o = out.opacities[s];
            grad.visible[i] = true;
            grad.opacity_logits[i] = a.opacity * o * (1.0 - o);
            Mat2 d_conic;
            d_conic << a.conic00, a.conic01, a.conic01, a.conic11;
            const GeometryGradient geo =
                backprop_projection(ps, cam, cloud.rotations[i], a.mean, d_conic, a.depth);
            grad.positions[i] = geo.position;
            grad.log_scales[i] = geo.log_scale;
            grad.rotations[i] = geo.rotation;
            grad.mean2d[i] = a.mean;

            std::span<double> d_feature(grad.features.data() + i * cloud.feature_dim,
                                        static_cast<std::size_t>(cloud.feature_dim));
            Vec3 d_bias;
            const Vec3 d_dir = field.backward(cloud.feature(i), out.directions[s], cloud.color_biases[i],
                                              a.color, d_params, d_feature, d_bias);
            grad.color_biases[i] = d_bias;
            grad.positions[i] += view_direction_backward(origin, cloud.positions[i], d_dir);
        }
    });
    for (const auto& cp : chunk_params) {
        for (std::size_t k = 0; k < cp.size(); ++k) grad.color_params[k] += cp[k];
    }
    return grad;
}

} // namespace rawsplat
