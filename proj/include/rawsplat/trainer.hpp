#pragma once

#include "rawsplat/config.hpp"
#include "rawsplat/csi.hpp"
#include "rawsplat/dataset.hpp"
#include "rawsplat/losses.hpp"
#include "rawsplat/optimizer.hpp"
#include "rawsplat/rasterizer.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <thread>

namespace rawsplat {

// ---------------------------------------------------------------------------
// Objective for one view
// ---------------------------------------------------------------------------

struct ObjectiveOptions {
    /// Denominator source for the image term; defaults to the live mapped render.
    const Image* weight_source = nullptr;
    std::optional<RayBinning> fixed_binning;
    double alpha_max = 0.99;
    double cutoff_sigma = kDefaultCutoffSigma;
};

struct Objective {
    LossParts parts;
    double total = 0.0;
    GradientBundle grad;
    Vec3 d_log_beta = Vec3::Zero();
    RenderOutput render;
    Image mapped; // exposure-mapped prediction
};

inline LossWeights loss_weights(const TrainConfig& cfg) {
    return {cfg.lambda_t, cfg.lambda_dist, cfg.lambda_nf};
}

/// Total loss of one view and its gradient with respect to every learnable
/// parameter, including the view's exposure entry.
inline Objective evaluate_objective(const GaussianCloud& cloud, const ColorField& field,
                                    const ExposureTable& exposure, const CameraView& cam, const Image& frame,
                                    const TrainConfig& cfg, const ObjectiveOptions& opt = {}) {
    RenderOptions ro;
    ro.bins = cfg.bins;
    ro.near_far_count = cfg.near_far_count;
    ro.keep_records = true;
    ro.alpha_max = opt.alpha_max;
    ro.cutoff_sigma = opt.cutoff_sigma;
    ro.fixed_binning = opt.fixed_binning;

    Objective obj;
    obj.render = render(cloud, field, cam, ro);
    const RenderOutput& r = obj.render;

    const double t = cam.shutter_scale;
    const std::size_t e = exposure.index_of(t);
    const Vec3 beta = exposure.log_beta(e).array().exp();
    obj.mapped = exposure_scale(r.color, t, beta);

    const LossTerm image = weighted_l2(obj.mapped, frame, opt.weight_source ? *opt.weight_source : obj.mapped,
                                       cfg.epsilon);
    const LossTerm rt = transmittance_reg(r.transmittance, cfg.epsilon);
    LossTerm dist;
    if (!r.histogram.empty()) dist = depth_distortion(r.histogram, r.binning);
    const NearFarTerm nf = near_far_reg(r.near_depth, r.near_transmittance, r.far_depth, r.far_transmittance);

    obj.parts = {image.value, rt.value, dist.value, nf.value};
    const LossWeights w = loss_weights(cfg);
    obj.total = total_loss(obj.parts, w);

    MapGradients up;
    up.color = exposure_scale_backward(r.color, t, beta, image.grad, obj.d_log_beta);
    if (exposure.is_frozen(e)) obj.d_log_beta.setZero();
    auto scaled = [](const std::vector<double>& g, double s) {
        std::vector<double> out(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) out[i] = s * g[i];
        return out;
    };
    up.transmittance = scaled(rt.grad, w.transmittance);
    if (!dist.grad.empty()) up.histogram = scaled(dist.grad, w.distortion);
    up.near_depth = scaled(nf.near_depth, w.near_far);
    up.near_transmittance = scaled(nf.near_transmittance, w.near_far);
    up.far_depth = scaled(nf.far_depth, w.near_far);
    up.far_transmittance = scaled(nf.far_transmittance, w.near_far);
    obj.grad = render_backward(cloud, field, cam, r, up);
    return obj;
}

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

struct IterationRecord {
    long iteration = 0;
    std::size_t view = 0;
    LossParts parts;
    double total = 0.0;
    std::size_t primitives = 0;
};

inline std::string loss_log_header() { return "iteration,view,total,image,transmittance,distortion,near_far,primitives"; }

inline std::string to_csv(const IterationRecord& r) {
    using detail::format_double;
    return std::to_string(r.iteration) + "," + std::to_string(r.view) + "," + format_double(r.total) + "," +
           format_double(r.parts.image) + "," + format_double(r.parts.transmittance) + "," +
           format_double(r.parts.distortion) + "," + format_double(r.parts.near_far) + "," +
           std::to_string(r.primitives);
}

/// Writes CSV lines on its own thread. push() never blocks: when the queue is
/// full the record is dropped and counted.
class LossLogger {
public:
    explicit LossLogger(const std::string& path, std::size_t capacity = 4096)
        : out_(path), capacity_(capacity) {
        if (!out_) throw FormatError("cannot open loss log '" + path + "'");
        out_ << loss_log_header() << '\n';
        worker_ = std::thread([this] { drain(); });
    }
    LossLogger(const LossLogger&) = delete;
    LossLogger& operator=(const LossLogger&) = delete;
    ~LossLogger() { close(); }

    bool push(const IterationRecord& r) {
        {
            std::lock_guard lock(mu_);
            if (closed_ || queue_.size() >= capacity_) {
                ++dropped_;
                return false;
            }
            queue_.push_back(r);
        }
        cv_.notify_one();
        return true;
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            if (closed_) return;
            closed_ = true;
        }
        cv_.notify_one();
        if (worker_.joinable()) worker_.join();
        out_.flush();
    }

    std::size_t dropped() const {
        std::lock_guard lock(mu_);
        return dropped_;
    }

private:
    void drain() {
        std::unique_lock lock(mu_);
        for (;;) {
            cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
            while (!queue_.empty()) {
                const IterationRecord r = queue_.front();
                queue_.pop_front();
                lock.unlock();
                out_ << to_csv(r) << '\n';
                lock.lock();
            }
            if (closed_) return;
        }
    }

    std::ofstream out_;
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<IterationRecord> queue_;
    std::size_t dropped_ = 0;
    bool closed_ = false;
    std::thread worker_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Everything needed to render a trained scene.
struct TrainedScene {
    GaussianCloud cloud;
    ColorField field;
    ExposureTable exposure;
    std::vector<CameraView> cameras;
};

/// Radius of the camera centers around their mean, padded by 10%.
inline double scene_extent(std::span<const CameraView> cameras) {
    if (cameras.empty()) return 1.0;
    Vec3 c = Vec3::Zero();
    for (const auto& cam : cameras) c += cam.origin();
    c /= static_cast<double>(cameras.size());
    double r = 0.0;
    for (const auto& cam : cameras) r = std::max(r, (cam.origin() - c).norm());
    return r > 0.0 ? 1.1 * r : 1.0;
}

/// Primitives for a dataset: sparse points plus cone scatter, color biases
/// from the frames, and a fresh color field.
inline TrainedScene initialize_scene(const DatasetBundle& data, const TrainConfig& cfg) {
    data.validate();
    if (data.sparse.empty()) throw InvalidArgumentError("dataset has no sparse points");
    const auto cameras = data.train_cameras();
    SparsePointSet points = data.sparse;
    if (cfg.scatter_count > 0) {
        const Frustum f = build_frustum(cameras, data.sparse, cfg.lambda_frustum);
        points.append(scatter_points(f, static_cast<std::size_t>(cfg.scatter_count), cfg.seed));
    }
    std::vector<FrameRef> frames;
    for (const auto& v : data.train) frames.push_back({&v.camera, &v.frame});
    const auto biases = init_color_bias(points, frames);

    TrainedScene s;
    if (cfg.color_model == ColorModel::mlp) {
        s.cloud = init_gaussians(points, biases, cfg.feature_dim, cfg.feature_sigma, cfg.seed + 1);
        s.field = ColorField::make_mlp(cfg.feature_dim, cfg.seed + 2);
    } else {
        s.cloud = init_gaussians_sh(points, biases);
        s.field = ColorField::make_sh();
    }
    const auto shutters = data.shutter_scales();
    s.exposure = ExposureTable(shutters, *std::max_element(shutters.begin(), shutters.end()));
    s.cameras = cameras;
    return s;
}

class Trainer {
public:
    Trainer(const DatasetBundle& data, TrainConfig cfg)
        : data_(data), cfg_(std::move(cfg)), rng_(cfg_.seed + 3) {
        cfg_.validate();
        scene_ = initialize_scene(data_, cfg_);
        extent_ = scene_extent(scene_.cameras);
        const std::size_t n = scene_.cloud.size();
        const std::size_t d = scene_.cloud.feature_dim;
        adam_position_ = AdamGroup(3 * n);
        adam_scale_ = AdamGroup(3 * n);
        adam_rotation_ = AdamGroup(4 * n);
        adam_opacity_ = AdamGroup(n);
        adam_feature_ = AdamGroup(d * n);
        adam_bias_ = AdamGroup(3 * n);
        adam_mlp_ = AdamGroup(scene_.field.parameter_count());
        adam_exposure_ = AdamGroup(3 * scene_.exposure.size());
        grad_accum_.assign(n, 0.0);
        grad_count_.assign(n, 0);
    }

    const TrainConfig& config() const { return cfg_; }
    const TrainedScene& scene() const { return scene_; }
    long iteration() const { return iteration_; }
    bool finished() const { return iteration_ >= cfg_.iterations; }
    double extent() const { return extent_; }

    double feature_lr() const { return cosine_lr(cfg_.lr_feature, cfg_.lr_final, iteration_, cfg_.iterations); }
    double mlp_lr() const { return cosine_lr(cfg_.lr_mlp, cfg_.lr_final, iteration_, cfg_.iterations); }
    double bias_lr() const { return cosine_lr(cfg_.lr_bias, cfg_.lr_final, iteration_, cfg_.iterations); }
    double position_lr() const {
        return extent_ * exponential_lr(cfg_.lr_position, cfg_.lr_position_final, iteration_, cfg_.iterations);
    }

    /// One optimization step on the next view of a shuffled epoch.
    IterationRecord step() {
        if (order_pos_ >= order_.size()) {
            order_.resize(data_.train.size());
            std::iota(order_.begin(), order_.end(), std::size_t{0});
            std::shuffle(order_.begin(), order_.end(), rng_);
            order_pos_ = 0;
        }
        const std::size_t v = order_[order_pos_++];
        const TrainingView& view = data_.train[v];

        Objective obj;
        try {
            obj = evaluate_objective(scene_.cloud, scene_.field, scene_.exposure, view.camera, view.frame, cfg_);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(iteration_), e.term(),
                                  iteration_);
        } catch (const EmptyViewError& e) {
            throw EmptyViewError(std::string(e.what()) + " at iteration " + std::to_string(iteration_));
        }

        apply_gradients(obj, view.camera);
        ++iteration_;
        maybe_densify();

        IterationRecord rec;
        rec.iteration = iteration_;
        rec.view = v;
        rec.parts = obj.parts;
        rec.total = obj.total;
        rec.primitives = scene_.cloud.size();
        return rec;
    }

    /// Runs to the configured iteration count.
    void run(const std::function<void(const IterationRecord&)>& on_iteration = {}) {
        while (!finished()) {
            const IterationRecord r = step();
            if (on_iteration) on_iteration(r);
        }
    }

    /// Clone/split by accumulated screen gradient, then prune transparent
    /// primitives. Public so tests can drive it directly.
    void densify_and_prune() {
        auto& cloud = scene_.cloud;
        const std::size_t n = cloud.size();
        const std::size_t d = cloud.feature_dim;
        std::vector<std::size_t> clone, split;
        if (static_cast<long>(n) < cfg_.max_primitives) {
            for (std::size_t i = 0; i < n; ++i) {
                if (grad_count_[i] == 0) continue;
                const double g = grad_accum_[i] / grad_count_[i];
                if (g < cfg_.densify_grad_threshold) continue;
                const double size = cloud.scale(i).maxCoeff();
                (size <= cfg_.percent_dense * extent_ ? clone : split).push_back(i);
            }
            const std::size_t room = static_cast<std::size_t>(cfg_.max_primitives) - n;
            if (clone.size() > room) clone.resize(room);
            if (clone.size() + 2 * split.size() > room) split.resize((room - clone.size()) / 2);
        }

        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i : clone) append_copy(i);
        for (std::size_t i : split) {
            const Vec3 s = cloud.scale(i);
            const Mat3 rot = rotation_from_quaternion(cloud.rotations[i]);
            for (int k = 0; k < 2; ++k) {
                const Vec3 offset(s.x() * normal(rng_), s.y() * normal(rng_), s.z() * normal(rng_));
                const std::size_t j = append_copy(i);
                cloud.positions[j] = cloud.positions[i] + rot * offset;
                cloud.log_scales[j] = cloud.log_scales[i].array() - std::log(1.6);
            }
        }

        std::vector<bool> keep(cloud.size(), true);
        for (std::size_t i : split) keep[i] = false;
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            if (cloud.opacity(i) < cfg_.prune_opacity) keep[i] = false;
        }
        cloud.keep(keep);
        adam_position_.keep(keep, 3);
        adam_scale_.keep(keep, 3);
        adam_rotation_.keep(keep, 4);
        adam_opacity_.keep(keep, 1);
        adam_feature_.keep(keep, d);
        adam_bias_.keep(keep, 3);
        grad_accum_.assign(cloud.size(), 0.0);
        grad_count_.assign(cloud.size(), 0);
        if (cloud.empty()) throw EmptyViewError("every primitive was pruned at iteration " + std::to_string(iteration_));
    }

private:
    /// Appends an exact copy of primitive i, including its color state.
    std::size_t append_copy(std::size_t i) {
        auto& cloud = scene_.cloud;
        cloud.push_back(cloud.primitive(i));
        const std::size_t d = cloud.feature_dim;
        adam_position_.grow(1, 3);
        adam_scale_.grow(1, 3);
        adam_rotation_.grow(1, 4);
        adam_opacity_.grow(1, 1);
        adam_feature_.grow(1, d);
        adam_bias_.grow(1, 3);
        grad_accum_.push_back(0.0);
        grad_count_.push_back(0);
        return cloud.size() - 1;
    }

    void apply_gradients(const Objective& obj, const CameraView& cam) {
        auto& cloud = scene_.cloud;
        const GradientBundle& g = obj.grad;
        const std::size_t n = cloud.size();
        auto flat = [](auto& vec, std::size_t stride) {
            return std::span<double>(vec.empty() ? nullptr : vec.data()->data(), vec.size() * stride);
        };
        auto cflat = [](const auto& vec, std::size_t stride) {
            return std::span<const double>(vec.empty() ? nullptr : vec.data()->data(), vec.size() * stride);
        };
        adam_position_.step(flat(cloud.positions, 3), cflat(g.positions, 3), position_lr());
        adam_scale_.step(flat(cloud.log_scales, 3), cflat(g.log_scales, 3), cfg_.lr_scale);
        adam_rotation_.step(flat(cloud.rotations, 4), cflat(g.rotations, 4), cfg_.lr_rotation);
        adam_opacity_.step(cloud.opacity_logits, g.opacity_logits, cfg_.lr_opacity);
        adam_feature_.step(cloud.features, g.features, feature_lr());
        adam_bias_.step(flat(cloud.color_biases, 3), cflat(g.color_biases, 3), bias_lr());
        if (scene_.field.parameter_count() > 0) {
            adam_mlp_.step(scene_.field.mlp.params(), g.color_params, mlp_lr());
        }

        std::vector<Vec3> d_exposure(scene_.exposure.size(), Vec3::Zero());
        const std::size_t e = scene_.exposure.index_of(cam.shutter_scale);
        if (!scene_.exposure.is_frozen(e)) d_exposure[e] = obj.d_log_beta;
        adam_exposure_.step(flat(scene_.exposure.log_betas(), 3), cflat(d_exposure, 3), cfg_.lr_exposure);
        scene_.exposure.log_beta(scene_.exposure.reference_index()).setZero();

        // Screen gradient in NDC units for the densification statistic.
        const double sx = 0.5 * cam.width, sy = 0.5 * cam.height;
        for (std::size_t i = 0; i < n; ++i) {
            if (!g.visible[i]) continue;
            grad_accum_[i] += Vec2(g.mean2d[i].x() * sx, g.mean2d[i].y() * sy).norm();
            ++grad_count_[i];
        }
    }

    void maybe_densify() {
        const long until = static_cast<long>(cfg_.densify_until_fraction * cfg_.iterations);
        if (iteration_ < cfg_.densify_from || iteration_ > until) return;
        if (iteration_ % cfg_.densify_interval != 0) return;
        densify_and_prune();
    }

    const DatasetBundle& data_;
    TrainConfig cfg_;
    std::mt19937_64 rng_;
    TrainedScene scene_;
    double extent_ = 1.0;
    long iteration_ = 0;
    std::vector<std::size_t> order_;
    std::size_t order_pos_ = 0;
    AdamGroup adam_position_, adam_scale_, adam_rotation_, adam_opacity_, adam_feature_, adam_bias_, adam_mlp_,
        adam_exposure_;
    std::vector<double> grad_accum_;
    std::vector<long> grad_count_;
};

/// Convenience wrapper: initialize, run every iteration, return the scene.
inline TrainedScene train(const DatasetBundle& data, const TrainConfig& cfg,
                          const std::function<void(const IterationRecord&)>& on_iteration = {}) {
    Trainer t(data, cfg);
    t.run(on_iteration);
    return t.scene();
}

} // namespace rawsplat
