#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace rawsplat;
using namespace rawsplat::testing;

namespace {

const SyntheticScene& small_scene() {
    static const SyntheticScene scene = [] {
        SyntheticSceneSpec spec;
        spec.primitives = 24;
        spec.train_views = 4;
        spec.test_views = 1;
        spec.width = 24;
        spec.height = 24;
        spec.focal = 36.0;
        spec.seed = 5;
        return generate_synthetic(spec);
    }();
    return scene;
}

TrainConfig small_config(long iterations) {
    TrainConfig cfg;
    cfg.iterations = iterations;
    cfg.scatter_count = 20;
    cfg.feature_dim = 4;
    cfg.bins = 8;
    cfg.densify_from = 1000000;
    return cfg;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

} // namespace

TEST(TrainConfig, TextRoundTrip) {
    TrainConfig cfg;
    cfg.lambda_t = 0.37;
    cfg.iterations = 1234;
    cfg.lr_feature = 3.125e-3;
    cfg.color_model = ColorModel::spherical_harmonics;
    cfg.seed = 99;
    const TrainConfig back = TrainConfig::from_text(cfg.to_text());
    EXPECT_EQ(back.to_key_values(), cfg.to_key_values());
    EXPECT_EQ(back.lambda_t, 0.37);
    EXPECT_EQ(back.color_model, ColorModel::spherical_harmonics);
}

TEST(TrainConfig, DefaultsMatchPublishedSchedule) {
    const TrainConfig cfg;
    EXPECT_EQ(cfg.lr_feature, 2e-3);
    EXPECT_EQ(cfg.lr_mlp, 1e-4);
    EXPECT_EQ(cfg.lr_final, 1e-5);
    EXPECT_EQ(cfg.lambda_t, 0.01);
    EXPECT_EQ(cfg.lambda_dist, 0.1);
    EXPECT_EQ(cfg.lambda_nf, 0.01);
    EXPECT_EQ(cfg.epsilon, 1e-3);
    EXPECT_EQ(cfg.iterations, 30000);
    EXPECT_EQ(cfg.bins, 64);
    EXPECT_EQ(cfg.near_far_count, 3);
    EXPECT_EQ(cfg.feature_dim, 16);
    EXPECT_EQ(cfg.lambda_frustum, 10.0);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(TrainConfig::from_text("no_such_key = 1\n"), FormatError);
    EXPECT_THROW(TrainConfig::from_text("iterations = many\n"), FormatError);
    EXPECT_THROW(TrainConfig::from_text("lr_mlp = -1\n"), InvalidArgumentError);
    EXPECT_THROW(TrainConfig::from_text("bins = 1\n"), InvalidArgumentError);
    EXPECT_THROW(TrainConfig::from_text("epsilon = 0\n"), InvalidArgumentError);
}

TEST(Schedules, CosineEndpointsAndMidpoint) {
    EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 1e-5, 0, 101), 2e-3);
    EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 1e-5, 100, 101), 1e-5);
    EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 1e-5, 50, 101), 0.5 * (2e-3 + 1e-5));
    EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 1e-5, 500, 101), 1e-5);
    double prev = 1.0;
    for (long s = 0; s < 101; ++s) {
        const double lr = cosine_lr(2e-3, 1e-5, s, 101);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(Schedules, ExponentialMidpointIsGeometricMean) {
    EXPECT_DOUBLE_EQ(exponential_lr(1.6e-4, 1.6e-6, 0, 11), 1.6e-4);
    EXPECT_NEAR(exponential_lr(1.6e-4, 1.6e-6, 10, 11), 1.6e-6, 1e-18);
    EXPECT_NEAR(exponential_lr(1.6e-4, 1.6e-6, 5, 11), 1.6e-5, 1e-17);
}

TEST(Trainer, LearningRatesFollowIteration) {
    const auto& scene = small_scene();
    Trainer t(scene.dataset, small_config(5));
    EXPECT_DOUBLE_EQ(t.feature_lr(), 2e-3);
    EXPECT_DOUBLE_EQ(t.mlp_lr(), 1e-4);
    EXPECT_DOUBLE_EQ(t.bias_lr(), 1e-4);
    EXPECT_DOUBLE_EQ(t.position_lr(), t.extent() * 1.6e-4);
    t.run();
    EXPECT_TRUE(t.finished());
    EXPECT_EQ(t.iteration(), 5);
    EXPECT_DOUBLE_EQ(t.feature_lr(), 1e-5);
    EXPECT_DOUBLE_EQ(t.mlp_lr(), 1e-5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    AdamGroup adam(4);
    std::vector<double> p{1.0, -2.0, 0.5, 3.0};
    const std::vector<double> g{0.3, -7.0, 1e-3, 0.0};
    adam.step(p, g, 0.1);
    EXPECT_NEAR(p[0], 0.9, 1e-12);
    EXPECT_NEAR(p[1], -1.9, 1e-12);
    EXPECT_NEAR(p[2], 0.4, 1e-10);
    EXPECT_EQ(p[3], 3.0);
    EXPECT_EQ(adam.steps(), 1);
}

TEST(Adam, KeepAndGrowPreserveRows) {
    AdamGroup adam(6);
    std::vector<double> p(6, 0.0);
    adam.step(p, std::vector<double>{1, 2, 3, 4, 5, 6}, 0.1);
    adam.keep({true, false, true}, 2);
    ASSERT_EQ(adam.size(), 4u);
    EXPECT_DOUBLE_EQ(adam.first_moment()[0], 0.1);
    EXPECT_DOUBLE_EQ(adam.first_moment()[2], 0.5);
    adam.grow(1, 2);
    ASSERT_EQ(adam.size(), 6u);
    EXPECT_EQ(adam.first_moment()[4], 0.0);
    EXPECT_EQ(adam.second_moment()[5], 0.0);
}

TEST(Trainer, SceneExtentPadsCameraRadius) {
    std::vector<CameraView> cams{look_at(Vec3(-1, 0, 0), Vec3(-1, 0, 5), 8, 8, 8.0),
                                 look_at(Vec3(1, 0, 0), Vec3(1, 0, 5), 8, 8, 8.0)};
    EXPECT_NEAR(scene_extent(cams), 1.1, 1e-12);
    EXPECT_EQ(scene_extent(std::span<const CameraView>{}), 1.0);
}

TEST(Trainer, ZeroIterationsReturnsInitialization) {
    const auto& scene = small_scene();
    const TrainConfig cfg = small_config(0);
    const TrainedScene init = initialize_scene(scene.dataset, cfg);
    const TrainedScene trained = train(scene.dataset, cfg);
    EXPECT_EQ(cloud_fingerprint(trained.cloud), cloud_fingerprint(init.cloud));
    EXPECT_EQ(trained.field.mlp.params(), init.field.mlp.params());
    EXPECT_EQ(trained.exposure.size(), init.exposure.size());
    EXPECT_EQ(init.cloud.size(), scene.dataset.sparse.size() + 20);
}

TEST(Trainer, FixedSeedReproducesLossCurve) {
    const auto& scene = small_scene();
    TrainConfig cfg = small_config(12);
    cfg.densify_from = 4;
    cfg.densify_interval = 4;
    cfg.densify_until_fraction = 1.0;
    cfg.densify_grad_threshold = 0.0;
    std::vector<double> a, b;
    const TrainedScene sa = train(scene.dataset, cfg, [&](const IterationRecord& r) { a.push_back(r.total); });
    const TrainedScene sb = train(scene.dataset, cfg, [&](const IterationRecord& r) { b.push_back(r.total); });
    ASSERT_EQ(a.size(), 12u);
    EXPECT_EQ(a, b);
    EXPECT_EQ(cloud_fingerprint(sa.cloud), cloud_fingerprint(sb.cloud));
}

TEST(Trainer, ReferenceExposureStaysFrozen) {
    const auto& scene = small_scene();
    Trainer t(scene.dataset, small_config(8));
    t.run();
    const ExposureTable& e = t.scene().exposure;
    EXPECT_EQ(e.reference_shutter(), 1.0);
    EXPECT_EQ(e.log_beta(e.reference_index()), Vec3::Zero());
    EXPECT_NE(e.log_beta(e.index_of(0.5)), Vec3::Zero());
}

TEST(Densify, ClonesCopyColorStateExactly) {
    const auto& scene = small_scene();
    TrainConfig cfg = small_config(10);
    cfg.densify_grad_threshold = 0.0;
    cfg.percent_dense = 1e6;
    cfg.prune_opacity = 0.0;
    Trainer t(scene.dataset, cfg);
    t.step();
    const GaussianCloud before = t.scene().cloud;
    t.densify_and_prune();
    const GaussianCloud& after = t.scene().cloud;
    const std::size_t n = before.size();
    ASSERT_GT(after.size(), n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(after.positions[i], before.positions[i]);
    std::size_t last_parent = 0;
    for (std::size_t j = n; j < after.size(); ++j) {
        std::size_t parent = n;
        for (std::size_t i = last_parent; i < n && parent == n; ++i) {
            if (before.positions[i] == after.positions[j]) parent = i;
        }
        ASSERT_LT(parent, n);
        last_parent = parent + 1;
        const auto fa = after.feature(j), fb = before.feature(parent);
        EXPECT_TRUE(std::equal(fa.begin(), fa.end(), fb.begin(), fb.end()));
        EXPECT_EQ(after.color_biases[j], before.color_biases[parent]);
        EXPECT_EQ(after.log_scales[j], before.log_scales[parent]);
        EXPECT_EQ(after.opacity_logits[j], before.opacity_logits[parent]);
    }
    t.step();
}

TEST(Densify, SplitsReplaceParentWithTwoShrunkChildren) {
    const auto& scene = small_scene();
    TrainConfig cfg = small_config(10);
    cfg.densify_grad_threshold = 0.0;
    cfg.percent_dense = 1e-12;
    cfg.prune_opacity = 0.0;
    Trainer t(scene.dataset, cfg);
    t.step();
    const GaussianCloud before = t.scene().cloud;
    t.densify_and_prune();
    const GaussianCloud& after = t.scene().cloud;
    const std::size_t n = before.size();
    const std::size_t s = after.size() - n;
    ASSERT_GT(s, 0u);
    const std::size_t first_child = n - s;
    for (std::size_t j = first_child; j < after.size(); j += 2) {
        std::size_t parent = n;
        for (std::size_t i = 0; i < n && parent == n; ++i) {
            const Vec3 shrunk = before.log_scales[i].array() - std::log(1.6);
            if (shrunk == after.log_scales[j] && before.color_biases[i] == after.color_biases[j]) parent = i;
        }
        ASSERT_LT(parent, n);
        for (std::size_t c : {j, j + 1}) {
            const auto fa = after.feature(c), fb = before.feature(parent);
            EXPECT_TRUE(std::equal(fa.begin(), fa.end(), fb.begin(), fb.end()));
            EXPECT_EQ(after.color_biases[c], before.color_biases[parent]);
            EXPECT_EQ(after.rotations[c], before.rotations[parent]);
            const double reach = 8.0 * before.scale(parent).maxCoeff();
            EXPECT_LT((after.positions[c] - before.positions[parent]).norm(), reach);
        }
        for (std::size_t i = 0; i < first_child; ++i) EXPECT_NE(after.positions[i], before.positions[parent]);
    }
}

TEST(Densify, RespectsPrimitiveBudgetAndPrunes) {
    const auto& scene = small_scene();
    TrainConfig cfg = small_config(10);
    cfg.densify_grad_threshold = 0.0;
    cfg.percent_dense = 1e6;
    cfg.prune_opacity = 0.0;
    Trainer t(scene.dataset, cfg);
    const std::size_t n = t.scene().cloud.size();
    cfg.max_primitives = static_cast<long>(n) + 3;
    Trainer capped(scene.dataset, cfg);
    capped.step();
    capped.densify_and_prune();
    EXPECT_EQ(capped.scene().cloud.size(), n + 3);

    cfg.max_primitives = 200000;
    cfg.prune_opacity = 0.5;
    Trainer pruning(scene.dataset, cfg);
    pruning.step();
    EXPECT_THROW(pruning.densify_and_prune(), EmptyViewError);
}

TEST(Objective, MatchesFiniteDifferencesIncludingExposure) {
    std::mt19937_64 rng(31);
    TrainConfig cfg;
    cfg.bins = 8;
    cfg.lambda_t = 0.2;
    cfg.lambda_dist = 0.5;
    cfg.lambda_nf = 0.1;
    FdStats stats;
    for (int t = 0; t < 6; ++t) {
        CameraView cam = look_at(Vec3(0.1 * t, 0.0, 0.0), Vec3(0.1 * t, 0.2, 5.0), 12, 12, 12.0);
        cam.shutter_scale = 0.5;
        GaussianCloud cloud = random_cloud(rng, cam, {.primitives = 8});
        ColorField field = random_field(4, 400 + t);
        ExposureTable exposure({1.0, 0.5}, 1.0);
        const std::size_t e = exposure.index_of(0.5);
        exposure.log_beta(e) = Vec3(0.3, -0.2, 0.1);
        const Image frame = random_image(rng, 12, 12, 3, 0.1, 0.4);

        ObjectiveOptions opt;
        opt.cutoff_sigma = 40.0;
        const Objective base = evaluate_objective(cloud, field, exposure, cam, frame, cfg, opt);
        const Image weights = random_image(rng, 12, 12, 3, 0.1, 0.5);
        opt.weight_source = &weights;
        opt.fixed_binning = base.render.binning;
        const Objective obj = evaluate_objective(cloud, field, exposure, cam, frame, cfg, opt);
        EXPECT_NEAR(obj.total, total_loss(obj.parts, loss_weights(cfg)), 1e-12);
        auto loss = [&] { return evaluate_objective(cloud, field, exposure, cam, frame, cfg, opt).total; };
        for (auto& ref : parameter_refs(cloud, field)) {
            stats.compare(ref.name, ref.grad(obj.grad), loss, *ref.value, 1e-5, 1e-6);
        }
        for (int k = 0; k < 3; ++k) {
            stats.compare("log_beta", obj.d_log_beta[k], loss, exposure.log_beta(e)[k], 1e-5, 1e-6);
        }
    }
    EXPECT_LT(stats.worst, 1e-3) << stats.worst_name;
    EXPECT_LT(stats.kinks, stats.checked / 50) << stats.kinks << " of " << stats.checked;
}

TEST(Objective, ReferenceShutterHasNoExposureGradient) {
    std::mt19937_64 rng(32);
    const CameraView cam = simple_camera(12, 12, 12.0);
    const GaussianCloud cloud = random_cloud(rng, cam);
    const ColorField field = random_field(4, 5);
    const ExposureTable exposure({1.0, 0.5}, 1.0);
    const Image frame = random_image(rng, 12, 12, 3, 0.0, 0.4);
    const Objective obj = evaluate_objective(cloud, field, exposure, cam, frame, TrainConfig{});
    EXPECT_EQ(obj.d_log_beta, Vec3::Zero());
    EXPECT_GT(obj.total, 0.0);
}

TEST(LossLog, WritesHeaderAndRows) {
    const std::string path = (std::filesystem::temp_directory_path() / "rawsplat_loss_log_test.csv").string();
    {
        LossLogger log(path, 16);
        for (long i = 1; i <= 3; ++i) {
            IterationRecord r;
            r.iteration = i;
            r.view = 2;
            r.total = 0.5 * i;
            r.parts = {0.25, 0.125, 0.0625, 0.03125};
            r.primitives = 40;
            EXPECT_TRUE(log.push(r));
        }
        log.close();
        EXPECT_FALSE(log.push(IterationRecord{}));
        EXPECT_EQ(log.dropped(), 1u);
    }
    const auto lines = read_lines(path);
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], loss_log_header());
    EXPECT_EQ(lines[0], "iteration,view,total,image,transmittance,distortion,near_far,primitives");
    EXPECT_EQ(std::count(lines[1].begin(), lines[1].end(), ','), 7);
    EXPECT_EQ(lines[1].substr(0, 4), "1,2,");
    EXPECT_EQ(lines[3].substr(lines[3].size() - 3), ",40");
    std::remove(path.c_str());
}

TEST(LossLog, UnwritablePathThrows) {
    EXPECT_THROW(LossLogger("/nonexistent_dir/loss.csv"), FormatError);
}
