#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace rawsplat;
using namespace rawsplat::testing;

namespace {

SyntheticSceneSpec small_spec() {
    SyntheticSceneSpec spec;
    spec.primitives = 40;
    spec.train_views = 4;
    spec.test_views = 2;
    spec.width = 20;
    spec.height = 16;
    spec.focal = 24.0;
    spec.seed = 11;
    return spec;
}

} // namespace

TEST(Synthetic, SameSeedIsBitIdentical) {
    const SyntheticScene a = generate_synthetic(small_spec());
    const SyntheticScene b = generate_synthetic(small_spec());
    ASSERT_EQ(a.dataset.train.size(), b.dataset.train.size());
    for (std::size_t i = 0; i < a.dataset.train.size(); ++i) {
        EXPECT_EQ(a.dataset.train[i].frame.data, b.dataset.train[i].frame.data);
        EXPECT_EQ(a.dataset.train[i].camera.translation, b.dataset.train[i].camera.translation);
    }
    for (std::size_t i = 0; i < a.dataset.test.size(); ++i) {
        EXPECT_EQ(a.dataset.test[i].reference.data, b.dataset.test[i].reference.data);
    }
    EXPECT_EQ(a.dataset.sparse.points, b.dataset.sparse.points);
    EXPECT_EQ(cloud_fingerprint(a.cloud), cloud_fingerprint(b.cloud));

    SyntheticSceneSpec other = small_spec();
    other.seed = 12;
    EXPECT_NE(generate_synthetic(other).dataset.train[0].frame.data, a.dataset.train[0].frame.data);
}

TEST(Synthetic, ZeroNoiseFramesEqualCleanRenders) {
    SyntheticSceneSpec spec = small_spec();
    spec.noise = {0.0, 0.0};
    const SyntheticScene s = generate_synthetic(spec);
    for (std::size_t v = 0; v < s.dataset.train.size(); ++v) {
        const auto& view = s.dataset.train[v];
        const double t = view.camera.shutter_scale;
        for (std::size_t i = 0; i < view.frame.size(); ++i) {
            EXPECT_EQ(view.frame.data[i], static_cast<double>(static_cast<float>(s.train_clean[v].data[i] * t)));
        }
    }
}

TEST(Synthetic, CleanRendersComeFromTheRasterizer) {
    const SyntheticScene s = generate_synthetic(small_spec());
    RenderOptions ro;
    const auto& view = s.dataset.test[1];
    const RenderOutput r = render(s.cloud, s.field, view.camera, ro);
    for (std::size_t i = 0; i < r.color.size(); ++i) {
        EXPECT_EQ(view.reference.data[i], static_cast<double>(static_cast<float>(r.color.data[i])));
    }
    EXPECT_EQ(s.test_depth[1].data, r.depth.data);
}

TEST(Synthetic, NoiseVarianceFollowsModel) {
    const NoiseModel noise{2e-3, 1e-2};
    std::mt19937_64 rng(3);
    const int draws = 10000;
    for (double mu : {0.05, 0.2, 0.5, 1.0, 2.0}) {
        double s = 0.0, ss = 0.0;
        for (int i = 0; i < draws; ++i) {
            const double v = sample_noisy(mu, noise, rng);
            s += v;
            ss += v * v;
        }
        const double mean = s / draws;
        const double var = ss / draws - mean * mean;
        const double expect = noise.gain * mu + noise.read * noise.read;
        EXPECT_NEAR(var, expect, 0.05 * expect) << mu;
        EXPECT_EQ(noise.variance(mu), expect);
    }
}

TEST(Synthetic, NoiseVarianceRegressionRecoversParameters) {
    const NoiseModel noise{4e-3, 2e-2};
    std::mt19937_64 rng(4);
    std::vector<double> mus, vars;
    for (int k = 0; k < 12; ++k) {
        const double mu = 0.1 + 0.2 * k;
        double s = 0.0, ss = 0.0;
        for (int i = 0; i < 10000; ++i) {
            const double v = sample_noisy(mu, noise, rng);
            s += v;
            ss += v * v;
        }
        mus.push_back(mu);
        vars.push_back(ss / 10000 - (s / 10000) * (s / 10000));
    }
    Eigen::MatrixXd a(mus.size(), 2);
    Eigen::VectorXd b(mus.size());
    for (std::size_t i = 0; i < mus.size(); ++i) {
        a(i, 0) = mus[i];
        a(i, 1) = 1.0;
        b[i] = vars[i];
    }
    const Eigen::Vector2d coef = a.colPivHouseholderQr().solve(b);
    EXPECT_NEAR(coef[0], noise.gain, 0.05 * noise.gain);
    EXPECT_NEAR(coef[1], noise.read * noise.read, 0.05 * noise.read * noise.read + 0.05 * noise.gain * 0.1);
}

TEST(Synthetic, NoisyFramesAreNonnegative) {
    SyntheticSceneSpec spec = small_spec();
    spec.noise = {0.05, 0.2};
    const SyntheticScene s = generate_synthetic(spec);
    bool any_zero = false;
    for (const auto& v : s.dataset.train) {
        for (double x : v.frame.data) {
            EXPECT_GE(x, 0.0);
            any_zero = any_zero || x == 0.0;
        }
    }
    EXPECT_TRUE(any_zero);
}

TEST(Synthetic, RadianceSpansDynamicRange) {
    SyntheticSceneSpec spec;
    spec.train_views = 2;
    spec.test_views = 0;
    spec.width = 8;
    spec.height = 8;
    spec.seed = 2;
    const SyntheticScene s = generate_synthetic(spec);
    ASSERT_EQ(s.cloud.size(), 200u);
    double lo = 1e30, hi = 0.0;
    for (const Vec3& r : s.radiance) {
        lo = std::min(lo, r.maxCoeff());
        hi = std::max(hi, r.maxCoeff());
        EXPECT_GE(r.minCoeff(), 0.7 * r.maxCoeff() - 1e-15);
    }
    EXPECT_LE(hi, spec.max_radiance * (1 + 1e-12));
    EXPECT_GE(lo, spec.max_radiance / spec.dynamic_range * (1 - 1e-12));
    EXPECT_GT(hi / lo, 0.5 * spec.dynamic_range);
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(std::exp(s.cloud.color_biases[i][k]), s.radiance[i][k], 1e-15);
    }
}

TEST(Synthetic, ShuttersAlternateAcrossViews) {
    SyntheticSceneSpec spec = small_spec();
    spec.shutters = {1.0, 0.5};
    const SyntheticScene s = generate_synthetic(spec);
    for (std::size_t v = 0; v < s.dataset.train.size(); ++v) {
        EXPECT_EQ(s.dataset.train[v].camera.shutter_scale, v % 2 == 0 ? 1.0 : 0.5);
    }
    for (const auto& t : s.dataset.test) EXPECT_EQ(t.camera.shutter_scale, 1.0);
}

TEST(Synthetic, SparsePointsAreJitteredCenters) {
    SyntheticSceneSpec spec = small_spec();
    spec.sparse_fraction = 1.0;
    spec.sparse_jitter = 0.01;
    const SyntheticScene s = generate_synthetic(spec);
    ASSERT_EQ(s.dataset.sparse.size(), s.cloud.size());
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
        EXPECT_LT((s.dataset.sparse.points[i] - s.cloud.positions[i]).norm(), 0.1);
    }
    spec.drop_beyond = 5.0;
    const SyntheticScene near = generate_synthetic(spec);
    EXPECT_LT(near.dataset.sparse.size(), s.dataset.sparse.size());
    for (const Vec3& p : near.dataset.sparse.points) EXPECT_LE(p.norm(), 5.0);
}

TEST(Synthetic, GroundTruthDepthLiesInSceneRange) {
    const SyntheticScene s = generate_synthetic(small_spec());
    for (const Image& d : s.train_depth) {
        for (double z : d.data) {
            if (z == 0.0) continue;
            EXPECT_GT(z, 2.0);
            EXPECT_LT(z, 7.0);
        }
    }
}

TEST(Synthetic, RejectsInvalidSpecs) {
    SyntheticSceneSpec spec = small_spec();
    spec.primitives = 3;
    EXPECT_THROW(generate_synthetic(spec), InvalidArgumentError);
    spec = small_spec();
    spec.noise.gain = -1.0;
    EXPECT_THROW(generate_synthetic(spec), InvalidArgumentError);
    spec = small_spec();
    spec.train_views = 1;
    EXPECT_THROW(generate_synthetic(spec), InvalidArgumentError);
    spec = small_spec();
    spec.shutters = {1.0, 0.0};
    EXPECT_THROW(generate_synthetic(spec), InvalidArgumentError);
    spec = small_spec();
    spec.dynamic_range = 0.5;
    EXPECT_THROW(generate_synthetic(spec), InvalidArgumentError);
}

TEST(Synthetic, SpecOverridesApply) {
    SyntheticSceneSpec spec;
    spec.apply({{"primitives", "50"}, {"shutters", "1,0.25,0.5"}, {"noise_gain", "0"}, {"seed", "9"}});
    EXPECT_EQ(spec.primitives, 50);
    EXPECT_EQ(spec.shutters, (std::vector<double>{1.0, 0.25, 0.5}));
    EXPECT_EQ(spec.noise.gain, 0.0);
    EXPECT_EQ(spec.seed, 9u);
    EXPECT_THROW(spec.apply({{"bogus", "1"}}), FormatError);
}
