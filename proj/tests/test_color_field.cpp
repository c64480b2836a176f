#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace rawsplat;
using namespace rawsplat::testing;

namespace {

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    return v;
}

Vec3 random_direction(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    return Vec3(g(rng), g(rng), g(rng)).normalized();
}

/// Dense-matrix forward pass written directly from the layer shapes.
Vec3 matmul_oracle(const ColorMLP& mlp, const std::vector<double>& f, const Vec3& v, const Vec3& b) {
    const int in = mlp.input_dim(), h = ColorMLP::kHidden;
    const auto& p = mlp.params();
    auto block = [&](std::size_t off, int rows, int cols) {
        Eigen::MatrixXd m(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) m(r, c) = p[off + r * cols + c];
        return m;
    };
    auto vec = [&](std::size_t off, int n) {
        Eigen::VectorXd x(n);
        for (int i = 0; i < n; ++i) x[i] = p[off + i];
        return x;
    };
    Eigen::VectorXd x(in);
    for (int i = 0; i < mlp.feature_dim(); ++i) x[i] = f[i];
    x.tail(3) = v;
    const Eigen::VectorXd h1 = (block(mlp.w1_offset(), h, in) * x + vec(mlp.b1_offset(), h)).cwiseMax(0.0);
    const Eigen::VectorXd h2 = (block(mlp.w2_offset(), h, h) * h1 + vec(mlp.b2_offset(), h)).cwiseMax(0.0);
    const Eigen::VectorXd o = block(mlp.w3_offset(), 3, h) * h2 + vec(mlp.b3_offset(), 3);
    return (Vec3(o[0], o[1], o[2]) + b).array().exp();
}

} // namespace

TEST(ColorForward, ZeroNetworkReturnsExpBias) {
    const ColorMLP mlp(8);
    const std::vector<double> f(8, 0.3);
    const Vec3 c = color_forward(mlp, f, Vec3::UnitZ(), Vec3::Constant(std::log(0.5)));
    EXPECT_NEAR(c.x(), 0.5, 1e-15);
    EXPECT_NEAR(c.y(), 0.5, 1e-15);
    EXPECT_NEAR(c.z(), 0.5, 1e-15);
}

TEST(ColorForward, BiasShiftScalesOutput) {
    std::mt19937_64 rng(1);
    const ColorField field = random_field(6, 11);
    for (int t = 0; t < 100; ++t) {
        const auto f = random_vector(rng, 6);
        const Vec3 v = random_direction(rng), b = Vec3(random_vector(rng, 3, 0.5).data());
        const Vec3 c0 = color_forward(field.mlp, f, v, b);
        const Vec3 c1 = color_forward(field.mlp, f, v, b + Vec3::Constant(std::log(2.0)));
        EXPECT_LT((c1 - 2.0 * c0).cwiseAbs().maxCoeff(), 1e-14 * c1.cwiseAbs().maxCoeff());
        const double kappa = 0.37;
        const Vec3 c2 = color_forward(field.mlp, f, v, b + Vec3::Constant(kappa));
        EXPECT_LT(((c2 - std::exp(kappa) * c0).array() / c2.array()).abs().maxCoeff(), 1e-14);
    }
}

TEST(ColorForward, MatchesMatrixOracle) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const ColorField field = random_field(5, 100 + t, 20.0);
        const auto f = random_vector(rng, 5);
        const Vec3 v = random_direction(rng), b(random_vector(rng, 3, 0.5).data());
        const Vec3 got = color_forward(field.mlp, f, v, b);
        const Vec3 want = matmul_oracle(field.mlp, f, v, b);
        for (int k = 0; k < 3; ++k) EXPECT_LT(relative_error(got[k], want[k]), 1e-6);
    }
}

TEST(ColorForward, PositiveForFiniteInputs) {
    std::mt19937_64 rng(3);
    const ColorField field = random_field(4, 5, 300.0);
    for (int t = 0; t < 500; ++t) {
        const auto f = random_vector(rng, 4, 10.0);
        const Vec3 b(random_vector(rng, 3, 20.0).data());
        const Vec3 c = color_forward(field.mlp, f, random_direction(rng), b);
        EXPECT_TRUE((c.array() > 0.0).all());
        EXPECT_TRUE(c.allFinite());
        EXPECT_LE(c.maxCoeff(), std::exp(kMaxLogRadiance));
    }
}

TEST(ColorBackward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(4);
    const ColorField field = random_field(4, 6);
    const auto f = random_vector(rng, 4);
    const auto g = color_backward(field.mlp, f, random_direction(rng), Vec3::Zero(), Vec3::Zero());
    for (double x : g.params) EXPECT_EQ(x, 0.0);
    for (double x : g.feature) EXPECT_EQ(x, 0.0);
    EXPECT_EQ(g.bias, Vec3::Zero());
    EXPECT_EQ(g.direction, Vec3::Zero());
}

TEST(ColorBackward, BiasDerivativeEqualsColor) {
    std::mt19937_64 rng(5);
    const ColorField field = random_field(4, 7);
    const auto f = random_vector(rng, 4);
    const Vec3 v = random_direction(rng), b(0.1, -0.7, 0.4);
    const Vec3 c = color_forward(field.mlp, f, v, b);
    for (int k = 0; k < 3; ++k) {
        Vec3 up = Vec3::Zero();
        up[k] = 1.0;
        const auto g = color_backward(field.mlp, f, v, b, up);
        EXPECT_DOUBLE_EQ(g.bias[k], c[k]);
        for (int j = 0; j < 3; ++j)
            if (j != k) EXPECT_EQ(g.bias[j], 0.0);
    }
}

TEST(ColorBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    const double h = 1e-4;
    double worst = 0.0;
    std::size_t checked = 0, kinks = 0;
    for (int t = 0; t < 100; ++t) {
        ColorField field = random_field(4, 200 + t, 20.0);
        auto f = random_vector(rng, 4);
        Vec3 v = random_direction(rng);
        Vec3 b(random_vector(rng, 3, 0.3).data());
        const Vec3 up(random_vector(rng, 3).data());
        const auto g = color_backward(field.mlp, f, v, b, up);
        auto loss = [&] { return color_forward(field.mlp, f, v, b).dot(up); };
        auto check = [&](double analytic, double& x) {
            const double wide = central_difference(loss, x, h);
            const double narrow = central_difference(loss, x, h / 4);
            // Disagreeing step sizes mark a ReLU switching inside the stencil.
            if (relative_error(wide, narrow, 1e-3) > 1e-5) {
                ++kinks;
                return;
            }
            ++checked;
            worst = std::max(worst, relative_error(analytic, wide, 1e-3));
        };
        auto& p = field.mlp.params();
        for (std::size_t i = 0; i < p.size(); ++i) check(g.params[i], p[i]);
        for (std::size_t i = 0; i < f.size(); ++i) check(g.feature[i], f[i]);
        for (int k = 0; k < 3; ++k) {
            check(g.bias[k], b[k]);
            check(g.direction[k], v[k]);
        }
    }
    EXPECT_LT(worst, 1e-4);
    EXPECT_LT(kinks, checked / 1000);
}

TEST(ColorBackward, ClampedArgumentStopsGradient) {
    const ColorMLP mlp(2);
    const std::vector<double> f(2, 0.0);
    const auto g = color_backward(mlp, f, Vec3::UnitZ(), Vec3::Constant(25.0), Vec3::Ones());
    EXPECT_EQ(g.bias, Vec3::Zero());
    EXPECT_NEAR(color_forward(mlp, f, Vec3::UnitZ(), Vec3::Constant(25.0)).x(), std::exp(20.0), 1e-6);
}

TEST(CloneColorState, CopiesBitwise) {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 100; ++t) {
        const auto f = random_vector(rng, 16);
        const Vec3 b(random_vector(rng, 3).data());
        const ColorState s = clone_color_state(f, b);
        ASSERT_EQ(s.feature.size(), f.size());
        EXPECT_EQ(std::memcmp(s.feature.data(), f.data(), f.size() * sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(s.bias.data(), b.data(), sizeof(Vec3)), 0);
    }
}

TEST(ColorField, ShBaselineMatchesConstantTerm) {
    const ColorField sh = ColorField::make_sh();
    EXPECT_EQ(sh.feature_dim(), kShFeatureDim);
    EXPECT_EQ(sh.parameter_count(), 0u);
    std::vector<double> coeffs(kShFeatureDim, 0.0);
    coeffs[0] = 1.0;
    const Vec3 c = sh.evaluate(coeffs, Vec3::UnitX(), Vec3::Zero());
    EXPECT_NEAR(c.x(), 0.5 + kShC0, 1e-15);
    EXPECT_NEAR(c.y(), 0.5, 1e-15);
}

TEST(ColorField, ShBackwardMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    const ColorField sh = ColorField::make_sh();
    for (int t = 0; t < 20; ++t) {
        auto coeffs = random_vector(rng, kShFeatureDim, 0.1);
        Vec3 v = random_direction(rng);
        const Vec3 up(random_vector(rng, 3).data());
        std::vector<double> d_coeffs(kShFeatureDim, 0.0);
        Vec3 d_bias;
        const Vec3 d_dir = sh.backward(coeffs, v, Vec3::Zero(), up, {}, d_coeffs, d_bias);
        auto loss = [&] { return sh.evaluate(coeffs, v, Vec3::Zero()).dot(up); };
        for (int i = 0; i < kShFeatureDim; ++i)
            EXPECT_LT(relative_error(d_coeffs[i], central_difference(loss, coeffs[i], 1e-6), 1e-6), 1e-6);
        for (int k = 0; k < 3; ++k)
            EXPECT_LT(relative_error(d_dir[k], central_difference(loss, v[k], 1e-6), 1e-6), 1e-6);
    }
}

TEST(ColorField, ModelNamesRoundTrip) {
    EXPECT_EQ(color_model_from_string(to_string(ColorModel::mlp)), ColorModel::mlp);
    EXPECT_EQ(color_model_from_string(to_string(ColorModel::spherical_harmonics)), ColorModel::spherical_harmonics);
    EXPECT_THROW(color_model_from_string("nerf"), InvalidArgumentError);
}
