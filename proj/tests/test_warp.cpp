#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mtpt/grad_check.hpp"
#include "mtpt/ops.hpp"
#include "mtpt/warp.hpp"
#include "support/testing.hpp"

using namespace mtpt;
using namespace mtpt::diff;
using namespace mtpt::warp;
using mtpt::testing::random_tensor;

namespace {

double pixel(const Tensor& img, std::size_t c, std::size_t y, std::size_t x) {
    return img[(c * img.dim(1) + y) * img.dim(2) + x];
}

}  // namespace

TEST(Warp, IdentityIsBitwiseExact) {
    Rng rng(1);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {7, 5}, {4, 9}}) {
        const Tensor img = random_tensor(rng, {3, h, w});
        const auto out = warp_image(img, AffineBatch::identity(2, Role::K));
        for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(bitwise_equal(out.view(i), img)) << h << "x" << w;
    }
}

TEST(Warp, UnitTranslationMatchesIndexShift) {
    Rng rng(2);
    const std::size_t H = 16, W = 32;
    const Tensor img = random_tensor(rng, {2, H, W});
    // t_x = 2/W moves every sample one pixel to the right.
    const auto out = warp_image(img, AffineBatch::from_affines(Role::K, {{1, 0, 2.0 / W, 0, 1, 0}, {1, 0, 0, 0, 1, -2.0 / H}}));
    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x + 1 < W; ++x) EXPECT_EQ(pixel(out.view(0), c, y, x), pixel(img, c, y, x + 1));
            EXPECT_EQ(pixel(out.view(0), c, y, W - 1), 0.0);  // zero padding
        }
        for (std::size_t y = 1; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) EXPECT_EQ(pixel(out.view(1), c, y, x), pixel(img, c, y - 1, x));
        }
    }
}

TEST(Warp, HorizontalFlipMatchesMirror) {
    Rng rng(3);
    const std::size_t H = 8, W = 12;
    const Tensor img = random_tensor(rng, {3, H, W});
    const auto out = warp_image(img, AffineBatch::from_affines(Role::K, {{-1, 0, 0, 0, 1, 0}}));
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) EXPECT_EQ(pixel(out.view(0), c, y, x), pixel(img, c, y, W - 1 - x));
        }
    }
}

TEST(Warp, HalfPixelShiftAveragesNeighbours) {
    std::vector<double> rows;
    for (int r = 0; r < 4; ++r) rows.insert(rows.end(), {0.0, 1.0, 4.0, 9.0});
    const Tensor img({1, 4, 4}, rows);
    const auto out = warp_image(img, AffineBatch::from_affines(Role::K, {{1, 0, 1.0 / 4.0, 0, 1, 0}}));
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_DOUBLE_EQ(out.views[r * 4 + 0], 0.5);
        EXPECT_DOUBLE_EQ(out.views[r * 4 + 1], 2.5);
        EXPECT_DOUBLE_EQ(out.views[r * 4 + 2], 6.5);
        EXPECT_DOUBLE_EQ(out.views[r * 4 + 3], 4.5);  // half of the last pixel, half zero padding
    }
}

TEST(Warp, FarOutsideIsAllZero) {
    Rng rng(4);
    const Tensor img = random_tensor(rng, {1, 6, 6});
    const auto out = warp_image(img, AffineBatch::from_affines(Role::K, {{1, 0, 5.0, 0, 1, 0}}));
    for (double v : out.views.data()) EXPECT_EQ(v, 0.0);
}

TEST(Warp, GradientsMatchFiniteDifferences) {
    Rng rng(5);
    int checked = 0;
    for (int trial = 0; trial < 40 && checked < 10; ++trial) {
        const Tensor img = random_tensor(rng, {2, 6, 8});
        const Tensor phis = mtpt::testing::random_affines(rng, 3);
        if (!mtpt::testing::warp_is_generic(phis, 6, 8, 1e-4)) continue;
        ++checked;
        const Tensor weights = random_tensor(rng, {3, 2, 6, 8});
        const ScalarFn wrt_phi = [&](Tape& t, Var p) {
            return sum(mul(warp::warp(t.constant(img), p), t.constant(weights)));
        };
        const ScalarFn wrt_img = [&](Tape& t, Var x) {
            return sum(mul(warp::warp(x, t.constant(phis)), t.constant(weights)));
        };
        EXPECT_LT(grad_check(wrt_phi, phis), 1e-3);
        EXPECT_LT(grad_check(wrt_img, img), 1e-4);
    }
    EXPECT_GE(checked, 5);
}

TEST(Warp, RejectsBadShapes) {
    Tape tape;
    EXPECT_THROW(warp::warp(tape.constant(Tensor({4, 4})), tape.constant(Tensor({1, 2, 3}))), ShapeError);
    EXPECT_THROW(warp::warp(tape.constant(Tensor({1, 4, 4})), tape.constant(Tensor({1, 3, 2}))), ShapeError);
    EXPECT_THROW(warp::warp(tape.constant(Tensor({1, 3, 8})), tape.constant(Tensor({1, 2, 3}))), ShapeError);
    EXPECT_THROW(AffineBatch(Role::K, Tensor({0, 2, 3})), std::invalid_argument);
    Tensor bad({1, 2, 3});
    bad[0] = std::nan("");
    EXPECT_THROW(AffineBatch(Role::K, bad), std::invalid_argument);
}

TEST(CropAffine, MapsOutputCornersToCropCorners) {
    const double W = 32, H = 32;
    const auto m = crop_affine(0.25, 1.0, 1.0, 4.0, 10.0, W, H);
    ASSERT_TRUE(m);
    // 16x16 crop with top-left (row 4, col 10).
    auto map = [&](double u, double v) { return std::pair{(*m)[0] * u + (*m)[1] * v + (*m)[2], (*m)[3] * u + (*m)[4] * v + (*m)[5]}; };
    const auto [x0, y0] = map(-1, -1);
    const auto [x1, y1] = map(1, 1);
    EXPECT_NEAR(x0, 2 * 10.0 / W - 1, 1e-15);
    EXPECT_NEAR(y0, 2 * 4.0 / H - 1, 1e-15);
    EXPECT_NEAR(x1, 2 * 26.0 / W - 1, 1e-15);
    EXPECT_NEAR(y1, 2 * 20.0 / H - 1, 1e-15);
    EXPECT_FALSE(crop_affine(0.25, 1.0, 1.0, 20.0, 0.0, W, H));  // runs off the bottom
    EXPECT_FALSE(crop_affine(1.0, 2.0, 1.0, 0.0, 0.0, W, H));    // wider than the image
}

TEST(InitPhiK, RespectsRangesAndFlipRate) {
    Rng rng(6);
    const CropInit init;
    const auto phis = init_phi_K(rng, 4000, init, 32, 32);
    std::size_t flips = 0;
    for (std::size_t i = 0; i < phis.size(); ++i) {
        const auto m = phis.at(i);
        flips += m[0] < 0;
        const double area = std::abs(m[0]) * m[4];
        EXPECT_GE(area, init.scale_lo - 1e-12);
        EXPECT_LE(area, init.scale_hi + 1e-12);
        EXPECT_EQ(m[1], 0.0);
        EXPECT_EQ(m[3], 0.0);
        // Crop stays inside the image: |t| + half-extent <= 1.
        EXPECT_LE(std::abs(m[2]) + std::abs(m[0]), 1.0 + 1e-12);
        EXPECT_LE(std::abs(m[5]) + m[4], 1.0 + 1e-12);
    }
    EXPECT_NEAR(static_cast<double>(flips) / 4000.0, 0.5, 0.04);
}

TEST(InitPhiK, FallsBackToFullImage) {
    Rng rng(7);
    CropInit impossible;
    impossible.scale_lo = impossible.scale_hi = 1.0;
    impossible.ratio_lo = impossible.ratio_hi = 3.0;  // never fits
    impossible.flip_probability = 0.0;
    const auto phis = init_phi_K(rng, 5, impossible, 32, 32);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(phis.at(i), kIdentityAffine);
}

TEST(InitPhiV, RotationsInRange) {
    Rng rng(8);
    const auto phis = init_phi_V(rng, 500);
    for (std::size_t i = 0; i < phis.size(); ++i) {
        const auto m = phis.at(i);
        const double g = std::atan2(m[3], m[0]);
        EXPECT_GE(g, 0.0);
        EXPECT_LE(g, std::numbers::pi / 6.0 + 1e-12);
        EXPECT_NEAR(m[0] * m[0] + m[3] * m[3], 1.0, 1e-12);
    }
    EXPECT_THROW(init_phi_V(rng, 0), std::invalid_argument);
    EXPECT_THROW(init_phi_V(rng, 3, {0.0, 4.0}), std::invalid_argument);
}

TEST(Ema, ContractsGeometrically) {
    Rng rng(9);
    const AffineBatch K(Role::K, mtpt::testing::random_affines(rng, 8));
    AffineBatch V(Role::V, mtpt::testing::random_affines(rng, 8));
    const double d0 = distance(V, K);
    for (int t = 1; t <= 20; ++t) {
        ema_update(V, K, 0.9);
        EXPECT_NEAR(distance(V, K), std::pow(0.9, t) * d0, 1e-10);
    }
}

TEST(Ema, EndpointsAndValidation) {
    Rng rng(10);
    const AffineBatch K(Role::K, mtpt::testing::random_affines(rng, 2));
    const AffineBatch V0(Role::V, mtpt::testing::random_affines(rng, 2));
    AffineBatch V = V0;
    ema_update(V, K, 1.0);
    EXPECT_TRUE(bitwise_equal(V.params, V0.params));
    ema_update(V, K, 0.0);
    EXPECT_TRUE(bitwise_equal(V.params, K.params));
    EXPECT_THROW(ema_update(V, K, 1.5), std::invalid_argument);
    const AffineBatch small(Role::K, mtpt::testing::random_affines(rng, 1));
    EXPECT_THROW(ema_update(V, small, 0.9), ShapeError);
}
