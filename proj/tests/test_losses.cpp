#include <gtest/gtest.h>

#include <cmath>

#include "mtpt/grad_check.hpp"
#include "mtpt/losses.hpp"
#include "mtpt/ops.hpp"
#include "support/testing.hpp"

using namespace mtpt;
using namespace mtpt::diff;
using namespace mtpt::losses;
namespace mt = mtpt::testing;

namespace {

struct Fixture {
    model::FrozenModel model;
    model::PromptState theta;
    Tensor image;
};

Fixture make_fixture(std::uint64_t seed) {
    const auto cfg = mt::tiny_config();
    Rng rng(seed);
    return {model::init_model(cfg, seed), model::init_prompts(cfg, seed + 1),
            mt::random_tensor(rng, {cfg.channels, cfg.image_size, cfg.image_size}, 0.0, 1.0)};
}

// Affines whose warp is smooth under +-h perturbation on the tiny image.
Tensor generic_affines(Rng& rng, std::size_t n, std::size_t side) {
    for (;;) {
        Tensor phis = mt::random_affines(rng, n);
        if (mt::warp_is_generic(phis, side, side, 1e-4)) return phis;
    }
}

}  // namespace

TEST(Selection, CountFollowsFloorWithFloorOfOne) {
    EXPECT_EQ(selection_count(64, 0.1), 6u);
    EXPECT_EQ(selection_count(64, 0.01), 1u);
    EXPECT_EQ(selection_count(64, 1.0), 64u);
    EXPECT_EQ(selection_count(8, 0.1), 1u);
    EXPECT_THROW(selection_count(8, 0.0), std::invalid_argument);
    EXPECT_THROW(selection_count(8, 1.5), std::invalid_argument);
}

TEST(Selection, MatchesBruteForceIncludingTies) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 40), k = 2 + uniform_index(rng, 6);
        Tensor probs = mt::random_probs(rng, n, k);
        // Copy some rows over others so equal entropies are common.
        for (std::size_t r = 0; r < n / 3; ++r) {
            const std::size_t src = uniform_index(rng, n), dst = uniform_index(rng, n);
            for (std::size_t c = 0; c < k; ++c) probs[dst * k + c] = probs[src * k + c];
        }
        const double rho = uniform(rng, 0.01, 1.0);
        const auto sel = select_confident(probs, rho);
        const auto expected = mt::brute_force_selection(probs, rho);
        ASSERT_EQ(sel.indices, expected) << "trial " << trial;
        ASSERT_EQ(sel.k, expected.size());
        std::size_t kept = 0;
        for (std::size_t i = 0; i < n; ++i) kept += sel.mask[i];
        EXPECT_EQ(kept, sel.k);
        EXPECT_EQ(sel.delta, sel.entropies[sel.indices.back()]);
    }
}

TEST(Selection, AllEqualRowsPickLowestIndices) {
    Tensor probs({10, 4});
    for (double& v : probs.data()) v = 0.25;
    const auto sel = select_confident(probs, 0.3);
    EXPECT_EQ(sel.indices, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Selection, RejectsBadInput) {
    EXPECT_THROW(select_confident(Tensor({4}), 0.5), ShapeError);
    EXPECT_THROW(select_confident(Tensor({0, 4}), 0.5), std::invalid_argument);
}

TEST(Selection, SelectedMeanAveragesKeptRows) {
    Rng rng(12);
    const Tensor probs = mt::random_probs(rng, 9, 5);
    const auto sel = select_confident(probs, 0.4);
    Tape tape;
    const Tensor mean = selected_mean(tape.constant(probs), sel).value();
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0.0;
        for (std::size_t i : sel.indices) s += probs[i * 5 + c];
        EXPECT_NEAR(mean[c], s / static_cast<double>(sel.k), 1e-15);
    }
}

TEST(Entropy, KnownValuesAndValidation) {
    Tape tape;
    EXPECT_NEAR(entropy(tape.constant(Tensor::vector({0.25, 0.25, 0.25, 0.25}))).value().item(), std::log(4.0), 1e-12);
    EXPECT_NEAR(entropy(tape.constant(Tensor::vector({1.0, 0.0}))).value().item(), 0.0, 1e-9);
    EXPECT_THROW(entropy(tape.constant(Tensor::vector({0.5, 0.6}))), std::invalid_argument);
    EXPECT_THROW(entropy(tape.constant(Tensor::vector({1.2, -0.2}))), std::invalid_argument);
    const std::vector<double> p{0.1, 0.2, 0.7};
    EXPECT_NEAR(entropy_value(p), -(0.1 * std::log(0.1) + 0.2 * std::log(0.2) + 0.7 * std::log(0.7)), 1e-12);
}

TEST(Consistency, DetachedTargetGetsNoGradient) {
    Tensor target = Tensor::vector({0.2, 0.8}), pred = Tensor::vector({0.6, 0.4});
    target.set_requires_grad(true);
    pred.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(ce_consistency(tape.leaf(target), tape.leaf(pred), true));
    }
    EXPECT_EQ(target.grad()[0], 0.0);
    EXPECT_EQ(target.grad()[1], 0.0);
    EXPECT_NEAR(pred.grad()[0], -0.2 / 0.6, 1e-12);
    target.zero_grad();
    {
        Tape tape;
        tape.backward(ce_consistency(tape.leaf(target), tape.leaf(pred), false));
    }
    EXPECT_NEAR(target.grad()[0], -std::log(0.6), 1e-12);
}

TEST(Divergences, KlAndCosineKnownValues) {
    Tape tape;
    const Var p = tape.constant(Tensor::vector({0.5, 0.5})), q = tape.constant(Tensor::vector({0.25, 0.75}));
    EXPECT_NEAR(kl_divergence(p, q).value().item(), 0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75), 1e-12);
    EXPECT_NEAR(kl_divergence(p, p).value().item(), 0.0, 1e-15);
    EXPECT_NEAR(cosine_distance(tape.constant(Tensor::vector({1, 0})), tape.constant(Tensor::vector({0, 2}))).value().item(),
                1.0, 1e-15);
    EXPECT_NEAR(cosine_distance(tape.constant(Tensor::vector({1, 2})), tape.constant(Tensor::vector({2, 4}))).value().item(),
                0.0, 1e-15);
}

TEST(Names, RoundTrip) {
    for (auto v : {PredictiveLoss::ce, PredictiveLoss::kl}) EXPECT_EQ(parse_predictive(name(v)), v);
    for (auto v : {SemanticDistance::euclidean, SemanticDistance::cosine}) EXPECT_EQ(parse_semantic(name(v)), v);
    for (auto v : {InnerTerms::both, InnerTerms::entropy, InnerTerms::discrepancy}) EXPECT_EQ(parse_inner_terms(name(v)), v);
    for (auto v : {OuterTerms::both, OuterTerms::consistency, OuterTerms::discrepancy}) EXPECT_EQ(parse_outer_terms(name(v)), v);
    EXPECT_THROW(parse_predictive("hinge"), std::invalid_argument);
}

TEST(InnerLoss, MatchesStraightLineOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto fx = make_fixture(seed);
        Rng rng(100 + seed);
        const Tensor phis = mt::random_affines(rng, 10);
        LossOptions opt;
        opt.rho = 0.3;
        Tape tape;
        model::Network net(tape, fx.model, fx.theta);
        const auto loss = inner_loss(net, tape.constant(fx.image), tape.constant(phis), opt);
        const double oracle = mt::inner_loss_oracle(fx.model, fx.theta, fx.image, phis, opt.rho);
        EXPECT_NEAR(loss.total.value().item(), oracle, 1e-10);
        EXPECT_NEAR(loss.total.value().item(), loss.entropy.value().item() + loss.discrepancy.value().item(), 1e-12);
    }
}

TEST(OuterLoss, MatchesStraightLineOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto fx = make_fixture(seed);
        Rng rng(200 + seed);
        const Tensor phi_K = mt::random_affines(rng, 10), phi_V = mt::random_affines(rng, 10);
        LossOptions opt;
        opt.rho = 0.2;
        Tape tape;
        model::Network net(tape, fx.model, fx.theta);
        const auto loss = outer_loss(net, tape.constant(fx.image), tape.constant(phi_K), tape.constant(phi_V), opt);
        EXPECT_NEAR(loss.total.value().item(), mt::outer_loss_oracle(fx.model, fx.theta, fx.image, phi_K, phi_V, opt.rho),
                    1e-10);
    }
}

TEST(InnerLoss, TermFlagsSelectComponents) {
    auto fx = make_fixture(3);
    Rng rng(3);
    const Tensor phis = mt::random_affines(rng, 6);
    auto eval = [&](InnerTerms terms) {
        LossOptions opt;
        opt.inner_terms = terms;
        Tape tape;
        model::Network net(tape, fx.model, fx.theta);
        const auto l = inner_loss(net, tape.constant(fx.image), tape.constant(phis), opt);
        return std::array{l.total.value().item(), l.entropy.value().item(), l.discrepancy.value().item()};
    };
    const auto both = eval(InnerTerms::both);
    EXPECT_NEAR(eval(InnerTerms::entropy)[0], both[1], 1e-12);
    EXPECT_NEAR(eval(InnerTerms::discrepancy)[0], both[2], 1e-12);
}

TEST(OuterLoss, VariantsChangeTheValue) {
    auto fx = make_fixture(4);
    Rng rng(4);
    const Tensor phi_K = mt::random_affines(rng, 6), phi_V = mt::random_affines(rng, 6);
    auto eval = [&](LossOptions opt) {
        Tape tape;
        model::Network net(tape, fx.model, fx.theta);
        const auto l = outer_loss(net, tape.constant(fx.image), tape.constant(phi_K), tape.constant(phi_V), opt);
        return std::array{l.total.value().item(), l.consistency.value().item(), l.discrepancy.value().item()};
    };
    LossOptions base;
    const auto ce = eval(base);
    LossOptions kl = base;
    kl.predictive = PredictiveLoss::kl;
    const auto klv = eval(kl);
    // CE = KL + H(target), and the target is a distribution with positive entropy.
    EXPECT_LT(klv[1], ce[1]);
    EXPECT_NEAR(klv[2], ce[2], 1e-12);
    LossOptions cos = base;
    cos.semantic = SemanticDistance::cosine;
    EXPECT_NEAR(eval(cos)[1], ce[1], 1e-12);
    LossOptions only = base;
    only.outer_terms = OuterTerms::consistency;
    EXPECT_NEAR(eval(only)[0], ce[1], 1e-12);
}

TEST(InnerLoss, GradientWrtAugmentationsThroughWarp) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        auto fx = make_fixture(seed);
        Rng rng(300 + seed);
        const Tensor phis = generic_affines(rng, 4, fx.model.config.image_size);
        LossOptions opt;
        opt.rho = 0.5;
        Selection fixed;
        {
            Tape tape;
            model::Network net(tape, fx.model, fx.theta);
            fixed = inner_loss(net, tape.constant(fx.image), tape.constant(phis), opt).bundle.selection;
        }
        const ScalarFn fn = [&](Tape& t, Var p) {
            model::Network net(t, fx.model, fx.theta);
            return inner_loss(net, t.constant(fx.image), p, opt, &fixed).total;
        };
        EXPECT_LT(grad_check(fn, phis), 1e-3) << "seed " << seed;
    }
}

TEST(OuterLoss, GradientWrtPrompts) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto fx = make_fixture(seed);
        Rng rng(400 + seed);
        const Tensor phi_K = mt::random_affines(rng, 4), phi_V = mt::random_affines(rng, 4);
        LossOptions opt;
        opt.rho = 0.5;
        // Finite differences see the full objective, so keep the target live.
        opt.detach_target = false;
        Selection sk, sv;
        {
            Tape tape;
            model::Network net(tape, fx.model, fx.theta);
            const auto l = outer_loss(net, tape.constant(fx.image), tape.constant(phi_K), tape.constant(phi_V), opt);
            sk = l.bundle_K.selection;
            sv = l.bundle_V.selection;
        }
        const double err = mt::prompt_grad_error(fx.model, fx.theta, [&](model::Network& net) {
            Tape& t = net.tape();
            return outer_loss(net, t.constant(fx.image), t.constant(phi_K), t.constant(phi_V), opt, &sk, &sv).total;
        });
        EXPECT_LT(err, 1e-4) << "seed " << seed;
    }
}
