#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mtpt/binio.hpp"
#include "mtpt/losses.hpp"
#include "mtpt/model.hpp"
#include "mtpt/ops.hpp"
#include "support/testing.hpp"

using namespace mtpt;
using namespace mtpt::diff;
using namespace mtpt::model;
namespace mt = mtpt::testing;

namespace {

ModelConfig small_32px() {
    ModelConfig c = mt::tiny_config();
    c.image_size = 32;
    c.n_classes = 8;
    return c;
}

Tensor batch_of(Rng& rng, std::size_t b, const ModelConfig& c) {
    return mt::random_tensor(rng, {b, c.channels, c.image_size, c.image_size}, 0.0, 1.0);
}

}  // namespace

TEST(Model, ConfigValidation) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.patch = 7;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.tau = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Model, ForwardShapesAndUnitFeatures) {
    const auto cfg = mt::tiny_config();
    const auto m = init_model(cfg, 1);
    auto theta = init_prompts(cfg, 2);
    Rng rng(3);
    Tape tape;
    Network net(tape, m, theta);
    const Var f = net.encode(tape.constant(batch_of(rng, 3, cfg)));
    ASSERT_EQ(f.value().shape(), (Shape{3, cfg.d_feat}));
    for (std::size_t b = 0; b < 3; ++b) {
        double n = 0.0;
        for (std::size_t j = 0; j < cfg.d_feat; ++j) n += f.value()[b * cfg.d_feat + j] * f.value()[b * cfg.d_feat + j];
        EXPECT_NEAR(n, 1.0, 1e-12);
    }
    const Tensor p = net.probs(f).value();
    ASSERT_EQ(p.shape(), (Shape{3, cfg.n_classes}));
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < cfg.n_classes; ++c) s += p[b * cfg.n_classes + c];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_THROW(net.encode(tape.constant(Tensor({1, 3, 8, 8}))), ShapeError);
}

TEST(Model, BatchedEncodeMatchesSingleImage) {
    const auto cfg = mt::tiny_config();
    const auto m = init_model(cfg, 4);
    auto theta = init_prompts(cfg, 5);
    Rng rng(6);
    const Tensor images = batch_of(rng, 4, cfg);
    Tape tape;
    Network net(tape, m, theta);
    const Tensor f = net.encode(tape.constant(images)).value();
    const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size;
    for (std::size_t b = 0; b < 4; ++b) {
        Tensor one({cfg.channels, cfg.image_size, cfg.image_size},
                   std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(b * per),
                                       images.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * per)));
        const Tensor g = encode_image(one, theta, m);
        for (std::size_t j = 0; j < cfg.d_feat; ++j) EXPECT_NEAR(f[b * cfg.d_feat + j], g[j], 1e-12);
    }
}

TEST(Model, PromptGradientsMatchFiniteDifferences) {
    const auto cfg = mt::tiny_config();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto m = init_model(cfg, seed);
        auto theta = init_prompts(cfg, seed + 10);
        Rng rng(seed + 20);
        const Tensor images = batch_of(rng, 2, cfg);
        const double err = mt::prompt_grad_error(m, theta, [&](Network& net) {
            const Var p = net.probs(net.encode(net.tape().constant(images)));
            return losses::entropy(reshape(matmul(net.tape().constant(Tensor({1, 2}, {0.5, 0.5})), p), {cfg.n_classes}));
        });
        EXPECT_LT(err, 1e-4) << "seed " << seed;
    }
}

TEST(Model, FrozenWeightsUntouchedByPromptBackward) {
    const auto cfg = mt::tiny_config();
    const auto m = init_model(cfg, 7);
    const FrozenModel before = m;
    auto theta = init_prompts(cfg, 8);
    theta.set_requires_grad(true);
    Rng rng(9);
    {
        Tape tape;
        Network net(tape, m, theta);
        tape.backward(sum(net.probs(net.encode(tape.constant(batch_of(rng, 2, cfg))))));
    }
    for (const auto& [name, t] : m.params) {
        EXPECT_TRUE(bitwise_equal(t, before.params.at(name))) << name;
        EXPECT_FALSE(t.requires_grad()) << name;
    }
}

TEST(Model, CloneDropsGradientButKeepsValues) {
    auto theta = init_prompts(mt::tiny_config(), 1);
    theta.set_requires_grad(true);
    const auto c = theta.clone();
    EXPECT_FALSE(c.theta_txt.requires_grad());
    EXPECT_TRUE(bitwise_equal(c.theta_txt, theta.theta_txt));
    EXPECT_TRUE(bitwise_equal(c.theta_vis, theta.theta_vis));
}

TEST(Checkpoint, RoundTripIsBitwise) {
    const auto cfg = mt::tiny_config();
    const auto m = init_model(cfg, 11);
    const auto theta = init_prompts(cfg, 12);
    const auto ckpt = make_checkpoint(m, theta, 11, {{"note", "test"}});
    const auto path = std::filesystem::temp_directory_path() / "mtpt_test_ckpt.mtpt";
    ckpt.save(path);
    const auto loaded = Checkpoint::load(path);
    std::filesystem::remove(path);
    EXPECT_EQ(loaded.serialize(), ckpt.serialize());
    const auto [m2, theta2] = unpack_checkpoint(loaded);
    EXPECT_EQ(nlohmann::json(m2.config), nlohmann::json(cfg));
    for (const auto& [name, t] : m.params) EXPECT_TRUE(bitwise_equal(t, m2.params.at(name))) << name;
    EXPECT_TRUE(bitwise_equal(theta.theta_txt, theta2.theta_txt));
    EXPECT_TRUE(bitwise_equal(theta.theta_vis, theta2.theta_vis));
    EXPECT_EQ(loaded.metadata.at("note"), "test");
}

TEST(Checkpoint, RejectsCorruptBytes) {
    const auto cfg = mt::tiny_config();
    auto bytes = make_checkpoint(init_model(cfg, 1), init_prompts(cfg, 2), 1).serialize();
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(Checkpoint::deserialize(bad_magic), io::FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    EXPECT_THROW(Checkpoint::deserialize(truncated), io::FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(Checkpoint::deserialize(trailing), io::FormatError);
}

TEST(Pretrain, DeterministicAndLossDecreases) {
    PretrainConfig pc;
    pc.model = small_32px();
    pc.epochs = 3;
    pc.seed = 5;
    const auto train = bench::gen_split(bench::builtin_domain("source"), 6, 1);
    const auto held = bench::gen_split(bench::builtin_domain("source"), 2, 2);
    const auto a = pretrain_source(train, held, pc);
    const auto b = pretrain_source(train, held, pc);
    EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
    ASSERT_EQ(a.epoch_losses.size(), 3u);
    EXPECT_LT(a.epoch_losses.back(), a.epoch_losses.front());
    EXPECT_GE(a.heldout_accuracy, 0.0);
    EXPECT_LE(a.heldout_accuracy, 1.0);
    EXPECT_NEAR(a.heldout_accuracy, accuracy(held, a.theta0, a.model), 1e-12);
}
