#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mtpt/model.hpp"
#include "mtpt/ops.hpp"
#include "mtpt/optimizer.hpp"
#include "mtpt/warp.hpp"

namespace mtpt::model {

using namespace mtpt::diff;

DivergenceError::DivergenceError(std::size_t step)
    : std::runtime_error("pretraining diverged at step " + std::to_string(step)), step_(step) {}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"model", c.model},           {"seed", c.seed},   {"epochs", c.epochs},
         {"batch_size", c.batch_size}, {"lr", c.lr},       {"weight_decay", c.weight_decay},
         {"augment", c.augment},       {"crop_scale_lo", c.crop_scale_lo}};
}

PretrainResult pretrain_source(const bench::Dataset& train, const bench::Dataset& heldout, const PretrainConfig& cfg,
                               const ProgressFn& progress) {
    if (train.samples.empty()) throw std::invalid_argument("pretrain_source: empty training set");
    cfg.model.validate();
    FrozenModel model = init_model(cfg.model, cfg.seed);
    PromptState prompts = init_prompts(cfg.model, cfg.seed);

    for (auto& [name, t] : model.params) t.set_requires_grad(true);
    prompts.set_requires_grad(true);

    std::map<std::string, optim::State> states;
    for (const auto& [name, t] : model.params) states.emplace(name, optim::State(t.numel()));
    optim::State txt_state(prompts.theta_txt.numel()), vis_state(prompts.theta_vis.numel());
    const optim::AdamWParams hp{.weight_decay = cfg.weight_decay};

    Rng rng(derive_seed(cfg.seed, 0x747261696eULL));
    warp::CropInit crop;
    crop.scale_lo = cfg.crop_scale_lo;
    const auto side = static_cast<double>(cfg.model.image_size);

    std::vector<std::size_t> order(train.samples.size());
    std::iota(order.begin(), order.end(), 0);
    PretrainResult result;
    std::size_t global_step = 0;
    const std::size_t steps_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the portable index sampler.
        for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[uniform_index(rng, i + 1)]);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            const std::size_t bsz = end - start;
            std::vector<Tensor> images;
            images.reserve(bsz);
            Tensor onehot({bsz, cfg.model.n_classes});
            for (std::size_t b = 0; b < bsz; ++b) {
                const auto& s = train.samples[order[start + b]];
                if (cfg.augment) {
                    const warp::AffineBatch phi = warp::init_phi_K(rng, 1, crop, side, side);
                    images.push_back(warp::warp_image(s.image, phi).view(0));
                } else {
                    images.push_back(s.image);
                }
                onehot[b * cfg.model.n_classes + static_cast<std::size_t>(s.label)] = 1.0;
            }
            std::vector<const Tensor*> ptrs;
            for (const auto& img : images) ptrs.push_back(&img);

            for (auto& [name, t] : model.params) t.zero_grad();
            prompts.zero_grad();
            double loss_value = 0.0;
            try {
                Tape tape;
                Network net(tape, model, prompts, true);
                Var probs = net.probs(net.encode(tape.constant(stack_images(ptrs))));
                Var loss = scale(sum(mul(tape.constant(onehot), log(probs))), -1.0 / static_cast<double>(bsz));
                loss_value = loss.value().item();
                tape.backward(loss);
            } catch (const NonFiniteError&) {
                throw DivergenceError(global_step);
            }
            if (!std::isfinite(loss_value)) throw DivergenceError(global_step);

            // Cosine decay to 5% of the base rate.
            const double progress_frac = static_cast<double>(global_step) / total_steps;
            const double lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac)));
            for (auto& [name, t] : model.params) {
                optim::step(t.data(), t.grad(), states.at(name), optim::Kind::adamw, lr, hp);
            }
            optim::step(prompts.theta_txt.data(), prompts.theta_txt.grad(), txt_state, optim::Kind::adamw, lr, hp);
            optim::step(prompts.theta_vis.data(), prompts.theta_vis.grad(), vis_state, optim::Kind::adamw, lr, hp);
            epoch_loss += loss_value;
            ++batches;
            ++global_step;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
        if (progress) progress(epoch, result.epoch_losses.back());
    }

    for (auto& [name, t] : model.params) t.set_requires_grad(false);
    prompts.set_requires_grad(false);

    result.heldout_accuracy = heldout.samples.empty() ? 0.0 : accuracy(heldout, prompts, model);
    nlohmann::json meta = {{"heldout_accuracy", result.heldout_accuracy},
                           {"pretrain_config", cfg},
                           {"epoch_losses", result.epoch_losses},
                           {"train_size", train.samples.size()},
                           {"heldout_size", heldout.samples.size()}};
    result.checkpoint = make_checkpoint(model, prompts, cfg.seed, std::move(meta));
    result.model = std::move(model);
    result.theta0 = std::move(prompts);
    return result;
}

}  // namespace mtpt::model
