#include "mtpt/model.hpp"

#include <cmath>
#include <stdexcept>

#include "mtpt/ops.hpp"
#include "mtpt/rng.hpp"

namespace mtpt::model {

using namespace mtpt::diff;

void ModelConfig::validate() const {
    if (patch == 0 || image_size % patch != 0) throw std::invalid_argument("image size must be a multiple of patch");
    if (channels == 0 || d_tok == 0 || d_feat == 0 || n_classes < 2 || n_ctx == 0 || d_ctx == 0) {
        throw std::invalid_argument("model dimensions must be positive");
    }
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"channels", c.channels},   {"image_size", c.image_size}, {"patch", c.patch},
         {"d_tok", c.d_tok},         {"d_feat", c.d_feat},         {"n_blocks", c.n_blocks},
         {"mlp_hidden", c.mlp_hidden}, {"n_classes", c.n_classes}, {"n_ctx", c.n_ctx},
         {"d_ctx", c.d_ctx},         {"n_vp", c.n_vp},             {"text_hidden", c.text_hidden},
         {"tau", c.tau}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.channels = j.at("channels").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.d_tok = j.at("d_tok").get<std::size_t>();
    c.d_feat = j.at("d_feat").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.n_ctx = j.at("n_ctx").get<std::size_t>();
    c.d_ctx = j.at("d_ctx").get<std::size_t>();
    c.n_vp = j.at("n_vp").get<std::size_t>();
    c.text_hidden = j.at("text_hidden").get<std::size_t>();
    c.tau = j.at("tau").get<double>();
}

const Tensor& FrozenModel::at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model has no parameter " + name);
    return it->second;
}

void PromptState::set_requires_grad(bool flag) {
    theta_txt.set_requires_grad(flag);
    theta_vis.set_requires_grad(flag);
}

void PromptState::zero_grad() {
    theta_txt.zero_grad();
    theta_vis.zero_grad();
}

PromptState PromptState::clone() const {
    return {Tensor(theta_txt.shape(), theta_txt.storage()), Tensor(theta_vis.shape(), theta_vis.storage())};
}

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = stddev * normal01(rng);
    return t;
}

std::string block_name(std::size_t l, const char* what) { return "block" + std::to_string(l) + "." + what; }

}  // namespace

FrozenModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));
    FrozenModel m;
    m.config = cfg;
    auto& p = m.params;
    const auto d = cfg.d_tok;
    const auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    p["patch.w"] = gaussian({cfg.patch_dim(), d}, fan(cfg.patch_dim()), rng);
    p["patch.b"] = Tensor({d});
    p["pos"] = gaussian({cfg.n_patches(), d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.n_blocks; ++l) {
        p[block_name(l, "ln1.g")] = Tensor::filled({d}, 1.0);
        p[block_name(l, "ln1.b")] = Tensor({d});
        p[block_name(l, "wq")] = gaussian({d, d}, fan(d), rng);
        p[block_name(l, "wk")] = gaussian({d, d}, fan(d), rng);
        p[block_name(l, "wv")] = gaussian({d, d}, fan(d), rng);
        p[block_name(l, "wo")] = gaussian({d, d}, fan(d), rng);
        p[block_name(l, "ln2.g")] = Tensor::filled({d}, 1.0);
        p[block_name(l, "ln2.b")] = Tensor({d});
        p[block_name(l, "mlp.w1")] = gaussian({d, cfg.mlp_hidden}, fan(d), rng);
        p[block_name(l, "mlp.b1")] = Tensor({cfg.mlp_hidden});
        p[block_name(l, "mlp.w2")] = gaussian({cfg.mlp_hidden, d}, fan(cfg.mlp_hidden), rng);
        p[block_name(l, "mlp.b2")] = Tensor({d});
    }
    p["lnf.g"] = Tensor::filled({d}, 1.0);
    p["lnf.b"] = Tensor({d});
    p["proj"] = gaussian({d, cfg.d_feat}, fan(d), rng);
    p["class_emb"] = gaussian({cfg.n_classes, cfg.d_ctx}, 1.0, rng);
    p["text.w1"] = gaussian({2 * cfg.d_ctx, cfg.text_hidden}, fan(2 * cfg.d_ctx), rng);
    p["text.b1"] = Tensor({cfg.text_hidden});
    p["text.w2"] = gaussian({cfg.text_hidden, cfg.d_feat}, fan(cfg.text_hidden), rng);
    p["text.b2"] = Tensor({cfg.d_feat});
    return m;
}

PromptState init_prompts(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x70726f6d7074ULL));
    PromptState s;
    s.theta_txt = gaussian({cfg.n_ctx, cfg.d_ctx}, 0.5, rng);
    s.theta_vis = gaussian({cfg.n_vp, cfg.d_tok}, 0.5, rng);
    return s;
}

Network::Network(Tape& tape, const FrozenModel& model, PromptState& prompts) : tape_(&tape), cfg_(&model.config) {
    for (const auto& [name, t] : model.params) weights_.emplace(name, tape.constant(t));
    theta_txt_ = tape.leaf(prompts.theta_txt);
    theta_vis_ = tape.leaf(prompts.theta_vis);
}

Network::Network(Tape& tape, FrozenModel& trainable, PromptState& prompts, bool train_weights)
    : tape_(&tape), cfg_(&trainable.config) {
    for (auto& [name, t] : trainable.params) {
        weights_.emplace(name, train_weights ? tape.leaf(t) : tape.constant(t));
    }
    theta_txt_ = tape.leaf(prompts.theta_txt);
    theta_vis_ = tape.leaf(prompts.theta_vis);
}

Var Network::weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw std::out_of_range("network has no weight " + name);
    return it->second;
}

Var Network::layer_norm(Var x, const std::string& prefix) {
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    Var mu = broadcast_cols(mean(x, 1), d);
    Var centered = sub(x, mu);
    Var var = mean(mul(centered, centered), 1);
    Var inv = broadcast_cols(pow(add_scalar(var, 1e-5), -0.5), d);
    Var normed = mul(centered, inv);
    return add(mul(normed, broadcast_rows(weight(prefix + ".g"), rows)), broadcast_rows(weight(prefix + ".b"), rows));
}

Var Network::linear(Var x, const std::string& w, const std::string& b) {
    return add(matmul(x, weight(w)), broadcast_rows(weight(b), x.shape()[0]));
}

Var Network::encode_raw(Var images) {
    const ModelConfig& c = *cfg_;
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size) {
        throw ShapeError("encode", s, Shape{0, c.channels, c.image_size, c.image_size});
    }
    const std::size_t batch = s[0];
    const std::size_t side = c.patches_per_side(), np = c.n_patches(), pd = c.patch_dim();
    const std::size_t S = c.image_size, P = c.patch, d = c.d_tok, T = c.n_tokens();

    std::vector<std::size_t> index;
    index.reserve(batch * np * pd);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t py = 0; py < side; ++py) {
            for (std::size_t px = 0; px < side; ++px) {
                for (std::size_t ch = 0; ch < c.channels; ++ch) {
                    for (std::size_t iy = 0; iy < P; ++iy) {
                        for (std::size_t ix = 0; ix < P; ++ix) {
                            index.push_back(((b * c.channels + ch) * S + py * P + iy) * S + px * P + ix);
                        }
                    }
                }
            }
        }
    }
    Var patches = gather(images, std::move(index), {batch * np, pd});
    Var tokens = linear(patches, "patch.w", "patch.b");
    Var pos = reshape(broadcast_rows(reshape(weight("pos"), {np * d}), batch), {batch * np, d});
    tokens = reshape(add(tokens, pos), {batch, np, d});
    if (c.n_vp > 0) {
        Var prompts = reshape(broadcast_rows(reshape(theta_vis_, {c.n_vp * d}), batch), {batch, c.n_vp, d});
        const Var parts[] = {prompts, tokens};
        tokens = concat(parts, 1);
    }
    Var x = reshape(tokens, {batch * T, d});

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < c.n_blocks; ++l) {
        const std::string pre = "block" + std::to_string(l) + ".";
        Var h = layer_norm(x, pre + "ln1");
        Var q = reshape(matmul(h, weight(pre + "wq")), {batch, T, d});
        Var k = reshape(matmul(h, weight(pre + "wk")), {batch, T, d});
        Var v = reshape(matmul(h, weight(pre + "wv")), {batch, T, d});
        Var attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
        Var mixed = reshape(matmul(attn, v), {batch * T, d});
        x = add(x, matmul(mixed, weight(pre + "wo")));
        Var h2 = layer_norm(x, pre + "ln2");
        Var hidden = tanh(linear(h2, pre + "mlp.w1", pre + "mlp.b1"));
        x = add(x, linear(hidden, pre + "mlp.w2", pre + "mlp.b2"));
    }
    x = layer_norm(x, "lnf");
    Var pooled = mean(reshape(x, {batch, T, d}), 1);
    return matmul(pooled, weight("proj"));
}

Var Network::encode(Var images) { return normalize_rows(encode_raw(images)); }

Var Network::class_features() {
    if (class_cache_) return *class_cache_;
    const ModelConfig& c = *cfg_;
    Var ctx = broadcast_rows(mean(theta_txt_, 0), c.n_classes);
    const Var parts[] = {ctx, weight("class_emb")};
    Var joined = concat(parts, 1);
    Var hidden = tanh(linear(joined, "text.w1", "text.b1"));
    class_cache_ = normalize_rows(linear(hidden, "text.w2", "text.b2"));
    return *class_cache_;
}

Var Network::probs(Var features) {
    Var logits = matmul(features, transpose(class_features()));
    return softmax(scale(logits, 1.0 / cfg_->tau));
}

Var normalize_rows(Var x) {
    const std::size_t d = x.shape().at(1);
    Var norms = pow(sum(mul(x, x), 1), 0.5);
    return div(x, broadcast_cols(norms, d));
}

Tensor stack_images(std::span<const Tensor* const> images) {
    if (images.empty()) throw ShapeError("stack_images", "no images");
    Shape shape = images[0]->shape();
    std::vector<double> data;
    data.reserve(images.size() * images[0]->numel());
    for (const Tensor* img : images) {
        if (img->shape() != shape) throw ShapeError("stack_images", shape, img->shape());
        data.insert(data.end(), img->storage().begin(), img->storage().end());
    }
    shape.insert(shape.begin(), images.size());
    return Tensor(std::move(shape), std::move(data));
}

Tensor encode_image(const Tensor& image, const PromptState& prompts, const FrozenModel& model) {
    Tape tape;
    PromptState p = prompts.clone();
    Network net(tape, model, p);
    const Tensor* one[] = {&image};
    Var f = net.encode(tape.constant(stack_images(one)));
    return f.value().reshaped({model.config.d_feat});
}

Tensor class_features(const PromptState& prompts, const FrozenModel& model) {
    Tape tape;
    PromptState p = prompts.clone();
    Network net(tape, model, p);
    return net.class_features().value();
}

Tensor predict(const Tensor& image, const PromptState& prompts, const FrozenModel& model) {
    Tape tape;
    PromptState p = prompts.clone();
    Network net(tape, model, p);
    const Tensor* one[] = {&image};
    Var probs = net.probs(net.encode(tape.constant(stack_images(one))));
    return probs.value().reshaped({model.config.n_classes});
}

double accuracy(const bench::Dataset& data, const PromptState& prompts, const FrozenModel& model) {
    if (data.samples.empty()) return 0.0;
    constexpr std::size_t kChunk = 64;
    std::size_t correct = 0;
    PromptState p = prompts.clone();
    for (std::size_t start = 0; start < data.samples.size(); start += kChunk) {
        const std::size_t end = std::min(start + kChunk, data.samples.size());
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&data.samples[i].image);
        Tape tape;
        Network net(tape, model, p);
        const Tensor& probs = net.probs(net.encode(tape.constant(stack_images(imgs)))).value();
        const std::size_t nc = model.config.n_classes;
        for (std::size_t i = start; i < end; ++i) {
            const double* row = probs.data().data() + (i - start) * nc;
            const auto best = static_cast<int>(std::max_element(row, row + nc) - row);
            if (best == data.samples[i].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

}  // namespace mtpt::model
