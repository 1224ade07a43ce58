#include "mtpt/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "mtpt/ops.hpp"
#include "mtpt/rng.hpp"

namespace mtpt::engine {

using namespace mtpt::diff;
using model::Network;

namespace {

constexpr std::uint64_t kStreamK = 0x4b;
constexpr std::uint64_t kStreamV = 0x56;
constexpr std::uint64_t kStreamOffline = 0x6f66666c696e65ULL;

struct Degenerate {
    std::size_t step;
    std::string reason;
};

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int argmax(const Tensor& t) {
    const auto d = t.data();
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

optim::AdamWParams hyper(const AdaptConfig& cfg) { return {.weight_decay = cfg.weight_decay}; }

/// Wraps a parameter update: non-finite values anywhere become a
/// degenerate-sample signal.
template <class Fn>
double guarded(std::size_t step, Fn&& fn) {
    double loss = 0.0;
    try {
        loss = fn();
    } catch (const NonFiniteError& e) {
        throw Degenerate{step, e.what()};
    }
    if (!std::isfinite(loss)) throw Degenerate{step, "non-finite loss"};
    return loss;
}

void require_finite(std::size_t step, const Tensor& t, const char* what) {
    if (!t.all_finite()) throw Degenerate{step, std::string("non-finite ") + what + " after update"};
}

struct Notifier {
    const StepObserver& fn;
    const PromptState& theta;
    const AffineBatch& K;
    const AffineBatch& V;
    void operator()(StepKind kind, bool after) const {
        if (fn) fn(StepView{kind, after, theta, K, V});
    }
};

/// One gradient step on phi_K with prompts held constant.
double inner_step(const Tensor& image, PromptState& theta, const FrozenModel& model, AffineBatch& K,
                  optim::State& state, const AdaptConfig& cfg, double* entropy_out) {
    K.params.set_requires_grad(true);
    Tape tape;
    Network net(tape, model, theta);
    auto L = losses::inner_loss(net, tape.constant(image), tape.leaf(K.params), cfg.loss);
    tape.backward(L.total);
    if (entropy_out) *entropy_out = L.entropy.value().item();
    const double value = L.total.value().item();
    if (std::isfinite(value)) {
        optim::step(K.params.data(), K.params.grad(), state, cfg.optimizer, cfg.inner_lr, hyper(cfg));
    }
    K.params.set_requires_grad(false);
    return value;
}

double inner_value(const Tensor& image, PromptState& theta, const FrozenModel& model, const AffineBatch& K,
                   const AdaptConfig& cfg) {
    Tape tape;
    Network net(tape, model, theta);
    return losses::inner_loss(net, tape.constant(image), tape.constant(K.params), cfg.loss).total.value().item();
}

struct PromptOptim {
    optim::State txt, vis;
    explicit PromptOptim(const PromptState& p) : txt(p.theta_txt.numel()), vis(p.theta_vis.numel()) {}
    void step(PromptState& p, const AdaptConfig& cfg) {
        optim::step(p.theta_txt.data(), p.theta_txt.grad(), txt, cfg.optimizer, cfg.outer_lr, hyper(cfg));
        optim::step(p.theta_vis.data(), p.theta_vis.grad(), vis, cfg.optimizer, cfg.outer_lr, hyper(cfg));
    }
};

/// One gradient step on the prompts with both augmentation sets constant.
double outer_step(const Tensor& image, PromptState& theta, const FrozenModel& model, const PhiPair& phis,
                  PromptOptim& opt, const AdaptConfig& cfg) {
    theta.set_requires_grad(true);
    Tape tape;
    Network net(tape, model, theta);
    auto L = losses::outer_loss(net, tape.constant(image), tape.constant(phis.K.params),
                                tape.constant(phis.V.params), cfg.loss);
    tape.backward(L.total);
    const double value = L.total.value().item();
    if (std::isfinite(value)) opt.step(theta, cfg);
    theta.set_requires_grad(false);
    return value;
}

void ema_step(AffineBatch& V, const AffineBatch& K, const AdaptConfig& cfg, const Notifier& notify,
              AdaptOutcome& out) {
    notify(StepKind::ema, false);
    warp::ema_update(V, K, cfg.ema_alpha);
    notify(StepKind::ema, true);
    ++out.counters.ema;
    if (cfg.record_trajectory) {
        out.phi_K_trajectory.push_back(K.params);
        out.phi_V_trajectory.push_back(V.params);
    }
}

void mark_degenerate(AdaptOutcome& out, const Degenerate& d) {
    out.degenerate = true;
    out.degenerate_step = d.step;
    out.degenerate_reason = d.reason;
    // Fall back to the unadapted prediction.
    out.pred = out.zero_shot_pred;
}

}  // namespace

std::string_view method_name(Method m) {
    switch (m) {
        case Method::zero_shot: return "zero_shot";
        case Method::tpt: return "tpt";
        case Method::metatpt: return "metatpt";
        case Method::one_stage: return "one_stage";
        case Method::offline: return "offline";
    }
    return "?";
}

Method parse_method(std::string_view s) {
    for (Method m : {Method::zero_shot, Method::tpt, Method::metatpt, Method::one_stage, Method::offline}) {
        if (method_name(m) == s) return m;
    }
    throw std::invalid_argument("unknown method: " + std::string(s));
}

double profile_rate(RateProfile p) { return p == RateProfile::generalization ? 1e-4 : 1e-3; }

RateProfile parse_profile(std::string_view s) {
    if (s == "generalization") return RateProfile::generalization;
    if (s == "cross_dataset") return RateProfile::cross_dataset;
    throw std::invalid_argument("unknown rate profile: " + std::string(s));
}

void AdaptConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("adapt config: " + m); };
    if (n_views == 0) fail("n_views must be positive");
    if (outer_steps == 0 && method != Method::zero_shot) fail("outer_steps must be positive");
    if (inner_steps == 0 && (method == Method::metatpt)) fail("inner_steps must be positive");
    if (!(inner_lr >= 0.0 && std::isfinite(inner_lr))) fail("inner_lr must be finite and non-negative");
    if (!(outer_lr >= 0.0 && std::isfinite(outer_lr))) fail("outer_lr must be finite and non-negative");
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) fail("ema_alpha must lie in [0, 1]");
    if (!(loss.rho > 0.0 && loss.rho <= 1.0)) fail("rho must lie in (0, 1]");
    if (!std::isfinite(lambda_K) || !std::isfinite(lambda_V)) fail("lambdas must be finite");
}

void to_json(nlohmann::json& j, const AdaptConfig& c) {
    j = {{"method", method_name(c.method)},
         {"n_views", c.n_views},
         {"outer_steps", c.outer_steps},
         {"inner_steps", c.inner_steps},
         {"inner_lr", c.inner_lr},
         {"outer_lr", c.outer_lr},
         {"ema_alpha", c.ema_alpha},
         {"lambda_K", c.lambda_K},
         {"lambda_V", c.lambda_V},
         {"optimizer", optim::kind_name(c.optimizer)},
         {"weight_decay", c.weight_decay},
         {"rho", c.loss.rho},
         {"predictive_loss", losses::name(c.loss.predictive)},
         {"semantic_distance", losses::name(c.loss.semantic)},
         {"inner_terms", losses::name(c.loss.inner_terms)},
         {"outer_terms", losses::name(c.loss.outer_terms)},
         {"detach_target", c.loss.detach_target},
         {"crop_scale", {c.crop.scale_lo, c.crop.scale_hi}},
         {"crop_ratio", {c.crop.ratio_lo, c.crop.ratio_hi}},
         {"flip_probability", c.crop.flip_probability},
         {"rotation", {c.rotation.gamma_lo, c.rotation.gamma_hi}},
         {"offline_steps", c.offline_steps},
         {"track_inner_after", c.track_inner_after}};
}

void from_json(const nlohmann::json& j, AdaptConfig& c) {
    c = AdaptConfig{};
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("n_views", c.n_views);
    opt("outer_steps", c.outer_steps);
    opt("inner_steps", c.inner_steps);
    opt("inner_lr", c.inner_lr);
    opt("outer_lr", c.outer_lr);
    opt("ema_alpha", c.ema_alpha);
    opt("lambda_K", c.lambda_K);
    opt("lambda_V", c.lambda_V);
    if (j.contains("optimizer")) c.optimizer = optim::parse_kind(j.at("optimizer").get<std::string>());
    opt("weight_decay", c.weight_decay);
    opt("rho", c.loss.rho);
    if (j.contains("predictive_loss")) c.loss.predictive = losses::parse_predictive(j.at("predictive_loss").get<std::string>());
    if (j.contains("semantic_distance")) c.loss.semantic = losses::parse_semantic(j.at("semantic_distance").get<std::string>());
    if (j.contains("inner_terms")) c.loss.inner_terms = losses::parse_inner_terms(j.at("inner_terms").get<std::string>());
    if (j.contains("outer_terms")) c.loss.outer_terms = losses::parse_outer_terms(j.at("outer_terms").get<std::string>());
    opt("detach_target", c.loss.detach_target);
    if (j.contains("crop_scale")) {
        c.crop.scale_lo = j.at("crop_scale").at(0);
        c.crop.scale_hi = j.at("crop_scale").at(1);
    }
    if (j.contains("crop_ratio")) {
        c.crop.ratio_lo = j.at("crop_ratio").at(0);
        c.crop.ratio_hi = j.at("crop_ratio").at(1);
    }
    opt("flip_probability", c.crop.flip_probability);
    if (j.contains("rotation")) {
        c.rotation.gamma_lo = j.at("rotation").at(0);
        c.rotation.gamma_hi = j.at("rotation").at(1);
    }
    opt("offline_steps", c.offline_steps);
    opt("track_inner_after", c.track_inner_after);
}

std::uint64_t sample_seed(std::uint64_t run_seed, std::size_t index) { return derive_seed(run_seed, index); }

PhiPair init_phis(const AdaptConfig& cfg, std::uint64_t seed, std::size_t image_size) {
    Rng rk(derive_seed(seed, kStreamK));
    Rng rv(derive_seed(seed, kStreamV));
    const auto side = static_cast<double>(image_size);
    return {warp::init_phi_K(rk, cfg.n_views, cfg.crop, side, side), warp::init_phi_V(rv, cfg.n_views, cfg.rotation)};
}

FinalPrediction final_predict(const Tensor& image, const PromptState& theta, const FrozenModel& model,
                              const AffineBatch& phi_K, const AffineBatch* phi_V, double lambda_K, double lambda_V,
                              double rho) {
    const std::size_t n_k = phi_K.size();
    Tape tape;
    PromptState p = theta.clone();
    Network net(tape, model, p);
    Var x = tape.constant(image);
    Shape one = image.shape();
    one.insert(one.begin(), 1);
    std::vector<Var> parts{reshape(x, one), warp::warp(x, tape.constant(phi_K.params))};
    if (phi_V) parts.push_back(warp::warp(x, tape.constant(phi_V->params)));
    const Tensor probs = net.probs(net.encode(concat(parts, 0))).value();
    const std::size_t nc = probs.dim(1);

    auto rows = [&](std::size_t begin, std::size_t count) {
        Tensor t({count, nc});
        std::copy_n(probs.data().begin() + static_cast<std::ptrdiff_t>(begin * nc), count * nc, t.data().begin());
        return t;
    };
    auto bundle = [&](std::size_t begin, std::size_t count) {
        losses::ProbBundle b;
        b.view_probs = rows(begin, count);
        b.selection = losses::select_confident(b.view_probs, rho);
        b.p_tilde = Tensor({nc});
        for (std::size_t i : b.selection.indices) {
            for (std::size_t c = 0; c < nc; ++c) b.p_tilde[c] += b.view_probs[i * nc + c];
        }
        for (std::size_t c = 0; c < nc; ++c) b.p_tilde[c] /= static_cast<double>(b.selection.k);
        return b;
    };

    FinalPrediction fp;
    fp.p_x = rows(0, 1).reshaped({nc});
    fp.bundle_K = bundle(1, n_k);
    if (phi_V) fp.bundle_V = bundle(1 + n_k, phi_V->size());
    fp.score = Tensor({nc});
    for (std::size_t c = 0; c < nc; ++c) {
        double s = fp.p_x[c] + lambda_K * fp.bundle_K.p_tilde[c];
        if (phi_V) s += lambda_V * fp.bundle_V.p_tilde[c];
        fp.score[c] = s;
    }
    for (auto* b : {&fp.bundle_K, &fp.bundle_V}) {
        if (b->p_tilde.numel() == 0) continue;
        b->p_hat = Tensor({nc});
        for (std::size_t c = 0; c < nc; ++c) b->p_hat[c] = 0.5 * (fp.p_x[c] + b->p_tilde[c]);
    }
    fp.label = argmax(fp.score);
    return fp;
}

AdaptOutcome zero_shot(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model) {
    AdaptOutcome out;
    out.label = label;
    out.score = model::predict(image, theta0, model);
    out.zero_shot_pred = argmax(out.score);
    out.pred = out.zero_shot_pred;
    return out;
}

AdaptOutcome adapt_with_phis(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                             const AdaptConfig& cfg, PhiPair phis, const StepObserver& observer) {
    const auto t0 = std::chrono::steady_clock::now();
    AdaptOutcome out = zero_shot(image, label, theta0, model);
    PromptState theta = theta0.clone();
    const PhiPair initial = phis;
    const Notifier notify{observer, theta, phis.K, phis.V};
    optim::State k_state(phis.K.params.numel());
    PromptOptim p_opt(theta);
    std::size_t step = 0;

    try {
        for (std::size_t m = 0; m < cfg.outer_steps; ++m) {
            for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
                notify(StepKind::inner, false);
                double* ent = out.inner_losses.empty() ? &out.entropy_before : nullptr;
                out.inner_losses.push_back(
                    guarded(step, [&] { return inner_step(image, theta, model, phis.K, k_state, cfg, ent); }));
                require_finite(step, phis.K.params, "augmentation parameters");
                notify(StepKind::inner, true);
                ++out.counters.inner;
                ++step;
                ema_step(phis.V, phis.K, cfg, notify, out);
            }
            if (cfg.inner_steps > 0 && cfg.track_inner_after) {
                out.inner_losses_after.push_back(
                    guarded(step, [&] { return inner_value(image, theta, model, phis.K, cfg); }));
            }
            notify(StepKind::outer, false);
            out.outer_losses.push_back(
                guarded(step, [&] { return outer_step(image, theta, model, phis, p_opt, cfg); }));
            require_finite(step, theta.theta_txt, "prompts");
            require_finite(step, theta.theta_vis, "prompts");
            notify(StepKind::outer, true);
            ++out.counters.outer;
            ++step;
        }
        FinalPrediction fp;
        guarded(step, [&] {
            fp = final_predict(image, theta, model, phis.K, &phis.V, cfg.lambda_K, cfg.lambda_V, cfg.loss.rho);
            return 0.0;
        });
        out.pred = fp.label;
        out.score = std::move(fp.score);
        out.entropy_after = losses::entropy_value(fp.bundle_K.p_hat.data());
    } catch (const Degenerate& d) {
        mark_degenerate(out, d);
    }
    out.phi_K_moved = warp::distance(phis.K, initial.K);
    out.phi_V_moved = warp::distance(phis.V, initial.V);
    out.wall_ms = elapsed_ms(t0);
    return out;
}

AdaptOutcome tpt_baseline(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                          const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer) {
    const auto t0 = std::chrono::steady_clock::now();
    AdaptOutcome out = zero_shot(image, label, theta0, model);
    PromptState theta = theta0.clone();
    const PhiPair phis = init_phis(cfg, seed, model.config.image_size);
    const Notifier notify{observer, theta, phis.K, phis.V};
    PromptOptim p_opt(theta);
    std::size_t step = 0;
    try {
        for (std::size_t m = 0; m < cfg.outer_steps; ++m) {
            notify(StepKind::outer, false);
            const double loss = guarded(step, [&] {
                theta.set_requires_grad(true);
                Tape tape;
                Network net(tape, model, theta);
                Var probs = net.probs(net.encode(warp::warp(tape.constant(image), tape.constant(phis.K.params))));
                const auto sel = losses::select_confident(probs.value(), cfg.loss.rho);
                Var h = losses::entropy(losses::selected_mean(probs, sel));
                tape.backward(h);
                const double v = h.value().item();
                if (std::isfinite(v)) p_opt.step(theta, cfg);
                theta.set_requires_grad(false);
                return v;
            });
            if (m == 0) out.entropy_before = loss;
            out.outer_losses.push_back(loss);
            require_finite(step, theta.theta_txt, "prompts");
            require_finite(step, theta.theta_vis, "prompts");
            notify(StepKind::outer, true);
            ++out.counters.outer;
            ++step;
        }
        FinalPrediction fp;
        guarded(step, [&] {
            fp = final_predict(image, theta, model, phis.K, nullptr, cfg.lambda_K, 0.0, cfg.loss.rho);
            return 0.0;
        });
        out.pred = fp.label;
        out.score = std::move(fp.score);
        out.entropy_after = losses::entropy_value(fp.bundle_K.p_tilde.data());
    } catch (const Degenerate& d) {
        mark_degenerate(out, d);
    }
    out.wall_ms = elapsed_ms(t0);
    return out;
}

AdaptOutcome one_stage(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                       const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer) {
    const auto t0 = std::chrono::steady_clock::now();
    AdaptOutcome out = zero_shot(image, label, theta0, model);
    PromptState theta = theta0.clone();
    PhiPair phis = init_phis(cfg, seed, model.config.image_size);
    const PhiPair initial = phis;
    const Notifier notify{observer, theta, phis.K, phis.V};
    optim::State k_state(phis.K.params.numel());
    PromptOptim p_opt(theta);
    std::size_t step = 0;
    try {
        for (std::size_t m = 0; m < cfg.outer_steps; ++m) {
            notify(StepKind::joint, false);
            const double loss = guarded(step, [&] {
                theta.set_requires_grad(true);
                phis.K.params.set_requires_grad(true);
                Tape tape;
                Network net(tape, model, theta);
                Var x = tape.constant(image);
                Var phi_K = tape.leaf(phis.K.params);
                auto inner = losses::inner_loss(net, x, phi_K, cfg.loss);
                auto outer = losses::outer_loss(net, x, phi_K, tape.constant(phis.V.params), cfg.loss);
                Var total = add(inner.total, outer.total);
                tape.backward(total);
                if (m == 0) out.entropy_before = inner.entropy.value().item();
                out.inner_losses.push_back(inner.total.value().item());
                const double v = total.value().item();
                if (std::isfinite(v)) {
                    optim::step(phis.K.params.data(), phis.K.params.grad(), k_state, cfg.optimizer, cfg.inner_lr,
                                hyper(cfg));
                    p_opt.step(theta, cfg);
                }
                theta.set_requires_grad(false);
                phis.K.params.set_requires_grad(false);
                return v;
            });
            out.outer_losses.push_back(loss);
            require_finite(step, phis.K.params, "augmentation parameters");
            require_finite(step, theta.theta_txt, "prompts");
            require_finite(step, theta.theta_vis, "prompts");
            notify(StepKind::joint, true);
            ++out.counters.joint;
            ++step;
            ema_step(phis.V, phis.K, cfg, notify, out);
        }
        FinalPrediction fp;
        guarded(step, [&] {
            fp = final_predict(image, theta, model, phis.K, &phis.V, cfg.lambda_K, cfg.lambda_V, cfg.loss.rho);
            return 0.0;
        });
        out.pred = fp.label;
        out.score = std::move(fp.score);
        out.entropy_after = losses::entropy_value(fp.bundle_K.p_hat.data());
    } catch (const Degenerate& d) {
        mark_degenerate(out, d);
    }
    out.phi_K_moved = warp::distance(phis.K, initial.K);
    out.phi_V_moved = warp::distance(phis.V, initial.V);
    out.wall_ms = elapsed_ms(t0);
    return out;
}

namespace {
AdaptOutcome dispatch(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                      const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer) {
    switch (cfg.method) {
        case Method::zero_shot: {
            const auto t0 = std::chrono::steady_clock::now();
            AdaptOutcome out = zero_shot(image, label, theta0, model);
            out.wall_ms = elapsed_ms(t0);
            return out;
        }
        case Method::tpt: return tpt_baseline(image, label, theta0, model, cfg, seed, observer);
        case Method::metatpt:
            return adapt_with_phis(image, label, theta0, model, cfg, init_phis(cfg, seed, model.config.image_size),
                                   observer);
        case Method::one_stage: return one_stage(image, label, theta0, model, cfg, seed, observer);
        case Method::offline: break;
    }
    throw std::invalid_argument("the offline method adapts whole datasets; use adapt_dataset");
}
}  // namespace

AdaptOutcome adapt_sample(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                          const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer) {
    cfg.validate();
    AdaptOutcome out = dispatch(image, label, theta0, model, cfg, seed, observer);
    out.seed = seed;
    return out;
}

PhiPair offline_shared_phis(const bench::Dataset& data, const PromptState& theta0, const FrozenModel& model,
                            const AdaptConfig& cfg, std::uint64_t run_seed, std::size_t workers) {
    PhiPair shared = init_phis(cfg, derive_seed(run_seed, kStreamOffline), model.config.image_size);
    optim::State state(shared.K.params.numel());
    const std::size_t n = data.samples.size();
    for (std::size_t s = 0; s < cfg.offline_steps; ++s) {
        std::vector<std::vector<double>> grads(n);
        parallel_for(n, workers, [&](std::size_t i) {
            PromptState theta = theta0.clone();
            Tensor phi = shared.K.params;
            phi.set_requires_grad(true);
            Tape tape;
            Network net(tape, model, theta);
            auto L = losses::inner_loss(net, tape.constant(data.samples[i].image), tape.leaf(phi), cfg.loss);
            tape.backward(L.total);
            grads[i].assign(phi.grad().begin(), phi.grad().end());
        });
        // Summed in sample order so the result is independent of scheduling.
        std::vector<double> total(shared.K.params.numel(), 0.0);
        for (const auto& g : grads) {
            for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
        }
        optim::step(shared.K.params.data(), total, state, cfg.optimizer, cfg.inner_lr, hyper(cfg));
        if (!shared.K.params.all_finite()) throw std::runtime_error("offline augmentation learning diverged");
        warp::ema_update(shared.V, shared.K, cfg.ema_alpha);
    }
    return shared;
}

std::vector<AdaptOutcome> adapt_dataset(const bench::Dataset& data, const PromptState& theta0,
                                        const FrozenModel& model, const AdaptConfig& cfg, std::uint64_t run_seed,
                                        std::size_t workers) {
    cfg.validate();
    std::vector<AdaptOutcome> out(data.samples.size());
    if (cfg.method == Method::offline) {
        const PhiPair shared = offline_shared_phis(data, theta0, model, cfg, run_seed, workers);
        AdaptConfig frozen_phis = cfg;
        frozen_phis.inner_steps = 0;
        parallel_for(out.size(), workers, [&](std::size_t i) {
            const auto& s = data.samples[i];
            out[i] = adapt_with_phis(s.image, s.label, theta0, model, frozen_phis, shared);
            out[i].seed = sample_seed(run_seed, i);
        });
        return out;
    }
    parallel_for(out.size(), workers, [&](std::size_t i) {
        const auto& s = data.samples[i];
        out[i] = adapt_sample(s.image, s.label, theta0, model, cfg, sample_seed(run_seed, i));
    });
    return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_index = n;
    std::exception_ptr failure;
    auto body = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < failed_index) {
                    failed_index = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace mtpt::engine
