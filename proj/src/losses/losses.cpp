#include "mtpt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mtpt/ops.hpp"
#include "mtpt/warp.hpp"

namespace mtpt::losses {

using namespace mtpt::diff;

std::size_t selection_count(std::size_t n, double rho) {
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
    const auto k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n)));
    return std::max<std::size_t>(1, std::min(k, n));
}

double entropy_value(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) h -= v * std::log(std::max(v, kLogFloor));
    return h;
}

Selection select_confident(const Tensor& probs, double rho) {
    if (probs.rank() != 2) throw ShapeError("select_confident", "expects [N, N_c], got " + shape_str(probs.shape()));
    const std::size_t n = probs.dim(0), nc = probs.dim(1);
    if (n == 0) throw std::invalid_argument("select_confident: no views");
    Selection sel;
    sel.k = selection_count(n, rho);
    sel.entropies.resize(n);
    for (std::size_t i = 0; i < n; ++i) sel.entropies[i] = entropy_value(probs.data().subspan(i * nc, nc));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sel.entropies[a] < sel.entropies[b]; });
    sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sel.k));
    sel.mask.assign(n, false);
    for (std::size_t i : sel.indices) sel.mask[i] = true;
    sel.delta = sel.entropies[sel.indices.back()];
    return sel;
}

Var selected_mean(Var probs, const Selection& sel) {
    const std::size_t n = probs.shape().at(0), nc = probs.shape().at(1);
    if (sel.mask.size() != n) throw ShapeError("selected_mean", "selection covers " + std::to_string(sel.mask.size()) +
                                                                    " views, probabilities hold " + std::to_string(n));
    Tensor weights({1, n});
    for (std::size_t i = 0; i < n; ++i) weights[i] = sel.mask[i] ? 1.0 / static_cast<double>(sel.k) : 0.0;
    return reshape(matmul(probs.tape()->constant(std::move(weights)), probs), {nc});
}

Var entropy(Var p) {
    if (p.shape().size() != 1) throw ShapeError("entropy", "expects a vector, got " + shape_str(p.shape()));
    double total = 0.0;
    for (double v : p.value().data()) {
        if (v < 0.0) throw std::invalid_argument("entropy: negative probability " + std::to_string(v));
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("entropy: probabilities sum to " + std::to_string(total));
    return scale(sum(mul(p, log(p))), -1.0);
}

Var composite_prob(Var p_x, Var p_tilde) { return scale(add(p_x, p_tilde), 0.5); }

Var feature_discrepancy_inner(Var x_feature, Var view_features) {
    return l2_norm(sub(x_feature, mean(view_features, 0)));
}

Var feature_discrepancy_outer(Var k_features, Var v_features) {
    return l2_norm(sub(mean(k_features, 0), mean(v_features, 0)));
}

Var ce_consistency(Var target, Var pred, bool detach_target) {
    if (target.shape() != pred.shape()) throw ShapeError("ce_consistency", target.shape(), pred.shape());
    Var t = detach_target ? target.tape()->detach(target) : target;
    return scale(sum(mul(t, log(pred))), -1.0);
}

Var kl_divergence(Var p, Var q, bool detach_target) {
    if (p.shape() != q.shape()) throw ShapeError("kl_divergence", p.shape(), q.shape());
    Var t = detach_target ? p.tape()->detach(p) : p;
    return sum(mul(t, sub(log(t), log(q))));
}

Var cosine_distance(Var a, Var b) { return add_scalar(scale(cosine_similarity(a, b), -1.0), 1.0); }

std::string_view name(PredictiveLoss v) { return v == PredictiveLoss::ce ? "ce" : "kl"; }
std::string_view name(SemanticDistance v) { return v == SemanticDistance::euclidean ? "euclidean" : "cosine"; }

std::string_view name(InnerTerms v) {
    switch (v) {
        case InnerTerms::both: return "both";
        case InnerTerms::entropy: return "entropy";
        case InnerTerms::discrepancy: return "discrepancy";
    }
    return "?";
}

std::string_view name(OuterTerms v) {
    switch (v) {
        case OuterTerms::both: return "both";
        case OuterTerms::consistency: return "consistency";
        case OuterTerms::discrepancy: return "discrepancy";
    }
    return "?";
}

PredictiveLoss parse_predictive(std::string_view s) {
    if (s == "ce") return PredictiveLoss::ce;
    if (s == "kl") return PredictiveLoss::kl;
    throw std::invalid_argument("unknown predictive loss: " + std::string(s));
}

SemanticDistance parse_semantic(std::string_view s) {
    if (s == "euclidean") return SemanticDistance::euclidean;
    if (s == "cosine") return SemanticDistance::cosine;
    throw std::invalid_argument("unknown semantic distance: " + std::string(s));
}

InnerTerms parse_inner_terms(std::string_view s) {
    if (s == "both") return InnerTerms::both;
    if (s == "entropy") return InnerTerms::entropy;
    if (s == "discrepancy") return InnerTerms::discrepancy;
    throw std::invalid_argument("unknown inner loss terms: " + std::string(s));
}

OuterTerms parse_outer_terms(std::string_view s) {
    if (s == "both") return OuterTerms::both;
    if (s == "consistency") return OuterTerms::consistency;
    if (s == "discrepancy") return OuterTerms::discrepancy;
    throw std::invalid_argument("unknown outer loss terms: " + std::string(s));
}

namespace {

Var as_batch(Var image) {
    Shape s = image.shape();
    s.insert(s.begin(), 1);
    return reshape(image, std::move(s));
}

Var row(Var m, std::size_t i) { return reshape(slice(m, 0, i, i + 1), {m.shape()[1]}); }

struct Branch {
    Var features;
    Var probs;
    Selection selection;
    Var p_tilde;
    Var p_hat;
};

Branch make_branch(Var features, Var probs, Var p_x, double rho, const Selection* fixed) {
    Branch b{features, probs, fixed ? *fixed : select_confident(probs.value(), rho), {}, {}};
    b.p_tilde = selected_mean(probs, b.selection);
    b.p_hat = composite_prob(p_x, b.p_tilde);
    return b;
}

ProbBundle bundle_of(const Branch& b) {
    return {b.probs.value(), b.selection, b.p_tilde.value(), b.p_hat.value()};
}

}  // namespace

InnerLoss inner_loss(model::Network& net, Var image, Var phi_K, const LossOptions& opt, const Selection* fixed) {
    const std::size_t n = phi_K.shape().at(0);
    Var views = warp::warp(image, phi_K);
    const Var parts[] = {as_batch(image), views};
    Var feats = net.encode(concat(parts, 0));
    Var probs = net.probs(feats);
    Var f_x = row(feats, 0);
    Var p_x = row(probs, 0);
    Branch k = make_branch(slice(feats, 0, 1, n + 1), slice(probs, 0, 1, n + 1), p_x, opt.rho, fixed);

    InnerLoss out;
    out.p_x = p_x;
    out.entropy = entropy(k.p_hat);
    out.discrepancy = feature_discrepancy_inner(f_x, k.features);
    switch (opt.inner_terms) {
        case InnerTerms::both: out.total = add(out.entropy, out.discrepancy); break;
        case InnerTerms::entropy: out.total = out.entropy; break;
        case InnerTerms::discrepancy: out.total = out.discrepancy; break;
    }
    out.bundle = bundle_of(k);
    return out;
}

OuterLoss outer_loss(model::Network& net, Var image, Var phi_K, Var phi_V, const LossOptions& opt,
                     const Selection* fixed_K, const Selection* fixed_V) {
    const std::size_t n_k = phi_K.shape().at(0), n_v = phi_V.shape().at(0);
    const Var parts[] = {as_batch(image), warp::warp(image, phi_K), warp::warp(image, phi_V)};
    Var feats = net.encode(concat(parts, 0));
    Var probs = net.probs(feats);
    Var p_x = row(probs, 0);
    Branch k = make_branch(slice(feats, 0, 1, 1 + n_k), slice(probs, 0, 1, 1 + n_k), p_x, opt.rho, fixed_K);
    Branch v = make_branch(slice(feats, 0, 1 + n_k, 1 + n_k + n_v), slice(probs, 0, 1 + n_k, 1 + n_k + n_v), p_x,
                           opt.rho, fixed_V);

    OuterLoss out;
    out.consistency = opt.predictive == PredictiveLoss::ce ? ce_consistency(k.p_hat, v.p_hat, opt.detach_target)
                                                           : kl_divergence(k.p_hat, v.p_hat, opt.detach_target);
    out.discrepancy = opt.semantic == SemanticDistance::euclidean
                          ? feature_discrepancy_outer(k.features, v.features)
                          : cosine_distance(mean(k.features, 0), mean(v.features, 0));
    switch (opt.outer_terms) {
        case OuterTerms::both: out.total = add(out.consistency, out.discrepancy); break;
        case OuterTerms::consistency: out.total = out.consistency; break;
        case OuterTerms::discrepancy: out.total = out.discrepancy; break;
    }
    out.bundle_K = bundle_of(k);
    out.bundle_V = bundle_of(v);
    return out;
}

}  // namespace mtpt::losses
