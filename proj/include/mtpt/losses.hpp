#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mtpt/model.hpp"
#include "mtpt/tape.hpp"

namespace mtpt::losses {

using diff::Tensor;
using diff::Var;

/// Views kept by confidence selection: the k lowest-entropy views, ties
/// broken by lower index. Treated as a constant under differentiation.
struct Selection {
    std::vector<bool> mask;
    std::vector<std::size_t> indices;  // ascending entropy order
    std::vector<double> entropies;     // per view
    double delta = 0.0;                // k-th smallest entropy
    std::size_t k = 0;
};

/// max(1, floor(rho * n)).
std::size_t selection_count(std::size_t n, double rho);

/// probs: [N, N_c].
Selection select_confident(const Tensor& probs, double rho);

/// Mean of the selected rows of `probs` [N, N_c] -> [N_c].
Var selected_mean(Var probs, const Selection& sel);

/// -sum p log p, with the log floor. Throws on negative entries or a sum
/// more than 1e-6 away from 1.
Var entropy(Var p);
double entropy_value(std::span<const double> p);

/// (P_x + P_tilde) / 2.
Var composite_prob(Var p_x, Var p_tilde);

/// ||f(x) - mean_i f(view_i)||, mean over all N views.
Var feature_discrepancy_inner(Var x_feature, Var view_features);

/// ||mean(K) - mean(V)||.
Var feature_discrepancy_outer(Var k_features, Var v_features);

/// -sum target * log(pred). With `detach_target` the target gets no gradient.
Var ce_consistency(Var target, Var pred, bool detach_target = true);

/// sum p * (log p - log q).
Var kl_divergence(Var p, Var q, bool detach_target = true);

/// 1 - cos(a, b).
Var cosine_distance(Var a, Var b);

enum class PredictiveLoss { ce, kl };
enum class SemanticDistance { euclidean, cosine };
enum class InnerTerms { both, entropy, discrepancy };
enum class OuterTerms { both, consistency, discrepancy };

std::string_view name(PredictiveLoss v);
std::string_view name(SemanticDistance v);
std::string_view name(InnerTerms v);
std::string_view name(OuterTerms v);
PredictiveLoss parse_predictive(std::string_view s);
SemanticDistance parse_semantic(std::string_view s);
InnerTerms parse_inner_terms(std::string_view s);
OuterTerms parse_outer_terms(std::string_view s);

struct LossOptions {
    double rho = 0.1;
    PredictiveLoss predictive = PredictiveLoss::ce;
    SemanticDistance semantic = SemanticDistance::euclidean;
    InnerTerms inner_terms = InnerTerms::both;
    OuterTerms outer_terms = OuterTerms::both;
    bool detach_target = true;
};

/// Values of one branch's probabilities after selection.
struct ProbBundle {
    Tensor view_probs;  // [N, N_c]
    Selection selection;
    Tensor p_tilde;  // [N_c]
    Tensor p_hat;    // [N_c]
};

struct InnerLoss {
    Var total;
    Var entropy;
    Var discrepancy;
    Var p_x;
    ProbBundle bundle;
};

/// H(composite over phi_K views) + inner discrepancy. `image` is [C,S,S],
/// `phi_K` [N,2,3]. Pass `fixed` to reuse a selection instead of
/// recomputing it (finite-difference checks).
InnerLoss inner_loss(model::Network& net, Var image, Var phi_K, const LossOptions& opt,
                     const Selection* fixed = nullptr);

struct OuterLoss {
    Var total;
    Var consistency;
    Var discrepancy;
    ProbBundle bundle_K;
    ProbBundle bundle_V;
};

/// CE(P_hat_K -> P_hat_V) + outer discrepancy, selection applied per branch.
OuterLoss outer_loss(model::Network& net, Var image, Var phi_K, Var phi_V, const LossOptions& opt,
                     const Selection* fixed_K = nullptr, const Selection* fixed_V = nullptr);

}  // namespace mtpt::losses
