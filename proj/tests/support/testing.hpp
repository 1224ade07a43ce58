#pragma once

// Shared oracles and fixtures for the unit tests and the acceptance suite.

#include <functional>
#include <string>
#include <vector>

#include "mtpt/grad_check.hpp"
#include "mtpt/losses.hpp"
#include "mtpt/model.hpp"
#include "mtpt/rng.hpp"
#include "mtpt/tensor.hpp"

namespace mtpt::testing {

using diff::ScalarFn;
using diff::Shape;
using diff::Tensor;

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0);

/// Random probability rows [n, k] (softmax of scaled normals).
Tensor random_probs(Rng& rng, std::size_t n, std::size_t k, double sharpness = 2.0);

/// One differentiable primitive wrapped into a scalar function of `point`.
struct PrimitiveCase {
    std::string name;
    Tensor point;
    ScalarFn fn;
};

/// Every tape primitive, with fresh random inputs and constants from `rng`.
std::vector<PrimitiveCase> primitive_cases(Rng& rng);

/// True when no bilinear sample position of `phis` [N,2,3] on an h x w grid
/// lies within reach of a pixel boundary under a +-step perturbation of any
/// single affine entry, so central differences see a smooth function.
bool warp_is_generic(const Tensor& phis, std::size_t h, std::size_t w, double step);

/// Affine batch near identity with a random rotation, scale and shift.
Tensor random_affines(Rng& rng, std::size_t n);

/// A model small enough for exhaustive finite differences.
model::ModelConfig tiny_config();

/// Max |analytic - numeric| / max(1, |numeric|) over every prompt entry of
/// `loss(net)`; the prompts in `theta` are perturbed in place and restored.
double prompt_grad_error(const model::FrozenModel& model, model::PromptState& theta,
                         const std::function<diff::Var(model::Network&)>& loss, double h = 1e-4);

/// Straight-line value-only reimplementation of the inner loss.
double inner_loss_oracle(const model::FrozenModel& model, const model::PromptState& theta, const Tensor& image,
                         const Tensor& phi_K, double rho);

/// Straight-line value-only reimplementation of the outer loss.
double outer_loss_oracle(const model::FrozenModel& model, const model::PromptState& theta, const Tensor& image,
                         const Tensor& phi_K, const Tensor& phi_V, double rho);

/// Brute-force selection: sort (entropy, index) pairs.
std::vector<std::size_t> brute_force_selection(const Tensor& probs, double rho);

}  // namespace mtpt::testing
