#include "mtpt/optimizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mtpt::optim {

Kind parse_kind(std::string_view name) {
    if (name == "adamw") return Kind::adamw;
    if (name == "sgd") return Kind::sgd;
    throw std::invalid_argument("unknown optimizer kind: " + std::string(name));
}

std::string_view kind_name(Kind k) { return k == Kind::adamw ? "adamw" : "sgd"; }

void step(std::span<double> params, std::span<const double> grads, State& state, Kind kind, double rate,
          const AdamWParams& hp) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("optimizer step: " + std::to_string(params.size()) + " params vs " +
                                    std::to_string(grads.size()) + " grads");
    }
    if (kind == Kind::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= rate * grads[i];
        return;
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("optimizer step: state does not match parameter size");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hp.beta1, t);
    const double c2 = 1.0 - std::pow(hp.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= rate * (m_hat / (std::sqrt(v_hat) + hp.eps) + hp.weight_decay * params[i]);
    }
}

}  // namespace mtpt::optim
