#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace mtpt::optim {

enum class Kind { adamw, sgd };

Kind parse_kind(std::string_view name);
std::string_view kind_name(Kind k);

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Moment buffers for one parameter tensor.
struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;

    explicit State(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One in-place update of `params` given `grads`.
///
/// adamw: bias-corrected adaptive moments with decoupled weight decay,
///   p <- p - rate * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
/// sgd: p <- p - rate * g
void step(std::span<double> params, std::span<const double> grads, State& state, Kind kind, double rate,
          const AdamWParams& hp = {});

}  // namespace mtpt::optim
