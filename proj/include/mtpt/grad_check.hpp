#pragma once

#include <cstddef>
#include <functional>

#include "mtpt/tape.hpp"

namespace mtpt::diff {

/// Scalar-valued function of one tensor, expressed on a tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    Tensor analytic;
    Tensor numeric;
};

/// Compares reverse-mode gradients of `fn` at `point` against central
/// differences with step `h`. Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
/// Throws NonFiniteError naming the coordinate if any evaluation is not finite.
GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double h = 1e-4);

double grad_check(const ScalarFn& fn, const Tensor& point, double h = 1e-4);

}  // namespace mtpt::diff
