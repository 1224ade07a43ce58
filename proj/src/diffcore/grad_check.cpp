#include "mtpt/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mtpt::diff {

namespace {

double evaluate(const ScalarFn& fn, Tensor point) {
    Tape tape;
    Var x = tape.constant(std::move(point));
    return fn(tape, x).value().item();
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double h) {
    GradCheckReport report;

    Tensor x(point.shape(), point.storage());
    x.set_requires_grad(true);
    {
        Tape tape;
        Var root = fn(tape, tape.leaf(x));
        tape.backward(root);
    }
    report.analytic = Tensor(x.shape(), std::vector<double>(x.grad().begin(), x.grad().end()));
    report.numeric = Tensor(x.shape());

    for (std::size_t i = 0; i < point.numel(); ++i) {
        Tensor plus(point.shape(), point.storage());
        Tensor minus(point.shape(), point.storage());
        plus[i] += h;
        minus[i] -= h;
        double fp = 0.0, fm = 0.0;
        try {
            fp = evaluate(fn, std::move(plus));
            fm = evaluate(fn, std::move(minus));
        } catch (const NonFiniteError&) {
            throw NonFiniteError("grad_check", i);
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic = report.analytic[i];
        if (!std::isfinite(numeric) || !std::isfinite(analytic)) throw NonFiniteError("grad_check", i);
        report.numeric[i] = numeric;
        const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
        if (err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    return report;
}

double grad_check(const ScalarFn& fn, const Tensor& point, double h) {
    return grad_check_report(fn, point, h).max_relative_error;
}

}  // namespace mtpt::diff
