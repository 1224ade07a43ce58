#include "mtpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mtpt::diff {

namespace kernel {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernel

namespace {

Tape& tape_of(Var a) {
    if (a.tape() == nullptr) throw DiffError("op", "variable is not bound to a tape");
    return *a.tape();
}

Tape& same_tape(const char* op, Var a, Var b) {
    if (a.tape() != b.tape() || a.tape() == nullptr) throw DiffError(op, "operands belong to different tapes");
    return *a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <typename Fwd, typename Deriv>
Var unary(const char* op, Var a, Fwd fwd, Deriv deriv) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    auto o = out.data();
    auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
    return tape_of(a).record(op, {a}, std::move(out), [deriv](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        auto xin = ctx.input(0).data();
        auto y = ctx.output().data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xin[i], y[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = same_tape("add", a, b);
    require_same_shape("add", a, b);
    Tensor out(a.shape());
    auto x = a.value().data(), y = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    return t.record("add", {a, b}, std::move(out), [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        for (std::size_t k = 0; k < 2; ++k) {
            auto gi = ctx.input_grad(k);
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    Tape& t = same_tape("sub", a, b);
    require_same_shape("sub", a, b);
    Tensor out(a.shape());
    auto x = a.value().data(), y = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    return t.record("sub", {a, b}, std::move(out), [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        auto gb = ctx.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
}

Var mul(Var a, Var b) {
    Tape& t = same_tape("mul", a, b);
    require_same_shape("mul", a, b);
    Tensor out(a.shape());
    auto x = a.value().data(), y = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    return t.record("mul", {a, b}, std::move(out), [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto x = ctx.input(0).data(), y = ctx.input(1).data();
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
        auto gb = ctx.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * x[i];
    });
}

Var div(Var a, Var b) {
    Tape& t = same_tape("div", a, b);
    require_same_shape("div", a, b);
    Tensor out(a.shape());
    auto x = a.value().data(), y = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] / y[i];
    return t.record("div", {a, b}, std::move(out), [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto y = ctx.input(1).data();
        auto q = ctx.output().data();
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / y[i];
        auto gb = ctx.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * q[i] / y[i];
    });
}

Var scale(Var a, double k) {
    return unary("scale", a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Var add_scalar(Var a, double k) {
    return unary("add_scalar", a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
    return unary(
        "log", a, [](double x) { return std::log(std::max(x, kLogFloor)); },
        [](double x, double) { return x < kLogFloor ? 0.0 : 1.0 / x; });
}

Var pow(Var a, double exponent) {
    return unary(
        "pow", a, [exponent](double x) { return std::pow(x, exponent); },
        [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Var tanh(Var a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var matmul(Var a, Var b) {
    Tape& t = same_tape("matmul", a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    Shape out_shape;
    if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
        m = sa[0], k = sa[1], n = sb[1];
        out_shape = {m, n};
    } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
        batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
        out_shape = {batch, m, n};
    } else {
        throw ShapeError("matmul", sa, sb);
    }
    Tensor out(out_shape);
    const double* x = a.value().data().data();
    const double* y = b.value().data().data();
    double* o = out.data().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        kernel::gemm_nn(x + bi * m * k, y + bi * k * n, o + bi * m * n, m, k, n);
    }
    return t.record("matmul", {a, b}, std::move(out), [batch, m, k, n](BackwardContext& ctx) {
        const double* g = ctx.out_grad().data();
        auto ga = ctx.input_grad(0);
        if (!ga.empty()) {
            const double* y = ctx.input(1).data().data();
            for (std::size_t bi = 0; bi < batch; ++bi) {
                kernel::gemm_nt(g + bi * m * n, y + bi * k * n, ga.data() + bi * m * k, m, n, k);
            }
        }
        auto gb = ctx.input_grad(1);
        if (!gb.empty()) {
            const double* x = ctx.input(0).data().data();
            for (std::size_t bi = 0; bi < batch; ++bi) {
                kernel::gemm_tn(x + bi * m * k, g + bi * m * n, gb.data() + bi * k * n, k, m, n);
            }
        }
    });
}

Var transpose(Var a) {
    const Shape& s = a.shape();
    if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose", "expects rank 2 or 3, got " + shape_str(s));
    const std::size_t batch = s.size() == 3 ? s[0] : 1;
    const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    Tensor out(out_shape);
    auto x = a.value().data();
    auto o = out.data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const std::size_t off = bi * rows * cols;
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) o[off + j * rows + i] = x[off + i * cols + j];
        }
    }
    return tape_of(a).record("transpose", {a}, std::move(out), [batch, rows, cols](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const std::size_t off = bi * rows * cols;
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) gx[off + i * cols + j] += g[off + j * rows + i];
            }
        }
    });
}

Var sum(Var a) {
    double acc = 0.0;
    for (double v : a.value().data()) acc += v;
    return tape_of(a).record("sum", {a}, Tensor::scalar(acc), [](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0];
        for (double& gx : ctx.input_grad(0)) gx += g;
    });
}

Var sum(Var a, std::size_t axis) {
    const AxisSplit s = split_axis("sum_axis", a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(out_shape);
    auto x = a.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < s.outer; ++i) {
        for (std::size_t e = 0; e < s.extent; ++e) {
            const double* src = x.data() + (i * s.extent + e) * s.inner;
            double* dst = o.data() + i * s.inner;
            for (std::size_t j = 0; j < s.inner; ++j) dst[j] += src[j];
        }
    }
    return tape_of(a).record("sum_axis", {a}, std::move(out), [s](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < s.outer; ++i) {
            for (std::size_t e = 0; e < s.extent; ++e) {
                double* dst = gx.data() + (i * s.extent + e) * s.inner;
                const double* src = g.data() + i * s.inner;
                for (std::size_t j = 0; j < s.inner; ++j) dst[j] += src[j];
            }
        }
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().numel());
    if (n == 0) throw ShapeError("mean", "empty tensor");
    return scale(sum(a), 1.0 / n);
}

Var mean(Var a, std::size_t axis) {
    const AxisSplit s = split_axis("mean_axis", a.shape(), axis);
    if (s.extent == 0) throw ShapeError("mean_axis", "empty axis");
    return scale(sum(a, axis), 1.0 / static_cast<double>(s.extent));
}

Var softmax(Var a) {
    const Shape& shape = a.shape();
    if (shape.empty()) throw ShapeError("softmax", "expects rank >= 1");
    const std::size_t width = shape.back();
    const std::size_t rows = width == 0 ? 0 : a.value().numel() / width;
    Tensor out(shape);
    auto x = a.value().data();
    auto o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * width;
        double* orow = o.data() + r * width;
        const double mx = *std::max_element(xr, xr + width);
        double z = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        for (std::size_t j = 0; j < width; ++j) orow[j] /= z;
    }
    return tape_of(a).record("softmax", {a}, std::move(out), [rows, width](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        auto y = ctx.output().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * width;
            double dot = 0.0;
            for (std::size_t j = 0; j < width; ++j) dot += g[off + j] * y[off + j];
            for (std::size_t j = 0; j < width; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
        }
    });
}

Var l2_norm(Var v) {
    if (v.shape().size() != 1) throw ShapeError("l2_norm", "expects a vector, got " + shape_str(v.shape()));
    double acc = 0.0;
    for (double x : v.value().data()) acc += x * x;
    return tape_of(v).record("l2_norm", {v}, Tensor::scalar(std::sqrt(acc)), [](BackwardContext& ctx) {
        const double norm = ctx.output()[0];
        if (norm == 0.0) return;
        const double g = ctx.out_grad()[0];
        auto x = ctx.input(0).data();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * x[i] / norm;
    });
}

Var cosine_similarity(Var a, Var b) {
    Tape& t = same_tape("cosine_similarity", a, b);
    if (a.shape().size() != 1 || a.shape() != b.shape()) throw ShapeError("cosine_similarity", a.shape(), b.shape());
    auto x = a.value().data(), y = b.value().data();
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    nx = std::sqrt(nx);
    ny = std::sqrt(ny);
    if (nx == 0.0 || ny == 0.0) throw NonFiniteError("cosine_similarity", 0);
    const double c = dot / (nx * ny);
    return t.record("cosine_similarity", {a, b}, Tensor::scalar(c), [nx, ny, c](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0];
        auto x = ctx.input(0).data(), y = ctx.input(1).data();
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (y[i] / (nx * ny) - c * x[i] / (nx * nx));
        auto gb = ctx.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * (x[i] / (nx * ny) - c * y[i] / (ny * ny));
    });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat", "no inputs");
    Tape& t = tape_of(parts[0]);
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> extents;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw DiffError("concat", "operands belong to different tapes");
        Shape probe = p.shape();
        if (probe.size() != first.size()) throw ShapeError("concat", first, probe);
        for (std::size_t i = 0; i < probe.size(); ++i) {
            if (i != axis && probe[i] != first[i]) throw ShapeError("concat", first, probe);
        }
        extents.push_back(probe[axis]);
        out_shape[axis] += probe[axis];
    }
    const AxisSplit s = split_axis("concat", out_shape, axis);
    Tensor out(out_shape);
    auto o = out.data();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto x = parts[p].value().data();
        const std::size_t chunk = extents[p] * s.inner;
        for (std::size_t i = 0; i < s.outer; ++i) {
            std::copy_n(x.data() + i * chunk, chunk, o.data() + i * s.extent * s.inner + offset * s.inner);
        }
        offset += extents[p];
    }
    return t.record("concat", parts, std::move(out), [s, extents](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
            auto gp = ctx.input_grad(p);
            const std::size_t chunk = extents[p] * s.inner;
            if (!gp.empty()) {
                for (std::size_t i = 0; i < s.outer; ++i) {
                    const double* src = g.data() + i * s.extent * s.inner + offset * s.inner;
                    double* dst = gp.data() + i * chunk;
                    for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                }
            }
            offset += extents[p];
        }
    });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    const AxisSplit s = split_axis("slice", a.shape(), axis);
    if (begin > end || end > s.extent) {
        throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                      ") out of bounds for " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    Tensor out(out_shape);
    const std::size_t chunk = (end - begin) * s.inner;
    auto x = a.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < s.outer; ++i) {
        std::copy_n(x.data() + (i * s.extent + begin) * s.inner, chunk, o.data() + i * chunk);
    }
    return tape_of(a).record("slice", {a}, std::move(out), [s, begin, chunk](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < s.outer; ++i) {
            double* dst = gx.data() + (i * s.extent + begin) * s.inner;
            const double* src = g.data() + i * chunk;
            for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
    });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return tape_of(a).record("reshape", {a}, std::move(out), [](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

Var gather(Var a, std::vector<std::size_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) {
        throw ShapeError("gather", "index count " + std::to_string(index.size()) + " does not fill " +
                                       shape_str(out_shape));
    }
    auto x = a.value().data();
    Tensor out(std::move(out_shape));
    auto o = out.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.size()) throw ShapeError("gather", "index out of range");
        o[i] = x[index[i]];
    }
    return tape_of(a).record("gather", {a}, std::move(out), [index = std::move(index)](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
    });
}

Var broadcast(Var scalar, Shape shape) {
    if (scalar.value().numel() != 1) throw ShapeError("broadcast", scalar.shape(), shape);
    Tensor out = Tensor::filled(std::move(shape), scalar.value()[0]);
    return tape_of(scalar).record("broadcast", {scalar}, std::move(out), [](BackwardContext& ctx) {
        double acc = 0.0;
        for (double g : ctx.out_grad()) acc += g;
        ctx.input_grad(0)[0] += acc;
    });
}

Var broadcast_rows(Var v, std::size_t n) {
    if (v.shape().size() != 1) throw ShapeError("broadcast_rows", "expects a vector, got " + shape_str(v.shape()));
    const std::size_t d = v.shape()[0];
    Tensor out({n, d});
    auto x = v.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(x.begin(), x.end(), o.begin() + static_cast<std::ptrdiff_t>(i * d));
    return tape_of(v).record("broadcast_rows", {v}, std::move(out), [n, d](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) gx[j] += g[i * d + j];
        }
    });
}

Var broadcast_cols(Var v, std::size_t d) {
    if (v.shape().size() != 1) throw ShapeError("broadcast_cols", "expects a vector, got " + shape_str(v.shape()));
    const std::size_t n = v.shape()[0];
    Tensor out({n, d});
    auto x = v.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) o[i * d + j] = x[i];
    }
    return tape_of(v).record("broadcast_cols", {v}, std::move(out), [n, d](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j];
            gx[i] += acc;
        }
    });
}

}  // namespace mtpt::diff
