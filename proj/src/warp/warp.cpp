#include "mtpt/warp.hpp"

#include <cmath>
#include <stdexcept>

namespace mtpt::warp {

using diff::BackwardContext;
using diff::ShapeError;

AffineBatch::AffineBatch(Role r, Tensor p) : role(r), params(std::move(p)) {
    if (params.rank() != 3 || params.dim(1) != 2 || params.dim(2) != 3) {
        throw ShapeError("affine_batch", params.shape(), diff::Shape{0, 2, 3});
    }
    if (params.dim(0) == 0) throw std::invalid_argument("affine batch needs at least one view");
    if (!params.all_finite()) throw std::invalid_argument("affine batch holds non-finite entries");
}

AffineBatch AffineBatch::identity(std::size_t n, Role role) {
    return from_affines(role, std::vector<Affine>(n, kIdentityAffine));
}

AffineBatch AffineBatch::from_affines(Role role, const std::vector<Affine>& affines) {
    Tensor p({affines.size(), 2, 3});
    for (std::size_t i = 0; i < affines.size(); ++i) {
        std::copy(affines[i].begin(), affines[i].end(), p.data().begin() + static_cast<std::ptrdiff_t>(6 * i));
    }
    return AffineBatch(role, std::move(p));
}

Affine AffineBatch::at(std::size_t i) const {
    Affine m;
    std::copy_n(params.data().begin() + static_cast<std::ptrdiff_t>(6 * i), 6, m.begin());
    return m;
}

void AffineBatch::set(std::size_t i, const Affine& m) {
    std::copy(m.begin(), m.end(), params.data().begin() + static_cast<std::ptrdiff_t>(6 * i));
}

Tensor ViewBatch::view(std::size_t i) const {
    const std::size_t per = views.numel() / count();
    diff::Shape s(views.shape().begin() + 1, views.shape().end());
    auto begin = views.storage().begin() + static_cast<std::ptrdiff_t>(i * per);
    return Tensor(std::move(s), std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per)));
}

Affine rotation_affine(double gamma) {
    const double c = std::cos(gamma), s = std::sin(gamma);
    return {c, -s, 0.0, s, c, 0.0};
}

std::optional<Affine> crop_affine(double scale, double ratio, double flip, double i, double j, double width,
                                  double height) {
    const double area = scale * width * height;
    const double w = std::sqrt(area * ratio);
    const double h = std::sqrt(area / ratio);
    if (!(w > 0.0 && h > 0.0 && w <= width && h <= height)) return std::nullopt;
    if (i < 0.0 || j < 0.0 || i > height - h || j > width - w) return std::nullopt;
    const double tx = (2.0 * j + w) / width - 1.0;
    const double ty = (2.0 * i + h) / height - 1.0;
    return Affine{flip * w / width, 0.0, tx, 0.0, h / height, ty};
}

AffineBatch init_phi_V(Rng& rng, std::size_t n, const RotationInit& init) {
    if (n == 0) throw std::invalid_argument("init_phi_V: view count must be positive");
    if (!(init.gamma_lo > -std::numbers::pi && init.gamma_hi < std::numbers::pi && init.gamma_lo <= init.gamma_hi)) {
        throw std::invalid_argument("init_phi_V: gamma range must lie inside (-pi, pi)");
    }
    std::vector<Affine> out;
    out.reserve(n);
    for (std::size_t v = 0; v < n; ++v) out.push_back(rotation_affine(uniform(rng, init.gamma_lo, init.gamma_hi)));
    return AffineBatch::from_affines(Role::V, out);
}

AffineBatch init_phi_K(Rng& rng, std::size_t n, const CropInit& init, double width, double height) {
    if (n == 0) throw std::invalid_argument("init_phi_K: view count must be positive");
    std::vector<Affine> out;
    out.reserve(n);
    for (std::size_t v = 0; v < n; ++v) {
        const double flip = uniform01(rng) < init.flip_probability ? -1.0 : 1.0;
        Affine chosen = {flip, 0.0, 0.0, 0.0, 1.0, 0.0};
        for (int attempt = 0; attempt < init.max_attempts; ++attempt) {
            const double scale = uniform(rng, init.scale_lo, init.scale_hi);
            const double ratio = uniform(rng, init.ratio_lo, init.ratio_hi);
            const double w = std::sqrt(scale * width * height * ratio);
            const double h = std::sqrt(scale * width * height / ratio);
            if (w > width || h > height) continue;
            const double i = uniform(rng, 0.0, height - h);
            const double j = uniform(rng, 0.0, width - w);
            if (auto m = crop_affine(scale, ratio, flip, i, j, width, height)) {
                chosen = *m;
                break;
            }
        }
        out.push_back(chosen);
    }
    return AffineBatch::from_affines(Role::K, out);
}

namespace {

struct Geometry {
    std::size_t channels, height, width;
    // Output pixel (row q, col p) samples source pixel coordinates
    //   px = a*U + b*V*(W/H) + t_x*W/2 + (W/2 - 1/2)
    //   py = c*U*(H/W) + d*V + t_y*H/2 + (H/2 - 1/2)
    // with U = p + 1/2 - W/2 and V = q + 1/2 - H/2, which is the
    // normalized map u_p = -1 + (2p+1)/W rewritten in pixel units so the
    // identity matrix lands exactly on pixel centers.
    double u(std::size_t p) const { return static_cast<double>(p) + 0.5 - 0.5 * static_cast<double>(width); }
    double v(std::size_t q) const { return static_cast<double>(q) + 0.5 - 0.5 * static_cast<double>(height); }
    double w_over_h() const { return static_cast<double>(width) / static_cast<double>(height); }
    double h_over_w() const { return static_cast<double>(height) / static_cast<double>(width); }
    double half_w() const { return 0.5 * static_cast<double>(width); }
    double half_h() const { return 0.5 * static_cast<double>(height); }
};

struct Sample {
    long x0, y0;
    double fx, fy;
};

Sample locate(double px, double py) {
    // Far outside the image every tap is padding; clamp so the cast stays defined.
    px = std::clamp(px, -4.0, 1e6);
    py = std::clamp(py, -4.0, 1e6);
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    return {static_cast<long>(fx0), static_cast<long>(fy0), px - fx0, py - fy0};
}

}  // namespace

Var warp(Var image, Var phis) {
    if (image.tape() != phis.tape()) throw diff::DiffError("warp", "operands belong to different tapes");
    const auto& is = image.shape();
    const auto& ps = phis.shape();
    if (is.size() != 3) throw ShapeError("warp", "image must be [C,H,W], got " + diff::shape_str(is));
    if (ps.size() != 3 || ps[1] != 2 || ps[2] != 3) throw ShapeError("warp", is, ps);
    if (is[1] < 4 || is[2] < 4) throw ShapeError("warp", "image side must be at least 4");
    const Geometry geo{is[0], is[1], is[2]};
    const std::size_t n = ps[0];
    const std::size_t plane = geo.height * geo.width;

    Tensor out({n, geo.channels, geo.height, geo.width});
    const double* img = image.value().data().data();
    const double* phi = phis.value().data().data();
    double* o = out.data().data();
    const long W = static_cast<long>(geo.width), H = static_cast<long>(geo.height);

    for (std::size_t k = 0; k < n; ++k) {
        const double* m = phi + 6 * k;
        for (std::size_t q = 0; q < geo.height; ++q) {
            const double vv = geo.v(q);
            for (std::size_t p = 0; p < geo.width; ++p) {
                const double uu = geo.u(p);
                const double px = m[0] * uu + m[1] * (vv * geo.w_over_h()) + m[2] * geo.half_w() + (geo.half_w() - 0.5);
                const double py = m[3] * (uu * geo.h_over_w()) + m[4] * vv + m[5] * geo.half_h() + (geo.half_h() - 0.5);
                const Sample s = locate(px, py);
                const bool x0in = s.x0 >= 0 && s.x0 < W, x1in = s.x0 + 1 >= 0 && s.x0 + 1 < W;
                const bool y0in = s.y0 >= 0 && s.y0 < H, y1in = s.y0 + 1 >= 0 && s.y0 + 1 < H;
                const double w00 = (1.0 - s.fx) * (1.0 - s.fy), w10 = s.fx * (1.0 - s.fy);
                const double w01 = (1.0 - s.fx) * s.fy, w11 = s.fx * s.fy;
                for (std::size_t c = 0; c < geo.channels; ++c) {
                    const double* src = img + c * plane;
                    double acc = 0.0;
                    if (y0in && x0in) acc += w00 * src[s.y0 * W + s.x0];
                    if (y0in && x1in) acc += w10 * src[s.y0 * W + s.x0 + 1];
                    if (y1in && x0in) acc += w01 * src[(s.y0 + 1) * W + s.x0];
                    if (y1in && x1in) acc += w11 * src[(s.y0 + 1) * W + s.x0 + 1];
                    o[(k * geo.channels + c) * plane + q * geo.width + p] = acc;
                }
            }
        }
    }

    return image.tape()->record("warp", {image, phis}, std::move(out), [geo, n, plane](BackwardContext& ctx) {
        const double* img = ctx.input(0).data().data();
        const double* phi = ctx.input(1).data().data();
        const double* g = ctx.out_grad().data();
        auto gimg = ctx.input_grad(0);
        auto gphi = ctx.input_grad(1);
        const long W = static_cast<long>(geo.width), H = static_cast<long>(geo.height);
        auto tap = [&](std::size_t c, long y, long x) -> double {
            if (x < 0 || x >= W || y < 0 || y >= H) return 0.0;
            return img[c * plane + static_cast<std::size_t>(y * W + x)];
        };
        auto scatter = [&](std::size_t c, long y, long x, double value) {
            if (x < 0 || x >= W || y < 0 || y >= H) return;
            gimg[c * plane + static_cast<std::size_t>(y * W + x)] += value;
        };
        for (std::size_t k = 0; k < n; ++k) {
            const double* m = phi + 6 * k;
            double acc[6] = {0, 0, 0, 0, 0, 0};
            for (std::size_t q = 0; q < geo.height; ++q) {
                const double vv = geo.v(q);
                for (std::size_t p = 0; p < geo.width; ++p) {
                    const double uu = geo.u(p);
                    const double px =
                        m[0] * uu + m[1] * (vv * geo.w_over_h()) + m[2] * geo.half_w() + (geo.half_w() - 0.5);
                    const double py =
                        m[3] * (uu * geo.h_over_w()) + m[4] * vv + m[5] * geo.half_h() + (geo.half_h() - 0.5);
                    const Sample s = locate(px, py);
                    double gpx = 0.0, gpy = 0.0;
                    for (std::size_t c = 0; c < geo.channels; ++c) {
                        const double go = g[(k * geo.channels + c) * plane + q * geo.width + p];
                        if (go == 0.0) continue;
                        const double v00 = tap(c, s.y0, s.x0), v10 = tap(c, s.y0, s.x0 + 1);
                        const double v01 = tap(c, s.y0 + 1, s.x0), v11 = tap(c, s.y0 + 1, s.x0 + 1);
                        gpx += go * ((1.0 - s.fy) * (v10 - v00) + s.fy * (v11 - v01));
                        gpy += go * ((1.0 - s.fx) * (v01 - v00) + s.fx * (v11 - v10));
                        if (!gimg.empty()) {
                            scatter(c, s.y0, s.x0, go * (1.0 - s.fx) * (1.0 - s.fy));
                            scatter(c, s.y0, s.x0 + 1, go * s.fx * (1.0 - s.fy));
                            scatter(c, s.y0 + 1, s.x0, go * (1.0 - s.fx) * s.fy);
                            scatter(c, s.y0 + 1, s.x0 + 1, go * s.fx * s.fy);
                        }
                    }
                    acc[0] += gpx * uu;
                    acc[1] += gpx * vv * geo.w_over_h();
                    acc[2] += gpx * geo.half_w();
                    acc[3] += gpy * uu * geo.h_over_w();
                    acc[4] += gpy * vv;
                    acc[5] += gpy * geo.half_h();
                }
            }
            if (!gphi.empty()) {
                for (int e = 0; e < 6; ++e) gphi[6 * k + static_cast<std::size_t>(e)] += acc[e];
            }
        }
    });
}

ViewBatch warp_image(const Tensor& image, const AffineBatch& phis) {
    diff::Tape tape;
    Var out = warp(tape.constant(image), tape.constant(phis.params));
    return {out.value()};
}

void ema_update(AffineBatch& phi_V, const AffineBatch& phi_K, double alpha) {
    if (phi_V.params.shape() != phi_K.params.shape()) {
        throw ShapeError("ema_update", phi_V.params.shape(), phi_K.params.shape());
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
    auto v = phi_V.params.data();
    auto k = phi_K.params.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = alpha * v[i] + (1.0 - alpha) * k[i];
}

double distance(const AffineBatch& a, const AffineBatch& b) {
    if (a.params.shape() != b.params.shape()) throw ShapeError("distance", a.params.shape(), b.params.shape());
    double acc = 0.0;
    auto x = a.params.data(), y = b.params.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(acc);
}

}  // namespace mtpt::warp
