#pragma once

#include <array>
#include <cstddef>
#include <numbers>
#include <optional>

#include "mtpt/rng.hpp"
#include "mtpt/tape.hpp"
#include "mtpt/tensor.hpp"

namespace mtpt::warp {

using diff::Tensor;
using diff::Var;

/// Which branch a batch of augmentations belongs to.
enum class Role { K, V };

/// One 2x3 affine matrix, row-major: {a, b, t_x, c, d, t_y}.
using Affine = std::array<double, 6>;

inline constexpr Affine kIdentityAffine = {1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

/// N learnable 2x3 matrices in normalized coordinates. Each matrix maps an
/// output pixel coordinate to the source coordinate it samples from.
struct AffineBatch {
    Role role = Role::K;
    Tensor params;  // [N, 2, 3]

    AffineBatch() = default;
    AffineBatch(Role r, Tensor p);

    static AffineBatch identity(std::size_t n, Role role);
    static AffineBatch from_affines(Role role, const std::vector<Affine>& affines);

    std::size_t size() const { return params.dim(0); }
    Affine at(std::size_t i) const;
    void set(std::size_t i, const Affine& m);
};

/// N warped copies of one source image.
struct ViewBatch {
    Tensor views;  // [N, C, H, W]
    std::size_t count() const { return views.dim(0); }
    Tensor view(std::size_t i) const;
};

/// Rotation by `gamma` radians: [[cos, -sin, 0], [sin, cos, 0]].
Affine rotation_affine(double gamma);

/// Random-resized-crop as an affine matrix for a crop of relative area
/// `scale` and aspect `ratio` with top-left corner (i, j) in pixels.
/// Returns nullopt when the crop does not fit inside width x height or
/// the corner puts it out of bounds.
std::optional<Affine> crop_affine(double scale, double ratio, double flip, double i, double j, double width,
                                  double height);

struct RotationInit {
    double gamma_lo = 0.0;
    double gamma_hi = std::numbers::pi / 6.0;
};

struct CropInit {
    double scale_lo = 0.2;
    double scale_hi = 1.0;
    double ratio_lo = 3.0 / 4.0;
    double ratio_hi = 4.0 / 3.0;
    double flip_probability = 0.5;
    int max_attempts = 10;
};

/// Rotation-task initializer for the V branch.
AffineBatch init_phi_V(Rng& rng, std::size_t n, const RotationInit& init = {});

/// Resized-crop-and-flip initializer for the K branch. A view that finds no
/// valid crop in `max_attempts` falls back to the full image (keeping its flip).
AffineBatch init_phi_K(Rng& rng, std::size_t n, const CropInit& init, double width, double height);

/// Differentiable bilinear inverse warp with zero padding.
/// image [C,H,W], phis [N,2,3] -> [N,C,H,W].
Var warp(Var image, Var phis);

ViewBatch warp_image(const Tensor& image, const AffineBatch& phis);

/// phi_V <- alpha * phi_V + (1 - alpha) * phi_K.
void ema_update(AffineBatch& phi_V, const AffineBatch& phi_K, double alpha);

/// Frobenius norm of the elementwise difference.
double distance(const AffineBatch& a, const AffineBatch& b);

}  // namespace mtpt::warp
