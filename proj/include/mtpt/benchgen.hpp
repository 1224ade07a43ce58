#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpt/rng.hpp"
#include "mtpt/tensor.hpp"

namespace mtpt::bench {

using diff::Tensor;

inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kImageSize = 32;

enum class Family : int { disk, square, triangle, cross, ring, stripes, checker, two_blob };

std::string_view family_name(Family f);

enum class Background : int { flat, gradient, noise };

std::string_view background_name(Background b);
Background parse_background(std::string_view name);

/// Describes one domain: geometric and photometric shifts applied on top of
/// the base renderer. A spec with zero shifts renders the source domain.
struct DomainSpec {
    std::string name = "source";
    double rotation_max_deg = 0.0;  // global rotation drawn from [-max, max]
    double scale_lo = 1.0;
    double scale_hi = 1.0;
    double brightness_max = 0.0;  // offset drawn from [-max, max]
    double contrast_lo = 1.0;
    double contrast_hi = 1.0;
    double noise_sigma = 0.0;
    Background background = Background::gradient;
    std::size_t samples_per_class = 50;

    bool has_geometric() const;
    bool has_photometric() const;
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);

/// The shipped suite: source, geo-mild, geo-hard, photo, mixed.
std::vector<DomainSpec> builtin_suite();
DomainSpec builtin_domain(std::string_view name);

/// Per-sample appearance of the base render.
struct StyleParams {
    double cx = 0.0, cy = 0.0;  // object center, normalized coordinates
    double size = 0.55;         // object radius, normalized
    double angle = 0.0;         // intrinsic orientation jitter, radians
    std::array<double, 3> fg{};
    std::array<double, 3> bg{};
    std::array<double, 3> bg2{};
    double gradient_angle = 0.0;
    std::uint64_t texture_seed = 0;
};

StyleParams sample_style(Rng& rng);

/// Draws made by a domain's shift, recorded in the manifest.
struct ShiftParams {
    double rotation = 0.0;  // radians
    double scale = 1.0;
    double brightness = 0.0;
    double contrast = 1.0;
    std::uint64_t noise_seed = 0;
};

ShiftParams sample_shift(const DomainSpec& spec, Rng& rng);

struct LabeledImage {
    Tensor image;  // [3, 32, 32], values in [0, 1]
    int label = 0;
    std::string domain;
    std::uint64_t seed = 0;
};

/// Renders class `class_id` with the given style (no domain shift). `rng`
/// drives the background texture.
LabeledImage render_class(int class_id, const StyleParams& style, Rng& rng,
                          Background background = Background::gradient);

/// Renders one sample of `spec`; the base draw depends only on (class, seed),
/// so matched seeds pair up across domains.
LabeledImage render_sample(const DomainSpec& spec, int class_id, std::uint64_t sample_seed,
                           nlohmann::json* manifest_entry = nullptr);

struct Dataset {
    DomainSpec spec;
    std::uint64_t seed = 0;
    std::vector<LabeledImage> samples;

    std::size_t size() const { return samples.size(); }
};

/// Exactly `n_per_class` samples per class, classes interleaved so every
/// prefix of length k * kNumClasses is balanced.
Dataset gen_split(const DomainSpec& spec, std::size_t n_per_class, std::uint64_t seed,
                  nlohmann::json* manifest = nullptr);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace mtpt::bench
