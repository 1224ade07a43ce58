#include "mtpt/benchgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "mtpt/binio.hpp"

namespace mtpt::bench {

namespace {

constexpr int kSuper = 4;  // supersamples per pixel side
constexpr std::uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'M', 'T', 'P', 'D'};

std::array<double, 3> hsv(double h, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h, 1.0) * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    std::array<double, 3> rgb{};
    switch (static_cast<int>(hp)) {
        case 0: rgb = {c, x, 0}; break;
        case 1: rgb = {x, c, 0}; break;
        case 2: rgb = {0, c, x}; break;
        case 3: rgb = {0, x, c}; break;
        case 4: rgb = {x, 0, c}; break;
        default: rgb = {c, 0, x}; break;
    }
    const double m = v - c;
    for (double& ch : rgb) ch += m;
    return rgb;
}

// Membership of object-space point (x, y) in family `f` of radius r.
bool inside(Family f, double x, double y, double r) {
    const double ax = std::abs(x), ay = std::abs(y);
    const double rad = std::hypot(x, y);
    switch (f) {
        case Family::disk:
            return rad <= r;
        case Family::square:
            return std::max(ax, ay) <= 0.8 * r;
        case Family::triangle: {
            // Upright equilateral triangle, circumradius r: three half-planes at distance r/2.
            constexpr double s = 0.8660254037844386;
            return -y <= 0.5 * r && (s * x + 0.5 * y) <= 0.5 * r && (-s * x + 0.5 * y) <= 0.5 * r;
        }
        case Family::cross:
            return (ax <= 0.28 * r && ay <= r) || (ay <= 0.28 * r && ax <= r);
        case Family::ring:
            return rad <= r && rad >= 0.55 * r;
        case Family::stripes: {
            if (std::max(ax, ay) > 0.85 * r) return false;
            const long band = static_cast<long>(std::floor((y + r) / (0.34 * r)));
            return band % 2 == 0;
        }
        case Family::checker: {
            if (std::max(ax, ay) > 0.85 * r) return false;
            const long cx = static_cast<long>(std::floor((x + r) / (0.45 * r)));
            const long cy = static_cast<long>(std::floor((y + r) / (0.45 * r)));
            return (cx + cy) % 2 == 0;
        }
        case Family::two_blob:
            return std::hypot(x - 0.55 * r, y) <= 0.42 * r || std::hypot(x + 0.55 * r, y) <= 0.42 * r;
    }
    return false;
}

double to_norm(std::size_t pixel, int sub) {
    const double pos = static_cast<double>(pixel) + (static_cast<double>(sub) + 0.5) / kSuper;
    return -1.0 + 2.0 * pos / static_cast<double>(kImageSize);
}

Tensor render(Family family, const StyleParams& st, Background background, const ShiftParams* shift) {
    Tensor img({kChannels, kImageSize, kImageSize});
    auto data = img.data();
    const std::size_t plane = kImageSize * kImageSize;
    const double ca = std::cos(st.angle), sa = std::sin(st.angle);
    const double cr = shift ? std::cos(shift->rotation) : 1.0;
    const double sr = shift ? std::sin(shift->rotation) : 0.0;

    Rng texture(st.texture_seed);
    const double gx = std::cos(st.gradient_angle), gy = std::sin(st.gradient_angle);

    for (std::size_t row = 0; row < kImageSize; ++row) {
        for (std::size_t col = 0; col < kImageSize; ++col) {
            int hits = 0;
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    double px = to_norm(col, sx), py = to_norm(row, sy);
                    if (shift) {
                        // Scene rotated and scaled about the image center.
                        const double qx = (cr * px + sr * py) / shift->scale;
                        const double qy = (-sr * px + cr * py) / shift->scale;
                        px = qx;
                        py = qy;
                    }
                    const double dx = px - st.cx, dy = py - st.cy;
                    const double ox = ca * dx + sa * dy, oy = -sa * dx + ca * dy;
                    hits += inside(family, ox, oy, st.size) ? 1 : 0;
                }
            }
            const double coverage = static_cast<double>(hits) / (kSuper * kSuper);

            std::array<double, 3> bg = st.bg;
            if (background == Background::gradient) {
                const double u = to_norm(col, 0), v = to_norm(row, 0);
                const double t = std::clamp(0.5 + 0.5 * (gx * u + gy * v), 0.0, 1.0);
                for (int c = 0; c < 3; ++c) bg[c] = (1.0 - t) * st.bg[c] + t * st.bg2[c];
            } else if (background == Background::noise) {
                const double n = uniform(texture, -0.15, 0.15);
                for (int c = 0; c < 3; ++c) bg[c] = st.bg[c] + n;
            }
            for (std::size_t c = 0; c < kChannels; ++c) {
                const double value = coverage * st.fg[c] + (1.0 - coverage) * bg[c];
                data[c * plane + row * kImageSize + col] = std::clamp(value, 0.0, 1.0);
            }
        }
    }
    return img;
}

void apply_photometric(Tensor& img, const ShiftParams& shift, double noise_sigma) {
    Rng noise(shift.noise_seed);
    for (double& v : img.data()) {
        double out = (v - 0.5) * shift.contrast + 0.5 + shift.brightness;
        if (noise_sigma > 0.0) out += noise_sigma * normal01(noise);
        v = std::clamp(out, 0.0, 1.0);
    }
}

nlohmann::json style_json(const StyleParams& s) {
    return {{"cx", s.cx},         {"cy", s.cy}, {"size", s.size}, {"angle", s.angle},
            {"fg", s.fg},         {"bg", s.bg}, {"bg2", s.bg2},   {"gradient_angle", s.gradient_angle},
            {"texture_seed", s.texture_seed}};
}

nlohmann::json shift_json(const ShiftParams& s) {
    return {{"rotation", s.rotation},
            {"scale", s.scale},
            {"brightness", s.brightness},
            {"contrast", s.contrast},
            {"noise_seed", s.noise_seed}};
}

}  // namespace

std::string_view family_name(Family f) {
    switch (f) {
        case Family::disk: return "disk";
        case Family::square: return "square";
        case Family::triangle: return "triangle";
        case Family::cross: return "cross";
        case Family::ring: return "ring";
        case Family::stripes: return "stripes";
        case Family::checker: return "checker";
        case Family::two_blob: return "two_blob";
    }
    return "?";
}

std::string_view background_name(Background b) {
    switch (b) {
        case Background::flat: return "flat";
        case Background::gradient: return "gradient";
        case Background::noise: return "noise";
    }
    return "?";
}

Background parse_background(std::string_view name) {
    if (name == "flat") return Background::flat;
    if (name == "gradient") return Background::gradient;
    if (name == "noise") return Background::noise;
    throw std::invalid_argument("unknown background kind: " + std::string(name));
}

bool DomainSpec::has_geometric() const { return rotation_max_deg != 0.0 || scale_lo != 1.0 || scale_hi != 1.0; }

bool DomainSpec::has_photometric() const {
    return brightness_max != 0.0 || contrast_lo != 1.0 || contrast_hi != 1.0 || noise_sigma != 0.0;
}

void to_json(nlohmann::json& j, const DomainSpec& s) {
    j = {{"name", s.name},
         {"rotation_max_deg", s.rotation_max_deg},
         {"scale_lo", s.scale_lo},
         {"scale_hi", s.scale_hi},
         {"brightness_max", s.brightness_max},
         {"contrast_lo", s.contrast_lo},
         {"contrast_hi", s.contrast_hi},
         {"noise_sigma", s.noise_sigma},
         {"background", background_name(s.background)},
         {"samples_per_class", s.samples_per_class}};
}

void from_json(const nlohmann::json& j, DomainSpec& s) {
    s.name = j.at("name").get<std::string>();
    s.rotation_max_deg = j.at("rotation_max_deg").get<double>();
    s.scale_lo = j.at("scale_lo").get<double>();
    s.scale_hi = j.at("scale_hi").get<double>();
    s.brightness_max = j.at("brightness_max").get<double>();
    s.contrast_lo = j.at("contrast_lo").get<double>();
    s.contrast_hi = j.at("contrast_hi").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.background = parse_background(j.at("background").get<std::string>());
    s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
}

std::vector<DomainSpec> builtin_suite() {
    DomainSpec source;

    DomainSpec geo_mild;
    geo_mild.name = "geo-mild";
    geo_mild.rotation_max_deg = 15.0;
    geo_mild.scale_lo = 0.9;
    geo_mild.scale_hi = 1.1;

    DomainSpec geo_hard;
    geo_hard.name = "geo-hard";
    geo_hard.rotation_max_deg = 60.0;
    geo_hard.scale_lo = 0.6;
    geo_hard.scale_hi = 1.4;

    DomainSpec photo;
    photo.name = "photo";
    photo.brightness_max = 0.15;
    photo.contrast_lo = 0.5;
    photo.contrast_hi = 0.9;
    photo.noise_sigma = 0.08;
    photo.background = Background::noise;

    DomainSpec mixed;
    mixed.name = "mixed";
    mixed.rotation_max_deg = 30.0;
    mixed.scale_lo = 0.8;
    mixed.scale_hi = 1.2;
    mixed.contrast_lo = 0.7;
    mixed.contrast_hi = 1.0;
    mixed.noise_sigma = 0.05;
    mixed.background = Background::noise;

    return {source, geo_mild, geo_hard, photo, mixed};
}

DomainSpec builtin_domain(std::string_view name) {
    for (const DomainSpec& d : builtin_suite()) {
        if (d.name == name) return d;
    }
    throw std::invalid_argument("unknown domain: " + std::string(name));
}

StyleParams sample_style(Rng& rng) {
    StyleParams s;
    s.cx = uniform(rng, -0.15, 0.15);
    s.cy = uniform(rng, -0.15, 0.15);
    s.size = uniform(rng, 0.45, 0.7);
    s.angle = uniform(rng, -0.17, 0.17);
    s.fg = hsv(uniform01(rng), uniform(rng, 0.5, 1.0), uniform(rng, 0.75, 1.0));
    s.bg = hsv(uniform01(rng), uniform(rng, 0.0, 0.6), uniform(rng, 0.05, 0.35));
    s.bg2 = hsv(uniform01(rng), uniform(rng, 0.0, 0.6), uniform(rng, 0.05, 0.35));
    s.gradient_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    s.texture_seed = rng();
    return s;
}

ShiftParams sample_shift(const DomainSpec& spec, Rng& rng) {
    ShiftParams s;
    const double rmax = spec.rotation_max_deg * std::numbers::pi / 180.0;
    s.rotation = uniform(rng, -rmax, rmax);
    s.scale = uniform(rng, spec.scale_lo, spec.scale_hi);
    s.brightness = uniform(rng, -spec.brightness_max, spec.brightness_max);
    s.contrast = uniform(rng, spec.contrast_lo, spec.contrast_hi);
    s.noise_seed = rng();
    return s;
}

LabeledImage render_class(int class_id, const StyleParams& style, Rng& rng, Background background) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= kNumClasses) {
        throw std::invalid_argument("class id out of range: " + std::to_string(class_id));
    }
    StyleParams st = style;
    st.texture_seed = rng();
    LabeledImage out;
    out.image = render(static_cast<Family>(class_id), st, background, nullptr);
    out.label = class_id;
    return out;
}

LabeledImage render_sample(const DomainSpec& spec, int class_id, std::uint64_t sample_seed,
                           nlohmann::json* manifest_entry) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= kNumClasses) {
        throw std::invalid_argument("class id out of range: " + std::to_string(class_id));
    }
    Rng base(derive_seed(sample_seed, 1));
    Rng shift_rng(derive_seed(sample_seed, 2));
    const StyleParams style = sample_style(base);
    const ShiftParams shift = sample_shift(spec, shift_rng);

    LabeledImage out;
    out.image = render(static_cast<Family>(class_id), style, spec.background,
                       spec.has_geometric() ? &shift : nullptr);
    if (spec.has_photometric()) apply_photometric(out.image, shift, spec.noise_sigma);
    out.label = class_id;
    out.domain = spec.name;
    out.seed = sample_seed;
    if (manifest_entry != nullptr) {
        *manifest_entry = {{"label", class_id},
                           {"family", family_name(static_cast<Family>(class_id))},
                           {"seed", sample_seed},
                           {"style", style_json(style)},
                           {"shift", shift_json(shift)}};
    }
    return out;
}

Dataset gen_split(const DomainSpec& spec, std::size_t n_per_class, std::uint64_t seed, nlohmann::json* manifest) {
    if (n_per_class == 0) throw std::invalid_argument("gen_split: n_per_class must be positive");
    Dataset ds;
    ds.spec = spec;
    ds.spec.samples_per_class = n_per_class;
    ds.seed = seed;
    ds.samples.reserve(n_per_class * kNumClasses);
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < n_per_class * kNumClasses; ++i) {
        const int label = static_cast<int>(i % kNumClasses);
        nlohmann::json entry;
        ds.samples.push_back(render_sample(spec, label, derive_seed(seed, i), manifest ? &entry : nullptr));
        if (manifest) {
            entry["index"] = i;
            entries.push_back(std::move(entry));
        }
    }
    if (manifest) *manifest = {{"spec", ds.spec}, {"seed", seed}, {"samples", std::move(entries)}};
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    io::ByteWriter w;
    w.bytes(kDatasetMagic, 4);
    w.u32(kDatasetVersion);
    const nlohmann::json header = {{"spec", ds.spec},
                                   {"seed", ds.seed},
                                   {"count", ds.samples.size()},
                                   {"channels", kChannels},
                                   {"height", kImageSize},
                                   {"width", kImageSize},
                                   {"classes", kNumClasses}};
    w.str(header.dump());
    for (const LabeledImage& s : ds.samples) {
        w.u32(static_cast<std::uint32_t>(s.label));
        w.u64(s.seed);
        w.f64s(s.image.data());
    }
    io::write_file(path, w.buffer());
}

Dataset load_dataset(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw io::FormatError(path.string() + ": not a dataset file");
    if (const auto v = r.u32(); v != kDatasetVersion) {
        throw io::FormatError(path.string() + ": unsupported dataset version " + std::to_string(v));
    }
    const auto header = nlohmann::json::parse(r.str());
    Dataset ds;
    ds.spec = header.at("spec").get<DomainSpec>();
    ds.seed = header.at("seed").get<std::uint64_t>();
    const auto count = header.at("count").get<std::size_t>();
    const diff::Shape shape = {header.at("channels").get<std::size_t>(), header.at("height").get<std::size_t>(),
                               header.at("width").get<std::size_t>()};
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        LabeledImage s;
        s.label = static_cast<int>(r.u32());
        s.seed = r.u64();
        s.image = Tensor(shape);
        r.f64s(s.image.data());
        s.domain = ds.spec.name;
        ds.samples.push_back(std::move(s));
    }
    if (!r.at_end()) throw io::FormatError(path.string() + ": trailing bytes");
    return ds;
}

}  // namespace mtpt::bench
