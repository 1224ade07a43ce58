#include <charconv>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>

#include "mtpt/binio.hpp"
#include "mtpt/harness.hpp"

namespace mtpt::harness {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto end = comma == std::string_view::npos ? s.size() : comma;
        if (auto item = trim(s.substr(start, end - start)); !item.empty()) out.push_back(std::move(item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

double to_double(const std::string& s) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError("not a finite number: '" + s + "'");
    }
    return v;
}

std::uint64_t to_u64(const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("not a non-negative integer: '" + s + "'");
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

std::pair<double, double> to_range(const std::string& s) {
    const auto items = split_list(s);
    if (items.size() != 2) throw ConfigError("expected 'lo, hi', got '" + s + "'");
    return {to_double(items[0]), to_double(items[1])};
}

template <class T, class F>
std::vector<T> map_list(const std::string& s, F&& f) {
    std::vector<T> out;
    for (const auto& item : split_list(s)) out.push_back(f(item));
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
        {"datasets",
         [](RunConfig& c, const std::string& v) {
             c.datasets.clear();
             for (auto& p : split_list(v)) c.datasets.emplace_back(p);
         }},
        {"domains", [](RunConfig& c, const std::string& v) { c.domains = map_list<std::string>(v, std::identity{}); }},
        {"samples_per_class", [](RunConfig& c, const std::string& v) { c.samples_per_class = to_u64(v); }},
        {"data_seed", [](RunConfig& c, const std::string& v) { c.data_seed = to_u64(v); }},
        {"methods",
         [](RunConfig& c, const std::string& v) { c.methods = map_list<engine::Method>(v, engine::parse_method); }},
        {"seeds", [](RunConfig& c, const std::string& v) { c.seeds = map_list<std::uint64_t>(v, to_u64); }},
        {"workers", [](RunConfig& c, const std::string& v) { c.workers = to_u64(v); }},
        {"out", [](RunConfig& c, const std::string& v) { c.out = v; }},
        {"n_views", [](RunConfig& c, const std::string& v) { c.adapt.n_views = to_u64(v); }},
        {"outer_steps", [](RunConfig& c, const std::string& v) { c.adapt.outer_steps = to_u64(v); }},
        {"inner_steps", [](RunConfig& c, const std::string& v) { c.adapt.inner_steps = to_u64(v); }},
        {"inner_lr", [](RunConfig& c, const std::string& v) { c.adapt.inner_lr = to_double(v); }},
        {"outer_lr", [](RunConfig& c, const std::string& v) { c.adapt.outer_lr = to_double(v); }},
        {"lr_profile",
         [](RunConfig& c, const std::string& v) {
             c.adapt.inner_lr = c.adapt.outer_lr = engine::profile_rate(engine::parse_profile(v));
         }},
        {"ema_alpha", [](RunConfig& c, const std::string& v) { c.adapt.ema_alpha = to_double(v); }},
        {"lambda_K", [](RunConfig& c, const std::string& v) { c.adapt.lambda_K = to_double(v); }},
        {"lambda_V", [](RunConfig& c, const std::string& v) { c.adapt.lambda_V = to_double(v); }},
        {"rho", [](RunConfig& c, const std::string& v) { c.adapt.loss.rho = to_double(v); }},
        {"optimizer", [](RunConfig& c, const std::string& v) { c.adapt.optimizer = optim::parse_kind(v); }},
        {"weight_decay", [](RunConfig& c, const std::string& v) { c.adapt.weight_decay = to_double(v); }},
        {"predictive_loss",
         [](RunConfig& c, const std::string& v) { c.adapt.loss.predictive = losses::parse_predictive(v); }},
        {"semantic_distance",
         [](RunConfig& c, const std::string& v) { c.adapt.loss.semantic = losses::parse_semantic(v); }},
        {"inner_terms",
         [](RunConfig& c, const std::string& v) { c.adapt.loss.inner_terms = losses::parse_inner_terms(v); }},
        {"outer_terms",
         [](RunConfig& c, const std::string& v) { c.adapt.loss.outer_terms = losses::parse_outer_terms(v); }},
        {"detach_target", [](RunConfig& c, const std::string& v) { c.adapt.loss.detach_target = to_bool(v); }},
        {"offline_steps", [](RunConfig& c, const std::string& v) { c.adapt.offline_steps = to_u64(v); }},
        {"crop_scale",
         [](RunConfig& c, const std::string& v) {
             std::tie(c.adapt.crop.scale_lo, c.adapt.crop.scale_hi) = to_range(v);
         }},
        {"flip_probability", [](RunConfig& c, const std::string& v) { c.adapt.crop.flip_probability = to_double(v); }},
        {"rotation_deg",
         [](RunConfig& c, const std::string& v) {
             const auto [lo, hi] = to_range(v);
             c.adapt.rotation.gamma_lo = lo * std::numbers::pi / 180.0;
             c.adapt.rotation.gamma_hi = hi * std::numbers::pi / 180.0;
         }},
        {"lambda_grid", [](RunConfig& c, const std::string& v) { c.lambda_grid = map_list<double>(v, to_double); }},
        {"rho_grid", [](RunConfig& c, const std::string& v) { c.rho_grid = map_list<double>(v, to_double); }},
        {"views_grid",
         [](RunConfig& c, const std::string& v) { c.views_grid = map_list<std::size_t>(v, to_u64); }},
    };
    return table;
}

}  // namespace

std::string_view sweep_name(SweepKind k) {
    switch (k) {
        case SweepKind::lambda: return "lambda";
        case SweepKind::rho: return "rho";
        case SweepKind::views: return "views";
        case SweepKind::methods: return "methods";
        case SweepKind::loss_components: return "loss_components";
        case SweepKind::loss_types: return "loss_types";
    }
    return "?";
}

SweepKind parse_sweep(std::string_view s) {
    for (auto k : {SweepKind::lambda, SweepKind::rho, SweepKind::views, SweepKind::methods,
                   SweepKind::loss_components, SweepKind::loss_types}) {
        if (sweep_name(k) == s) return k;
    }
    throw ConfigError("unknown sweep kind: " + std::string(s));
}

RunConfig parse_config(std::string_view text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        auto where = [&] { return "config line " + std::to_string(lineno) + ": "; };
        if (eq == std::string::npos) throw ConfigError(where() + "expected 'key = value'");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        const auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError(where() + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where() + "duplicate key '" + key + "'");
        try {
            it->second(cfg, value);
        } catch (const std::exception& e) {
            throw ConfigError(where() + key + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    RunConfig cfg = parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    // Relative paths are taken from the config file's directory.
    const auto base = path.parent_path();
    auto resolve = [&](std::filesystem::path& p) {
        if (!p.empty() && p.is_relative()) p = base / p;
    };
    resolve(cfg.checkpoint);
    for (auto& d : cfg.datasets) resolve(d);
    return cfg;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["checkpoint"] = checkpoint.generic_string();
    j["datasets"] = nlohmann::json::array();
    for (const auto& d : datasets) j["datasets"].push_back(d.generic_string());
    j["domains"] = domains;
    j["samples_per_class"] = samples_per_class;
    j["data_seed"] = data_seed ? nlohmann::json(*data_seed) : nlohmann::json(nullptr);
    j["methods"] = nlohmann::json::array();
    for (auto m : methods) j["methods"].push_back(engine::method_name(m));
    j["seeds"] = seeds;
    j["adapt"] = adapt;
    j["lambda_grid"] = lambda_grid;
    j["rho_grid"] = rho_grid;
    j["views_grid"] = views_grid;
    j["workers"] = workers;
    j["out"] = out.generic_string();
    return j;
}

std::uint64_t RunConfig::hash() const {
    nlohmann::json j = to_json();
    j.erase("workers");
    j.erase("out");
    return io::fnv1a64(j.dump());
}

void RunConfig::validate() const {
    if (checkpoint.empty()) throw ConfigError("no checkpoint given");
    if (!std::filesystem::is_regular_file(checkpoint)) {
        throw ConfigError("checkpoint not found: " + checkpoint.string());
    }
    for (const auto& d : datasets) {
        if (!std::filesystem::is_regular_file(d)) throw ConfigError("dataset not found: " + d.string());
    }
    if (datasets.empty()) {
        if (domains.empty()) throw ConfigError("no datasets or domains given");
        for (const auto& d : domains) bench::builtin_domain(d);
        if (samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
    }
    if (methods.empty()) throw ConfigError("no methods given");
    if (seeds.empty()) throw ConfigError("no seeds given");
    try {
        adapt.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace mtpt::harness
