#include <cstring>

#include "mtpt/binio.hpp"
#include "mtpt/model.hpp"

namespace mtpt::model {

namespace {
constexpr char kMagic[4] = {'M', 'T', 'P', 'T'};
constexpr const char* kThetaTxt = "prompt.theta_txt";
constexpr const char* kThetaVis = "prompt.theta_vis";
}  // namespace

std::vector<std::uint8_t> Checkpoint::serialize() const {
    io::ByteWriter w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u64(seed);
    w.u64(config_hash);
    w.str(metadata.dump());
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        w.f64s(t.data());
    }
    return w.buffer();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw io::FormatError("not a checkpoint (bad magic)");
    if (const auto v = r.u32(); v != kVersion) {
        throw io::FormatError("unsupported checkpoint version " + std::to_string(v));
    }
    Checkpoint c;
    c.seed = r.u64();
    c.config_hash = r.u64();
    c.metadata = nlohmann::json::parse(r.str());
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::uint32_t rank = r.u32();
        diff::Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        Tensor t(shape);
        r.f64s(t.data());
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.at_end()) throw io::FormatError("trailing bytes after checkpoint");
    return c;
}

void Checkpoint::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    try {
        return deserialize(io::read_file(path));
    } catch (const io::FormatError& e) {
        throw io::FormatError(path.string() + ": " + e.what());
    }
}

Checkpoint make_checkpoint(const FrozenModel& model, const PromptState& theta0, std::uint64_t seed,
                           nlohmann::json extra) {
    Checkpoint c;
    c.seed = seed;
    nlohmann::json cfg = model.config;
    c.config_hash = io::fnv1a64(cfg.dump());
    c.metadata = std::move(extra);
    c.metadata["model_config"] = cfg;
    for (const auto& [name, t] : model.params) c.tensors.emplace_back(name, Tensor(t.shape(), t.storage()));
    c.tensors.emplace_back(kThetaTxt, Tensor(theta0.theta_txt.shape(), theta0.theta_txt.storage()));
    c.tensors.emplace_back(kThetaVis, Tensor(theta0.theta_vis.shape(), theta0.theta_vis.storage()));
    return c;
}

std::pair<FrozenModel, PromptState> unpack_checkpoint(const Checkpoint& ckpt) {
    FrozenModel m;
    m.config = ckpt.metadata.at("model_config").get<ModelConfig>();
    m.config.validate();
    PromptState p;
    bool have_txt = false, have_vis = false;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name == kThetaTxt) {
            p.theta_txt = Tensor(t.shape(), t.storage());
            have_txt = true;
        } else if (name == kThetaVis) {
            p.theta_vis = Tensor(t.shape(), t.storage());
            have_vis = true;
        } else {
            m.params[name] = Tensor(t.shape(), t.storage());
        }
    }
    if (!have_txt || !have_vis) throw io::FormatError("checkpoint is missing prompt tensors");
    // Shape check against a freshly initialized model of the same config.
    const FrozenModel reference = init_model(m.config, 0);
    for (const auto& [name, t] : reference.params) {
        auto it = m.params.find(name);
        if (it == m.params.end()) throw io::FormatError("checkpoint is missing tensor " + name);
        if (it->second.shape() != t.shape()) throw io::FormatError("checkpoint tensor " + name + " has wrong shape");
    }
    return {std::move(m), std::move(p)};
}

}  // namespace mtpt::model
