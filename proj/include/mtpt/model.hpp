#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpt/benchgen.hpp"
#include "mtpt/tape.hpp"
#include "mtpt/tensor.hpp"

namespace mtpt::model {

using diff::Tape;
using diff::Tensor;
using diff::Var;

struct ModelConfig {
    std::size_t channels = 3;
    std::size_t image_size = 32;
    std::size_t patch = 8;
    std::size_t d_tok = 32;
    std::size_t d_feat = 32;
    std::size_t n_blocks = 2;
    std::size_t mlp_hidden = 64;
    std::size_t n_classes = 8;
    std::size_t n_ctx = 4;
    std::size_t d_ctx = 32;
    std::size_t n_vp = 4;
    std::size_t text_hidden = 64;
    double tau = 0.07;

    std::size_t patches_per_side() const { return image_size / patch; }
    std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::size_t n_tokens() const { return n_vp + n_patches(); }
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Ordered name -> tensor map.
using ParamMap = std::map<std::string, Tensor>;

/// Encoder and text-side weights. Immutable once pretraining ends.
struct FrozenModel {
    ModelConfig config;
    ParamMap params;

    const Tensor& at(const std::string& name) const;
};

/// The learnable prompts: shared text context and visual prompt tokens.
struct PromptState {
    Tensor theta_txt;  // [n_ctx, d_ctx]
    Tensor theta_vis;  // [n_vp, d_tok]

    void set_requires_grad(bool flag);
    void zero_grad();
    /// Value copy without gradient buffers.
    PromptState clone() const;
};

/// Random initialization (the untrained model).
FrozenModel init_model(const ModelConfig& cfg, std::uint64_t seed);
PromptState init_prompts(const ModelConfig& cfg, std::uint64_t seed);

/// Binds a model and prompts to a tape. Weights become leaves (trainable) or
/// constants; prompts become leaves so that gradients reach them when they
/// require grad.
class Network {
  public:
    Network(Tape& tape, const FrozenModel& model, PromptState& prompts);
    /// Pretraining variant: every weight in `trainable` is a gradient leaf.
    Network(Tape& tape, FrozenModel& trainable, PromptState& prompts, bool train_weights);

    Tape& tape() const { return *tape_; }
    const ModelConfig& config() const { return *cfg_; }

    /// images [B,C,S,S] -> pre-normalization features [B,d].
    Var encode_raw(Var images);
    /// images [B,C,S,S] -> unit-norm features [B,d].
    Var encode(Var images);
    /// Unit-norm class features [N_c, d]; built once per tape.
    Var class_features();
    /// Unit-norm features [B,d] -> class probabilities [B,N_c].
    Var probs(Var features);

  private:
    Var weight(const std::string& name) const;
    Var layer_norm(Var x, const std::string& prefix);
    Var linear(Var x, const std::string& w, const std::string& b);

    Tape* tape_;
    const ModelConfig* cfg_;
    std::map<std::string, Var> weights_;
    Var theta_txt_, theta_vis_;
    std::optional<Var> class_cache_;
};

/// Rows scaled to unit L2 norm.
Var normalize_rows(Var x);

/// Single image [C,S,S] -> unit-norm feature [d] (value only).
Tensor encode_image(const Tensor& image, const PromptState& prompts, const FrozenModel& model);
/// [N_c, d] unit rows (value only).
Tensor class_features(const PromptState& prompts, const FrozenModel& model);
/// Softmax over cosine similarity / tau (value only).
Tensor predict(const Tensor& image, const PromptState& prompts, const FrozenModel& model);

// -- checkpoint --------------------------------------------------------------

/// On-disk model: magic "MTPT", version, seed, config hash, JSON metadata
/// and named little-endian float64 tensors. Byte layout in docs/formats.md.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

/// Prompts are stored as "prompt.theta_txt" / "prompt.theta_vis"; the
/// model config lives under metadata["model_config"].
Checkpoint make_checkpoint(const FrozenModel& model, const PromptState& theta0, std::uint64_t seed,
                           nlohmann::json extra = nlohmann::json::object());
std::pair<FrozenModel, PromptState> unpack_checkpoint(const Checkpoint& ckpt);

// -- pretraining ---------------------------------------------------------------

struct PretrainConfig {
    ModelConfig model;
    std::uint64_t seed = 0;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double lr = 2e-3;
    double weight_decay = 1e-4;
    /// Random resized crop + flip applied to training images.
    bool augment = true;
    double crop_scale_lo = 0.5;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);

class DivergenceError : public std::runtime_error {
  public:
    explicit DivergenceError(std::size_t step);
    std::size_t step() const noexcept { return step_; }

  private:
    std::size_t step_;
};

struct PretrainResult {
    FrozenModel model;
    PromptState theta0;
    Checkpoint checkpoint;
    double heldout_accuracy = 0.0;
    std::vector<double> epoch_losses;
};

using ProgressFn = std::function<void(std::size_t epoch, double loss)>;

/// Trains every parameter with cross-entropy on the class probabilities using
/// AdamW, then freezes the encoders. Single-threaded and deterministic.
PretrainResult pretrain_source(const bench::Dataset& train, const bench::Dataset& heldout, const PretrainConfig& cfg,
                               const ProgressFn& progress = {});

/// Argmax accuracy of zero-shot prediction over a dataset.
double accuracy(const bench::Dataset& data, const PromptState& prompts, const FrozenModel& model);

/// Stacks images [C,S,S] into [B,C,S,S].
Tensor stack_images(std::span<const Tensor* const> images);

}  // namespace mtpt::model
