#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpt/benchgen.hpp"
#include "mtpt/losses.hpp"
#include "mtpt/model.hpp"
#include "mtpt/optimizer.hpp"
#include "mtpt/warp.hpp"

namespace mtpt::engine {

using diff::Tensor;
using model::FrozenModel;
using model::PromptState;
using warp::AffineBatch;

enum class Method { zero_shot, tpt, metatpt, one_stage, offline };

std::string_view method_name(Method m);
Method parse_method(std::string_view s);

/// Default learning rates: 1e-4 for the generalization suite, 1e-3 for
/// cross-dataset style runs.
enum class RateProfile { generalization, cross_dataset };
double profile_rate(RateProfile p);
RateProfile parse_profile(std::string_view s);

struct AdaptConfig {
    Method method = Method::metatpt;
    std::size_t n_views = 64;
    std::size_t outer_steps = 1;  // M
    std::size_t inner_steps = 1;  // T; zero only makes sense with preset phis
    double inner_lr = 1e-4;
    double outer_lr = 1e-4;
    double ema_alpha = 0.9;
    double lambda_K = 1.0;
    double lambda_V = 1.0;
    optim::Kind optimizer = optim::Kind::adamw;
    double weight_decay = 0.0;
    losses::LossOptions loss;
    warp::CropInit crop;
    warp::RotationInit rotation;
    /// Full-batch steps on the shared augmentations (offline method).
    std::size_t offline_steps = 1;
    /// Re-evaluate the inner loss after each inner loop.
    bool track_inner_after = true;
    /// Keep a copy of both augmentation sets after every update.
    bool record_trajectory = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const AdaptConfig& c);
void from_json(const nlohmann::json& j, AdaptConfig& c);

enum class StepKind { inner, ema, outer, joint };

/// Snapshot passed to an observer before and after every parameter update.
struct StepView {
    StepKind kind;
    bool after;
    const PromptState& theta;
    const AffineBatch& phi_K;
    const AffineBatch& phi_V;
};
using StepObserver = std::function<void(const StepView&)>;

struct StepCounters {
    std::size_t inner = 0;
    std::size_t ema = 0;
    std::size_t outer = 0;
    std::size_t joint = 0;
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct AdaptOutcome {
    std::uint64_t seed = 0;
    int label = -1;
    int zero_shot_pred = -1;
    int pred = -1;
    Tensor score;  // [N_c], unnormalized ensemble score
    std::vector<double> inner_losses;        // before each inner step
    std::vector<double> inner_losses_after;  // after each inner loop
    std::vector<double> outer_losses;        // before each outer step
    double entropy_before = kNaN;
    double entropy_after = kNaN;
    double phi_K_moved = 0.0;  // Frobenius distance from the initial phi_K
    double phi_V_moved = 0.0;
    std::vector<Tensor> phi_K_trajectory;  // only with record_trajectory
    std::vector<Tensor> phi_V_trajectory;
    StepCounters counters;
    bool degenerate = false;
    std::size_t degenerate_step = 0;
    std::string degenerate_reason;
    double wall_ms = 0.0;
};

/// Seed of sample `index` in a run.
std::uint64_t sample_seed(std::uint64_t run_seed, std::size_t index);

struct PhiPair {
    AffineBatch K;
    AffineBatch V;
};

/// Per-sample augmentation initialization: crops for K, rotations for V,
/// each from its own stream of `seed`.
PhiPair init_phis(const AdaptConfig& cfg, std::uint64_t seed, std::size_t image_size);

struct FinalPrediction {
    int label = -1;
    Tensor score;
    Tensor p_x;
    losses::ProbBundle bundle_K;
    losses::ProbBundle bundle_V;  // empty when no V branch is given
};

/// score = P(x) + lambda_K * P_tilde_K + lambda_V * P_tilde_V; label = argmax
/// with ties to the lower class. `phi_V` may be null.
FinalPrediction final_predict(const Tensor& image, const PromptState& theta, const FrozenModel& model,
                              const AffineBatch& phi_K, const AffineBatch* phi_V, double lambda_K, double lambda_V,
                              double rho);

/// Runs the configured method on one image. Prompts restart from `theta0`
/// and optimizer state is fresh for every call.
AdaptOutcome adapt_sample(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                          const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer = {});

/// Bi-level adaptation from given augmentations.
AdaptOutcome adapt_with_phis(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                             const AdaptConfig& cfg, PhiPair phis, const StepObserver& observer = {});

AdaptOutcome zero_shot(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model);

/// Entropy minimization of the selected-view average over fixed crops.
AdaptOutcome tpt_baseline(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                          const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer = {});

/// Summed inner + outer objective, phi_K and prompts stepped together.
AdaptOutcome one_stage(const Tensor& image, int label, const PromptState& theta0, const FrozenModel& model,
                       const AdaptConfig& cfg, std::uint64_t seed, const StepObserver& observer = {});

/// Offline phase one: one pair of augmentations learned on the whole split
/// with frozen theta0.
PhiPair offline_shared_phis(const bench::Dataset& data, const PromptState& theta0, const FrozenModel& model,
                            const AdaptConfig& cfg, std::uint64_t run_seed, std::size_t workers);

/// Adapts every sample of `data`; results are in sample order and do not
/// depend on `workers`.
std::vector<AdaptOutcome> adapt_dataset(const bench::Dataset& data, const PromptState& theta0,
                                        const FrozenModel& model, const AdaptConfig& cfg, std::uint64_t run_seed,
                                        std::size_t workers);

/// Calls fn(i) for i in [0, n) on up to `workers` threads. Rethrows the
/// exception of the lowest failing index.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace mtpt::engine
