// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. The pretrained checkpoint is cached next to the build tree.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "mtpt/binio.hpp"
#include "mtpt/engine.hpp"
#include "mtpt/grad_check.hpp"
#include "mtpt/harness.hpp"
#include "mtpt/ops.hpp"
#include "support/testing.hpp"

#ifndef MTPT_ACCEPTANCE_DIR
#define MTPT_ACCEPTANCE_DIR "acceptance_work"
#endif

using namespace mtpt;
using namespace mtpt::diff;
namespace fs = std::filesystem;
namespace mt = mtpt::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
    std::printf("criterion %d %s %s: %s\n", id, pass ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
    failures += !pass;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// -- pretrained model ----------------------------------------------------------

constexpr std::size_t kTrainPerClass = 500;
constexpr std::size_t kHeldoutPerClass = 50;

struct Pretrained {
    fs::path path;
    model::FrozenModel model;
    model::PromptState theta0;
    double heldout_accuracy = 0.0;
};

// Same recipe as `mtpt pretrain --seed 0`.
Pretrained pretrained(const fs::path& dir) {
    model::PretrainConfig pc;
    nlohmann::json key = pc;
    key["train_per_class"] = kTrainPerClass;
    key["heldout_per_class"] = kHeldoutPerClass;
    const std::string dump = key.dump();
    const fs::path path = dir / fmt("pretrained_%016llx.mtpt", static_cast<unsigned long long>(io::fnv1a64(std::string_view(dump))));
    if (!fs::exists(path)) {
        const auto source = bench::builtin_domain("source");
        const auto train = bench::gen_split(source, kTrainPerClass, derive_seed(pc.seed, 1));
        const auto heldout = bench::gen_split(source, kHeldoutPerClass, derive_seed(pc.seed, 2));
        spdlog::info("no cached checkpoint; pretraining {} epochs on {} images", pc.epochs, train.size());
        const auto r = model::pretrain_source(train, heldout, pc, [](std::size_t e, double loss) {
            spdlog::info("pretrain epoch {} loss {:.4f}", e, loss);
        });
        r.checkpoint.save(path);
    }
    const auto ckpt = model::Checkpoint::load(path);
    auto [m, theta] = model::unpack_checkpoint(ckpt);
    return {path, std::move(m), std::move(theta), ckpt.metadata.value("heldout_accuracy", 0.0)};
}

// -- 1 -------------------------------------------------------------------------

void gradient_fidelity() {
    const auto t0 = Clock::now();
    constexpr int kCases = 100;
    double prim = 0.0;
    std::string worst_prim;
    for (int s = 0; s < kCases; ++s) {
        Rng rng(static_cast<std::uint64_t>(s));
        for (const auto& c : mt::primitive_cases(rng)) {
            const double e = grad_check(c.fn, c.point);
            if (e > prim) prim = e, worst_prim = c.name;
        }
    }

    const auto cfg = mt::tiny_config();
    losses::LossOptions opt;
    opt.rho = 0.5;
    opt.detach_target = false;  // finite differences see the whole objective
    double inner_phi = 0.0, inner_theta = 0.0, outer_theta = 0.0;
    for (int s = 0; s < kCases; ++s) {
        const auto seed = static_cast<std::uint64_t>(s);
        const auto m = model::init_model(cfg, seed);
        auto theta = model::init_prompts(cfg, seed + 1000);
        Rng rng(seed + 2000);
        const Tensor image = mt::random_tensor(rng, {cfg.channels, cfg.image_size, cfg.image_size}, 0.0, 1.0);
        Tensor phi_K;
        do phi_K = mt::random_affines(rng, 4);
        while (!mt::warp_is_generic(phi_K, cfg.image_size, cfg.image_size, 1e-4));
        const Tensor phi_V = mt::random_affines(rng, 4);

        // Selections are held fixed so finite differences never cross a reordering.
        losses::Selection sel_inner, sel_K, sel_V;
        {
            Tape tape;
            model::Network net(tape, m, theta);
            sel_inner = losses::inner_loss(net, tape.constant(image), tape.constant(phi_K), opt).bundle.selection;
            const auto o = losses::outer_loss(net, tape.constant(image), tape.constant(phi_K), tape.constant(phi_V), opt);
            sel_K = o.bundle_K.selection;
            sel_V = o.bundle_V.selection;
        }
        const ScalarFn inner_fn = [&](Tape& t, Var p) {
            model::Network net(t, m, theta);
            return losses::inner_loss(net, t.constant(image), p, opt, &sel_inner).total;
        };
        inner_phi = std::max(inner_phi, grad_check(inner_fn, phi_K));
        inner_theta = std::max(inner_theta, mt::prompt_grad_error(m, theta, [&](model::Network& net) {
            Tape& t = net.tape();
            return losses::inner_loss(net, t.constant(image), t.constant(phi_K), opt, &sel_inner).total;
        }));
        outer_theta = std::max(outer_theta, mt::prompt_grad_error(m, theta, [&](model::Network& net) {
            Tape& t = net.tape();
            return losses::outer_loss(net, t.constant(image), t.constant(phi_K), t.constant(phi_V), opt, &sel_K, &sel_V)
                .total;
        }));
    }
    const double secs = seconds_since(t0);
    const bool pass = prim < 1e-4 && inner_theta < 1e-4 && outer_theta < 1e-4 && inner_phi < 1e-3 && secs < 120.0;
    report(1, "gradient fidelity", pass,
           fmt("%d cases each; primitives max %.2e (%s), inner wrt augmentations %.2e (tol 1e-3), inner wrt prompts "
               "%.2e, outer wrt prompts %.2e (tol 1e-4); %.1f s (limit 120)",
               kCases, prim, worst_prim.c_str(), inner_phi, inner_theta, outer_theta, secs));
}

// -- 2 -------------------------------------------------------------------------

void warp_exactness() {
    const auto t0 = Clock::now();
    std::size_t mismatches = 0, checked = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(s);
        const std::size_t H = 32, W = 32, C = 3;
        const Tensor img = mt::random_tensor(rng, {C, H, W});
        auto at = [&](const Tensor& t, std::size_t c, std::size_t y, std::size_t x) { return t[(c * H + y) * W + x]; };
        const auto id = warp::warp_image(img, warp::AffineBatch::identity(4, warp::Role::K));
        for (std::size_t i = 0; i < 4; ++i) mismatches += !bitwise_equal(id.view(i), img);
        // Views: +1 px in x, +1 px in y, horizontal flip.
        const auto moved = warp::warp_image(
            img, warp::AffineBatch::from_affines(
                     warp::Role::K, {{1, 0, 2.0 / W, 0, 1, 0}, {1, 0, 0, 0, 1, 2.0 / H}, {-1, 0, 0, 0, 1, 0}}));
        const Tensor sx = moved.view(0), sy = moved.view(1), fl = moved.view(2);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t y = 0; y + 1 < H; ++y) {
                for (std::size_t x = 0; x + 1 < W; ++x) {
                    mismatches += at(sx, c, y, x) != at(img, c, y, x + 1);
                    mismatches += at(sy, c, y, x) != at(img, c, y + 1, x);
                    mismatches += at(fl, c, y, x) != at(img, c, y, W - 1 - x);
                    checked += 3;
                }
            }
        }
    }
    const double secs = seconds_since(t0);
    report(2, "warp exactness", mismatches == 0 && secs < 10.0,
           fmt("identity bitwise on 80 views; %zu interior pixel comparisons for shifts and flip, %zu mismatches; "
               "%.2f s (limit 10)",
               checked, mismatches, secs));
}

// -- 3 -------------------------------------------------------------------------

void selection_oracle() {
    const auto t0 = Clock::now();
    std::size_t wrong = 0, with_ties = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        Rng rng(s);
        const std::size_t n = 1 + uniform_index(rng, 96), k = 2 + uniform_index(rng, 8);
        Tensor probs = mt::random_probs(rng, n, k);
        if (s % 2 == 0) {
            for (std::size_t r = 0; r < n / 2; ++r) {
                const std::size_t src = uniform_index(rng, n), dst = uniform_index(rng, n);
                for (std::size_t c = 0; c < k; ++c) probs[dst * k + c] = probs[src * k + c];
            }
            ++with_ties;
        }
        const double rho = uniform(rng, 0.005, 1.0);
        wrong += losses::select_confident(probs, rho).indices != mt::brute_force_selection(probs, rho);
    }
    Rng rng(4242);
    const auto sel = losses::select_confident(mt::random_probs(rng, 64, 8), 0.1);
    const double secs = seconds_since(t0);
    report(3, "selection oracle", wrong == 0 && sel.k == 6 && sel.indices.size() == 6 && secs < 10.0,
           fmt("1000 instances (%zu with duplicated rows), %zu disagreements; N=64 rho=0.1 keeps %zu; %.2f s (limit 10)",
               with_ties, wrong, sel.k, secs));
}

// -- 4 -------------------------------------------------------------------------

void ema_law() {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(s);
        const warp::AffineBatch K(warp::Role::K, mt::random_affines(rng, 64));
        warp::AffineBatch V(warp::Role::V, mt::random_affines(rng, 64));
        const double d0 = warp::distance(V, K);
        for (int t = 1; t <= 20; ++t) {
            warp::ema_update(V, K, 0.9);
            worst = std::max(worst, std::abs(warp::distance(V, K) - std::pow(0.9, t) * d0));
        }
    }
    report(4, "EMA law", worst <= 1e-10, fmt("alpha 0.9, 20 steps, 10 seeds; max |d_t - 0.9^t d_0| = %.2e (tol 1e-10)", worst));
}

// -- 5 -------------------------------------------------------------------------

bool same_prompts(const model::PromptState& a, const model::PromptState& b) {
    return bitwise_equal(a.theta_txt, b.theta_txt) && bitwise_equal(a.theta_vis, b.theta_vis);
}

void accounting_and_hygiene(const Pretrained& p) {
    const auto data = bench::gen_split(bench::builtin_domain("geo-hard"), 1, 0);
    engine::AdaptConfig cfg;  // M = T = 1, 64 views
    const model::FrozenModel before = p.model;
    const auto theta0_before = p.theta0.clone();
    std::size_t violations = 0, samples = 0, good_counts = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        model::PromptState snap;
        Tensor k_snap, v_snap;
        const engine::StepObserver obs = [&](const engine::StepView& v) {
            if (!v.after) {
                snap = v.theta.clone();
                k_snap = v.phi_K.params;
                v_snap = v.phi_V.params;
                return;
            }
            const bool theta_same = same_prompts(snap, v.theta);
            const bool k_same = bitwise_equal(k_snap, v.phi_K.params), v_same = bitwise_equal(v_snap, v.phi_V.params);
            switch (v.kind) {
                case engine::StepKind::inner: violations += !theta_same || !v_same; break;
                case engine::StepKind::ema: violations += !theta_same || !k_same; break;
                case engine::StepKind::outer: violations += !k_same || !v_same; break;
                case engine::StepKind::joint: ++violations; break;
            }
        };
        const auto out = engine::adapt_sample(data.samples[i].image, data.samples[i].label, p.theta0, p.model, cfg,
                                              engine::sample_seed(0, i), obs);
        good_counts += out.counters.inner == 1 && out.counters.ema == 1 && out.counters.outer == 1 &&
                       out.counters.joint == 0 && !out.degenerate;
        ++samples;
    }
    std::size_t frozen_changed = 0;
    for (const auto& [name, t] : p.model.params) frozen_changed += !bitwise_equal(t, before.params.at(name));
    const bool theta0_kept = same_prompts(p.theta0, theta0_before);
    report(5, "step accounting and hygiene",
           good_counts == samples && violations == 0 && frozen_changed == 0 && theta0_kept,
           fmt("%zu/%zu samples with inner/EMA/outer = 1/1/1; %zu observer violations; %zu frozen tensors changed; "
               "initial prompts %s",
               good_counts, samples, violations, frozen_changed, theta0_kept ? "intact" : "modified"));
}

// -- 6 -------------------------------------------------------------------------

void adaptation_efficacy(const Pretrained& p) {
    const auto t0 = Clock::now();
    engine::AdaptConfig cfg;
    double zs_sum = 0.0, ad_sum = 0.0;
    std::size_t reduced = 0, total = 0, degenerate = 0;
    std::string per_seed;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto data = bench::gen_split(bench::builtin_domain("geo-hard"), 50, s);
        const auto outs = engine::adapt_dataset(data, p.theta0, p.model, cfg, s, 0);
        std::size_t zs = 0, ad = 0;
        for (const auto& o : outs) {
            zs += o.zero_shot_pred == o.label;
            ad += o.pred == o.label;
            degenerate += o.degenerate;
            reduced += !o.inner_losses.empty() && !o.inner_losses_after.empty() &&
                       o.inner_losses_after.front() < o.inner_losses.front();
            ++total;
        }
        const double za = 100.0 * static_cast<double>(zs) / static_cast<double>(outs.size());
        const double aa = 100.0 * static_cast<double>(ad) / static_cast<double>(outs.size());
        zs_sum += za;
        ad_sum += aa;
        per_seed += fmt(" s%llu %+.1f", static_cast<unsigned long long>(s), aa - za);
        spdlog::info("criterion 6 seed {}: zero-shot {:.2f}% adapted {:.2f}%", s, za, aa);
    }
    const double zs = zs_sum / 5.0, ad = ad_sum / 5.0;
    const double frac = static_cast<double>(reduced) / static_cast<double>(total);
    report(6, "adaptation efficacy", ad - zs >= 2.0 && frac >= 0.9,
           fmt("geo-hard 8x50, seeds 0-4: zero-shot %.2f%%, adapted %.2f%%, gain %.2f points (need >= 2.0; per seed%s); "
               "inner loss reduced on %.1f%% of %zu samples (need >= 90%%); %zu degenerate; %.0f s",
               zs, ad, ad - zs, per_seed.c_str(), 100.0 * frac, total, degenerate, seconds_since(t0)));
}

// -- 7 -------------------------------------------------------------------------

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

void harness_completeness(const Pretrained& p, const fs::path& work) {
    const auto t0 = Clock::now();
    harness::RunConfig cfg;
    cfg.checkpoint = p.path;
    cfg.domains = {"geo-mild", "geo-hard", "photo"};
    cfg.samples_per_class = 2;
    cfg.seeds = {0, 1};
    cfg.adapt.n_views = 16;
    cfg.workers = 0;

    std::vector<std::string> problems;
    auto expect_rows = [&](const fs::path& out, const std::vector<std::string>& rows) {
        const auto s = harness::summarize({out / "results.jsonl"});
        if (s.rows() != rows) problems.push_back(out.filename().string() + ": unexpected rows");
        if (s.domains() != cfg.domains) problems.push_back(out.filename().string() + ": unexpected columns");
        std::string header = "config_hash,method";
        for (const auto& d : cfg.domains) header += "," + d;
        header += ",Average,zero_shot_Average,delta_vs_zero_shot";
        if (first_line(slurp(out / "summary.csv")) != header) problems.push_back(out.filename().string() + ": bad csv header");
        if (!fs::exists(out / "summary.txt")) problems.push_back(out.filename().string() + ": no text table");
        return s;
    };

    cfg.out = work / "methods";
    const auto methods = harness::run_sweep(cfg, harness::SweepKind::methods);
    const auto ms = expect_rows(cfg.out, {"zero_shot", "tpt", "metatpt", "one_stage", "offline"});
    const std::string orderings = slurp(cfg.out / "orderings.csv");
    for (const char* row : {"0,metatpt-one_stage,", "1,metatpt-one_stage,", "0,metatpt-offline,", "1,metatpt-offline,",
                            "mean,metatpt-one_stage,", "mean,metatpt-offline,"}) {
        if (orderings.find(row) == std::string::npos) problems.push_back(std::string("orderings.csv lacks ") + row);
    }

    cfg.out = work / "loss_components";
    const auto comps = harness::run_sweep(cfg, harness::SweepKind::loss_components);
    expect_rows(cfg.out, {"zero_shot", "inner=entropy", "inner=discrepancy", "inner=both", "outer=consistency",
                          "outer=discrepancy", "outer=both"});
    if (first_line(slurp(comps.csv)) != "config_hash,sweep,point,domain,n,accuracy") problems.push_back("bad long csv");
    if (methods.run.crashed + comps.run.crashed) problems.push_back("crashed samples");

    // Directional orderings are informative only.
    const double dual_vs_one = ms.average("metatpt") - ms.average("one_stage");
    const double online_vs_offline = ms.average("metatpt") - ms.average("offline");
    std::string detail = problems.empty() ? "methods and loss-component tables complete" : problems.front();
    detail += fmt("; non-blocking orderings on this small split: dual-loop minus one-stage %+.2f, online minus offline "
                  "%+.2f points; %.0f s",
                  dual_vs_one, online_vs_offline, seconds_since(t0));
    report(7, "ablation harness completeness", problems.empty(), detail);
}

// -- 8 -------------------------------------------------------------------------

void determinism(const Pretrained& p, const fs::path& work) {
    const auto t0 = Clock::now();
    harness::RunConfig cfg;
    cfg.checkpoint = p.path;
    cfg.domains = {"geo-hard", "photo"};
    cfg.samples_per_class = 2;
    cfg.seeds = {0, 1};
    cfg.methods = {engine::Method::zero_shot, engine::Method::tpt, engine::Method::metatpt, engine::Method::one_stage,
                   engine::Method::offline};
    cfg.adapt.n_views = 16;
    cfg.workers = 1;
    cfg.out = work / "det_serial_a";
    const auto a = harness::run_experiment(cfg);
    cfg.out = work / "det_serial_b";
    const auto b = harness::run_experiment(cfg);
    cfg.out = work / "det_parallel";
    cfg.workers = 8;
    const auto c = harness::run_experiment(cfg);
    const std::string ra = harness::canonical_results(a.results);
    const bool repeat = ra == harness::canonical_results(b.results);
    const bool parallel = ra == harness::canonical_results(c.results);
    report(8, "determinism", repeat && parallel && !ra.empty(),
           fmt("%zu records; serial repeat %s; serial vs 8 workers %s; %.0f s", a.records,
               repeat ? "identical" : "DIFFERENT", parallel ? "identical" : "DIFFERENT", seconds_since(t0)));
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("MTPT_LOG")) spdlog::set_level(spdlog::level::from_str(env));
    const fs::path work = MTPT_ACCEPTANCE_DIR;
    fs::create_directories(work);

    gradient_fidelity();
    warp_exactness();
    selection_oracle();
    ema_law();

    const auto t0 = Clock::now();
    const Pretrained p = pretrained(work);
    const auto heldout = bench::gen_split(bench::builtin_domain("source"), kHeldoutPerClass, derive_seed(0, 2));
    const auto geo = bench::gen_split(bench::builtin_domain("geo-hard"), kHeldoutPerClass, derive_seed(0, 2));
    const double src_acc = model::accuracy(heldout, p.theta0, p.model);
    const double geo_acc = model::accuracy(geo, p.theta0, p.model);
    std::printf("pretrained checkpoint %s: held-out source accuracy %.4f (need >= 0.90), geo-hard zero-shot %.4f "
                "(%.0f s)\n",
                p.path.filename().string().c_str(), src_acc, geo_acc, seconds_since(t0));
    if (src_acc < 0.90 || geo_acc >= src_acc) {
        std::printf("calibration FAIL: pretrained model does not meet the accuracy gates\n");
        ++failures;
    }

    accounting_and_hygiene(p);
    adaptation_efficacy(p);
    harness_completeness(p, work);
    determinism(p, work);

    std::printf("%s: %d failing\n", failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED", failures);
    return failures ? 1 : 0;
}
