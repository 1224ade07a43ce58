#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>

#include <spdlog/spdlog.h>

#include "mtpt/binio.hpp"
#include "mtpt/harness.hpp"

namespace mtpt::harness {

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

/// Appends lines in index order no matter which worker finishes first.
class OrderedWriter {
  public:
    explicit OrderedWriter(std::ofstream& out) : out_(out) {}

    void push(std::size_t index, std::string line) {
        std::lock_guard lock(mu_);
        pending_.emplace(index, std::move(line));
        for (auto it = pending_.begin(); it != pending_.end() && it->first == next_; it = pending_.erase(it)) {
            out_ << it->second << '\n';
            ++next_;
        }
    }

  private:
    std::ofstream& out_;
    std::mutex mu_;
    std::map<std::size_t, std::string> pending_;
    std::size_t next_ = 0;
};

}  // namespace

std::vector<Variant> method_variants(const RunConfig& cfg) {
    std::vector<Variant> out;
    for (auto m : cfg.methods) {
        Variant v{std::string(engine::method_name(m)), cfg.adapt};
        v.adapt.method = m;
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<Variant> sweep_variants(const RunConfig& cfg, SweepKind kind) {
    std::vector<Variant> out;
    engine::AdaptConfig base = cfg.adapt;
    base.method = engine::Method::metatpt;
    switch (kind) {
        case SweepKind::lambda:
            for (double lk : cfg.lambda_grid) {
                for (double lv : cfg.lambda_grid) {
                    Variant v{"lK=" + num(lk) + "/lV=" + num(lv), base};
                    v.adapt.lambda_K = lk;
                    v.adapt.lambda_V = lv;
                    out.push_back(std::move(v));
                }
            }
            break;
        case SweepKind::rho:
            for (double r : cfg.rho_grid) {
                Variant v{"rho=" + num(r), base};
                v.adapt.loss.rho = r;
                out.push_back(std::move(v));
            }
            break;
        case SweepKind::views:
            for (std::size_t n : cfg.views_grid) {
                Variant v{"N=" + std::to_string(n), base};
                v.adapt.n_views = n;
                out.push_back(std::move(v));
            }
            break;
        case SweepKind::methods:
            for (auto m : {engine::Method::zero_shot, engine::Method::tpt, engine::Method::metatpt,
                           engine::Method::one_stage, engine::Method::offline}) {
                Variant v{std::string(engine::method_name(m)), cfg.adapt};
                v.adapt.method = m;
                out.push_back(std::move(v));
            }
            break;
        case SweepKind::loss_components: {
            Variant zs{"zero_shot", base};
            zs.adapt.method = engine::Method::zero_shot;
            out.push_back(zs);
            for (auto t : {losses::InnerTerms::entropy, losses::InnerTerms::discrepancy, losses::InnerTerms::both}) {
                Variant v{"inner=" + std::string(losses::name(t)), base};
                v.adapt.loss.inner_terms = t;
                v.adapt.loss.outer_terms = losses::OuterTerms::both;
                out.push_back(std::move(v));
            }
            for (auto t : {losses::OuterTerms::consistency, losses::OuterTerms::discrepancy, losses::OuterTerms::both}) {
                Variant v{"outer=" + std::string(losses::name(t)), base};
                v.adapt.loss.inner_terms = losses::InnerTerms::both;
                v.adapt.loss.outer_terms = t;
                out.push_back(std::move(v));
            }
            break;
        }
        case SweepKind::loss_types:
            for (auto s : {losses::SemanticDistance::euclidean, losses::SemanticDistance::cosine}) {
                for (auto p : {losses::PredictiveLoss::ce, losses::PredictiveLoss::kl}) {
                    Variant v{std::string(losses::name(p)) + "+" + std::string(losses::name(s)), base};
                    v.adapt.loss.predictive = p;
                    v.adapt.loss.semantic = s;
                    out.push_back(std::move(v));
                }
            }
            break;
    }
    return out;
}

std::uint64_t dataset_hash(const bench::Dataset& ds) {
    io::ByteWriter w;
    for (const auto& s : ds.samples) {
        w.u32(static_cast<std::uint32_t>(s.label));
        w.f64s(s.image.data());
    }
    return io::fnv1a64(w.buffer());
}

std::vector<Split> load_splits(const RunConfig& cfg, std::uint64_t run_seed) {
    std::vector<Split> out;
    if (!cfg.datasets.empty()) {
        for (const auto& path : cfg.datasets) {
            Split s;
            s.data = bench::load_dataset(path);
            s.domain = s.data.spec.name;
            s.source = path.generic_string();
            s.seed = s.data.seed;
            out.push_back(std::move(s));
        }
        return out;
    }
    const std::uint64_t seed = cfg.data_seed.value_or(run_seed);
    for (const auto& name : cfg.domains) {
        Split s;
        s.domain = name;
        s.source = "generated";
        s.seed = seed;
        s.data = bench::gen_split(bench::builtin_domain(name), cfg.samples_per_class, seed);
        out.push_back(std::move(s));
    }
    return out;
}

nlohmann::json make_record(const Variant& v, const Split& split, std::size_t index, std::uint64_t run_seed,
                           std::uint64_t config_hash, const engine::AdaptOutcome& o) {
    nlohmann::json r = {
        {"schema", kSchemaVersion},
        {"config_hash", io::hex64(config_hash)},
        {"variant", v.label},
        {"method", engine::method_name(v.adapt.method)},
        {"domain", split.domain},
        {"index", index},
        {"run_seed", run_seed},
        {"sample_seed", o.seed},
        {"label", o.label},
        {"zero_shot_pred", o.zero_shot_pred},
        {"pred", o.pred},
        {"correct", o.pred == o.label},
        {"inner_losses", o.inner_losses},
        {"inner_losses_after", o.inner_losses_after},
        {"outer_losses", o.outer_losses},
        {"entropy_before", o.entropy_before},
        {"entropy_after", o.entropy_after},
        {"phi_K_moved", o.phi_K_moved},
        {"phi_V_moved", o.phi_V_moved},
        {"counters",
         {{"inner", o.counters.inner}, {"ema", o.counters.ema}, {"outer", o.counters.outer}, {"joint", o.counters.joint}}},
        {"degenerate", o.degenerate},
        {"wall_ms", o.wall_ms},
    };
    if (o.degenerate) {
        r["degenerate_step"] = o.degenerate_step;
        r["degenerate_reason"] = o.degenerate_reason;
    }
    return r;
}

RunReport run_experiment(const RunConfig& cfg) { return run_experiment(cfg, method_variants(cfg)); }

RunReport run_experiment(const RunConfig& cfg, const std::vector<Variant>& variants) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    report.config_hash = cfg.hash();
    const auto ckpt_bytes = io::read_file(cfg.checkpoint);
    const auto ckpt = model::Checkpoint::deserialize(ckpt_bytes);
    const auto [model, theta0] = model::unpack_checkpoint(ckpt);

    std::filesystem::create_directories(cfg.out);
    report.results = cfg.out / "results.jsonl";
    report.manifest = cfg.out / "manifest.json";
    std::ofstream results(report.results, std::ios::binary | std::ios::trunc);
    if (!results) throw std::runtime_error("cannot write " + report.results.string());

    std::map<std::uint64_t, std::vector<Split>> splits;
    for (auto seed : cfg.seeds) splits.emplace(seed, load_splits(cfg, seed));

    Summary summary;
    for (const auto& v : variants) {
        v.adapt.validate();
        for (auto seed : cfg.seeds) {
            for (const auto& split : splits.at(seed)) {
                spdlog::info("{} seed {} {}: {} samples", v.label, seed, split.domain, split.data.samples.size());
                const auto& samples = split.data.samples;
                std::vector<nlohmann::json> records(samples.size());
                OrderedWriter writer(results);

                std::optional<engine::PhiPair> shared;
                if (v.adapt.method == engine::Method::offline) {
                    shared = engine::offline_shared_phis(split.data, theta0, model, v.adapt, seed, cfg.workers);
                }
                engine::AdaptConfig frozen_phis = v.adapt;
                frozen_phis.inner_steps = 0;

                std::mutex count_mu;
                engine::parallel_for(samples.size(), cfg.workers, [&](std::size_t i) {
                    const auto& s = samples[i];
                    const std::uint64_t ss = engine::sample_seed(seed, i);
                    nlohmann::json rec;
                    try {
                        engine::AdaptOutcome o;
                        if (shared) {
                            o = engine::adapt_with_phis(s.image, s.label, theta0, model, frozen_phis, *shared);
                            o.seed = ss;
                        } else {
                            o = engine::adapt_sample(s.image, s.label, theta0, model, v.adapt, ss);
                        }
                        rec = make_record(v, split, i, seed, report.config_hash, o);
                        if (o.degenerate) {
                            std::lock_guard lock(count_mu);
                            ++report.degenerate;
                            spdlog::warn("{} {} #{} degenerate at step {}: {}", v.label, split.domain, i,
                                         o.degenerate_step, o.degenerate_reason);
                        }
                    } catch (const std::exception& e) {
                        rec = {{"schema", kSchemaVersion}, {"config_hash", io::hex64(report.config_hash)},
                               {"variant", v.label},       {"method", engine::method_name(v.adapt.method)},
                               {"domain", split.domain},   {"index", i},
                               {"run_seed", seed},         {"sample_seed", ss},
                               {"error", e.what()}};
                        std::lock_guard lock(count_mu);
                        ++report.crashed;
                        spdlog::error("{} {} #{} crashed: {}", v.label, split.domain, i, e.what());
                    }
                    spdlog::debug("{} {} #{} done", v.label, split.domain, i);
                    writer.push(i, rec.dump());
                    records[i] = std::move(rec);
                });
                results.flush();
                for (const auto& r : records) summary.add(r, report.results.string());
                report.records += samples.size();
            }
        }
    }
    results.close();

    const std::string hash_line = "config_hash " + io::hex64(report.config_hash) + "\n";
    io::write_text(cfg.out / "summary.csv", summary.csv());
    io::write_text(cfg.out / "summary.txt", hash_line + summary.table());
    if (const auto& rows = summary.rows(); std::ranges::find(rows, "metatpt") != rows.end() && rows.size() > 1) {
        io::write_text(cfg.out / "orderings.csv", summary.orderings_csv());
    }

    nlohmann::json split_info = nlohmann::json::array();
    for (const auto& [seed, list] : splits) {
        for (const auto& s : list) {
            split_info.push_back({{"run_seed", seed},
                                  {"domain", s.domain},
                                  {"source", s.source},
                                  {"seed", s.seed},
                                  {"count", s.data.samples.size()},
                                  {"hash", io::hex64(dataset_hash(s.data))}});
        }
    }
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& v : variants) labels.push_back({{"label", v.label}, {"adapt", v.adapt}});
    const nlohmann::json manifest = {
        {"schema", kSchemaVersion},
        {"code_version", kCodeVersion},
        {"config_hash", io::hex64(report.config_hash)},
        {"config", cfg.to_json()},
        {"checkpoint",
         {{"path", cfg.checkpoint.generic_string()},
          {"hash", io::hex64(io::fnv1a64(ckpt_bytes))},
          {"heldout_accuracy", ckpt.metadata.value("heldout_accuracy", nlohmann::json(nullptr))}}},
        {"splits", split_info},
        {"variants", labels},
        {"records", report.records},
        {"degenerate", report.degenerate},
        {"crashed", report.crashed},
        {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
    };
    io::write_text(report.manifest, manifest.dump(2) + "\n");
    spdlog::info("wrote {} records to {}", report.records, report.results.string());
    return report;
}

SweepReport run_sweep(const RunConfig& cfg, SweepKind kind) {
    SweepReport out;
    out.run = run_experiment(cfg, sweep_variants(cfg, kind));
    const Summary s = summarize({out.run.results});
    out.csv = cfg.out / ("sweep_" + std::string(sweep_name(kind)) + ".csv");
    io::write_text(out.csv, s.long_csv(sweep_name(kind)));
    return out;
}

}  // namespace mtpt::harness
