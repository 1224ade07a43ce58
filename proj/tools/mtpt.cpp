// Command-line front end: gen, pretrain, run, sweep, report.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mtpt/binio.hpp"
#include "mtpt/harness.hpp"
#include "mtpt/model.hpp"

namespace fs = std::filesystem;
using namespace mtpt;

namespace {

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mtpt");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("MTPT_LOG")) {
        const auto level = spdlog::level::from_str(env);
        // from_str maps unknown names to "off"; only accept it when asked for.
        if (level != spdlog::level::off || std::string_view(env) == "off") {
            spdlog::set_level(level);
        } else {
            spdlog::warn("ignoring unknown MTPT_LOG level '{}'", env);
        }
    }
}

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::string out;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool need_config) {
    auto* c = cmd->add_option("--config", f.config, "Run configuration file (key = value)");
    if (need_config) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "Seed (overrides the config's seeds)");
    cmd->add_option("--workers", f.workers, "Worker threads (0 = all cores)");
    cmd->add_option("--out", f.out, "Output path");
    cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file (overrides the config)");
}

harness::RunConfig resolve_config(const CommonFlags& f) {
    harness::RunConfig cfg = harness::load_config(f.config);
    if (f.seed) cfg.seeds = {*f.seed};
    if (f.workers) cfg.workers = *f.workers;
    if (!f.out.empty()) cfg.out = f.out;
    if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
    return cfg;
}

int cmd_gen(const CommonFlags& f, const std::vector<std::string>& domains, std::size_t per_class) {
    const fs::path out = f.out.empty() ? fs::path("data") : fs::path(f.out);
    const std::uint64_t seed = f.seed.value_or(0);
    std::vector<bench::DomainSpec> specs;
    if (domains.empty()) {
        specs = bench::builtin_suite();
    } else {
        for (const auto& d : domains) specs.push_back(bench::builtin_domain(d));
    }
    for (const auto& spec : specs) {
        nlohmann::json manifest;
        const auto ds = bench::gen_split(spec, per_class, seed, &manifest);
        const fs::path file = out / (spec.name + ".mtpd");
        bench::save_dataset(ds, file);
        io::write_text(out / (spec.name + ".manifest.json"), manifest.dump(2) + "\n");
        spdlog::info("{}: {} samples -> {}", spec.name, ds.samples.size(), file.string());
    }
    return 0;
}

int cmd_pretrain(const CommonFlags& f, std::size_t per_class, std::size_t heldout_per_class,
                 model::PretrainConfig pc) {
    pc.seed = f.seed.value_or(0);
    const fs::path out = f.out.empty() ? fs::path("checkpoint.mtpt") : fs::path(f.out);
    const auto source = bench::builtin_domain("source");
    const auto train = bench::gen_split(source, per_class, derive_seed(pc.seed, 1));
    const auto heldout = bench::gen_split(source, heldout_per_class, derive_seed(pc.seed, 2));
    spdlog::info("pretraining on {} source images for {} epochs", train.samples.size(), pc.epochs);
    auto result = model::pretrain_source(train, heldout, pc, [](std::size_t epoch, double loss) {
        spdlog::info("epoch {:3d}  loss {:.4f}", epoch, loss);
    });
    result.checkpoint.save(out);
    spdlog::info("held-out source accuracy {:.4f}; checkpoint -> {}", result.heldout_accuracy, out.string());
    std::cout << "heldout_accuracy " << result.heldout_accuracy << '\n';
    return 0;
}

int cmd_run(const CommonFlags& f) {
    const auto cfg = resolve_config(f);
    const auto report = harness::run_experiment(cfg);
    const auto text = io::read_file(cfg.out / "summary.txt");
    std::cout.write(reinterpret_cast<const char*>(text.data()), static_cast<std::streamsize>(text.size()));
    if (report.degenerate) spdlog::warn("{} degenerate samples", report.degenerate);
    if (report.crashed) {
        spdlog::error("{} samples crashed", report.crashed);
        return 1;
    }
    return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& kind) {
    const auto cfg = resolve_config(f);
    const auto report = harness::run_sweep(cfg, harness::parse_sweep(kind));
    const auto text = io::read_file(cfg.out / "summary.txt");
    std::cout.write(reinterpret_cast<const char*>(text.data()), static_cast<std::streamsize>(text.size()));
    spdlog::info("long-form table -> {}", report.csv.string());
    return report.run.crashed ? 1 : 0;
}

int cmd_report(const CommonFlags& f, const std::vector<std::string>& inputs) {
    std::vector<fs::path> paths(inputs.begin(), inputs.end());
    const auto summary = harness::summarize(paths);
    std::cout << summary.table();
    if (!f.out.empty()) {
        const fs::path out = f.out;
        io::write_text(out / "summary.csv", summary.csv());
        io::write_text(out / "summary.txt", summary.table());
        io::write_text(out / "orderings.csv", summary.orderings_csv());
        spdlog::info("tables -> {}", out.string());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Test-time prompt tuning with learnable augmentations"};
    app.require_subcommand(1);

    CommonFlags gen_f, pre_f, run_f, sweep_f, rep_f;

    auto* gen = app.add_subcommand("gen", "Render benchmark splits to .mtpd files");
    add_common(gen, gen_f, false);
    std::vector<std::string> gen_domains;
    std::size_t gen_per_class = 50;
    gen->add_option("--domain", gen_domains, "Built-in domain (repeatable; default: all)");
    gen->add_option("--per-class", gen_per_class, "Samples per class");

    auto* pre = app.add_subcommand("pretrain", "Train the model on the source domain");
    add_common(pre, pre_f, false);
    std::size_t pre_per_class = 500, pre_heldout = 50;
    model::PretrainConfig pc;
    pre->add_option("--per-class", pre_per_class, "Training images per class");
    pre->add_option("--heldout-per-class", pre_heldout, "Held-out images per class");
    pre->add_option("--epochs", pc.epochs, "Epochs");
    pre->add_option("--lr", pc.lr, "Base learning rate");

    auto* run = app.add_subcommand("run", "Adapt target splits and write results.jsonl");
    add_common(run, run_f, true);

    auto* sweep = app.add_subcommand("sweep", "Run a hyperparameter or ablation grid");
    add_common(sweep, sweep_f, true);
    std::string sweep_kind = "lambda";
    sweep->add_option("--kind", sweep_kind, "lambda | rho | views | methods | loss_components | loss_types");

    auto* rep = app.add_subcommand("report", "Summarize results.jsonl files");
    add_common(rep, rep_f, false);
    std::vector<std::string> rep_inputs;
    rep->add_option("results", rep_inputs, "results.jsonl files")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(gen_f, gen_domains, gen_per_class);
        if (pre->parsed()) return cmd_pretrain(pre_f, pre_per_class, pre_heldout, pc);
        if (run->parsed()) return cmd_run(run_f);
        if (sweep->parsed()) return cmd_sweep(sweep_f, sweep_kind);
        if (rep->parsed()) return cmd_report(rep_f, rep_inputs);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
    return 0;
}
