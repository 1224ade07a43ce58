#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtpt/benchgen.hpp"
#include "mtpt/engine.hpp"

namespace mtpt::harness {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kCodeVersion = "0.1.0";

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class SweepKind { lambda, rho, views, methods, loss_components, loss_types };

std::string_view sweep_name(SweepKind k);
SweepKind parse_sweep(std::string_view s);

struct RunConfig {
    std::filesystem::path checkpoint;
    /// Saved target splits. When empty, `domains` are generated in memory.
    std::vector<std::filesystem::path> datasets;
    std::vector<std::string> domains{"source", "geo-mild", "geo-hard", "photo", "mixed"};
    std::size_t samples_per_class = 50;
    /// Split seed for generated domains; follows the run seed when unset.
    std::optional<std::uint64_t> data_seed;
    std::vector<engine::Method> methods{engine::Method::metatpt};
    std::vector<std::uint64_t> seeds{0};
    engine::AdaptConfig adapt;
    std::vector<double> lambda_grid{0.5, 1.0, 2.0};
    std::vector<double> rho_grid{0.01, 0.05, 0.1, 0.3, 0.5, 0.9};
    std::vector<std::size_t> views_grid{8, 16, 32, 64};
    std::size_t workers = 1;
    std::filesystem::path out = "out";

    nlohmann::json to_json() const;
    /// FNV-1a of the canonical JSON without `workers` and `out`.
    std::uint64_t hash() const;
    /// Throws ConfigError on invalid values or missing files.
    void validate() const;
};

/// `key = value` lines; `#` starts a comment; lists are comma separated.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// One adaptation setting inside a run. `label` names its summary row.
struct Variant {
    std::string label;
    engine::AdaptConfig adapt;
};

std::vector<Variant> method_variants(const RunConfig& cfg);
std::vector<Variant> sweep_variants(const RunConfig& cfg, SweepKind kind);

struct Split {
    std::string domain;
    std::string source;  // file path or "generated"
    std::uint64_t seed = 0;
    bench::Dataset data;
};

std::vector<Split> load_splits(const RunConfig& cfg, std::uint64_t run_seed);

/// Hash of labels and pixels.
std::uint64_t dataset_hash(const bench::Dataset& ds);

nlohmann::json make_record(const Variant& v, const Split& split, std::size_t index, std::uint64_t run_seed,
                           std::uint64_t config_hash, const engine::AdaptOutcome& o);

struct RunReport {
    std::size_t records = 0;
    std::size_t degenerate = 0;
    std::size_t crashed = 0;
    std::uint64_t config_hash = 0;
    std::filesystem::path results;
    std::filesystem::path manifest;
};

/// Writes <out>/results.jsonl and <out>/manifest.json, plus summary.csv and
/// summary.txt. Records are ordered by variant, seed, domain, sample index
/// regardless of the worker count.
RunReport run_experiment(const RunConfig& cfg, const std::vector<Variant>& variants);
RunReport run_experiment(const RunConfig& cfg);

struct Cell {
    std::size_t total = 0;
    std::size_t correct = 0;
    std::size_t zero_shot_correct = 0;
    double accuracy() const;            // percent
    double zero_shot_accuracy() const;  // percent
};

/// Accuracy tables: one row per variant label, one column per domain.
class Summary {
  public:
    void add(const nlohmann::json& record, const std::string& origin);

    const std::vector<std::string>& rows() const { return rows_; }
    const std::vector<std::string>& domains() const { return domains_; }
    std::vector<std::uint64_t> seeds() const;
    bool has(const std::string& row, const std::string& domain) const;
    Cell cell(const std::string& row, const std::string& domain) const;
    /// Mean over the row's domains, percent.
    double average(const std::string& row) const;
    double zero_shot_average(const std::string& row) const;
    double seed_average(const std::string& row, std::uint64_t seed) const;

    std::string csv() const;
    std::string table() const;
    /// Per-seed deltas of metatpt against one_stage and offline (when present).
    std::string orderings_csv() const;
    /// Long form: sweep, point, domain, accuracy; includes an Average domain.
    std::string long_csv(std::string_view sweep) const;

  private:
    std::vector<std::string> rows_;
    std::vector<std::string> domains_;
    std::map<std::string, std::set<std::string>> hashes_;
    std::map<std::pair<std::string, std::string>, Cell> cells_;
    std::map<std::tuple<std::string, std::uint64_t, std::string>, Cell> seed_cells_;
};

/// Reads JSONL result files; throws naming the file on a schema mismatch.
Summary summarize(const std::vector<std::filesystem::path>& paths);

/// results.jsonl with timing fields removed, for determinism comparisons.
std::string canonical_results(const std::filesystem::path& path);

struct SweepReport {
    RunReport run;
    std::filesystem::path csv;
};

/// Runs every grid point of `kind` on shared splits and seeds, then writes
/// <out>/sweep_<kind>.csv.
SweepReport run_sweep(const RunConfig& cfg, SweepKind kind);

}  // namespace mtpt::harness
