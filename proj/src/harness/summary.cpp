#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mtpt/binio.hpp"
#include "mtpt/harness.hpp"

namespace mtpt::harness {

namespace {

std::string fixed(double v, int digits = 2) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string signed_fixed(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%+.2f", v);
    return buf;
}

std::string join(const std::set<std::string>& items, char sep) {
    std::string out;
    for (const auto& s : items) {
        if (!out.empty()) out += sep;
        out += s;
    }
    return out;
}

void append_unique(std::vector<std::string>& v, const std::string& s) {
    if (std::ranges::find(v, s) == v.end()) v.push_back(s);
}

double pct(std::size_t k, std::size_t n) { return n == 0 ? 0.0 : 100.0 * static_cast<double>(k) / static_cast<double>(n); }

}  // namespace

double Cell::accuracy() const { return pct(correct, total); }
double Cell::zero_shot_accuracy() const { return pct(zero_shot_correct, total); }

void Summary::add(const nlohmann::json& r, const std::string& origin) {
    const auto schema = r.value("schema", -1);
    if (schema != kSchemaVersion) {
        throw std::runtime_error(origin + ": schema version " + std::to_string(schema) + ", expected " +
                                 std::to_string(kSchemaVersion));
    }
    if (r.contains("error")) return;
    const std::string row = r.at("variant");
    const std::string domain = r.at("domain");
    const std::uint64_t seed = r.at("run_seed");
    const int label = r.at("label");
    append_unique(rows_, row);
    append_unique(domains_, domain);
    hashes_[row].insert(r.at("config_hash").get<std::string>());
    for (Cell* c : {&cells_[{row, domain}], &seed_cells_[{row, seed, domain}]}) {
        ++c->total;
        c->correct += r.at("pred").get<int>() == label;
        c->zero_shot_correct += r.at("zero_shot_pred").get<int>() == label;
    }
}

std::vector<std::uint64_t> Summary::seeds() const {
    std::set<std::uint64_t> s;
    for (const auto& [key, cell] : seed_cells_) s.insert(std::get<1>(key));
    return {s.begin(), s.end()};
}

bool Summary::has(const std::string& row, const std::string& domain) const { return cells_.contains({row, domain}); }

Cell Summary::cell(const std::string& row, const std::string& domain) const {
    const auto it = cells_.find({row, domain});
    return it == cells_.end() ? Cell{} : it->second;
}

double Summary::average(const std::string& row) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& d : domains_) {
        if (!has(row, d)) continue;
        sum += cell(row, d).accuracy();
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double Summary::zero_shot_average(const std::string& row) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& d : domains_) {
        if (!has(row, d)) continue;
        sum += cell(row, d).zero_shot_accuracy();
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double Summary::seed_average(const std::string& row, std::uint64_t seed) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& d : domains_) {
        const auto it = seed_cells_.find({row, seed, d});
        if (it == seed_cells_.end()) continue;
        sum += it->second.accuracy();
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::string Summary::csv() const {
    std::ostringstream out;
    out << "config_hash,method";
    for (const auto& d : domains_) out << ',' << d;
    out << ",Average,zero_shot_Average,delta_vs_zero_shot\n";
    for (const auto& row : rows_) {
        out << join(hashes_.at(row), '+') << ',' << row;
        for (const auto& d : domains_) out << ',' << (has(row, d) ? fixed(cell(row, d).accuracy(), 4) : "");
        const double avg = average(row), zs = zero_shot_average(row);
        out << ',' << fixed(avg, 4) << ',' << fixed(zs, 4) << ',' << fixed(avg - zs, 4) << '\n';
    }
    return out.str();
}

std::string Summary::table() const {
    std::size_t width = 6;
    for (const auto& r : rows_) width = std::max(width, r.size());
    std::size_t col = 7;
    for (const auto& d : domains_) col = std::max(col, d.size());
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    auto rpad = [](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };

    std::ostringstream out;
    out << pad("Method", width);
    for (const auto& d : domains_) out << "  " << rpad(d, col);
    out << "  " << rpad("Average", col) << "  " << rpad("vs ZS", 7) << '\n';
    out << std::string(width + (domains_.size() + 1) * (col + 2) + 9, '-') << '\n';
    for (const auto& row : rows_) {
        out << pad(row, width);
        for (const auto& d : domains_) out << "  " << rpad(has(row, d) ? fixed(cell(row, d).accuracy()) : "-", col);
        const double avg = average(row);
        out << "  " << rpad(fixed(avg), col) << "  " << rpad(signed_fixed(avg - zero_shot_average(row)), 7) << '\n';
    }
    return out.str();
}

std::string Summary::orderings_csv() const {
    std::ostringstream out;
    out << "seed,comparison,delta\n";
    const auto has_row = [&](const std::string& r) { return std::ranges::find(rows_, r) != rows_.end(); };
    if (!has_row("metatpt")) return out.str();
    for (const std::string other : {"one_stage", "offline"}) {
        if (!has_row(other)) continue;
        double total = 0.0;
        const auto seeds_list = seeds();
        for (auto seed : seeds_list) {
            const double d = seed_average("metatpt", seed) - seed_average(other, seed);
            total += d;
            out << seed << ",metatpt-" << other << ',' << fixed(d, 4) << '\n';
        }
        out << "mean,metatpt-" << other << ',' << fixed(total / static_cast<double>(seeds_list.size()), 4) << '\n';
    }
    return out.str();
}

std::string Summary::long_csv(std::string_view sweep) const {
    std::ostringstream out;
    out << "config_hash,sweep,point,domain,n,accuracy\n";
    for (const auto& row : rows_) {
        const std::string h = join(hashes_.at(row), '+');
        for (const auto& d : domains_) {
            if (!has(row, d)) continue;
            const Cell c = cell(row, d);
            out << h << ',' << sweep << ',' << row << ',' << d << ',' << c.total << ',' << fixed(c.accuracy(), 4)
                << '\n';
        }
        out << h << ',' << sweep << ',' << row << ",Average,," << fixed(average(row), 4) << '\n';
    }
    return out.str();
}

Summary summarize(const std::vector<std::filesystem::path>& paths) {
    Summary s;
    for (const auto& path : paths) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot read " + path.string());
        std::string line;
        for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
            if (line.empty()) continue;
            nlohmann::json r;
            try {
                r = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
            }
            s.add(r, path.string());
        }
    }
    return s;
}

std::string canonical_results(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line, out;
    while (std::getline(in, line)) {
        auto r = nlohmann::json::parse(line);
        r.erase("wall_ms");
        out += r.dump();
        out += '\n';
    }
    return out;
}

}  // namespace mtpt::harness
