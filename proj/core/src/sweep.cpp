#include "lbt/sweep.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace lbt {

void SweepSpec::validate() const {
    if (fractions.empty() || methods.empty() || seeds.empty())
        throw std::invalid_argument("sweep: fractions, methods and seeds required");
    for (double f : fractions)
        if (!(f > 0.0 && f < 1.0))
            throw std::invalid_argument("sweep: fractions must be in (0,1)");
    for (const auto& m : methods)
        if (m != "supervised_only" && m != "burn_in_plus_conloc" &&
            m != "full_lower_biased")
            throw std::invalid_argument("sweep: unknown method " + m);
}

std::string sweep_spec_to_json_string(const SweepSpec& spec) {
    json j = {{"fractions", spec.fractions},
              {"methods", spec.methods},
              {"seeds", spec.seeds},
              {"train", json::parse(train_config_to_json_string(spec.base))}};
    return j.dump(2) + "\n";
}

SweepSpec sweep_spec_from_json_string(const std::string& text) {
    json j = json::parse(text);
    SweepSpec spec;
    spec.fractions = j.value("fractions", spec.fractions);
    spec.methods = j.value("methods", spec.methods);
    spec.seeds = j.value("seeds", spec.seeds);
    if (j.contains("train"))
        spec.base = train_config_from_json_string(j.at("train").dump());
    spec.validate();
    return spec;
}

TrainConfig method_config(const TrainConfig& base, const std::string& method,
                          double fraction, std::uint64_t seed) {
    TrainConfig cfg = base;
    cfg.label_fraction = fraction;
    cfg.seed = seed;
    if (method == "supervised_only") {
        cfg.disable_mutual = true;
        cfg.disable_con_loc = true;
        cfg.burn_in_iterations = cfg.total_iterations;
    } else if (method == "burn_in_plus_conloc") {
        cfg.disable_mutual = true;
        cfg.disable_con_loc = false;
        cfg.burn_in_iterations = cfg.total_iterations;
    } else if (method == "full_lower_biased") {
        cfg.disable_mutual = false;
        cfg.disable_con_loc = false;
    } else {
        throw std::invalid_argument("unknown method: " + method);
    }
    return cfg;
}

SweepResults::Aggregate SweepResults::aggregate(const std::string& method,
                                                double fraction) const {
    Aggregate agg;
    double sum50 = 0, sum50_sq = 0, sum_map = 0, sum_map_sq = 0;
    for (const SweepCell& cell : cells) {
        if (cell.method != method || cell.fraction != fraction) continue;
        sum50 += cell.ap50;
        sum50_sq += cell.ap50 * cell.ap50;
        sum_map += cell.map;
        sum_map_sq += cell.map * cell.map;
        ++agg.n;
    }
    if (agg.n == 0) return agg;
    const double n = agg.n;
    agg.ap50_mean = sum50 / n;
    agg.map_mean = sum_map / n;
    agg.ap50_std = std::sqrt(std::max(0.0, sum50_sq / n - agg.ap50_mean * agg.ap50_mean));
    agg.map_std = std::sqrt(std::max(0.0, sum_map_sq / n - agg.map_mean * agg.map_mean));
    return agg;
}

namespace {

std::string cell_dir_name(const std::string& method, double fraction,
                          std::uint64_t seed) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s_f%.4f_s%llu", method.c_str(), fraction,
                  static_cast<unsigned long long>(seed));
    return buf;
}

}  // namespace

SweepResults run_sweep(const SweepSpec& spec, const Dataset& dataset,
                       const std::string& out_dir, int jobs) {
    spec.validate();
    fs::create_directories(fs::path(out_dir) / "cells");

    SweepResults results;
    results.spec = spec;
    for (const auto& method : spec.methods)
        for (double fraction : spec.fractions)
            for (std::uint64_t seed : spec.seeds) {
                SweepCell cell;
                cell.method = method;
                cell.fraction = fraction;
                cell.seed = seed;
                cell.run_dir = (fs::path(out_dir) / "cells" /
                                cell_dir_name(method, fraction, seed))
                                   .string();
                results.cells.push_back(std::move(cell));
            }

    // Each cell is independent and owns its run directory; workers pull from
    // a shared index.
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= results.cells.size()) return;
            SweepCell& cell = results.cells[i];
            const TrainConfig cfg =
                method_config(spec.base, cell.method, cell.fraction, cell.seed);
            const TrainResult r = train(cfg, dataset, cell.run_dir);
            const EvalReport& report =
                r.final_teacher_eval ? *r.final_teacher_eval : r.final_student_eval;
            cell.ap50 = report.ap50;
            cell.map = report.ap50_95;
        }
    };

    jobs = std::max(1, jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    write_sweep_outputs(results, out_dir);
    return results;
}

void write_sweep_outputs(const SweepResults& results, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const SweepSpec& spec = results.spec;

    json cells = json::array();
    for (const SweepCell& c : results.cells)
        cells.push_back({{"method", c.method},
                         {"fraction", c.fraction},
                         {"seed", c.seed},
                         {"ap50", c.ap50},
                         {"map", c.map},
                         {"run_dir", c.run_dir}});
    json aggregates = json::array();
    for (const auto& method : spec.methods)
        for (double fraction : spec.fractions) {
            const auto agg = results.aggregate(method, fraction);
            aggregates.push_back({{"method", method},
                                  {"fraction", fraction},
                                  {"ap50_mean", agg.ap50_mean},
                                  {"ap50_std", agg.ap50_std},
                                  {"map_mean", agg.map_mean},
                                  {"map_std", agg.map_std},
                                  {"seeds", agg.n}});
        }
    json j = {{"spec", json::parse(sweep_spec_to_json_string(spec))},
              {"cells", std::move(cells)},
              {"aggregates", std::move(aggregates)}};
    {
        std::ofstream out(fs::path(out_dir) / "results.json", std::ios::binary);
        out << j.dump(2) << "\n";
    }

    // Long form, one row per cell.
    {
        std::ofstream out(fs::path(out_dir) / "results.csv", std::ios::binary);
        out << "method,fraction,seed,ap50,map\n";
        char buf[256];
        for (const SweepCell& c : results.cells) {
            std::snprintf(buf, sizeof(buf), "%s,%.4f,%llu,%.6f,%.6f\n",
                          c.method.c_str(), c.fraction,
                          static_cast<unsigned long long>(c.seed), c.ap50, c.map);
            out << buf;
        }
    }

    // Presentation table: methods as rows, fractions as columns, mean±std.
    {
        std::ofstream out(fs::path(out_dir) / "table.csv", std::ios::binary);
        char buf[256];
        for (const char* metric : {"ap50", "map"}) {
            out << metric;
            for (double f : spec.fractions) {
                std::snprintf(buf, sizeof(buf), ",%.1f%%", 100.0 * f);
                out << buf;
            }
            out << "\n";
            for (const auto& method : spec.methods) {
                out << method;
                for (double f : spec.fractions) {
                    const auto agg = results.aggregate(method, f);
                    const double mean = metric == std::string("ap50")
                                            ? agg.ap50_mean
                                            : agg.map_mean;
                    const double sd = metric == std::string("ap50")
                                          ? agg.ap50_std
                                          : agg.map_std;
                    std::snprintf(buf, sizeof(buf), ",%.2f±%.2f", 100.0 * mean,
                                  100.0 * sd);
                    out << buf;
                }
                out << "\n";
            }
            out << "\n";
        }
    }
}

SweepResults load_sweep_results(const std::string& json_path) {
    std::ifstream in(json_path);
    if (!in) throw std::runtime_error("cannot open " + json_path);
    json j = json::parse(in);
    SweepResults results;
    results.spec = sweep_spec_from_json_string(j.at("spec").dump());
    for (const auto& c : j.at("cells")) {
        SweepCell cell;
        cell.method = c.at("method").get<std::string>();
        cell.fraction = c.at("fraction").get<double>();
        cell.seed = c.at("seed").get<std::uint64_t>();
        cell.ap50 = c.at("ap50").get<double>();
        cell.map = c.at("map").get<double>();
        cell.run_dir = c.value("run_dir", std::string{});
        results.cells.push_back(std::move(cell));
    }
    return results;
}

}  // namespace lbt
