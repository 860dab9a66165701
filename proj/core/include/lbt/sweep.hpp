#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbt/trainer.hpp"

namespace lbt {

// Label-fraction experiment grid: methods x fractions x seeds. Evaluated
// metric per cell is the final eval of the teacher when one exists, else the
// trained model itself.
struct SweepSpec {
    std::vector<double> fractions = {0.01, 0.02, 0.05, 0.10, 0.20};
    std::vector<std::string> methods = {"supervised_only", "burn_in_plus_conloc",
                                        "full_lower_biased"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    TrainConfig base;

    void validate() const;
};

std::string sweep_spec_to_json_string(const SweepSpec& spec);
SweepSpec sweep_spec_from_json_string(const std::string& text);

// Applies a method's ablation switches to a copy of the base config.
TrainConfig method_config(const TrainConfig& base, const std::string& method,
                          double fraction, std::uint64_t seed);

struct SweepCell {
    std::string method;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    double ap50 = 0.0;
    double map = 0.0;
    std::string run_dir;
};

struct SweepResults {
    SweepSpec spec;
    std::vector<SweepCell> cells;

    // Mean and standard deviation over seeds for one (method, fraction) cell.
    struct Aggregate {
        double ap50_mean = 0, ap50_std = 0;
        double map_mean = 0, map_std = 0;
        int n = 0;
    };
    Aggregate aggregate(const std::string& method, double fraction) const;
};

SweepResults run_sweep(const SweepSpec& spec, const Dataset& dataset,
                       const std::string& out_dir, int jobs = 1);

// results.json (full cells + aggregates), results.csv (long form) and
// table.csv (methods x fractions, "mean±std" per cell).
void write_sweep_outputs(const SweepResults& results, const std::string& out_dir);

SweepResults load_sweep_results(const std::string& json_path);

}  // namespace lbt
