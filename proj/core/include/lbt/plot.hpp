#pragma once

#include <string>
#include <vector>

#include "lbt/image.hpp"
#include "lbt/sweep.hpp"

namespace lbt {

// Static raster charts, self-contained (no plotting dependency): line charts
// for training curves and grouped bars for sweep tables.

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

void plot_lines(const std::vector<PlotSeries>& series, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::string& path, int width = 960, int height = 600);

struct BarGroup {
    std::string label;                // x axis group label
    std::vector<double> values;       // one per series
    std::vector<double> errors;       // optional whiskers, same length or empty
};

void plot_grouped_bars(const std::vector<std::string>& series_labels,
                       const std::vector<BarGroup>& groups,
                       const std::string& title, const std::string& y_label,
                       const std::string& path, int width = 960,
                       int height = 600);

// Reads a training run directory (metrics.jsonl) and emits loss_curve.png and
// ap_curve.png; if the directory holds sweep results.json, also sweep_bars.png.
// Returns the list of files written.
std::vector<std::string> plot_run_dir(const std::string& run_dir,
                                      const std::string& out_dir);

}  // namespace lbt
