#include "lbt/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace lbt {

namespace {

struct Color {
    double r, g, b;
};

constexpr Color kBackground{1.0, 1.0, 1.0};
constexpr Color kAxis{0.15, 0.15, 0.15};
constexpr Color kGrid{0.88, 0.88, 0.88};
const Color kPalette[] = {
    {0.122, 0.467, 0.706}, {1.000, 0.498, 0.055}, {0.173, 0.627, 0.173},
    {0.839, 0.153, 0.157}, {0.580, 0.404, 0.741}, {0.549, 0.337, 0.294},
    {0.890, 0.467, 0.761}, {0.498, 0.498, 0.498},
};

// 5x7 bitmap glyphs, one byte per row, low 5 bits used.
struct Glyph {
    char c;
    unsigned char rows[7];
};
constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'a', {0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F}},
    {'b', {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E}},
    {'c', {0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E}},
    {'d', {0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F}},
    {'e', {0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E}},
    {'f', {0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08}},
    {'g', {0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E}},
    {'h', {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11}},
    {'i', {0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E}},
    {'j', {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C}},
    {'k', {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12}},
    {'l', {0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'m', {0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11}},
    {'n', {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11}},
    {'o', {0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E}},
    {'p', {0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10}},
    {'q', {0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01}},
    {'r', {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10}},
    {'s', {0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E}},
    {'t', {0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06}},
    {'u', {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D}},
    {'v', {0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'w', {0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A}},
    {'x', {0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11}},
    {'y', {0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E}},
    {'z', {0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'/', {0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
};

const Glyph* find_glyph(char c) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    for (const Glyph& g : kFont)
        if (g.c == c) return &g;
    return nullptr;
}

class Canvas {
public:
    Canvas(int w, int h) : img_(w, h) {
        for (double& v : img_.px) v = 1.0;
    }

    int width() const { return img_.width; }
    int height() const { return img_.height; }

    void set(int x, int y, const Color& c) {
        if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
        img_.at(y, x, 0) = c.r;
        img_.at(y, x, 1) = c.g;
        img_.at(y, x, 2) = c.b;
    }

    void fill_rect(int x0, int y0, int x1, int y1, const Color& c) {
        for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
            for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x)
                set(x, y, c);
    }

    void line(double x0, double y0, double x1, double y1, const Color& c,
              int thickness = 1) {
        const double dx = x1 - x0, dy = y1 - y0;
        const int steps =
            std::max(1, static_cast<int>(std::ceil(std::max(std::abs(dx), std::abs(dy)))));
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / steps;
            const int px = static_cast<int>(std::lround(x0 + t * dx));
            const int py = static_cast<int>(std::lround(y0 + t * dy));
            for (int oy = 0; oy < thickness; ++oy)
                for (int ox = 0; ox < thickness; ++ox)
                    set(px + ox, py + oy, c);
        }
    }

    // scale 1 -> 6x8 cell per character (5x7 glyph + spacing).
    void text(int x, int y, const std::string& s, const Color& c, int scale = 1) {
        int cx = x;
        for (char ch : s) {
            const Glyph* g = find_glyph(ch);
            if (g) {
                for (int row = 0; row < 7; ++row)
                    for (int col = 0; col < 5; ++col)
                        if (g->rows[row] & (1 << (4 - col)))
                            for (int sy = 0; sy < scale; ++sy)
                                for (int sx = 0; sx < scale; ++sx)
                                    set(cx + col * scale + sx, y + row * scale + sy, c);
            }
            cx += 6 * scale;
        }
    }

    static int text_width(const std::string& s, int scale = 1) {
        return static_cast<int>(s.size()) * 6 * scale;
    }

    void save(const std::string& path) const { write_png(path, img_); }

private:
    Image img_;
};

std::string format_tick(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// Nice tick spacing: 1/2/5 times a power of ten covering the range.
std::vector<double> make_ticks(double lo, double hi, int target = 5) {
    if (!(hi > lo)) hi = lo + 1.0;
    const double raw = (hi - lo) / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    }
    std::vector<double> ticks;
    for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * step; t += step)
        ticks.push_back(std::abs(t) < step * 1e-6 ? 0.0 : t);
    return ticks;
}

struct Frame {
    int left, right, top, bottom;  // plot area in pixels
    double x_lo, x_hi, y_lo, y_hi;

    double px(double x) const {
        return left + (x - x_lo) / (x_hi - x_lo) * (right - left);
    }
    double py(double y) const {
        return bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top);
    }
};

void draw_frame(Canvas& canvas, Frame& frame, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                bool x_ticks = true) {
    if (frame.x_hi <= frame.x_lo) frame.x_hi = frame.x_lo + 1;
    if (frame.y_hi <= frame.y_lo) frame.y_hi = frame.y_lo + 1;

    canvas.text((canvas.width() - Canvas::text_width(title, 2)) / 2, 8, title,
                kAxis, 2);

    const auto y_ticks = make_ticks(frame.y_lo, frame.y_hi);
    if (!y_ticks.empty()) {
        frame.y_lo = std::min(frame.y_lo, y_ticks.front());
        frame.y_hi = std::max(frame.y_hi, y_ticks.back());
    }
    for (double t : y_ticks) {
        const int y = static_cast<int>(std::lround(frame.py(t)));
        canvas.line(frame.left, y, frame.right, y, kGrid);
        const std::string s = format_tick(t);
        canvas.text(frame.left - 8 - Canvas::text_width(s), y - 3, s, kAxis);
    }
    if (x_ticks) {
        const auto ticks = make_ticks(frame.x_lo, frame.x_hi, 6);
        for (double t : ticks) {
            if (t < frame.x_lo - 1e-9 || t > frame.x_hi + 1e-9) continue;
            const int x = static_cast<int>(std::lround(frame.px(t)));
            canvas.line(x, frame.top, x, frame.bottom, kGrid);
            const std::string s = format_tick(t);
            canvas.text(x - Canvas::text_width(s) / 2, frame.bottom + 8, s, kAxis);
        }
    }
    canvas.line(frame.left, frame.bottom, frame.right, frame.bottom, kAxis);
    canvas.line(frame.left, frame.top, frame.left, frame.bottom, kAxis);
    canvas.text((frame.left + frame.right - Canvas::text_width(x_label)) / 2,
                canvas.height() - 14, x_label, kAxis);
    canvas.text(8, frame.top - 16, y_label, kAxis);
}

void draw_legend(Canvas& canvas, const Frame& frame,
                 const std::vector<std::string>& labels) {
    int y = frame.top + 6;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Color& c = kPalette[i % std::size(kPalette)];
        const int x = frame.right - 150;
        canvas.fill_rect(x, y, x + 12, y + 7, c);
        canvas.text(x + 18, y, labels[i], kAxis);
        y += 14;
    }
}

}  // namespace

void plot_lines(const std::vector<PlotSeries>& series, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::string& path, int width, int height) {
    Canvas canvas(width, height);
    Frame frame{70, width - 20, 34, height - 48, 0, 1, 0, 1};

    bool any = false;
    double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            if (!any) {
                x_lo = x_hi = s.x[i];
                y_lo = y_hi = s.y[i];
                any = true;
            }
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            y_lo = std::min(y_lo, s.y[i]);
            y_hi = std::max(y_hi, s.y[i]);
        }
    }
    if (y_lo > 0 && y_lo < 0.25 * y_hi) y_lo = 0;  // anchor near-zero ranges
    frame.x_lo = x_lo;
    frame.x_hi = x_hi;
    frame.y_lo = y_lo;
    frame.y_hi = y_hi + 0.05 * (y_hi - y_lo);

    draw_frame(canvas, frame, title, x_label, y_label);
    for (std::size_t si = 0; si < series.size(); ++si) {
        const Color& c = kPalette[si % std::size(kPalette)];
        const auto& s = series[si];
        for (std::size_t i = 1; i < s.x.size(); ++i)
            canvas.line(frame.px(s.x[i - 1]), frame.py(s.y[i - 1]),
                        frame.px(s.x[i]), frame.py(s.y[i]), c, 2);
    }
    std::vector<std::string> labels;
    for (const auto& s : series) labels.push_back(s.label);
    draw_legend(canvas, frame, labels);
    canvas.save(path);
}

void plot_grouped_bars(const std::vector<std::string>& series_labels,
                       const std::vector<BarGroup>& groups,
                       const std::string& title, const std::string& y_label,
                       const std::string& path, int width, int height) {
    Canvas canvas(width, height);
    Frame frame{70, width - 20, 34, height - 48, 0, 1, 0, 1};

    double y_hi = 0;
    for (const auto& g : groups)
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            double v = g.values[i];
            if (i < g.errors.size()) v += g.errors[i];
            y_hi = std::max(y_hi, v);
        }
    frame.y_lo = 0;
    frame.y_hi = y_hi <= 0 ? 1 : 1.1 * y_hi;
    frame.x_lo = 0;
    frame.x_hi = static_cast<double>(groups.size());

    draw_frame(canvas, frame, title, "", y_label, false);

    const std::size_t n_series = series_labels.size();
    const double slot = 1.0 / (static_cast<double>(n_series) + 1.0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const BarGroup& g = groups[gi];
        for (std::size_t si = 0; si < g.values.size() && si < n_series; ++si) {
            const double x0 = gi + slot * (0.5 + si);
            const double x1 = x0 + slot * 0.9;
            const Color& c = kPalette[si % std::size(kPalette)];
            canvas.fill_rect(static_cast<int>(frame.px(x0)),
                             static_cast<int>(frame.py(g.values[si])),
                             static_cast<int>(frame.px(x1)),
                             static_cast<int>(frame.py(0)), c);
            if (si < g.errors.size() && g.errors[si] > 0) {
                const double xc = 0.5 * (x0 + x1);
                canvas.line(frame.px(xc), frame.py(g.values[si] - g.errors[si]),
                            frame.px(xc), frame.py(g.values[si] + g.errors[si]),
                            kAxis);
            }
        }
        canvas.text(static_cast<int>(frame.px(gi + 0.5)) -
                        Canvas::text_width(g.label) / 2,
                    frame.bottom + 8, g.label, kAxis);
    }
    draw_legend(canvas, frame, series_labels);
    canvas.save(path);
}

std::vector<std::string> plot_run_dir(const std::string& run_dir,
                                      const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::vector<std::string> written;

    const fs::path metrics_path = fs::path(run_dir) / "metrics.jsonl";
    if (fs::exists(metrics_path)) {
        std::ifstream in(metrics_path);
        std::string line;
        PlotSeries total{"total", {}, {}}, sup{"supervised", {}, {}},
            con{"con_loc", {}, {}}, unsup{"unsupervised", {}, {}};
        PlotSeries t50{"teacher ap50", {}, {}}, s50{"student ap50", {}, {}},
            tmap{"teacher map", {}, {}}, smap{"student map", {}, {}};
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            const double iter = j.at("iteration").get<double>();
            const json& l = j.at("losses");
            total.x.push_back(iter);
            total.y.push_back(l.at("total").get<double>());
            sup.x.push_back(iter);
            sup.y.push_back(l.at("rpn_cls").get<double>() +
                            l.at("rpn_reg").get<double>() +
                            l.at("roi_cls").get<double>() +
                            l.at("roi_reg").get<double>());
            con.x.push_back(iter);
            con.y.push_back(l.at("con_loc").get<double>());
            unsup.x.push_back(iter);
            unsup.y.push_back(l.at("unsup_rpn_cls").get<double>() +
                              l.at("unsup_roi_cls").get<double>());
            if (j.contains("eval")) {
                const json& e = j.at("eval");
                if (e.contains("teacher")) {
                    t50.x.push_back(iter);
                    t50.y.push_back(e.at("teacher").at("ap50").get<double>());
                    tmap.x.push_back(iter);
                    tmap.y.push_back(e.at("teacher").at("map").get<double>());
                }
                if (e.contains("student")) {
                    s50.x.push_back(iter);
                    s50.y.push_back(e.at("student").at("ap50").get<double>());
                    smap.x.push_back(iter);
                    smap.y.push_back(e.at("student").at("map").get<double>());
                }
            }
        }
        if (!total.x.empty()) {
            const std::string loss_path = (fs::path(out_dir) / "loss_curve.png").string();
            plot_lines({total, sup, con, unsup}, "training loss", "iteration",
                       "loss", loss_path);
            written.push_back(loss_path);
        }
        std::vector<PlotSeries> ap_series;
        for (const auto& s : {s50, t50, smap, tmap})
            if (!s.x.empty()) ap_series.push_back(s);
        if (!ap_series.empty()) {
            const std::string ap_path = (fs::path(out_dir) / "ap_curve.png").string();
            plot_lines(ap_series, "detection accuracy", "iteration", "ap", ap_path);
            written.push_back(ap_path);
        }
    }

    const fs::path results_path = fs::path(run_dir) / "results.json";
    if (fs::exists(results_path)) {
        const SweepResults results = load_sweep_results(results_path.string());
        std::vector<BarGroup> groups;
        for (double f : results.spec.fractions) {
            BarGroup g;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%g%%", 100.0 * f);
            g.label = buf;
            for (const auto& method : results.spec.methods) {
                const auto agg = results.aggregate(method, f);
                g.values.push_back(100.0 * agg.ap50_mean);
                g.errors.push_back(100.0 * agg.ap50_std);
            }
            groups.push_back(std::move(g));
        }
        const std::string bars_path = (fs::path(out_dir) / "sweep_bars.png").string();
        plot_grouped_bars(results.spec.methods, groups,
                          "ap50 by label fraction", "ap50", bars_path);
        written.push_back(bars_path);
    }

    if (written.empty())
        throw std::runtime_error("plot: nothing to plot in " + run_dir);
    return written;
}

}  // namespace lbt
