#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "csv.hpp"
#include "error.hpp"

namespace massive {

enum class PlotKind { magnitude_by_layer, metric_by_k, p_by_step };

inline PlotKind parse_plot_kind(const std::string& s) {
    if (s == "magnitude_by_layer") return PlotKind::magnitude_by_layer;
    if (s == "metric_by_k") return PlotKind::metric_by_k;
    if (s == "p_by_step") return PlotKind::p_by_step;
    throw InputError("unknown plot kind '" + s + "' (magnitude_by_layer, metric_by_k, p_by_step)");
}

inline const char* to_string(PlotKind k) {
    switch (k) {
    case PlotKind::magnitude_by_layer: return "magnitude_by_layer";
    case PlotKind::metric_by_k: return "metric_by_k";
    case PlotKind::p_by_step: return "p_by_step";
    }
    return "?";
}

// Picks the kind from the header when the caller does not name one.
inline PlotKind infer_plot_kind(const CsvTable& t) {
    if (t.has("state_kind")) return PlotKind::magnitude_by_layer;
    if (t.has("k")) return PlotKind::metric_by_k;
    if (t.has("step")) return PlotKind::p_by_step;
    throw InputError("cannot tell the plot kind from columns; pass --kind");
}

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string fmt_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

inline constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                          "#9467bd", "#8c564b", "#e377c2", "#17becf"};

} // namespace detail

// Line chart with one polyline per series; output is a pure function of the input.
inline std::string render_svg(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                              const std::string& ylabel) {
    constexpr double W = 720, H = 440, left = 70, right = 170, top = 40, bottom = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    }
    if (!(x0 <= x1)) {
        throw InputError("nothing to plot");
    }
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pw = W - left - right, ph = H - top - bottom;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + (y1 - y) / (y1 - y0) * ph; };

    std::string o;
    o += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt_tick(W) + "\" height=\"" +
         detail::fmt_tick(H) + "\" viewBox=\"0 0 " + detail::fmt_tick(W) + " " + detail::fmt_tick(H) + "\">\n";
    o += "<rect x=\"0\" y=\"0\" width=\"" + detail::fmt_tick(W) + "\" height=\"" + detail::fmt_tick(H) +
         "\" fill=\"white\"/>\n";
    o += "<text x=\"" + detail::fmt(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
         detail::xml_escape(title) + "</text>\n";
    o += "<g stroke=\"black\" fill=\"none\">\n";
    o += "<line x1=\"" + detail::fmt(left) + "\" y1=\"" + detail::fmt(top + ph) + "\" x2=\"" +
         detail::fmt(left + pw) + "\" y2=\"" + detail::fmt(top + ph) + "\"/>\n";
    o += "<line x1=\"" + detail::fmt(left) + "\" y1=\"" + detail::fmt(top) + "\" x2=\"" + detail::fmt(left) +
         "\" y2=\"" + detail::fmt(top + ph) + "\"/>\n";
    o += "</g>\n<g font-size=\"11\" fill=\"black\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4, fy = y0 + (y1 - y0) * i / 4;
        o += "<text x=\"" + detail::fmt(sx(fx)) + "\" y=\"" + detail::fmt(top + ph + 16) +
             "\" text-anchor=\"middle\">" + detail::fmt_tick(fx) + "</text>\n";
        o += "<text x=\"" + detail::fmt(left - 6) + "\" y=\"" + detail::fmt(sy(fy) + 4) +
             "\" text-anchor=\"end\">" + detail::fmt_tick(fy) + "</text>\n";
    }
    o += "<text x=\"" + detail::fmt(left + pw / 2) + "\" y=\"" + detail::fmt(H - 10) +
         "\" text-anchor=\"middle\">" + detail::xml_escape(xlabel) + "</text>\n";
    o += "<text x=\"16\" y=\"" + detail::fmt(top + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         detail::fmt(top + ph / 2) + ")\">" + detail::xml_escape(ylabel) + "</text>\n";
    o += "</g>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* colour = detail::palette[i % std::size(detail::palette)];
        o += "<polyline data-series=\"" + detail::xml_escape(series[i].name) + "\" fill=\"none\" stroke=\"" + colour +
             "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t j = 0; j < series[i].points.size(); ++j) {
            if (j) o += ' ';
            o += detail::fmt(sx(series[i].points[j].first)) + "," + detail::fmt(sy(series[i].points[j].second));
        }
        o += "\"/>\n";
        const double ly = top + 14 + 16 * static_cast<double>(i);
        o += "<text x=\"" + detail::fmt(left + pw + 28) + "\" y=\"" + detail::fmt(ly + 4) + "\" font-size=\"11\">" +
             detail::xml_escape(series[i].name) + "</text>\n";
        o += "<line x1=\"" + detail::fmt(left + pw + 8) + "\" y1=\"" + detail::fmt(ly) + "\" x2=\"" +
             detail::fmt(left + pw + 24) + "\" y2=\"" + detail::fmt(ly) + "\" stroke=\"" + colour + "\"/>\n";
    }
    o += "</svg>\n";
    return o;
}

// Groups rows by `group` (one series each, first-appearance order) and sorts points by x.
inline std::vector<Series> series_from(const CsvTable& t, const std::string& x, const std::string& y,
                                       const std::string& group, const std::string& default_name,
                                       bool log10_y = false) {
    const std::size_t xc = t.column(x), yc = t.column(y);
    const bool grouped = !group.empty() && t.has(group);
    const std::size_t gc = grouped ? t.column(group) : 0;
    std::vector<Series> out;
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string name = grouped ? t.rows[r][gc] : default_name;
        auto [it, fresh] = index.try_emplace(name, out.size());
        if (fresh) {
            out.push_back({name, {}});
        }
        double v = t.number(r, yc);
        if (log10_y) {
            v = std::log10(std::max(std::abs(v), 1e-12));
        }
        out[it->second].points.emplace_back(t.number(r, xc), v);
    }
    for (auto& s : out) {
        std::stable_sort(s.points.begin(), s.points.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
    }
    return out;
}

// CSV schemas:
//   magnitude_by_layer  layer,state_kind,top1,...   one line per state kind, log10 top1
//   metric_by_k         k,value[,kind]             one line per kind
//   p_by_step           step,p                     the schedule trace of a run
inline std::string plot_csv(const CsvTable& t, PlotKind kind) {
    if (t.rows.empty()) {
        throw InputError("CSV has no data rows");
    }
    switch (kind) {
    case PlotKind::magnitude_by_layer:
        (void)t.column("state_kind");
        return render_svg(series_from(t, "layer", "top1", "state_kind", "top1", true),
                          "Top-1 magnitude by layer", "layer", "log10 |value|");
    case PlotKind::metric_by_k:
        return render_svg(series_from(t, "k", "value", "kind", "value"), "Metric by k", "k", "value");
    case PlotKind::p_by_step:
        return render_svg(series_from(t, "step", "p", "", "p"), "Dropout probability by step", "step", "p");
    }
    throw InputError("unknown plot kind");
}

} // namespace massive
