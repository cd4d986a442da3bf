#pragma once

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "kdiga/errors.hpp"
#include "kdiga/evaluate.hpp"

namespace kdiga {

struct PlotOutput {
    std::string svg;
    std::string table;  // tab-separated: group, radius, method, value
};

struct PlotBar {
    std::string group;
    double radius = 0.0;  // NaN for the clean group
    std::string method;
    double value = 0.0;
};

namespace detail {

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
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

inline std::string radius_label(double r) {
    const double k = r * 255.0;
    if (r > 0.0 && std::abs(k - std::round(k)) < 1e-9) return fmt("%.0f/255", std::round(k));
    return fmt("%.4g", r);
}

}  // namespace detail

/// Bars in draw order: the clean group first, then one group per radius;
/// inside each group one bar per report, in the given order.
inline std::vector<PlotBar> plot_bars(const std::vector<RobustnessReport>& reports, const std::vector<double>& radii) {
    require(!radii.empty(), ErrorKind::invalid_config, "plot: radius list must not be empty");
    require(!reports.empty(), ErrorKind::invalid_input, "plot: at least one report required");
    std::vector<PlotBar> bars;
    for (const auto& rep : reports) bars.push_back({"clean", std::nan(""), rep.model_id, rep.clean_accuracy});
    for (double r : radii) {
        for (const auto& rep : reports) bars.push_back({"eps=" + detail::radius_label(r), r, rep.model_id, rep.robust_at(r)});
    }
    return bars;
}

/// Grouped-bar SVG of clean and robust accuracy, plus the sidecar table with
/// the exact bar values.
inline PlotOutput emit_plot(const std::vector<RobustnessReport>& reports, const std::vector<double>& radii,
                            const std::string& title = "Clean and robust accuracy") {
    const auto bars = plot_bars(reports, radii);
    const std::size_t n_methods = reports.size();
    const std::size_t n_groups = radii.size() + 1;

    static constexpr const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2",
                                              "#59a14f", "#edc948", "#b07aa1", "#9c755f"};
    const double bar_w = 18.0, gap = 24.0, left = 60.0, top = 40.0, plot_h = 240.0;
    const double group_w = bar_w * static_cast<double>(n_methods) + gap;
    const double width = left + group_w * static_cast<double>(n_groups) + 20.0;
    const double legend_h = 18.0 * static_cast<double>(n_methods);
    const double height = top + plot_h + 40.0 + legend_h + 10.0;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt("%.0f", width) << "\" height=\""
        << detail::fmt("%.0f", height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"" << detail::fmt("%.1f", width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
        << detail::xml_escape(title) << "</text>\n";
    const double base = top + plot_h;
    for (int t = 0; t <= 10; t += 2) {
        const double y = base - plot_h * t / 10.0;
        svg << "<line x1=\"" << left << "\" x2=\"" << detail::fmt("%.1f", width - 20) << "\" y1=\"" << detail::fmt("%.2f", y)
            << "\" y2=\"" << detail::fmt("%.2f", y) << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << left - 6 << "\" y=\"" << detail::fmt("%.2f", y + 4) << "\" text-anchor=\"end\">" << t * 10
            << "</text>\n";
    }
    svg << "<text transform=\"translate(16," << detail::fmt("%.1f", top + plot_h / 2)
        << ") rotate(-90)\" text-anchor=\"middle\">accuracy (%)</text>\n";

    for (std::size_t g = 0; g < n_groups; ++g) {
        const double gx = left + gap / 2 + group_w * static_cast<double>(g);
        for (std::size_t m = 0; m < n_methods; ++m) {
            const PlotBar& bar = bars[g * n_methods + m];
            const double h = plot_h * bar.value;
            svg << "<rect x=\"" << detail::fmt("%.2f", gx + bar_w * static_cast<double>(m)) << "\" y=\""
                << detail::fmt("%.6f", base - h) << "\" width=\"" << bar_w << "\" height=\"" << detail::fmt("%.6f", h)
                << "\" fill=\"" << palette[m % 8] << "\" data-value=\"" << detail::fmt("%.17g", bar.value) << "\"/>\n";
        }
        svg << "<text x=\"" << detail::fmt("%.2f", gx + bar_w * static_cast<double>(n_methods) / 2) << "\" y=\""
            << detail::fmt("%.1f", base + 16) << "\" text-anchor=\"middle\">" << detail::xml_escape(bars[g * n_methods].group)
            << "</text>\n";
    }
    for (std::size_t m = 0; m < n_methods; ++m) {
        const double y = base + 34 + 18.0 * static_cast<double>(m);
        svg << "<rect class=\"legend\" x=\"" << left << "\" y=\"" << detail::fmt("%.1f", y) << "\" width=\"12\" height=\"12\" fill=\""
            << palette[m % 8] << "\"/>\n";
        svg << "<text x=\"" << left + 18 << "\" y=\"" << detail::fmt("%.1f", y + 10) << "\">"
            << detail::xml_escape(reports[m].model_id) << "</text>\n";
    }
    svg << "</svg>\n";

    std::ostringstream table;
    table << "group\tradius\tmethod\tvalue\n";
    for (const auto& bar : bars) {
        table << bar.group << '\t' << (std::isnan(bar.radius) ? std::string("clean") : detail::fmt("%.17g", bar.radius)) << '\t'
              << bar.method << '\t' << detail::fmt("%.17g", bar.value) << '\n';
    }
    return {svg.str(), table.str()};
}

/// Reads the sidecar table back into bars.
inline std::vector<PlotBar> parse_plot_table(const std::string& text) {
    std::vector<PlotBar> bars;
    std::istringstream in(text);
    std::string line;
    std::size_t offset = 0;
    bool header = true;
    while (std::getline(in, line)) {
        const std::size_t line_offset = offset;
        offset += line.size() + 1;
        if (header) {
            require(line == "group\tradius\tmethod\tvalue", ErrorKind::parse, "plot table: bad header");
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t s = 0;
        for (std::size_t t; (t = line.find('\t', s)) != std::string::npos; s = t + 1) f.push_back(line.substr(s, t - s));
        f.push_back(line.substr(s));
        require(f.size() == 4, ErrorKind::parse, "plot table: expected 4 fields at byte offset " + std::to_string(line_offset));
        PlotBar b;
        b.group = f[0];
        b.radius = f[1] == "clean" ? std::nan("") : std::stod(f[1]);
        b.method = f[2];
        b.value = std::stod(f[3]);
        bars.push_back(std::move(b));
    }
    require(!header, ErrorKind::parse, "plot table: empty");
    return bars;
}

}  // namespace kdiga
