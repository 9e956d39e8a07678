#pragma once

// Minimal deterministic SVG line charts for the plot subcommand. No external
// dependencies, no system fonts beyond generic sans-serif.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace pspde::svg {

struct Series {
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
    double stroke_width = 1.4;
    std::string dash;  // e.g. "4,3"
    std::string label;
};

struct Chart {
    double width = 760;
    double height = 480;
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    std::vector<double> v_lines;  // dashed vertical markers in data coordinates

    std::string render() const {
        const double ml = 64, mr = 16, mt = title.empty() ? 16 : 36, mb = 44;
        double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
        double y_min = x_min, y_max = -x_min;
        for (const auto& s : series) {
            for (double v : s.x) {
                x_min = std::min(x_min, v);
                x_max = std::max(x_max, v);
            }
            for (double v : s.y) {
                if (!std::isfinite(v)) continue;
                y_min = std::min(y_min, v);
                y_max = std::max(y_max, v);
            }
        }
        if (!std::isfinite(x_min)) {
            x_min = 0;
            x_max = 1;
        }
        if (!std::isfinite(y_min)) {
            y_min = 0;
            y_max = 1;
        }
        if (x_max == x_min) x_max = x_min + 1;
        if (y_max == y_min) y_max = y_min + 1;
        const double y_pad = 0.05 * (y_max - y_min);
        y_min -= y_pad;
        y_max += y_pad;

        const double pw = width - ml - mr, ph = height - mt - mb;
        const auto px = [&](double v) { return ml + (v - x_min) / (x_max - x_min) * pw; };
        const auto py = [&](double v) { return mt + (y_max - v) / (y_max - y_min) * ph; };
        const auto fmt = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.6g", v);
            return std::string(buf);
        };

        std::ostringstream out;
        out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
            << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
        out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

        // Axes and tick labels.
        out << "<g stroke=\"#444\" stroke-width=\"1\">";
        out << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
            << "\" y2=\"" << mt + ph << "\"/>";
        out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
            << mt + ph << "\"/></g>\n";
        for (int i = 0; i <= 4; ++i) {
            const double xv = x_min + (x_max - x_min) * i / 4.0;
            const double yv = y_min + (y_max - y_min) * i / 4.0;
            out << "<text x=\"" << px(xv) << "\" y=\"" << mt + ph + 16
                << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">"
                << fmt(xv) << "</text>\n";
            out << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4
                << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">"
                << fmt(yv) << "</text>\n";
        }
        if (!title.empty())
            out << "<text x=\"" << width / 2 << "\" y=\"22\" font-size=\"14\" "
                << "text-anchor=\"middle\" font-family=\"sans-serif\">" << title << "</text>\n";
        if (!x_label.empty())
            out << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
                << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">"
                << x_label << "</text>\n";
        if (!y_label.empty())
            out << "<text x=\"14\" y=\"" << mt + ph / 2
                << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
                << "transform=\"rotate(-90 14 " << mt + ph / 2 << ")\">" << y_label
                << "</text>\n";

        for (double v : v_lines) {
            if (v < x_min || v > x_max) continue;
            out << "<line x1=\"" << px(v) << "\" y1=\"" << mt << "\" x2=\"" << px(v)
                << "\" y2=\"" << mt + ph
                << "\" stroke=\"#222\" stroke-width=\"1\" stroke-dasharray=\"5,4\"/>\n";
        }

        for (const auto& s : series) {
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\""
                << s.stroke_width << "\"";
            if (!s.dash.empty()) out << " stroke-dasharray=\"" << s.dash << "\"";
            out << " points=\"";
            for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
                if (!std::isfinite(s.y[i])) continue;
                out << fmt(px(s.x[i])) << "," << fmt(py(s.y[i])) << " ";
            }
            out << "\"/>\n";
        }

        // Legend.
        double ly = mt + 14;
        for (const auto& s : series) {
            if (s.label.empty()) continue;
            out << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << ly - 4 << "\" x2=\""
                << ml + pw - 126 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << s.color
                << "\" stroke-width=\"2\"";
            if (!s.dash.empty()) out << " stroke-dasharray=\"" << s.dash << "\"";
            out << "/>";
            out << "<text x=\"" << ml + pw - 120 << "\" y=\"" << ly
                << "\" font-size=\"11\" font-family=\"sans-serif\">" << s.label << "</text>\n";
            ly += 16;
        }

        out << "</svg>\n";
        return out.str();
    }
};

/// Simple qualitative color ramp from warm (t = 0) to cold (t = 1).
inline std::string ramp_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = static_cast<int>(220 - 180 * t);
    const int g = static_cast<int>(60 + 40 * t);
    const int b = static_cast<int>(50 + 180 * t);
    char buf[10];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace pspde::svg
