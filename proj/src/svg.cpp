#include "fwdinv/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace fwdinv::svg {

std::string num(double v) {
    char buf[64];
    if (std::abs(v) < 0.005) v = 0.0;  // avoid "-0.00"
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

namespace {

std::string escape(const std::string& s) {
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

struct Frame {
    double extent;
    double px(double x) const { return kLeft + x / extent * kSize; }
    double py(double y) const { return kTop + kSize - y / extent * kSize; }
};

void header(std::ostringstream& os, double width, double height) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
       << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\">\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << num(width) << "\" height=\"" << num(height) << "\" fill=\"white\"/>\n";
}

// Diverging blue-white-red for signed data, white-to-red otherwise.
std::string colour(double t, bool signed_values) {
    t = std::clamp(t, -1.0, 1.0);
    int r, g, b;
    if (signed_values && t < 0.0) {
        r = static_cast<int>(std::lround(255 * (1 + t)));
        g = r;
        b = 255;
    } else {
        if (!signed_values) t = std::abs(t);
        r = 255;
        g = static_cast<int>(std::lround(255 * (1 - t)));
        b = g;
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace

double plot_extent(const ScatterPlot& plot) {
    double m = 0.0;
    for (const auto& [x, y] : plot.points) m = std::max({m, x, y});
    for (double v : plot.band_upper) m = std::max(m, v);
    for (double x : plot.band_x) m = std::max(m, x);
    return std::max(5.0, 5.0 * std::ceil(m / 5.0));
}

std::string render(const ScatterPlot& plot) {
    const Frame f{plot_extent(plot)};
    std::ostringstream os;
    header(os, kLeft + kSize + 30.0, kTop + kSize + 60.0);
    os << "<text x=\"" << num(kLeft + kSize / 2) << "\" y=\"24.00\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(plot.title) << "</text>\n";
    // Axes and ticks every extent/5.
    os << "<g stroke=\"black\" fill=\"none\">\n";
    os << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(kSize) << "\" height=\""
       << num(kSize) << "\"/>\n";
    os << "</g>\n<g font-size=\"11\" text-anchor=\"middle\">\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = f.extent * i / 5.0;
        os << "<text x=\"" << num(f.px(v)) << "\" y=\"" << num(kTop + kSize + 16) << "\">" << num(v) << "</text>\n";
        os << "<text x=\"" << num(kLeft - 22) << "\" y=\"" << num(f.py(v) + 4) << "\">" << num(v) << "</text>\n";
    }
    os << "</g>\n";
    os << "<text x=\"" << num(kLeft + kSize / 2) << "\" y=\"" << num(kTop + kSize + 40)
       << "\" text-anchor=\"middle\" font-size=\"13\">" << escape(plot.xlabel) << "</text>\n";
    os << "<text x=\"16.00\" y=\"" << num(kTop + kSize / 2) << "\" text-anchor=\"middle\" font-size=\"13\" "
       << "transform=\"rotate(-90 16.00 " << num(kTop + kSize / 2) << ")\">" << escape(plot.ylabel) << "</text>\n";

    if (plot.has_regression && !plot.band_x.empty()) {
        os << "<polygon id=\"band\" fill=\"#bbbbbb\" fill-opacity=\"0.5\" stroke=\"none\" points=\"";
        for (std::size_t i = 0; i < plot.band_x.size(); ++i)
            os << (i ? " " : "") << num(f.px(plot.band_x[i])) << ',' << num(f.py(plot.band_upper[i]));
        for (std::size_t i = plot.band_x.size(); i-- > 0;)
            os << ' ' << num(f.px(plot.band_x[i])) << ',' << num(f.py(plot.band_lower[i]));
        os << "\"/>\n";
    }
    os << "<g fill=\"#1f77b4\" fill-opacity=\"0.6\">\n";
    for (const auto& [x, y] : plot.points)
        os << "<circle cx=\"" << num(f.px(x)) << "\" cy=\"" << num(f.py(y)) << "\" r=\"2.00\"/>\n";
    os << "</g>\n";
    if (plot.identity_line) {
        os << "<path id=\"identity\" d=\"M " << num(f.px(0)) << ' ' << num(f.py(0)) << " L " << num(f.px(f.extent))
           << ' ' << num(f.py(f.extent)) << "\" stroke=\"black\" stroke-dasharray=\"6 4\" fill=\"none\"/>\n";
    }
    if (plot.has_regression && !plot.band_x.empty()) {
        const double x0 = plot.band_x.front(), x1 = plot.band_x.back();
        os << "<path id=\"regression\" d=\"M " << num(f.px(x0)) << ' ' << num(f.py(plot.intercept + plot.slope * x0))
           << " L " << num(f.px(x1)) << ' ' << num(f.py(plot.intercept + plot.slope * x1))
           << "\" stroke=\"#444444\" stroke-width=\"2\" fill=\"none\"/>\n";
        os << "<text x=\"" << num(kLeft + 8) << "\" y=\"" << num(kTop + 18) << "\" font-size=\"12\">slope "
           << num(plot.slope) << ", intercept " << num(plot.intercept) << " mm</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string render_map(const std::string& title, const std::vector<Vec3>& positions, const std::vector<double>& values,
                       bool signed_values) {
    if (positions.size() != values.size() || positions.empty()) throw InvalidInput("map needs one value per position");
    double r = 0.0, vmax = 0.0;
    for (const auto& p : positions) r = std::max({r, std::abs(p.x()), std::abs(p.y())});
    for (double v : values) vmax = std::max(vmax, std::abs(v));
    r = std::max(r, 1.0);
    std::vector<std::size_t> order(positions.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return positions[a].z() < positions[b].z(); });
    std::ostringstream os;
    header(os, kLeft + kSize + 30.0, kTop + kSize + 30.0);
    os << "<text x=\"" << num(kLeft + kSize / 2) << "\" y=\"24.00\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(title) << "</text>\n";
    os << "<circle cx=\"" << num(kLeft + kSize / 2) << "\" cy=\"" << num(kTop + kSize / 2) << "\" r=\""
       << num(kSize / 2) << "\" fill=\"#f4f4f4\" stroke=\"black\"/>\n<g stroke=\"none\">\n";
    for (std::size_t i : order) {
        const double t = vmax > 0.0 ? values[i] / vmax : 0.0;
        const double cx = kLeft + kSize / 2 + positions[i].x() / r * (kSize / 2 - 6);
        const double cy = kTop + kSize / 2 - positions[i].y() / r * (kSize / 2 - 6);
        os << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\"4.00\" fill=\"" << colour(t, signed_values)
           << "\"/>\n";
    }
    os << "</g>\n<text x=\"" << num(kLeft) << "\" y=\"" << num(kTop + kSize + 20) << "\" font-size=\"12\">max |value| "
       << num(vmax) << " (top view, x right, y up)</text>\n</svg>\n";
    return os.str();
}

}  // namespace fwdinv::svg
