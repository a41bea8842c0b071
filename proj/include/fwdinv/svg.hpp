// Deterministic SVG scatter plots.
#pragma once

#include "fwdinv/core.hpp"

#include <string>
#include <utility>
#include <vector>

namespace fwdinv::svg {

/// Square plot with both axes starting at 0 and sharing one scale.
struct ScatterPlot {
    std::string title;
    std::string xlabel;
    std::string ylabel;
    std::vector<std::pair<double, double>> points;
    bool identity_line = false;
    bool has_regression = false;
    double slope = 0.0;
    double intercept = 0.0;
    std::vector<double> band_x, band_lower, band_upper;
};

/// Plot geometry: data (x, y) in [0, extent]^2 maps to pixels
/// (kLeft + x / extent * kSize, kTop + kSize - y / extent * kSize).
inline constexpr double kLeft = 70.0;
inline constexpr double kTop = 40.0;
inline constexpr double kSize = 480.0;

/// Axis extent: the largest coordinate rounded up to a multiple of 5.
double plot_extent(const ScatterPlot& plot);
std::string render(const ScatterPlot& plot);

/// Top view (x, y) of a source-space map; markers drawn bottom-up in z,
/// coloured by value / max |value|.
std::string render_map(const std::string& title, const std::vector<Vec3>& positions, const std::vector<double>& values,
                       bool signed_values);

/// Fixed two-decimal formatting used for all coordinates.
std::string num(double v);

}  // namespace fwdinv::svg
