// Evaluation measures: exact Earth Mover's Distance, depth-bias regression,
// point summaries of reconstructions.
#pragma once

#include "fwdinv/core.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fwdinv {

struct WeightedPointSet {
    std::vector<Vec3> positions;
    std::vector<double> weights;

    std::size_t size() const { return positions.size(); }
    /// Throws InvalidInput on size mismatch, negative or non-finite weights, or all-zero weights.
    void validate() const;
    /// Copy with weights scaled to sum 1.
    WeightedPointSet normalized() const;
};

struct TransportPlan {
    struct Flow {
        std::size_t from;
        std::size_t to;
        double amount;
    };
    std::vector<Flow> flows;
    double cost = 0.0;
};

struct EmdResult {
    double distance = 0.0;  // mm
    TransportPlan plan;
};

/// Exact optimal transport under Euclidean ground distance. Weights are
/// normalized, quantized to integers summing to 2^60 and routed by
/// successive shortest paths.
EmdResult emd(const WeightedPointSet& a, const WeightedPointSet& b);

/// Sum_j w_j |p - p_j| with w normalized.
double emd_singleton(const Vec3& p, const WeightedPointSet& b);

enum class PositionRule { Argmax, Centroid };
PositionRule parse_position_rule(const std::string& tag);

/// Argmax (lowest index on ties), or the amplitude-weighted mean over
/// sources with amplitude >= threshold * max.
Vec3 estimated_position(const VectorX& amplitude, const std::vector<Vec3>& positions, PositionRule rule,
                        double threshold = 0.5);

double localization_error(const Vec3& truth, const Vec3& estimate);

struct RegressionReport {
    double slope = 0.0;
    double intercept = 0.0;
    std::vector<double> residuals;
    double residual_std = 0.0;  // sqrt(SSE / (n - 2))
    std::size_t n = 0;
    std::vector<double> grid;   // true depth, mm
    std::vector<double> fit;
    std::vector<double> lower;  // 95% mean-response band
    std::vector<double> upper;
};

/// OLS of estimated depth on true depth with a 95% pointwise band (t, n-2 dof)
/// on `grid_points` evenly spaced true depths spanning the data.
RegressionReport depth_bias_regression(const std::vector<double>& true_depth, const std::vector<double>& est_depth,
                                       int grid_points = 61);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

double median(std::vector<double> values);

/// One row of `solver,source_model,source_index,true_depth_mm,est_depth_mm,loc_err_mm,emd_mm`.
struct MetricsRow {
    std::string solver;
    std::string source_model;
    std::size_t source_index = 0;
    double true_depth_mm = 0.0;
    double est_depth_mm = 0.0;
    double loc_err_mm = 0.0;
    double emd_mm = 0.0;
    bool operator==(const MetricsRow&) const = default;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace fwdinv
