// Distributed and scanning inverse solvers over a 3-component lead field.
//
// All solvers take L (electrodes x 3 * sources, source-major columns) and an
// average-referenced measurement. Argmax ties resolve to the lowest index.
#pragma once

#include "fwdinv/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fwdinv {

/// Electrode data; one column per time sample.
struct Measurement {
    MatrixX data;
    std::optional<double> snr_db;

    static Measurement single(const VectorX& v, std::optional<double> snr_db = std::nullopt);
    Eigen::Index num_electrodes() const { return data.rows(); }
    Eigen::Index num_samples() const { return data.cols(); }
    /// Throws InvalidInput unless every sample sums to ~0 over electrodes.
    void validate() const;
};

struct Reconstruction {
    std::string solver;
    std::string source_model;
    /// Identifies emulated algorithms so they are never mistaken for the originals.
    std::string algorithm_variant;
    MatrixX amplitude;  // sources x samples, non-negative
    MatrixX moment;     // 3 * sources x samples
    double lambda = 0.0;
    int iterations = 0;
    double tolerance = 0.0;
    bool converged = true;
    std::vector<std::string> diagnostics;

    Eigen::Index num_sources() const { return amplitude.rows(); }
    /// Amplitudes of the last sample.
    VectorX final_amplitude() const { return amplitude.col(amplitude.cols() - 1); }
};

/// Index of the largest entry; lowest index wins ties.
Eigen::Index argmax_lowest(const VectorX& v);

/// lambda = trace(L L^T) / (m * 10^(snr/10)).
double select_lambda(const MatrixX& lead, double snr_db);

/// Cached minimum-norm kernel K = L^T (L L^T + lambda I)^{-1} and the 3x3
/// resolution blocks R_jj = K_j L_j.
class MinimumNormOperator {
public:
    MinimumNormOperator(const MatrixX& lead, double lambda);

    double lambda() const { return lambda_; }
    const MatrixX& kernel() const { return kernel_; }
    const Mat3& resolution_block(Eigen::Index j) const { return blocks_[static_cast<std::size_t>(j)]; }
    double resolution_trace(Eigen::Index j) const { return blocks_[static_cast<std::size_t>(j)].trace(); }
    /// R_jj^{+1/2} (pseudo-inverse square root), zero for degenerate blocks.
    const Mat3& whitening_block(Eigen::Index j) const { return whiten_[static_cast<std::size_t>(j)]; }
    Eigen::Index num_sources() const { return static_cast<Eigen::Index>(blocks_.size()); }

    Reconstruction mne(const Measurement& m) const;
    Reconstruction sloreta(const Measurement& m) const;

private:
    double lambda_;
    MatrixX kernel_;
    std::vector<Mat3> blocks_;
    // R_jj^{+1/2}, or zero for flagged blocks.
    std::vector<Mat3> whiten_;
    std::vector<bool> degenerate_;
};

Reconstruction mne(const MatrixX& lead, const Measurement& m, double lambda);
Reconstruction sloreta(const MatrixX& lead, const Measurement& m, double lambda);

struct DipoleScanResult {
    Reconstruction reconstruction;  // amplitude = goodness of fit
    Eigen::Index best = 0;
    VectorX gof;
};

/// Per-block projectors onto the column span of each 3-column block.
class DipoleScanOperator {
public:
    explicit DipoleScanOperator(const MatrixX& lead);
    DipoleScanResult scan(const Measurement& m) const;

private:
    std::vector<MatrixX> basis_;  // orthonormal column basis per block
    std::vector<MatrixX> pinv_;   // 3 x m least-squares map per block
};

DipoleScanResult dipole_scan(const MatrixX& lead, const Measurement& m);

struct Shal1rParams {
    /// Regularization of the resolution blocks used for standardization.
    double lambda_std = 0.0;
    /// Reweighting floor, relative to the largest block norm.
    double epsilon = 1e-2;
    /// Reweighting rounds.
    int max_iter = 8;
    /// Relative change tolerance of the inner proximal-gradient solves.
    double tol = 1e-8;
    /// Penalty as a fraction of the smallest penalty with an all-zero solution.
    double penalty = 0.05;
    int max_inner = 20000;
};

/// Iteratively reweighted group-L1 regression on blocks standardized by
/// R_jj^{+1/2}, fitted in the metric of (L L^T + lambda I)^{-1}. The first
/// selected block is the sLORETA maximum.
class Shal1rOperator {
public:
    Shal1rOperator(const MatrixX& lead, const Shal1rParams& params);
    Reconstruction solve(const Measurement& m) const;
    double step() const { return step_; }

private:
    VectorX solve_sample(const VectorX& m, Reconstruction& rec) const;
    VectorX standardized_amplitude(const VectorX& m, const std::vector<Eigen::Index>& support,
                                   const std::vector<double>& theta) const;

    Shal1rParams params_;
    MatrixX lead_;
    double lead_trace_ = 0.0;      // ||L||_F^2
    MatrixX whiten_;               // (L L^T + lambda I)^{-1/2}
    MatrixX scaled_;               // whiten_ L_j T_j
    std::vector<Mat3> transform_;  // T_j = R_jj^{+1/2}, zero for degenerate blocks
    double step_ = 0.0;
};

Reconstruction shal1r(const MatrixX& lead, const Measurement& m, const Shal1rParams& params);

struct SkfParams {
    double q_evolution = 1.0;
    double r_noise = 1.0;
    double lambda_std = 0.0;
    enum class Standardization { PosteriorTrace, ExplainedTrace };
    Standardization standardization = Standardization::PosteriorTrace;
};

/// Random-walk Kalman filter in electrode-space form: the posterior covariance
/// is kept as alpha I - L^T B L and the mean as L^T y.
Reconstruction skf(const MatrixX& lead, const Measurement& m, const SkfParams& params);

}  // namespace fwdinv
