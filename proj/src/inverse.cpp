#include "fwdinv/inverse.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fwdinv {

Measurement Measurement::single(const VectorX& v, std::optional<double> snr_db) {
    Measurement m;
    m.data = v;
    m.snr_db = snr_db;
    return m;
}

void Measurement::validate() const {
    if (data.cols() < 1 || data.rows() < 1) throw InvalidInput("measurement is empty");
    if (!data.allFinite()) throw InvalidInput("measurement contains non-finite values");
    for (Eigen::Index k = 0; k < data.cols(); ++k) {
        const double s = data.col(k).sum();
        const double scale = data.col(k).cwiseAbs().sum();
        if (std::abs(s) > 1e-10 * scale) {
            throw InvalidInput("measurement sample " + std::to_string(k) + " is not average-referenced (sum " +
                               std::to_string(s) + ")");
        }
    }
}

Eigen::Index argmax_lowest(const VectorX& v) {
    if (v.size() == 0) throw InvalidInput("argmax of an empty vector");
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

double select_lambda(const MatrixX& lead, double snr_db) {
    if (std::isnan(snr_db)) throw InvalidInput("SNR must not be NaN");
    if (lead.rows() == 0) throw InvalidInput("lead field has no electrodes");
    return lead.squaredNorm() / (static_cast<double>(lead.rows()) * std::pow(10.0, snr_db / 10.0));
}

namespace {

void check_shapes(const MatrixX& lead, const Measurement& m) {
    if (lead.cols() % 3 != 0) throw InvalidInput("lead field column count is not a multiple of 3");
    if (lead.rows() != m.num_electrodes()) {
        throw InvalidInput("measurement has " + std::to_string(m.num_electrodes()) + " electrodes, lead field " +
                           std::to_string(lead.rows()));
    }
    m.validate();
}

// Pseudo-inverse square root of a symmetric PSD 3x3 matrix (relative cutoff 1e-6).
Mat3 pinv_sqrt(const Mat3& a) {
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(a);
    const auto& ev = eig.eigenvalues();
    const double top = ev.maxCoeff();
    Eigen::Vector3d d = Eigen::Vector3d::Zero();
    if (top > 0.0)
        for (int i = 0; i < 3; ++i)
            if (ev[i] > 1e-6 * top) d[i] = 1.0 / std::sqrt(ev[i]);
    return eig.eigenvectors() * d.asDiagonal() * eig.eigenvectors().transpose();
}

VectorX block_norms(const VectorX& x) {
    const Eigen::Index n = x.size() / 3;
    VectorX out(n);
    for (Eigen::Index j = 0; j < n; ++j) out[j] = x.segment(3 * j, 3).norm();
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Minimum norm / sLORETA

MinimumNormOperator::MinimumNormOperator(const MatrixX& lead, double lambda) : lambda_(lambda) {
    if (!(lambda > 0.0)) throw InvalidInput("regularization parameter must be positive");
    if (lead.cols() % 3 != 0) throw InvalidInput("lead field column count is not a multiple of 3");
    MatrixX g = lead * lead.transpose();
    g.diagonal().array() += lambda;
    Eigen::LLT<MatrixX> llt(g);
    if (llt.info() != Eigen::Success) {
        throw SingularSystem("Cholesky factorization of L L^T + lambda I failed", std::numeric_limits<double>::infinity());
    }
    const double rcond = llt.rcond();
    if (!(rcond > 1e3 * std::numeric_limits<double>::epsilon())) {
        throw SingularSystem("L L^T + lambda I is numerically singular", 1.0 / rcond);
    }
    kernel_ = llt.solve(lead).transpose();

    const Eigen::Index n = lead.cols() / 3;
    blocks_.resize(static_cast<std::size_t>(n));
    whiten_.resize(static_cast<std::size_t>(n));
    degenerate_.assign(static_cast<std::size_t>(n), false);
    double global = 0.0;
    std::vector<Eigen::SelfAdjointEigenSolver<Mat3>> eig(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
        Mat3 r = kernel_.middleRows(3 * j, 3) * lead.middleCols(3 * j, 3);
        r = 0.5 * (r + r.transpose()).eval();
        blocks_[j] = r;
        eig[j].compute(r);
        global = std::max(global, eig[j].eigenvalues().maxCoeff());
    }
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& ev = eig[j].eigenvalues();
        const double top = ev.maxCoeff();
        if (!(top > 1e-12 * global)) {
            degenerate_[j] = true;
            whiten_[j].setZero();
            continue;
        }
        Eigen::Vector3d d = Eigen::Vector3d::Zero();
        for (int i = 0; i < 3; ++i)
            if (ev[i] > 1e-6 * top) d[i] = 1.0 / std::sqrt(ev[i]);
        whiten_[j] = eig[j].eigenvectors() * d.asDiagonal() * eig[j].eigenvectors().transpose();
    }
}

Reconstruction MinimumNormOperator::mne(const Measurement& m) const {
    if (m.num_electrodes() != kernel_.cols()) throw InvalidInput("measurement size does not match the lead field");
    m.validate();
    Reconstruction rec;
    rec.solver = "mne";
    rec.algorithm_variant = "mne-tikhonov";
    rec.lambda = lambda_;
    rec.moment = kernel_ * m.data;
    rec.amplitude.resize(num_sources(), m.num_samples());
    for (Eigen::Index k = 0; k < m.num_samples(); ++k) rec.amplitude.col(k) = block_norms(rec.moment.col(k));
    rec.iterations = 1;
    return rec;
}

Reconstruction MinimumNormOperator::sloreta(const Measurement& m) const {
    Reconstruction rec = mne(m);
    rec.solver = "sloreta";
    rec.algorithm_variant = "sloreta-3x3-block";
    std::size_t flagged = 0;
    for (Eigen::Index j = 0; j < num_sources(); ++j) {
        if (degenerate_[static_cast<std::size_t>(j)]) ++flagged;
        for (Eigen::Index k = 0; k < m.num_samples(); ++k) {
            const Vec3 w = whiten_[static_cast<std::size_t>(j)] * rec.moment.col(k).segment<3>(3 * j);
            rec.moment.col(k).segment<3>(3 * j) = w;
            rec.amplitude(j, k) = w.norm();
        }
    }
    if (flagged) {
        rec.diagnostics.push_back(std::to_string(flagged) + " sources with near-zero resolution blocks set to 0");
    }
    return rec;
}

Reconstruction mne(const MatrixX& lead, const Measurement& m, double lambda) {
    check_shapes(lead, m);
    return MinimumNormOperator(lead, lambda).mne(m);
}

Reconstruction sloreta(const MatrixX& lead, const Measurement& m, double lambda) {
    check_shapes(lead, m);
    return MinimumNormOperator(lead, lambda).sloreta(m);
}

// ---------------------------------------------------------------------------
// Dipole scan

DipoleScanOperator::DipoleScanOperator(const MatrixX& lead) {
    if (lead.cols() % 3 != 0) throw InvalidInput("lead field column count is not a multiple of 3");
    const Eigen::Index n = lead.cols() / 3;
    basis_.resize(static_cast<std::size_t>(n));
    pinv_.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
        Eigen::JacobiSVD<MatrixX> svd(lead.middleCols(3 * j, 3), Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& s = svd.singularValues();
        Eigen::Index rank = 0;
        while (rank < s.size() && s[rank] > 1e-6 * s[0] && s[rank] > 0.0) ++rank;
        basis_[j] = svd.matrixU().leftCols(rank);
        pinv_[j] = svd.matrixV().leftCols(rank) * s.head(rank).cwiseInverse().asDiagonal() *
                   svd.matrixU().leftCols(rank).transpose();
    }
}

DipoleScanResult DipoleScanOperator::scan(const Measurement& m) const {
    m.validate();
    const auto n = static_cast<Eigen::Index>(basis_.size());
    DipoleScanResult out;
    auto& rec = out.reconstruction;
    rec.solver = "ds";
    rec.algorithm_variant = "dipole-scan-projector";
    rec.amplitude.resize(n, m.num_samples());
    rec.moment.resize(3 * n, m.num_samples());
    std::size_t rank_deficient = 0;
    for (Eigen::Index k = 0; k < m.num_samples(); ++k) {
        const VectorX v = m.data.col(k);
        const double power = v.squaredNorm();
        if (!(power > 0.0)) throw InvalidInput("dipole scan needs a nonzero measurement");
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& q = basis_[static_cast<std::size_t>(j)];
            if (q.cols() == 0) {
                if (k == 0) ++rank_deficient;
                rec.amplitude(j, k) = 0.0;
                rec.moment.col(k).segment<3>(3 * j).setZero();
                continue;
            }
            rec.amplitude(j, k) = (q.transpose() * v).squaredNorm() / power;
            rec.moment.col(k).segment<3>(3 * j) = pinv_[static_cast<std::size_t>(j)] * v;
        }
    }
    if (rank_deficient) rec.diagnostics.push_back(std::to_string(rank_deficient) + " zero lead-field blocks");
    out.gof = rec.final_amplitude();
    out.best = argmax_lowest(out.gof);
    rec.iterations = 1;
    return out;
}

DipoleScanResult dipole_scan(const MatrixX& lead, const Measurement& m) {
    check_shapes(lead, m);
    return DipoleScanOperator(lead).scan(m);
}

// ---------------------------------------------------------------------------
// SHAL1R

namespace {

double power_estimate(const MatrixX& a) {
    // Largest eigenvalue of A A^T (= that of A^T A), 50 power steps.
    const MatrixX g = a * a.transpose();
    VectorX v = VectorX::Ones(g.rows()).normalized();
    double est = 0.0;
    for (int it = 0; it < 50; ++it) {
        VectorX w = g * v;
        est = w.norm();
        if (est == 0.0) return 0.0;
        v = w / est;
    }
    return est;
}

}  // namespace

Shal1rOperator::Shal1rOperator(const MatrixX& lead, const Shal1rParams& params) : params_(params) {
    if (!(params.lambda_std > 0.0) || !(params.epsilon > 0.0) || !(params.tol > 0.0) || !(params.penalty > 0.0) ||
        params.max_iter < 1 || params.max_inner < 1) {
        throw InvalidInput("SHAL1R parameters must be positive with max_iter >= 1");
    }
    const MinimumNormOperator mn(lead, params.lambda_std);
    const Eigen::Index n = mn.num_sources();
    MatrixX gram = lead * lead.transpose();
    gram.diagonal().array() += params.lambda_std;
    const Eigen::SelfAdjointEigenSolver<MatrixX> eig(gram);
    whiten_ = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
              eig.eigenvectors().transpose();
    lead_ = lead;
    lead_trace_ = lead.squaredNorm();
    scaled_ = whiten_ * lead;
    transform_.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
        transform_[static_cast<std::size_t>(j)] = mn.whitening_block(j);
        scaled_.middleCols(3 * j, 3) = (scaled_.middleCols(3 * j, 3) * mn.whitening_block(j)).eval();
    }
    const double lip = power_estimate(scaled_);
    step_ = lip > 0.0 ? 0.95 / lip : 1.0;
}

VectorX Shal1rOperator::solve_sample(const VectorX& m, Reconstruction& rec) const {
    const Eigen::Index n = static_cast<Eigen::Index>(transform_.size());
    VectorX x = VectorX::Zero(3 * n);  // standardized coefficients
    VectorX c = scaled_.transpose() * m;
    const VectorX c_norm = block_norms(c);
    const double lambda_max = c_norm.maxCoeff();
    if (!(lambda_max > 0.0)) {
        rec.iterations += 1;
        rec.diagnostics.push_back("all-zero solution");
        return x;
    }
    const double tau = params_.penalty * lambda_max;
    VectorX w = VectorX::Ones(n);
    std::vector<Eigen::Index> support;

    for (int round = 0; round < params_.max_iter; ++round) {
        // Working set: current support plus the strongest KKT violator.
        std::vector<Eigen::Index> work = support;
        if (work.empty()) {
            VectorX ratio = block_norms(scaled_.transpose() * m).cwiseQuotient(w);
            work.push_back(argmax_lowest(ratio));
        }
        for (int outer = 0; outer < 100; ++outer) {
            std::sort(work.begin(), work.end());
            const auto k = static_cast<Eigen::Index>(work.size());
            MatrixX a(m.size(), 3 * k);
            VectorX xw(3 * k);
            for (Eigen::Index b = 0; b < k; ++b) {
                a.middleCols(3 * b, 3) = scaled_.middleCols(3 * work[b], 3);
                xw.segment<3>(3 * b) = x.segment<3>(3 * work[b]);
            }
            // FISTA with gradient-based restart.
            VectorX y = xw, prev = xw;
            double t = 1.0;
            bool done = false;
            for (int it = 0; it < params_.max_inner; ++it) {
                ++rec.iterations;
                const VectorX z = y - step_ * (a.transpose() * (a * y - m));
                VectorX next(3 * k);
                for (Eigen::Index b = 0; b < k; ++b) {
                    const Vec3 v = z.segment<3>(3 * b);
                    const double norm = v.norm();
                    const double thr = step_ * tau * w[work[b]];
                    next.segment<3>(3 * b) = norm > thr ? ((1.0 - thr / norm) * v).eval() : Vec3::Zero();
                }
                const double change = (next - prev).norm();
                const double size = std::max(next.norm(), std::numeric_limits<double>::min());
                if (change <= params_.tol * size) {
                    prev = next;
                    done = true;
                    break;
                }
                const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
                if ((y - next).dot(next - prev) > 0.0) {
                    y = next;
                    t = 1.0;
                } else {
                    y = next + ((t - 1.0) / t_next) * (next - prev);
                    t = t_next;
                }
                prev = next;
            }
            if (!done) rec.converged = false;
            x.setZero();
            for (Eigen::Index b = 0; b < k; ++b) x.segment<3>(3 * work[b]) = prev.segment<3>(3 * b);

            // KKT check over all blocks outside the working set.
            const VectorX r = m - a * prev;
            const VectorX grad_norm = block_norms(scaled_.transpose() * r);
            std::vector<std::pair<double, Eigen::Index>> violators;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (std::binary_search(work.begin(), work.end(), j)) continue;
                const double ratio = grad_norm[j] / (tau * w[j]);
                if (ratio > 1.0 + 1e-6) violators.emplace_back(-ratio, j);
            }
            if (violators.empty()) break;
            std::sort(violators.begin(), violators.end());
            for (std::size_t v = 0; v < std::min<std::size_t>(5, violators.size()); ++v)
                work.push_back(violators[v].second);
        }

        std::vector<Eigen::Index> next_support;
        const VectorX norms = block_norms(x);
        const double top = norms.maxCoeff();
        for (Eigen::Index j = 0; j < n; ++j)
            if (norms[j] > 0.0) next_support.push_back(j);
        if (top > 0.0) {
            for (Eigen::Index j = 0; j < n; ++j) w[j] = 1.0 / (norms[j] / top + params_.epsilon);
        }
        const bool stable = round > 0 && next_support == support;
        support = std::move(next_support);
        if (stable) break;
        if (round + 1 == params_.max_iter) rec.diagnostics.push_back("reweighting stopped at max_iter");
    }
    if (support.empty()) rec.diagnostics.push_back("all-zero solution");
    return x;
}

VectorX Shal1rOperator::standardized_amplitude(const VectorX& m, const std::vector<Eigen::Index>& support,
                                               const std::vector<double>& theta) const {
    const Eigen::Index n = static_cast<Eigen::Index>(transform_.size());
    VectorX amp = VectorX::Zero(n);
    if (support.empty()) return amp;
    // Minimum norm under the prior variances theta on the support, then
    // each block standardized by its own resolution block theta_j A_jj.
    MatrixX g = MatrixX::Zero(lead_.rows(), lead_.rows());
    for (std::size_t s = 0; s < support.size(); ++s) {
        const auto lj = lead_.middleCols(3 * support[s], 3);
        g.noalias() += theta[s] * lj * lj.transpose();
    }
    const double lambda = params_.lambda_std * g.trace() / lead_trace_;
    g.diagonal().array() += lambda;
    const Eigen::LDLT<MatrixX> ldlt(g);
    const VectorX gm = ldlt.solve(m);
    for (std::size_t s = 0; s < support.size(); ++s) {
        const auto lj = lead_.middleCols(3 * support[s], 3);
        const MatrixX gl = ldlt.solve(MatrixX(lj));
        Mat3 a = lj.transpose() * gl;
        a = 0.5 * (a + a.transpose()).eval();
        const Vec3 k = theta[s] * (lj.transpose() * gm);
        amp[support[s]] = (pinv_sqrt(theta[s] * a) * k).norm();
    }
    return amp;
}

Reconstruction Shal1rOperator::solve(const Measurement& m) const {
    if (m.num_electrodes() != scaled_.rows()) throw InvalidInput("measurement size does not match the lead field");
    m.validate();
    const Eigen::Index n = static_cast<Eigen::Index>(transform_.size());
    Reconstruction rec;
    rec.solver = "shal1r";
    rec.algorithm_variant = "irl1-group-lasso-support-standardized-weighted-mn";
    rec.lambda = params_.lambda_std;
    rec.tolerance = params_.tol;
    rec.amplitude.resize(n, m.num_samples());
    rec.moment.resize(3 * n, m.num_samples());
    for (Eigen::Index k = 0; k < m.num_samples(); ++k) {
        const VectorX xs = solve_sample(whiten_ * m.data.col(k), rec);
        std::vector<Eigen::Index> support;
        std::vector<double> theta;
        for (Eigen::Index j = 0; j < n; ++j) {
            const Vec3 x = transform_[static_cast<std::size_t>(j)] * xs.segment<3>(3 * j);
            rec.moment.col(k).segment<3>(3 * j) = x;
            if (x.norm() > 0.0) {
                support.push_back(j);
                theta.push_back(x.norm());
            }
        }
        rec.amplitude.col(k) = standardized_amplitude(m.data.col(k), support, theta);
    }
    const VectorX amp = rec.final_amplitude();
    const Eigen::Index best = argmax_lowest(amp);
    if (amp[best] > 0.0) {
        for (Eigen::Index j = best + 1; j < n; ++j) {
            if (amp[j] >= (1.0 - 1e-9) * amp[best]) {
                rec.diagnostics.push_back("ambiguous maximum: sources " + std::to_string(best) + " and " +
                                          std::to_string(j) + " tie");
                break;
            }
        }
    }
    return rec;
}

Reconstruction shal1r(const MatrixX& lead, const Measurement& m, const Shal1rParams& params) {
    check_shapes(lead, m);
    return Shal1rOperator(lead, params).solve(m);
}

// ---------------------------------------------------------------------------
// SKF

Reconstruction skf(const MatrixX& lead, const Measurement& m, const SkfParams& params) {
    check_shapes(lead, m);
    if (m.num_samples() < 2) throw InvalidInput("SKF needs at least two time samples");
    if (!(params.q_evolution > 0.0) || !(params.r_noise > 0.0)) {
        throw InvalidInput("SKF evolution and noise variances must be positive");
    }
    const Eigen::Index ne = lead.rows();
    const Eigen::Index n = lead.cols() / 3;
    const MatrixX g = lead * lead.transpose();
    const MatrixX id = MatrixX::Identity(ne, ne);

    Reconstruction rec;
    rec.solver = "skf";
    rec.algorithm_variant = params.standardization == SkfParams::Standardization::PosteriorTrace
                                ? "random-walk-kalman-posterior-trace"
                                : "random-walk-kalman-explained-trace";
    rec.lambda = params.lambda_std;
    rec.amplitude.resize(n, m.num_samples());
    rec.moment.resize(3 * n, m.num_samples());

    double alpha = params.q_evolution;  // P = alpha I - L^T B L
    MatrixX b = MatrixX::Zero(ne, ne);
    VectorX y = VectorX::Zero(ne);      // x = L^T y
    for (Eigen::Index k = 0; k < m.num_samples(); ++k) {
        const double ap = alpha + params.q_evolution;
        const MatrixX e = ap * id - b * g;
        MatrixX s = ap * g - g * b * g;
        s.diagonal().array() += params.r_noise;
        s = 0.5 * (s + s.transpose()).eval();
        Eigen::LLT<MatrixX> llt(s);
        alpha = ap;
        if (llt.info() != Eigen::Success) {
            rec.diagnostics.push_back("step " + std::to_string(k) + " rejected: innovation covariance not SPD");
        } else {
            const VectorX innovation = m.data.col(k) - g * y;
            y += e * llt.solve(innovation);
            MatrixX update = e * llt.solve(e.transpose());
            b += 0.5 * (update + update.transpose());
        }
        ++rec.iterations;

        const VectorX x = lead.transpose() * y;
        const MatrixX bl = b * lead;
        const VectorX explained_col = (lead.cwiseProduct(bl)).colwise().sum().transpose();
        for (Eigen::Index j = 0; j < n; ++j) {
            const double explained = explained_col.segment<3>(3 * j).sum();
            const double den = params.standardization == SkfParams::Standardization::PosteriorTrace
                                   ? 3.0 * alpha - explained
                                   : explained;
            Vec3 v = Vec3::Zero();
            if (den > 0.0) v = x.segment<3>(3 * j) / std::sqrt(den);
            rec.moment.col(k).segment<3>(3 * j) = v;
            rec.amplitude(j, k) = v.norm();
        }
    }
    return rec;
}

}  // namespace fwdinv
