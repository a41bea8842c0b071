// Shared vocabulary types and the error hierarchy used across the library.
#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace fwdinv {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VectorX = Eigen::VectorXd;
using MatrixX = Eigen::MatrixXd;

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument or violated precondition.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// A query point does not lie inside the mesh.
class OutsideMesh : public Error {
public:
    explicit OutsideMesh(const Vec3& p);
    Vec3 point;
};

/// An iterative method failed to reach its tolerance.
class NotConverged : public Error {
public:
    NotConverged(const std::string& what, int iterations, double residual)
        : Error(what), iterations(iterations), residual(residual) {}
    int iterations;
    double residual;
};

/// A linear system could not be factored or fitted.
class SingularSystem : public Error {
public:
    SingularSystem(const std::string& what, double condition_estimate)
        : Error(what), condition_estimate(condition_estimate) {}
    double condition_estimate;
};

/// A persisted file is malformed, truncated or of an unsupported version.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Symmetric positive definiteness of a 3x3 tensor.
bool is_spd(const Mat3& m, double symmetry_tol = 1e-12);

}  // namespace fwdinv
