#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace stackpost {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// log(sum(exp(v))); -inf entries are skipped, all -inf gives -inf.
double log_sum_exp(std::span<const double> v);
double log_sum_exp(const Vector& v);

/// Median with the midpoint convention for even counts.
double median(std::vector<double> values);

/// Trapezoid rule on a (possibly non-uniform) grid.
double trapezoid(std::span<const double> x, std::span<const double> y);

/// Evenly spaced grid with n points including both ends.
std::vector<double> linspace(double lo, double hi, int n);

/// Symmetric part of a square matrix.
Matrix symmetrize(const Matrix& m);

}  // namespace stackpost
