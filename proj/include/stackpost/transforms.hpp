#pragma once

#include <optional>
#include <string>

#include "stackpost/mixture.hpp"

namespace stackpost {

enum class TransformKind { identity, affine, bounded_affine };

std::string to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& name);

/// Map g from the common parameter space to a run's working space.
///
///   identity:        z = theta
///   affine:          z = A theta + b
///   bounded_affine:  z = A s(theta) + b, s_i = logit((theta_i - l_i) / (u_i - l_i))
class ParamTransform {
 public:
  static ParamTransform identity(int dimension);
  static ParamTransform affine(Matrix linear, Vector offset);
  static ParamTransform bounded_affine(Vector lower, Vector upper, Matrix linear, Vector offset);

  TransformKind kind() const { return kind_; }
  int dimension() const { return static_cast<int>(offset_.size()); }
  const Matrix& linear() const { return linear_; }
  const Vector& offset() const { return offset_; }
  const std::optional<Vector>& lower() const { return lower_; }
  const std::optional<Vector>& upper() const { return upper_; }
  bool is_affine() const { return kind_ != TransformKind::bounded_affine; }

  /// z = g(theta). Throws DomainError on or outside the bounds.
  Vector apply(const Vector& theta) const;
  /// theta = g^{-1}(z).
  Vector invert(const Vector& z) const;
  /// log |det d g^{-1}(z) / dz|.
  double log_abs_det_jacobian_inverse(const Vector& z) const;
  /// log |det A|, the constant part of the Jacobian.
  double log_abs_det_linear() const { return log_abs_det_linear_; }

 private:
  ParamTransform(TransformKind kind, Matrix linear, Vector offset, std::optional<Vector> lower,
                 std::optional<Vector> upper);

  TransformKind kind_;
  Matrix linear_;
  Vector offset_;
  std::optional<Vector> lower_;
  std::optional<Vector> upper_;
  Eigen::PartialPivLU<Matrix> lu_;
  double log_abs_det_linear_ = 0.0;
};

/// Density of a working-space component expressed in the common space:
/// log q(g(theta)) - log J(g(theta)).
double corrected_log_density(const ParamTransform& t, const GaussianComponent& comp, const Vector& theta);

/// Common-space expected log-joint from a working-space estimate:
/// L_hat - mean_s log J(z_s). `samples` holds one working-space draw per row.
double correct_expected_log_joint(const ParamTransform& t, const GaussianComponent& comp, double L_hat,
                                  const Matrix& samples);

/// Pushes a common-space Gaussian through an affine transform.
GaussianComponent push_forward(const ParamTransform& t, const GaussianComponent& comp);
/// Pulls a working-space Gaussian back to the common space (affine kinds only).
GaussianComponent pull_back(const ParamTransform& t, const GaussianComponent& comp);

}  // namespace stackpost
