#include "stackpost/transforms.hpp"

#include <cmath>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

// log(sigmoid(s) * (1 - sigmoid(s))), stable for large |s|.
double log_sigmoid_slope(double s) {
  const double a = std::abs(s);
  return -a - 2.0 * std::log1p(std::exp(-a));
}

double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

}  // namespace

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::identity: return "identity";
    case TransformKind::affine: return "affine";
    case TransformKind::bounded_affine: return "bounded-affine";
  }
  return "identity";
}

TransformKind transform_kind_from_string(const std::string& name) {
  if (name == "identity") return TransformKind::identity;
  if (name == "affine") return TransformKind::affine;
  if (name == "bounded-affine" || name == "bounded_affine") return TransformKind::bounded_affine;
  throw ParseError("transform.kind: unknown kind '" + name + "'");
}

ParamTransform::ParamTransform(TransformKind kind, Matrix linear, Vector offset, std::optional<Vector> lower,
                               std::optional<Vector> upper)
    : kind_(kind), linear_(std::move(linear)), offset_(std::move(offset)), lower_(std::move(lower)),
      upper_(std::move(upper)) {
  const auto d = offset_.size();
  if (d == 0) throw ArgumentError("ParamTransform: zero dimension");
  if (linear_.rows() != d || linear_.cols() != d) throw ArgumentError("ParamTransform: A must be D x D");
  if (!linear_.allFinite() || !offset_.allFinite()) throw ValidationError("ParamTransform: non-finite A or b");
  lu_.compute(linear_);
  const Vector pivots = lu_.matrixLU().diagonal();
  if ((pivots.array() == 0.0).any() || !pivots.allFinite()) {
    throw ValidationError("ParamTransform: linear map is singular");
  }
  log_abs_det_linear_ = pivots.array().abs().log().sum();
  if (kind_ == TransformKind::bounded_affine) {
    if (!lower_ || !upper_ || lower_->size() != d || upper_->size() != d) {
      throw ArgumentError("ParamTransform: bounded kind needs lower and upper of length D");
    }
    if (((*upper_ - *lower_).array() <= 0.0).any()) {
      throw ValidationError("ParamTransform: upper bound must exceed lower bound");
    }
  }
}

ParamTransform ParamTransform::identity(int dimension) {
  return {TransformKind::identity, Matrix::Identity(dimension, dimension), Vector::Zero(dimension), std::nullopt,
          std::nullopt};
}

ParamTransform ParamTransform::affine(Matrix linear, Vector offset) {
  return {TransformKind::affine, std::move(linear), std::move(offset), std::nullopt, std::nullopt};
}

ParamTransform ParamTransform::bounded_affine(Vector lower, Vector upper, Matrix linear, Vector offset) {
  return {TransformKind::bounded_affine, std::move(linear), std::move(offset), std::move(lower), std::move(upper)};
}

Vector ParamTransform::apply(const Vector& theta) const {
  if (theta.size() != dimension()) throw ArgumentError("apply: dimension mismatch");
  switch (kind_) {
    case TransformKind::identity: return theta;
    case TransformKind::affine: return linear_ * theta + offset_;
    case TransformKind::bounded_affine: {
      Vector s(theta.size());
      for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double lo = (*lower_)[i];
        const double hi = (*upper_)[i];
        if (!(theta[i] > lo && theta[i] < hi)) {
          throw DomainError("apply: coordinate " + std::to_string(i) + " outside open bounds");
        }
        s[i] = std::log(theta[i] - lo) - std::log(hi - theta[i]);
      }
      return linear_ * s + offset_;
    }
  }
  return theta;
}

Vector ParamTransform::invert(const Vector& z) const {
  if (z.size() != dimension()) throw ArgumentError("invert: dimension mismatch");
  if (kind_ == TransformKind::identity) return z;
  Vector s = lu_.solve(z - offset_);
  if (kind_ == TransformKind::affine) return s;
  Vector theta(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double lo = (*lower_)[i];
    const double hi = (*upper_)[i];
    theta[i] = lo + (hi - lo) * sigmoid(s[i]);
  }
  return theta;
}

double ParamTransform::log_abs_det_jacobian_inverse(const Vector& z) const {
  if (z.size() != dimension()) throw ArgumentError("log_abs_det_jacobian_inverse: dimension mismatch");
  switch (kind_) {
    case TransformKind::identity: return 0.0;
    case TransformKind::affine: return -log_abs_det_linear_;
    case TransformKind::bounded_affine: {
      const Vector s = lu_.solve(z - offset_);
      double acc = -log_abs_det_linear_;
      for (Eigen::Index i = 0; i < s.size(); ++i) {
        acc += std::log((*upper_)[i] - (*lower_)[i]) + log_sigmoid_slope(s[i]);
      }
      return acc;
    }
  }
  return 0.0;
}

double corrected_log_density(const ParamTransform& t, const GaussianComponent& comp, const Vector& theta) {
  const Vector z = t.apply(theta);
  return comp.log_pdf(z) - t.log_abs_det_jacobian_inverse(z);
}

double correct_expected_log_joint(const ParamTransform& t, const GaussianComponent& comp, double L_hat,
                                  const Matrix& samples) {
  if (samples.rows() == 0) throw ArgumentError("correct_expected_log_joint: empty sample set");
  if (samples.cols() != comp.dimension()) throw ArgumentError("correct_expected_log_joint: dimension mismatch");
  if (t.is_affine()) return L_hat + (t.kind() == TransformKind::identity ? 0.0 : t.log_abs_det_linear());
  double acc = 0.0;
  for (Eigen::Index s = 0; s < samples.rows(); ++s) {
    acc += t.log_abs_det_jacobian_inverse(samples.row(s).transpose());
  }
  return L_hat - acc / static_cast<double>(samples.rows());
}

GaussianComponent push_forward(const ParamTransform& t, const GaussianComponent& comp) {
  if (!t.is_affine()) throw ArgumentError("push_forward: transform is not affine");
  return {t.linear() * comp.mean() + t.offset(), symmetrize(t.linear() * comp.covariance() * t.linear().transpose())};
}

GaussianComponent pull_back(const ParamTransform& t, const GaussianComponent& comp) {
  if (!t.is_affine()) throw ArgumentError("pull_back: transform is not affine");
  const Matrix inv = t.linear().inverse();
  return {inv * (comp.mean() - t.offset()), symmetrize(inv * comp.covariance() * inv.transpose())};
}

}  // namespace stackpost
